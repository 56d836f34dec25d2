#pragma once
// reverse-mode autodiff values: contiguous row-major tensors over a counted
// storage pool, plus the recording graph that replays backward closures

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <vector>

#include "dualcodec/common.hpp"

namespace dualcodec {

// global byte accounting for tensor storage; the decode-memory checks read
// the high-water mark of live tensor bytes
namespace memstat {
inline std::atomic<int64_t> current_bytes{0};
inline std::atomic<int64_t> peak_bytes{0};

inline void on_alloc(int64_t n) {
  const int64_t c = current_bytes.fetch_add(n) + n;
  int64_t p = peak_bytes.load(std::memory_order_relaxed);
  while (c > p && !peak_bytes.compare_exchange_weak(p, c)) {
  }
}
inline void on_free(int64_t n) { current_bytes.fetch_sub(n); }
// restart the peak from the currently live amount
inline void reset_peak() { peak_bytes.store(current_bytes.load()); }
}  // namespace memstat

template <class T>
class Storage {
 public:
  explicit Storage(int64_t n) : data_(static_cast<size_t>(n)) {
    memstat::on_alloc(bytes());
  }
  ~Storage() { memstat::on_free(bytes()); }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t bytes() const { return size() * static_cast<int64_t>(sizeof(T)); }

 private:
  std::vector<T> data_;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
template <class T>
struct TensorNode {
  Shape shape;
  std::shared_ptr<Storage<T>> values;
  std::shared_ptr<Storage<T>> grad;  // allocated on first accumulation
  bool requires_grad = false;
};
}  // namespace detail

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::make_shared<Storage<T>>(shape_numel(t.node_->shape));
    return t;
  }
  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill_n(t.data(), t.numel(), v);
    return t;
  }
  static Tensor scalar(T v) { return full({1}, v); }
  static Tensor from(Shape shape, const std::vector<T>& vals) {
    Tensor t = zeros(std::move(shape));
    if (static_cast<int64_t>(vals.size()) != t.numel())
      throw ShapeError("tensor init size " + std::to_string(vals.size()) +
                       " does not match shape " + shape_str(t.shape()));
    std::copy(vals.begin(), vals.end(), t.data());
    return t;
  }
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      p[i] = static_cast<T>(rng.normal()) * stddev;
    return t;
  }
  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t = zeros(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      p[i] = static_cast<T>(rng.uniform(double(lo), double(hi)));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const {
    if (i < 0) i += rank();
    return node_->shape[static_cast<size_t>(i)];
  }
  int64_t numel() const { return node_->values->size(); }
  T* data() { return node_->values->data(); }
  const T* data() const { return node_->values->data(); }
  T item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return data()[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_ && node_->grad != nullptr; }
  // gradient as a tensor sharing the grad buffer; zeros if none accumulated
  Tensor grad() const {
    Tensor g;
    g.node_ = std::make_shared<detail::TensorNode<T>>();
    g.node_->shape = node_->shape;
    if (!node_->grad) node_->grad = std::make_shared<Storage<T>>(numel());
    g.node_->values = node_->grad;
    return g;
  }
  // grad buffer for accumulation, allocated (zeroed) on demand
  T* grad_data() {
    if (!node_->grad) node_->grad = std::make_shared<Storage<T>>(numel());
    return node_->grad->data();
  }
  void zero_grad() { node_->grad.reset(); }

  // same values, cut off from gradient tracking
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    return t;
  }
  Tensor clone() const {
    Tensor t = zeros(node_->shape);
    std::copy_n(data(), numel(), t.data());
    return t;
  }

  // shares storage under a new shape (no tape entry; see ops::reshape)
  Tensor viewed(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot view " + shape_str(node_->shape) + " as " +
                       shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->values = node_->values;
    t.node_->grad = node_->grad;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  std::shared_ptr<detail::TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

// ordered record of operations; constructing one makes it the active graph
// for the current thread, destruction restores the previous one
template <class T>
class Graph {
 public:
  Graph() : prev_(current()) { current() = this; }
  ~Graph() { current() = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph*& current() {
    static thread_local Graph* cur = nullptr;
    return cur;
  }

  void record(std::shared_ptr<detail::TensorNode<T>> out,
              std::vector<std::shared_ptr<detail::TensorNode<T>>> parents,
              std::function<void()> back) {
    entries_.push_back(Entry{std::move(out), std::move(parents), std::move(back)});
  }

  size_t size() const { return entries_.size(); }

  // seeds d(loss)/d(loss) = 1 and replays closures in reverse record order
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward needs a scalar loss, got " +
                       shape_str(loss.shape()));
    if (ran_backward_)
      throw StateError("backward called twice on the same graph");
    ran_backward_ = true;
    loss.grad_data()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->out->grad) it->back();
  }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorNode<T>> out;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> parents;
    std::function<void()> back;
  };
  std::vector<Entry> entries_;
  bool ran_backward_ = false;
  Graph* prev_;
};

// temporarily disables recording (teacher forward, inference inside training)
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(Graph<T>::current()) { Graph<T>::current() = nullptr; }
  ~NoGradScope() { Graph<T>::current() = prev_; }
  NoGradScope(const NoGradScope&) = delete;

 private:
  Graph<T>* prev_;
};

namespace detail {

// accumulate a same-shape gradient buffer into t's grad
template <class T>
inline void accum(Tensor<T>& t, const T* g) {
  T* dst = t.grad_data();
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

template <class T>
inline bool grad_needed(const Tensor<T>& t) {
  return Graph<T>::current() != nullptr && t.requires_grad();
}

}  // namespace detail

}  // namespace dualcodec
