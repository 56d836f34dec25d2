#pragma once
// tensor operations: a blocked GEMM, im2col convolutions, broadcast
// elementwise ops, normalization, fused masked attention, and reductions —
// each recording a backward closure when an input requires grad

#include <cmath>
#include <cstring>
#include <limits>

#include "dualcodec/tensor.hpp"

namespace dualcodec {

// ---------------------------------------------------------------- kernels

namespace kern {

// C = alpha * op(A) * op(B) + beta * C, row-major, BLAS-style leading dims
template <class T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha,
          const T* A, int64_t lda, const T* B, int64_t ldb, T beta, T* C,
          int64_t ldc) {
  parallel_for(m, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* c = C + i * ldc;
      if (beta == T(0))
        std::fill_n(c, n, T(0));
      else if (beta != T(1))
        for (int64_t j = 0; j < n; ++j) c[j] *= beta;
      if (!ta && !tb) {
        const T* a = A + i * lda;
        // no zero-skip: 0 * nan must stay nan so poisoned values surface
        for (int64_t p = 0; p < k; ++p) {
          const T av = alpha * a[p];
          const T* b = B + p * ldb;
          for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
      } else if (!ta && tb) {
        const T* a = A + i * lda;
        for (int64_t j = 0; j < n; ++j) {
          const T* b = B + j * ldb;
          T acc = T(0);
          for (int64_t p = 0; p < k; ++p) acc += a[p] * b[p];
          c[j] += alpha * acc;
        }
      } else if (ta && !tb) {
        for (int64_t p = 0; p < k; ++p) {
          const T av = alpha * A[p * lda + i];
          const T* b = B + p * ldb;
          for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
      } else {
        for (int64_t j = 0; j < n; ++j) {
          T acc = T(0);
          for (int64_t p = 0; p < k; ++p) acc += A[p * lda + i] * B[j * ldb + p];
          c[j] += alpha * acc;
        }
      }
    }
  });
}

// unfold conv patches: col is [C*kh*kw x Ho*Wo]
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int kh, int kw,
            int sh, int sw, int ph, int pw, int64_t Ho, int64_t Wo, T* col) {
  for (int64_t c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * sh - ph + ki;
          T* r = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill_n(r, Wo, T(0));
            continue;
          }
          const T* xr = xc + ih * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * sw - pw + kj;
            r[ow] = (iw >= 0 && iw < W) ? xr[iw] : T(0);
          }
        }
      }
    }
  }
}

// scatter-add the unfolded patches back (adjoint of im2col)
template <class T>
void col2im(const T* col, int64_t C, int64_t H, int64_t W, int kh, int kw,
            int sh, int sw, int ph, int pw, int64_t Ho, int64_t Wo, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    T* xc = x + c * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * sh - ph + ki;
          if (ih < 0 || ih >= H) continue;
          const T* r = row + oh * Wo;
          T* xr = xc + ih * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * sw - pw + kj;
            if (iw >= 0 && iw < W) xr[iw] += r[ow];
          }
        }
      }
    }
  }
}

}  // namespace kern

// ------------------------------------------------------------- broadcast

namespace detail {

struct BCastPlan {
  Shape out;
  std::vector<int64_t> sa, sb;  // element strides aligned to out rank, 0 = broadcast
};

inline BCastPlan broadcast_plan(const Shape& a, const Shape& b) {
  const int ra = int(a.size()), rb = int(b.size());
  const int r = std::max(ra, rb);
  BCastPlan p;
  p.out.resize(r);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  // right-aligned dims
  for (int i = 0; i < r; ++i) {
    const int64_t da = i < ra ? a[ra - 1 - i] : 1;
    const int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    p.out[r - 1 - i] = std::max(da, db);
  }
  int64_t st = 1;
  for (int i = ra - 1; i >= 0; --i) {
    const int o = r - ra + i;
    p.sa[o] = (a[i] == 1 && p.out[o] != 1) ? 0 : st;
    st *= a[i];
  }
  st = 1;
  for (int i = rb - 1; i >= 0; --i) {
    const int o = r - rb + i;
    p.sb[o] = (b[i] == 1 && p.out[o] != 1) ? 0 : st;
    st *= b[i];
  }
  return p;
}

// apply f over the broadcast of a and b; inner loop runs over the last dim
template <class T, class F>
void bcast_apply(const BCastPlan& p, const T* a, const T* b, T* o, F f) {
  const int r = int(p.out.size());
  const int64_t inner = p.out[r - 1];
  const int64_t outer = shape_numel(p.out) / inner;
  const int64_t la = p.sa[r - 1], lb = p.sb[r - 1];
  std::vector<int64_t> coord(size_t(r > 1 ? r - 1 : 0), 0);
  int64_t oa = 0, ob = 0;
  T* op = o;
  for (int64_t it = 0; it < outer; ++it) {
    const T* pa = a + oa;
    const T* pb = b + ob;
    if (la == 1 && lb == 1)
      for (int64_t j = 0; j < inner; ++j) op[j] = f(pa[j], pb[j]);
    else if (la == 1 && lb == 0)
      for (int64_t j = 0; j < inner; ++j) op[j] = f(pa[j], *pb);
    else if (la == 0 && lb == 1)
      for (int64_t j = 0; j < inner; ++j) op[j] = f(*pa, pb[j]);
    else
      for (int64_t j = 0; j < inner; ++j) op[j] = f(*pa, *pb);
    op += inner;
    // odometer over the outer dims
    for (int d = r - 2; d >= 0; --d) {
      oa += p.sa[d];
      ob += p.sb[d];
      if (++coord[d] < p.out[d]) break;
      coord[d] = 0;
      oa -= p.sa[d] * p.out[d];
      ob -= p.sb[d] * p.out[d];
    }
  }
}

// contiguous element strides for a shape (inner dim stride 1)
inline std::vector<int64_t> dense_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int i = int(s.size()) - 1; i >= 0; --i) {
    st[size_t(i)] = acc;
    acc *= s[size_t(i)];
  }
  return st;
}

// reduce src (shaped like plan.out) into the grad buffer of t, whose shape
// broadcasts to plan.out with the given strides
template <class T>
void reduce_into(const BCastPlan& p, const std::vector<int64_t>& strides,
                 const T* src, T* dst) {
  const int r = int(p.out.size());
  const int64_t inner = p.out[r - 1];
  const int64_t outer = shape_numel(p.out) / inner;
  const int64_t ls = strides[r - 1];
  std::vector<int64_t> coord(size_t(r > 1 ? r - 1 : 0), 0);
  int64_t od = 0;
  const T* sp = src;
  for (int64_t it = 0; it < outer; ++it) {
    if (ls == 1) {
      T* d = dst + od;
      for (int64_t j = 0; j < inner; ++j) d[j] += sp[j];
    } else {
      T acc = T(0);
      for (int64_t j = 0; j < inner; ++j) acc += sp[j];
      dst[od] += acc;
    }
    sp += inner;
    for (int d = r - 2; d >= 0; --d) {
      od += strides[d];
      if (++coord[d] < p.out[d]) break;
      coord[d] = 0;
      od -= strides[d] * p.out[d];
    }
  }
}

template <class T>
const T* out_grad(const Tensor<T>& t) {
  return t.node()->grad->data();
}

template <class T, class F>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f) {
  const BCastPlan p = broadcast_plan(a.shape(), b.shape());
  Tensor<T> out = Tensor<T>::zeros(p.out);
  if (a.shape() == b.shape()) {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  } else {
    bcast_apply(p, a.data(), b.data(), out.data(), f);
  }
  return out;
}

}  // namespace detail

// ------------------------------------------------------- elementwise ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x + y; });
  if (Graph<T>* g = Graph<T>::current();
      g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    const detail::BCastPlan p = detail::broadcast_plan(a.shape(), b.shape());
    g->record(out.node(), {a.node(), b.node()}, [ta, tb, to, p]() mutable {
      const T* go = detail::out_grad(to);
      if (ta.requires_grad()) detail::reduce_into(p, p.sa, go, ta.grad_data());
      if (tb.requires_grad()) detail::reduce_into(p, p.sb, go, tb.grad_data());
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x - y; });
  if (Graph<T>* g = Graph<T>::current();
      g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    const detail::BCastPlan p = detail::broadcast_plan(a.shape(), b.shape());
    g->record(out.node(), {a.node(), b.node()}, [ta, tb, to, p]() mutable {
      const T* go = detail::out_grad(to);
      if (ta.requires_grad()) detail::reduce_into(p, p.sa, go, ta.grad_data());
      if (tb.requires_grad()) {
        std::vector<T> neg(size_t(to.numel()));
        for (int64_t i = 0; i < to.numel(); ++i) neg[size_t(i)] = -go[i];
        detail::reduce_into(p, p.sb, neg.data(), tb.grad_data());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x * y; });
  if (Graph<T>* g = Graph<T>::current();
      g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    const detail::BCastPlan p = detail::broadcast_plan(a.shape(), b.shape());
    // go is out-shaped, so it walks densely; the co-factor keeps its strides
    const std::vector<int64_t> so = detail::dense_strides(p.out);
    g->record(out.node(), {a.node(), b.node()}, [ta, tb, to, p, so]() mutable {
      const T* go = detail::out_grad(to);
      if (ta.requires_grad()) {
        std::vector<T> tmp(size_t(to.numel()));
        const detail::BCastPlan q{p.out, so, p.sb};
        detail::bcast_apply(q, go, tb.data(), tmp.data(),
                            [](T g_, T y) { return g_ * y; });
        detail::reduce_into(p, p.sa, tmp.data(), ta.grad_data());
      }
      if (tb.requires_grad()) {
        std::vector<T> tmp(size_t(to.numel()));
        const detail::BCastPlan q{p.out, so, p.sa};
        detail::bcast_apply(q, go, ta.data(), tmp.data(),
                            [](T g_, T x) { return g_ * x; });
        detail::reduce_into(p, p.sb, tmp.data(), tb.grad_data());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary_op(a, b, [](T x, T y) { return x / y; });
  if (Graph<T>* g = Graph<T>::current();
      g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    const detail::BCastPlan p = detail::broadcast_plan(a.shape(), b.shape());
    const std::vector<int64_t> so = detail::dense_strides(p.out);
    g->record(out.node(), {a.node(), b.node()}, [ta, tb, to, p, so]() mutable {
      const T* go = detail::out_grad(to);
      if (ta.requires_grad()) {
        std::vector<T> tmp(size_t(to.numel()));
        const detail::BCastPlan q{p.out, so, p.sb};
        detail::bcast_apply(q, go, tb.data(), tmp.data(),
                            [](T g_, T y) { return g_ / y; });
        detail::reduce_into(p, p.sa, tmp.data(), ta.grad_data());
      }
      if (tb.requires_grad()) {
        // d/db (a/b) = -a / b^2, evaluated on the broadcast grid
        std::vector<T> tmp(size_t(to.numel()));
        detail::bcast_apply(p, ta.data(), tb.data(), tmp.data(),
                            [](T x, T y) { return -x / (y * y); });
        for (int64_t i = 0; i < to.numel(); ++i) tmp[size_t(i)] *= go[i];
        detail::reduce_into(p, p.sb, tmp.data(), tb.grad_data());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = a.clone();
  T* p = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) p[i] += s;
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      detail::accum(ta, detail::out_grad(to));
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = a.clone();
  T* p = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) p[i] *= s;
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to, s]() mutable {
      const T* go = detail::out_grad(to);
      T* dst = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i) dst[i] += go[i] * s;
    });
  }
  return out;
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::tanh(pa[i]);
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      const T* go = detail::out_grad(to);
      const T* y = to.data();
      T* dst = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i)
        dst[i] += go[i] * (T(1) - y[i] * y[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> atanh(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (!(pa[i] > T(-1) && pa[i] < T(1)))
      throw DomainError("atanh input out of (-1,1): " + std::to_string(pa[i]));
    po[i] = std::atanh(pa[i]);
  }
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      const T* go = detail::out_grad(to);
      const T* x = ta.data();
      T* dst = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i)
        dst[i] += go[i] / (T(1) - x[i] * x[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (pa[i] < T(0))
      throw DomainError("sqrt of negative value " + std::to_string(pa[i]));
    po[i] = std::sqrt(pa[i]);
  }
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      const T* go = detail::out_grad(to);
      const T* y = to.data();
      T* dst = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i)
        dst[i] += go[i] / (T(2) * y[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (int64_t i = 0; i < a.numel(); ++i)
    po[i] = T(0.5) * pa[i] * (T(1) + std::erf(pa[i] * inv_sqrt2));
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      const T* go = detail::out_grad(to);
      const T* x = ta.data();
      T* dst = ta.grad_data();
      const T inv_sqrt2 = T(0.7071067811865475244);
      const T inv_sqrt2pi = T(0.3989422804014326779);
      for (int64_t i = 0; i < ta.numel(); ++i) {
        const T phi = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dst[i] += go[i] * (phi + x[i] * pdf);
      }
    });
  }
  return out;
}

// quantizer rounding with a straight-through (identity) gradient;
// round-half-away-from-zero so token packing is platform-stable
template <class T>
Tensor<T> ste_round(const Tensor<T>& a, int n) {
  if (n < 1) throw ConfigError("ste_round needs n >= 1");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const T tn = T(n);
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::round(tn * pa[i]) / tn;
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      detail::accum(ta, detail::out_grad(to));
    });
  }
  return out;
}

// per-row (dim-0) choice between two same-shape tensors; gradients follow
// the chosen row
template <class T>
Tensor<T> select_rows(const std::vector<uint8_t>& take_a, const Tensor<T>& a,
                      const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("select_rows shapes differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const int64_t rows = a.dim(0);
  if (int64_t(take_a.size()) != rows)
    throw ShapeError("select_rows mask length " +
                     std::to_string(take_a.size()) + " for " +
                     std::to_string(rows) + " rows");
  const int64_t stride = a.numel() / rows;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = (take_a[size_t(r)] ? a.data() : b.data()) + r * stride;
    std::copy_n(src, stride, out.data() + r * stride);
  }
  if (Graph<T>* g = Graph<T>::current();
      g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    g->record(out.node(), {a.node(), b.node()},
              [ta, tb, to, take_a, rows, stride]() mutable {
                const T* go = detail::out_grad(to);
                for (int64_t r = 0; r < rows; ++r) {
                  Tensor<T>& dst = take_a[size_t(r)] ? ta : tb;
                  if (!dst.requires_grad()) continue;
                  T* gd = dst.grad_data() + r * stride;
                  const T* gs = go + r * stride;
                  for (int64_t i = 0; i < stride; ++i) gd[i] += gs[i];
                }
              });
  }
  return out;
}

// ------------------------------------------------------------ structural

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  // -1 wildcard on a single axis
  int64_t known = 1, wild = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (wild >= 0) throw ShapeError("reshape with two wildcards");
      wild = int64_t(i);
    } else {
      known *= shape[i];
    }
  }
  if (wild >= 0) shape[size_t(wild)] = a.numel() / known;
  if (shape_numel(shape) != a.numel())
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " +
                     shape_str(shape));
  Tensor<T> out = a.detach().viewed(shape);  // new node, shared values
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      detail::accum(ta, detail::out_grad(to));
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  Shape shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r)
      throw ShapeError("concat rank mismatch: " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    for (int i = 0; i < r; ++i)
      if (i != axis && p.shape()[size_t(i)] != shape[size_t(i)])
        throw ShapeError("concat shape mismatch: " + shape_str(shape) +
                         " vs " + shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  shape[size_t(axis)] = axis_total;
  Tensor<T> out = Tensor<T>::zeros(shape);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[size_t(i)];
  for (int i = axis + 1; i < r; ++i) inner *= shape[size_t(i)];
  const int64_t out_row = axis_total * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t blk = p.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * blk, blk, out.data() + o * out_row + off);
    off += blk;
  }

  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Graph<T>* g = Graph<T>::current(); g && any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    std::vector<Tensor<T>> tp = parts;
    Tensor<T> to = out;
    g->record(out.node(), nodes, [tp, to, outer, inner, out_row]() mutable {
      const T* go = detail::out_grad(to);
      int64_t off = 0;
      for (auto& p : tp) {
        const int64_t blk = p.numel() / outer;
        if (p.requires_grad()) {
          T* gd = p.grad_data();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = go + o * out_row + off;
            T* dst = gd + o * blk;
            for (int64_t i = 0; i < blk; ++i) dst[i] += src[i];
          }
        }
        off += blk;
      }
      (void)inner;
    });
  }
  return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    throw ShapeError("slice [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " +
                     shape_str(a.shape()) + " axis " + std::to_string(axis));
  Shape shape = a.shape();
  shape[size_t(axis)] = len;
  Tensor<T> out = Tensor<T>::zeros(shape);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape()[size_t(i)];
  for (int i = axis + 1; i < r; ++i) inner *= a.shape()[size_t(i)];
  const int64_t in_row = a.dim(axis) * inner;
  const int64_t out_blk = len * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.data() + o * in_row + start * inner, out_blk,
                out.data() + o * out_blk);
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()},
              [ta, to, outer, inner, in_row, out_blk, start]() mutable {
                const T* go = detail::out_grad(to);
                T* gd = ta.grad_data();
                for (int64_t o = 0; o < outer; ++o) {
                  T* dst = gd + o * in_row + start * inner;
                  const T* src = go + o * out_blk;
                  for (int64_t i = 0; i < out_blk; ++i) dst[i] += src[i];
                }
              });
  }
  return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (int(perm.size()) != r)
    throw ShapeError("permute order size " + std::to_string(perm.size()) +
                     " for rank " + std::to_string(r));
  Shape shape(perm.size());
  for (int i = 0; i < r; ++i) shape[size_t(i)] = a.dim(perm[size_t(i)]);

  // strides of the source walked in output order
  std::vector<int64_t> src_strides(size_t(r), 1);
  {
    std::vector<int64_t> st(size_t(r), 1);
    for (int i = r - 2; i >= 0; --i)
      st[size_t(i)] = st[size_t(i + 1)] * a.dim(i + 1);
    for (int i = 0; i < r; ++i) src_strides[size_t(i)] = st[size_t(perm[size_t(i)])];
  }
  Tensor<T> out = Tensor<T>::zeros(shape);
  const T* src = a.data();
  T* dst = out.data();
  std::vector<int64_t> coord(size_t(r), 0);
  int64_t so = 0;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = src[so];
    for (int d = r - 1; d >= 0; --d) {
      so += src_strides[size_t(d)];
      if (++coord[size_t(d)] < shape[size_t(d)]) break;
      coord[size_t(d)] = 0;
      so -= src_strides[size_t(d)] * shape[size_t(d)];
    }
  }
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()},
              [ta, to, src_strides, shape, r]() mutable {
                const T* go = detail::out_grad(to);
                T* gd = ta.grad_data();
                std::vector<int64_t> coord(size_t(r), 0);
                int64_t so = 0;
                const int64_t n = to.numel();
                for (int64_t i = 0; i < n; ++i) {
                  gd[so] += go[i];
                  for (int d = r - 1; d >= 0; --d) {
                    so += src_strides[size_t(d)];
                    if (++coord[size_t(d)] < shape[size_t(d)]) break;
                    coord[size_t(d)] = 0;
                    so -= src_strides[size_t(d)] * shape[size_t(d)];
                  }
                }
              });
  }
  return out;
}

// ------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  const T* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to]() mutable {
      const T go = detail::out_grad(to)[0];
      T* dst = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i) dst[i] += go;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / T(a.numel());
  T acc = T(0);
  const T* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to, inv]() mutable {
      const T go = detail::out_grad(to)[0] * inv;
      T* dst = ta.grad_data();
      for (int64_t i = 0; i < ta.numel(); ++i) dst[i] += go;
    });
  }
  return out;
}

// per-row sum over all trailing dims: [d0, ...] -> [d0]
template <class T>
Tensor<T> sum_trailing(const Tensor<T>& a) {
  const int64_t rows = a.dim(0);
  const int64_t stride = a.numel() / rows;
  Tensor<T> out = Tensor<T>::zeros({rows});
  T* po = out.data();
  const T* pa = a.data();
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* row = pa + r * stride;
    for (int64_t i = 0; i < stride; ++i) acc += row[i];
    po[r] = acc;
  }
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to, rows, stride]() mutable {
      const T* go = detail::out_grad(to);
      T* dst = ta.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        T* row = dst + r * stride;
        for (int64_t i = 0; i < stride; ++i) row[i] += go[r];
      }
    });
  }
  return out;
}

// --------------------------------------------------------------- matmul

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  if (b.rank() == 2) {
    const int64_t k = a.dim(-1), n = b.dim(1);
    if (k != b.dim(0))
      throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    const int64_t m = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    kern::gemm(false, false, m, n, k, T(1), a.data(), k, b.data(), n, T(0),
               out.data(), n);
    if (Graph<T>* g = Graph<T>::current();
        g && (a.requires_grad() || b.requires_grad())) {
      out.set_requires_grad(true);
      Tensor<T> ta = a, tb = b, to = out;
      g->record(out.node(), {a.node(), b.node()},
                [ta, tb, to, m, n, k]() mutable {
                  const T* go = detail::out_grad(to);
                  if (ta.requires_grad())  // dA = dC * B^T
                    kern::gemm(false, true, m, k, n, T(1), go, n, tb.data(), n,
                               T(1), ta.grad_data(), k);
                  if (tb.requires_grad())  // dB = A^T * dC
                    kern::gemm(true, false, k, n, m, T(1), ta.data(), k, go, n,
                               T(1), tb.grad_data(), n);
                });
    }
    return out;
  }
  // batched [B,m,k] x [B,k,n]
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw ShapeError("matmul batch shapes incompatible: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out = Tensor<T>::zeros({bs, m, n});
  for (int64_t i = 0; i < bs; ++i)
    kern::gemm(false, false, m, n, k, T(1), a.data() + i * m * k, k,
               b.data() + i * k * n, n, T(0), out.data() + i * m * n, n);
  if (Graph<T>* g = Graph<T>::current();
      g && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tb = b, to = out;
    g->record(out.node(), {a.node(), b.node()},
              [ta, tb, to, bs, m, n, k]() mutable {
                const T* go = detail::out_grad(to);
                for (int64_t i = 0; i < bs; ++i) {
                  if (ta.requires_grad())
                    kern::gemm(false, true, m, k, n, T(1), go + i * m * n, n,
                               tb.data() + i * k * n, n, T(1),
                               ta.grad_data() + i * m * k, k);
                  if (tb.requires_grad())
                    kern::gemm(true, false, k, n, m, T(1), ta.data() + i * m * k,
                               k, go + i * m * n, n, T(1),
                               tb.grad_data() + i * k * n, n);
                }
              });
  }
  return out;
}

// ----------------------------------------------------------- convolutions

namespace detail {
struct ConvGeom {
  int64_t N, Ci, H, W, Co, Ho, Wo;
  int kh, kw, sh, sw, ph, pw;
};
}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int sh, int sw, int ph, int pw) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d expects [N,C,H,W] and [Co,Ci,kh,kw]: " +
                     shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  detail::ConvGeom gm;
  gm.N = x.dim(0);
  gm.Ci = x.dim(1);
  gm.H = x.dim(2);
  gm.W = x.dim(3);
  gm.Co = w.dim(0);
  gm.kh = int(w.dim(2));
  gm.kw = int(w.dim(3));
  gm.sh = sh;
  gm.sw = sw;
  gm.ph = ph;
  gm.pw = pw;
  if (w.dim(1) != gm.Ci)
    throw ShapeError("conv2d channel mismatch: " + shape_str(x.shape()) +
                     " vs " + shape_str(w.shape()));
  gm.Ho = (gm.H + 2 * ph - gm.kh) / sh + 1;
  gm.Wo = (gm.W + 2 * pw - gm.kw) / sw + 1;
  if (gm.Ho < 1 || gm.Wo < 1)
    throw ShapeError("conv2d output would be empty for input " +
                     shape_str(x.shape()));

  const int64_t ckk = gm.Ci * gm.kh * gm.kw;
  const int64_t spatial = gm.Ho * gm.Wo;
  Tensor<T> out = Tensor<T>::zeros({gm.N, gm.Co, gm.Ho, gm.Wo});
  {
    Tensor<T> col = Tensor<T>::zeros({ckk, spatial});
    for (int64_t nidx = 0; nidx < gm.N; ++nidx) {
      kern::im2col(x.data() + nidx * gm.Ci * gm.H * gm.W, gm.Ci, gm.H, gm.W,
                   gm.kh, gm.kw, sh, sw, ph, pw, gm.Ho, gm.Wo, col.data());
      kern::gemm(false, false, gm.Co, spatial, ckk, T(1), w.data(), ckk,
                 col.data(), spatial, T(0),
                 out.data() + nidx * gm.Co * spatial, spatial);
    }
  }
  if (bias.defined()) {
    if (bias.numel() != gm.Co)
      throw ShapeError("conv2d bias shape " + shape_str(bias.shape()) +
                       " for " + std::to_string(gm.Co) + " channels");
    T* po = out.data();
    const T* pb = bias.data();
    for (int64_t nidx = 0; nidx < gm.N; ++nidx)
      for (int64_t c = 0; c < gm.Co; ++c) {
        const T bv = pb[c];
        T* row = po + (nidx * gm.Co + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) row[i] += bv;
      }
  }

  const bool need = x.requires_grad() || w.requires_grad() ||
                    (bias.defined() && bias.requires_grad());
  if (Graph<T>* g = Graph<T>::current(); g && need) {
    out.set_requires_grad(true);
    Tensor<T> tx = x, tw = w, tb = bias, to = out;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> parents{x.node(),
                                                                w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    g->record(out.node(), parents, [tx, tw, tb, to, gm, ckk, spatial]() mutable {
      const T* go = detail::out_grad(to);
      Tensor<T> col = Tensor<T>::zeros({ckk, spatial});
      for (int64_t nidx = 0; nidx < gm.N; ++nidx) {
        const T* gon = go + nidx * gm.Co * spatial;
        if (tw.requires_grad()) {
          kern::im2col(tx.data() + nidx * gm.Ci * gm.H * gm.W, gm.Ci, gm.H,
                       gm.W, gm.kh, gm.kw, gm.sh, gm.sw, gm.ph, gm.pw, gm.Ho,
                       gm.Wo, col.data());
          kern::gemm(false, true, gm.Co, ckk, spatial, T(1), gon, spatial,
                     col.data(), spatial, T(1), tw.grad_data(), ckk);
        }
        if (tx.requires_grad()) {
          kern::gemm(true, false, ckk, spatial, gm.Co, T(1), tw.data(), ckk,
                     gon, spatial, T(0), col.data(), spatial);
          kern::col2im(col.data(), gm.Ci, gm.H, gm.W, gm.kh, gm.kw, gm.sh,
                       gm.sw, gm.ph, gm.pw, gm.Ho, gm.Wo,
                       tx.grad_data() + nidx * gm.Ci * gm.H * gm.W);
        }
      }
      if (tb.defined() && tb.requires_grad()) {
        T* gb = tb.grad_data();
        for (int64_t nidx = 0; nidx < gm.N; ++nidx)
          for (int64_t c = 0; c < gm.Co; ++c) {
            const T* row = go + (nidx * gm.Co + c) * spatial;
            T acc = T(0);
            for (int64_t i = 0; i < spatial; ++i) acc += row[i];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

// weight layout [Ci, Co, kh, kw]; output spatial = (in-1)*stride - 2*pad + k
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& bias, int sh, int sw, int ph,
                            int pw) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("transposed_conv2d expects [N,C,H,W] and [Ci,Co,kh,kw]: " +
                     shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  detail::ConvGeom gm;
  gm.N = x.dim(0);
  gm.Ci = x.dim(1);
  gm.H = x.dim(2);   // input spatial = conv-output grid
  gm.W = x.dim(3);
  gm.Co = w.dim(1);
  gm.kh = int(w.dim(2));
  gm.kw = int(w.dim(3));
  gm.sh = sh;
  gm.sw = sw;
  gm.ph = ph;
  gm.pw = pw;
  if (w.dim(0) != gm.Ci)
    throw ShapeError("transposed_conv2d channel mismatch: " +
                     shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  gm.Ho = (gm.H - 1) * sh - 2 * ph + gm.kh;
  gm.Wo = (gm.W - 1) * sw - 2 * pw + gm.kw;
  if (gm.Ho < 1 || gm.Wo < 1)
    throw ShapeError("transposed_conv2d output would be empty for input " +
                     shape_str(x.shape()));

  const int64_t ckk = gm.Co * gm.kh * gm.kw;  // unfolded rows over *output* channels
  const int64_t spatial = gm.H * gm.W;
  Tensor<T> out = Tensor<T>::zeros({gm.N, gm.Co, gm.Ho, gm.Wo});
  {
    Tensor<T> col = Tensor<T>::zeros({ckk, spatial});
    for (int64_t nidx = 0; nidx < gm.N; ++nidx) {
      // col = W^T [ckk x Ci] * x_n [Ci x spatial]
      kern::gemm(true, false, ckk, spatial, gm.Ci, T(1), w.data(), ckk,
                 x.data() + nidx * gm.Ci * spatial, spatial, T(0), col.data(),
                 spatial);
      kern::col2im(col.data(), gm.Co, gm.Ho, gm.Wo, gm.kh, gm.kw, sh, sw, ph,
                   pw, gm.H, gm.W, out.data() + nidx * gm.Co * gm.Ho * gm.Wo);
    }
  }
  if (bias.defined()) {
    if (bias.numel() != gm.Co)
      throw ShapeError("transposed_conv2d bias shape " +
                       shape_str(bias.shape()) + " for " +
                       std::to_string(gm.Co) + " channels");
    const int64_t osp = gm.Ho * gm.Wo;
    T* po = out.data();
    const T* pb = bias.data();
    for (int64_t nidx = 0; nidx < gm.N; ++nidx)
      for (int64_t c = 0; c < gm.Co; ++c) {
        const T bv = pb[c];
        T* row = po + (nidx * gm.Co + c) * osp;
        for (int64_t i = 0; i < osp; ++i) row[i] += bv;
      }
  }

  const bool need = x.requires_grad() || w.requires_grad() ||
                    (bias.defined() && bias.requires_grad());
  if (Graph<T>* g = Graph<T>::current(); g && need) {
    out.set_requires_grad(true);
    Tensor<T> tx = x, tw = w, tb = bias, to = out;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> parents{x.node(),
                                                                w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    g->record(out.node(), parents, [tx, tw, tb, to, gm, ckk, spatial]() mutable {
      const T* go = detail::out_grad(to);
      const int64_t osp = gm.Ho * gm.Wo;
      Tensor<T> col = Tensor<T>::zeros({ckk, spatial});
      for (int64_t nidx = 0; nidx < gm.N; ++nidx) {
        // unfold the output-grid gradient like a forward conv input
        kern::im2col(go + nidx * gm.Co * osp, gm.Co, gm.Ho, gm.Wo, gm.kh,
                     gm.kw, gm.sh, gm.sw, gm.ph, gm.pw, gm.H, gm.W, col.data());
        if (tx.requires_grad())
          kern::gemm(false, false, gm.Ci, spatial, ckk, T(1), tw.data(), ckk,
                     col.data(), spatial, T(1),
                     tx.grad_data() + nidx * gm.Ci * spatial, spatial);
        if (tw.requires_grad())
          kern::gemm(false, true, gm.Ci, ckk, spatial, T(1),
                     tx.data() + nidx * gm.Ci * spatial, spatial, col.data(),
                     spatial, T(1), tw.grad_data(), ckk);
      }
      if (tb.defined() && tb.requires_grad()) {
        T* gb = tb.grad_data();
        for (int64_t nidx = 0; nidx < gm.N; ++nidx)
          for (int64_t c = 0; c < gm.Co; ++c) {
            const T* row = go + (nidx * gm.Co + c) * osp;
            T acc = T(0);
            for (int64_t i = 0; i < osp; ++i) acc += row[i];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------- normalization

template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = pa + r * d;
    T* y = po + r * d;
    T mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T z = T(0);
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    const T inv = T(1) / z;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  if (Graph<T>* g = Graph<T>::current(); g && a.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, to = out;
    g->record(out.node(), {a.node()}, [ta, to, rows, d]() mutable {
      const T* go = detail::out_grad(to);
      const T* y = to.data();
      T* dst = ta.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * d;
        const T* gr = go + r * d;
        T dot = T(0);
        for (int64_t i = 0; i < d; ++i) dot += yr[i] * gr[i];
        T* dr = dst + r * d;
        for (int64_t i = 0; i < d; ++i) dr[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const int64_t d = a.dim(-1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm affine shapes " + shape_str(gamma.shape()) +
                     "/" + shape_str(beta.shape()) + " for width " +
                     std::to_string(d));
  const int64_t rows = a.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  Tensor<T> xhat = Tensor<T>::zeros(a.shape());
  Tensor<T> inv_std = Tensor<T>::zeros({rows});
  const T* pa = a.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  T* ph = xhat.data();
  T* pi = inv_std.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = pa + r * d;
    T mu = T(0);
    for (int64_t i = 0; i < d; ++i) mu += x[i];
    mu /= T(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    pi[r] = is;
    T* h = ph + r * d;
    T* y = po + r * d;
    for (int64_t i = 0; i < d; ++i) {
      h[i] = (x[i] - mu) * is;
      y[i] = h[i] * pg[i] + pb[i];
    }
  }
  const bool need =
      a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  if (Graph<T>* g = Graph<T>::current(); g && need) {
    out.set_requires_grad(true);
    Tensor<T> ta = a, tg = gamma, tb = beta, to = out;
    g->record(out.node(), {a.node(), gamma.node(), beta.node()},
              [ta, tg, tb, to, xhat, inv_std, rows, d]() mutable {
                const T* go = detail::out_grad(to);
                const T* h = xhat.data();
                const T* is = inv_std.data();
                const T* pg = tg.data();
                for (int64_t r = 0; r < rows; ++r) {
                  const T* gr = go + r * d;
                  const T* hr = h + r * d;
                  if (ta.requires_grad()) {
                    T m1 = T(0), m2 = T(0);
                    for (int64_t i = 0; i < d; ++i) {
                      const T dh = gr[i] * pg[i];
                      m1 += dh;
                      m2 += dh * hr[i];
                    }
                    m1 /= T(d);
                    m2 /= T(d);
                    T* dx = ta.grad_data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                      const T dh = gr[i] * pg[i];
                      dx[i] += is[r] * (dh - m1 - hr[i] * m2);
                    }
                  }
                  if (tg.requires_grad()) {
                    T* dg = tg.grad_data();
                    for (int64_t i = 0; i < d; ++i) dg[i] += gr[i] * hr[i];
                  }
                  if (tb.requires_grad()) {
                    T* db = tb.grad_data();
                    for (int64_t i = 0; i < d; ++i) db[i] += gr[i];
                  }
                }
              });
  }
  return out;
}

// ---------------------------------------------------------------- attention

// q,k,v: [B, H, L, Dh]; mask: [Lq, Lk] additive, -inf entries are skipped
// entirely (their keys' bits never touch allowed outputs)
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, const Tensor<T>& mask) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
    throw ShapeError("attention expects [B,H,L,Dh]: " + shape_str(q.shape()) +
                     ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const int64_t B = q.dim(0), H = q.dim(1), Lq = q.dim(2), Dh = q.dim(3);
  const int64_t Lk = k.dim(2);
  if (k.dim(0) != B || k.dim(1) != H || k.dim(3) != Dh || v.dim(0) != B ||
      v.dim(1) != H || v.dim(2) != Lk || v.dim(3) != Dh)
    throw ShapeError("attention shape mismatch: " + shape_str(q.shape()) +
                     ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  if (mask.defined() && (mask.rank() != 2 || mask.dim(0) != Lq || mask.dim(1) != Lk))
    throw ShapeError("attention mask " + shape_str(mask.shape()) +
                     " for Lq=" + std::to_string(Lq) +
                     " Lk=" + std::to_string(Lk));

  const T scale = T(1) / std::sqrt(T(Dh));
  Tensor<T> out = Tensor<T>::zeros(q.shape());
  Tensor<T> probs = Tensor<T>::zeros({B, H, Lq, Lk});
  const T* pm = mask.defined() ? mask.data() : nullptr;
  const T neg_inf = -std::numeric_limits<T>::infinity();

  parallel_for(B * H, [&](int64_t bh0, int64_t bh1) {
    std::vector<T> scores(static_cast<size_t>(Lk));
    for (int64_t bh = bh0; bh < bh1; ++bh) {
      const T* qb = q.data() + bh * Lq * Dh;
      const T* kb = k.data() + bh * Lk * Dh;
      const T* vb = v.data() + bh * Lk * Dh;
      T* ob = out.data() + bh * Lq * Dh;
      T* pb = probs.data() + bh * Lq * Lk;
      for (int64_t i = 0; i < Lq; ++i) {
        const T* qi = qb + i * Dh;
        const T* mrow = pm ? pm + i * Lk : nullptr;
        T mx = neg_inf;
        for (int64_t j = 0; j < Lk; ++j) {
          if (mrow && mrow[j] == neg_inf) continue;
          const T* kj = kb + j * Dh;
          T s = T(0);
          for (int64_t t = 0; t < Dh; ++t) s += qi[t] * kj[t];
          s = s * scale + (mrow ? mrow[j] : T(0));
          scores[size_t(j)] = s;
          mx = std::max(mx, s);
        }
        T* pi = pb + i * Lk;
        T* oi = ob + i * Dh;
        if (mx == neg_inf) continue;  // fully masked query: zero output
        T z = T(0);
        for (int64_t j = 0; j < Lk; ++j) {
          if (mrow && mrow[j] == neg_inf) continue;
          pi[j] = std::exp(scores[size_t(j)] - mx);
          z += pi[j];
        }
        const T inv = T(1) / z;
        for (int64_t j = 0; j < Lk; ++j) {
          if (mrow && mrow[j] == neg_inf) continue;
          pi[j] *= inv;
          const T* vj = vb + j * Dh;
          const T pij = pi[j];
          for (int64_t t = 0; t < Dh; ++t) oi[t] += pij * vj[t];
        }
      }
    }
  });

  const bool need =
      q.requires_grad() || k.requires_grad() || v.requires_grad();
  if (Graph<T>* g = Graph<T>::current(); g && need) {
    out.set_requires_grad(true);
    Tensor<T> tq = q, tk = k, tv = v, tm = mask, to = out;
    g->record(
        out.node(), {q.node(), k.node(), v.node()},
        [tq, tk, tv, tm, to, probs, B, H, Lq, Lk, Dh, scale]() mutable {
          const T neg_inf = -std::numeric_limits<T>::infinity();
          const T* pm = tm.defined() ? tm.data() : nullptr;
          const T* go = detail::out_grad(to);
          T* gq = tq.requires_grad() ? tq.grad_data() : nullptr;
          T* gk = tk.requires_grad() ? tk.grad_data() : nullptr;
          T* gv = tv.requires_grad() ? tv.grad_data() : nullptr;
          parallel_for(B * H, [&](int64_t bh0, int64_t bh1) {
            std::vector<T> dp(static_cast<size_t>(Lk));
            for (int64_t bh = bh0; bh < bh1; ++bh) {
              const T* qb = tq.data() + bh * Lq * Dh;
              const T* kb = tk.data() + bh * Lk * Dh;
              const T* vb = tv.data() + bh * Lk * Dh;
              const T* pb = probs.data() + bh * Lq * Lk;
              const T* gb = go + bh * Lq * Dh;
              for (int64_t i = 0; i < Lq; ++i) {
                const T* mrow = pm ? pm + i * Lk : nullptr;
                const T* pi = pb + i * Lk;
                const T* gi = gb + i * Dh;
                const T* qi = qb + i * Dh;
                T sdot = T(0);
                for (int64_t j = 0; j < Lk; ++j) {
                  if (mrow && mrow[j] == neg_inf) continue;
                  const T* vj = vb + j * Dh;
                  T acc = T(0);
                  for (int64_t t = 0; t < Dh; ++t) acc += gi[t] * vj[t];
                  dp[size_t(j)] = acc;
                  sdot += pi[j] * acc;
                }
                for (int64_t j = 0; j < Lk; ++j) {
                  if (mrow && mrow[j] == neg_inf) continue;
                  const T ds = pi[j] * (dp[size_t(j)] - sdot) * scale;
                  const T* kj = kb + j * Dh;
                  if (gq) {
                    T* gqi = gq + bh * Lq * Dh + i * Dh;
                    for (int64_t t = 0; t < Dh; ++t) gqi[t] += ds * kj[t];
                  }
                  if (gk) {
                    T* gkj = gk + bh * Lk * Dh + j * Dh;
                    for (int64_t t = 0; t < Dh; ++t) gkj[t] += ds * qi[t];
                  }
                  if (gv) {
                    T* gvj = gv + bh * Lk * Dh + j * Dh;
                    const T pij = pi[j];
                    for (int64_t t = 0; t < Dh; ++t) gvj[t] += pij * gi[t];
                  }
                }
              }
            }
          });
        });
  }
  return out;
}

}  // namespace dualcodec
