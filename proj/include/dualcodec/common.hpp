// Shared basics: error types, deterministic RNG, and a small parallel-for.
#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dualcodec {

// ---------------------------------------------------------------- errors

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error { using Error::Error; };   // bad configuration value
struct ShapeError : Error { using Error::Error; };    // dimension mismatch
struct StateError : Error { using Error::Error; };    // operation in wrong state
struct DataError : Error { using Error::Error; };     // malformed data values
struct DomainError : Error { using Error::Error; };   // argument outside domain
struct LengthError : Error { using Error::Error; };   // input too short
struct UsageError : Error { using Error::Error; };    // API misuse
struct IoError : Error { using Error::Error; };       // file format / IO failure
struct MagicError : IoError { using IoError::IoError; }; // unrecognized file signature
struct SymmetryError : Error { using Error::Error; }; // patchifier level mismatch

// ---------------------------------------------------------------- rng

// Deterministic RNG. Distributions are hand-rolled so sequences are
// reproducible bit-for-bit across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(splitmix(seed + 0x9e3779b97f4a7c15ull)) {}

  uint64_t next_u64() {
    // xorshift* seeded via splitmix; period is ample for desk-scale runs
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // uniform in [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal via Box-Muller (no caching, one draw per call)
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // independent stream derived from this RNG's seed lineage and a salt;
  // decode paths use it for per-chunk noise so prefixes are stable
  Rng derive(uint64_t salt) const {
    Rng r;
    r.state_ = splitmix(state_ ^ splitmix(salt));
    return r;
  }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    x = x ^ (x >> 31);
    return x ? x : 0x1ull;
  }

  uint64_t state_;
};

// ---------------------------------------------------------------- threading

// Worker count: DUALCODEC_THREADS env var if set, else hardware concurrency.
inline int worker_count() {
  static int n = [] {
    if (const char* env = std::getenv("DUALCODEC_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
  }();
  return n;
}

namespace detail {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(worker_count());
    return pool;
  }

  int size() const { return static_cast<int>(threads_.size()) + 1; }

  // Runs fn(worker_id) on workers 1..n-1 and inline for worker 0; blocks
  // until all are done. Only one parallel section runs at a time.
  void run(const std::function<void(int)>& fn) {
    std::lock_guard<std::mutex> section(section_mu_);
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = &fn;
      pending_ = static_cast<int>(threads_.size());
      ++epoch_;
    }
    cv_.notify_all();
    fn(0);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  explicit ThreadPool(int n) {
    for (int i = 1; i < n; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void worker_loop(int id) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* job = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        if (stop_) return;
        seen = epoch_;
        job = job_;
      }
      if (job) (*job)(id);
      {
        std::lock_guard<std::mutex> lk(mu_);
        --pending_;
      }
      done_cv_.notify_one();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex section_mu_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(int)>* job_ = nullptr;
  int pending_ = 0;
  uint64_t epoch_ = 0;
  bool stop_ = false;
};

} // namespace detail

// Splits [0, n) into one contiguous range per worker and runs
// fn(begin, end) on each. Ranges are fixed by index, so writes to
// disjoint outputs are deterministic regardless of scheduling.
template <class Fn>
void parallel_for(int64_t n, Fn&& fn) {
  if (n <= 0) return;
  auto& pool = detail::ThreadPool::instance();
  const int workers = pool.size();
  if (workers == 1 || n == 1) {
    fn(int64_t{0}, n);
    return;
  }
  const int64_t chunk = (n + workers - 1) / workers;
  std::function<void(int)> job = [&](int w) {
    const int64_t b = w * chunk;
    const int64_t e = std::min<int64_t>(n, b + chunk);
    if (b < e) fn(b, e);
  };
  pool.run(job);
}

} // namespace dualcodec
