#pragma once
// Adam-family optimizer (RAdam rectification optional), cosine learning-rate
// decay, and an exponential moving average of parameters for evaluation.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dualcodec/net.hpp"

namespace dualcodec {

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool radam = true;       // apply variance rectification; plain Adam if false
  bool cosine = true;      // cosine decay of lr to 0 over total_steps
  int64_t total_steps = 1; // schedule length; ignored when cosine is false
};

template <class T>
class Optimizer {
 public:
  Optimizer(const ParamStore<T>& params, OptimConfig cfg) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0)) throw ConfigError("optimizer lr must be positive");
    if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 &&
          cfg_.beta2 < 1.0))
      throw ConfigError("optimizer betas must lie in [0,1)");
    if (cfg_.cosine && cfg_.total_steps < 1)
      throw ConfigError("cosine schedule needs total_steps >= 1");
    for (const auto& [name, p] : params.entries()) {
      m_.push_back(std::vector<double>(size_t(p.numel()), 0.0));
      v_.push_back(std::vector<double>(size_t(p.numel()), 0.0));
    }
  }

  int64_t step_count() const { return step_; }

  // lr after `done` completed steps (cosine decay reaches 0 at total_steps)
  double lr_at(int64_t done) const {
    if (!cfg_.cosine) return cfg_.lr;
    const double u =
        std::min(1.0, std::max(0.0, double(done) / double(cfg_.total_steps)));
    return cfg_.lr * 0.5 * (1.0 + std::cos(u * 3.14159265358979323846));
  }

  // one update over every parameter; missing grads count as zero
  void step(ParamStore<T>& params) {
    const auto& entries = params.entries();
    if (entries.size() != m_.size())
      throw UsageError("optimizer built for " + std::to_string(m_.size()) +
                       " parameters, got " + std::to_string(entries.size()));
    const double lr = lr_at(step_);
    const int64_t t = step_ + 1;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bias1 = 1.0 - std::pow(b1, double(t));
    const double bias2 = 1.0 - std::pow(b2, double(t));

    // RAdam: rectify the adaptive step only once the variance estimate is
    // reliable (rho > 4); fall back to the unadapted momentum step before
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho = rho_inf - 2.0 * double(t) * std::pow(b2, double(t)) /
                                     (1.0 - std::pow(b2, double(t)));
    double rect = 1.0;
    bool adaptive = true;
    if (cfg_.radam) {
      if (rho > 4.0) {
        rect = std::sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf) /
                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
      } else {
        adaptive = false;
      }
    }

    for (size_t i = 0; i < entries.size(); ++i) {
      auto p = entries[i].second;  // shares the parameter node
      const int64_t n = p.numel();
      const bool has = p.has_grad();
      const T* g = has ? p.grad().data() : nullptr;
      if (has) {
        for (int64_t j = 0; j < n; ++j)
          if (!std::isfinite(double(g[j])))
            throw DataError("non-finite gradient in parameter '" +
                            entries[i].first + "' at optimizer step " +
                            std::to_string(t));
      }
      double* m = m_[i].data();
      double* v = v_[i].data();
      T* w = p.data();
      for (int64_t j = 0; j < n; ++j) {
        const double gj = has ? double(g[j]) : 0.0;
        m[j] = b1 * m[j] + (1.0 - b1) * gj;
        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
        const double mh = m[j] / bias1;
        double upd;
        if (adaptive) {
          const double vh = std::sqrt(v[j] / bias2) + cfg_.eps;
          upd = rect * mh / vh;
        } else {
          upd = mh;
        }
        w[j] = T(double(w[j]) - lr * upd);
      }
    }
    ++step_;
  }

 private:
  OptimConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

template <class T>
void zero_grads(ParamStore<T>& params) {
  for (const auto& [name, p] : params.entries()) {
    auto q = p;
    q.zero_grad();
  }
}

// shadow parameters updated as shadow <- mu*shadow + (1-mu)*param
template <class T>
class EmaState {
 public:
  EmaState(const ParamStore<T>& params, double momentum) : mu_(momentum) {
    if (!(mu_ > 0.0 && mu_ < 1.0))
      throw ConfigError("ema momentum must lie in (0,1), got " +
                        std::to_string(mu_));
    for (const auto& [name, p] : params.entries())
      shadow_.emplace_back(name, p.clone());
  }

  double momentum() const { return mu_; }
  std::vector<std::pair<std::string, Tensor<T>>>& shadow() { return shadow_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& shadow() const {
    return shadow_;
  }

  void update(const ParamStore<T>& params) {
    const auto& entries = params.entries();
    if (entries.size() != shadow_.size())
      throw UsageError("ema built for " + std::to_string(shadow_.size()) +
                       " parameters, got " + std::to_string(entries.size()));
    for (size_t i = 0; i < entries.size(); ++i) {
      const Tensor<T>& p = entries[i].second;
      Tensor<T>& s = shadow_[i].second;
      if (p.numel() != s.numel())
        throw ShapeError("ema shadow shape drifted for '" + entries[i].first +
                         "'");
      T* sd = s.data();
      const T* pd = p.data();
      for (int64_t j = 0; j < p.numel(); ++j)
        sd[j] = T(mu_ * double(sd[j]) + (1.0 - mu_) * double(pd[j]));
    }
  }

  // overwrite live parameters with the shadow (for evaluation)
  void copy_to(ParamStore<T>& params) const {
    const auto& entries = params.entries();
    if (entries.size() != shadow_.size())
      throw UsageError("ema/param count mismatch");
    for (size_t i = 0; i < entries.size(); ++i) {
      Tensor<T> p = entries[i].second;
      const Tensor<T>& s = shadow_[i].second;
      if (p.numel() != s.numel())
        throw ShapeError("ema shadow shape drifted for '" + entries[i].first +
                         "'");
      std::copy_n(s.data(), s.numel(), p.data());
    }
  }

 private:
  double mu_;
  std::vector<std::pair<std::string, Tensor<T>>> shadow_;
};

}  // namespace dualcodec
