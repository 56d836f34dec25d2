// Central finite-difference gradient oracle built on Catch2 assertions.
#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dualcodec/tensor.hpp"

namespace testutil {

// make_loss must recompute the scalar loss from the current contents of the
// inputs. Each input must have requires_grad set. Gradients agree when
// |analytic - fd| is within tol of their magnitude (with a small absolute
// floor for near-zero pairs).
template <class LossFn>
inline void fd_check(LossFn make_loss, std::vector<dualcodec::Tensor<double>> inputs,
                     double tol = 1e-3, double h = 1e-4) {
  using dualcodec::Graph;
  using dualcodec::Tensor;

  std::vector<std::vector<double>> analytic;
  {
    for (auto& in : inputs) in.zero_grad();  // stale grads would accumulate
    Graph<double> g;
    Tensor<double> loss = make_loss();
    g.backward(loss);
    for (auto& in : inputs) {
      Tensor<double> gr = in.grad();
      analytic.emplace_back(gr.data(), gr.data() + gr.numel());
    }
  }
  for (size_t t = 0; t < inputs.size(); ++t) {
    Tensor<double>& in = inputs[t];
    for (int64_t i = 0; i < in.numel(); ++i) {
      const double keep = in.data()[i];
      in.data()[i] = keep + h;
      const double lp = make_loss().item();
      in.data()[i] = keep - h;
      const double lm = make_loss().item();
      in.data()[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[t][size_t(i)];
      const double err = std::abs(an - fd);
      INFO("input " << t << " element " << i << ": analytic " << an << " fd "
                    << fd);
      CHECK(err <= std::max(tol * std::max(std::abs(an), std::abs(fd)), 1e-6));
    }
  }
}

}  // namespace testutil
