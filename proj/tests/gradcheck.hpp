#pragma once

// Finite-difference gradient oracle for the autodiff engine. Kept independent
// of the backward implementations it checks: numeric gradients come only from
// forward evaluations.

#include <cmath>
#include <functional>
#include <vector>

#include "p2v/ops.hpp"
#include "p2v/tensor.hpp"

namespace p2v::testing {

using DTensor = TensorT<double>;

// |analytic - numeric| / max(1, |analytic|, |numeric|): relative error for
// large gradients, absolute for small ones.
inline double grad_rel_err(double analytic, double numeric) {
  const double scale =
      std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

// fn must rebuild the full forward pass from the current contents of the
// inputs on every call and return a scalar loss. Returns the worst
// elementwise relative error across all inputs.
inline double gradcheck(const std::function<DTensor()>& fn,
                        std::vector<DTensor> inputs, double h = 1e-6) {
  for (auto& input : inputs) input.zero_grad();
  DTensor loss = fn();
  loss.backward();

  double worst = 0.0;
  for (auto& input : inputs) {
    std::vector<double> analytic(input.numel(), 0.0);
    if (input.has_grad()) {
      const auto g = input.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto vals = input.mutable_values();
    for (int64_t i = 0; i < input.numel(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = fn().item();
      vals[i] = orig - h;
      const double down = fn().item();
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, grad_rel_err(analytic[i], numeric));
    }
  }
  return worst;
}

// Weighted sum with fixed pseudo-random weights, to exercise the whole
// Jacobian rather than the uniform row sum.
inline DTensor weighted_sum(const DTensor& x, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(x.numel());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  DTensor weights = DTensor::from_values(x.shape(), std::move(w));
  return sum_all(mul(x, weights));
}

}  // namespace p2v::testing
