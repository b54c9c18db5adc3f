#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dt/autodiff.hpp"

// Shared test utilities. The finite-difference checker runs in double; the
// op templates are the same code the float build instantiates.

namespace dtest {

using dt::Tensor;
using dt::ad::Var;

// Central-difference gradient of f w.r.t. every entry of every param.
// Returns the largest relative error max|a - n| / max(1, |a| + |n|).
// h stays small so kinked activations (relu family) are rarely straddled.
inline double gradcheck(const std::vector<Var<double>>& params,
                        const std::function<Var<double>()>& f, double h = 1e-6) {
  for (auto& p : params) {
    p->ensure_grad();
    p->grad.fill(0.0);
  }
  auto loss = f();
  dt::ad::backward(loss);
  double worst = 0.0;
  for (auto& p : params) {
    for (size_t i = 0; i < p->value.numel(); ++i) {
      double keep = p->value[i];
      double step = h * std::max(1.0, std::abs(keep));
      p->value[i] = keep + step;
      double up = f()->value[0];
      p->value[i] = keep - step;
      double dn = f()->value[0];
      p->value[i] = keep;
      double numeric = (up - dn) / (2.0 * step);
      double analytic = p->grad[i];
      double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(dt::Shape s, dt::Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Move a network off its zero-initialized biases before finite-difference
// checks; at the exact zeros a relu receptive field of all-zero activations
// puts the loss on a kink where one-sided and central slopes disagree.
inline void jitter_params(const std::vector<Var<double>>& params, dt::Rng& rng, double scale = 0.02) {
  for (auto& p : params)
    for (auto& v : p->value.data) v += rng.uniform(-scale, scale);
}

}  // namespace dtest
