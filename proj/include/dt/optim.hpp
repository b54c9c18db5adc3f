#pragma once

#include <cmath>
#include <vector>

#include "dt/autodiff.hpp"

namespace dt {

// Adam over a fixed parameter list. Moments live here so the optimizer can be
// checkpointed next to the model it drives.
template <class T>
class AdamT {
 public:
  AdamT() = default;
  AdamT(std::vector<ad::Var<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t j = 0; j < params_.size(); ++j) {
      auto& p = *params_[j];
      p.ensure_grad();
      for (size_t i = 0; i < p.value.numel(); ++i) {
        T g = p.grad[i];
        m_[j][i] = T(beta1_) * m_[j][i] + T(1.0 - beta1_) * g;
        v_[j][i] = T(beta2_) * v_[j][i] + T(1.0 - beta2_) * g * g;
        T mhat = m_[j][i] / T(bc1);
        T vhat = v_[j][i] / T(bc2);
        p.value[i] -= T(lr_) * mhat / (std::sqrt(vhat) + T(eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      p->ensure_grad();
      p->grad.fill(T(0));
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

  std::vector<Tensor<T>>& moments1() { return m_; }
  std::vector<Tensor<T>>& moments2() { return v_; }
  const std::vector<ad::Var<T>>& params() const { return params_; }

 private:
  std::vector<ad::Var<T>> params_;
  double lr_ = 1e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

using Adam = AdamT<real_t>;

}  // namespace dt
