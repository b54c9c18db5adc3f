#pragma once

#include <cmath>

#include "dt/networks.hpp"

// Intra-domain teacher: EMA tracking of the student, Monte-Carlo-dropout
// entropy maps, and the uncertainty-masked consistency loss with the ramp
// schedules that gate it.

namespace dt {

template <class T>
struct EmaStateT {
  SegmenterT<T> teacher;
  double alpha = 0.99;
  int64_t step = 0;

  EmaStateT() = default;
  // teacher starts as an exact copy of the student
  EmaStateT(const SegmenterT<T>& student, double a) : alpha(a) {
    teacher = SegmenterT<T>(student.cfg, Rng(0));
    teacher.params().write(student.params().read());
    teacher.bayes_mode = true;
  }
};

using EmaState = EmaStateT<real_t>;

// theta' <- alpha * theta' + (1 - alpha) * theta, elementwise.
template <class T>
void ema_update(EmaStateT<T>& state, const std::vector<NamedTensor<T>>& student_params) {
  auto& entries = state.teacher.params().entries();
  if (student_params.size() != entries.size())
    throw StructuralError("ema_update: parameter count mismatch");
  T a = T(state.alpha), b = T(1.0 - state.alpha);
  for (size_t i = 0; i < entries.size(); ++i) {
    auto& tv = entries[i].second->value;
    const auto& sv = student_params[i].value;
    if (student_params[i].name != entries[i].first || sv.shape != tv.shape)
      throw StructuralError("ema_update: mismatch at parameter '" + entries[i].first + "'");
    for (size_t j = 0; j < tv.numel(); ++j) tv[j] = a * tv[j] + b * sv[j];
  }
  ++state.step;
}

template <class T>
struct UncertaintyResult {
  Tensor<T> mean_probs;  // [N,C,H,W]
  Tensor<T> entropy;     // [N,H,W], each value in [0, ln C]
};

template <class T>
Tensor<T> add_input_noise(const Tensor<T>& x, double std, Rng& rng) {
  Tensor<T> out(x);
  if (std > 0)
    for (auto& v : out.data) v += T(rng.normal(0.0, std));
  return out;
}

// Per-pixel predictive entropy of a probability map, natural log with
// 0*log0 := 0. Bounded by ln C.
template <class T>
Tensor<T> entropy_map(const Tensor<T>& probs) {
  require(probs.shape.size() == 4, "entropy_map expects NCHW probabilities");
  int N = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  int HW = H * W;
  Tensor<T> ent({N, H, W});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < HW; ++i) {
      double u = 0;
      for (int c = 0; c < C; ++c) {
        double m = double(probs[(size_t(n) * C + c) * HW + i]);
        if (m > 0) u -= m * std::log(m);
      }
      ent[size_t(n) * HW + i] = T(u);
    }
  return ent;
}

// Mean softmax over n_passes stochastic forwards (dropout + input noise),
// then the entropy of that mean.
template <class T>
UncertaintyResult<T> mc_uncertainty(const SegmenterT<T>& teacher, const Tensor<T>& x_u, int n_passes,
                                    double noise_std, Rng& rng) {
  if (n_passes < 1) throw ConfigError("mc_uncertainty: n_passes must be >= 1");
  require(teacher.bayes_mode, "mc_uncertainty: teacher must be in bayes mode");
  int N = x_u.dim(0), C = teacher.cfg.num_classes, H = x_u.dim(2), W = x_u.dim(3);
  Tensor<T> mean({N, C, H, W});
  for (int p = 0; p < n_passes; ++p) {
    auto noisy = add_input_noise(x_u, noise_std, rng);
    auto probs = ad::softmax_tensor(teacher.forward(noisy, /*stochastic=*/true, &rng)->value);
    for (size_t i = 0; i < mean.numel(); ++i) mean[i] += probs[i] / T(n_passes);
  }
  Tensor<T> ent = entropy_map(mean);
  return {std::move(mean), std::move(ent)};
}

template <class T>
struct MaskedConsistency {
  ad::Var<T> loss;
  double mask_coverage = 0;  // fraction of pixels kept
  bool empty_mask = false;
};

// Mean over low-uncertainty pixels of the channel-summed squared error
// between the two perturbed predictions. The teacher side is a plain
// tensor, so no gradient flows into it.
template <class T>
MaskedConsistency<T> masked_consistency_loss(const ad::Var<T>& student_probs,
                                             const Tensor<T>& teacher_probs, const Tensor<T>& entropy,
                                             double u_thre) {
  if (student_probs->value.shape != teacher_probs.shape)
    throw StructuralError("masked_consistency_loss: prediction shape mismatch");
  int N = student_probs->value.dim(0), H = student_probs->value.dim(2), W = student_probs->value.dim(3);
  if (entropy.shape != Shape({N, H, W}))
    throw StructuralError("masked_consistency_loss: uncertainty map shape mismatch");
  Tensor<T> mask({N, 1, H, W});
  size_t kept = 0;
  for (size_t i = 0; i < entropy.numel(); ++i) {
    bool keep = double(entropy[i]) < u_thre;
    mask[i] = keep ? T(1) : T(0);
    kept += keep;
  }
  MaskedConsistency<T> out;
  out.mask_coverage = double(kept) / double(entropy.numel());
  if (kept == 0) {
    out.loss = ad::scalar(T(0));
    out.empty_mask = true;
    return out;
  }
  using namespace ad;
  auto diff = sub(student_probs, constant(Tensor<T>(teacher_probs)));
  auto sq = sum_c(mul(diff, diff));                       // [N,1,H,W]
  auto masked = mul(sq, constant(std::move(mask)));
  out.loss = mul_scalar(sum_all(masked), T(1.0 / double(kept)));
  return out;
}

// ---- ramp schedules ----

enum class RampKind { lambda_con, u_thre };

// Both ramps share the usual exp(-5 (1 - t/t_max)^2) shape; past t_max they
// hold their final value.
struct RampSchedule {
  RampKind kind = RampKind::lambda_con;
  int t_max = 50;
  double u_max = std::log(8.0);  // only used by the threshold ramp

  double value(double t) const {
    if (t < 0) throw ConfigError("schedule: negative epoch");
    double u = std::min(t, double(t_max)) / double(t_max);
    double ramp = std::exp(-5.0 * (1.0 - u) * (1.0 - u));
    return kind == RampKind::lambda_con ? 0.1 * ramp : (0.75 + 0.25 * ramp) * u_max;
  }
};

inline double schedule_value(const RampSchedule& s, double t) { return s.value(t); }

}  // namespace dt
