#pragma once

#include <sstream>

#include "dt/networks.hpp"
#include "dt/optim.hpp"

// Inter-domain teacher: hybrid segmentation loss on translated source
// samples and density-ratio-weighted distillation of its soft outputs into
// the student.

namespace dt {

inline constexpr double kLogEps = 1e-7;     // clamp inside loss logs
inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kWeightClampEps = 1e-3;

// Cross-entropy of integer labels plus soft Dice, both on probabilities.
// Dice pools over batch and space per class, then averages classes.
template <class T>
ad::Var<T> hybrid_seg_loss(const ad::Var<T>& probs, const Tensor<uint8_t>& labels) {
  require(probs->value.shape.size() == 4, "hybrid_seg_loss expects NCHW probs");
  int N = probs->value.dim(0), C = probs->value.dim(1), H = probs->value.dim(2), W = probs->value.dim(3);
  if (labels.shape != Shape({N, H, W}))
    throw StructuralError("hybrid_seg_loss: label shape " + shape_str(labels.shape) +
                          " does not match probs " + shape_str(probs->value.shape));
  using namespace ad;
  auto picked = gather_label(probs, labels);  // validates label range
  auto ce = neg(mean_all(log_v(clamp_v(picked, T(kLogEps), T(1)))));

  auto onehot = one_hot<T>(labels, C);
  Tensor<T> gt_sums({C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = onehot.ptr() + (size_t(n) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) gt_sums[size_t(c)] += src[i];
    }
  auto inter = sum_nhw(mul(probs, constant(std::move(onehot))));       // [C]
  auto num = add_scalar(mul_scalar(inter, T(2)), T(kDiceSmooth));
  auto den = add_scalar(add(sum_nhw(probs), constant(std::move(gt_sums))), T(kDiceSmooth));
  auto dice = add_scalar(neg(mean_all(div(num, den))), T(1));
  return add(ce, dice);
}

// Density-ratio surrogate w = d / (1 - d), with d pre-clamped away from the
// poles and the ratio capped.
struct ImportanceWeight {
  double raw_d_score = 0;
  double weight = 0;
  bool clamped = false;
};

inline ImportanceWeight importance_weight(double d_score, double w_max = 10.0) {
  if (!std::isfinite(d_score)) throw NonFiniteError("importance_weight: non-finite discriminator score");
  ImportanceWeight w;
  w.raw_d_score = d_score;
  double d = std::min(1.0 - kWeightClampEps, std::max(kWeightClampEps, d_score));
  double raw = d / (1.0 - d);
  w.clamped = raw > w_max;
  w.weight = w.clamped ? w_max : raw;
  return w;
}

// Teacher soft labels; plain tensors, so no gradient can reach the teacher.
template <class T>
struct SoftTargetT {
  Tensor<T> probs;  // [N,C,H,W], rows sum to 1
};

using SoftTarget = SoftTargetT<real_t>;

template <class T>
SoftTargetT<T> make_soft_targets(const SegmenterT<T>& teacher, const Tensor<T>& images) {
  auto logits = teacher.forward(images, /*stochastic=*/false);
  return {ad::softmax_tensor(logits->value)};
}

// Per-sample importance-weighted distillation cross-entropy: the per-pixel
// CE is summed over classes, averaged over pixels, then weighted and
// averaged over the batch. Optional renormalization divides by the mean
// weight so the overall scale stays comparable to the unweighted loss.
template <class T>
ad::Var<T> weighted_kd_loss(const SoftTargetT<T>& teacher, const ad::Var<T>& student_probs,
                            const std::vector<ImportanceWeight>& weights, bool renormalize = false) {
  require(teacher.probs.shape == student_probs->value.shape,
          "weighted_kd_loss: teacher/student shape mismatch");
  int N = student_probs->value.dim(0);
  if (int(weights.size()) != N)
    throw StructuralError("weighted_kd_loss: " + std::to_string(weights.size()) + " weights for batch of " +
                          std::to_string(N));
  using namespace ad;
  auto ce_map = neg(mul(constant(Tensor<T>(teacher.probs)),
                        log_v(clamp_v(student_probs, T(kLogEps), T(1)))));
  auto per_pixel = sum_c(ce_map);                 // [N,1,H,W]
  auto per_sample = mean_per_sample(per_pixel);   // [N]
  std::vector<T> w(weights.size());
  double wsum = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    w[i] = T(weights[i].weight / double(N));
    wsum += weights[i].weight;
  }
  auto loss = dot_const(per_sample, w);
  if (renormalize && wsum > 0) loss = mul_scalar(loss, T(double(N) / wsum));
  return loss;
}

// One supervised step of the inter-domain teacher on translated source
// samples paired with their source labels.
template <class T>
double inter_teacher_step(SegmenterT<T>& teacher, const Tensor<T>& synthetic_images,
                          const Tensor<uint8_t>& labels, AdamT<T>& opt, Rng& rng) {
  auto logits = teacher.forward(synthetic_images, /*stochastic=*/true, &rng);
  auto loss = hybrid_seg_loss(ad::softmax_ch(logits), labels);
  double v = double(loss->value[0]);
  if (!is_finite(v)) {
    std::ostringstream os;
    os << "inter-domain teacher diverged: seg loss=" << v;
    throw NonFiniteError(os.str());
  }
  opt.zero_grad();
  ad::backward(loss);
  opt.step();
  return v;
}

}  // namespace dt
