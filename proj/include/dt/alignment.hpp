#pragma once

#include <sstream>

#include "dt/networks.hpp"
#include "dt/optim.hpp"

// Appearance alignment module: a cycle-consistent translator pair with one
// discriminator per domain. Discriminator outputs are reduced to one
// patch-averaged probability per sample everywhere, so the same scalar feeds
// both the adversarial terms and the downstream importance weights.

namespace dt {

inline constexpr double kProbClamp = 1e-3;  // keeps every log term finite

// Historical fake pool from the reference translator implementation: the
// discriminators train on a mix of current and past fakes, which keeps them
// from racing ahead of the generators.
template <class T>
struct FakePoolT {
  size_t capacity = 50;
  std::vector<Tensor<T>> images;  // single samples [1,1,H,W]
  Rng rng{0};

  // Returns the batch the discriminator should see for this step.
  Tensor<T> query(const Tensor<T>& batch) {
    if (capacity == 0) return batch;
    int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    size_t plane = size_t(C) * H * W;
    Tensor<T> out(batch.shape);
    for (int n = 0; n < N; ++n) {
      Tensor<T> cur({1, C, H, W});
      std::copy(batch.data.begin() + size_t(n) * plane, batch.data.begin() + size_t(n + 1) * plane,
                cur.data.begin());
      if (images.size() < capacity) {
        images.push_back(cur);
        std::copy(cur.data.begin(), cur.data.end(), out.data.begin() + size_t(n) * plane);
      } else if (rng.uniform() < 0.5) {
        size_t k = size_t(rng.uniform_index(images.size()));
        std::copy(images[k].data.begin(), images[k].data.end(), out.data.begin() + size_t(n) * plane);
        images[k] = cur;
      } else {
        std::copy(cur.data.begin(), cur.data.end(), out.data.begin() + size_t(n) * plane);
      }
    }
    return out;
  }
};

template <class T>
struct AAMStateT {
  GeneratorT<T> g_s2t, g_t2s;
  DiscriminatorT<T> d_s, d_t;
  T lambda_cyc = T(10);
  FakePoolT<T> pool_t, pool_s;  // fakes shown to d_t / d_s

  AAMStateT() = default;
  AAMStateT(const GeneratorConfig& gc, const DiscriminatorConfig& dc, T lam, Rng rng)
      : g_s2t(gc, GenDirection::source_to_target, rng.fork("g_s2t")),
        g_t2s(gc, GenDirection::target_to_source, rng.fork("g_t2s")),
        d_s(dc, DiscDomain::source, rng.fork("d_s")),
        d_t(dc, DiscDomain::target, rng.fork("d_t")),
        lambda_cyc(lam) {
    pool_t.rng = rng.fork("pool_t");
    pool_s.rng = rng.fork("pool_s");
  }
};

using AAMState = AAMStateT<real_t>;

namespace aam_detail {

template <class T>
ad::Var<T> log_clamped(const ad::Var<T>& p) {
  return ad::log_v(ad::clamp_v(p, T(kProbClamp), T(1.0 - kProbClamp)));
}

template <class T>
void check_batch(const Tensor<T>& b, const char* name) {
  if (b.shape.size() != 4 || b.dim(0) == 0) throw ConfigError(std::string(name) + ": empty batch");
}

}  // namespace aam_detail

// E[log d] + E[log(1 - d_fake)] on per-sample scores in (0,1); the clamp
// keeps both logs finite in the saturated limits.
template <class T>
ad::Var<T> adv_objective(const ad::Var<T>& real_scores, const ad::Var<T>& fake_scores) {
  using namespace ad;
  return add(mean_all(aam_detail::log_clamped(real_scores)),
             mean_all(aam_detail::log_clamped(add_scalar(neg(fake_scores), T(1)))));
}

// The two adversarial objectives, evaluated as written with patch-averaged
// D. Discriminators maximize these; generators minimize the non-saturating
// form inside aam_step.
template <class T>
std::pair<ad::Var<T>, ad::Var<T>> adv_loss(const AAMStateT<T>& state, const Tensor<T>& batch_s,
                                           const Tensor<T>& batch_t) {
  aam_detail::check_batch(batch_s, "adv_loss source");
  aam_detail::check_batch(batch_t, "adv_loss target");
  using namespace ad;
  auto fake_t = state.g_s2t.forward_var(constant(Tensor<T>(batch_s)));
  auto fake_s = state.g_t2s.forward_var(constant(Tensor<T>(batch_t)));
  auto loss_t = adv_objective(state.d_t.score_var(constant(Tensor<T>(batch_t))),
                              state.d_t.score_var(fake_t));
  auto loss_s = adv_objective(state.d_s.score_var(constant(Tensor<T>(batch_s))),
                              state.d_s.score_var(fake_s));
  return {loss_t, loss_s};
}

// Mean L1 reconstruction error of both cycles.
template <class T>
ad::Var<T> cycle_loss(const AAMStateT<T>& state, const Tensor<T>& batch_s, const Tensor<T>& batch_t) {
  aam_detail::check_batch(batch_s, "cycle_loss source");
  aam_detail::check_batch(batch_t, "cycle_loss target");
  using namespace ad;
  auto xs = constant(Tensor<T>(batch_s)), xt = constant(Tensor<T>(batch_t));
  auto rec_s = state.g_t2s.forward_var(state.g_s2t.forward_var(xs));
  auto rec_t = state.g_s2t.forward_var(state.g_t2s.forward_var(xt));
  return add(mean_all(abs_v(sub(rec_s, xs))), mean_all(abs_v(sub(rec_t, xt))));
}

template <class T>
struct AAMLoss {
  ad::Var<T> total, adv, cyc;
};

// total = adv + lambda_cyc * cyc, built exactly that way so the additivity
// identity is checkable by recomputation.
template <class T>
AAMLoss<T> aam_loss(const AAMStateT<T>& state, const Tensor<T>& batch_s, const Tensor<T>& batch_t) {
  auto [adv_t, adv_s] = adv_loss(state, batch_s, batch_t);
  auto adv = ad::add(adv_t, adv_s);
  auto cyc = cycle_loss(state, batch_s, batch_t);
  return {ad::add(adv, ad::mul_scalar(cyc, state.lambda_cyc)), adv, cyc};
}

// Immutable snapshot handed to the distillation stage.
template <class T>
struct SyntheticBatchT {
  Tensor<T> images;             // x^{s->t}, detached
  std::vector<double> d_scores; // patch-averaged D_t per sample, in (0,1)
};

using SyntheticBatch = SyntheticBatchT<real_t>;

template <class T>
struct AAMStepStats {
  double loss_g = 0;      // non-saturating adversarial + cycle
  double loss_d = 0;
  double loss_adv_t = 0;  // the objectives as written
  double loss_adv_s = 0;
  double loss_cyc = 0;
};

// One generator update followed by one discriminator update. The
// discriminator trains on the fakes produced before the generator step and
// its loss is halved, as in standard cycle-consistent translator training.
template <class T>
AAMStepStats<T> aam_step(AAMStateT<T>& state, const Tensor<T>& batch_s, const Tensor<T>& batch_t,
                         AdamT<T>& gen_opt, AdamT<T>& disc_opt, SyntheticBatchT<T>* out_synth) {
  aam_detail::check_batch(batch_s, "aam_step source");
  aam_detail::check_batch(batch_t, "aam_step target");
  using namespace ad;
  AAMStepStats<T> stats;

  // generator phase
  auto xs = constant(Tensor<T>(batch_s)), xt = constant(Tensor<T>(batch_t));
  auto fake_t = state.g_s2t.forward_var(xs);
  auto fake_s = state.g_t2s.forward_var(xt);
  auto g_adv = add(neg(mean_all(aam_detail::log_clamped(state.d_t.score_var(fake_t)))),
                   neg(mean_all(aam_detail::log_clamped(state.d_s.score_var(fake_s)))));
  auto rec_s = state.g_t2s.forward_var(fake_t);
  auto rec_t = state.g_s2t.forward_var(fake_s);
  auto cyc = add(mean_all(abs_v(sub(rec_s, xs))), mean_all(abs_v(sub(rec_t, xt))));
  auto g_total = add(g_adv, mul_scalar(cyc, state.lambda_cyc));
  stats.loss_g = double(g_total->value[0]);
  stats.loss_cyc = double(cyc->value[0]);
  gen_opt.zero_grad();
  backward(g_total);
  gen_opt.step();

  // discriminator phase, on pooled pre-update fakes
  auto fake_t_c = constant(state.pool_t.query(fake_t->value));
  auto fake_s_c = constant(state.pool_s.query(fake_s->value));
  auto d_t_loss = add(neg(mean_all(aam_detail::log_clamped(state.d_t.score_var(xt)))),
                      neg(mean_all(aam_detail::log_clamped(
                          add_scalar(neg(state.d_t.score_var(fake_t_c)), T(1))))));
  auto d_s_loss = add(neg(mean_all(aam_detail::log_clamped(state.d_s.score_var(xs)))),
                      neg(mean_all(aam_detail::log_clamped(
                          add_scalar(neg(state.d_s.score_var(fake_s_c)), T(1))))));
  auto d_total = mul_scalar(add(d_t_loss, d_s_loss), T(0.5));
  stats.loss_d = double(d_total->value[0]);
  disc_opt.zero_grad();
  backward(d_total);
  disc_opt.step();

  auto [adv_t_now, adv_s_now] = adv_loss(state, batch_s, batch_t);
  stats.loss_adv_t = double(adv_t_now->value[0]);
  stats.loss_adv_s = double(adv_s_now->value[0]);

  if (!is_finite(stats.loss_g) || !is_finite(stats.loss_d)) {
    std::ostringstream os;
    os << "appearance alignment diverged: loss_g=" << stats.loss_g << " loss_d=" << stats.loss_d
       << " cyc=" << stats.loss_cyc;
    throw NonFiniteError(os.str());
  }

  if (out_synth) {
    // fresh snapshot from the just-updated translator and critic
    auto synth = state.g_s2t.forward_var(constant(Tensor<T>(batch_s)));
    auto scores = state.d_t.score_var(constant(Tensor<T>(synth->value)));
    out_synth->images = synth->value;
    out_synth->d_scores.assign(scores->value.data.begin(), scores->value.data.end());
  }
  return stats;
}

}  // namespace dt
