#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dt/distill.hpp"
#include "support.hpp"

using namespace dt;

namespace {

Tensor<uint8_t> random_labels(int n, int h, int w, int C, uint64_t seed) {
  Rng rng(seed);
  Tensor<uint8_t> lab({n, h, w});
  for (auto& v : lab.data) v = uint8_t(rng.uniform_index(uint64_t(C)));
  return lab;
}

template <class T>
ad::Var<T> random_probs(int n, int C, int h, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor<T> logits({n, C, h, w});
  for (auto& v : logits.data) v = T(rng.normal(0.0, 2.0));
  return ad::softmax_ch(ad::constant(std::move(logits)));
}

}  // namespace

TEST_CASE("perfect one-hot prediction has near-zero hybrid loss") {
  auto lab = random_labels(2, 4, 4, 3, 1);
  auto probs = ad::constant(ad::one_hot<double>(lab, 3));
  auto loss = hybrid_seg_loss(probs, lab);
  CHECK(std::abs(loss->value[0]) < 1e-3);
}

TEST_CASE("uniform prediction pays ln C of cross entropy") {
  const int C = 8;
  auto lab = random_labels(1, 4, 4, C, 2);
  auto probs = ad::constant(Tensor<double>({1, C, 4, 4}, 1.0 / C));
  auto loss = hybrid_seg_loss(probs, lab);
  // soft-Dice part computed directly for the uniform case
  double dice_mean = 0;
  for (int c = 0; c < C; ++c) {
    double g = 0;
    for (auto v : lab.data) g += (v == c);
    double inter = g / C, psum = 16.0 / C;
    dice_mean += (2 * inter + kDiceSmooth) / (psum + g + kDiceSmooth) / C;
  }
  CHECK(loss->value[0] == doctest::Approx(std::log(8.0) + 1.0 - dice_mean).epsilon(1e-9));
}

TEST_CASE("hybrid loss matches a brute-force oracle on a random 4x4 case") {
  const int C = 3, H = 4, W = 4;
  auto lab = random_labels(1, H, W, C, 3);
  auto probs = random_probs<double>(1, C, H, W, 4);
  auto loss = hybrid_seg_loss(probs, lab);

  double ce = 0;
  for (int i = 0; i < H * W; ++i) {
    int y = lab[size_t(i)];
    ce -= std::log(std::max(probs->value[size_t(y) * H * W + i], 1e-7));
  }
  ce /= H * W;
  double dice_mean = 0;
  for (int c = 0; c < C; ++c) {
    double inter = 0, psum = 0, gsum = 0;
    for (int i = 0; i < H * W; ++i) {
      double p = probs->value[size_t(c) * H * W + i];
      psum += p;
      if (lab[size_t(i)] == c) {
        inter += p;
        gsum += 1;
      }
    }
    dice_mean += (2 * inter + kDiceSmooth) / (psum + gsum + kDiceSmooth) / C;
  }
  CHECK(loss->value[0] == doctest::Approx(ce + 1.0 - dice_mean).epsilon(1e-9));
}

TEST_CASE("hybrid loss rejects bad shapes and labels") {
  auto probs = random_probs<double>(1, 3, 4, 4, 5);
  CHECK_THROWS_AS(hybrid_seg_loss(probs, random_labels(1, 4, 5, 3, 6)), StructuralError);
  auto lab = random_labels(1, 4, 4, 3, 7);
  lab[0] = 3;  // out of range for C=3
  CHECK_THROWS_AS(hybrid_seg_loss(probs, lab), Error);
}

TEST_CASE("soft dice is minimized when mass concentrates on the label class") {
  // single-pixel image, C=3, label 0; scan the probability simplex
  Tensor<uint8_t> lab({1, 1, 1});
  lab[0] = 0;
  double best = 1e9, best_p0 = -1;
  for (int i = 0; i <= 20; ++i)
    for (int j = 0; j + i <= 20; ++j) {
      double p0 = i / 20.0, p1 = j / 20.0, p2 = 1.0 - p0 - p1;
      auto probs = ad::constant(Tensor<double>({1, 3, 1, 1}, {p0, p1, p2}));
      double v = hybrid_seg_loss(probs, lab)->value[0];
      if (v < best) {
        best = v;
        best_p0 = p0;
      }
    }
  CHECK(best_p0 == 1.0);
}

TEST_CASE("importance weight follows d/(1-d) with clamping") {
  auto w = importance_weight(0.5);
  CHECK(w.weight == 1.0);
  CHECK_FALSE(w.clamped);
  w = importance_weight(0.8);
  CHECK(w.weight == doctest::Approx(4.0).epsilon(1e-12));
  CHECK_FALSE(w.clamped);
  w = importance_weight(0.999);
  CHECK(w.weight == 10.0);
  CHECK(w.clamped);
  CHECK(w.raw_d_score == 0.999);
  // scores outside (0,1) are clamped before the ratio
  CHECK(importance_weight(0.0).weight == doctest::Approx(kWeightClampEps / (1 - kWeightClampEps)));
  CHECK(importance_weight(1.0).clamped);
  CHECK_THROWS_AS(importance_weight(std::nan("")), NonFiniteError);
  // monotone nondecreasing
  double prev = -1;
  for (double d = 0.01; d < 1.0; d += 0.01) {
    double cur = importance_weight(d).weight;
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("distilling a teacher into itself costs the weighted teacher entropy") {
  const int N = 3, C = 4, H = 4, W = 4;
  auto probs = random_probs<double>(N, C, H, W, 8);
  SoftTargetT<double> teacher{probs->value};
  std::vector<ImportanceWeight> ws;
  for (int i = 0; i < N; ++i) ws.push_back(importance_weight(0.3 + 0.2 * i));
  auto loss = weighted_kd_loss(teacher, probs, ws);
  double expected = 0;
  for (int n = 0; n < N; ++n) {
    double h_mean = 0;
    for (int i = 0; i < H * W; ++i) {
      double h = 0;
      for (int c = 0; c < C; ++c) {
        double p = teacher.probs[(size_t(n) * C + c) * H * W + i];
        h -= p * std::log(p);
      }
      h_mean += h / (H * W);
    }
    expected += ws[size_t(n)].weight * h_mean / N;
  }
  CHECK(loss->value[0] == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("kd loss is linear in the weights and vanishes at zero weight") {
  const int N = 2, C = 3;
  auto teacher_probs = random_probs<double>(N, C, 4, 4, 9);
  auto student = random_probs<double>(N, C, 4, 4, 10);
  SoftTargetT<double> teacher{teacher_probs->value};
  std::vector<ImportanceWeight> zero(N), one(N), two(N);
  for (int i = 0; i < N; ++i) {
    zero[size_t(i)].weight = 0;
    one[size_t(i)].weight = 1 + i;
    two[size_t(i)].weight = 2 * (1 + i);
  }
  CHECK(weighted_kd_loss(teacher, student, zero)->value[0] == 0.0);
  double l1 = weighted_kd_loss(teacher, student, one)->value[0];
  double l2 = weighted_kd_loss(teacher, student, two)->value[0];
  CHECK(l2 == doctest::Approx(2 * l1).epsilon(1e-12));
  std::vector<ImportanceWeight> bad(N + 1);
  CHECK_THROWS_AS(weighted_kd_loss(teacher, student, bad), StructuralError);
}

TEST_CASE("weight substitution reproduces the explicit density-ratio form") {
  const int N = 4, C = 3;
  auto student = random_probs<double>(N, C, 4, 4, 11);
  auto teacher_probs = random_probs<double>(N, C, 4, 4, 12);
  SoftTargetT<double> teacher{teacher_probs->value};
  std::vector<double> d_scores{0.2, 0.5, 0.7, 0.9};
  std::vector<ImportanceWeight> ws;
  for (double d : d_scores) ws.push_back(importance_weight(d));
  double via_op = weighted_kd_loss(teacher, student, ws)->value[0];
  // direct substitution of w = d/(1-d) into the per-sample CE
  double direct = 0;
  for (int n = 0; n < N; ++n) {
    double ce = 0;
    for (int i = 0; i < 16; ++i)
      for (int c = 0; c < C; ++c) {
        double t = teacher.probs[(size_t(n) * C + c) * 16 + i];
        double s = student->value[(size_t(n) * C + c) * 16 + i];
        ce -= t * std::log(std::max(s, 1e-7));
      }
    ce /= 16;
    direct += (d_scores[size_t(n)] / (1 - d_scores[size_t(n)])) * ce / N;
  }
  CHECK(via_op == doctest::Approx(direct).epsilon(1e-9));
}

TEST_CASE("batch-mean renormalization rescales by the average weight") {
  const int N = 2, C = 3;
  auto student = random_probs<double>(N, C, 4, 4, 13);
  auto teacher_probs = random_probs<double>(N, C, 4, 4, 14);
  SoftTargetT<double> teacher{teacher_probs->value};
  std::vector<ImportanceWeight> ws;
  ws.push_back(importance_weight(0.8));  // 4
  ws.push_back(importance_weight(0.5));  // 1
  double plain = weighted_kd_loss(teacher, student, ws, false)->value[0];
  double renorm = weighted_kd_loss(teacher, student, ws, true)->value[0];
  CHECK(renorm == doctest::Approx(plain / 2.5).epsilon(1e-9));
}

TEST_CASE("no gradient reaches the teacher; the student gets one") {
  SegmenterConfig cfg;
  cfg.image_size = 8;
  cfg.base_width = 2;
  cfg.num_classes = 3;
  cfg.depth = 1;
  SegmenterT<double> teacher(cfg, Rng(15)), student(cfg, Rng(16));
  Rng rng(17);
  Tensor<double> x({1, 1, 8, 8});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  auto targets = make_soft_targets(teacher, x);
  for (auto& p : teacher.params().vars()) {
    p->ensure_grad();
    p->grad.fill(0.0);
  }
  for (auto& p : student.params().vars()) {
    p->ensure_grad();
    p->grad.fill(0.0);
  }
  auto student_probs = ad::softmax_ch(student.forward(x, false));
  auto loss = weighted_kd_loss(targets, student_probs, {importance_weight(0.7)});
  ad::backward(loss);
  double teacher_grad = 0, student_grad = 0;
  for (auto& p : teacher.params().vars()) teacher_grad += double(tensor_max_abs(p->grad));
  for (auto& p : student.params().vars()) student_grad += double(tensor_max_abs(p->grad));
  CHECK(teacher_grad == 0.0);
  CHECK(student_grad > 0.0);
}

TEST_CASE("gradcheck: hybrid and kd losses through a micro student") {
  SegmenterConfig cfg;
  cfg.image_size = 8;
  cfg.base_width = 2;
  cfg.num_classes = 3;
  cfg.depth = 1;
  SegmenterT<double> student(cfg, Rng(18)), teacher(cfg, Rng(19));
  Rng rng(20);
  Tensor<double> x({1, 1, 8, 8});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  auto lab = random_labels(1, 8, 8, 3, 21);
  dtest::jitter_params(student.params().vars(), rng);
  auto f_hybrid = [&] { return hybrid_seg_loss(ad::softmax_ch(student.forward(x, false)), lab); };
  CHECK(dtest::gradcheck(student.params().vars(), f_hybrid) < 1e-3);
  auto targets = make_soft_targets(teacher, x);
  auto f_kd = [&] {
    auto probs = ad::softmax_ch(student.forward(x, false));
    return weighted_kd_loss(targets, probs, {importance_weight(0.6)});
  };
  CHECK(dtest::gradcheck(student.params().vars(), f_kd) < 1e-3);
}

TEST_CASE("teacher step: zero lr is a no-op, repeated steps overfit one batch") {
  SegmenterConfig cfg;
  cfg.image_size = 16;
  cfg.base_width = 4;
  cfg.num_classes = 4;
  SegmenterT<double> teacher(cfg, Rng(22));
  Rng rng(23);
  Tensor<double> x({2, 1, 16, 16});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  auto lab = random_labels(2, 16, 16, 4, 24);

  AdamT<double> frozen(teacher.params().vars(), 0.0);
  auto before = teacher.params().read();
  Rng drop(1);
  inter_teacher_step(teacher, x, lab, frozen, drop);
  auto after = teacher.params().read();
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].value.data == after[i].value.data);

  AdamT<double> opt(teacher.params().vars(), 1e-3);
  double first = 0, last = 0;
  for (int it = 0; it < 100; ++it) {
    double v = inter_teacher_step(teacher, x, lab, opt, drop);
    if (it == 0) first = v;
    last = v;
  }
  CHECK(last < first);
}
