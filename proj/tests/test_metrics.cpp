#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dt/metrics.hpp"

using namespace dt;

namespace {

Tensor<uint8_t> mask_from(const std::vector<std::pair<int, int>>& pixels, int h, int w, uint8_t cls = 1) {
  Tensor<uint8_t> m({h, w});
  for (auto& [r, c] : pixels) m.at(r, c) = cls;
  return m;
}

Tensor<uint8_t> random_mask(int h, int w, int C, Rng& rng, double fg_prob = 0.3) {
  Tensor<uint8_t> m({h, w});
  for (auto& v : m.data)
    v = rng.uniform() < fg_prob ? uint8_t(1 + rng.uniform_index(uint64_t(C - 1))) : uint8_t(0);
  return m;
}

// independent pixel-count dice
double dice_oracle(const Tensor<uint8_t>& p, const Tensor<uint8_t>& g, int cls) {
  int np = 0, ng = 0, ni = 0;
  for (int r = 0; r < p.dim(0); ++r)
    for (int c = 0; c < p.dim(1); ++c) {
      bool a = p.at(r, c) == cls, b = g.at(r, c) == cls;
      np += a;
      ng += b;
      ni += a && b;
    }
  if (np + ng == 0) return 100.0;
  return 200.0 * ni / double(np + ng);
}

// independent all-pairs surface distance with its own boundary scan
double asd_oracle(const Tensor<uint8_t>& p, const Tensor<uint8_t>& g, int cls, bool& valid) {
  int H = p.dim(0), W = p.dim(1);
  auto surf = [&](const Tensor<uint8_t>& m) {
    std::vector<std::pair<int, int>> s;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        if (m.at(r, c) != cls) continue;
        bool edge = r == 0 || r == H - 1 || c == 0 || c == W - 1;
        if (!edge && m.at(r - 1, c) == cls && m.at(r + 1, c) == cls && m.at(r, c - 1) == cls &&
            m.at(r, c + 1) == cls)
          continue;
        s.emplace_back(r, c);
      }
    return s;
  };
  auto sp = surf(p), sg = surf(g);
  if (sp.empty() || sg.empty()) {
    valid = false;
    return 0;
  }
  valid = true;
  double total = 0;
  for (auto& a : sp) {
    double best = 1e18;
    for (auto& b : sg)
      best = std::min(best, std::hypot(double(a.first - b.first), double(a.second - b.second)));
    total += best;
  }
  for (auto& b : sg) {
    double best = 1e18;
    for (auto& a : sp)
      best = std::min(best, std::hypot(double(a.first - b.first), double(a.second - b.second)));
    total += best;
  }
  return total / double(sp.size() + sg.size());
}

}  // namespace

TEST_CASE("dice basics") {
  auto g = mask_from({{2, 2}, {2, 3}, {3, 2}, {3, 3}}, 8, 8);
  CHECK(dice(g, g, 1).percent == 100.0);
  CHECK_FALSE(dice(g, g, 1).both_empty);
  auto p = mask_from({{5, 5}, {5, 6}, {6, 5}, {6, 6}}, 8, 8);
  CHECK(dice(p, g, 1).percent == 0.0);
  // |P|=4, |G|=4, overlap 2
  auto p2 = mask_from({{2, 2}, {2, 3}, {5, 5}, {5, 6}}, 8, 8);
  CHECK(dice(p2, g, 1).percent == doctest::Approx(50.0).epsilon(1e-12));
  // both empty is flagged 100
  auto d = dice(p, g, 3);
  CHECK(d.percent == 100.0);
  CHECK(d.both_empty);
  Tensor<uint8_t> other({4, 4});
  CHECK_THROWS_AS(dice(other, g, 1), StructuralError);
}

TEST_CASE("dice is symmetric and matches the pixel-count oracle on 50 random pairs") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    int h = 4 + int(rng.uniform_index(13)), w = 4 + int(rng.uniform_index(13));
    auto p = random_mask(h, w, 4, rng);
    auto g = random_mask(h, w, 4, rng);
    for (int cls = 1; cls < 4; ++cls) {
      CHECK(dice(p, g, cls).percent == dice_oracle(p, g, cls));
      CHECK(dice(p, g, cls).percent == dice(g, p, cls).percent);
    }
  }
}

TEST_CASE("asd basics") {
  auto g = mask_from({{2, 2}, {3, 2}, {4, 2}}, 8, 8);
  auto same = asd(g, g, 1);
  CHECK(same.valid);
  CHECK(same.pixels == 0.0);
  // vertical 1-pixel segments 3 columns apart
  auto p = mask_from({{2, 5}, {3, 5}, {4, 5}}, 8, 8);
  auto r = asd(p, g, 1);
  CHECK(r.valid);
  CHECK(r.pixels == doctest::Approx(3.0).epsilon(1e-12));
  // empty prediction surface is invalid, not a number
  Tensor<uint8_t> empty({8, 8});
  CHECK_FALSE(asd(empty, g, 1).valid);
  Tensor<uint8_t> other({4, 4});
  CHECK_THROWS_AS(asd(other, g, 1), StructuralError);
}

TEST_CASE("asd matches the all-pairs oracle on 50 random pairs, symmetric, shift invariant") {
  Rng rng(2);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    int h = 6 + int(rng.uniform_index(11)), w = 6 + int(rng.uniform_index(11));
    auto p = random_mask(h, w, 3, rng, 0.25);
    auto g = random_mask(h, w, 3, rng, 0.25);
    for (int cls = 1; cls < 3; ++cls) {
      bool valid = false;
      double oracle = asd_oracle(p, g, cls, valid);
      auto r = asd(p, g, cls);
      CHECK(r.valid == valid);
      if (valid) {
        CHECK(std::abs(r.pixels - oracle) < 1e-9);
        CHECK(std::abs(asd(g, p, cls).pixels - r.pixels) < 1e-12);
        ++checked;
      }
    }
  }
  CHECK(checked > 50);

  // translation invariance away from the borders
  auto base = mask_from({{3, 3}, {3, 4}, {4, 3}}, 16, 16);
  auto gt = mask_from({{5, 6}, {5, 7}, {6, 6}}, 16, 16);
  auto shift = [&](const Tensor<uint8_t>& m, int dr, int dc) {
    Tensor<uint8_t> out({16, 16});
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        if (m.at(r, c)) out.at(r + dr, c + dc) = m.at(r, c);
    return out;
  };
  double before = asd(base, gt, 1).pixels;
  double after = asd(shift(base, 4, 5), shift(gt, 4, 5), 1).pixels;
  CHECK(before == doctest::Approx(after).epsilon(1e-12));
  CHECK(dice(base, gt, 1).percent == dice(shift(base, 4, 5), shift(gt, 4, 5), 1).percent);
}

TEST_CASE("paired t-test matches the hand-computed df=3 case") {
  std::vector<double> b{0, 0, 0, 0}, a{1, 2, 3, 4};
  auto r = paired_t_test(a, b);
  CHECK_FALSE(r.degenerate);
  CHECK(r.df == 3);
  double sd = std::sqrt((2.25 + 0.25 + 0.25 + 2.25) / 3.0);
  CHECK(r.t == doctest::Approx(2.5 / (sd / 2.0)).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(0.0305).epsilon(2e-3));
  // swapping negates t and keeps p
  auto s = paired_t_test(b, a);
  CHECK(s.t == doctest::Approx(-r.t).epsilon(1e-12));
  CHECK(s.p == doctest::Approx(r.p).epsilon(1e-12));
}

TEST_CASE("identical lists give a degenerate t-test") {
  std::vector<double> a{3, 1, 4, 1, 5};
  auto r = paired_t_test(a, a);
  CHECK(r.degenerate);
  std::vector<double> shifted(a);
  for (auto& v : shifted) v += 2.0;  // constant shift also has zero-variance diffs
  CHECK(paired_t_test(shifted, a).degenerate);
  CHECK_THROWS_AS(paired_t_test({1.0}, {2.0}), ConfigError);
  CHECK_THROWS_AS(paired_t_test({1.0, 2.0}, {1.0, 2.0, 3.0}), StructuralError);
}

TEST_CASE("t-test p matches numeric integration of the t density") {
  // Simpson integration of the two-sided tail as an independent oracle
  auto pdf = [](double x, int df) {
    double v = df;
    double ln = std::lgamma((v + 1) / 2) - std::lgamma(v / 2) - 0.5 * std::log(v * 3.14159265358979323846);
    return std::exp(ln) * std::pow(1.0 + x * x / v, -(v + 1) / 2);
  };
  auto tail = [&](double t, int df) {
    double hi = std::abs(t) + 60.0;
    const int steps = 40000;
    double h = (hi - std::abs(t)) / steps, acc = 0;
    for (int i = 0; i <= steps; ++i) {
      double x = std::abs(t) + i * h;
      double wgt = (i == 0 || i == steps) ? 1 : (i % 2 ? 4 : 2);
      acc += wgt * pdf(x, df);
    }
    return 2.0 * acc * h / 3.0;
  };
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 3 + int(rng.uniform_index(10));
    std::vector<double> a, b;
    for (int i = 0; i < n; ++i) {
      a.push_back(rng.normal(0.3, 1.0));
      b.push_back(rng.normal(0.0, 1.0));
    }
    auto r = paired_t_test(a, b);
    if (r.degenerate) continue;
    CHECK(std::abs(r.p - tail(r.t, r.df)) < 1e-3);
  }
}

TEST_CASE("bland-altman identity, offset, and recomputation oracle") {
  std::vector<double> a{1, 2, 3, 4};
  auto same = bland_altman(a, a);
  CHECK(same.bias == 0.0);
  CHECK(same.lower == 0.0);
  CHECK(same.upper == 0.0);
  for (auto& pt : same.points) CHECK(pt.second == 0.0);

  std::vector<double> b(a);
  for (auto& v : b) v += 1.0;
  auto off = bland_altman(b, a);
  CHECK(off.bias == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(off.lower == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(off.upper == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(4);
  std::vector<double> x(10), y(10);
  for (int i = 0; i < 10; ++i) {
    x[size_t(i)] = rng.normal(80, 5);
    y[size_t(i)] = rng.normal(82, 5);
  }
  auto r = bland_altman(x, y);
  double bias = 0;
  for (int i = 0; i < 10; ++i) bias += (x[size_t(i)] - y[size_t(i)]) / 10.0;
  double var = 0;
  for (int i = 0; i < 10; ++i) {
    double d = x[size_t(i)] - y[size_t(i)] - bias;
    var += d * d / 9.0;
  }
  CHECK(r.bias == doctest::Approx(bias).epsilon(1e-12));
  CHECK(r.upper == doctest::Approx(bias + 1.96 * std::sqrt(var)).epsilon(1e-12));
  CHECK(r.lower == doctest::Approx(bias - 1.96 * std::sqrt(var)).epsilon(1e-12));
  CHECK_THROWS_AS(bland_altman(x, std::vector<double>{1.0}), StructuralError);
}

TEST_CASE("perfect predictions score 100 dice and 0 asd; constant background scores 0") {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.num_source = 0;
  spec.num_labeled_target = 0;
  spec.num_unlabeled_target = 0;
  spec.num_test = 5;
  spec.seed = 9;
  auto ds = generate_phantom(spec);

  std::vector<Tensor<uint8_t>> perfect;
  for (auto& s : ds.samples) perfect.push_back(*s.label);
  auto rep = score_predictions(perfect, ds.samples, 8, 0);
  CHECK(rep.mean_dice == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(rep.mean_asd == 0.0);
  for (double d : rep.class_mean_dice) CHECK(d == doctest::Approx(100.0).epsilon(1e-12));

  std::vector<Tensor<uint8_t>> background(ds.samples.size(), Tensor<uint8_t>({32, 32}));
  auto rep0 = score_predictions(background, ds.samples, 8, 0);
  CHECK(rep0.mean_dice == 0.0);
  for (int c = 0; c < 7; ++c) CHECK(rep0.asd_invalid_count[size_t(c)] == int(ds.samples.size()));
  CHECK(rep0.mean_asd == 0.0);  // nothing valid to average

  CHECK_THROWS_AS(score_predictions({}, {}, 8, 0), ConfigError);
}

TEST_CASE("fold report means equal recomputation from per-sample scores") {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.num_source = 0;
  spec.num_labeled_target = 0;
  spec.num_unlabeled_target = 0;
  spec.num_test = 6;
  spec.seed = 10;
  auto ds = generate_phantom(spec);
  // noisy predictions: true label with a corrupted stripe
  std::vector<Tensor<uint8_t>> preds;
  Rng rng(11);
  for (auto& s : ds.samples) {
    Tensor<uint8_t> p = *s.label;
    for (int c = 0; c < 32; ++c) p.at(int(rng.uniform_index(32)), c) = uint8_t(rng.uniform_index(8));
    preds.push_back(std::move(p));
  }
  auto rep = score_predictions(preds, ds.samples, 8, 2);
  CHECK(rep.fold_index == 2);
  for (int c = 0; c < 7; ++c) {
    double dice_sum = 0, asd_sum = 0;
    int asd_n = 0;
    for (auto& s : rep.samples) {
      dice_sum += s.dice_percent[size_t(c)];
      if (s.asd_valid[size_t(c)]) {
        asd_sum += s.asd_pixels[size_t(c)];
        ++asd_n;
      }
    }
    CHECK(rep.class_mean_dice[size_t(c)] == doctest::Approx(dice_sum / 6.0).epsilon(1e-9));
    if (asd_n) CHECK(rep.class_mean_asd[size_t(c)] == doctest::Approx(asd_sum / asd_n).epsilon(1e-9));
  }
  double md = 0;
  for (double d : rep.class_mean_dice) md += d / 7.0;
  CHECK(rep.mean_dice == doctest::Approx(md).epsilon(1e-12));
}

TEST_CASE("evaluate_fold runs the student deterministically") {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.num_source = 0;
  spec.num_labeled_target = 0;
  spec.num_unlabeled_target = 0;
  spec.num_test = 3;
  spec.seed = 12;
  auto ds = generate_phantom(spec);
  SegmenterConfig cfg;
  cfg.image_size = 32;
  cfg.base_width = 4;
  Segmenter student(cfg, Rng(13));
  auto r1 = evaluate_fold(student, ds.samples, 1);
  auto r2 = evaluate_fold(student, ds.samples, 1);
  CHECK(r1.mean_dice == r2.mean_dice);
  CHECK(r1.mean_asd == r2.mean_asd);
  CHECK(r1.samples.size() == 3);
  CHECK(student.access_count > 0);
}

TEST_CASE("report files round trip through the csv/json they emit") {
  fs::path dir = fs::temp_directory_path() / "dt_metrics_files";
  fs::create_directories(dir);
  TTestResult t{2.5, 0.04, 9, false};
  write_ttest_csv(t, "dice", dir / "ttest.csv");
  auto lines = read_bytes(dir / "ttest.csv");
  std::string content(lines.begin(), lines.end());
  CHECK(content.find("metric,t,p,df,degenerate") != std::string::npos);
  CHECK(content.find("dice,2.5,0.04,9,0") != std::string::npos);

  BlandAltman ba;
  ba.points = {{1, 0.5}, {2, -0.5}};
  ba.bias = 0.0;
  ba.lower = -1.3;
  ba.upper = 1.3;
  write_bland_altman_csv(ba, dir / "ba.csv");
  auto ba_raw = read_bytes(dir / "ba.csv");
  std::string ba_str(ba_raw.begin(), ba_raw.end());
  CHECK(ba_str.find("mean,diff") != std::string::npos);
  CHECK(ba_str.find("# bias,0") != std::string::npos);
  fs::remove_all(dir);
}
