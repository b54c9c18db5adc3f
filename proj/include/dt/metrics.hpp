#pragma once

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "dt/networks.hpp"
#include "dt/phantom.hpp"

// Evaluation protocol: overlap and surface metrics per structure, fold
// aggregation, the paired t-test used for method comparison, and
// Bland-Altman agreement data. Everything here is pure and desk-scale
// brute force.

namespace dt {

struct DiceResult {
  double percent = 0;
  bool both_empty = false;  // flagged 100
};

// 100 * 2|P&G| / (|P| + |G|); both masks empty scores 100 with a flag.
inline DiceResult dice(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt, int class_id) {
  if (pred.shape != gt.shape) throw StructuralError("dice: shape mismatch");
  size_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    bool inp = pred[i] == class_id, ing = gt[i] == class_id;
    p += inp;
    g += ing;
    both += inp && ing;
  }
  if (p + g == 0) return {100.0, true};
  return {100.0 * 2.0 * double(both) / double(p + g), false};
}

struct AsdResult {
  double pixels = 0;
  bool valid = false;  // either surface empty -> invalid, excluded upstream
};

namespace metric_detail {

// Boundary pixels: mask pixels with at least one non-mask 4-neighbor;
// outside the image counts as background.
inline std::vector<std::pair<int, int>> boundary(const Tensor<uint8_t>& mask, int class_id) {
  int H = mask.dim(0), W = mask.dim(1);
  std::vector<std::pair<int, int>> out;
  auto in_mask = [&](int r, int c) {
    return r >= 0 && r < H && c >= 0 && c < W && mask.at(r, c) == class_id;
  };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (mask.at(r, c) != class_id) continue;
      if (!in_mask(r - 1, c) || !in_mask(r + 1, c) || !in_mask(r, c - 1) || !in_mask(r, c + 1))
        out.emplace_back(r, c);
    }
  return out;
}

inline double nearest_distance(const std::pair<int, int>& p, const std::vector<std::pair<int, int>>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : set) {
    double dr = p.first - q.first, dc = p.second - q.second;
    best = std::min(best, dr * dr + dc * dc);
  }
  return std::sqrt(best);
}

}  // namespace metric_detail

// Symmetric average surface distance: every boundary pixel of each mask
// contributes its Euclidean distance to the other boundary, pooled over
// both directions.
inline AsdResult asd(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& gt, int class_id) {
  if (pred.shape != gt.shape) throw StructuralError("asd: shape mismatch");
  auto bp = metric_detail::boundary(pred, class_id);
  auto bg = metric_detail::boundary(gt, class_id);
  if (bp.empty() || bg.empty()) return {0.0, false};
  double acc = 0;
  for (const auto& p : bp) acc += metric_detail::nearest_distance(p, bg);
  for (const auto& g : bg) acc += metric_detail::nearest_distance(g, bp);
  return {acc / double(bp.size() + bg.size()), true};
}

// ---- paired t-test ----

namespace metric_detail {

inline double betacf(double a, double b, double x) {
  const int max_iter = 200;
  const double eps = 3e-14, fpmin = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

// regularized incomplete beta I_x(a, b)
inline double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log(1.0 - x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace metric_detail

struct TTestResult {
  double t = 0;
  double p = 1;
  int df = 0;
  bool degenerate = false;  // zero-variance differences, no p-value
};

// Two-sided paired t-test on a - b, df = n - 1.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw StructuralError("paired_t_test: length mismatch");
  if (a.size() < 2) throw ConfigError("paired_t_test: need at least 2 pairs");
  size_t n = a.size();
  std::vector<double> d(n);
  for (size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  double mean = 0;
  for (double v : d) mean += v / double(n);
  double var = 0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= double(n - 1);
  TTestResult r;
  r.df = int(n) - 1;
  if (var == 0.0) {
    r.degenerate = true;
    return r;
  }
  r.t = mean / std::sqrt(var / double(n));
  double x = double(r.df) / (double(r.df) + r.t * r.t);
  r.p = metric_detail::ibeta(double(r.df) / 2.0, 0.5, x);
  return r;
}

// ---- Bland-Altman ----

struct BlandAltman {
  std::vector<std::pair<double, double>> points;  // (mean_i, diff_i), diff = a - b
  double bias = 0;
  double lower = 0, upper = 0;  // bias -/+ 1.96 * sd(diff)
};

inline BlandAltman bland_altman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw StructuralError("bland_altman: length mismatch");
  if (a.size() < 2) throw ConfigError("bland_altman: need at least 2 pairs");
  BlandAltman r;
  size_t n = a.size();
  for (size_t i = 0; i < n; ++i) {
    double diff = a[i] - b[i];
    r.points.emplace_back((a[i] + b[i]) / 2.0, diff);
    r.bias += diff / double(n);
  }
  double var = 0;
  for (auto& pt : r.points) var += (pt.second - r.bias) * (pt.second - r.bias);
  var /= double(n - 1);
  double sd = std::sqrt(var);
  r.lower = r.bias - 1.96 * sd;
  r.upper = r.bias + 1.96 * sd;
  return r;
}

// ---- fold evaluation ----

struct SampleScores {
  std::string id;
  // index 0 is foreground class 1; background is not reported
  std::vector<double> dice_percent;
  std::vector<bool> dice_both_empty;
  std::vector<double> asd_pixels;
  std::vector<bool> asd_valid;
};

struct FoldReport {
  int fold_index = 0;
  int num_classes = 0;  // including background
  std::vector<SampleScores> samples;
  std::vector<double> class_mean_dice;  // per foreground class
  std::vector<double> class_mean_asd;   // over valid entries only
  std::vector<int> asd_invalid_count;
  double mean_dice = 0;  // mean of per-class means
  double mean_asd = 0;   // over classes with at least one valid entry
};

// Aggregate per-structure Dice/ASD for a set of predicted label maps.
inline FoldReport score_predictions(const std::vector<Tensor<uint8_t>>& preds,
                                    const std::vector<DomainSample>& test_set, int num_classes,
                                    int fold_index) {
  if (test_set.empty()) throw ConfigError("evaluate_fold: empty test set");
  require(preds.size() == test_set.size(), "score_predictions: prediction count mismatch");
  int C = num_classes;
  FoldReport rep;
  rep.fold_index = fold_index;
  rep.num_classes = C;
  rep.class_mean_dice.assign(size_t(C) - 1, 0);
  rep.class_mean_asd.assign(size_t(C) - 1, 0);
  rep.asd_invalid_count.assign(size_t(C) - 1, 0);
  std::vector<int> asd_valid_count(size_t(C) - 1, 0);
  for (size_t i = 0; i < test_set.size(); ++i) {
    const auto& s = test_set[i];
    require(bool(s.label), "evaluate_fold: test sample " + s.id + " has no label");
    SampleScores sc;
    sc.id = s.id;
    for (int c = 1; c < C; ++c) {
      auto d = dice(preds[i], *s.label, c);
      sc.dice_percent.push_back(d.percent);
      sc.dice_both_empty.push_back(d.both_empty);
      rep.class_mean_dice[size_t(c) - 1] += d.percent / double(test_set.size());
      auto a = asd(preds[i], *s.label, c);
      sc.asd_pixels.push_back(a.valid ? a.pixels : 0.0);
      sc.asd_valid.push_back(a.valid);
      if (a.valid) {
        rep.class_mean_asd[size_t(c) - 1] += a.pixels;
        ++asd_valid_count[size_t(c) - 1];
      } else {
        ++rep.asd_invalid_count[size_t(c) - 1];
      }
    }
    rep.samples.push_back(std::move(sc));
  }
  int asd_classes = 0;
  for (int c = 0; c < C - 1; ++c) {
    rep.mean_dice += rep.class_mean_dice[size_t(c)] / double(C - 1);
    if (asd_valid_count[size_t(c)] > 0) {
      rep.class_mean_asd[size_t(c)] /= double(asd_valid_count[size_t(c)]);
      rep.mean_asd += rep.class_mean_asd[size_t(c)];
      ++asd_classes;
    }
  }
  rep.mean_asd = asd_classes ? rep.mean_asd / double(asd_classes) : 0.0;
  return rep;
}

// Deterministic student inference (no dropout), argmax labels, then
// per-structure scores.
template <class T>
FoldReport evaluate_fold(const SegmenterT<T>& student, const std::vector<DomainSample>& test_set,
                         int fold_index) {
  if (test_set.empty()) throw ConfigError("evaluate_fold: empty test set");
  int H = test_set[0].image.dim(0), W = test_set[0].image.dim(1);
  const int batch = 8;
  std::vector<Tensor<uint8_t>> preds;
  for (size_t start = 0; start < test_set.size(); start += batch) {
    size_t n = std::min(size_t(batch), test_set.size() - start);
    Tensor<T> x({int(n), 1, H, W});
    for (size_t i = 0; i < n; ++i)
      std::copy(test_set[start + i].image.data.begin(), test_set[start + i].image.data.end(),
                x.data.begin() + i * size_t(H) * W);
    auto probs = ad::softmax_tensor(student.forward(x, /*stochastic=*/false)->value);
    auto labels = ad::argmax_labels(probs);
    for (size_t i = 0; i < n; ++i) {
      Tensor<uint8_t> one({H, W});
      std::copy(labels.data.begin() + i * size_t(H) * W, labels.data.begin() + (i + 1) * size_t(H) * W,
                one.data.begin());
      preds.push_back(std::move(one));
    }
  }
  return score_predictions(preds, test_set, student.cfg.num_classes, fold_index);
}

// ---- report files ----

inline void write_fold_csv(const FoldReport& rep, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "sample,class,dice,asd,dice_both_empty,asd_valid\n";
  f << std::setprecision(10);
  for (const auto& s : rep.samples)
    for (size_t c = 0; c < s.dice_percent.size(); ++c) {
      f << s.id << "," << (c + 1) << "," << s.dice_percent[c] << ",";
      if (s.asd_valid[c])
        f << s.asd_pixels[c];
      else
        f << "invalid";
      f << "," << int(s.dice_both_empty[c]) << "," << int(s.asd_valid[c]) << "\n";
    }
}

inline json fold_report_json(const FoldReport& rep) {
  json j;
  j["fold_index"] = rep.fold_index;
  j["num_classes"] = rep.num_classes;
  j["class_mean_dice"] = rep.class_mean_dice;
  j["class_mean_asd"] = rep.class_mean_asd;
  j["asd_invalid_count"] = rep.asd_invalid_count;
  j["mean_dice"] = rep.mean_dice;
  j["mean_asd"] = rep.mean_asd;
  j["num_samples"] = rep.samples.size();
  return j;
}

inline void write_ttest_csv(const TTestResult& r, const std::string& metric, const fs::path& path,
                            bool append = false) {
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  if (!append) f << "metric,t,p,df,degenerate\n";
  f << std::setprecision(10) << metric << ",";
  if (r.degenerate)
    f << ",,";
  else
    f << r.t << "," << r.p << ",";
  f << r.df << "," << int(r.degenerate) << "\n";
}

inline void write_bland_altman_csv(const BlandAltman& r, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << std::setprecision(10);
  f << "mean,diff\n";
  for (auto& pt : r.points) f << pt.first << "," << pt.second << "\n";
  f << "# bias," << r.bias << "\n";
  f << "# limits," << r.lower << "," << r.upper << "\n";
}

}  // namespace dt
