#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dt/io.hpp"
#include "dt/rng.hpp"
#include "dt/tensor.hpp"

// Synthetic dual-modality cardiac phantom. Each sample is a 64x64-ish 2D
// slice of a nested-ellipse "heart" with up to 7 foreground structures; the
// two domains render the same anatomy family through different intensity
// remaps, texture noise and blur, giving a real, controllable appearance gap.

namespace dt {

enum class Domain { source, labeled_target, unlabeled_target, test };

inline std::string domain_name(Domain d) {
  switch (d) {
    case Domain::source: return "source";
    case Domain::labeled_target: return "labeled_target";
    case Domain::unlabeled_target: return "unlabeled_target";
    case Domain::test: return "test";
  }
  return "?";
}

inline Domain domain_from_name(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "labeled_target") return Domain::labeled_target;
  if (s == "unlabeled_target") return Domain::unlabeled_target;
  if (s == "test") return Domain::test;
  throw IoError("unknown domain tag: " + s);
}

struct DomainSample {
  Tensor<real_t> image;                  // [H,W], intensities in [-1,1]
  std::optional<Tensor<uint8_t>> label;  // [H,W], values < num_classes
  Domain domain = Domain::source;
  std::string id;
};

struct Dataset {
  int image_size = 0;
  int num_classes = 0;
  std::vector<DomainSample> samples;
};

// One modality's rendering transform.
struct ShiftParams {
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
  double noise_std = 0.0;
  int blur_radius = 0;

  bool is_identity() const {
    return gain == 1.0 && bias == 0.0 && gamma == 1.0 && noise_std == 0.0 && blur_radius == 0;
  }
};

struct PhantomSpec {
  int image_size = 64;
  int num_classes = 8;  // background + up to 7 structures
  int num_source = 20;
  int num_labeled_target = 20;
  int num_unlabeled_target = 40;
  int num_test = 0;
  uint64_t seed = 0;
  ShiftParams source_shift{-0.9, 0.95, 1.6, 0.10, 1};
  ShiftParams target_shift{1.0, 0.0, 1.0, 0.05, 0};

  void validate() const {
    if (num_classes < 2) throw ConfigError("phantom spec: num_classes must be >= 2");
    if (num_classes > 8) throw ConfigError("phantom spec: num_classes must be <= 8 (structure templates)");
    if (image_size < 16) throw ConfigError("phantom spec: image_size must be >= 16");
    if (num_source < 0 || num_labeled_target < 0 || num_unlabeled_target < 0 || num_test < 0)
      throw ConfigError("phantom spec: sample counts must be nonnegative");
  }

  static ShiftParams shift_from_json(const json& j, const std::string& ctx) {
    ShiftParams p;
    p.gain = json_get(j, "gain", p.gain);
    p.bias = json_get(j, "bias", p.bias);
    p.gamma = json_get(j, "gamma", p.gamma);
    p.noise_std = json_get(j, "noise_std", p.noise_std);
    p.blur_radius = json_get(j, "blur_radius", p.blur_radius);
    if (p.gamma <= 0) throw ConfigError(ctx + ": gamma must be positive");
    if (p.noise_std < 0) throw ConfigError(ctx + ": noise_std must be nonnegative");
    if (p.blur_radius < 0) throw ConfigError(ctx + ": blur_radius must be nonnegative");
    return p;
  }

  static PhantomSpec from_json(const json& j) {
    PhantomSpec s;
    s.image_size = json_require<int>(j, "image_size", "phantom spec");
    s.num_classes = json_require<int>(j, "num_classes", "phantom spec");
    s.num_source = json_require<int>(j, "num_source", "phantom spec");
    s.num_labeled_target = json_require<int>(j, "num_labeled_target", "phantom spec");
    s.num_unlabeled_target = json_require<int>(j, "num_unlabeled_target", "phantom spec");
    s.num_test = json_get(j, "num_test", 0);
    s.seed = json_require<uint64_t>(j, "seed", "phantom spec");
    if (j.contains("shift")) {
      const auto& sh = j.at("shift");
      if (sh.contains("source")) s.source_shift = shift_from_json(sh.at("source"), "shift.source");
      if (sh.contains("target")) s.target_shift = shift_from_json(sh.at("target"), "shift.target");
    }
    s.validate();
    return s;
  }

  json to_json() const {
    return json{{"image_size", image_size},
                {"num_classes", num_classes},
                {"num_source", num_source},
                {"num_labeled_target", num_labeled_target},
                {"num_unlabeled_target", num_unlabeled_target},
                {"num_test", num_test},
                {"seed", seed},
                {"shift",
                 {{"source",
                   {{"gain", source_shift.gain},
                    {"bias", source_shift.bias},
                    {"gamma", source_shift.gamma},
                    {"noise_std", source_shift.noise_std},
                    {"blur_radius", source_shift.blur_radius}}},
                  {"target",
                   {{"gain", target_shift.gain},
                    {"bias", target_shift.bias},
                    {"gamma", target_shift.gamma},
                    {"noise_std", target_shift.noise_std},
                    {"blur_radius", target_shift.blur_radius}}}}}};
  }
};

namespace phantom_detail {

struct EllipseSpec {
  double cy, cx;    // center, pixels
  double a, b;      // semi-axes, pixels
  double phi;       // rotation, radians
};

inline bool inside(const EllipseSpec& e, double r, double c) {
  double dy = r - e.cy, dx = c - e.cx;
  double u = (dx * std::cos(e.phi) + dy * std::sin(e.phi)) / e.a;
  double v = (-dx * std::sin(e.phi) + dy * std::cos(e.phi)) / e.b;
  return u * u + v * v <= 1.0;
}

// Full anatomy instance: ring + cavity + up to five satellite structures.
struct Anatomy {
  EllipseSpec outer, inner;               // myocardium ring boundaries
  std::array<EllipseSpec, 5> satellites;  // LA/RA/RV-like and two vessels
  int n_satellites = 5;
};

inline Anatomy draw_anatomy(int S, int num_classes, Rng& rng) {
  Anatomy an;
  // wide parameter ranges: a handful of samples cannot cover the family,
  // which is what makes the extra data streams worth learning from
  double cy = S * rng.uniform(0.40, 0.56);
  double cx = S * rng.uniform(0.40, 0.56);
  double r0 = S * rng.uniform(0.17, 0.27);
  double phi = rng.uniform(0.0, 6.283185307179586);
  double ecc = rng.uniform(0.70, 0.95);
  an.outer = {cy, cx, r0, ecc * r0, phi};
  double inner_scale = rng.uniform(0.50, 0.68);
  an.inner = {cy, cx, inner_scale * r0, inner_scale * ecc * r0, phi};
  // three chambers then two vessels, parameterized by angle/distance from core
  const double base_angle[5] = {1.75, 3.40, 4.80, 0.26, 0.96};
  const double dist_lo[5] = {1.00, 1.00, 1.00, 1.25, 1.25};
  const double dist_hi[5] = {1.35, 1.35, 1.35, 1.55, 1.55};
  const double rad_lo[5] = {0.26, 0.26, 0.26, 0.16, 0.16};
  const double rad_hi[5] = {0.45, 0.45, 0.45, 0.28, 0.28};
  an.n_satellites = std::min(5, num_classes - 3);
  for (int i = 0; i < 5; ++i) {
    double ang = phi + base_angle[i] + rng.uniform(-0.35, 0.35);
    double dist = r0 * rng.uniform(dist_lo[i], dist_hi[i]);
    double ra = r0 * rng.uniform(rad_lo[i], rad_hi[i]);
    double rb = ra * rng.uniform(0.65, 1.0);
    double scy = cy + dist * std::sin(ang);
    double scx = cx + dist * std::cos(ang);
    double margin = std::max(ra, rb) + 1.0;
    scy = std::min(std::max(scy, margin), double(S) - margin - 1.0);
    scx = std::min(std::max(scx, margin), double(S) - margin - 1.0);
    an.satellites[size_t(i)] = {scy, scx, ra, rb, rng.uniform(0.0, 3.14159265)};
  }
  return an;
}

// Classes: 0 background, 1 ring, 2 cavity, 3..7 satellites. Satellites only
// paint background so the core keeps its silhouette.
inline Tensor<uint8_t> rasterize(const Anatomy& an, int S, int num_classes) {
  Tensor<uint8_t> lab({S, S});
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c) {
      uint8_t v = 0;
      if (inside(an.outer, r, c)) v = inside(an.inner, r, c) ? 2 : 1;
      lab.at(r, c) = v;
    }
  if (num_classes <= 2) {
    for (auto& v : lab.data) v = v ? 1 : 0;
    return lab;
  }
  for (int i = 0; i < an.n_satellites; ++i) {
    uint8_t cls = uint8_t(3 + i);
    if (cls >= num_classes) break;
    const auto& e = an.satellites[size_t(i)];
    int r0 = std::max(0, int(e.cy - std::max(e.a, e.b)) - 1);
    int r1 = std::min(S - 1, int(e.cy + std::max(e.a, e.b)) + 1);
    int c0 = std::max(0, int(e.cx - std::max(e.a, e.b)) - 1);
    int c1 = std::min(S - 1, int(e.cx + std::max(e.a, e.b)) + 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        if (lab.at(r, c) == 0 && inside(e, r, c)) lab.at(r, c) = cls;
  }
  return lab;
}

// Base tissue tones per class, before the modality remap.
inline double class_tone(int cls) {
  static const double tones[8] = {-0.75, 0.62, -0.12, 0.34, 0.04, 0.50, -0.38, 0.20};
  return tones[cls & 7];
}

inline double remap(double x, const ShiftParams& p) {
  double u = (x + 1.0) / 2.0;
  double v = p.gain * std::pow(u, p.gamma) + p.bias;
  v = std::min(1.0, std::max(0.0, v));
  return 2.0 * v - 1.0;
}

inline void box_blur(std::vector<double>& img, int S, int radius) {
  if (radius <= 0) return;
  std::vector<double> tmp(img.size());
  int w = 2 * radius + 1;
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c) {
      double acc = 0;
      for (int d = -radius; d <= radius; ++d) {
        int cc = std::min(S - 1, std::max(0, c + d));
        acc += img[size_t(r) * S + cc];
      }
      tmp[size_t(r) * S + c] = acc / w;
    }
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c) {
      double acc = 0;
      for (int d = -radius; d <= radius; ++d) {
        int rr = std::min(S - 1, std::max(0, r + d));
        acc += tmp[size_t(rr) * S + c];
      }
      img[size_t(r) * S + c] = acc / w;
    }
}

}  // namespace phantom_detail

// Render a label map through one modality's shift. Deterministic given the
// rng state.
inline Tensor<real_t> render_phantom(const Tensor<uint8_t>& label, const ShiftParams& shift, Rng& rng) {
  int S = label.dim(0);
  std::vector<double> img(label.numel());
  for (size_t i = 0; i < label.numel(); ++i)
    img[i] = phantom_detail::remap(phantom_detail::class_tone(label[i]), shift);
  phantom_detail::box_blur(img, S, shift.blur_radius);
  Tensor<real_t> out({S, S});
  for (size_t i = 0; i < img.size(); ++i) {
    double v = img[i];
    if (shift.noise_std > 0) v += rng.normal(0.0, shift.noise_std);
    out[i] = real_t(std::min(1.0, std::max(-1.0, v)));
  }
  return out;
}

inline DomainSample make_phantom_sample(const PhantomSpec& spec, Domain domain, const std::string& id) {
  Rng base(spec.seed);
  Rng anat_rng = base.fork("anatomy/" + id);
  Rng render_rng = base.fork("render/" + id);
  auto an = phantom_detail::draw_anatomy(spec.image_size, spec.num_classes, anat_rng);
  auto label = phantom_detail::rasterize(an, spec.image_size, spec.num_classes);
  const ShiftParams& shift = (domain == Domain::source) ? spec.source_shift : spec.target_shift;
  DomainSample s;
  s.image = render_phantom(label, shift, render_rng);
  s.domain = domain;
  s.id = id;
  if (domain != Domain::unlabeled_target) s.label = std::move(label);
  return s;
}

inline Dataset generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.image_size = spec.image_size;
  ds.num_classes = spec.num_classes;
  char buf[16];
  auto add = [&](Domain d, const char* prefix, int count) {
    for (int i = 0; i < count; ++i) {
      std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
      ds.samples.push_back(make_phantom_sample(spec, d, buf));
    }
  };
  add(Domain::source, "s", spec.num_source);
  add(Domain::labeled_target, "t", spec.num_labeled_target);
  add(Domain::unlabeled_target, "u", spec.num_unlabeled_target);
  add(Domain::test, "e", spec.num_test);
  return ds;
}

// Source/target renderings of the same anatomy; used to measure the domain gap.
inline std::pair<DomainSample, DomainSample> generate_matched_pair(const PhantomSpec& spec, int index) {
  Rng base(spec.seed);
  std::string tag = "pair" + std::to_string(index);
  Rng anat_rng = base.fork("anatomy/" + tag);
  auto an = phantom_detail::draw_anatomy(spec.image_size, spec.num_classes, anat_rng);
  auto label = phantom_detail::rasterize(an, spec.image_size, spec.num_classes);
  Rng rs = base.fork("render_s/" + tag), rt = base.fork("render_t/" + tag);
  DomainSample a, b;
  a.image = render_phantom(label, spec.source_shift, rs);
  a.label = label;
  a.domain = Domain::source;
  a.id = tag + "_s";
  b.image = render_phantom(label, spec.target_shift, rt);
  b.label = label;
  b.domain = Domain::labeled_target;
  b.id = tag + "_t";
  return {std::move(a), std::move(b)};
}

// Mean absolute per-pixel intensity difference between matched renderings.
inline double domain_gap_statistic(const PhantomSpec& spec, int n_pairs) {
  double acc = 0;
  for (int i = 0; i < n_pairs; ++i) {
    auto [a, b] = generate_matched_pair(spec, i);
    double d = 0;
    for (size_t j = 0; j < a.image.numel(); ++j) d += std::abs(double(a.image[j]) - double(b.image[j]));
    acc += d / double(a.image.numel());
  }
  return acc / n_pairs;
}

// ---- augmentation ----

struct AffineParams {
  double rot_deg = 0.0;
  double scale = 1.0;
  double shear = 0.0;
};

inline AffineParams draw_affine(Rng& rng) {
  AffineParams p;
  p.rot_deg = rng.uniform(-15.0, 15.0);
  p.scale = rng.uniform(0.9, 1.1);
  p.shear = rng.uniform(-0.1, 0.1);
  return p;
}

// Output pixel (r,c) samples the input at the inverse-mapped location; the
// forward map is rotate(rot) * shear * uniform-scale about the image center
// acting on (x=col, y=row). Image uses bilinear, label nearest-neighbor,
// both with border clamping so no new label values can appear.
inline DomainSample apply_affine(const DomainSample& s, const AffineParams& p) {
  int H = s.image.dim(0), W = s.image.dim(1);
  double th = p.rot_deg * 3.14159265358979323846 / 180.0;
  double ct = std::cos(th), st = std::sin(th);
  // M = R * Sh * S ; columns act on (x, y)
  double m00 = p.scale * ct, m01 = p.scale * (p.shear * ct - st);
  double m10 = p.scale * st, m11 = p.scale * (p.shear * st + ct);
  double det = m00 * m11 - m01 * m10;
  require(std::abs(det) > 1e-12, "apply_affine: singular transform");
  double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;
  double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;

  DomainSample out;
  out.domain = s.domain;
  out.id = s.id;
  out.image = Tensor<real_t>({H, W});
  if (s.label) out.label = Tensor<uint8_t>({H, W});
  auto clampi = [](int v, int hi) { return std::min(hi, std::max(0, v)); };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      double dx = c - cx, dy = r - cy;
      double sx = i00 * dx + i01 * dy + cx;
      double sy = i10 * dx + i11 * dy + cy;
      int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      double fx = sx - x0, fy = sy - y0;
      int x0c = clampi(x0, W - 1), x1c = clampi(x0 + 1, W - 1);
      int y0c = clampi(y0, H - 1), y1c = clampi(y0 + 1, H - 1);
      double v00 = s.image.at(y0c, x0c), v01 = s.image.at(y0c, x1c);
      double v10 = s.image.at(y1c, x0c), v11 = s.image.at(y1c, x1c);
      double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
      out.image.at(r, c) = real_t(v);
      if (s.label) {
        int nx = clampi(int(std::floor(sx + 0.5)), W - 1);
        int ny = clampi(int(std::floor(sy + 0.5)), H - 1);
        (*out.label).at(r, c) = (*s.label).at(ny, nx);
      }
    }
  return out;
}

inline DomainSample augment(const DomainSample& s, Rng& rng) {
  return apply_affine(s, draw_affine(rng));
}

// ---- on-disk dataset format ----
// meta.json + per-sample <id>.img (raw LE float32, row-major) and <id>.lbl
// (raw u8, row-major). Payload length must equal product(shape) * dtype size.

inline constexpr int kDatasetFormatVersion = 1;

inline void validate_labels(const Dataset& ds) {
  for (const auto& s : ds.samples) {
    bool should_have = s.domain != Domain::unlabeled_target;
    if (should_have != bool(s.label))
      throw StructuralError("sample " + s.id + ": label presence does not match domain " +
                            domain_name(s.domain));
    if (s.label)
      for (auto v : s.label->data)
        if (v >= ds.num_classes)
          throw StructuralError("sample " + s.id + ": label value " + std::to_string(int(v)) +
                                " out of range for num_classes=" + std::to_string(ds.num_classes));
  }
}

inline json save_dataset(const Dataset& ds, const fs::path& dir) {
  validate_labels(ds);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  json meta;
  meta["format_version"] = kDatasetFormatVersion;
  meta["image_size"] = ds.image_size;
  meta["num_classes"] = ds.num_classes;
  json recs = json::array();
  for (const auto& s : ds.samples) {
    json r{{"id", s.id},
           {"domain", domain_name(s.domain)},
           {"has_label", bool(s.label)},
           {"dtype", "f32"},
           {"shape", {s.image.dim(0), s.image.dim(1)}}};
    recs.push_back(r);
    write_f32_payload(dir / (s.id + ".img"), s.image.data);
    if (s.label) write_u8_payload(dir / (s.id + ".lbl"), s.label->data);
  }
  meta["samples"] = recs;
  save_json(dir / "meta.json", meta);
  return meta;
}

inline Dataset load_dataset(const fs::path& dir) {
  json meta = load_json(dir / "meta.json", "dataset meta");
  int version = json_get(meta, "format_version", -1);
  if (version != kDatasetFormatVersion)
    throw IoError("unknown format version " + std::to_string(version) + " in " +
                  (dir / "meta.json").string());
  Dataset ds;
  ds.image_size = json_require<int>(meta, "image_size", "dataset meta");
  ds.num_classes = json_require<int>(meta, "num_classes", "dataset meta");
  if (!meta.contains("samples")) throw IoError("corrupt header in dataset meta: no samples array");
  for (const auto& r : meta.at("samples")) {
    DomainSample s;
    s.id = json_require<std::string>(r, "id", "sample record");
    s.domain = domain_from_name(json_require<std::string>(r, "domain", "sample record"));
    auto shape = json_require<std::vector<int>>(r, "shape", "sample record");
    if (shape.size() != 2) throw IoError("sample " + s.id + ": bad shape in metadata");
    size_t n = size_t(shape[0]) * size_t(shape[1]);
    s.image = Tensor<real_t>({shape[0], shape[1]}, read_f32_payload(dir / (s.id + ".img"), n, s.id + ".img"));
    if (json_require<bool>(r, "has_label", "sample record"))
      s.label = Tensor<uint8_t>({shape[0], shape[1]}, read_u8_payload(dir / (s.id + ".lbl"), n, s.id + ".lbl"));
    ds.samples.push_back(std::move(s));
  }
  validate_labels(ds);
  return ds;
}

// ---- folds ----

struct SplitManifest {
  int fold_index = 0;
  std::vector<std::string> source_ids;
  std::vector<std::string> labeled_target_ids;  // training fold
  std::vector<std::string> unlabeled_ids;
  std::vector<std::string> test_ids;
};

inline constexpr int kNumFolds = 4;

// Fold assignment is a fixed pseudo-random permutation of the sorted
// labeled-target ids, so every caller sees the same four folds.
inline SplitManifest make_folds(const Dataset& ds, int fold) {
  if (fold < 0 || fold >= kNumFolds)
    throw ConfigError("fold index " + std::to_string(fold) + " out of range [0," +
                      std::to_string(kNumFolds - 1) + "]");
  SplitManifest m;
  m.fold_index = fold;
  std::vector<std::string> labeled;
  for (const auto& s : ds.samples) {
    switch (s.domain) {
      case Domain::source: m.source_ids.push_back(s.id); break;
      case Domain::labeled_target: labeled.push_back(s.id); break;
      case Domain::unlabeled_target: m.unlabeled_ids.push_back(s.id); break;
      case Domain::test: m.test_ids.push_back(s.id); break;
    }
  }
  if (int(labeled.size()) < kNumFolds)
    throw ConfigError("need at least " + std::to_string(kNumFolds) + " labeled target samples to fold");
  std::sort(labeled.begin(), labeled.end());
  Rng shuffle_rng(0x70F01D5ULL);
  for (size_t i = labeled.size(); i > 1; --i)
    std::swap(labeled[i - 1], labeled[shuffle_rng.uniform_index(i)]);
  for (size_t i = 0; i < labeled.size(); ++i) {
    if (int(i) % kNumFolds == fold)
      m.labeled_target_ids.push_back(labeled[i]);
    else
      m.test_ids.push_back(labeled[i]);
  }
  return m;
}

}  // namespace dt
