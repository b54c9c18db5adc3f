#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dt/io.hpp"
#include "dt/nn_ops.hpp"

// Concrete micro-architectures: a U-Net segmenter shared by the student and
// both teachers, and CycleGAN-style generator / patch discriminator pairs.
// Sizes are config-driven; defaults are desk scale.

namespace dt {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

// Ordered, named parameter list; declaration order is the checkpoint order.
template <class T>
class ParamStore {
 public:
  ad::Var<T> add(const std::string& name, Tensor<T> init) {
    auto p = ad::param(std::move(init));
    entries_.emplace_back(name, p);
    return p;
  }

  std::vector<ad::Var<T>> vars() const {
    std::vector<ad::Var<T>> v;
    for (auto& e : entries_) v.push_back(e.second);
    return v;
  }

  std::vector<NamedTensor<T>> read() const {
    std::vector<NamedTensor<T>> out;
    for (auto& e : entries_) out.push_back({e.first, e.second->value});
    return out;
  }

  void write(const std::vector<NamedTensor<T>>& in) {
    if (in.size() != entries_.size())
      throw StructuralError("parameter list size mismatch: got " + std::to_string(in.size()) +
                            ", expected " + std::to_string(entries_.size()));
    for (size_t i = 0; i < in.size(); ++i) {
      if (in[i].name != entries_[i].first)
        throw StructuralError("parameter order mismatch at index " + std::to_string(i) + ": got '" +
                              in[i].name + "', expected '" + entries_[i].first + "'");
      if (in[i].value.shape != entries_[i].second->value.shape)
        throw StructuralError("parameter shape mismatch for '" + in[i].name + "': got " +
                              shape_str(in[i].value.shape) + ", expected " +
                              shape_str(entries_[i].second->value.shape));
      entries_[i].second->value = in[i].value;
    }
  }

  size_t count() const {
    size_t n = 0;
    for (auto& e : entries_) n += e.second->value.numel();
    return n;
  }

  const std::vector<std::pair<std::string, ad::Var<T>>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, ad::Var<T>>> entries_;
};

namespace init {

// truncated normal (+-2 sigma), the translation-model convention
template <class T>
Tensor<T> trunc_normal(Shape s, double std, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = T(z * std);
  }
  return t;
}

// fan-in scaled normal for the segmenter convs
template <class T>
Tensor<T> he_normal(Shape s, Rng& rng) {
  size_t fan_in = 1;
  for (size_t i = 1; i < s.size(); ++i) fan_in *= size_t(s[i]);
  double std = std::sqrt(2.0 / double(fan_in));
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = T(rng.normal(0.0, std));
  return t;
}

}  // namespace init

// ---- segmenter ----

struct SegmenterConfig {
  int image_size = 64;
  int num_classes = 8;
  int depth = 2;       // number of downsamplings
  int base_width = 8;
  double dropout_rate = 0.25;

  void validate() const {
    if (depth < 1 || depth > 4) throw ConfigError("segmenter: depth must be in [1,4]");
    if (base_width < 1) throw ConfigError("segmenter: base_width must be positive");
    if (num_classes < 2) throw ConfigError("segmenter: num_classes must be >= 2");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("segmenter: dropout_rate in [0,1)");
    if (image_size % (1 << depth) != 0)
      throw ConfigError("segmenter: image_size " + std::to_string(image_size) +
                        " not divisible by 2^depth = " + std::to_string(1 << depth));
  }

  json to_json() const {
    return json{{"kind", "segmenter"}, {"image_size", image_size}, {"num_classes", num_classes},
                {"depth", depth},      {"base_width", base_width}, {"dropout_rate", dropout_rate}};
  }
  static SegmenterConfig from_json(const json& j) {
    SegmenterConfig c;
    c.image_size = json_require<int>(j, "image_size", "segmenter config");
    c.num_classes = json_require<int>(j, "num_classes", "segmenter config");
    c.depth = json_require<int>(j, "depth", "segmenter config");
    c.base_width = json_require<int>(j, "base_width", "segmenter config");
    c.dropout_rate = json_require<double>(j, "dropout_rate", "segmenter config");
    return c;
  }
};

// Encoder-decoder with skip connections; dropout after the deepest encoder
// conv and before the class head, active when training or in bayes mode.
template <class T>
class SegmenterT {
 public:
  SegmenterConfig cfg;
  bool bayes_mode = false;
  mutable int64_t access_count = 0;  // forward-pass trace, used by eval isolation checks

  SegmenterT() = default;
  SegmenterT(const SegmenterConfig& c, Rng rng) : cfg(c) {
    cfg.validate();
    int w = cfg.base_width;
    conv_pair("enc0", 1, w, rng);
    for (int d = 1; d < cfg.depth; ++d) conv_pair("enc" + std::to_string(d), w << (d - 1), w << d, rng);
    conv_pair("bottleneck", w << (cfg.depth - 1), w << cfg.depth, rng);
    for (int d = cfg.depth - 1; d >= 0; --d) {
      std::string nm = "dec" + std::to_string(d);
      add_conv(nm + ".up", w << (d + 1), w << d, 3, rng);
      add_conv(nm + ".fuse", w << (d + 1), w << d, 3, rng);
    }
    add_conv("head", w, cfg.num_classes, 1, rng);
  }

  // x: [N,1,H,W] -> logits [N,C,H,W]
  ad::Var<T> forward(const Tensor<T>& x, bool stochastic, Rng* rng = nullptr) const {
    ++access_count;
    if (stochastic && cfg.dropout_rate > 0)
      require(rng != nullptr, "segmenter: stochastic forward needs an rng");
    auto h = ad::constant(x);
    std::vector<ad::Var<T>> skips;
    h = block("enc0", h, 1);
    skips.push_back(h);
    for (int d = 1; d < cfg.depth; ++d) {
      h = block("enc" + std::to_string(d), h, 2);
      skips.push_back(h);
    }
    h = block("bottleneck", h, 2);
    if (stochastic && cfg.dropout_rate > 0) h = ad::dropout(h, cfg.dropout_rate, *rng);
    for (int d = cfg.depth - 1; d >= 0; --d) {
      std::string nm = "dec" + std::to_string(d);
      h = ad::relu(conv(nm + ".up", ad::upsample_nearest2x(h), 1));
      h = ad::concat_ch(h, skips[size_t(d)]);
      h = ad::relu(conv(nm + ".fuse", h, 1));
    }
    if (stochastic && cfg.dropout_rate > 0) h = ad::dropout(h, cfg.dropout_rate, *rng);
    return conv("head", h, 1);
  }

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  ParamStore<T> store_;

  void add_conv(const std::string& name, int cin, int cout, int k, Rng& rng) {
    store_.add(name + ".w", init::he_normal<T>({cout, cin, k, k}, rng));
    store_.add(name + ".b", Tensor<T>({cout}));
  }
  void conv_pair(const std::string& name, int cin, int cout, Rng& rng) {
    add_conv(name + ".conv1", cin, cout, 3, rng);
    add_conv(name + ".conv2", cout, cout, 3, rng);
  }
  ad::Var<T> find(const std::string& name) const {
    for (auto& e : store_.entries())
      if (e.first == name) return e.second;
    throw StructuralError("segmenter: no parameter named " + name);
  }
  ad::Var<T> conv(const std::string& name, const ad::Var<T>& x, int stride) const {
    return ad::conv2d(x, find(name + ".w"), find(name + ".b"), stride);
  }
  ad::Var<T> block(const std::string& name, const ad::Var<T>& x, int stride1) const {
    return ad::relu(conv(name + ".conv2", ad::relu(conv(name + ".conv1", x, stride1)), 1));
  }
};

// ---- generator / discriminator ----

enum class GenDirection { source_to_target, target_to_source };

struct GeneratorConfig {
  int image_size = 64;
  int base_width = 8;
  int n_blocks = 3;

  void validate() const {
    if (base_width < 1 || n_blocks < 0) throw ConfigError("generator: bad width/blocks");
    if (image_size % 2 != 0) throw ConfigError("generator: image_size must be even");
  }
  json to_json() const {
    return json{{"kind", "generator"}, {"image_size", image_size}, {"base_width", base_width},
                {"n_blocks", n_blocks}};
  }
  static GeneratorConfig from_json(const json& j) {
    GeneratorConfig c;
    c.image_size = json_require<int>(j, "image_size", "generator config");
    c.base_width = json_require<int>(j, "base_width", "generator config");
    c.n_blocks = json_require<int>(j, "n_blocks", "generator config");
    return c;
  }
};

// Downsample once, run residual blocks, upsample back; tanh bounds the
// output to [-1,1].
template <class T>
class GeneratorT {
 public:
  GeneratorConfig cfg;
  GenDirection direction = GenDirection::source_to_target;
  mutable int64_t access_count = 0;

  GeneratorT() = default;
  GeneratorT(const GeneratorConfig& c, GenDirection dir, Rng rng) : cfg(c), direction(dir) {
    cfg.validate();
    int w = cfg.base_width;
    add_conv("stem", 1, w, 3, rng);
    add_norm("stem", w);
    add_conv("down", w, 2 * w, 3, rng);
    add_norm("down", 2 * w);
    for (int b = 0; b < cfg.n_blocks; ++b) {
      std::string nm = "res" + std::to_string(b);
      add_conv(nm + ".conv1", 2 * w, 2 * w, 3, rng);
      add_norm(nm + ".conv1", 2 * w);
      add_conv(nm + ".conv2", 2 * w, 2 * w, 3, rng);
      add_norm(nm + ".conv2", 2 * w);
    }
    add_conv("up", 2 * w, w, 3, rng);
    add_norm("up", w);
    add_conv("out", w, 1, 3, rng);
  }

  ad::Var<T> forward(const Tensor<T>& x) const { return forward_var(ad::constant(x)); }

  ad::Var<T> forward_var(const ad::Var<T>& x) const {
    ++access_count;
    auto h = ad::relu(norm("stem", conv("stem", x, 1)));
    h = ad::relu(norm("down", conv("down", h, 2)));
    for (int b = 0; b < cfg.n_blocks; ++b) {
      std::string nm = "res" + std::to_string(b);
      auto r = ad::relu(norm(nm + ".conv1", conv(nm + ".conv1", h, 1)));
      r = norm(nm + ".conv2", conv(nm + ".conv2", r, 1));
      h = ad::relu(ad::add(h, r));
    }
    h = ad::relu(norm("up", conv("up", ad::upsample_nearest2x(h), 1)));
    return ad::tanh_v(conv("out", h, 1));
  }

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  ParamStore<T> store_;

  void add_conv(const std::string& name, int cin, int cout, int k, Rng& rng) {
    store_.add(name + ".w", init::trunc_normal<T>({cout, cin, k, k}, 0.02, rng));
    store_.add(name + ".b", Tensor<T>({cout}));
  }
  void add_norm(const std::string& name, int c) {
    store_.add(name + ".gamma", Tensor<T>({c}, T(1)));
    store_.add(name + ".beta", Tensor<T>({c}));
  }
  ad::Var<T> find(const std::string& name) const {
    for (auto& e : store_.entries())
      if (e.first == name) return e.second;
    throw StructuralError("generator: no parameter named " + name);
  }
  ad::Var<T> conv(const std::string& name, const ad::Var<T>& x, int stride) const {
    return ad::conv2d(x, find(name + ".w"), find(name + ".b"), stride);
  }
  ad::Var<T> norm(const std::string& name, const ad::Var<T>& x) const {
    return ad::instance_norm(x, find(name + ".gamma"), find(name + ".beta"));
  }
};

enum class DiscDomain { source, target };

struct DiscriminatorConfig {
  int image_size = 64;
  int base_width = 8;

  void validate() const {
    if (base_width < 1) throw ConfigError("discriminator: bad width");
    if (image_size % 8 != 0) throw ConfigError("discriminator: image_size must be divisible by 8");
  }
  json to_json() const {
    return json{{"kind", "discriminator"}, {"image_size", image_size}, {"base_width", base_width}};
  }
  static DiscriminatorConfig from_json(const json& j) {
    DiscriminatorConfig c;
    c.image_size = json_require<int>(j, "image_size", "discriminator config");
    c.base_width = json_require<int>(j, "base_width", "discriminator config");
    return c;
  }
};

// Three stride-2 convs then a 1x1 head and sigmoid: a patch map in (0,1).
template <class T>
class DiscriminatorT {
 public:
  DiscriminatorConfig cfg;
  DiscDomain domain = DiscDomain::target;
  mutable int64_t access_count = 0;

  DiscriminatorT() = default;
  DiscriminatorT(const DiscriminatorConfig& c, DiscDomain dom, Rng rng) : cfg(c), domain(dom) {
    cfg.validate();
    int w = cfg.base_width;
    add_conv("c0", 1, w, 3, rng);
    add_conv("c1", w, 2 * w, 3, rng);
    add_norm("c1", 2 * w);
    add_conv("c2", 2 * w, 4 * w, 3, rng);
    add_norm("c2", 4 * w);
    add_conv("head", 4 * w, 1, 1, rng);
  }

  // [N,1,H,W] -> patch probabilities [N,1,H/8,W/8]
  ad::Var<T> forward(const Tensor<T>& x) const { return forward_var(ad::constant(x)); }

  ad::Var<T> forward_var(const ad::Var<T>& x) const {
    ++access_count;
    auto h = ad::leaky_relu(conv("c0", x, 2), T(0.2));
    h = ad::leaky_relu(norm("c1", conv("c1", h, 2)), T(0.2));
    h = ad::leaky_relu(norm("c2", conv("c2", h, 2)), T(0.2));
    return ad::sigmoid(conv("head", h, 1));
  }

  // Patch-averaged score per sample: [N]
  ad::Var<T> score_var(const ad::Var<T>& x) const { return ad::mean_per_sample(forward_var(x)); }

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  ParamStore<T> store_;

  void add_conv(const std::string& name, int cin, int cout, int k, Rng& rng) {
    store_.add(name + ".w", init::trunc_normal<T>({cout, cin, k, k}, 0.02, rng));
    store_.add(name + ".b", Tensor<T>({cout}));
  }
  void add_norm(const std::string& name, int c) {
    store_.add(name + ".gamma", Tensor<T>({c}, T(1)));
    store_.add(name + ".beta", Tensor<T>({c}));
  }
  ad::Var<T> find(const std::string& name) const {
    for (auto& e : store_.entries())
      if (e.first == name) return e.second;
    throw StructuralError("discriminator: no parameter named " + name);
  }
  ad::Var<T> conv(const std::string& name, const ad::Var<T>& x, int stride) const {
    return ad::conv2d(x, find(name + ".w"), find(name + ".b"), stride);
  }
  ad::Var<T> norm(const std::string& name, const ad::Var<T>& x) const {
    return ad::instance_norm(x, find(name + ".gamma"), find(name + ".beta"));
  }
};

using Segmenter = SegmenterT<real_t>;
using Generator = GeneratorT<real_t>;
using Discriminator = DiscriminatorT<real_t>;

// ---- parameter access (EMA and checkpoints build on these) ----

template <class Net>
auto read_parameters(const Net& net) {
  return net.params().read();
}

template <class Net, class T>
void write_parameters(Net& net, const std::vector<NamedTensor<T>>& values) {
  net.params().write(values);
}

// ---- checkpoint format ----
// "DTCP" magic, u32 LE header length, header JSON, then the float32 payload
// in declared parameter order.

inline constexpr char kCheckpointMagic[4] = {'D', 'T', 'C', 'P'};
inline constexpr int kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const fs::path& path, const std::string& role, int64_t step, const json& arch,
                     const ParamStore<T>& store, const std::vector<Tensor<T>>* extra_payload = nullptr) {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["role"] = role;
  header["step"] = step;
  header["arch"] = arch;
  json names = json::array();
  for (auto& e : store.entries())
    names.push_back(json{{"name", e.first}, {"shape", e.second->value.shape}});
  header["params"] = names;
  header["extra_tensors"] = extra_payload ? int(extra_payload->size()) : 0;
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for write: " + path.string());
  f.write(kCheckpointMagic, 4);
  uint32_t len = uint32_t(hs.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(hs.data(), std::streamsize(hs.size()));
  auto dump = [&](const Tensor<T>& t) {
    for (T v : t.data) {
      float fv = float(v);
      f.write(reinterpret_cast<const char*>(&fv), 4);
    }
  };
  for (auto& e : store.entries()) dump(e.second->value);
  if (extra_payload)
    for (auto& t : *extra_payload) dump(t);
  if (!f) throw IoError("short write: " + path.string());
}

struct CheckpointHeader {
  json header;
  fs::path path;
  size_t payload_offset = 0;
};

inline CheckpointHeader open_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("corrupt header: bad magic in " + path.string());
  uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  std::string hs(len, '\0');
  f.read(hs.data(), len);
  if (!f) throw IoError("corrupt header: truncated " + path.string());
  CheckpointHeader ch;
  try {
    ch.header = json::parse(hs);
  } catch (const std::exception& e) {
    throw IoError("corrupt header in " + path.string() + ": " + e.what());
  }
  if (json_get(ch.header, "format_version", -1) != kCheckpointVersion)
    throw IoError("unknown format version in " + path.string());
  ch.path = path;
  ch.payload_offset = 8 + len;
  return ch;
}

template <class T>
void load_checkpoint_params(const CheckpointHeader& ch, ParamStore<T>& store,
                            std::vector<Tensor<T>>* extra_payload = nullptr) {
  const json& names = ch.header.at("params");
  if (names.size() != store.entries().size())
    throw StructuralError("checkpoint parameter count mismatch in " + ch.path.string());
  for (size_t i = 0; i < names.size(); ++i) {
    const auto& e = store.entries()[i];
    if (names[i].at("name").get<std::string>() != e.first)
      throw StructuralError("checkpoint parameter order mismatch: " +
                            names[i].at("name").get<std::string>() + " vs " + e.first);
    if (names[i].at("shape").get<Shape>() != e.second->value.shape)
      throw StructuralError("checkpoint shape mismatch for " + e.first);
  }
  std::ifstream f(ch.path, std::ios::binary);
  f.seekg(std::streamoff(ch.payload_offset));
  auto slurp = [&](Tensor<T>& t) {
    for (auto& v : t.data) {
      float fv;
      f.read(reinterpret_cast<char*>(&fv), 4);
      v = T(fv);
    }
  };
  std::vector<NamedTensor<T>> values;
  for (auto& e : store.entries()) {
    NamedTensor<T> nt{e.first, Tensor<T>(e.second->value.shape)};
    slurp(nt.value);
    values.push_back(std::move(nt));
  }
  if (extra_payload)
    for (auto& t : *extra_payload) slurp(t);
  if (!f) throw IoError("payload size mismatch in checkpoint " + ch.path.string());
  store.write(values);
}

}  // namespace dt
