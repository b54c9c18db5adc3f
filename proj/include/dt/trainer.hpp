#pragma once

#include <array>
#include <optional>

#include "dt/alignment.hpp"
#include "dt/consistency.hpp"
#include "dt/distill.hpp"
#include "dt/metrics.hpp"
#include "dt/phantom.hpp"

// End-to-end orchestration: per-iteration phase ordering (alignment, then
// inter-domain teacher, then student, then the EMA teacher), the ablation
// mode lattice, CSV logging, checkpoint/resume, and seeded determinism.

namespace dt {

enum class TrainMode {
  supervised_only,
  pseudo_label_baseline,
  gan_baseline,
  no_intra_teacher,
  no_inter_teacher,
  vanilla_two_teacher,
  no_intra_rc,
  no_inter_rc,
  full,
};

inline const std::array<std::pair<TrainMode, const char*>, 9>& mode_names() {
  static const std::array<std::pair<TrainMode, const char*>, 9> names{{
      {TrainMode::supervised_only, "supervised_only"},
      {TrainMode::pseudo_label_baseline, "pseudo_label_baseline"},
      {TrainMode::gan_baseline, "gan_baseline"},
      {TrainMode::no_intra_teacher, "no_intra_teacher"},
      {TrainMode::no_inter_teacher, "no_inter_teacher"},
      {TrainMode::vanilla_two_teacher, "vanilla_two_teacher"},
      {TrainMode::no_intra_rc, "no_intra_rc"},
      {TrainMode::no_inter_rc, "no_inter_rc"},
      {TrainMode::full, "full"},
  }};
  return names;
}

inline std::string mode_name(TrainMode m) {
  for (auto& [mode, name] : mode_names())
    if (mode == m) return name;
  return "?";
}

inline TrainMode mode_from_name(const std::string& s) {
  for (auto& [mode, name] : mode_names())
    if (s == name) return mode;
  std::string valid;
  for (auto& [mode, name] : mode_names()) valid += std::string(name) + " ";
  throw ConfigError("unknown mode '" + s + "'; valid modes: " + valid);
}

// Which components each ablation row activates.
inline bool mode_uses_aam(TrainMode m) {
  return m != TrainMode::supervised_only && m != TrainMode::pseudo_label_baseline;
}
inline bool mode_uses_inter_teacher(TrainMode m) {
  return m == TrainMode::no_intra_teacher || m == TrainMode::vanilla_two_teacher ||
         m == TrainMode::no_intra_rc || m == TrainMode::no_inter_rc || m == TrainMode::full;
}
inline bool mode_uses_intra_teacher(TrainMode m) {
  return m == TrainMode::no_inter_teacher || m == TrainMode::vanilla_two_teacher ||
         m == TrainMode::no_intra_rc || m == TrainMode::no_inter_rc || m == TrainMode::full;
}
// Unlabeled data through argmax pseudo labels (the no-intra-teacher route).
inline bool mode_uses_pseudo_labels(TrainMode m) {
  return m == TrainMode::pseudo_label_baseline || m == TrainMode::gan_baseline ||
         m == TrainMode::no_intra_teacher;
}
// Student trains directly on translated source with its labels.
inline bool mode_joint_synth_supervision(TrainMode m) {
  return m == TrainMode::gan_baseline || m == TrainMode::no_inter_teacher;
}
inline bool mode_inter_rc(TrainMode m) { return m == TrainMode::no_intra_rc || m == TrainMode::full; }
inline bool mode_intra_rc(TrainMode m) { return m == TrainMode::no_inter_rc || m == TrainMode::full; }

struct TrainConfig {
  TrainMode mode = TrainMode::full;
  double lambda_kd = 5.0;
  double lambda_cyc = 10.0;
  double alpha = 0.99;
  int n_passes = 8;
  int t_max = 50;
  double lr = 1e-4;
  double aam_lr = 2e-4;
  int batch_source = 4;
  int batch_target = 4;
  int batch_unlabeled = 4;
  uint64_t seed = 0;
  int epochs = 50;
  double w_max = 10.0;
  double noise_std = 0.1;
  int warmup_epochs = 10;  // supervised epochs before pseudo-labeling starts
  bool weight_renorm = false;
  int seg_depth = 2;
  int seg_base_width = 16;
  int gen_base_width = 8;
  int gen_n_blocks = 3;
  int disc_base_width = 8;
  double dropout_rate = 0.25;
  bool augment_data = true;
  bool dump_uncertainty = false;
  int checkpoint_every = 0;  // epochs; 0 = final only

  void validate() const {
    if (lr < 0 || aam_lr < 0) throw ConfigError("config: learning rates must be nonnegative");
    if (lambda_kd < 0 || lambda_cyc < 0) throw ConfigError("config: loss weights must be nonnegative");
    if (alpha < 0 || alpha > 1) throw ConfigError("config: alpha must be in [0,1]");
    if (n_passes < 1) throw ConfigError("config: n_passes must be >= 1");
    if (t_max < 1) throw ConfigError("config: t_max must be >= 1");
    if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (batch_source < 1 || batch_target < 1 || batch_unlabeled < 1)
      throw ConfigError("config: batch sizes must be >= 1");
    if (w_max <= 0) throw ConfigError("config: w_max must be positive");
    if (noise_std < 0) throw ConfigError("config: noise_std must be nonnegative");
    if (warmup_epochs < 0) throw ConfigError("config: warmup_epochs must be nonnegative");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("config: dropout_rate in [0,1)");
  }

  json to_json() const {
    return json{{"mode", mode_name(mode)},
                {"lambda_kd", lambda_kd},
                {"lambda_cyc", lambda_cyc},
                {"alpha", alpha},
                {"n_passes", n_passes},
                {"t_max", t_max},
                {"lr", lr},
                {"aam_lr", aam_lr},
                {"batch_source", batch_source},
                {"batch_target", batch_target},
                {"batch_unlabeled", batch_unlabeled},
                {"seed", seed},
                {"epochs", epochs},
                {"w_max", w_max},
                {"noise_std", noise_std},
                {"warmup_epochs", warmup_epochs},
                {"weight_renorm", weight_renorm},
                {"seg_depth", seg_depth},
                {"seg_base_width", seg_base_width},
                {"gen_base_width", gen_base_width},
                {"gen_n_blocks", gen_n_blocks},
                {"disc_base_width", disc_base_width},
                {"dropout_rate", dropout_rate},
                {"augment_data", augment_data},
                {"dump_uncertainty", dump_uncertainty},
                {"checkpoint_every", checkpoint_every}};
  }

  static TrainConfig from_json(const json& j) {
    TrainConfig c;
    if (j.contains("mode")) c.mode = mode_from_name(j.at("mode").get<std::string>());
    c.lambda_kd = json_get(j, "lambda_kd", c.lambda_kd);
    c.lambda_cyc = json_get(j, "lambda_cyc", c.lambda_cyc);
    c.alpha = json_get(j, "alpha", c.alpha);
    c.n_passes = json_get(j, "n_passes", c.n_passes);
    c.t_max = json_get(j, "t_max", c.t_max);
    c.lr = json_get(j, "lr", c.lr);
    c.aam_lr = json_get(j, "aam_lr", c.aam_lr);
    c.batch_source = json_get(j, "batch_source", c.batch_source);
    c.batch_target = json_get(j, "batch_target", c.batch_target);
    c.batch_unlabeled = json_get(j, "batch_unlabeled", c.batch_unlabeled);
    c.seed = json_get(j, "seed", c.seed);
    c.epochs = json_get(j, "epochs", c.epochs);
    c.w_max = json_get(j, "w_max", c.w_max);
    c.noise_std = json_get(j, "noise_std", c.noise_std);
    c.warmup_epochs = json_get(j, "warmup_epochs", c.warmup_epochs);
    c.weight_renorm = json_get(j, "weight_renorm", c.weight_renorm);
    c.seg_depth = json_get(j, "seg_depth", c.seg_depth);
    c.seg_base_width = json_get(j, "seg_base_width", c.seg_base_width);
    c.gen_base_width = json_get(j, "gen_base_width", c.gen_base_width);
    c.gen_n_blocks = json_get(j, "gen_n_blocks", c.gen_n_blocks);
    c.disc_base_width = json_get(j, "disc_base_width", c.disc_base_width);
    c.dropout_rate = json_get(j, "dropout_rate", c.dropout_rate);
    c.augment_data = json_get(j, "augment_data", c.augment_data);
    c.dump_uncertainty = json_get(j, "dump_uncertainty", c.dump_uncertainty);
    c.checkpoint_every = json_get(j, "checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
  }

  // "--set key=value" overrides; unknown keys list the valid ones.
  void apply_override(const std::string& key, const std::string& value) {
    json j = to_json();
    if (!j.contains(key)) {
      std::string valid;
      for (auto& [k, v] : j.items()) valid += k + " ";
      throw ConfigError("unknown override key '" + key + "'; valid keys: " + valid);
    }
    try {
      if (key == "mode") {
        j[key] = value;
      } else if (j.at(key).is_boolean()) {
        if (value != "true" && value != "false" && value != "0" && value != "1")
          throw ConfigError("override '" + key + "' expects a boolean");
        j[key] = (value == "true" || value == "1");
      } else if (j.at(key).is_number_integer() || j.at(key).is_number_unsigned()) {
        j[key] = std::stoll(value);
      } else {
        j[key] = std::stod(value);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("cannot parse override value '" + value + "' for key '" + key + "'");
    }
    *this = from_json(j);
  }
};

// ---- spec-level helper ops ----

// L_stu = seg + lambda_kd * inter + lambda_con * intra; null parts are
// inactive. Every present component must be finite.
template <class T>
ad::Var<T> student_objective(const ad::Var<T>& seg, const ad::Var<T>* inter, const ad::Var<T>* intra,
                             double lambda_kd, double lambda_con) {
  auto check = [](const ad::Var<T>& v, const char* name) {
    if (!is_finite(v->value[0]))
      throw NonFiniteError(std::string("student objective: non-finite component ") + name + " = " +
                           std::to_string(double(v->value[0])));
  };
  check(seg, "seg");
  auto total = seg;
  if (inter) {
    check(*inter, "inter");
    total = ad::add(total, ad::mul_scalar(*inter, T(lambda_kd)));
  }
  if (intra) {
    check(*intra, "intra");
    total = ad::add(total, ad::mul_scalar(*intra, T(lambda_con)));
  }
  return total;
}

// Gradient-detached argmax labels from a deterministic forward pass; ties
// break to the lowest class index.
template <class T>
Tensor<uint8_t> pseudo_label_pass(const SegmenterT<T>& model, const Tensor<T>& x_u) {
  auto probs = ad::softmax_tensor(model.forward(x_u, /*stochastic=*/false)->value);
  return ad::argmax_labels(probs);
}

// ---- batch plumbing ----

// Cycles a shuffled index order, reshuffling on wrap.
struct IndexCycler {
  std::vector<int> order;
  size_t pos = 0;

  void reset(int n) {
    order.resize(size_t(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    pos = 0;
  }
  std::vector<int> next(int k, Rng& rng) {
    std::vector<int> out;
    for (int i = 0; i < k; ++i) {
      if (pos == order.size()) {
        for (size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[rng.uniform_index(j)]);
        pos = 0;
      }
      out.push_back(order[pos++]);
    }
    return out;
  }
};

struct IterationLog {
  int64_t iteration = 0;
  int64_t epoch = 0;
  std::string phases;
  // empty-string cells in the CSV when a phase is inactive
  std::optional<double> loss_g, loss_d, loss_adv_t, loss_adv_s, loss_cyc;
  std::optional<double> loss_tea_seg;
  double loss_stu_seg = 0;
  std::optional<double> loss_inter, loss_intra;
  double loss_stu_total = 0;
  double lambda_con = 0, u_thre = 0;
  std::optional<double> mask_coverage;
  std::optional<double> kd_w_mean, kd_w_max, kd_clamp_rate;
};

inline const char* train_log_header() {
  return "iteration,epoch,phases,loss_g,loss_d,loss_adv_t,loss_adv_s,loss_cyc,loss_tea_seg,"
         "loss_stu_seg,loss_inter,loss_intra,loss_stu_total,lambda_con,u_thre,mask_coverage,"
         "kd_w_mean,kd_w_max,kd_clamp_rate";
}

inline std::string train_log_row(const IterationLog& l) {
  std::ostringstream os;
  os << std::setprecision(10);
  auto opt = [&](const std::optional<double>& v) {
    os << ",";
    if (v) os << *v;
  };
  os << l.iteration << "," << l.epoch << "," << l.phases;
  opt(l.loss_g);
  opt(l.loss_d);
  opt(l.loss_adv_t);
  opt(l.loss_adv_s);
  opt(l.loss_cyc);
  opt(l.loss_tea_seg);
  os << "," << l.loss_stu_seg;
  opt(l.loss_inter);
  opt(l.loss_intra);
  os << "," << l.loss_stu_total << "," << l.lambda_con << "," << l.u_thre;
  opt(l.mask_coverage);
  opt(l.kd_w_mean);
  opt(l.kd_w_max);
  opt(l.kd_clamp_rate);
  return os.str();
}

// ---- the trainer ----

class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& ds, const SplitManifest& split)
      : cfg_(std::move(cfg)), image_size_(ds.image_size), num_classes_(ds.num_classes) {
    cfg_.validate();
    bind_dataset(ds, split);
    Rng root(cfg_.seed);

    SegmenterConfig seg;
    seg.image_size = image_size_;
    seg.num_classes = num_classes_;
    seg.depth = cfg_.seg_depth;
    seg.base_width = cfg_.seg_base_width;
    seg.dropout_rate = cfg_.dropout_rate;
    student_ = Segmenter(seg, root.fork("student"));
    student_opt_ = Adam(student_.params().vars(), cfg_.lr);

    if (mode_uses_inter_teacher(cfg_.mode)) {
      inter_teacher_ = Segmenter(seg, root.fork("inter_teacher"));
      inter_opt_ = Adam(inter_teacher_->params().vars(), cfg_.lr);
    }
    if (mode_uses_intra_teacher(cfg_.mode)) ema_ = EmaState(student_, cfg_.alpha);
    if (mode_uses_aam(cfg_.mode)) {
      GeneratorConfig gc;
      gc.image_size = image_size_;
      gc.base_width = cfg_.gen_base_width;
      gc.n_blocks = cfg_.gen_n_blocks;
      DiscriminatorConfig dc;
      dc.image_size = image_size_;
      dc.base_width = cfg_.disc_base_width;
      aam_.emplace(gc, dc, real_t(cfg_.lambda_cyc), root.fork("aam"));
      auto gp = aam_->g_s2t.params().vars();
      for (auto& p : aam_->g_t2s.params().vars()) gp.push_back(p);
      auto dp = aam_->d_s.params().vars();
      for (auto& p : aam_->d_t.params().vars()) dp.push_back(p);
      gen_opt_ = Adam(gp, cfg_.aam_lr);
      disc_opt_ = Adam(dp, cfg_.aam_lr);
    }

    rng_draw_ = root.fork("draw");
    rng_aug_ = root.fork("augment");
    rng_student_ = root.fork("student_dropout");
    rng_teacher_ = root.fork("teacher_dropout");
    rng_mc_ = root.fork("mc_passes");
    rng_noise_ = root.fork("consistency_noise");
    cyc_s_.reset(int(source_.size()));
    cyc_t_.reset(int(labeled_.size()));
    cyc_u_.reset(int(unlabeled_.size()));
    cyc_aam_t_.reset(int(target_pool_.size()));
  }

  // bind_dataset must be called with the same dataset and split after a
  // resume; samples are referenced, not copied.
  void bind_dataset(const Dataset& ds, const SplitManifest& split) {
    require(ds.image_size > 0, "trainer: dataset not loaded");
    source_.clear();
    labeled_.clear();
    unlabeled_.clear();
    target_pool_.clear();
    auto by_id = [&](const std::string& id) -> const DomainSample* {
      for (const auto& s : ds.samples)
        if (s.id == id) return &s;
      throw ConfigError("trainer: split references unknown sample id " + id);
    };
    for (const auto& id : split.source_ids) source_.push_back(by_id(id));
    for (const auto& id : split.labeled_target_ids) labeled_.push_back(by_id(id));
    for (const auto& id : split.unlabeled_ids) unlabeled_.push_back(by_id(id));
    for (const auto* s : labeled_) target_pool_.push_back(s);
    for (const auto* s : unlabeled_) target_pool_.push_back(s);
    if (source_.empty() && mode_uses_aam(cfg_.mode))
      throw ConfigError("trainer: alignment needs source samples");
    if (labeled_.empty()) throw ConfigError("trainer: no labeled target samples in split");
    iters_per_epoch_ = unlabeled_.empty()
                           ? (int(labeled_.size()) + cfg_.batch_target - 1) / cfg_.batch_target
                           : (int(unlabeled_.size()) + cfg_.batch_unlabeled - 1) / cfg_.batch_unlabeled;
  }

  const TrainConfig& config() const { return cfg_; }
  int64_t iteration() const { return iteration_; }
  int64_t epoch() const { return epoch_; }
  int iters_per_epoch() const { return iters_per_epoch_; }
  const Segmenter& student() const { return student_; }
  Segmenter& student() { return student_; }
  const Segmenter* inter_teacher() const { return inter_teacher_ ? &*inter_teacher_ : nullptr; }
  const EmaState* ema() const { return ema_ ? &*ema_ : nullptr; }
  const AAMState* aam() const { return aam_ ? &*aam_ : nullptr; }

  double lambda_con_now() const {
    RampSchedule s{RampKind::lambda_con, cfg_.t_max, std::log(double(num_classes_))};
    return s.value(double(epoch_));
  }
  double u_thre_now() const {
    RampSchedule s{RampKind::u_thre, cfg_.t_max, std::log(double(num_classes_))};
    return s.value(double(epoch_));
  }

  IterationLog train_iteration() {
    IterationLog log;
    log.iteration = iteration_;
    log.epoch = epoch_;
    log.lambda_con = lambda_con_now();
    log.u_thre = u_thre_now();
    std::vector<std::string> phases;

    // batch assembly; one batch per active stream per iteration
    bool need_source = mode_uses_aam(cfg_.mode) || cfg_.mode == TrainMode::pseudo_label_baseline;
    bool need_unlabeled = (mode_uses_pseudo_labels(cfg_.mode) || mode_uses_intra_teacher(cfg_.mode)) &&
                          !unlabeled_.empty();
    Tensor<real_t> xs, xt, xu, xt_aam;
    Tensor<uint8_t> ys, yt;
    if (need_source) draw_batch(source_, cyc_s_, cfg_.batch_source, &xs, &ys);
    draw_batch(labeled_, cyc_t_, cfg_.batch_target, &xt, &yt);
    if (need_unlabeled) draw_batch(unlabeled_, cyc_u_, cfg_.batch_unlabeled, &xu, nullptr);
    if (mode_uses_aam(cfg_.mode)) draw_batch(target_pool_, cyc_aam_t_, cfg_.batch_source, &xt_aam, nullptr);

    // phase 1: appearance alignment
    SyntheticBatch synth;
    if (mode_uses_aam(cfg_.mode)) {
      auto stats = aam_step(*aam_, xs, xt_aam, *gen_opt_, *disc_opt_, &synth);
      log.loss_g = stats.loss_g;
      log.loss_d = stats.loss_d;
      log.loss_adv_t = stats.loss_adv_t;
      log.loss_adv_s = stats.loss_adv_s;
      log.loss_cyc = stats.loss_cyc;
      phases.push_back("aam");
    }

    // phase 2: inter-domain teacher
    if (inter_teacher_) {
      log.loss_tea_seg = inter_teacher_step(*inter_teacher_, synth.images, ys, *inter_opt_, rng_teacher_);
      phases.push_back("inter");
    }

    // phase 3: student
    {
      using namespace ad;
      auto stu_probs_t = softmax_ch(student_.forward(xt, true, &rng_student_));
      auto seg = hybrid_seg_loss(stu_probs_t, yt);
      if (mode_joint_synth_supervision(cfg_.mode)) {
        auto p = softmax_ch(student_.forward(synth.images, true, &rng_student_));
        seg = add(seg, hybrid_seg_loss(p, ys));
      }
      if (cfg_.mode == TrainMode::pseudo_label_baseline) {
        auto p = softmax_ch(student_.forward(xs, true, &rng_student_));
        seg = add(seg, hybrid_seg_loss(p, ys));
      }
      if (mode_uses_pseudo_labels(cfg_.mode) && !unlabeled_.empty() && epoch_ >= cfg_.warmup_epochs) {
        auto pl = pseudo_label_pass(student_, xu);
        auto p = softmax_ch(student_.forward(xu, true, &rng_student_));
        seg = add(seg, hybrid_seg_loss(p, pl));
        phases.push_back("pseudo");
      }

      std::optional<Var<real_t>> inter_loss;
      if (inter_teacher_) {
        auto targets = make_soft_targets(*inter_teacher_, synth.images);
        std::vector<ImportanceWeight> ws;
        double wsum = 0, wmax = 0;
        int clamped = 0;
        for (double d : synth.d_scores) {
          ImportanceWeight w;
          if (mode_inter_rc(cfg_.mode)) {
            w = importance_weight(d, cfg_.w_max);
          } else {
            w.raw_d_score = d;
            w.weight = 1.0;  // reliability control off
          }
          wsum += w.weight;
          wmax = std::max(wmax, w.weight);
          clamped += w.clamped;
          ws.push_back(w);
        }
        auto stu_synth = softmax_ch(student_.forward(synth.images, true, &rng_student_));
        inter_loss = weighted_kd_loss(targets, stu_synth, ws, cfg_.weight_renorm);
        log.kd_w_mean = wsum / double(ws.size());
        log.kd_w_max = wmax;
        log.kd_clamp_rate = double(clamped) / double(ws.size());
      }

      std::optional<Var<real_t>> intra_loss;
      if (ema_ && !unlabeled_.empty()) {
        auto unc = mc_uncertainty(ema_->teacher, xu, cfg_.n_passes, cfg_.noise_std, rng_mc_);
        double thre = mode_intra_rc(cfg_.mode) ? log.u_thre
                                               : std::log(double(num_classes_)) + 1.0;  // mask everything in
        auto xu_student = add_input_noise(xu, cfg_.noise_std, rng_noise_);
        auto xu_teacher = add_input_noise(xu, cfg_.noise_std, rng_noise_);
        auto stu_u = softmax_ch(student_.forward(xu_student, true, &rng_student_));
        auto tea_u = softmax_tensor(ema_->teacher.forward(xu_teacher, false)->value);
        auto mc = masked_consistency_loss(stu_u, tea_u, unc.entropy, thre);
        intra_loss = mc.loss;
        log.mask_coverage = mc.mask_coverage;
        last_uncertainty_ = unc.entropy;
      }

      auto total = student_objective(seg, inter_loss ? &*inter_loss : nullptr,
                                     intra_loss ? &*intra_loss : nullptr, cfg_.lambda_kd, log.lambda_con);
      log.loss_stu_seg = double(seg->value[0]);
      if (inter_loss) log.loss_inter = double((*inter_loss)->value[0]);
      if (intra_loss) log.loss_intra = double((*intra_loss)->value[0]);
      log.loss_stu_total = double(total->value[0]);
      if (!is_finite(log.loss_stu_total))
        throw NonFiniteError("student diverged at iteration " + std::to_string(iteration_) +
                             ": total=" + std::to_string(log.loss_stu_total) +
                             " seg=" + std::to_string(log.loss_stu_seg));
      student_opt_->zero_grad();
      backward(total);
      student_opt_->step();
      phases.push_back("student");
    }

    // phase 4: intra-domain teacher tracks the student
    if (ema_) {
      ema_update(*ema_, student_.params().read());
      phases.push_back("ema");
    }

    std::string joined;
    for (size_t i = 0; i < phases.size(); ++i) joined += (i ? "|" : "") + phases[i];
    log.phases = joined;

    ++iteration_;
    epoch_ = iteration_ / iters_per_epoch_;
    return log;
  }

  // Full run: writes config.json, train_log.csv, optional uncertainty dumps
  // and checkpoints under run_dir.
  void train(const fs::path& run_dir) {
    fs::create_directories(run_dir);
    fs::create_directories(run_dir / "checkpoints");
    save_json(run_dir / "config.json", cfg_.to_json());
    std::ofstream logf(run_dir / "train_log.csv", iteration_ == 0 ? std::ios::trunc : std::ios::app);
    if (!logf) throw IoError("cannot write train log in " + run_dir.string());
    if (iteration_ == 0) logf << train_log_header() << "\n";
    int64_t total_iters = int64_t(cfg_.epochs) * iters_per_epoch_;
    while (iteration_ < total_iters) {
      int64_t before_epoch = epoch_;
      auto log = train_iteration();
      logf << train_log_row(log) << "\n";
      if (epoch_ != before_epoch) {
        if (cfg_.dump_uncertainty && last_uncertainty_.numel() > 0) dump_uncertainty(run_dir, before_epoch);
        if (cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0)
          checkpoint(run_dir / "checkpoints");
      }
    }
    logf.flush();
    checkpoint(run_dir / "checkpoints");
  }

  FoldReport evaluate(const std::vector<DomainSample>& test_set, int fold_index) const {
    return evaluate_fold(student_, test_set, fold_index);
  }

  // ---- checkpoint / resume ----

  void checkpoint(const fs::path& dir) {
    fs::create_directories(dir);
    save_checkpoint(dir / "student.ckpt", "student", iteration_, student_.cfg.to_json(), student_.params());
    save_adam(dir / "opt_student.ckpt", "adam:student", *student_opt_);
    if (inter_teacher_) {
      save_checkpoint(dir / "inter_teacher.ckpt", "inter_teacher", iteration_,
                      inter_teacher_->cfg.to_json(), inter_teacher_->params());
      save_adam(dir / "opt_inter.ckpt", "adam:inter", *inter_opt_);
    }
    if (ema_) {
      json arch = ema_->teacher.cfg.to_json();
      arch["alpha"] = ema_->alpha;
      arch["ema_step"] = ema_->step;
      save_checkpoint(dir / "ema_teacher.ckpt", "ema_teacher", iteration_, arch, ema_->teacher.params());
    }
    if (aam_) {
      save_checkpoint(dir / "gen_s2t.ckpt", "gen_s2t", iteration_, aam_->g_s2t.cfg.to_json(),
                      aam_->g_s2t.params());
      save_checkpoint(dir / "gen_t2s.ckpt", "gen_t2s", iteration_, aam_->g_t2s.cfg.to_json(),
                      aam_->g_t2s.params());
      save_checkpoint(dir / "disc_s.ckpt", "disc_s", iteration_, aam_->d_s.cfg.to_json(),
                      aam_->d_s.params());
      save_checkpoint(dir / "disc_t.ckpt", "disc_t", iteration_, aam_->d_t.cfg.to_json(),
                      aam_->d_t.params());
      save_adam(dir / "opt_gen.ckpt", "adam:gen", *gen_opt_);
      save_adam(dir / "opt_disc.ckpt", "adam:disc", *disc_opt_);
      save_pool(dir / "pool_t.ckpt", aam_->pool_t);
      save_pool(dir / "pool_s.ckpt", aam_->pool_s);
    }
    json st;
    st["iteration"] = iteration_;
    st["epoch"] = epoch_;
    st["config"] = cfg_.to_json();
    st["image_size"] = image_size_;
    st["num_classes"] = num_classes_;
    st["rng"] = {{"draw", rng_draw_.state()},       {"augment", rng_aug_.state()},
                 {"student", rng_student_.state()}, {"teacher", rng_teacher_.state()},
                 {"mc", rng_mc_.state()},           {"noise", rng_noise_.state()}};
    st["cyclers"] = {{"s", cycler_json(cyc_s_)},
                     {"t", cycler_json(cyc_t_)},
                     {"u", cycler_json(cyc_u_)},
                     {"aam_t", cycler_json(cyc_aam_t_)}};
    save_json(dir / "trainer_state.json", st);
  }

  static Trainer resume(const fs::path& run_dir, const Dataset& ds, const SplitManifest& split) {
    fs::path dir = run_dir / "checkpoints";
    json st = load_json(dir / "trainer_state.json", "trainer state");
    TrainConfig cfg = TrainConfig::from_json(st.at("config"));
    if (json_require<int>(st, "num_classes", "trainer state") != ds.num_classes)
      throw StructuralError("resume: dataset num_classes does not match checkpoint");
    if (json_require<int>(st, "image_size", "trainer state") != ds.image_size)
      throw StructuralError("resume: dataset image_size does not match checkpoint");
    Trainer t(cfg, ds, split);
    t.iteration_ = json_require<int64_t>(st, "iteration", "trainer state");
    t.epoch_ = json_require<int64_t>(st, "epoch", "trainer state");
    load_checkpoint_params(open_checkpoint(dir / "student.ckpt"), t.student_.params());
    load_adam(dir / "opt_student.ckpt", *t.student_opt_);
    if (t.inter_teacher_) {
      load_checkpoint_params(open_checkpoint(dir / "inter_teacher.ckpt"), t.inter_teacher_->params());
      load_adam(dir / "opt_inter.ckpt", *t.inter_opt_);
    }
    if (t.ema_) {
      auto ch = open_checkpoint(dir / "ema_teacher.ckpt");
      load_checkpoint_params(ch, t.ema_->teacher.params());
      t.ema_->step = json_get<int64_t>(ch.header.at("arch"), "ema_step", 0);
    }
    if (t.aam_) {
      load_checkpoint_params(open_checkpoint(dir / "gen_s2t.ckpt"), t.aam_->g_s2t.params());
      load_checkpoint_params(open_checkpoint(dir / "gen_t2s.ckpt"), t.aam_->g_t2s.params());
      load_checkpoint_params(open_checkpoint(dir / "disc_s.ckpt"), t.aam_->d_s.params());
      load_checkpoint_params(open_checkpoint(dir / "disc_t.ckpt"), t.aam_->d_t.params());
      load_adam(dir / "opt_gen.ckpt", *t.gen_opt_);
      load_adam(dir / "opt_disc.ckpt", *t.disc_opt_);
      load_pool(dir / "pool_t.ckpt", t.aam_->pool_t, ds.image_size);
      load_pool(dir / "pool_s.ckpt", t.aam_->pool_s, ds.image_size);
    }
    const json& rng = st.at("rng");
    t.rng_draw_.set_state(rng.at("draw").get<uint64_t>());
    t.rng_aug_.set_state(rng.at("augment").get<uint64_t>());
    t.rng_student_.set_state(rng.at("student").get<uint64_t>());
    t.rng_teacher_.set_state(rng.at("teacher").get<uint64_t>());
    t.rng_mc_.set_state(rng.at("mc").get<uint64_t>());
    t.rng_noise_.set_state(rng.at("noise").get<uint64_t>());
    const json& cy = st.at("cyclers");
    cycler_from_json(cy.at("s"), t.cyc_s_);
    cycler_from_json(cy.at("t"), t.cyc_t_);
    cycler_from_json(cy.at("u"), t.cyc_u_);
    cycler_from_json(cy.at("aam_t"), t.cyc_aam_t_);
    return t;
  }

 private:
  TrainConfig cfg_;
  int image_size_ = 0, num_classes_ = 0;
  std::vector<const DomainSample*> source_, labeled_, unlabeled_, target_pool_;
  Segmenter student_;
  std::optional<Segmenter> inter_teacher_;
  std::optional<EmaState> ema_;
  std::optional<AAMState> aam_;
  std::optional<Adam> student_opt_, inter_opt_, gen_opt_, disc_opt_;
  int64_t iteration_ = 0, epoch_ = 0;
  int iters_per_epoch_ = 1;
  Rng rng_draw_, rng_aug_, rng_student_, rng_teacher_, rng_mc_, rng_noise_;
  IndexCycler cyc_s_, cyc_t_, cyc_u_, cyc_aam_t_;
  Tensor<real_t> last_uncertainty_;

  void draw_batch(const std::vector<const DomainSample*>& pool, IndexCycler& cyc, int k,
                  Tensor<real_t>* images, Tensor<uint8_t>* labels) {
    auto idx = cyc.next(k, rng_draw_);
    *images = Tensor<real_t>({k, 1, image_size_, image_size_});
    if (labels) *labels = Tensor<uint8_t>({k, image_size_, image_size_});
    size_t plane = size_t(image_size_) * image_size_;
    for (int i = 0; i < k; ++i) {
      const DomainSample* s = pool[size_t(idx[size_t(i)])];
      DomainSample aug;
      const DomainSample* use = s;
      if (cfg_.augment_data) {
        aug = augment(*s, rng_aug_);
        use = &aug;
      }
      std::copy(use->image.data.begin(), use->image.data.end(), images->data.begin() + size_t(i) * plane);
      if (labels) {
        require(bool(use->label), "trainer: labeled stream sample " + s->id + " has no label");
        std::copy(use->label->data.begin(), use->label->data.end(),
                  labels->data.begin() + size_t(i) * plane);
      }
    }
  }

  void dump_uncertainty(const fs::path& run_dir, int64_t epoch_idx) const {
    fs::path dir = run_dir / "uncertainty";
    fs::create_directories(dir);
    json meta{{"shape", last_uncertainty_.shape}, {"u_max", std::log(double(num_classes_))}};
    save_json(dir / "meta.json", meta);
    write_f32_payload(dir / ("ep" + std::to_string(epoch_idx) + ".img"), last_uncertainty_.data);
  }

  static json cycler_json(const IndexCycler& c) { return json{{"order", c.order}, {"pos", c.pos}}; }
  static void cycler_from_json(const json& j, IndexCycler& c) {
    c.order = j.at("order").get<std::vector<int>>();
    c.pos = j.at("pos").get<size_t>();
  }

  static void save_adam(const fs::path& path, const std::string& role, Adam& opt) {
    ParamStore<real_t> empty;
    std::vector<Tensor<real_t>> payload;
    for (auto& t : opt.moments1()) payload.push_back(t);
    for (auto& t : opt.moments2()) payload.push_back(t);
    json arch{{"step_count", opt.step_count()}, {"tensors", payload.size()}};
    save_checkpoint(path, role, opt.step_count(), arch, empty, &payload);
  }

  static void load_adam(const fs::path& path, Adam& opt) {
    auto ch = open_checkpoint(path);
    ParamStore<real_t> empty;
    std::vector<Tensor<real_t>> payload;
    for (auto& t : opt.moments1()) payload.push_back(Tensor<real_t>(t.shape));
    for (auto& t : opt.moments2()) payload.push_back(Tensor<real_t>(t.shape));
    load_checkpoint_params(ch, empty, &payload);
    size_t half = opt.moments1().size();
    for (size_t i = 0; i < half; ++i) opt.moments1()[i] = payload[i];
    for (size_t i = 0; i < half; ++i) opt.moments2()[i] = payload[half + i];
    opt.set_step_count(json_get<int64_t>(ch.header.at("arch"), "step_count", 0));
  }

  static void save_pool(const fs::path& path, const FakePoolT<real_t>& pool) {
    ParamStore<real_t> empty;
    std::vector<Tensor<real_t>> payload(pool.images.begin(), pool.images.end());
    json arch{{"count", pool.images.size()}, {"capacity", pool.capacity}, {"rng", pool.rng.state()}};
    save_checkpoint(path, "fake_pool", 0, arch, empty, &payload);
  }

  static void load_pool(const fs::path& path, FakePoolT<real_t>& pool, int image_size) {
    auto ch = open_checkpoint(path);
    size_t count = json_require<size_t>(ch.header.at("arch"), "count", "pool checkpoint");
    pool.capacity = json_require<size_t>(ch.header.at("arch"), "capacity", "pool checkpoint");
    pool.rng.set_state(json_require<uint64_t>(ch.header.at("arch"), "rng", "pool checkpoint"));
    ParamStore<real_t> empty;
    std::vector<Tensor<real_t>> payload(count, Tensor<real_t>({1, 1, image_size, image_size}));
    load_checkpoint_params(ch, empty, &payload);
    pool.images.assign(payload.begin(), payload.end());
  }
};

}  // namespace dt
