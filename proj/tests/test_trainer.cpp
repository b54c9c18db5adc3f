#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dt/trainer.hpp"
#include "support.hpp"

using namespace dt;

namespace {

Dataset tiny_dataset(uint64_t seed = 3) {
  PhantomSpec spec;
  spec.image_size = 16;
  spec.num_classes = 4;
  spec.num_source = 4;
  spec.num_labeled_target = 4;
  spec.num_unlabeled_target = 6;
  spec.num_test = 0;
  spec.seed = seed;
  return generate_phantom(spec);
}

TrainConfig tiny_config(TrainMode mode, uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.seed = seed;
  cfg.epochs = 2;
  cfg.n_passes = 2;
  cfg.batch_source = 2;
  cfg.batch_target = 2;
  cfg.batch_unlabeled = 2;
  cfg.seg_base_width = 2;
  cfg.gen_base_width = 2;
  cfg.gen_n_blocks = 1;
  cfg.disc_base_width = 2;
  cfg.warmup_epochs = 0;
  return cfg;
}

}  // namespace

TEST_CASE("student objective degenerates and composes as a weighted sum") {
  auto seg = ad::scalar(1.0);
  auto inter = ad::scalar(0.2);
  auto intra = ad::scalar(0.5);
  CHECK(student_objective<double>(seg, nullptr, nullptr, 0.0, 0.0)->value[0] == 1.0);
  auto total = student_objective<double>(seg, &inter, &intra, 5.0, 0.1);
  CHECK(total->value[0] == doctest::Approx(2.05).epsilon(1e-12));
  auto bad = ad::scalar(std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(student_objective<double>(seg, &bad, nullptr, 5.0, 0.1), NonFiniteError);
}

TEST_CASE("gradcheck: objective gradient is the weighted sum of component gradients") {
  SegmenterConfig cfg;
  cfg.image_size = 8;
  cfg.base_width = 2;
  cfg.num_classes = 3;
  cfg.depth = 1;
  SegmenterT<double> student(cfg, Rng(1)), teacher(cfg, Rng(2));
  Rng rng(3);
  Tensor<double> x({1, 1, 8, 8});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  Tensor<uint8_t> lab({1, 8, 8});
  for (auto& v : lab.data) v = uint8_t(rng.uniform_index(3));
  auto targets = make_soft_targets(teacher, x);
  auto t_probs = ad::softmax_tensor(teacher.forward(x, false)->value);
  Tensor<double> ent({1, 8, 8});  // half-masked synthetic uncertainty
  for (size_t i = 0; i < ent.numel(); ++i) ent[i] = (i % 2) ? 1.5 : 0.1;

  dtest::jitter_params(student.params().vars(), rng);
  auto f = [&] {
    auto probs = ad::softmax_ch(student.forward(x, false));
    auto seg = hybrid_seg_loss(probs, lab);
    auto inter = weighted_kd_loss(targets, probs, {importance_weight(0.7)});
    auto intra = masked_consistency_loss(probs, t_probs, ent, 1.0).loss;
    return student_objective<double>(seg, &inter, &intra, 5.0, 0.1);
  };
  CHECK(dtest::gradcheck(student.params().vars(), f) < 1e-3);
}

TEST_CASE("pseudo labels: argmax, tie-break to lowest index, monotone invariance") {
  SegmenterConfig cfg;
  cfg.image_size = 8;
  cfg.base_width = 2;
  cfg.num_classes = 3;
  cfg.depth = 1;
  SegmenterT<double> model(cfg, Rng(4));
  Rng rng(5);
  Tensor<double> x({1, 1, 8, 8});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  auto labels = pseudo_label_pass(model, x);
  auto probs = ad::softmax_tensor(model.forward(x, false)->value);
  for (int i = 0; i < 64; ++i) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (probs[size_t(c) * 64 + i] > probs[size_t(best) * 64 + i]) best = c;
    CHECK(labels[size_t(i)] == best);
  }
  // zeroed model: exact ties everywhere resolve to class 0
  auto zeros = model.params().read();
  for (auto& nt : zeros) nt.value.fill(0.0);
  model.params().write(zeros);
  auto tied = pseudo_label_pass(model, x);
  for (auto v : tied.data) CHECK(v == 0);
  // argmax is invariant to strictly monotone per-pixel rescaling of logits
  Tensor<double> logits({1, 3, 4, 4});
  for (auto& v : logits.data) v = rng.normal();
  Tensor<double> rescaled(logits.shape);
  for (size_t i = 0; i < logits.numel(); ++i) rescaled[i] = 2.5 * logits[i] + 3.0;
  CHECK(ad::argmax_labels(ad::softmax_tensor(logits)).data ==
        ad::argmax_labels(ad::softmax_tensor(rescaled)).data);
}

TEST_CASE("phase log matches the mode lattice") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  auto expect = [&](TrainMode mode, const std::string& phases) {
    Trainer t(tiny_config(mode), ds, split);
    auto log = t.train_iteration();
    INFO(mode_name(mode));
    CHECK(log.phases == phases);
  };
  expect(TrainMode::supervised_only, "student");
  expect(TrainMode::pseudo_label_baseline, "pseudo|student");
  expect(TrainMode::gan_baseline, "aam|pseudo|student");
  expect(TrainMode::no_intra_teacher, "aam|inter|pseudo|student");
  expect(TrainMode::no_inter_teacher, "aam|student|ema");
  expect(TrainMode::vanilla_two_teacher, "aam|inter|student|ema");
  expect(TrainMode::no_intra_rc, "aam|inter|student|ema");
  expect(TrainMode::no_inter_rc, "aam|inter|student|ema");
  expect(TrainMode::full, "aam|inter|student|ema");
}

TEST_CASE("supervised mode logs no alignment or teacher losses") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  Trainer t(tiny_config(TrainMode::supervised_only), ds, split);
  auto log = t.train_iteration();
  CHECK_FALSE(log.loss_g);
  CHECK_FALSE(log.loss_tea_seg);
  CHECK_FALSE(log.loss_inter);
  CHECK_FALSE(log.loss_intra);
  CHECK_FALSE(log.mask_coverage);
  CHECK(log.loss_stu_total == log.loss_stu_seg);
}

TEST_CASE("vanilla two-teacher runs with both controls off") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  Trainer t(tiny_config(TrainMode::vanilla_two_teacher), ds, split);
  for (int i = 0; i < 4; ++i) {
    auto log = t.train_iteration();
    REQUIRE(log.kd_w_mean);
    CHECK(*log.kd_w_mean == 1.0);
    CHECK(*log.kd_w_max == 1.0);
    CHECK(*log.kd_clamp_rate == 0.0);
    REQUIRE(log.mask_coverage);
    CHECK(*log.mask_coverage == 1.0);
  }
}

TEST_CASE("full mode applies both reliability controls") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  Trainer t(tiny_config(TrainMode::full), ds, split);
  bool saw_nonunit_weight = false, saw_partial_mask = false;
  for (int i = 0; i < 6; ++i) {
    auto log = t.train_iteration();
    REQUIRE(log.kd_w_mean);
    if (*log.kd_w_mean != 1.0) saw_nonunit_weight = true;
    REQUIRE(log.mask_coverage);
    if (*log.mask_coverage < 1.0) saw_partial_mask = true;
  }
  CHECK(saw_nonunit_weight);
  CHECK(saw_partial_mask);
}

TEST_CASE("two identical runs produce identical traces") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  Trainer a(tiny_config(TrainMode::full, 7), ds, split);
  Trainer b(tiny_config(TrainMode::full, 7), ds, split);
  for (int i = 0; i < 6; ++i) {
    auto la = a.train_iteration(), lb = b.train_iteration();
    CHECK(train_log_row(la) == train_log_row(lb));
    CHECK(std::abs(la.loss_stu_total - lb.loss_stu_total) <= 1e-6);
  }
}

TEST_CASE("checkpoint and resume reproduce forwards and the loss trace") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  fs::path dir = fs::temp_directory_path() / "dt_resume_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "checkpoints");

  Trainer a(tiny_config(TrainMode::full, 9), ds, split);
  for (int i = 0; i < 5; ++i) a.train_iteration();
  a.checkpoint(dir / "checkpoints");

  auto b = Trainer::resume(dir, ds, split);
  CHECK(b.iteration() == a.iteration());

  // bit-identical forward on a fixed batch
  Tensor<real_t> probe({1, 1, 16, 16});
  Rng rng(10);
  for (auto& v : probe.data) v = real_t(rng.uniform(-1.0, 1.0));
  auto ya = a.student().forward(probe, false), yb = b.student().forward(probe, false);
  for (size_t i = 0; i < ya->value.numel(); ++i) CHECK(ya->value[i] == yb->value[i]);

  // trace continuation within 1e-6 for 10 iterations
  for (int i = 0; i < 10; ++i) {
    auto la = a.train_iteration(), lb = b.train_iteration();
    CHECK(std::abs(la.loss_stu_total - lb.loss_stu_total) <= 1e-6);
    if (la.loss_g) CHECK(std::abs(*la.loss_g - *lb.loss_g) <= 1e-6);
    if (la.loss_intra) CHECK(std::abs(*la.loss_intra - *lb.loss_intra) <= 1e-6);
  }

  // resuming against a dataset with a different class count is structural
  PhantomSpec other;
  other.image_size = 16;
  other.num_classes = 5;
  other.num_source = 4;
  other.num_labeled_target = 4;
  other.num_unlabeled_target = 6;
  other.seed = 3;
  auto ds5 = generate_phantom(other);
  CHECK_THROWS_AS(Trainer::resume(dir, ds5, make_folds(ds5, 0)), StructuralError);
  fs::remove_all(dir);
}

TEST_CASE("evaluation touches only the student") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  Trainer t(tiny_config(TrainMode::full, 11), ds, split);
  t.train_iteration();
  std::vector<DomainSample> test_set;
  for (const auto& s : ds.samples)
    if (s.domain == Domain::labeled_target) test_set.push_back(s);

  int64_t inter_before = t.inter_teacher()->access_count;
  int64_t ema_before = t.ema()->teacher.access_count;
  int64_t g1 = t.aam()->g_s2t.access_count, g2 = t.aam()->g_t2s.access_count;
  int64_t d1 = t.aam()->d_s.access_count, d2 = t.aam()->d_t.access_count;
  int64_t student_before = t.student().access_count;
  auto rep = t.evaluate(test_set, 0);
  CHECK(rep.samples.size() == test_set.size());
  CHECK(t.student().access_count > student_before);
  CHECK(t.inter_teacher()->access_count == inter_before);
  CHECK(t.ema()->teacher.access_count == ema_before);
  CHECK(t.aam()->g_s2t.access_count == g1);
  CHECK(t.aam()->g_t2s.access_count == g2);
  CHECK(t.aam()->d_s.access_count == d1);
  CHECK(t.aam()->d_t.access_count == d2);
}

TEST_CASE("train() writes the run directory artifacts") {
  auto ds = tiny_dataset();
  auto split = make_folds(ds, 0);
  fs::path dir = fs::temp_directory_path() / "dt_run_dir";
  fs::remove_all(dir);
  auto cfg = tiny_config(TrainMode::vanilla_two_teacher, 12);
  cfg.epochs = 1;
  Trainer t(cfg, ds, split);
  t.train(dir);
  CHECK(fs::exists(dir / "config.json"));
  CHECK(fs::exists(dir / "train_log.csv"));
  CHECK(fs::exists(dir / "checkpoints" / "student.ckpt"));
  CHECK(fs::exists(dir / "checkpoints" / "trainer_state.json"));
  auto parsed = TrainConfig::from_json(load_json(dir / "config.json", "run config"));
  CHECK(parsed.mode == TrainMode::vanilla_two_teacher);
  // the log has header + iters_per_epoch rows
  auto raw = read_bytes(dir / "train_log.csv");
  std::string text(raw.begin(), raw.end());
  int lines = 0;
  for (char c : text) lines += c == '\n';
  CHECK(lines == 1 + t.iters_per_epoch());
  fs::remove_all(dir);
}

TEST_CASE("config overrides parse and reject unknown keys") {
  TrainConfig cfg;
  cfg.apply_override("lambda_kd", "2.5");
  CHECK(cfg.lambda_kd == 2.5);
  cfg.apply_override("mode", "supervised_only");
  CHECK(cfg.mode == TrainMode::supervised_only);
  cfg.apply_override("epochs", "7");
  CHECK(cfg.epochs == 7);
  cfg.apply_override("weight_renorm", "true");
  CHECK(cfg.weight_renorm);
  CHECK_THROWS_WITH_AS(cfg.apply_override("no_such_key", "1"), doctest::Contains("valid keys"),
                       ConfigError);
  CHECK_THROWS_AS(cfg.apply_override("epochs", "notanumber"), ConfigError);
  CHECK_THROWS_AS(cfg.apply_override("mode", "bogus"), ConfigError);
}
