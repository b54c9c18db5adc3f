#pragma once

#include <cstdlib>
#include <iostream>
#include <map>

#include "dt/trainer.hpp"

// Command implementations behind the CLI surface. Each command throws the
// usual error types; run_guarded maps them onto the stable exit codes:
// 2 config/validation, 3 I/O, 4 divergence, 1 anything else.

namespace dt {
namespace cli {

inline constexpr const char* kRunRootEnv = "DT_RUN_ROOT";

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const NonFiniteError*>(&e)) return 4;
  return 1;
}

template <class Fn>
int run_guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

inline fs::path resolve_run_dir(const std::string& out, const std::string& fallback_name) {
  if (!out.empty()) return out;
  const char* root = std::getenv(kRunRootEnv);
  if (root && *root) return fs::path(root) / fallback_name;
  throw ConfigError("no --out given and " + std::string(kRunRootEnv) + " is not set");
}

inline std::vector<DomainSample> collect_samples(const Dataset& ds, const std::vector<std::string>& ids) {
  std::vector<DomainSample> out;
  for (const auto& id : ids)
    for (const auto& s : ds.samples)
      if (s.id == id) {
        out.push_back(s);
        break;
      }
  require(out.size() == ids.size(), "dataset is missing samples referenced by the split");
  return out;
}

// ---- gen-data ----

struct GenDataArgs {
  std::string spec_path;
  std::string out_dir;
};

inline void cmd_gen_data(const GenDataArgs& a) {
  auto spec = PhantomSpec::from_json(load_json(a.spec_path, "phantom spec"));
  auto ds = generate_phantom(spec);
  auto meta = save_dataset(ds, a.out_dir);
  std::cout << "wrote " << ds.samples.size() << " samples (" << spec.image_size << "x"
            << spec.image_size << ", " << spec.num_classes << " classes) to " << a.out_dir << "\n";
  std::cout << meta.dump(2) << "\n";
}

// ---- train ----

struct TrainArgs {
  std::string config_path;
  std::string data_dir;
  int fold = 0;
  std::string out_dir;
  std::vector<std::string> overrides;  // key=value
};

inline TrainConfig load_config_with_overrides(const std::string& config_path,
                                              const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = TrainConfig::from_json(load_json(config_path, "train config"));
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value, got '" + kv + "'");
    cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

inline fs::path cmd_train(const TrainArgs& a) {
  auto cfg = load_config_with_overrides(a.config_path, a.overrides);
  auto ds = load_dataset(a.data_dir);
  auto split = make_folds(ds, a.fold);
  std::string fallback = "run-" + mode_name(cfg.mode) + "-s" + std::to_string(cfg.seed) + "-f" +
                         std::to_string(a.fold);
  fs::path run_dir = resolve_run_dir(a.out_dir, fallback);
  Trainer trainer(cfg, ds, split);
  fs::create_directories(run_dir);
  save_json(run_dir / "run_meta.json",
            json{{"data_dir", a.data_dir}, {"fold", a.fold}, {"mode", mode_name(cfg.mode)},
                 {"seed", cfg.seed}});
  trainer.train(run_dir);
  std::cout << "trained " << mode_name(cfg.mode) << " for " << cfg.epochs << " epochs ("
            << trainer.iteration() << " iterations) -> " << run_dir.string() << "\n";
  return run_dir;
}

// ---- eval ----

struct EvalArgs {
  std::string run_dir;
  std::string data_dir;
  int fold = 0;
};

inline FoldReport cmd_eval(const EvalArgs& a) {
  fs::path ckpt = fs::path(a.run_dir) / "checkpoints" / "student.ckpt";
  if (!fs::exists(ckpt)) throw IoError("missing checkpoint: " + ckpt.string());
  auto ch = open_checkpoint(ckpt);
  Segmenter student(SegmenterConfig::from_json(ch.header.at("arch")), Rng(0));
  load_checkpoint_params(ch, student.params());

  auto ds = load_dataset(a.data_dir);
  auto split = make_folds(ds, a.fold);
  auto test_set = collect_samples(ds, split.test_ids);
  auto rep = evaluate_fold(student, test_set, a.fold);
  write_fold_csv(rep, fs::path(a.run_dir) / "fold_report.csv");
  save_json(fs::path(a.run_dir) / "aggregate.json", fold_report_json(rep));
  std::cout << "fold " << a.fold << ": mean dice " << rep.mean_dice << ", mean asd " << rep.mean_asd
            << " over " << rep.samples.size() << " samples\n";
  return rep;
}

// ---- report ----

struct ReportArgs {
  std::vector<std::string> run_dirs;
  std::string out_dir;
};

struct RunSummary {
  std::string dir;
  std::string mode;
  uint64_t seed = 0;
  int fold = 0;
  double mean_dice = 0, mean_asd = 0;
  // per-sample mean dice/asd, keyed by sample id (parsed back from the CSV)
  std::map<std::string, double> sample_dice, sample_asd;
};

inline RunSummary parse_run(const std::string& dir) {
  RunSummary r;
  r.dir = dir;
  auto cfg = load_json(fs::path(dir) / "config.json", "run config");
  r.mode = json_require<std::string>(cfg, "mode", "run config");
  r.seed = json_get<uint64_t>(cfg, "seed", 0);
  auto meta_path = fs::path(dir) / "run_meta.json";
  if (fs::exists(meta_path)) r.fold = json_get(load_json(meta_path, "run meta"), "fold", 0);
  auto agg = load_json(fs::path(dir) / "aggregate.json", "run aggregate");
  r.mean_dice = json_require<double>(agg, "mean_dice", "run aggregate");
  r.mean_asd = json_require<double>(agg, "mean_asd", "run aggregate");

  // per-sample means from the emitted fold CSV
  auto raw = read_bytes(fs::path(dir) / "fold_report.csv");
  std::string text(raw.begin(), raw.end());
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);  // header
  std::map<std::string, std::pair<double, int>> dice_acc, asd_acc;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 6) throw IoError("malformed fold report row in " + dir + ": " + line);
    auto& d = dice_acc[cells[0]];
    d.first += std::stod(cells[2]);
    d.second += 1;
    if (cells[3] != "invalid") {
      auto& a = asd_acc[cells[0]];
      a.first += std::stod(cells[3]);
      a.second += 1;
    }
  }
  for (auto& [id, acc] : dice_acc) r.sample_dice[id] = acc.first / acc.second;
  for (auto& [id, acc] : asd_acc) r.sample_asd[id] = acc.first / acc.second;
  return r;
}

inline void cmd_report(const ReportArgs& a) {
  if (a.run_dirs.empty()) throw ConfigError("report: no run directories given");
  fs::path out = a.out_dir.empty() ? fs::path(a.run_dirs.front()).parent_path() / "report"
                                   : fs::path(a.out_dir);
  fs::create_directories(out);
  std::vector<RunSummary> runs;
  for (const auto& d : a.run_dirs) runs.push_back(parse_run(d));

  // mode-level table
  std::map<std::string, std::vector<const RunSummary*>> by_mode;
  for (const auto& r : runs) by_mode[r.mode].push_back(&r);
  {
    std::ofstream f(out / "report.csv");
    if (!f) throw IoError("cannot write " + (out / "report.csv").string());
    f << std::setprecision(10) << "mode,mean_dice,mean_asd,runs\n";
    for (auto& [mode, rs] : by_mode) {
      double dice = 0, asd_v = 0;
      for (auto* r : rs) {
        dice += r->mean_dice / double(rs.size());
        asd_v += r->mean_asd / double(rs.size());
      }
      f << mode << "," << dice << "," << asd_v << "," << rs.size() << "\n";
    }
  }

  // paired comparison: two runs pair per sample; two modes pair per (seed, fold)
  std::vector<double> dice_a, dice_b, asd_a, asd_b;
  std::string label_a, label_b;
  if (runs.size() == 2) {
    label_a = runs[0].dir;
    label_b = runs[1].dir;
    for (auto& [id, v] : runs[0].sample_dice) {
      auto it = runs[1].sample_dice.find(id);
      if (it != runs[1].sample_dice.end()) {
        dice_a.push_back(v);
        dice_b.push_back(it->second);
      }
    }
    for (auto& [id, v] : runs[0].sample_asd) {
      auto it = runs[1].sample_asd.find(id);
      if (it != runs[1].sample_asd.end()) {
        asd_a.push_back(v);
        asd_b.push_back(it->second);
      }
    }
  } else if (by_mode.size() == 2) {
    auto it = by_mode.begin();
    auto &ra = it->second, &rb = std::next(it)->second;
    label_a = it->first;
    label_b = std::next(it)->first;
    for (auto* x : ra)
      for (auto* y : rb)
        if (x->seed == y->seed && x->fold == y->fold) {
          dice_a.push_back(x->mean_dice);
          dice_b.push_back(y->mean_dice);
          asd_a.push_back(x->mean_asd);
          asd_b.push_back(y->mean_asd);
        }
  }
  if (dice_a.size() >= 2) {
    write_ttest_csv(paired_t_test(dice_a, dice_b), "dice", out / "ttest.csv");
    write_ttest_csv(paired_t_test(asd_a, asd_b), "asd", out / "ttest.csv", /*append=*/true);
    write_bland_altman_csv(bland_altman(dice_a, dice_b), out / "bland_altman_dice.csv");
    write_bland_altman_csv(bland_altman(asd_a, asd_b), out / "bland_altman_asd.csv");
    std::cout << "paired comparison: " << label_a << " vs " << label_b << " over " << dice_a.size()
              << " pairs\n";
  }
  std::cout << "report written to " << out.string() << "\n";
}

// ---- ablate ----

struct AblateArgs {
  std::string config_path;
  std::string data_dir;
  std::vector<std::string> modes;
  std::vector<uint64_t> seeds{0};
  std::vector<int> folds{0};
  std::string out_dir;
  std::vector<std::string> overrides;
};

// Sequential mode sweep with shared data and seeds; per-run directories plus
// a mode-level comparison table.
inline void cmd_ablate(const AblateArgs& a) {
  if (a.modes.empty()) throw ConfigError("ablate: no modes given");
  fs::path root = resolve_run_dir(a.out_dir, "ablation");
  fs::create_directories(root);
  auto ds = load_dataset(a.data_dir);

  std::ofstream runsf(root / "runs.csv");
  if (!runsf) throw IoError("cannot write " + (root / "runs.csv").string());
  runsf << std::setprecision(10) << "mode,seed,fold,mean_dice,mean_asd,run_dir\n";
  std::map<std::string, std::pair<double, int>> dice_by_mode;
  std::map<std::string, double> asd_by_mode;
  for (const auto& mode : a.modes) {
    for (uint64_t seed : a.seeds) {
      for (int fold : a.folds) {
        auto cfg = load_config_with_overrides(a.config_path, a.overrides);
        cfg.mode = mode_from_name(mode);
        cfg.seed = seed;
        fs::path run_dir = root / mode / ("seed" + std::to_string(seed) + "_fold" + std::to_string(fold));
        auto split = make_folds(ds, fold);
        Trainer trainer(cfg, ds, split);
        fs::create_directories(run_dir);
        save_json(run_dir / "run_meta.json",
                  json{{"data_dir", a.data_dir}, {"fold", fold}, {"mode", mode}, {"seed", seed}});
        trainer.train(run_dir);
        auto rep = trainer.evaluate(collect_samples(ds, split.test_ids), fold);
        write_fold_csv(rep, run_dir / "fold_report.csv");
        save_json(run_dir / "aggregate.json", fold_report_json(rep));
        runsf << mode << "," << seed << "," << fold << "," << rep.mean_dice << "," << rep.mean_asd
              << "," << run_dir.string() << "\n";
        runsf.flush();
        auto& acc = dice_by_mode[mode];
        acc.first += rep.mean_dice;
        acc.second += 1;
        asd_by_mode[mode] += rep.mean_asd;
        std::cout << mode << " seed " << seed << " fold " << fold << ": dice " << rep.mean_dice
                  << " asd " << rep.mean_asd << "\n";
      }
    }
  }
  std::ofstream f(root / "ablation.csv");
  if (!f) throw IoError("cannot write " + (root / "ablation.csv").string());
  f << std::setprecision(10) << "mode,mean_dice,mean_asd,runs\n";
  for (const auto& mode : a.modes) {
    auto& acc = dice_by_mode[mode];
    f << mode << "," << acc.first / acc.second << "," << asd_by_mode[mode] / acc.second << ","
      << acc.second << "\n";
  }
  std::cout << "ablation table written to " << (root / "ablation.csv").string() << "\n";
}

}  // namespace cli
}  // namespace dt
