#include <CLI11.hpp>

#include "dt/cli.hpp"

// dualteacher: semi-supervised domain-adaptation training for 2D multi-class
// segmentation on a synthetic dual-modality phantom benchmark.

int main(int argc, char** argv) {
  CLI::App app{"dual-teacher semi-supervised domain adaptation trainer"};
  app.require_subcommand(1);

  dt::cli::GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a phantom dataset from a spec file");
  gen_cmd->add_option("--spec", gen.spec_path, "phantom spec JSON")->required();
  gen_cmd->add_option("--out", gen.out_dir, "output dataset directory")->required();

  dt::cli::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train one run");
  train_cmd->add_option("--config", train.config_path, "train config JSON (defaults when omitted)");
  train_cmd->add_option("--data", train.data_dir, "dataset directory")->required();
  train_cmd->add_option("--fold", train.fold, "cross-validation fold index")->required();
  train_cmd->add_option("--out", train.out_dir, "run directory (default: $DT_RUN_ROOT/<name>)");
  train_cmd->add_option("--set", train.overrides, "config overrides, key=value");

  dt::cli::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained run on its fold's test split");
  eval_cmd->add_option("--run", eval.run_dir, "run directory")->required();
  eval_cmd->add_option("--data", eval.data_dir, "dataset directory")->required();
  eval_cmd->add_option("--fold", eval.fold, "cross-validation fold index")->required();

  dt::cli::AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate a list of modes sequentially");
  ablate_cmd->add_option("--config", ablate.config_path, "train config JSON");
  ablate_cmd->add_option("--data", ablate.data_dir, "dataset directory")->required();
  ablate_cmd->add_option("--modes", ablate.modes, "comma-separated mode list")->required()->delimiter(',');
  ablate_cmd->add_option("--seeds", ablate.seeds, "seeds to sweep")->delimiter(',');
  ablate_cmd->add_option("--folds", ablate.folds, "folds to sweep")->delimiter(',');
  ablate_cmd->add_option("--out", ablate.out_dir, "output root (default: $DT_RUN_ROOT/ablation)");
  ablate_cmd->add_option("--set", ablate.overrides, "config overrides, key=value");

  dt::cli::ReportArgs report;
  auto* report_cmd = app.add_subcommand("report", "merge evaluated runs into comparison tables");
  report_cmd->add_option("--runs", report.run_dirs, "run directories")->required()->delimiter(',');
  report_cmd->add_option("--out", report.out_dir, "report output directory");

  CLI11_PARSE(app, argc, argv);

  if (*gen_cmd) return dt::cli::run_guarded([&] { dt::cli::cmd_gen_data(gen); });
  if (*train_cmd) return dt::cli::run_guarded([&] { dt::cli::cmd_train(train); });
  if (*eval_cmd) return dt::cli::run_guarded([&] { dt::cli::cmd_eval(eval); });
  if (*ablate_cmd) return dt::cli::run_guarded([&] { dt::cli::cmd_ablate(ablate); });
  if (*report_cmd) return dt::cli::run_guarded([&] { dt::cli::cmd_report(report); });
  return 1;
}
