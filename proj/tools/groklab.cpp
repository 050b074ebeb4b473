// groklab: train runs, recompute metrics from checkpoints, print the
// predicted accuracy curve, run the inequality checks, and plot logs.
//
// Exit codes: 0 success, 1 usage, 2 runtime error, 3 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "groklab/groklab.hpp"

namespace {

using namespace groklab;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerify = 3;

void print_report(std::ostream& out, const TrialReport& r) {
  nlohmann::ordered_json j;
  j["check"] = r.name;
  j["trials"] = r.trials;
  j["violations"] = r.violations;
  j["min_slack"] = r.min_slack;
  j["worst_case"] = r.worst_case;
  j["status"] = r.passed() ? "pass" : "FAIL";
  out << j.dump() << '\n';
}

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 0;  // 0: default schedule
  std::string checkpoint;
  std::string config;
  std::vector<std::string> overrides;
  double sigma = 0.4;
};

/// The standard schedule, or with --checkpoint the algebraic checks plus
/// the ED/MID bounds on that checkpoint's training set.
std::vector<TrialReport> run_verification(const VerifyOptions& opt) {
  if (opt.checkpoint.empty()) return standard_verification(opt.seed, opt.trials);
  auto out = standard_verification(opt.seed, opt.trials, false);
  ExperimentConfig cfg = load_config(opt.config, opt.overrides);
  TaskData data = load_task_data(cfg);
  Model model = build_model(cfg);
  load_parameters(model, read_checkpoint(opt.checkpoint));
  out.push_back(check_ed_mid_bounds(model, data.train, opt.sigma, opt.seed, cfg.train.metrics.batch_size));
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groklab: grokking experiments, robustness metrics and theory checks"};
  app.require_subcommand(1);

  // train
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Train a run; resumes from the newest checkpoint in its directory");
  train->add_option("config", config_path, "JSON config file (omit for task defaults)");
  train->add_option("-s,--set", overrides, "Override a config key, e.g. --set data.modulus=67");
  train->add_option("-o,--out", out_dir, "Run directory (overrides output_dir)");
  train->add_flag("-q,--quiet", quiet, "Do not print progress");

  // metrics
  std::string ckpt_path, metrics_config, metrics_log;
  std::vector<std::string> metrics_overrides;
  double perturb_sigma = -1.0, info_sigma = -1.0;
  auto* metrics = app.add_subcommand("metrics", "Evaluate metrics on a checkpoint");
  metrics->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();
  metrics->add_option("-c,--config", metrics_config, "Config of the run that wrote the checkpoint");
  metrics->add_option("-s,--set", metrics_overrides, "Override a config key");
  metrics->add_option("--perturb-sigma", perturb_sigma, "Noise scale for perturb_err");
  metrics->add_option("--info-sigma", info_sigma, "Noise scale for pmi/pe/mid/ed");
  metrics->add_option("-l,--log", metrics_log, "Append the record to this log (default <checkpoint>.metrics.jsonl)");

  // theory-curve
  TheoryParams theory;
  std::size_t points = 200;
  std::string theory_out;
  auto* curve = app.add_subcommand("theory-curve", "Print the predicted accuracy curve as CSV");
  curve->add_option("--L", theory.lipschitz, "Lipschitz constant of the output gradient")->capture_default_str();
  curve->add_option("--mu", theory.mu, "Variance of the distance distribution")->capture_default_str();
  curve->add_option("--a", theory.a, "Norm-decay intercept")->capture_default_str();
  curve->add_option("--b", theory.b, "Norm-decay slope per decade")->capture_default_str();
  curve->add_option("--steps", theory.steps, "Last step")->capture_default_str();
  curve->add_option("--points", points, "Number of log-spaced steps")->capture_default_str();
  curve->add_option("-o,--out", theory_out, "Write CSV here instead of stdout");

  // verify
  VerifyOptions verify_opt;
  auto* verify = app.add_subcommand("verify", "Randomized checks of the bound lemmas and identities");
  verify->add_option("--seed", verify_opt.seed, "Base seed")->capture_default_str();
  verify->add_option("--trials", verify_opt.trials, "Trials per check (default: full schedule)");
  verify->add_option("--checkpoint", verify_opt.checkpoint, "Also check ED/MID bounds on this checkpoint");
  verify->add_option("-c,--config", verify_opt.config, "Config matching --checkpoint");
  verify->add_option("-s,--set", verify_opt.overrides, "Override a config key");
  verify->add_option("--sigma", verify_opt.sigma, "Noise scale for the checkpoint ED/MID check")->capture_default_str();

  // plot
  PlotSpec plot;
  std::string series_list, label_list;
  bool linear_x = false;
  auto* plot_cmd = app.add_subcommand("plot", "Render log series as an SVG line chart");
  plot_cmd->add_option("logs", plot.logs, "Run log files")->required();
  plot_cmd->add_option("--series", series_list, "Comma-separated metric names")->required();
  plot_cmd->add_option("--labels", label_list, "Comma-separated display names, one per log");
  plot_cmd->add_option("-o,--out", plot.output, "SVG output path")->required();
  plot_cmd->add_option("--title", plot.title, "Chart title");
  plot_cmd->add_flag("--linear-x", linear_x, "Linear instead of logarithmic step axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train) {
      if (!out_dir.empty()) overrides.push_back("output_dir=\"" + out_dir + "\"");
      ExperimentConfig cfg = load_config(config_path, overrides);
      auto outcome = train_experiment(cfg, [&](const MetricRecord& r) {
        if (quiet) return;
        std::printf("step %8llu  loss %.6f  train_acc %.4f  test_acc %.4f\n",
                    static_cast<unsigned long long>(r.step), r.at("train_loss"), r.at("train_acc"),
                    r.at("test_acc"));
        std::fflush(stdout);
      });
      if (!quiet) {
        std::printf("%s at step %llu: %s\n", outcome.resumed ? "resumed run finished" : "run finished",
                    static_cast<unsigned long long>(outcome.final_step), outcome.paths.root.c_str());
      }
    } else if (*metrics) {
      ExperimentConfig cfg = load_config(metrics_config, metrics_overrides);
      if (perturb_sigma >= 0.0) cfg.train.metrics.perturb_sigma = perturb_sigma;
      if (info_sigma >= 0.0) cfg.train.metrics.info_sigma = info_sigma;
      MetricRecord rec = checkpoint_metrics(cfg, ckpt_path);
      if (metrics_log.empty()) metrics_log = ckpt_path + ".metrics.jsonl";
      RunLogWriter(metrics_log).append(rec);
      std::cout << record_line(rec) << '\n';
    } else if (*curve) {
      theory.validate();
      std::ofstream file;
      std::ostream* out = &std::cout;
      if (!theory_out.empty()) {
        file.open(theory_out, std::ios::trunc);
        if (!file) throw FormatError("cannot write " + theory_out);
        out = &file;
      }
      *out << "step,predicted_accuracy\n";
      char line[64];
      for (auto step : log_spaced_steps(theory.steps, points)) {
        std::snprintf(line, sizeof line, "%llu,%.12g\n", static_cast<unsigned long long>(step),
                      predicted_accuracy(static_cast<double>(step), theory));
        *out << line;
      }
    } else if (*verify) {
      bool ok = true;
      for (const auto& r : run_verification(verify_opt)) {
        print_report(std::cout, r);
        ok = ok && r.passed();
      }
      return ok ? 0 : kExitVerify;
    } else if (*plot_cmd) {
      plot.series = split_list(series_list);
      plot.labels = split_list(label_list);
      plot.log_x = !linear_x;
      write_plot(plot);
    }
  } catch (const groklab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
