// Command-line front end: train, sweep, recover, group-synth, metrics.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dselect/config.hpp"
#include "dselect/error.hpp"
#include "dselect/harness.hpp"
#include "dselect/io.hpp"

namespace {

using dselect::config::ExperimentConfig;
namespace harness = dselect::harness;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::size_t trials = 1;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_trials) {
  cmd->add_option("--config", flags.config_path, "Experiment config file")->required();
  cmd->add_option("--seed", flags.seed, "Base seed (overrides the config)");
  cmd->add_option("--out", flags.out, "Output directory (overrides the config)");
  if (with_trials) cmd->add_option("--trials", flags.trials, "Trials (seeds) per grid point")->check(CLI::PositiveNumber);
}

ExperimentConfig load_config(const CommonFlags& flags) {
  ExperimentConfig c = dselect::config::load(flags.config_path);
  if (flags.seed) c.seed = *flags.seed;
  if (flags.out) c.out = *flags.out;
  dselect::config::validate(c);
  return c;
}

std::vector<std::uint64_t> seed_list(const ExperimentConfig& c, std::size_t count) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < count; ++i) seeds.push_back(c.seed + i);
  return seeds;
}

void print_metrics(const harness::MetricMap& m) { std::cout << harness::metrics_json(m); }

int cmd_train(const CommonFlags& flags) {
  const ExperimentConfig c = load_config(flags);
  const harness::RunResult r = harness::run_train(c, c.out);
  print_metrics(r.metrics);
  std::cerr << "wrote " << r.trajectory_path.string() << ", " << r.metrics_path.string() << ", "
            << r.checkpoint_path.string() << "\n";
  return harness::kExitOk;
}

int cmd_sweep(const CommonFlags& flags, bool trials_given) {
  ExperimentConfig c = load_config(flags);
  if (trials_given) c.sweep_trials = flags.trials;
  const harness::SweepResult r = harness::run_sweep(c, c.out);
  const auto& best = r.rows[r.best_row];
  std::cout << "best point " << best.point << " (trial " << best.trial << ", seed " << best.seed << ")";
  for (const auto& [k, v] : best.settings) std::cout << " " << k << "=" << v;
  std::cout << "\n";
  print_metrics(best.result.metrics);
  return harness::kExitOk;
}

int cmd_recover(const CommonFlags& flags) {
  ExperimentConfig c = load_config(flags);
  c.experiment = dselect::config::ExperimentKind::recovery;
  const auto rows = harness::run_recover(c, seed_list(c, flags.trials), c.out);
  std::cout << "seed gate recovered support_changes stable binary_step\n";
  for (const auto& r : rows) {
    std::cout << r.seed << " " << r.gate << " " << r.recovered << " " << r.support_changes << " "
              << (r.final_support_stable ? 1 : 0) << " "
              << (r.binary_convergence_step ? std::to_string(*r.binary_convergence_step) : "-") << "\n";
  }
  return harness::kExitOk;
}

int cmd_group_synth(const CommonFlags& flags) {
  ExperimentConfig c = load_config(flags);
  c.experiment = dselect::config::ExperimentKind::group_synth;
  const auto rows = harness::run_group_synth(c, seed_list(c, flags.trials), c.out);
  std::cout << "gate,tasks,seed,test_mse,related_jaccard,unrelated_jaccard,random_gate_jaccard\n";
  for (const auto& r : rows) {
    std::cout << r.gate << "," << r.tasks << "," << r.seed << "," << dselect::io::format_double(r.test_mse) << ","
              << dselect::io::format_double(r.related_jaccard) << ","
              << dselect::io::format_double(r.unrelated_jaccard) << ","
              << dselect::io::format_double(r.random_gate_jaccard) << "\n";
  }
  return harness::kExitOk;
}

int cmd_metrics(const CommonFlags& flags) {
  const ExperimentConfig c = load_config(flags);
  std::string checkpoint = flags.checkpoint;
  if (checkpoint.empty()) checkpoint = c.checkpoint;
  if (checkpoint.empty()) checkpoint = (std::filesystem::path(c.out) / "checkpoint.txt").string();
  const harness::MetricMap m = harness::run_metrics(c, checkpoint);
  dselect::io::write_text_atomic(std::filesystem::path(c.out) / "metrics_recomputed.json", harness::metrics_json(m));
  print_metrics(m);
  return harness::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DSelect-k mixture-of-experts experiments"};
  app.require_subcommand(1);
  CommonFlags flags;

  CLI::App* train = app.add_subcommand("train", "Train one configured model");
  add_common(train, flags, false);
  CLI::App* sweep = app.add_subcommand("sweep", "Grid search over sweep.<key> entries");
  add_common(sweep, flags, true);
  CLI::App* recover = app.add_subcommand("recover", "Frozen-expert recovery study over --trials seeds");
  add_common(recover, flags, true);
  CLI::App* group = app.add_subcommand("group-synth", "Grouped-task study over --trials seeds");
  add_common(group, flags, true);
  CLI::App* metrics = app.add_subcommand("metrics", "Recompute metrics from a checkpoint");
  add_common(metrics, flags, false);
  metrics->add_option("--checkpoint", flags.checkpoint, "Checkpoint file (default: config key or <out>/checkpoint.txt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : harness::kExitConfig;
  }

  try {
    if (*train) return cmd_train(flags);
    if (*sweep) return cmd_sweep(flags, sweep->count("--trials") > 0);
    if (*recover) return cmd_recover(flags);
    if (*group) return cmd_group_synth(flags);
    if (*metrics) return cmd_metrics(flags);
  } catch (const dselect::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return harness::kExitConfig;
  } catch (const dselect::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return harness::kExitNumeric;
  } catch (const harness::NoValidSolution& e) {
    std::cerr << "no λ-valid solution: " << e.what() << "\n";
    return harness::kExitNoValidLambda;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return harness::kExitFailure;
  }
  return harness::kExitFailure;
}
