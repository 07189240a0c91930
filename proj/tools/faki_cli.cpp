#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "faki/errors.hpp"
#include "faki/experiment.hpp"

namespace {

enum Exit { kOk = 0, kInvalidConfig = 1, kRuntimeFailure = 2 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble and flow-annealed Kalman inversion experiments"};
  app.require_subcommand(1);

  std::string config_path;
  faki::Overrides overrides;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment configuration (JSON)")->required();
    sub->add_option("--seed", seed, "Restrict the run matrix to this seed");
    sub->add_option("--threads", threads, "Forward-evaluation threads");
    sub->add_option("--out", out, "Output directory (overrides output_dir)");
    sub->add_flag("--force", overrides.force, "Recompute outputs that already exist");
  };

  CLI::App* generate = app.add_subcommand("generate", "Simulate the benchmark dataset");
  CLI::App* run = app.add_subcommand("run", "Run every (method, seed) pair");
  CLI::App* reference = app.add_subcommand("reference", "Sample the HMC reference posterior");
  CLI::App* metrics = app.add_subcommand("metrics", "Compare runs against the reference");
  CLI::App* all = app.add_subcommand("all", "generate, run, reference and metrics in turn");
  for (CLI::App* sub : {generate, run, reference, metrics, all}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalidConfig;
  }

  try {
    faki::ExperimentConfig config = faki::ExperimentConfig::load(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) overrides.seed = seed;
    if (sub->count("--threads")) overrides.threads = threads;
    if (sub->count("--out")) overrides.out = out;
    faki::apply_overrides(config, overrides);

    if (sub == generate) {
      faki::cmd_generate(config, overrides.force);
    } else if (sub == run) {
      const faki::RunSummary s = faki::cmd_run(config, overrides.force);
      std::cout << "run: " << s.completed << " completed, " << s.skipped << " skipped, " << s.failed << " failed\n";
      if (s.failed > 0) return kRuntimeFailure;
    } else if (sub == reference) {
      faki::cmd_reference(config, overrides.force);
    } else if (sub == metrics) {
      faki::cmd_metrics(config);
    } else {
      faki::cmd_all(config, overrides.force);
    }
  } catch (const faki::InvalidConfig& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return kInvalidConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kOk;
}
