#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "faki/drivers.hpp"
#include "faki/hmc.hpp"
#include "faki/metrics.hpp"
#include "faki/models.hpp"

namespace faki {

struct ReferenceSettings {
  int leapfrog_steps = 50;
  int warmup = 5000;
  int samples = 100000;
  double initial_step_size = 0.1;
  double target_accept = 0.65;
  double step_jitter = 0.5;
  std::uint64_t seed = 0;
  bool start_at_truth = false;  // otherwise a prior draw
};

struct ExperimentConfig {
  BenchmarkSpec benchmark;
  std::vector<Method> methods{Method::Eki, Method::Faki};
  std::vector<std::uint64_t> seeds{0};
  Eigen::Index ensemble_size = 100;
  double tau = kDefaultTau;
  std::size_t max_iterations = 10000;
  FlowTrainConfig flow;
  ReferenceSettings reference;
  std::filesystem::path output_dir = "out";
  std::optional<std::filesystem::path> dataset_dir;  // generated under output_dir when absent
  unsigned threads = 1;
  unsigned concurrent_pairs = 1;
  bool record_timings = false;
  bool save_flows = false;

  /// Every key with its value, defaults filled in.
  nlohmann::json to_json() const;
  /// Strict: unknown keys, wrong types and out-of-range values raise InvalidConfig.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  RunConfig run_config(Method method, std::uint64_t seed) const;
  HmcConfig hmc_config() const;

  /// 16 hex digits over what a single run depends on: no method or seed
  /// lists, reference settings, output location or parallelism.
  std::string hash() const;
  /// Hash of the settings a reference chain depends on.
  std::string reference_hash() const;

  std::filesystem::path dataset_path() const;
  std::filesystem::path run_path(Method method, std::uint64_t seed) const;
  std::filesystem::path reference_path() const;
  std::filesystem::path metrics_path() const;
};

/// Command-line overrides applied after loading.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::filesystem::path> out;
  bool force = false;
};

void apply_overrides(ExperimentConfig& config, const Overrides& o);

// Columnar text: '#' comment lines, a header row of names, comma-separated rows.
struct Table {
  std::vector<std::string> comments;
  std::vector<std::string> columns;
  Eigen::MatrixXd values;
};
void write_table(const std::filesystem::path& path, const Table& table);
Table read_table(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

struct LoadedDataset {
  Dataset data;
  std::unique_ptr<ForwardModel> model;
};

void cmd_generate(const ExperimentConfig& config, bool force = false);
LoadedDataset load_dataset(const ExperimentConfig& config);

struct RunSummary {
  std::size_t completed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};
RunSummary cmd_run(const ExperimentConfig& config, bool force = false);

struct Reference {
  Eigen::MatrixXd samples;  // thinned to the ensemble size
  Eigen::VectorXd chain_mean, chain_sd;
  nlohmann::json summary;
};
/// Runs the chain and thins it; no files touched.
Reference compute_reference(const ExperimentConfig& config, const ForwardModel& model,
                            const Dataset& data);
void cmd_reference(const ExperimentConfig& config, bool force = false);
Reference load_reference(const ExperimentConfig& config);

/// Count of dimensions whose ensemble mean lies within `k` chain standard
/// deviations of the chain mean.
Eigen::Index dims_within(const Eigen::MatrixXd& ensemble, const Reference& ref, double k = 3.0);

nlohmann::json cmd_metrics(const ExperimentConfig& config);

/// generate, run, reference, metrics.
void cmd_all(const ExperimentConfig& config, bool force = false);

}  // namespace faki
