#include "faki/experiment.hpp"

#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "faki/errors.hpp"

namespace faki {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads keys from one JSON object and rejects anything left unread.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw InvalidConfig(where_ + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    const json& v = raw(key);
    const std::string name = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw InvalidConfig(name + " must be a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw InvalidConfig(name + " must be a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw InvalidConfig(name + " must be a number");
      out = v.get<double>();
      if (!std::isfinite(out)) throw InvalidConfig(name + " must be finite");
    } else {
      if (!v.is_number_integer()) throw InvalidConfig(name + " must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) throw InvalidConfig(name + " must be non-negative");
      }
      out = v.get<T>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InvalidConfig("unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidConfig(what);
}

std::string fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd column_sd(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  return (c.colwise().squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, x.rows() - 1)))
      .cwiseSqrt()
      .transpose();
}

std::string error_kind(const std::exception& e) {
#define FAKI_KIND(T) \
  if (dynamic_cast<const T*>(&e)) return #T;
  FAKI_KIND(ForwardModelFailure)
  FAKI_KIND(DegenerateEnsemble)
  FAKI_KIND(NonFinite)
  FAKI_KIND(SingularSystem)
  FAKI_KIND(ScheduleStalled)
  FAKI_KIND(TrainingDiverged)
  FAKI_KIND(IterationCapExceeded)
  FAKI_KIND(GradientUnavailable)
  FAKI_KIND(DivergentChain)
  FAKI_KIND(InsufficientChain)
  FAKI_KIND(SizeMismatch)
  FAKI_KIND(EmptyInput)
  FAKI_KIND(InvalidConfig)
  FAKI_KIND(IoFailure)
  FAKI_KIND(MissingReference)
  FAKI_KIND(FormatError)
#undef FAKI_KIND
  return "Error";
}

std::vector<std::string> data_names(Eigen::Index n) {
  std::vector<std::string> names;
  for (Eigen::Index i = 1; i <= n; ++i) names.push_back("y" + std::to_string(i));
  return names;
}

std::vector<std::string> header(const std::string& hash, std::uint64_t seed) {
  return {"config_hash: " + hash, "seed: " + std::to_string(seed)};
}

std::mutex log_mutex;

void log_line(const std::string& s) {
  std::lock_guard<std::mutex> lock(log_mutex);
  std::cout << s << std::endl;
}

json benchmark_json(const BenchmarkSpec& b) {
  json j = {{"id", b.id}, {"data_seed", b.data_seed}};
  if (b.id == "lorenz")
    j["lorenz"] = {{"steps", b.lorenz.steps},
                   {"dt", b.lorenz.dt},
                   {"observation_sd", b.lorenz.observation_sd},
                   {"prior_log_sigma0_mean", b.lorenz.prior_log_sigma0_mean},
                   {"prior_log_sigma0_sd", b.lorenz.prior_log_sigma0_sd},
                   {"true_sigma0", b.lorenz_true_sigma0}};
  return j;
}

}  // namespace

// ---------------------------------------------------------------- config

json ExperimentConfig::to_json() const {
  json methods_json = json::array();
  for (Method m : methods) methods_json.push_back(to_string(m));
  json j = {
      {"benchmark", benchmark_json(benchmark)},
      {"methods", methods_json},
      {"seeds", seeds},
      {"ensemble_size", ensemble_size},
      {"tau", tau},
      {"max_iterations", max_iterations},
      {"flow",
       {{"blocks", flow.arch.blocks},
        {"hidden", flow.arch.hidden},
        {"learning_rate", flow.learning_rate},
        {"batch_size", flow.batch_size},
        {"max_epochs", flow.max_epochs},
        {"patience", flow.patience},
        {"validation_fraction", flow.validation_fraction},
        {"standardize", flow.standardize}}},
      {"reference",
       {{"leapfrog_steps", reference.leapfrog_steps},
        {"warmup", reference.warmup},
        {"samples", reference.samples},
        {"initial_step_size", reference.initial_step_size},
        {"target_accept", reference.target_accept},
        {"step_jitter", reference.step_jitter},
        {"seed", reference.seed},
        {"start_at_truth", reference.start_at_truth}}},
      {"output_dir", output_dir.string()},
      {"threads", threads},
      {"concurrent_pairs", concurrent_pairs},
      {"record_timings", record_timings},
      {"save_flows", save_flows},
  };
  if (dataset_dir) j["dataset_dir"] = dataset_dir->string();
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Section top(j, "config");

  require(top.has("benchmark"), "config.benchmark is required");
  {
    Section b(top.raw("benchmark"), "benchmark");
    b.get("id", c.benchmark.id);
    require(c.benchmark.id == "rosenbrock" || c.benchmark.id == "lorenz" || c.benchmark.id == "linear_gaussian",
            "benchmark.id must be one of rosenbrock, lorenz, linear_gaussian");
    b.get("data_seed", c.benchmark.data_seed);
    if (b.has("lorenz")) {
      require(c.benchmark.id == "lorenz", "benchmark.lorenz only applies to the lorenz benchmark");
      Section l(b.raw("lorenz"), "benchmark.lorenz");
      l.get("steps", c.benchmark.lorenz.steps);
      l.get("dt", c.benchmark.lorenz.dt);
      l.get("observation_sd", c.benchmark.lorenz.observation_sd);
      l.get("prior_log_sigma0_mean", c.benchmark.lorenz.prior_log_sigma0_mean);
      l.get("prior_log_sigma0_sd", c.benchmark.lorenz.prior_log_sigma0_sd);
      l.get("true_sigma0", c.benchmark.lorenz_true_sigma0);
      l.finish();
      require(c.benchmark.lorenz.steps >= 1, "benchmark.lorenz.steps must be at least 1");
      require(c.benchmark.lorenz.dt > 0.0, "benchmark.lorenz.dt must be positive");
      require(c.benchmark.lorenz.observation_sd > 0.0, "benchmark.lorenz.observation_sd must be positive");
      require(c.benchmark.lorenz.prior_log_sigma0_sd > 0.0, "benchmark.lorenz.prior_log_sigma0_sd must be positive");
      require(c.benchmark.lorenz_true_sigma0 > 0.0, "benchmark.lorenz.true_sigma0 must be positive");
    }
    b.finish();
  }

  if (top.has("methods")) {
    const json& m = top.raw("methods");
    require(m.is_array() && !m.empty(), "config.methods must be a non-empty array");
    c.methods.clear();
    for (const json& e : m) {
      require(e.is_string(), "config.methods entries must be strings");
      c.methods.push_back(method_from_string(e.get<std::string>()));
    }
  }
  if (top.has("seeds")) {
    const json& s = top.raw("seeds");
    require(s.is_array() && !s.empty(), "config.seeds must be a non-empty array");
    c.seeds.clear();
    for (const json& e : s) {
      require(e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() >= 0),
              "config.seeds entries must be non-negative integers");
      c.seeds.push_back(e.get<std::uint64_t>());
    }
    require(std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() == c.seeds.size(),
            "config.seeds must not repeat");
  }
  top.get("ensemble_size", c.ensemble_size);
  top.get("tau", c.tau);
  top.get("max_iterations", c.max_iterations);
  require(c.ensemble_size >= 2, "config.ensemble_size must be at least 2");
  require(c.tau > 0.0 && c.tau < 1.0, "config.tau must lie in (0, 1)");
  require(c.max_iterations >= 1, "config.max_iterations must be positive");

  if (top.has("flow")) {
    Section f(top.raw("flow"), "flow");
    f.get("blocks", c.flow.arch.blocks);
    f.get("hidden", c.flow.arch.hidden);
    f.get("learning_rate", c.flow.learning_rate);
    f.get("batch_size", c.flow.batch_size);
    f.get("max_epochs", c.flow.max_epochs);
    f.get("patience", c.flow.patience);
    f.get("validation_fraction", c.flow.validation_fraction);
    f.get("standardize", c.flow.standardize);
    f.finish();
    require(c.flow.arch.blocks >= 1, "flow.blocks must be at least 1");
    require(c.flow.arch.hidden >= 0, "flow.hidden must be non-negative (0 selects the default)");
    require(c.flow.learning_rate > 0.0, "flow.learning_rate must be positive");
    require(c.flow.batch_size >= 1, "flow.batch_size must be positive");
    require(c.flow.max_epochs >= 0, "flow.max_epochs must be non-negative");
    require(c.flow.patience >= 1, "flow.patience must be positive");
    require(c.flow.validation_fraction > 0.0 && c.flow.validation_fraction < 1.0,
            "flow.validation_fraction must lie in (0, 1)");
  }

  if (top.has("reference")) {
    Section r(top.raw("reference"), "reference");
    r.get("leapfrog_steps", c.reference.leapfrog_steps);
    r.get("warmup", c.reference.warmup);
    r.get("samples", c.reference.samples);
    r.get("initial_step_size", c.reference.initial_step_size);
    r.get("target_accept", c.reference.target_accept);
    r.get("step_jitter", c.reference.step_jitter);
    r.get("seed", c.reference.seed);
    r.get("start_at_truth", c.reference.start_at_truth);
    r.finish();
    require(c.reference.leapfrog_steps >= 1, "reference.leapfrog_steps must be positive");
    require(c.reference.warmup >= 100, "reference.warmup must be at least 100");
    require(c.reference.samples >= 1, "reference.samples must be positive");
    require(c.reference.initial_step_size > 0.0, "reference.initial_step_size must be positive");
    require(c.reference.target_accept > 0.0 && c.reference.target_accept < 1.0,
            "reference.target_accept must lie in (0, 1)");
    require(c.reference.step_jitter >= 0.0 && c.reference.step_jitter < 1.0,
            "reference.step_jitter must lie in [0, 1)");
  }

  std::string out = c.output_dir.string();
  top.get("output_dir", out);
  require(!out.empty(), "config.output_dir must not be empty");
  c.output_dir = out;
  if (top.has("dataset_dir")) {
    std::string d;
    top.get("dataset_dir", d);
    require(!d.empty(), "config.dataset_dir must not be empty");
    c.dataset_dir = d;
  }
  top.get("threads", c.threads);
  top.get("concurrent_pairs", c.concurrent_pairs);
  top.get("record_timings", c.record_timings);
  top.get("save_flows", c.save_flows);
  require(c.threads >= 1, "config.threads must be at least 1");
  require(c.concurrent_pairs >= 1, "config.concurrent_pairs must be at least 1");
  top.finish();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidConfig("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

RunConfig ExperimentConfig::run_config(Method method, std::uint64_t seed) const {
  RunConfig r;
  r.method = method;
  r.ensemble_size = ensemble_size;
  r.tau = tau;
  r.seed = seed;
  r.flow = flow;
  r.max_iterations = max_iterations;
  r.threads = threads;
  r.keep_flows = save_flows && method == Method::Faki;
  return r;
}

HmcConfig ExperimentConfig::hmc_config() const {
  HmcConfig h;
  h.step_size = reference.initial_step_size;
  h.leapfrog_steps = reference.leapfrog_steps;
  h.warmup = reference.warmup;
  h.samples = reference.samples;
  h.target_accept = reference.target_accept;
  h.step_jitter = reference.step_jitter;
  h.seed = reference.seed;
  return h;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  for (const char* k : {"methods", "seeds", "reference", "output_dir", "threads", "concurrent_pairs", "record_timings",
                        "save_flows"})
    j.erase(k);
  return fnv1a(j.dump());
}

std::string ExperimentConfig::reference_hash() const {
  json j = {{"benchmark", benchmark_json(benchmark)},
            {"ensemble_size", ensemble_size},
            {"reference", to_json()["reference"]}};
  if (dataset_dir) j["dataset_dir"] = dataset_dir->string();
  return fnv1a(j.dump());
}

fs::path ExperimentConfig::dataset_path() const { return dataset_dir.value_or(output_dir / "dataset"); }

fs::path ExperimentConfig::run_path(Method method, std::uint64_t seed) const {
  return output_dir / "runs" / (to_string(method) + "_seed" + std::to_string(seed));
}

fs::path ExperimentConfig::reference_path() const {
  return output_dir / "reference" / (benchmark.id + "-" + reference_hash());
}

fs::path ExperimentConfig::metrics_path() const { return output_dir / "metrics"; }

void apply_overrides(ExperimentConfig& config, const Overrides& o) {
  if (o.seed) config.seeds = {*o.seed};
  if (o.threads) {
    require(*o.threads >= 1, "--threads must be at least 1");
    config.threads = *o.threads;
  }
  if (o.out) config.output_dir = *o.out;
}

// ---------------------------------------------------------------- files

void write_table(const fs::path& path, const Table& table) {
  if (table.values.cols() != static_cast<Eigen::Index>(table.columns.size()))
    throw SizeMismatch("table " + path.string() + " has " + std::to_string(table.columns.size()) + " names for " +
                       std::to_string(table.values.cols()) + " columns");
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot write " + path.string());
  for (const auto& c : table.comments) out << "# " << c << '\n';
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
  out << '\n';
  for (Eigen::Index r = 0; r < table.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.values.cols(); ++c) out << (c ? "," : "") << format_double(table.values(r, c));
    out << '\n';
  }
  if (!out) throw IoFailure("failed writing " + path.string());
}

Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot read " + path.string());
  Table t;
  std::string line;
  std::vector<std::vector<double>> rows;
  bool have_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      t.comments.push_back(line.size() > 2 ? line.substr(2) : "");
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!have_header) {
      t.columns = fields;
      have_header = true;
      continue;
    }
    if (fields.size() != t.columns.size())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.columns.size()) + " fields");
    std::vector<double> row;
    for (const auto& s : fields) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0')
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + s + "'");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (!have_header) throw FormatError(path.string() + " has no header row");
  t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      t.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return t;
}

void write_json(const fs::path& path, const json& doc) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoFailure("failed writing " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- generate

void cmd_generate(const ExperimentConfig& config, bool force) {
  const fs::path dir = config.dataset_path();
  if (!force && fs::exists(dir / "observations.csv") && fs::exists(dir / "metadata.json")) {
    log_line("dataset: " + dir.string() + " exists, skipping");
    return;
  }
  const std::string hash = fnv1a(benchmark_json(config.benchmark).dump());
  const Dataset data = generate_dataset(config.benchmark);
  const auto model = make_model(config.benchmark, data.observations);
  const auto comments = header(hash, config.benchmark.data_seed);

  write_table(dir / "observations.csv", {comments, data_names(data.observations.size()), data.observations.transpose()});
  write_table(dir / "ground_truth.csv", {comments, model->parameter_names(), data.ground_truth.transpose()});

  json meta = {{"config_hash", hash},
               {"seed", config.benchmark.data_seed},
               {"benchmark", benchmark_json(config.benchmark)},
               {"parameter_dim", model->dim()},
               {"data_dim", model->data_dim()},
               {"noise_sd", to_json(model->noise().gamma().diagonal().cwiseSqrt())}};
  if (config.benchmark.id == "rosenbrock") meta["generating_parameters"] = {1.0, 1.0};
  write_json(dir / "metadata.json", meta);
  log_line("dataset: wrote " + dir.string());
}

LoadedDataset load_dataset(const ExperimentConfig& config) {
  const fs::path dir = config.dataset_path();
  if (!fs::exists(dir / "observations.csv"))
    throw IoFailure("no dataset at " + dir.string() + "; run the generate command first");
  const Table obs = read_table(dir / "observations.csv");
  if (obs.values.rows() != 1) throw FormatError("observations.csv must hold exactly one row");
  LoadedDataset out;
  out.data.observations = obs.values.row(0).transpose();
  out.model = make_model(config.benchmark, out.data.observations);
  if (out.model->data_dim() != out.data.observations.size())
    throw SizeMismatch("observations.csv has " + std::to_string(out.data.observations.size()) +
                       " values, the benchmark expects " + std::to_string(out.model->data_dim()));
  if (fs::exists(dir / "ground_truth.csv")) {
    const Table truth = read_table(dir / "ground_truth.csv");
    if (truth.values.rows() == 1 && truth.values.cols() == out.model->dim())
      out.data.ground_truth = truth.values.row(0).transpose();
  }
  return out;
}

// ---------------------------------------------------------------- run

namespace {

void write_run(const ExperimentConfig& config, const ForwardModel& model, const RunReport& r, const fs::path& dir) {
  const std::string hash = config.hash();
  const auto comments = header(hash, r.seed);

  if (config.save_flows)
    for (std::size_t level = 0; level < r.flows.size(); ++level)
      r.flows[level].save((dir / "flows" / ("level" + std::to_string(level) + ".flow")).string());

  if (config.record_timings) {
    double total = 0.0;
    for (double s : r.iteration_seconds) total += s;
    write_json(dir / "timings.json", {{"config_hash", hash},
                                      {"seed", r.seed},
                                      {"iteration_seconds", r.iteration_seconds},
                                      {"total_seconds", total}});
  }

  json beta = json::array(), delta = json::array(), alpha = json::array(), ess = json::array();
  for (const auto& s : r.schedule.history()) {
    beta.push_back(s.beta_to);
    delta.push_back(s.delta_beta);
    alpha.push_back(s.alpha);
    ess.push_back(s.ess);
  }
  json flows = json::array();
  for (std::size_t level = 0; level < r.flow_diagnostics.size(); ++level) {
    const auto& d = r.flow_diagnostics[level];
    flows.push_back({{"level", level},
                     {"epochs_run", d.epochs_run},
                     {"best_epoch", d.best_epoch},
                     {"initial_validation_nll", d.initial_validation_nll},
                     {"best_validation_nll", d.best_validation_nll},
                     {"small_ensemble_warning", d.small_ensemble_warning}});
  }
  json report = {{"config_hash", hash},
                 {"seed", r.seed},
                 {"method", to_string(r.method)},
                 {"benchmark", config.benchmark.id},
                 {"ensemble_size", config.ensemble_size},
                 {"tau", config.tau},
                 {"n_iter", r.n_iter},
                 {"schedule", {{"beta", beta}, {"delta_beta", delta}, {"alpha", alpha}, {"ess", ess}}}};
  if (r.method == Method::Faki) {
    report["latent_evals_reused"] = r.latent_evals_reused;
    report["flow"] = flows;
  }
  // The ensemble goes first and the report last: report.json marks completion.
  write_table(dir / "ensemble.csv", {comments, model.parameter_names(), r.final_ensemble.particles});
  write_json(dir / "report.json", report);
}

}  // namespace

RunSummary cmd_run(const ExperimentConfig& config, bool force) {
  const LoadedDataset ds = load_dataset(config);
  const ForwardModel& model = *ds.model;

  struct Pair {
    Method method;
    std::uint64_t seed;
  };
  std::vector<Pair> pairs;
  for (Method m : config.methods)
    for (std::uint64_t s : config.seeds) pairs.push_back({m, s});

  std::atomic<std::size_t> next{0}, completed{0}, skipped{0}, failed{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      const Pair p = pairs[i];
      const fs::path dir = config.run_path(p.method, p.seed);
      const std::string label = to_string(p.method) + " seed " + std::to_string(p.seed);
      if (!force && fs::exists(dir / "report.json")) {
        ++skipped;
        log_line("run: " + label + " done, skipping");
        continue;
      }
      fs::remove_all(dir);
      try {
        const RunReport r = run(model, config.run_config(p.method, p.seed));
        write_run(config, model, r, dir);
        ++completed;
        log_line("run: " + label + " finished in " + std::to_string(r.n_iter) + " iterations");
      } catch (const std::exception& e) {
        ++failed;
        write_json(dir / "error.json", {{"config_hash", config.hash()},
                                        {"seed", p.seed},
                                        {"method", to_string(p.method)},
                                        {"error", error_kind(e)},
                                        {"message", e.what()}});
        log_line("run: " + label + " failed: " + e.what());
      }
    }
  };

  const unsigned workers = std::min<unsigned>(config.concurrent_pairs, static_cast<unsigned>(pairs.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return {completed.load(), skipped.load(), failed.load()};
}

// ---------------------------------------------------------------- reference

Reference compute_reference(const ExperimentConfig& config, const ForwardModel& model, const Dataset& data) {
  std::optional<Eigen::VectorXd> initial;
  if (config.reference.start_at_truth) {
    if (data.ground_truth.size() != model.dim())
      throw InvalidConfig("reference.start_at_truth needs ground_truth.csv in the dataset");
    initial = data.ground_truth;
  }
  const HmcConfig hmc = config.hmc_config();
  const ChainOutput chain = run_hmc(model, hmc, initial);

  Reference ref;
  ref.samples = thin_chain(chain, config.ensemble_size);
  ref.chain_mean = chain.samples.colwise().mean().transpose();
  ref.chain_sd = column_sd(chain.samples);
  const double max_iact = chain.iact.maxCoeff();
  const auto m = chain.samples.rows();
  const Eigen::Index thin =
      std::max<Eigen::Index>(static_cast<Eigen::Index>(std::ceil(max_iact)), m / config.ensemble_size);

  ref.summary = {{"config_hash", config.reference_hash()},
                 {"seed", hmc.seed},
                 {"model_id", model.id()},
                 {"parameter_names", model.parameter_names()},
                 {"chain_length", m},
                 {"warmup", hmc.warmup},
                 {"leapfrog_steps", hmc.leapfrog_steps},
                 {"target_accept", hmc.target_accept},
                 {"step_jitter", hmc.step_jitter},
                 {"start", config.reference.start_at_truth ? "ground_truth" : "prior_draw"},
                 {"step_size", chain.step_size},
                 {"inverse_mass", to_json(chain.inverse_mass)},
                 {"acceptance_rate", chain.acceptance_rate},
                 {"divergences", chain.divergences},
                 {"iact", to_json(chain.iact)},
                 {"max_iact", max_iact},
                 {"thin_factor", thin},
                 {"thinned_count", ref.samples.rows()},
                 {"chain_mean", to_json(ref.chain_mean)},
                 {"chain_sd", to_json(ref.chain_sd)}};
  return ref;
}

void cmd_reference(const ExperimentConfig& config, bool force) {
  const fs::path dir = config.reference_path();
  if (!force && fs::exists(dir / "summary.json") && fs::exists(dir / "samples.csv")) {
    log_line("reference: cached at " + dir.string());
    return;
  }
  const LoadedDataset ds = load_dataset(config);
  const Reference ref = compute_reference(config, *ds.model, ds.data);
  auto comments = header(config.reference_hash(), config.reference.seed);
  comments.push_back("model_id: " + ds.model->id());
  comments.push_back("max_iact: " + format_double(ref.summary["max_iact"].get<double>()));
  comments.push_back("thin_factor: " + std::to_string(ref.summary["thin_factor"].get<long>()));
  write_table(dir / "samples.csv", {comments, ds.model->parameter_names(), ref.samples});
  write_json(dir / "summary.json", ref.summary);
  log_line("reference: wrote " + dir.string() + " (acceptance " +
           format_double(ref.summary["acceptance_rate"].get<double>()) + ")");
}

Reference load_reference(const ExperimentConfig& config) {
  const fs::path dir = config.reference_path();
  if (!fs::exists(dir / "samples.csv") || !fs::exists(dir / "summary.json"))
    throw MissingReference("no reference samples at " + dir.string() +
                           "; run `faki reference --config <file>` first");
  Reference ref;
  ref.samples = read_table(dir / "samples.csv").values;
  ref.summary = read_json(dir / "summary.json");
  const auto mean = ref.summary.at("chain_mean").get<std::vector<double>>();
  const auto sd = ref.summary.at("chain_sd").get<std::vector<double>>();
  ref.chain_mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  ref.chain_sd = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  return ref;
}

Eigen::Index dims_within(const Eigen::MatrixXd& ensemble, const Reference& ref, double k) {
  if (ensemble.cols() != ref.chain_mean.size()) throw SizeMismatch("ensemble and reference dimensions differ");
  const Eigen::VectorXd mean = ensemble.colwise().mean().transpose();
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < mean.size(); ++i)
    if (std::abs(mean(i) - ref.chain_mean(i)) <= k * ref.chain_sd(i)) ++count;
  return count;
}

// ---------------------------------------------------------------- metrics

json cmd_metrics(const ExperimentConfig& config) {
  const Reference ref = load_reference(config);
  const LoadedDataset ds = load_dataset(config);
  const std::string hash = config.hash();
  const fs::path out = config.metrics_path();

  json table = json::object();
  json failed = json::array(), missing = json::array();
  std::map<Method, double> median_w1;
  for (Method m : config.methods) {
    std::vector<MetricReport> rows;
    std::vector<double> within;
    for (std::uint64_t seed : config.seeds) {
      const fs::path dir = config.run_path(m, seed);
      const json key = {{"method", to_string(m)}, {"seed", seed}};
      if (!fs::exists(dir / "report.json")) {
        (fs::exists(dir / "error.json") ? failed : missing).push_back(key);
        continue;
      }
      const json report = read_json(dir / "report.json");
      if (report.value("config_hash", "") != hash)
        throw FormatError(dir.string() + " was produced by a different configuration; rerun with --force");
      const Eigen::MatrixXd x = read_table(dir / "ensemble.csv").values;

      MetricReport r;
      r.method = to_string(m);
      r.seed = seed;
      r.n_iter = report.at("n_iter").get<long>();
      r.w1 = wasserstein1(x, ref.samples);
      r.moments = moment_comparison(x, ref.samples);
      const Eigen::Index ok = dims_within(x, ref);
      within.push_back(static_cast<double>(ok));
      rows.push_back(r);

      write_json(out / (to_string(m) + "_seed" + std::to_string(seed) + ".json"),
                 {{"config_hash", hash},
                  {"seed", seed},
                  {"method", r.method},
                  {"n_iter", r.n_iter},
                  {"w1", r.w1},
                  {"dims_within_3sd", ok},
                  {"parameter_names", ds.model->parameter_names()},
                  {"mean", to_json(r.moments.mean)},
                  {"sd", to_json(r.moments.sd)},
                  {"reference_mean", to_json(ref.chain_mean)},
                  {"reference_sd", to_json(ref.chain_sd)}});
    }
    if (rows.empty()) continue;
    const AggregateReport agg = aggregate(rows);
    median_w1[m] = agg.median_w1;
    json seeds = json::array();
    for (const auto& r : agg.rows) seeds.push_back({{"seed", r.seed}, {"n_iter", r.n_iter}, {"w1", r.w1}});
    table[to_string(m)] = {{"Median[N_iter]", agg.median_n_iter},
                           {"MAD[N_iter]", agg.mad_n_iter},
                           {"Median[W1]", agg.median_w1},
                           {"MAD[W1]", agg.mad_w1},
                           {"median_dims_within_3sd", median(within)},
                           {"runs", seeds}};
  }

  json doc = {{"config_hash", hash},
              {"reference_hash", config.reference_hash()},
              {"benchmark", config.benchmark.id},
              {"parameter_dim", ds.model->dim()},
              {"ensemble_size", config.ensemble_size},
              {"columns", {"Median[N_iter]", "MAD[N_iter]", "Median[W1]", "MAD[W1]"}},
              {"methods", table},
              {"failed", failed},
              {"missing", missing}};
  if (median_w1.count(Method::Eki) && median_w1.count(Method::Faki) && median_w1[Method::Faki] > 0.0)
    doc["w1_ratio_eki_over_faki"] = median_w1[Method::Eki] / median_w1[Method::Faki];
  write_json(out / "aggregate.json", doc);
  log_line("metrics: wrote " + (out / "aggregate.json").string());
  return doc;
}

void cmd_all(const ExperimentConfig& config, bool force) {
  cmd_generate(config, force);
  cmd_run(config, force);
  cmd_reference(config, force);
  cmd_metrics(config);
}

}  // namespace faki
