#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "faki/annealing.hpp"
#include "faki/ensemble.hpp"
#include "faki/flow.hpp"
#include "faki/models.hpp"

namespace faki {

enum class Method { Eki, Faki };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct RunConfig {
  Method method = Method::Eki;
  Eigen::Index ensemble_size = 100;
  double tau = kDefaultTau;
  std::uint64_t seed = 0;
  FlowTrainConfig flow;  // FAKI only
  std::size_t max_iterations = 10000;
  unsigned threads = 1;  // forward-evaluation parallelism
  bool keep_flows = false;  // FAKI: retain each level's fitted flow in the report

  void validate() const;
};

struct RunReport {
  Method method = Method::Eki;
  std::uint64_t seed = 0;
  Ensemble final_ensemble;  // after the beta = 1 update; evals stale
  std::size_t n_iter = 0;
  AnnealingState schedule;
  std::vector<double> iteration_seconds;
  std::vector<FlowFitDiagnostics> flow_diagnostics;  // FAKI only, one per level
  std::vector<FlowModel> flows;                      // only with keep_flows
  /// FAKI reuses G(x_j) for G(f^{-1}(z_j)) instead of re-evaluating.
  bool latent_evals_reused = true;
};

/// Fills forward_evals with G of every particle, in particle order, using up
/// to `threads` workers. Results do not depend on the thread count.
Ensemble evaluate_forward_parallel(const ForwardModel& model, const Ensemble& ensemble, unsigned threads = 1);

/// Draws J prior samples from the run's prior stream.
Ensemble sample_prior_ensemble(const ForwardModel& model, const RunConfig& config);

/// Ensemble Kalman inversion with ESS-adaptive tempering.
RunReport run_eki(const ForwardModel& model, const RunConfig& config);

/// Flow annealed Kalman inversion: each tempering step is a Kalman update in
/// the latent space of a flow fitted to the current particles.
RunReport run_faki(const ForwardModel& model, const RunConfig& config);

RunReport run(const ForwardModel& model, const RunConfig& config);

/// Random streams used by a run, derived from its seed.
namespace streams {
inline constexpr std::uint64_t kPrior = 1;
inline constexpr std::uint64_t kPerturbation = 2;
inline constexpr std::uint64_t kFlow = 3;
}  // namespace streams

}  // namespace faki
