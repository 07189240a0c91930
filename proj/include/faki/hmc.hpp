#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include <Eigen/Dense>

#include "faki/models.hpp"
#include "faki/random.hpp"

namespace faki {

/// log density and its gradient, written into the second argument.
using LogDensity = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

struct HmcConfig {
  double step_size = 0.1;  // initial value; adapted during warmup
  int leapfrog_steps = 50;
  Eigen::VectorXd inverse_mass;  // diagonal; empty selects the identity
  int warmup = 5000;
  int samples = 100000;
  double target_accept = 0.65;
  std::uint64_t seed = 0;
  bool adapt_mass = true;
  /// After warmup each trajectory uses eps * (1 + step_jitter * (2u - 1)), u ~ U(0, 1).
  double step_jitter = 0.5;
  /// Consecutive divergent transitions tolerated after warmup.
  int max_consecutive_divergences = 100;
};

struct ChainOutput {
  Eigen::MatrixXd samples;  // M x d, post-warmup
  double acceptance_rate = 0.0;
  Eigen::VectorXd iact;
  double step_size = 0.0;
  Eigen::VectorXd inverse_mass;  // in the coordinates the chain ran in
  int divergences = 0;
};

struct PhasePoint {
  Eigen::VectorXd position;
  Eigen::VectorXd momentum;
  double log_density = 0.0;
  Eigen::VectorXd gradient;
};

/// `steps` leapfrog steps of size `eps` for H = -log p(q) + p^T M^{-1} p / 2.
PhasePoint leapfrog(const LogDensity& target, PhasePoint start, double eps, int steps,
                    const Eigen::VectorXd& inverse_mass);

double hamiltonian(const PhasePoint& point, const Eigen::VectorXd& inverse_mass);

/// HMC with dual-averaging step-size adaptation and diagonal mass estimated
/// from warmup draws. Deterministic given the seed.
ChainOutput run_hmc(const LogDensity& target, const Eigen::VectorXd& initial, const HmcConfig& config);
ChainOutput run_hmc(const ForwardModel& model, const HmcConfig& config,
                    std::optional<Eigen::VectorXd> initial = std::nullopt);

/// Integrated autocorrelation time of one series via Geyer's initial
/// monotone positive sequence. Infinite for constant series.
double integrated_autocorrelation_time(const Eigen::VectorXd& series);
Eigen::VectorXd integrated_autocorrelation_times(const Eigen::MatrixXd& samples);

/// Every k-th draw with k = max(ceil(max IACT), floor(M / target_count)),
/// truncated to exactly target_count rows.
Eigen::MatrixXd thin_chain(const ChainOutput& chain, Eigen::Index target_count);

}  // namespace faki
