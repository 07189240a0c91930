#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "faki/ensemble.hpp"

namespace faki {

/// One accepted temperature increment beta_from -> beta_to.
struct ScheduleStep {
  double beta_from = 0.0;
  double beta_to = 0.0;
  double delta_beta = 0.0;  // beta_to - beta_from
  double alpha = 0.0;       // Kalman regularisation 1 / delta_beta
  double ess = 0.0;         // ESS of the pseudo-importance weights at beta_to
};

/// Realised inverse-temperature sequence 0 = beta_0 < beta_1 < ... <= 1.
class AnnealingState {
 public:
  double beta() const { return beta_; }
  std::size_t step_index() const { return history_.size(); }
  const std::vector<ScheduleStep>& history() const { return history_; }
  bool complete() const { return beta_ >= 1.0; }

  /// Full beta sequence including the leading 0.
  std::vector<double> betas() const;

  /// Records an accepted step.
  void advance(double beta_next, double ess);

 private:
  double beta_ = 0.0;
  std::vector<ScheduleStep> history_;
};

/// Entry j is the squared whitened residual (y - G_j)^T Gamma^{-1} (y - G_j).
struct MisfitVector {
  Eigen::VectorXd misfits;
  Eigen::Index size() const { return misfits.size(); }
};

MisfitVector compute_misfits(const Ensemble& ensemble, const Eigen::VectorXd& data,
                             const NoiseModel& noise);

/// (sum w)^2 / sum w^2 with w_j = exp(-(beta_next - beta_current) m_j / 2).
double ess_at(const MisfitVector& misfits, double beta_next, double beta_current);

struct BetaChoice {
  double beta_next;
  double delta_beta;
  double ess;
};

inline constexpr double kDefaultTau = 0.5;

/// Largest admissible step: beta_next = 1 when ESS(1) >= tau J, otherwise the
/// bisection root of ESS(beta) = tau J on (beta, 1].
BetaChoice next_beta(const MisfitVector& misfits, const AnnealingState& state, double tau);

}  // namespace faki
