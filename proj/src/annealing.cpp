#include "faki/annealing.hpp"

#include <cmath>

#include "faki/errors.hpp"

namespace faki {

namespace {

constexpr double kIncrementRelTolerance = 1e-12;
constexpr double kEssTolerance = 1e-10;  // fraction of J
constexpr int kMaxBisection = 100;
constexpr double kStallThreshold = 1e-12;

double ess_for_increment(const Eigen::ArrayXd& m, double dbeta) {
  if (m.size() == 0) return 0.0;
  // log w_j = -dbeta m_j / 2, shifted so the largest weight is exactly 1.
  const Eigen::ArrayXd logw = -0.5 * dbeta * m;
  const Eigen::ArrayXd w = (logw - logw.maxCoeff()).exp();
  const double s1 = w.sum();
  return s1 * s1 / w.square().sum();
}

}  // namespace

std::vector<double> AnnealingState::betas() const {
  std::vector<double> out{0.0};
  for (const auto& s : history_) out.push_back(s.beta_to);
  return out;
}

void AnnealingState::advance(double beta_next, double ess) {
  if (!(beta_next > beta_) || beta_next > 1.0)
    throw InvalidConfig("annealing step must increase beta within (beta, 1]");
  history_.push_back({beta_, beta_next, beta_next - beta_, 1.0 / (beta_next - beta_), ess});
  beta_ = beta_next;
}

MisfitVector compute_misfits(const Ensemble& ensemble, const Eigen::VectorXd& data,
                             const NoiseModel& noise) {
  if (!ensemble.evals_fresh) throw DegenerateEnsemble("forward evaluations are stale");
  if (ensemble.data_dim() != data.size() || data.size() != noise.dim())
    throw SizeMismatch("data dimension mismatch in misfit computation");
  if (!ensemble.forward_evals.allFinite()) throw NonFinite("non-finite forward evaluations");
  const Eigen::MatrixXd residuals = (-ensemble.forward_evals).rowwise() + data.transpose();
  return {noise.mahalanobis_sq(residuals)};
}

double ess_at(const MisfitVector& misfits, double beta_next, double beta_current) {
  return ess_for_increment(misfits.misfits.array(), beta_next - beta_current);
}

BetaChoice next_beta(const MisfitVector& misfits, const AnnealingState& state, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidConfig("tau must lie in (0, 1)");
  if (state.beta() >= 1.0) throw InvalidConfig("annealing already complete");
  const double j = static_cast<double>(misfits.size());
  const double target = tau * j;
  const double beta = state.beta();
  const Eigen::ArrayXd& m = misfits.misfits.array();

  const double ess_one = ess_for_increment(m, 1.0 - beta);
  if (ess_one >= target) return {1.0, 1.0 - beta, ess_one};

  // Bisection on the increment: ESS(lo) >= target > ESS(hi). Working with the
  // increment instead of beta keeps full relative precision when misfits are
  // huge and the admissible step is tiny.
  double lo = 0.0;
  double hi = 1.0 - beta;
  double ess_lo = j;
  for (int it = 0; it < kMaxBisection; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double ess_mid = ess_for_increment(m, mid);
    if (ess_mid >= target) {
      lo = mid;
      ess_lo = ess_mid;
    } else {
      hi = mid;
    }
    if (ess_lo - target <= kEssTolerance * j && lo > 0.0) break;
    if (hi - lo <= kIncrementRelTolerance * hi) break;
  }
  if (lo < kStallThreshold)
    throw ScheduleStalled("annealing step collapsed below 1e-12 (delta beta = " +
                          std::to_string(lo) + ")");
  return {beta + lo, lo, ess_lo};
}

}  // namespace faki
