#include "faki/ensemble.hpp"

#include <cmath>
#include <string>

#include "faki/errors.hpp"

namespace faki {

bool all_finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

NoiseModel::NoiseModel(Eigen::MatrixXd gamma) : gamma_(std::move(gamma)) {
  if (gamma_.rows() != gamma_.cols() || gamma_.rows() == 0)
    throw SizeMismatch("noise covariance must be a non-empty square matrix");
  if (!gamma_.allFinite()) throw NonFinite("noise covariance has non-finite entries");
  const double scale = gamma_.cwiseAbs().maxCoeff();
  if ((gamma_ - gamma_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw InvalidConfig("noise covariance is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(gamma_);
  if (llt.info() != Eigen::Success) throw InvalidConfig("noise covariance is not positive definite");
  chol_ = llt.matrixL();
}

NoiseModel NoiseModel::diagonal(const Eigen::VectorXd& sd) {
  return NoiseModel(Eigen::MatrixXd(sd.array().square().matrix().asDiagonal()));
}

Eigen::VectorXd NoiseModel::mahalanobis_sq(const Eigen::MatrixXd& residuals) const {
  // Solve L w = r for every residual at once.
  Eigen::MatrixXd w = chol_.triangularView<Eigen::Lower>().solve(residuals.transpose());
  return w.colwise().squaredNorm().transpose();
}

KalmanCrossCovariances empirical_cross_covariances(const Ensemble& ensemble) {
  const Eigen::Index j = ensemble.size();
  if (j < 2) throw DegenerateEnsemble("empirical covariances need at least two particles");
  if (!ensemble.evals_fresh || ensemble.forward_evals.rows() != j)
    throw DegenerateEnsemble("forward evaluations are stale or missing");
  if (!ensemble.particles.allFinite() || !ensemble.forward_evals.allFinite())
    throw NonFinite("ensemble contains non-finite entries");

  KalmanCrossCovariances out;
  out.x_mean = ensemble.particles.colwise().mean().transpose();
  out.g_mean = ensemble.forward_evals.colwise().mean().transpose();
  const Eigen::MatrixXd dx = ensemble.particles.rowwise() - out.x_mean.transpose();
  const Eigen::MatrixXd dg = ensemble.forward_evals.rowwise() - out.g_mean.transpose();
  const double norm = 1.0 / static_cast<double>(j - 1);
  out.c_xg = norm * dx.transpose() * dg;
  out.c_gg = norm * dg.transpose() * dg;
  out.c_gg = 0.5 * (out.c_gg + out.c_gg.transpose());
  return out;
}

Eigen::MatrixXd perturb_observations(const Eigen::VectorXd& data, const NoiseModel& noise,
                                     double alpha, Eigen::Index count, Rng& rng) {
  if (!(alpha > 0.0)) throw InvalidConfig("alpha must be positive");
  if (data.size() != noise.dim()) throw SizeMismatch("data and noise dimensions differ");
  if (!data.allFinite()) throw NonFinite("data contains non-finite entries");
  const Eigen::MatrixXd u = rng.normal_matrix(count, data.size());
  Eigen::MatrixXd out = std::sqrt(alpha) * u * noise.gamma_chol().transpose();
  out.rowwise() += data.transpose();
  return out;
}

namespace {

Eigen::LLT<Eigen::MatrixXd> factorize_with_jitter(const Eigen::MatrixXd& system) {
  Eigen::LLT<Eigen::MatrixXd> llt(system);
  if (llt.info() == Eigen::Success) return llt;
  const double base = system.trace() / static_cast<double>(system.rows());
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(system.rows(), system.cols());
  for (double jitter = 1e-10; jitter <= 1e-4 * (1 + 1e-9); jitter *= 10.0) {
    llt.compute(system + jitter * base * eye);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw SingularSystem("(C^GG + alpha Gamma) is not positive definite after jitter");
}

}  // namespace

Ensemble kalman_update_with(const Ensemble& ensemble, const Eigen::MatrixXd& perturbed,
                            const NoiseModel& noise, double alpha) {
  if (!(alpha > 0.0)) throw InvalidConfig("alpha must be positive");
  const KalmanCrossCovariances cov = empirical_cross_covariances(ensemble);
  if (perturbed.rows() != ensemble.size() || perturbed.cols() != noise.dim() ||
      ensemble.data_dim() != noise.dim())
    throw SizeMismatch("perturbed observations do not match the ensemble");
  if (!perturbed.allFinite()) throw NonFinite("perturbed observations are non-finite");

  const Eigen::MatrixXd system = cov.c_gg + alpha * noise.gamma();
  const auto llt = factorize_with_jitter(system);
  // Innovations D (J x d_y); S^T = K^{-1} D^T with K symmetric.
  const Eigen::MatrixXd innovations = perturbed - ensemble.forward_evals;
  const Eigen::MatrixXd solved = llt.solve(innovations.transpose());

  Ensemble out(ensemble.particles + solved.transpose() * cov.c_xg.transpose(),
               ensemble.generation + 1);
  if (!out.particles.allFinite()) throw NonFinite("Kalman update produced non-finite particles");
  return out;
}

Ensemble kalman_update(const Ensemble& ensemble, const Eigen::VectorXd& data,
                       const NoiseModel& noise, double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw InvalidConfig("alpha must be positive");
  if (ensemble.size() < 2) throw DegenerateEnsemble("Kalman update needs at least two particles");
  const Eigen::MatrixXd perturbed = perturb_observations(data, noise, alpha, ensemble.size(), rng);
  return kalman_update_with(ensemble, perturbed, noise, alpha);
}

}  // namespace faki
