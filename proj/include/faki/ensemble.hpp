#pragma once

#include <cstddef>

#include <Eigen/Dense>

#include "faki/random.hpp"

namespace faki {

/// J particles in d dimensions together with their forward evaluations.
///
/// Rows are particles. `forward_evals` row j equals G(particles row j) only
/// while `evals_fresh` is set; any update clears the flag.
struct Ensemble {
  Eigen::MatrixXd particles;      // J x d
  Eigen::MatrixXd forward_evals;  // J x d_y
  std::size_t generation = 0;
  bool evals_fresh = false;

  Ensemble() = default;
  explicit Ensemble(Eigen::MatrixXd x, std::size_t gen = 0)
      : particles(std::move(x)), generation(gen) {}
  Ensemble(Eigen::MatrixXd x, Eigen::MatrixXd g, std::size_t gen = 0)
      : particles(std::move(x)), forward_evals(std::move(g)), generation(gen), evals_fresh(true) {}

  Eigen::Index size() const { return particles.rows(); }
  Eigen::Index dim() const { return particles.cols(); }
  Eigen::Index data_dim() const { return forward_evals.cols(); }
};

/// Gaussian observation noise N(0, gamma) with its Cholesky factor cached.
class NoiseModel {
 public:
  explicit NoiseModel(Eigen::MatrixXd gamma);

  static NoiseModel diagonal(const Eigen::VectorXd& sd);

  const Eigen::MatrixXd& gamma() const { return gamma_; }
  /// Lower-triangular L with L L^T = gamma.
  const Eigen::MatrixXd& gamma_chol() const { return chol_; }
  Eigen::Index dim() const { return gamma_.rows(); }

  /// Squared Mahalanobis norm r^T gamma^{-1} r for each row of `residuals`.
  Eigen::VectorXd mahalanobis_sq(const Eigen::MatrixXd& residuals) const;

 private:
  Eigen::MatrixXd gamma_;
  Eigen::MatrixXd chol_;
};

struct KalmanCrossCovariances {
  Eigen::MatrixXd c_xg;  // d x d_y
  Eigen::MatrixXd c_gg;  // d_y x d_y
  Eigen::VectorXd x_mean;
  Eigen::VectorXd g_mean;
};

/// (J-1)-normalised cross covariance of particles with forward evaluations,
/// and the covariance of the forward evaluations.
KalmanCrossCovariances empirical_cross_covariances(const Ensemble& ensemble);

/// Row j = data + sqrt(alpha) * L u_j, u_j ~ N(0, I), drawn in particle order.
Eigen::MatrixXd perturb_observations(const Eigen::VectorXd& data, const NoiseModel& noise,
                                     double alpha, Eigen::Index count, Rng& rng);

/// Perturbed-observation Kalman update with the perturbed data supplied by the
/// caller. Row j of `perturbed` plays the role of y + sqrt(alpha) xi_j.
Ensemble kalman_update_with(const Ensemble& ensemble, const Eigen::MatrixXd& perturbed,
                            const NoiseModel& noise, double alpha);

/// x_j <- x_j + C^{xG} (C^{GG} + alpha Gamma)^{-1} (y - G_j + sqrt(alpha) xi_j).
/// The input is left untouched; the result has generation n+1 and stale evals.
Ensemble kalman_update(const Ensemble& ensemble, const Eigen::VectorXd& data,
                       const NoiseModel& noise, double alpha, Rng& rng);

bool all_finite(const Eigen::MatrixXd& m);

}  // namespace faki
