#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "faki/ensemble.hpp"
#include "faki/random.hpp"

namespace faki {

/// Inverse problem y = G(x) + eta, eta ~ N(0, Gamma), with a prior sampler.
///
/// Implementations must be thread-safe for concurrent `forward` calls.
class ForwardModel {
 public:
  ForwardModel(NoiseModel noise, Eigen::VectorXd data);
  virtual ~ForwardModel() = default;

  virtual std::string id() const = 0;
  virtual Eigen::Index dim() const = 0;
  Eigen::Index data_dim() const { return data_.size(); }

  virtual Eigen::VectorXd sample_prior(Rng& rng) const = 0;
  virtual Eigen::VectorXd forward(const Eigen::VectorXd& x) const = 0;

  const NoiseModel& noise() const { return noise_; }
  const Eigen::VectorXd& data() const { return data_; }

  virtual std::vector<std::string> parameter_names() const;

  virtual bool has_gradient() const { return false; }
  /// Normalised log prior density.
  virtual double log_prior(const Eigen::VectorXd& x) const;
  /// Log posterior (prior + Gaussian likelihood) and its gradient.
  virtual double log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const;

  /// Gaussian log-likelihood -0.5 |y - G(x)|^2_Gamma, without normalisation.
  double log_likelihood(const Eigen::VectorXd& x) const;

  // Coordinates the reference sampler works in. Identity unless overridden;
  // sampler_log_density is the posterior density of u = to_sampler(x), up to a constant.
  virtual Eigen::VectorXd to_sampler(const Eigen::VectorXd& x) const { return x; }
  virtual Eigen::VectorXd from_sampler(const Eigen::VectorXd& u) const { return u; }
  virtual double sampler_log_density(const Eigen::VectorXd& u, Eigen::VectorXd& grad) const {
    return log_posterior_and_gradient(u, grad);
  }

 protected:
  NoiseModel noise_;
  Eigen::VectorXd data_;
};

/// Free-function form used by the reference sampler.
double log_posterior_and_gradient(const ForwardModel& model, const Eigen::VectorXd& x,
                                  Eigen::VectorXd& grad);

/// G(x) = A x with prior N(m0, C0); the posterior is available in closed form.
class LinearGaussianModel final : public ForwardModel {
 public:
  LinearGaussianModel(Eigen::MatrixXd forward_matrix, Eigen::VectorXd prior_mean,
                      Eigen::MatrixXd prior_cov, NoiseModel noise, Eigen::VectorXd data);

  /// Fixed d = 2 instance used by the acceptance tests and the CLI.
  static LinearGaussianModel standard(const Eigen::VectorXd& data);
  static Eigen::VectorXd standard_truth();
  static Eigen::VectorXd generate_standard_data(Rng& rng);

  std::string id() const override { return "linear_gaussian"; }
  Eigen::Index dim() const override { return prior_mean_.size(); }
  Eigen::VectorXd sample_prior(Rng& rng) const override;
  Eigen::VectorXd forward(const Eigen::VectorXd& x) const override { return a_ * x; }

  bool has_gradient() const override { return true; }
  double log_prior(const Eigen::VectorXd& x) const override;
  double log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const override;

  const Eigen::VectorXd& posterior_mean() const { return post_mean_; }
  const Eigen::MatrixXd& posterior_cov() const { return post_cov_; }

 private:
  Eigen::MatrixXd a_;
  Eigen::VectorXd prior_mean_;
  Eigen::MatrixXd prior_cov_;
  Eigen::MatrixXd prior_chol_;
  Eigen::MatrixXd prior_prec_;
  Eigen::VectorXd post_mean_;
  Eigen::MatrixXd post_cov_;
};

/// 2-d Rosenbrock benchmark: x ~ N(0, 10^2 I), G(x) = (x1 - x0^2, x0),
/// Gamma = diag(0.01^2, 1^2).
class RosenbrockModel final : public ForwardModel {
 public:
  static constexpr double kPriorScale = 10.0;

  explicit RosenbrockModel(Eigen::VectorXd data);

  static Eigen::VectorXd map(const Eigen::VectorXd& x);
  static NoiseModel noise_model();
  /// y = G((1, 1)) + eta.
  static Eigen::VectorXd generate_data(Rng& rng);

  std::string id() const override { return "rosenbrock"; }
  Eigen::Index dim() const override { return 2; }
  Eigen::VectorXd sample_prior(Rng& rng) const override;
  Eigen::VectorXd forward(const Eigen::VectorXd& x) const override { return map(x); }

  bool has_gradient() const override { return true; }
  double log_prior(const Eigen::VectorXd& x) const override;
  double log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const override;
};

/// Unpacked view of the stochastic Lorenz parameter vector.
///
/// Flat layout (d = 4 + 3T): [log sigma0, X_0, Y_0, Z_0, X_1..X_T, Y_1..Y_T, Z_1..Z_T].
struct LorenzState {
  double log_sigma0 = 0.0;
  Eigen::MatrixX3d states;  // (T+1) x 3, row t = (X_t, Y_t, Z_t)

  Eigen::Index steps() const { return states.rows() - 1; }

  Eigen::VectorXd pack() const;
  static LorenzState unpack(const Eigen::VectorXd& params, Eigen::Index steps);
};

/// Drift of the Lorenz system (sigma = 10, rho = 28, beta = 8/3).
Eigen::Vector3d lorenz_drift(const Eigen::Vector3d& s);

/// Mean and per-component variance of the Euler-Maruyama transition
/// s_t | s_{t-1} ~ N(s_{t-1} + f(s_{t-1}) dt, sigma0^2 dt I).
struct TransitionMoments {
  Eigen::Vector3d mean;
  double variance;
};
TransitionMoments lorenz_transition(const Eigen::Vector3d& prev, double sigma0, double dt);

/// Trajectory from an initial state and standard-normal innovations (T x 3).
Eigen::MatrixX3d lorenz_trajectory(const Eigen::Vector3d& initial, double sigma0, double dt,
                                   const Eigen::MatrixX3d& innovations);

struct LorenzSettings {
  Eigen::Index steps = 30;
  double dt = 0.02;
  double observation_sd = 1.0;
  double prior_log_sigma0_mean = -1.0;
  double prior_log_sigma0_sd = 1.0;
};

struct Dataset {
  Eigen::VectorXd observations;
  Eigen::VectorXd ground_truth;
};

/// Euler-Maruyama simulation with sigma0 = `true_sigma0`, initial state
/// ~ N(0, I), observations X_t + N(0, observation_sd^2) for t = 1..T.
Dataset generate_lorenz_data(std::uint64_t seed, const LorenzSettings& settings = {},
                             double true_sigma0 = 0.1);

/// Stochastic Lorenz benchmark: infer log sigma0, the initial state and the
/// full latent trajectory from noisy observations of X_1..X_T.
class LorenzModel final : public ForwardModel {
 public:
  LorenzModel(Eigen::VectorXd observations, LorenzSettings settings = {});

  const LorenzSettings& settings() const { return settings_; }

  std::string id() const override { return "lorenz"; }
  Eigen::Index dim() const override { return 4 + 3 * settings_.steps; }
  Eigen::VectorXd sample_prior(Rng& rng) const override;
  /// Projection onto X_1..X_T.
  Eigen::VectorXd forward(const Eigen::VectorXd& x) const override;
  std::vector<std::string> parameter_names() const override;

  bool has_gradient() const override { return true; }
  double log_prior(const Eigen::VectorXd& x) const override;
  double log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const override;

  /// Log prior and its gradient.
  double log_prior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const;

  /// Non-centred coordinates: (log sigma0, initial state, standardised
  /// innovations), laid out like the parameter vector.
  Eigen::VectorXd to_sampler(const Eigen::VectorXd& x) const override;
  Eigen::VectorXd from_sampler(const Eigen::VectorXd& u) const override;
  double sampler_log_density(const Eigen::VectorXd& u, Eigen::VectorXd& grad) const override;

 private:
  LorenzSettings settings_;
};

/// Benchmark selection as read from an experiment configuration.
struct BenchmarkSpec {
  std::string id = "rosenbrock";  // rosenbrock | lorenz | linear_gaussian
  std::uint64_t data_seed = 0;
  LorenzSettings lorenz;
  double lorenz_true_sigma0 = 0.1;
};

Dataset generate_dataset(const BenchmarkSpec& spec);
std::unique_ptr<ForwardModel> make_model(const BenchmarkSpec& spec, const Eigen::VectorXd& observations);

}  // namespace faki
