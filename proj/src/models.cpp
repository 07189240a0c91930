#include "faki/models.hpp"

#include <cmath>
#include <numbers>

#include "faki/errors.hpp"

namespace faki {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double log_normal(double x, double mean, double sd) {
  const double u = (x - mean) / sd;
  return -0.5 * u * u - std::log(sd) - 0.5 * kLog2Pi;
}

void require_dim(const Eigen::VectorXd& x, Eigen::Index d) {
  if (x.size() != d) throw SizeMismatch("parameter vector has dimension " + std::to_string(x.size()) +
                                        ", expected " + std::to_string(d));
}

}  // namespace

ForwardModel::ForwardModel(NoiseModel noise, Eigen::VectorXd data)
    : noise_(std::move(noise)), data_(std::move(data)) {
  if (data_.size() != noise_.dim()) throw SizeMismatch("data and noise covariance dimensions differ");
  if (!data_.allFinite()) throw NonFinite("observed data contains non-finite values");
}

std::vector<std::string> ForwardModel::parameter_names() const {
  std::vector<std::string> names;
  for (Eigen::Index i = 0; i < dim(); ++i) names.push_back("x" + std::to_string(i));
  return names;
}

double ForwardModel::log_prior(const Eigen::VectorXd&) const {
  throw GradientUnavailable(id() + " does not provide a prior density");
}

double ForwardModel::log_posterior_and_gradient(const Eigen::VectorXd&, Eigen::VectorXd&) const {
  throw GradientUnavailable(id() + " does not provide log-posterior gradients");
}

double ForwardModel::log_likelihood(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd r = data_ - forward(x);
  return -0.5 * noise_.mahalanobis_sq(r.transpose())(0);
}

double log_posterior_and_gradient(const ForwardModel& model, const Eigen::VectorXd& x,
                                  Eigen::VectorXd& grad) {
  if (!model.has_gradient()) throw GradientUnavailable(model.id() + " does not provide gradients");
  return model.log_posterior_and_gradient(x, grad);
}

// ---------------------------------------------------------------------------
// Linear-Gaussian

LinearGaussianModel::LinearGaussianModel(Eigen::MatrixXd forward_matrix, Eigen::VectorXd prior_mean,
                                         Eigen::MatrixXd prior_cov, NoiseModel noise, Eigen::VectorXd data)
    : ForwardModel(std::move(noise), std::move(data)),
      a_(std::move(forward_matrix)),
      prior_mean_(std::move(prior_mean)),
      prior_cov_(std::move(prior_cov)) {
  if (a_.rows() != data_dim() || a_.cols() != prior_mean_.size() || prior_cov_.rows() != prior_mean_.size() ||
      prior_cov_.cols() != prior_mean_.size())
    throw SizeMismatch("linear-Gaussian model dimensions are inconsistent");
  Eigen::LLT<Eigen::MatrixXd> llt(prior_cov_);
  if (llt.info() != Eigen::Success) throw InvalidConfig("prior covariance is not positive definite");
  prior_chol_ = llt.matrixL();
  const Eigen::Index d = prior_mean_.size();
  prior_prec_ = llt.solve(Eigen::MatrixXd::Identity(d, d));
  const Eigen::MatrixXd noise_prec = noise_.gamma().llt().solve(Eigen::MatrixXd::Identity(data_dim(), data_dim()));
  const Eigen::MatrixXd post_prec = prior_prec_ + a_.transpose() * noise_prec * a_;
  post_cov_ = post_prec.llt().solve(Eigen::MatrixXd::Identity(d, d));
  post_mean_ = post_cov_ * (prior_prec_ * prior_mean_ + a_.transpose() * noise_prec * data_);
}

LinearGaussianModel LinearGaussianModel::standard(const Eigen::VectorXd& data) {
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 0.5, -0.3, 1.0;
  Eigen::MatrixXd c0(2, 2);
  c0 << 1.0, 0.3, 0.3, 2.0;
  Eigen::VectorXd m0(2);
  m0 << 0.5, -0.5;
  Eigen::VectorXd sd(2);
  sd << 0.5, 0.7;
  return LinearGaussianModel(a, m0, c0, NoiseModel::diagonal(sd), data);
}

Eigen::VectorXd LinearGaussianModel::standard_truth() { return Eigen::Vector2d(1.5, -1.0); }

Eigen::VectorXd LinearGaussianModel::generate_standard_data(Rng& rng) {
  const auto probe = standard(Eigen::VectorXd::Zero(2));
  return probe.forward(standard_truth()) + probe.noise().gamma_chol() * rng.normal_vector(2);
}

Eigen::VectorXd LinearGaussianModel::sample_prior(Rng& rng) const {
  return prior_mean_ + prior_chol_ * rng.normal_vector(dim());
}

double LinearGaussianModel::log_prior(const Eigen::VectorXd& x) const {
  require_dim(x, dim());
  const Eigen::VectorXd dx = x - prior_mean_;
  const double logdet = 2.0 * prior_chol_.diagonal().array().log().sum();
  return -0.5 * dx.dot(prior_prec_ * dx) - 0.5 * logdet - 0.5 * static_cast<double>(dim()) * kLog2Pi;
}

double LinearGaussianModel::log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
  require_dim(x, dim());
  const Eigen::VectorXd r = data_ - a_ * x;
  const Eigen::VectorXd wr = noise_.gamma().llt().solve(r);
  grad = -prior_prec_ * (x - prior_mean_) + a_.transpose() * wr;
  return log_prior(x) - 0.5 * r.dot(wr);
}

// ---------------------------------------------------------------------------
// Rosenbrock

RosenbrockModel::RosenbrockModel(Eigen::VectorXd data) : ForwardModel(noise_model(), std::move(data)) {}

Eigen::VectorXd RosenbrockModel::map(const Eigen::VectorXd& x) {
  require_dim(x, 2);
  return Eigen::Vector2d(x(1) - x(0) * x(0), x(0));
}

NoiseModel RosenbrockModel::noise_model() { return NoiseModel::diagonal(Eigen::Vector2d(0.01, 1.0)); }

Eigen::VectorXd RosenbrockModel::generate_data(Rng& rng) {
  return map(Eigen::Vector2d(1.0, 1.0)) + noise_model().gamma_chol() * rng.normal_vector(2);
}

Eigen::VectorXd RosenbrockModel::sample_prior(Rng& rng) const { return kPriorScale * rng.normal_vector(2); }

double RosenbrockModel::log_prior(const Eigen::VectorXd& x) const {
  require_dim(x, 2);
  return log_normal(x(0), 0.0, kPriorScale) + log_normal(x(1), 0.0, kPriorScale);
}

double RosenbrockModel::log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
  require_dim(x, 2);
  const Eigen::Vector2d var = noise_.gamma().diagonal();
  const Eigen::Vector2d r = data_ - map(x);
  const Eigen::Vector2d wr = r.cwiseQuotient(var);
  // dG/dx = [[-2 x0, 1], [1, 0]]
  grad.resize(2);
  grad(0) = -x(0) / (kPriorScale * kPriorScale) + wr(0) * (-2.0 * x(0)) + wr(1);
  grad(1) = -x(1) / (kPriorScale * kPriorScale) + wr(0);
  return log_prior(x) - 0.5 * r.dot(wr);
}

// ---------------------------------------------------------------------------
// Stochastic Lorenz

Eigen::VectorXd LorenzState::pack() const {
  const Eigen::Index t = steps();
  Eigen::VectorXd out(4 + 3 * t);
  out(0) = log_sigma0;
  out.segment(1, 3) = states.row(0).transpose();
  for (Eigen::Index c = 0; c < 3; ++c) out.segment(4 + c * t, t) = states.col(c).tail(t);
  return out;
}

LorenzState LorenzState::unpack(const Eigen::VectorXd& params, Eigen::Index steps) {
  require_dim(params, 4 + 3 * steps);
  LorenzState s;
  s.log_sigma0 = params(0);
  s.states.resize(steps + 1, 3);
  s.states.row(0) = params.segment(1, 3).transpose();
  for (Eigen::Index c = 0; c < 3; ++c) s.states.col(c).tail(steps) = params.segment(4 + c * steps, steps);
  return s;
}

Eigen::Vector3d lorenz_drift(const Eigen::Vector3d& s) {
  return {10.0 * (s(1) - s(0)), s(0) * (28.0 - s(2)) - s(1), s(0) * s(1) - (8.0 / 3.0) * s(2)};
}

namespace {

// Jacobian of lorenz_drift.
Eigen::Matrix3d lorenz_drift_jacobian(const Eigen::Vector3d& s) {
  Eigen::Matrix3d j;
  j << -10.0, 10.0, 0.0, 28.0 - s(2), -1.0, -s(0), s(1), s(0), -8.0 / 3.0;
  return j;
}

}  // namespace

TransitionMoments lorenz_transition(const Eigen::Vector3d& prev, double sigma0, double dt) {
  return {prev + lorenz_drift(prev) * dt, sigma0 * sigma0 * dt};
}

Eigen::MatrixX3d lorenz_trajectory(const Eigen::Vector3d& initial, double sigma0, double dt,
                                   const Eigen::MatrixX3d& innovations) {
  const Eigen::Index t = innovations.rows();
  Eigen::MatrixX3d states(t + 1, 3);
  states.row(0) = initial.transpose();
  for (Eigen::Index i = 1; i <= t; ++i) {
    const auto tr = lorenz_transition(states.row(i - 1).transpose(), sigma0, dt);
    states.row(i) = (tr.mean + std::sqrt(tr.variance) * innovations.row(i - 1).transpose()).transpose();
  }
  return states;
}

Dataset generate_lorenz_data(std::uint64_t seed, const LorenzSettings& settings, double true_sigma0) {
  Rng rng(seed);
  const Eigen::Vector3d initial = rng.normal_vector(3);
  Eigen::MatrixX3d innovations(settings.steps, 3);
  for (Eigen::Index i = 0; i < settings.steps; ++i)
    for (Eigen::Index c = 0; c < 3; ++c) innovations(i, c) = rng.normal();
  LorenzState truth;
  truth.log_sigma0 = std::log(true_sigma0);
  truth.states = lorenz_trajectory(initial, true_sigma0, settings.dt, innovations);

  Dataset out;
  out.ground_truth = truth.pack();
  out.observations = truth.states.col(0).tail(settings.steps);
  for (Eigen::Index i = 0; i < settings.steps; ++i) out.observations(i) += settings.observation_sd * rng.normal();
  return out;
}

LorenzModel::LorenzModel(Eigen::VectorXd observations, LorenzSettings settings)
    : ForwardModel(NoiseModel::diagonal(Eigen::VectorXd::Constant(settings.steps, settings.observation_sd)),
                   std::move(observations)),
      settings_(settings) {
  if (settings_.steps < 1) throw InvalidConfig("Lorenz model needs at least one step");
  if (!(settings_.dt > 0.0)) throw InvalidConfig("Lorenz time step must be positive");
}

Eigen::VectorXd LorenzModel::sample_prior(Rng& rng) const {
  LorenzState s;
  s.log_sigma0 = settings_.prior_log_sigma0_mean + settings_.prior_log_sigma0_sd * rng.normal();
  const Eigen::Vector3d initial = rng.normal_vector(3);
  Eigen::MatrixX3d innovations(settings_.steps, 3);
  for (Eigen::Index i = 0; i < settings_.steps; ++i)
    for (Eigen::Index c = 0; c < 3; ++c) innovations(i, c) = rng.normal();
  s.states = lorenz_trajectory(initial, std::exp(s.log_sigma0), settings_.dt, innovations);
  return s.pack();
}

Eigen::VectorXd LorenzModel::forward(const Eigen::VectorXd& x) const {
  require_dim(x, dim());
  return x.segment(4, settings_.steps);
}

std::vector<std::string> LorenzModel::parameter_names() const {
  std::vector<std::string> names{"log_sigma0", "X0", "Y0", "Z0"};
  for (const char* c : {"X", "Y", "Z"})
    for (Eigen::Index t = 1; t <= settings_.steps; ++t) names.push_back(c + std::to_string(t));
  return names;
}

double LorenzModel::log_prior(const Eigen::VectorXd& x) const {
  Eigen::VectorXd g;
  return log_prior_and_gradient(x, g);
}

double LorenzModel::log_prior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
  const Eigen::Index steps = settings_.steps;
  const double dt = settings_.dt;
  const LorenzState s = LorenzState::unpack(x, steps);
  const double var = std::exp(2.0 * s.log_sigma0) * dt;

  LorenzState g;
  g.states = Eigen::MatrixX3d::Zero(steps + 1, 3);

  const double m = settings_.prior_log_sigma0_mean;
  const double sd = settings_.prior_log_sigma0_sd;
  double logp = log_normal(s.log_sigma0, m, sd);
  g.log_sigma0 = -(s.log_sigma0 - m) / (sd * sd);
  for (Eigen::Index c = 0; c < 3; ++c) {
    logp += log_normal(s.states(0, c), 0.0, 1.0);
    g.states(0, c) = -s.states(0, c);
  }

  const double log_norm = -0.5 * (kLog2Pi + std::log(var));
  for (Eigen::Index t = 1; t <= steps; ++t) {
    const Eigen::Vector3d prev = s.states.row(t - 1).transpose();
    const Eigen::Vector3d r = s.states.row(t).transpose() - prev - lorenz_drift(prev) * dt;
    const double rr = r.squaredNorm();
    logp += 3.0 * log_norm - 0.5 * rr / var;
    // d/d log sigma0 of -log sigma0 - r^2 / (2 sigma0^2 dt), per component.
    g.log_sigma0 += -3.0 + rr / var;
    g.states.row(t) -= (r / var).transpose();
    const Eigen::Matrix3d dr_dprev = -(Eigen::Matrix3d::Identity() + lorenz_drift_jacobian(prev) * dt);
    g.states.row(t - 1) -= (dr_dprev.transpose() * r / var).transpose();
  }
  grad = g.pack();
  return logp;
}

double LorenzModel::log_posterior_and_gradient(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
  double logp = log_prior_and_gradient(x, grad);
  const double inv_var = 1.0 / (settings_.observation_sd * settings_.observation_sd);
  const Eigen::VectorXd r = data_ - x.segment(4, settings_.steps);
  logp -= 0.5 * inv_var * r.squaredNorm();
  grad.segment(4, settings_.steps) += inv_var * r;
  return logp;
}

Eigen::VectorXd LorenzModel::to_sampler(const Eigen::VectorXd& x) const {
  require_dim(x, dim());
  const LorenzState s = LorenzState::unpack(x, settings_.steps);
  const double sd = std::exp(s.log_sigma0) * std::sqrt(settings_.dt);
  LorenzState u = s;
  for (Eigen::Index t = 1; t <= settings_.steps; ++t) {
    const Eigen::Vector3d prev = s.states.row(t - 1).transpose();
    const Eigen::Vector3d r = s.states.row(t).transpose() - prev - lorenz_drift(prev) * settings_.dt;
    u.states.row(t) = (r / sd).transpose();
  }
  return u.pack();
}

Eigen::VectorXd LorenzModel::from_sampler(const Eigen::VectorXd& u) const {
  require_dim(u, dim());
  LorenzState s = LorenzState::unpack(u, settings_.steps);
  s.states = lorenz_trajectory(s.states.row(0).transpose(), std::exp(s.log_sigma0), settings_.dt,
                               s.states.bottomRows(settings_.steps));
  return s.pack();
}

double LorenzModel::sampler_log_density(const Eigen::VectorXd& u, Eigen::VectorXd& grad) const {
  require_dim(u, dim());
  const Eigen::Index steps = settings_.steps;
  const double dt = settings_.dt;
  const LorenzState eps = LorenzState::unpack(u, steps);
  const double sd = std::exp(eps.log_sigma0) * std::sqrt(dt);
  const Eigen::MatrixX3d states =
      lorenz_trajectory(eps.states.row(0).transpose(), std::exp(eps.log_sigma0), dt, eps.states.bottomRows(steps));

  const double m = settings_.prior_log_sigma0_mean;
  const double psd = settings_.prior_log_sigma0_sd;
  double logp = log_normal(eps.log_sigma0, m, psd) - 0.5 * eps.states.squaredNorm();
  LorenzState g;
  g.log_sigma0 = -(eps.log_sigma0 - m) / (psd * psd);
  g.states = -eps.states;

  // adjoint sweep through the Euler-Maruyama recursion
  const double inv_var = 1.0 / (settings_.observation_sd * settings_.observation_sd);
  Eigen::Vector3d adj = Eigen::Vector3d::Zero();
  for (Eigen::Index t = steps; t >= 1; --t) {
    const double r = data_(t - 1) - states(t, 0);
    logp -= 0.5 * inv_var * r * r;
    adj(0) += inv_var * r;
    const Eigen::Vector3d e = eps.states.row(t).transpose();
    g.states.row(t) += (sd * adj).transpose();
    g.log_sigma0 += sd * adj.dot(e);
    const Eigen::Vector3d prev = states.row(t - 1).transpose();
    adj = (Eigen::Matrix3d::Identity() + lorenz_drift_jacobian(prev) * dt).transpose() * adj;
  }
  g.states.row(0) += adj.transpose();
  grad = g.pack();
  return logp;
}

// ---------------------------------------------------------------------------

Dataset generate_dataset(const BenchmarkSpec& spec) {
  if (spec.id == "lorenz") return generate_lorenz_data(spec.data_seed, spec.lorenz, spec.lorenz_true_sigma0);
  Rng rng(spec.data_seed);
  if (spec.id == "rosenbrock") return {RosenbrockModel::generate_data(rng), Eigen::Vector2d(1.0, 1.0)};
  if (spec.id == "linear_gaussian")
    return {LinearGaussianModel::generate_standard_data(rng), LinearGaussianModel::standard_truth()};
  throw InvalidConfig("unknown benchmark '" + spec.id + "'");
}

std::unique_ptr<ForwardModel> make_model(const BenchmarkSpec& spec, const Eigen::VectorXd& observations) {
  if (spec.id == "rosenbrock") return std::make_unique<RosenbrockModel>(observations);
  if (spec.id == "lorenz") return std::make_unique<LorenzModel>(observations, spec.lorenz);
  if (spec.id == "linear_gaussian")
    return std::make_unique<LinearGaussianModel>(LinearGaussianModel::standard(observations));
  throw InvalidConfig("unknown benchmark '" + spec.id + "'");
}

}  // namespace faki
