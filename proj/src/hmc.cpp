#include "faki/hmc.hpp"

#include <cmath>
#include <limits>

#include "faki/errors.hpp"

namespace faki {

namespace {

constexpr double kDivergenceThreshold = 1e3;

double evaluate(const LogDensity& target, const Eigen::VectorXd& q, Eigen::VectorXd& grad) {
  const double lp = target(q, grad);
  if (!std::isfinite(lp) || !grad.allFinite()) return -std::numeric_limits<double>::infinity();
  return lp;
}

// Dual averaging of log step size towards a target acceptance statistic.
class StepSizeAdapter {
 public:
  StepSizeAdapter(double eps, double target) : target_(target) { restart(eps); }

  void restart(double eps) {
    mu_ = std::log(10.0 * eps);
    log_eps_ = std::log(eps);
    log_eps_bar_ = 0.0;
    h_bar_ = 0.0;
    t_ = 0;
  }

  double update(double accept_stat) {
    ++t_;
    const double t = static_cast<double>(t_);
    const double eta = 1.0 / (t + kT0);
    h_bar_ = (1.0 - eta) * h_bar_ + eta * (target_ - accept_stat);
    log_eps_ = mu_ - std::sqrt(t) / kGamma * h_bar_;
    const double w = std::pow(t, -kKappa);
    log_eps_bar_ = w * log_eps_ + (1.0 - w) * log_eps_bar_;
    return std::exp(log_eps_);
  }

  double final_step() const { return std::exp(log_eps_bar_); }

 private:
  static constexpr double kGamma = 0.05;
  static constexpr double kT0 = 10.0;
  static constexpr double kKappa = 0.75;
  double target_;
  double mu_ = 0.0, log_eps_ = 0.0, log_eps_bar_ = 0.0, h_bar_ = 0.0;
  long t_ = 0;
};

// Doubles or halves eps until a single leapfrog step crosses acceptance 1/2.
double reasonable_step(const LogDensity& target, const PhasePoint& start, double eps,
                       const Eigen::VectorXd& inv_mass, Rng& rng) {
  PhasePoint p0 = start;
  p0.momentum.resize(start.position.size());
  for (Eigen::Index i = 0; i < p0.momentum.size(); ++i) p0.momentum(i) = rng.normal() / std::sqrt(inv_mass(i));
  const double h0 = hamiltonian(p0, inv_mass);
  auto log_ratio = [&](double e) {
    const PhasePoint p1 = leapfrog(target, p0, e, 1, inv_mass);
    const double d = h0 - hamiltonian(p1, inv_mass);
    return std::isfinite(d) ? d : -std::numeric_limits<double>::infinity();
  };
  double lr = log_ratio(eps);
  const double dir = lr > std::log(0.5) ? 1.0 : -1.0;
  for (int it = 0; it < 100; ++it) {
    if (dir * lr <= dir * std::log(0.5)) break;
    eps *= std::pow(2.0, dir);
    lr = log_ratio(eps);
  }
  return eps;
}

}  // namespace

double hamiltonian(const PhasePoint& point, const Eigen::VectorXd& inverse_mass) {
  return -point.log_density + 0.5 * point.momentum.cwiseAbs2().dot(inverse_mass);
}

PhasePoint leapfrog(const LogDensity& target, PhasePoint p, double eps, int steps,
                    const Eigen::VectorXd& inverse_mass) {
  if (p.gradient.size() != p.position.size()) p.log_density = evaluate(target, p.position, p.gradient);
  for (int s = 0; s < steps; ++s) {
    p.momentum += 0.5 * eps * p.gradient;
    p.position += eps * inverse_mass.cwiseProduct(p.momentum);
    p.log_density = evaluate(target, p.position, p.gradient);
    if (!std::isfinite(p.log_density)) return p;
    p.momentum += 0.5 * eps * p.gradient;
  }
  return p;
}

ChainOutput run_hmc(const LogDensity& target, const Eigen::VectorXd& initial, const HmcConfig& config) {
  const Eigen::Index d = initial.size();
  if (!(config.step_size > 0.0)) throw InvalidConfig("HMC step size must be positive");
  if (config.warmup < 100) throw InvalidConfig("HMC warmup must be at least 100 iterations");
  if (config.samples < 1 || config.leapfrog_steps < 1) throw InvalidConfig("HMC needs samples and leapfrog steps");
  if (!(config.target_accept > 0.0 && config.target_accept < 1.0))
    throw InvalidConfig("HMC target acceptance must lie in (0, 1)");
  if (!(config.step_jitter >= 0.0 && config.step_jitter < 1.0)) throw InvalidConfig("HMC step jitter must lie in [0, 1)");

  Rng rng(config.seed);
  Eigen::VectorXd inv_mass = config.inverse_mass.size() == d ? config.inverse_mass : Eigen::VectorXd::Ones(d);

  PhasePoint current;
  current.position = initial;
  current.log_density = evaluate(target, initial, current.gradient);
  if (!std::isfinite(current.log_density)) throw DivergentChain("HMC initial point has non-finite log density");

  double eps = reasonable_step(target, current, config.step_size, inv_mass, rng);
  StepSizeAdapter adapter(eps, config.target_accept);

  // Warmup windows: fast step adaptation, slow window collecting variances,
  // final step adaptation under the new mass matrix.
  const int window_start = static_cast<int>(0.15 * config.warmup);
  const int window_end = static_cast<int>(0.75 * config.warmup);
  Eigen::VectorXd w_mean = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd w_m2 = Eigen::VectorXd::Zero(d);
  long w_count = 0;

  ChainOutput out;
  out.samples.resize(config.samples, d);
  int consecutive_divergent = 0;

  const int total = config.warmup + config.samples;
  for (int it = 0; it < total; ++it) {
    const bool warm = it < config.warmup;
    const double step = warm ? eps : eps * (1.0 + config.step_jitter * (2.0 * rng.uniform() - 1.0));

    PhasePoint start = current;
    start.momentum.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) start.momentum(i) = rng.normal() / std::sqrt(inv_mass(i));
    const double h0 = hamiltonian(start, inv_mass);
    const PhasePoint proposal = leapfrog(target, start, step, config.leapfrog_steps, inv_mass);
    const double h1 = hamiltonian(proposal, inv_mass);
    const double energy_error = h1 - h0;
    const bool divergent = !std::isfinite(energy_error) || energy_error > kDivergenceThreshold;
    const double accept_prob = divergent ? 0.0 : std::min(1.0, std::exp(-energy_error));
    if (!divergent && rng.uniform() < accept_prob) current = proposal;

    if (warm) {
      eps = adapter.update(accept_prob);
      if (config.adapt_mass && it >= window_start && it < window_end) {
        ++w_count;
        const Eigen::VectorXd delta = current.position - w_mean;
        w_mean += delta / static_cast<double>(w_count);
        w_m2 += delta.cwiseProduct(current.position - w_mean);
      }
      if (config.adapt_mass && it + 1 == window_end && w_count > 2) {
        const double n = static_cast<double>(w_count);
        const Eigen::VectorXd var = w_m2 / (n - 1.0);
        inv_mass = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
        eps = reasonable_step(target, current, eps, inv_mass, rng);
        adapter.restart(eps);
      }
      if (it + 1 == config.warmup) eps = adapter.final_step();
      continue;
    }

    const int m = it - config.warmup;
    out.samples.row(m) = current.position.transpose();
    if (divergent) {
      ++out.divergences;
      if (++consecutive_divergent >= config.max_consecutive_divergences)
        throw DivergentChain("HMC produced " + std::to_string(consecutive_divergent) +
                             " consecutive divergent transitions");
    } else {
      consecutive_divergent = 0;
    }
    out.acceptance_rate += accept_prob;
  }
  out.acceptance_rate /= static_cast<double>(config.samples);
  out.step_size = eps;
  out.inverse_mass = inv_mass;
  out.iact = integrated_autocorrelation_times(out.samples);
  return out;
}

ChainOutput run_hmc(const ForwardModel& model, const HmcConfig& config, std::optional<Eigen::VectorXd> initial) {
  if (!model.has_gradient()) throw GradientUnavailable(model.id() + " does not provide gradients");
  LogDensity target = [&model](const Eigen::VectorXd& u, Eigen::VectorXd& g) {
    return model.sampler_log_density(u, g);
  };
  Eigen::VectorXd start;
  if (initial) {
    start = *initial;
  } else {
    Rng init_rng = Rng::derive(config.seed, {0x1417});
    start = model.sample_prior(init_rng);
  }
  ChainOutput out = run_hmc(target, model.to_sampler(start), config);
  for (Eigen::Index i = 0; i < out.samples.rows(); ++i)
    out.samples.row(i) = model.from_sampler(out.samples.row(i).transpose()).transpose();
  out.iact = integrated_autocorrelation_times(out.samples);
  return out;
}

double integrated_autocorrelation_time(const Eigen::VectorXd& series) {
  const Eigen::Index n = series.size();
  if (n < 4) return std::numeric_limits<double>::infinity();
  const Eigen::ArrayXd x = series.array() - series.mean();
  const double c0 = x.square().sum() / static_cast<double>(n);
  if (!(c0 > 0.0) || !std::isfinite(c0)) return std::numeric_limits<double>::infinity();

  auto rho = [&](Eigen::Index lag) {
    return (x.head(n - lag) * x.tail(n - lag)).sum() / static_cast<double>(n) / c0;
  };
  // Geyer: Gamma_m = rho(2m) + rho(2m+1), summed while positive and
  // forced monotone non-increasing.
  double sum = 0.0;
  double prev = std::numeric_limits<double>::infinity();
  for (Eigen::Index m = 0; 2 * m + 1 < n; ++m) {
    double g = rho(2 * m) + rho(2 * m + 1);
    if (g <= 0.0) break;
    g = std::min(g, prev);
    sum += g;
    prev = g;
  }
  return std::max(1.0, -1.0 + 2.0 * sum);
}

Eigen::VectorXd integrated_autocorrelation_times(const Eigen::MatrixXd& samples) {
  Eigen::VectorXd out(samples.cols());
  for (Eigen::Index c = 0; c < samples.cols(); ++c) out(c) = integrated_autocorrelation_time(samples.col(c));
  return out;
}

Eigen::MatrixXd thin_chain(const ChainOutput& chain, Eigen::Index target_count) {
  const Eigen::Index m = chain.samples.rows();
  if (target_count < 1) throw InvalidConfig("thinning target must be positive");
  const Eigen::VectorXd iact =
      chain.iact.size() == chain.samples.cols() ? chain.iact : integrated_autocorrelation_times(chain.samples);
  const double max_iact = iact.size() ? iact.maxCoeff() : 1.0;
  if (!std::isfinite(max_iact) || static_cast<double>(m) < static_cast<double>(target_count) * max_iact)
    throw InsufficientChain("chain of length " + std::to_string(m) + " cannot supply " +
                            std::to_string(target_count) + " draws at IACT " + std::to_string(max_iact));
  const Eigen::Index k =
      std::max(static_cast<Eigen::Index>(std::ceil(max_iact)), m / target_count);
  if ((target_count - 1) * k >= m)
    throw InsufficientChain("chain too short after rounding the thinning interval");
  Eigen::MatrixXd out(target_count, chain.samples.cols());
  for (Eigen::Index i = 0; i < target_count; ++i) out.row(i) = chain.samples.row(i * k);
  return out;
}

}  // namespace faki
