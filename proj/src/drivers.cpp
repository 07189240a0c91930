#include "faki/drivers.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <functional>
#include <thread>

#include "faki/errors.hpp"

namespace faki {

std::string to_string(Method m) { return m == Method::Eki ? "eki" : "faki"; }

Method method_from_string(const std::string& s) {
  if (s == "eki" || s == "EKI") return Method::Eki;
  if (s == "faki" || s == "FAKI") return Method::Faki;
  throw InvalidConfig("unknown method '" + s + "'");
}

void RunConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidConfig("tau must lie in (0, 1)");
  if (ensemble_size < 2) throw InvalidConfig("ensemble size must be at least 2");
  if (max_iterations < 1) throw InvalidConfig("iteration cap must be positive");
}

Ensemble evaluate_forward_parallel(const ForwardModel& model, const Ensemble& ensemble, unsigned threads) {
  const Eigen::Index j = ensemble.size();
  if (!ensemble.particles.allFinite()) throw NonFinite("cannot evaluate non-finite particles");
  Ensemble out = ensemble;
  out.forward_evals.resize(j, model.data_dim());

  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(j));
  auto work = [&](Eigen::Index begin, Eigen::Index end) {
    for (Eigen::Index i = begin; i < end; ++i) {
      try {
        const Eigen::VectorXd g = model.forward(ensemble.particles.row(i).transpose());
        if (g.size() != model.data_dim()) throw SizeMismatch("forward model returned wrong dimension");
        if (!g.allFinite()) throw NonFinite("forward model returned non-finite values");
        out.forward_evals.row(i) = g.transpose();
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };

  const auto workers = static_cast<Eigen::Index>(std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(j))));
  if (workers <= 1) {
    work(0, j);
  } else {
    std::vector<std::thread> pool;
    const Eigen::Index chunk = (j + workers - 1) / workers;
    for (Eigen::Index w = 0; w < workers; ++w) {
      const Eigen::Index begin = w * chunk;
      const Eigen::Index end = std::min(j, begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw ForwardModelFailure(i, e.what());
    }
  }
  out.evals_fresh = true;
  return out;
}

Ensemble sample_prior_ensemble(const ForwardModel& model, const RunConfig& config) {
  Rng rng = Rng::derive(config.seed, {streams::kPrior});
  Eigen::MatrixXd x(config.ensemble_size, model.dim());
  for (Eigen::Index j = 0; j < config.ensemble_size; ++j) x.row(j) = model.sample_prior(rng).transpose();
  return Ensemble(std::move(x));
}

namespace {

using StepFn = std::function<Ensemble(const Ensemble& evaluated, double alpha, std::size_t level, Rng& perturb)>;

RunReport anneal(const ForwardModel& model, const RunConfig& config, const StepFn& step) {
  config.validate();
  RunReport report;
  report.method = config.method;
  report.seed = config.seed;

  Rng perturb = Rng::derive(config.seed, {streams::kPerturbation});
  Ensemble ensemble = sample_prior_ensemble(model, config);
  while (!report.schedule.complete()) {
    if (report.n_iter >= config.max_iterations)
      throw IterationCapExceeded("annealing did not reach beta = 1 within " +
                                 std::to_string(config.max_iterations) + " iterations");
    const auto t0 = std::chrono::steady_clock::now();
    ensemble = evaluate_forward_parallel(model, ensemble, config.threads);
    const MisfitVector misfits = compute_misfits(ensemble, model.data(), model.noise());
    const BetaChoice choice = next_beta(misfits, report.schedule, config.tau);
    report.schedule.advance(choice.beta_next, choice.ess);
    const double alpha = report.schedule.history().back().alpha;
    ensemble = step(ensemble, alpha, report.n_iter, perturb);
    ++report.n_iter;
    report.iteration_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  report.final_ensemble = std::move(ensemble);
  return report;
}

}  // namespace

RunReport run_eki(const ForwardModel& model, const RunConfig& config) {
  if (config.method != Method::Eki) throw InvalidConfig("run_eki called with a non-EKI config");
  return anneal(model, config, [&](const Ensemble& ens, double alpha, std::size_t, Rng& perturb) {
    return kalman_update(ens, model.data(), model.noise(), alpha, perturb);
  });
}

RunReport run_faki(const ForwardModel& model, const RunConfig& config) {
  if (config.method != Method::Faki) throw InvalidConfig("run_faki called with a non-FAKI config");
  std::vector<FlowFitDiagnostics> diagnostics;
  std::vector<FlowModel> flows;
  RunReport report = anneal(model, config, [&](const Ensemble& ens, double alpha, std::size_t level, Rng& perturb) {
    Rng flow_rng = Rng::derive(config.seed, {streams::kFlow, level});
    FlowFit fit = train_flow(ens.particles, config.flow, flow_rng);
    diagnostics.push_back(fit.diagnostics);
    if (config.keep_flows) flows.push_back(fit.model);
    // Latent ensemble reuses G(x_j) as G(f^{-1}(z_j)).
    const Ensemble latent(fit.model.forward(ens.particles).points, ens.forward_evals, ens.generation);
    const Ensemble updated = kalman_update(latent, model.data(), model.noise(), alpha, perturb);
    Ensemble next(fit.model.inverse(updated.particles).points, updated.generation);
    if (!next.particles.allFinite()) throw NonFinite("inverse flow map produced non-finite particles");
    return next;
  });
  report.flow_diagnostics = std::move(diagnostics);
  report.flows = std::move(flows);
  report.latent_evals_reused = true;
  return report;
}

RunReport run(const ForwardModel& model, const RunConfig& config) {
  return config.method == Method::Eki ? run_eki(model, config) : run_faki(model, config);
}

}  // namespace faki
