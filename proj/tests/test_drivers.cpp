#include <cmath>
#include <numeric>

#include "doctest.h"
#include "faki/drivers.hpp"
#include "faki/errors.hpp"

using namespace faki;

namespace {

LinearGaussianModel linear_model(std::uint64_t seed) {
  Rng rng(seed);
  return LinearGaussianModel::standard(LinearGaussianModel::generate_standard_data(rng));
}

Eigen::VectorXd sample_mean(const Eigen::MatrixXd& x) { return x.colwise().mean().transpose(); }

Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

RunConfig config_for(Method m, Eigen::Index j, std::uint64_t seed) {
  RunConfig c;
  c.method = m;
  c.ensemble_size = j;
  c.seed = seed;
  return c;
}

/// Throws for particles with a negative first coordinate.
class FragileModel final : public ForwardModel {
 public:
  FragileModel() : ForwardModel(NoiseModel::diagonal(Eigen::VectorXd::Ones(1)), Eigen::VectorXd::Zero(1)) {}
  std::string id() const override { return "fragile"; }
  Eigen::Index dim() const override { return 1; }
  Eigen::VectorXd sample_prior(Rng& rng) const override { return Eigen::VectorXd::Constant(1, rng.normal()); }
  Eigen::VectorXd forward(const Eigen::VectorXd& x) const override {
    if (x(0) < 0.0) throw std::runtime_error("negative input");
    return x;
  }
};

}  // namespace

TEST_CASE("EKI recovers the linear-Gaussian posterior") {
  const LinearGaussianModel model = linear_model(11);
  const RunReport r = run_eki(model, config_for(Method::Eki, 2000, 5));
  const Eigen::MatrixXd& x = r.final_ensemble.particles;
  CHECK((sample_mean(x) - model.posterior_mean()).norm() / model.posterior_mean().norm() < 0.05);
  CHECK((sample_cov(x) - model.posterior_cov()).cwiseAbs().maxCoeff() / model.posterior_cov().cwiseAbs().maxCoeff() <
        0.15);
}

TEST_CASE("FAKI recovers the linear-Gaussian posterior") {
  const LinearGaussianModel model = linear_model(12);
  const RunReport r = run_faki(model, config_for(Method::Faki, 2000, 6));
  const Eigen::MatrixXd& x = r.final_ensemble.particles;
  CHECK((sample_mean(x) - model.posterior_mean()).norm() / model.posterior_mean().norm() < 0.05);
  CHECK((sample_cov(x) - model.posterior_cov()).cwiseAbs().maxCoeff() / model.posterior_cov().cwiseAbs().maxCoeff() <
        0.15);
  CHECK(r.flow_diagnostics.size() == r.n_iter);
  CHECK(r.latent_evals_reused);
}

TEST_CASE("schedule is increasing and sums to one") {
  const RosenbrockModel model(Eigen::Vector2d(0.05, 1.1));
  for (Method m : {Method::Eki, Method::Faki}) {
    const RunReport r = run(model, config_for(m, 100, 3));
    const auto betas = r.schedule.betas();
    REQUIRE(betas.size() == r.n_iter + 1);
    CHECK(betas.front() == 0.0);
    CHECK(betas.back() == 1.0);
    double total = 0.0;
    for (std::size_t i = 1; i < betas.size(); ++i) {
      CHECK(betas[i] > betas[i - 1]);
      total += 1.0 / r.schedule.history()[i - 1].alpha;
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK(r.iteration_seconds.size() == r.n_iter);
  }
}

TEST_CASE("runs are bit-identical for a fixed seed") {
  const RosenbrockModel model(Eigen::Vector2d(0.05, 1.1));
  for (Method m : {Method::Eki, Method::Faki}) {
    const RunReport a = run(model, config_for(m, 60, 9));
    const RunReport b = run(model, config_for(m, 60, 9));
    CHECK(a.n_iter == b.n_iter);
    CHECK(a.final_ensemble.particles == b.final_ensemble.particles);
    CHECK(a.schedule.betas() == b.schedule.betas());
  }
  const RunReport c = run(model, config_for(Method::Eki, 60, 10));
  const RunReport d = run(model, config_for(Method::Eki, 60, 9));
  CHECK(c.final_ensemble.particles != d.final_ensemble.particles);
}

TEST_CASE("FAKI with an identity flow reduces to EKI") {
  const RosenbrockModel model(Eigen::Vector2d(0.05, 1.1));
  for (bool standardize : {false, true}) {
    RunConfig eki = config_for(Method::Eki, 80, 21);
    RunConfig faki = config_for(Method::Faki, 80, 21);
    faki.flow.max_epochs = 0;
    faki.flow.standardize = standardize;
    const RunReport a = run(model, eki);
    const RunReport b = run(model, faki);
    REQUIRE(a.n_iter == b.n_iter);
    const Eigen::MatrixXd& xa = a.final_ensemble.particles;
    const Eigen::MatrixXd& xb = b.final_ensemble.particles;
    CHECK((xa - xb).cwiseAbs().maxCoeff() / (1.0 + xa.cwiseAbs().maxCoeff()) < 1e-8);
  }
}

TEST_CASE("forward evaluation") {
  CHECK((RosenbrockModel::map(Eigen::Vector2d(1.0, 1.0)) - Eigen::Vector2d(0.0, 1.0)).norm() == 0.0);

  const Dataset data = generate_lorenz_data(4);
  const LorenzModel lorenz(data.observations);
  const Eigen::VectorXd g = lorenz.forward(Eigen::VectorXd::Zero(lorenz.dim()));
  CHECK(g.size() == 30);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);

  const RosenbrockModel model(Eigen::Vector2d(0.0, 1.0));
  RunConfig c = config_for(Method::Eki, 37, 1);
  const Ensemble prior = sample_prior_ensemble(model, c);
  const Ensemble serial = evaluate_forward_parallel(model, prior, 1);
  const Ensemble threaded = evaluate_forward_parallel(model, prior, 4);
  CHECK(serial.evals_fresh);
  CHECK(serial.forward_evals == threaded.forward_evals);
  for (Eigen::Index j = 0; j < prior.size(); ++j)
    CHECK(serial.forward_evals.row(j).transpose() == RosenbrockModel::map(prior.particles.row(j).transpose()));
}

TEST_CASE("forward failures carry the particle index") {
  const FragileModel model;
  Eigen::MatrixXd x(4, 1);
  x << 1.0, 2.0, -3.0, 4.0;
  try {
    evaluate_forward_parallel(model, Ensemble(x), 2);
    FAIL("expected ForwardModelFailure");
  } catch (const ForwardModelFailure& e) {
    CHECK(e.particle() == 2);
  }
}

TEST_CASE("configuration errors") {
  const RosenbrockModel model(Eigen::Vector2d(0.05, 1.1));
  RunConfig c = config_for(Method::Eki, 100, 1);
  c.max_iterations = 2;
  CHECK_THROWS_AS(run(model, c), IterationCapExceeded);
  c.max_iterations = 100;
  c.tau = 1.5;
  CHECK_THROWS_AS(run(model, c), InvalidConfig);
  c.tau = 0.5;
  c.ensemble_size = 1;
  CHECK_THROWS_AS(run(model, c), InvalidConfig);
  CHECK_THROWS_AS(run_faki(model, config_for(Method::Eki, 10, 1)), InvalidConfig);
  CHECK(method_from_string("faki") == Method::Faki);
  CHECK_THROWS_AS(method_from_string("enkf"), InvalidConfig);
}
