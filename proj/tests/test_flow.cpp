#include <cmath>
#include <sstream>

#include "doctest.h"
#include "faki/errors.hpp"
#include "faki/flow.hpp"

using namespace faki;

namespace {

FlowModel random_flow(Eigen::Index d, Eigen::Index hidden, int blocks, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  FlowArchitecture arch{d, blocks, hidden};
  Standardizer st{0.5 * rng.normal_vector(d), (0.5 * rng.normal_vector(d)).array().exp()};
  FlowModel m(arch, st, rng);
  m.parameters() = scale * rng.normal_vector(m.parameter_count());
  return m;
}

Eigen::VectorXd map_one(const FlowModel& m, const Eigen::VectorXd& x) {
  return m.forward(x.transpose()).points.row(0).transpose();
}

// Central-difference Jacobian of the x -> z map.
Eigen::MatrixXd numerical_jacobian(const FlowModel& m, const Eigen::VectorXd& x, double h) {
  const Eigen::Index d = x.size();
  Eigen::MatrixXd jac(d, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    jac.col(j) = (map_one(m, xp) - map_one(m, xm)) / (2.0 * h);
  }
  return jac;
}

double skewness(const Eigen::VectorXd& v) {
  const Eigen::ArrayXd c = v.array() - v.mean();
  const double s2 = c.square().mean();
  return c.cube().mean() / std::pow(s2, 1.5);
}

double excess_kurtosis(const Eigen::VectorXd& v) {
  const Eigen::ArrayXd c = v.array() - v.mean();
  const double s2 = c.square().mean();
  return c.square().square().mean() / (s2 * s2) - 3.0;
}

}  // namespace

TEST_CASE("identity-initialised flow is the standardizer") {
  Rng rng(1);
  const Eigen::MatrixXd x = 3.0 * rng.normal_matrix(20, 4);
  const Standardizer st = Standardizer::fit(x);
  const FlowModel m(FlowArchitecture{4}, st, rng);
  const auto out = m.forward(x);
  CHECK((out.points - st.transform(x)).cwiseAbs().maxCoeff() < 1e-14);
  const double expected = -st.scale.array().log().sum();
  CHECK((out.log_det.array() - expected).abs().maxCoeff() < 1e-12);

  const Eigen::MatrixXd z = rng.normal_matrix(5, 4);
  const auto back = m.inverse(z);
  CHECK((back.points - st.inverse(z)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("default architecture") {
  Rng rng(0);
  const FlowModel small(FlowArchitecture{3}, Standardizer::identity(3), rng);
  CHECK(small.architecture().hidden == 32);
  CHECK(small.architecture().blocks == 4);
  const FlowModel big(FlowArchitecture{40}, Standardizer::identity(40), rng);
  CHECK(big.architecture().hidden == 80);
  CHECK(big.blocks()[0].order.front() == 0);
  CHECK(big.blocks()[1].order.front() == 39);
}

TEST_CASE("one-dimensional affine block by hand") {
  // z = (x - 1) e^{-log 2}: x = 3 gives z = 1 and log det = -log 2.
  Rng rng(0);
  FlowModel m(FlowArchitecture{1, 1, 4}, Standardizer::identity(1), rng);
  const MadeBlock& blk = m.blocks()[0];
  m.parameters()(blk.off_bmu) = 1.0;
  m.parameters()(blk.off_bs) = 7.0 * std::atanh(std::log(2.0) / 7.0);
  const auto fwd = m.forward(Eigen::MatrixXd::Constant(1, 1, 3.0));
  CHECK(fwd.points(0, 0) == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(fwd.log_det(0) == doctest::Approx(-std::log(2.0)).epsilon(1e-13));
  const auto inv = m.inverse(Eigen::MatrixXd::Constant(1, 1, 1.0));
  CHECK(inv.points(0, 0) == doctest::Approx(3.0).epsilon(1e-13));
  CHECK(inv.log_det(0) == doctest::Approx(std::log(2.0)).epsilon(1e-13));
}

TEST_CASE("round trip and paired log determinants") {
  const FlowModel m = random_flow(5, 16, 4, 21);
  Rng rng(2);
  const Eigen::MatrixXd x = 2.0 * rng.normal_matrix(100, 5);
  const auto f = m.forward(x);
  const auto b = m.inverse(f.points);
  CHECK((b.points - x).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((f.log_det + b.log_det).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("gradient matches central finite differences") {
  FlowModel m = random_flow(3, 8, 2, 5);
  Rng rng(6);
  const Eigen::MatrixXd batch = rng.normal_matrix(16, 3);
  Eigen::VectorXd grad;
  m.nll_and_gradient(batch, grad);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < m.parameter_count(); ++k) {
    const double keep = m.parameters()(k);
    m.parameters()(k) = keep + h;
    const double up = m.nll(batch);
    m.parameters()(k) = keep - h;
    const double down = m.nll(batch);
    m.parameters()(k) = keep;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max(std::abs(fd), std::abs(grad(k))) + 1e-8;
    worst = std::max(worst, std::abs(fd - grad(k)) / denom);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("negative log-likelihood conventions") {
  Rng rng(3);
  const FlowModel m(FlowArchitecture{2}, Standardizer::identity(2), rng);
  const Eigen::MatrixXd x = rng.normal_matrix(100000, 2);
  const double entropy = 2.0 / 2.0 * (1.0 + std::log(2.0 * M_PI));
  CHECK(std::abs(m.nll(x) - entropy) < 0.01 * entropy);

  const FlowModel r = random_flow(2, 8, 2, 4);
  const Eigen::MatrixXd small = rng.normal_matrix(10, 2);
  Eigen::MatrixXd doubled(20, 2);
  doubled << small, small;
  CHECK(r.nll(doubled) == doctest::Approx(r.nll(small)).epsilon(1e-12));
}

TEST_CASE("blocks are autoregressive under their ordering") {
  // Zeroing block 0 leaves block 1 (reversed order) as the only nonlinear part.
  FlowModel m = random_flow(4, 12, 2, 8);
  const MadeBlock& b0 = m.blocks()[0];
  m.parameters().segment(b0.off_w1, b0.parameter_count()).setZero();
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd x = rng.normal_vector(4);
    // Standardizer is diagonal so the sparsity pattern survives it.
    const Eigen::MatrixXd jac = numerical_jacobian(m, x, 1e-6);
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < i; ++j) CHECK(std::abs(jac(i, j)) < 1e-8);
  }

  FlowModel single = random_flow(4, 12, 1, 9);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd x = rng.normal_vector(4);
    const Eigen::MatrixXd jac = numerical_jacobian(single, x, 1e-6);
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = i + 1; j < 4; ++j) CHECK(std::abs(jac(i, j)) < 1e-8);
  }
}

TEST_CASE("analytic log det matches the numerical Jacobian") {
  Rng rng(10);
  for (Eigen::Index d = 1; d <= 5; ++d) {
    const FlowModel m = random_flow(d, 10, 4, 30 + static_cast<std::uint64_t>(d));
    for (int trial = 0; trial < 4; ++trial) {
      const Eigen::VectorXd x = rng.normal_vector(d);
      const double analytic = m.forward(x.transpose()).log_det(0);
      const double numeric = std::log(std::abs(numerical_jacobian(m, x, 1e-5).determinant()));
      CHECK(std::abs(analytic - numeric) < 1e-5);
    }
  }
}

TEST_CASE("log-scale outputs are soft-clamped") {
  FlowModel m = random_flow(2, 8, 1, 3, 0.0);
  const MadeBlock& blk = m.blocks()[0];
  m.parameters().segment(blk.off_bs, 2).setConstant(1e6);
  const auto f = m.forward(Eigen::MatrixXd::Ones(1, 2));
  CHECK(std::isfinite(f.log_det(0)));
  CHECK(f.log_det(0) >= -2 * 7.0 + m.standardizer().log_det() - 1e-9);
}

TEST_CASE("fitting Gaussian samples gives a Gaussian latent") {
  Rng data_rng(4);
  const Eigen::MatrixXd x = data_rng.normal_matrix(1000, 2);
  Rng rng(7);
  const FlowFit fit = train_flow(x, FlowTrainConfig{}, rng);
  const Eigen::MatrixXd z = fit.model.forward(x).points;
  const Eigen::MatrixXd zc = z.rowwise() - z.colwise().mean();
  const Eigen::MatrixXd cov = zc.transpose() * zc / 999.0;
  CHECK((cov - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 0.15);
  CHECK(fit.diagnostics.best_validation_nll <= fit.diagnostics.initial_validation_nll);
}

TEST_CASE("fitting a banana Gaussianises its marginals") {
  Rng data_rng(11);
  Eigen::MatrixXd x(1000, 2);
  for (Eigen::Index j = 0; j < 1000; ++j) {
    const double a = data_rng.normal();
    x(j, 0) = a;
    x(j, 1) = a * a + 0.2 * data_rng.normal();
  }
  double raw_worst = 0.0;
  for (int c = 0; c < 2; ++c)
    raw_worst = std::max({raw_worst, std::abs(skewness(x.col(c))), std::abs(excess_kurtosis(x.col(c)))});
  CHECK(raw_worst > 1.0);

  Rng rng(12);
  const FlowFit fit = train_flow(x, FlowTrainConfig{}, rng);
  const Eigen::MatrixXd z = fit.model.forward(x).points;
  for (int c = 0; c < 2; ++c) {
    CHECK(std::abs(skewness(z.col(c))) < 0.5);
    CHECK(std::abs(excess_kurtosis(z.col(c))) < 0.5);
  }
  const auto& hist = fit.diagnostics.validation_history;
  for (std::size_t i = 1; i < hist.size(); ++i) CHECK(hist[i] <= hist[i - 1]);
  CHECK(fit.diagnostics.best_validation_nll < fit.diagnostics.initial_validation_nll);

  const auto back = fit.model.inverse(z);
  CHECK((back.points - x).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("training is deterministic and validates input") {
  Rng d(1);
  const Eigen::MatrixXd x = d.normal_matrix(60, 3);
  FlowTrainConfig cfg;
  cfg.max_epochs = 20;
  Rng a(9), b(9);
  CHECK(fit_flow(x, cfg, a).parameters() == fit_flow(x, cfg, b).parameters());

  Rng r(0);
  CHECK_THROWS_AS(fit_flow(Eigen::MatrixXd::Zero(1, 2), cfg, r), DegenerateEnsemble);
  const FlowFit small = train_flow(d.normal_matrix(5, 3), cfg, r);
  CHECK(small.diagnostics.small_ensemble_warning);

  cfg.max_epochs = 0;
  cfg.standardize = false;
  const FlowModel untrained = fit_flow(x, cfg, r);
  CHECK((untrained.forward(x).points - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("checkpoint round trip") {
  const FlowModel m = random_flow(3, 8, 3, 14);
  std::stringstream ss;
  m.save(ss);
  const FlowModel back = FlowModel::load(ss);
  CHECK(back.parameters() == m.parameters());
  CHECK(back.standardizer().scale == m.standardizer().scale);
  Rng rng(1);
  const Eigen::MatrixXd x = rng.normal_matrix(7, 3);
  CHECK(back.forward(x).points == m.forward(x).points);

  std::stringstream bad("NOTAFLOWFILE");
  CHECK_THROWS_AS(FlowModel::load(bad), FormatError);
}
