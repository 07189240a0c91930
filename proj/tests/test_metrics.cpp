#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "faki/errors.hpp"
#include "faki/metrics.hpp"
#include "faki/random.hpp"

using namespace faki;

namespace {

double brute_force_w1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  std::vector<int> perm(static_cast<std::size_t>(a.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double c = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) c += (a.row(i) - b.row(perm[i])).norm();
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(a.rows());
}

Eigen::MatrixXd shuffled_rows(const Eigen::MatrixXd& m, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace

TEST_CASE("W1 hand examples") {
  Eigen::MatrixXd a(2, 1), b(2, 1);
  a << 0.0, 1.0;
  b << 1.0, 2.0;
  CHECK(wasserstein1(a, b) == doctest::Approx(1.0));

  Rng rng(1);
  const Eigen::MatrixXd x = rng.normal_matrix(30, 3);
  CHECK(wasserstein1(x, shuffled_rows(x, rng)) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("assignment equals brute force on small instances") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 1 + trial % 6;
    const Eigen::Index d = 1 + trial % 3;
    const Eigen::MatrixXd a = rng.normal_matrix(n, d);
    const Eigen::MatrixXd b = rng.normal_matrix(n, d);
    CHECK(std::abs(wasserstein1(a, b) - brute_force_w1(a, b)) < 1e-10);
  }
}

TEST_CASE("W1 metric properties") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd a = rng.normal_matrix(25, 2);
    const Eigen::MatrixXd b = rng.normal_matrix(25, 2) * 1.5;
    const Eigen::MatrixXd c = rng.normal_matrix(25, 2).array() + 0.5;
    const double ab = wasserstein1(a, b);
    CHECK(std::abs(ab - wasserstein1(b, a)) < 1e-12);
    CHECK(ab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-12);
    CHECK(ab > 0.0);

    const Eigen::RowVector2d shift(3.0, -7.0);
    CHECK(std::abs(wasserstein1(a.rowwise() + shift, b.rowwise() + shift) - ab) < 1e-10);
    CHECK(std::abs(wasserstein1(2.5 * a, 2.5 * b) - 2.5 * ab) < 1e-10);
    CHECK(std::abs(wasserstein1(shuffled_rows(a, rng), shuffled_rows(b, rng)) - ab) < 1e-10);
  }
}

TEST_CASE("W1 rejects mismatched inputs") {
  CHECK_THROWS_AS(wasserstein1(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(4, 2)), SizeMismatch);
  CHECK_THROWS_AS(wasserstein1(Eigen::MatrixXd::Zero(0, 2), Eigen::MatrixXd::Zero(0, 2)), EmptyInput);
}

TEST_CASE("moment comparison") {
  Rng rng(4);
  const Eigen::MatrixXd x = rng.normal_matrix(50, 3);
  const MomentTable same = moment_comparison(x, x);
  CHECK(same.mean_gap.cwiseAbs().maxCoeff() == 0.0);
  CHECK(same.sd_rel_gap.cwiseAbs().maxCoeff() == 0.0);

  Eigen::MatrixXd two(2, 2);
  two << 0.0, 5.0, 2.0, 5.0;
  const MomentTable t = moment_comparison(two, x.leftCols(2));
  CHECK(t.mean(0) == doctest::Approx(1.0));
  CHECK(t.sd(0) == doctest::Approx(std::sqrt(2.0)));
  CHECK(t.sd(1) == 0.0);
}

TEST_CASE("median and MAD aggregation") {
  auto rows = [](std::vector<double> v) {
    std::vector<MetricReport> out;
    for (double x : v) {
      MetricReport r;
      r.n_iter = static_cast<long>(x);
      r.w1 = x;
      out.push_back(r);
    }
    return out;
  };
  const AggregateReport single = aggregate(rows({7.0}));
  CHECK(single.median_w1 == 7.0);
  CHECK(single.mad_w1 == 0.0);

  const AggregateReport spread = aggregate(rows({1, 2, 3, 4, 100}));
  CHECK(spread.median_n_iter == 3.0);
  CHECK(spread.mad_n_iter == 1.0);
  CHECK(spread.median_w1 == 3.0);

  const AggregateReport flat = aggregate(rows({4, 4, 4}));
  CHECK(flat.mad_w1 == 0.0);

  CHECK(median({1.0, 2.0, 3.0, 10.0}) == 2.5);
  CHECK_THROWS_AS(aggregate({}), EmptyInput);
}
