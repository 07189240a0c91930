#include "faki/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "faki/errors.hpp"

namespace faki {

Assignment solve_assignment(const Eigen::MatrixXd& cost) {
  const Eigen::Index n = cost.rows();
  if (cost.cols() != n) throw SizeMismatch("assignment needs a square cost matrix");
  Assignment out;
  if (n == 0) return out;
  if (!cost.allFinite()) throw NonFinite("assignment cost matrix is non-finite");

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is a virtual column holding the row being inserted.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<Eigen::Index> match(n + 1, 0), way(n + 1, 0);
  for (Eigen::Index row = 1; row <= n; ++row) {
    match[0] = row;
    Eigen::Index col0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const Eigen::Index r = match[col0];
      double delta = kInf;
      Eigen::Index col1 = 0;
      for (Eigen::Index c = 1; c <= n; ++c) {
        if (used[c]) continue;
        const double reduced = cost(r - 1, c - 1) - u[r] - v[c];
        if (reduced < minv[c]) {
          minv[c] = reduced;
          way[c] = col0;
        }
        if (minv[c] < delta) {
          delta = minv[c];
          col1 = c;
        }
      }
      for (Eigen::Index c = 0; c <= n; ++c) {
        if (used[c]) {
          u[match[c]] += delta;
          v[c] -= delta;
        } else {
          minv[c] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const Eigen::Index col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }

  out.row_to_col.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index c = 1; c <= n; ++c) out.row_to_col[static_cast<std::size_t>(match[c] - 1)] = c - 1;
  for (Eigen::Index r = 0; r < n; ++r) out.cost += cost(r, out.row_to_col[static_cast<std::size_t>(r)]);
  return out;
}

double wasserstein1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw SizeMismatch("W1 needs two sample sets of equal size and dimension");
  const Eigen::Index n = a.rows();
  if (n < 1) throw EmptyInput("W1 needs at least one sample");
  Eigen::MatrixXd cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).norm();
  return solve_assignment(cost).cost / static_cast<double>(n);
}

namespace {

void column_moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& sd) {
  mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  sd = (centered.colwise().squaredNorm() / static_cast<double>(x.rows() - 1)).cwiseSqrt().transpose();
}

Eigen::VectorXd relative(const Eigen::VectorXd& gap, const Eigen::VectorXd& ref) {
  Eigen::VectorXd out(gap.size());
  for (Eigen::Index i = 0; i < gap.size(); ++i)
    out(i) = gap(i) == 0.0 ? 0.0 : gap(i) / std::abs(ref(i));
  return out;
}

}  // namespace

MomentTable moment_comparison(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& reference) {
  if (samples.rows() < 2 || reference.rows() < 2) throw EmptyInput("moment comparison needs at least two rows");
  if (samples.cols() != reference.cols()) throw SizeMismatch("moment comparison dimension mismatch");
  MomentTable t;
  column_moments(samples, t.mean, t.sd);
  column_moments(reference, t.reference_mean, t.reference_sd);
  t.mean_gap = (t.mean - t.reference_mean).cwiseAbs();
  t.sd_gap = (t.sd - t.reference_sd).cwiseAbs();
  t.mean_rel_gap = relative(t.mean_gap, t.reference_mean);
  t.sd_rel_gap = relative(t.sd_gap, t.reference_sd);
  return t;
}

double median(std::vector<double> values) {
  if (values.empty()) throw EmptyInput("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double median_absolute_deviation(const std::vector<double>& values) {
  const double m = median(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double v : values) dev.push_back(std::abs(v - m));
  return median(std::move(dev));
}

AggregateReport aggregate(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw EmptyInput("aggregate needs at least one report");
  std::vector<double> iters, w1;
  for (const auto& r : reports) {
    iters.push_back(static_cast<double>(r.n_iter));
    w1.push_back(r.w1);
  }
  AggregateReport out;
  out.median_n_iter = median(iters);
  out.mad_n_iter = median_absolute_deviation(iters);
  out.median_w1 = median(w1);
  out.mad_w1 = median_absolute_deviation(w1);
  out.rows = reports;
  return out;
}

}  // namespace faki
