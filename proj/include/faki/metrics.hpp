#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace faki {

/// Minimum-cost perfect matching on a square cost matrix.
struct Assignment {
  std::vector<Eigen::Index> row_to_col;
  double cost = 0.0;
};

/// Shortest augmenting path with dual potentials (Hungarian method), O(n^3).
Assignment solve_assignment(const Eigen::MatrixXd& cost);

/// Exact W1 between the uniform empirical measures on the rows of a and b
/// (equal counts), Euclidean ground cost.
double wasserstein1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct MomentTable {
  Eigen::VectorXd mean, sd;                  // samples
  Eigen::VectorXd reference_mean, reference_sd;
  Eigen::VectorXd mean_gap, sd_gap;          // absolute
  Eigen::VectorXd mean_rel_gap, sd_rel_gap;  // relative to the reference value
};

MomentTable moment_comparison(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& reference);

struct MetricReport {
  std::string method;
  std::uint64_t seed = 0;
  long n_iter = 0;
  double w1 = 0.0;
  MomentTable moments;
};

struct AggregateReport {
  double median_n_iter = 0.0;
  double mad_n_iter = 0.0;
  double median_w1 = 0.0;
  double mad_w1 = 0.0;
  std::vector<MetricReport> rows;
};

double median(std::vector<double> values);
/// Median absolute deviation from the median (unscaled).
double median_absolute_deviation(const std::vector<double>& values);

AggregateReport aggregate(const std::vector<MetricReport>& reports);

}  // namespace faki
