#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "faki/random.hpp"

namespace faki {

/// Per-dimension affine pre-whitening applied ahead of the autoregressive blocks.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer identity(Eigen::Index d);
  /// Scales are floored at 1e-8 of the largest per-dimension scale.
  static Standardizer fit(const Eigen::MatrixXd& samples);

  Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd inverse(const Eigen::MatrixXd& z) const;
  /// log|det| of the x -> z map (constant).
  double log_det() const;
};

/// Layout of one masked autoregressive block inside the flat parameter vector.
///
/// The block permutes its input with `order` (v_i = u_{order[i]}), applies a
/// MADE-conditioned affine map z_i = (v_i - mu_i(v_<i)) exp(-s_i(v_<i)), and
/// writes z_i back to position order[i]. Log-scales are soft-clamped to +-7.
struct MadeBlock {
  Eigen::Index d = 0;
  Eigen::Index hidden = 0;
  std::vector<Eigen::Index> order;
  Eigen::MatrixXd mask_in;   // hidden x d
  Eigen::MatrixXd mask_out;  // d x hidden
  // Offsets into the flow parameter vector.
  Eigen::Index off_w1 = 0, off_b1 = 0, off_wmu = 0, off_bmu = 0, off_ws = 0, off_bs = 0;

  Eigen::Index parameter_count() const { return 3 * d * hidden + hidden + 2 * d; }
};

struct FlowArchitecture {
  Eigen::Index d = 0;
  int blocks = 4;
  Eigen::Index hidden = 0;  // 0 selects max(32, 2d)
};

/// Masked autoregressive flow: standardizer followed by L MADE blocks.
/// The x -> z direction is a single pass; z -> x is sequential per dimension.
class FlowModel {
 public:
  FlowModel() = default;
  /// Identity-initialised flow: zero output heads, small random hidden weights.
  FlowModel(const FlowArchitecture& arch, Standardizer standardizer, Rng& rng);

  Eigen::Index dim() const { return arch_.d; }
  const FlowArchitecture& architecture() const { return arch_; }
  const Standardizer& standardizer() const { return standardizer_; }
  const std::vector<MadeBlock>& blocks() const { return blocks_; }

  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& parameters() { return params_; }
  Eigen::Index parameter_count() const { return params_.size(); }

  struct Mapped {
    Eigen::MatrixXd points;   // B x d
    Eigen::VectorXd log_det;  // B
  };

  /// Rows of x mapped to latent space with log|det Df|.
  Mapped forward(const Eigen::MatrixXd& x) const;
  /// Rows of z mapped back to data space with log|det Df^{-1}|.
  Mapped inverse(const Eigen::MatrixXd& z) const;

  /// Mean negative log density of the batch.
  double nll(const Eigen::MatrixXd& batch) const;
  /// Mean negative log density and its exact gradient w.r.t. parameters().
  double nll_and_gradient(const Eigen::MatrixXd& batch, Eigen::VectorXd& grad) const;

  /// Versioned binary checkpoint: architecture, standardizer, block orders, flat parameters.
  void save(std::ostream& os) const;
  static FlowModel load(std::istream& is);
  void save(const std::string& path) const;
  static FlowModel load(const std::string& path);

 private:
  void build_blocks();

  FlowArchitecture arch_;
  Standardizer standardizer_;
  std::vector<MadeBlock> blocks_;
  Eigen::VectorXd params_;
};

struct FlowTrainConfig {
  FlowArchitecture arch;  // d is taken from the samples
  double learning_rate = 1e-3;
  Eigen::Index batch_size = 128;
  int max_epochs = 500;
  int patience = 30;
  double validation_fraction = 0.2;
  bool standardize = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct FlowFitDiagnostics {
  int epochs_run = 0;
  int best_epoch = 0;
  double initial_validation_nll = 0.0;
  double best_validation_nll = 0.0;
  std::vector<double> validation_history;  // best-so-far after each epoch
  bool small_ensemble_warning = false;
};

struct FlowFit {
  FlowModel model;
  FlowFitDiagnostics diagnostics;
};

/// Train a flow on `samples` (J x d) by Adam on an 80/20 split with early
/// stopping; returns the best-validation parameters.
FlowFit train_flow(const Eigen::MatrixXd& samples, const FlowTrainConfig& config, Rng& rng);

inline FlowModel fit_flow(const Eigen::MatrixXd& samples, const FlowTrainConfig& config, Rng& rng) {
  return train_flow(samples, config, rng).model;
}

}  // namespace faki
