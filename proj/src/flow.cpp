#include "faki/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

#include "faki/errors.hpp"

namespace faki {

namespace {

constexpr double kLogScaleClamp = 7.0;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

struct BlockWeights {
  Eigen::MatrixXd w1;   // hidden x d, masked
  Eigen::VectorXd b1;
  Eigen::MatrixXd wmu;  // d x hidden, masked
  Eigen::VectorXd bmu;
  Eigen::MatrixXd ws;   // d x hidden, masked
  Eigen::VectorXd bs;
};

BlockWeights effective_weights(const MadeBlock& blk, const Eigen::VectorXd& p) {
  const double* data = p.data();
  BlockWeights w;
  w.w1 = ConstMap(data + blk.off_w1, blk.hidden, blk.d).cwiseProduct(blk.mask_in);
  w.b1 = ConstVecMap(data + blk.off_b1, blk.hidden);
  w.wmu = ConstMap(data + blk.off_wmu, blk.d, blk.hidden).cwiseProduct(blk.mask_out);
  w.bmu = ConstVecMap(data + blk.off_bmu, blk.d);
  w.ws = ConstMap(data + blk.off_ws, blk.d, blk.hidden).cwiseProduct(blk.mask_out);
  w.bs = ConstVecMap(data + blk.off_bs, blk.d);
  return w;
}

Eigen::MatrixXd permute_columns(const Eigen::MatrixXd& u, const std::vector<Eigen::Index>& order) {
  Eigen::MatrixXd v(u.rows(), u.cols());
  for (std::size_t i = 0; i < order.size(); ++i) v.col(static_cast<Eigen::Index>(i)) = u.col(order[i]);
  return v;
}

Eigen::MatrixXd unpermute_columns(const Eigen::MatrixXd& v, const std::vector<Eigen::Index>& order) {
  Eigen::MatrixXd u(v.rows(), v.cols());
  for (std::size_t i = 0; i < order.size(); ++i) u.col(order[i]) = v.col(static_cast<Eigen::Index>(i));
  return u;
}

// Intermediate values of one block kept for the backward pass.
struct BlockTape {
  Eigen::MatrixXd v;       // permuted input
  Eigen::MatrixXd hidden;  // tanh activations
  Eigen::MatrixXd s;       // clamped log-scales
  Eigen::MatrixXd zv;      // permuted output
};

Eigen::MatrixXd block_forward(const MadeBlock& blk, const BlockWeights& w, const Eigen::MatrixXd& u,
                              Eigen::VectorXd& log_det, BlockTape* tape) {
  Eigen::MatrixXd v = permute_columns(u, blk.order);
  Eigen::MatrixXd h = ((v * w.w1.transpose()).rowwise() + w.b1.transpose()).array().tanh().matrix();
  const Eigen::MatrixXd mu = (h * w.wmu.transpose()).rowwise() + w.bmu.transpose();
  const Eigen::MatrixXd raw = (h * w.ws.transpose()).rowwise() + w.bs.transpose();
  Eigen::MatrixXd s = (kLogScaleClamp * (raw.array() / kLogScaleClamp).tanh()).matrix();
  Eigen::MatrixXd zv = ((v - mu).array() * (-s.array()).exp()).matrix();
  log_det -= s.rowwise().sum();
  Eigen::MatrixXd out = unpermute_columns(zv, blk.order);
  if (tape) {
    tape->v = std::move(v);
    tape->hidden = std::move(h);
    tape->s = std::move(s);
    tape->zv = std::move(zv);
  }
  return out;
}

Eigen::MatrixXd block_inverse(const MadeBlock& blk, const BlockWeights& w, const Eigen::MatrixXd& z,
                              Eigen::VectorXd& log_det) {
  const Eigen::MatrixXd zv = permute_columns(z, blk.order);
  const Eigen::Index b = z.rows();
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(b, blk.d);
  // Hidden pre-activations accumulate one input column at a time; units that
  // feed output i only see columns < i, all of which are already solved.
  Eigen::MatrixXd pre = w.b1.transpose().replicate(b, 1);
  for (Eigen::Index i = 0; i < blk.d; ++i) {
    const Eigen::MatrixXd h = pre.array().tanh().matrix();
    const Eigen::VectorXd mu = (h * w.wmu.row(i).transpose()).array() + w.bmu(i);
    const Eigen::VectorXd raw = (h * w.ws.row(i).transpose()).array() + w.bs(i);
    const Eigen::ArrayXd s = kLogScaleClamp * (raw.array() / kLogScaleClamp).tanh();
    v.col(i) = (zv.col(i).array() * s.exp() + mu.array()).matrix();
    log_det += s.matrix();
    pre.noalias() += v.col(i) * w.w1.col(i).transpose();
  }
  return unpermute_columns(v, blk.order);
}

}  // namespace

Standardizer Standardizer::identity(Eigen::Index d) {
  return {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Ones(d)};
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& samples) {
  if (samples.rows() < 2) throw DegenerateEnsemble("standardizer needs at least two samples");
  if (!samples.allFinite()) throw NonFinite("standardizer input is non-finite");
  Standardizer st;
  st.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - st.mean.transpose();
  st.scale = (centered.colwise().squaredNorm() / static_cast<double>(samples.rows() - 1))
                 .cwiseSqrt()
                 .transpose();
  const double largest = st.scale.maxCoeff();
  const double floor = largest > 0.0 ? 1e-8 * largest : 1.0;
  st.scale = st.scale.cwiseMax(floor);
  return st;
}

Eigen::MatrixXd Standardizer::transform(const Eigen::MatrixXd& x) const {
  return ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
}

Eigen::MatrixXd Standardizer::inverse(const Eigen::MatrixXd& z) const {
  return ((z.array().rowwise() * scale.transpose().array()).matrix().rowwise() + mean.transpose());
}

double Standardizer::log_det() const { return -scale.array().log().sum(); }

FlowModel::FlowModel(const FlowArchitecture& arch, Standardizer standardizer, Rng& rng)
    : arch_(arch), standardizer_(std::move(standardizer)) {
  if (arch_.d < 1) throw InvalidConfig("flow dimension must be positive");
  if (arch_.blocks < 1) throw InvalidConfig("flow needs at least one block");
  if (arch_.hidden <= 0) arch_.hidden = std::max<Eigen::Index>(32, 2 * arch_.d);
  if (standardizer_.mean.size() != arch_.d || standardizer_.scale.size() != arch_.d)
    throw SizeMismatch("standardizer dimension does not match flow");
  build_blocks();

  // Hidden layer: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); output heads zero.
  const double bound = 1.0 / std::sqrt(static_cast<double>(arch_.d));
  for (const auto& blk : blocks_) {
    for (Eigen::Index k = 0; k < blk.hidden * blk.d; ++k)
      params_(blk.off_w1 + k) = bound * (2.0 * rng.uniform() - 1.0);
    for (Eigen::Index k = 0; k < blk.hidden; ++k)
      params_(blk.off_b1 + k) = bound * (2.0 * rng.uniform() - 1.0);
  }
}

void FlowModel::build_blocks() {
  const Eigen::Index d = arch_.d;
  const Eigen::Index h = arch_.hidden;
  blocks_.clear();
  Eigen::Index offset = 0;
  const Eigen::Index hidden_span = std::max<Eigen::Index>(1, d - 1);
  for (int l = 0; l < arch_.blocks; ++l) {
    MadeBlock blk;
    blk.d = d;
    blk.hidden = h;
    blk.order.resize(static_cast<std::size_t>(d));
    std::iota(blk.order.begin(), blk.order.end(), Eigen::Index{0});
    if (l % 2 == 1) std::reverse(blk.order.begin(), blk.order.end());

    // Input i has degree i+1; hidden unit k has degree (k mod (d-1)) + 1.
    blk.mask_in.resize(h, d);
    blk.mask_out.resize(d, h);
    for (Eigen::Index k = 0; k < h; ++k) {
      const Eigen::Index deg = (k % hidden_span) + 1;
      for (Eigen::Index i = 0; i < d; ++i) {
        blk.mask_in(k, i) = deg >= i + 1 ? 1.0 : 0.0;
        blk.mask_out(i, k) = i + 1 > deg ? 1.0 : 0.0;
      }
    }
    blk.off_w1 = offset;
    offset += h * d;
    blk.off_b1 = offset;
    offset += h;
    blk.off_wmu = offset;
    offset += d * h;
    blk.off_bmu = offset;
    offset += d;
    blk.off_ws = offset;
    offset += d * h;
    blk.off_bs = offset;
    offset += d;
    blocks_.push_back(std::move(blk));
  }
  params_ = Eigen::VectorXd::Zero(offset);
}

FlowModel::Mapped FlowModel::forward(const Eigen::MatrixXd& x) const {
  if (x.cols() != arch_.d) throw SizeMismatch("flow input has wrong dimension");
  Mapped out;
  out.log_det = Eigen::VectorXd::Constant(x.rows(), standardizer_.log_det());
  out.points = standardizer_.transform(x);
  for (const auto& blk : blocks_)
    out.points = block_forward(blk, effective_weights(blk, params_), out.points, out.log_det, nullptr);
  return out;
}

FlowModel::Mapped FlowModel::inverse(const Eigen::MatrixXd& z) const {
  if (z.cols() != arch_.d) throw SizeMismatch("flow input has wrong dimension");
  Mapped out;
  out.log_det = Eigen::VectorXd::Constant(z.rows(), -standardizer_.log_det());
  out.points = z;
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it)
    out.points = block_inverse(*it, effective_weights(*it, params_), out.points, out.log_det);
  out.points = standardizer_.inverse(out.points);
  return out;
}

double FlowModel::nll(const Eigen::MatrixXd& batch) const {
  if (batch.rows() < 1) throw EmptyInput("nll needs a non-empty batch");
  const Mapped m = forward(batch);
  const double b = static_cast<double>(batch.rows());
  const double value = 0.5 * m.points.squaredNorm() / b + kHalfLog2Pi * static_cast<double>(arch_.d) -
                       m.log_det.sum() / b;
  return value;
}

double FlowModel::nll_and_gradient(const Eigen::MatrixXd& batch, Eigen::VectorXd& grad) const {
  if (batch.rows() < 1) throw EmptyInput("nll needs a non-empty batch");
  if (batch.cols() != arch_.d) throw SizeMismatch("flow input has wrong dimension");
  const Eigen::Index nb = batch.rows();
  const double inv_b = 1.0 / static_cast<double>(nb);

  std::vector<BlockWeights> weights;
  std::vector<BlockTape> tapes(blocks_.size());
  weights.reserve(blocks_.size());
  Eigen::VectorXd log_det = Eigen::VectorXd::Constant(nb, standardizer_.log_det());
  Eigen::MatrixXd u = standardizer_.transform(batch);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    weights.push_back(effective_weights(blocks_[l], params_));
    u = block_forward(blocks_[l], weights[l], u, log_det, &tapes[l]);
  }
  const double value =
      0.5 * u.squaredNorm() * inv_b + kHalfLog2Pi * static_cast<double>(arch_.d) - log_det.sum() * inv_b;
  if (!std::isfinite(value)) throw NonFinite("flow negative log-likelihood is non-finite");

  grad = Eigen::VectorXd::Zero(params_.size());
  Eigen::MatrixXd g_out = u * inv_b;
  for (std::size_t li = blocks_.size(); li-- > 0;) {
    const MadeBlock& blk = blocks_[li];
    const BlockWeights& w = weights[li];
    const BlockTape& t = tapes[li];

    const Eigen::MatrixXd g_zv = permute_columns(g_out, blk.order);
    const Eigen::ArrayXXd e = (-t.s.array()).exp();
    Eigen::MatrixXd g_v = (g_zv.array() * e).matrix();
    const Eigen::MatrixXd g_mu = -g_v;
    // d nll / d s: through z (-z) and through the -sum(s) log-det term (+1/B).
    const Eigen::ArrayXXd g_s = -g_zv.array() * t.zv.array() + inv_b;
    const Eigen::MatrixXd g_raw =
        (g_s * (1.0 - (t.s.array() / kLogScaleClamp).square())).matrix();

    Eigen::Map<Eigen::MatrixXd>(grad.data() + blk.off_wmu, blk.d, blk.hidden) =
        (g_mu.transpose() * t.hidden).cwiseProduct(blk.mask_out);
    Eigen::Map<Eigen::VectorXd>(grad.data() + blk.off_bmu, blk.d) = g_mu.colwise().sum().transpose();
    Eigen::Map<Eigen::MatrixXd>(grad.data() + blk.off_ws, blk.d, blk.hidden) =
        (g_raw.transpose() * t.hidden).cwiseProduct(blk.mask_out);
    Eigen::Map<Eigen::VectorXd>(grad.data() + blk.off_bs, blk.d) = g_raw.colwise().sum().transpose();

    const Eigen::MatrixXd g_h = g_mu * w.wmu + g_raw * w.ws;
    const Eigen::MatrixXd g_pre = (g_h.array() * (1.0 - t.hidden.array().square())).matrix();
    Eigen::Map<Eigen::MatrixXd>(grad.data() + blk.off_w1, blk.hidden, blk.d) =
        (g_pre.transpose() * t.v).cwiseProduct(blk.mask_in);
    Eigen::Map<Eigen::VectorXd>(grad.data() + blk.off_b1, blk.hidden) = g_pre.colwise().sum().transpose();

    g_v.noalias() += g_pre * w.w1;
    g_out = unpermute_columns(g_v, blk.order);
  }
  return value;
}

namespace {

constexpr char kMagic[8] = {'F', 'A', 'K', 'I', 'F', 'L', 'O', 'W'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("truncated flow checkpoint");
  return v;
}

void put_doubles(std::ostream& os, const Eigen::VectorXd& v) {
  put<std::int64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Eigen::VectorXd get_doubles(std::istream& is) {
  const auto n = get<std::int64_t>(is);
  if (n < 0 || n > (std::int64_t{1} << 32)) throw FormatError("bad array length in flow checkpoint");
  Eigen::VectorXd v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw FormatError("truncated flow checkpoint");
  return v;
}

}  // namespace

void FlowModel::save(std::ostream& os) const {
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kFormatVersion);
  put<std::int64_t>(os, arch_.d);
  put<std::int64_t>(os, arch_.blocks);
  put<std::int64_t>(os, arch_.hidden);
  put_doubles(os, standardizer_.mean);
  put_doubles(os, standardizer_.scale);
  for (const auto& blk : blocks_)
    for (auto idx : blk.order) put<std::int64_t>(os, idx);
  put_doubles(os, params_);
  if (!os) throw IoFailure("failed writing flow checkpoint");
}

FlowModel FlowModel::load(std::istream& is) {
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("not a flow checkpoint");
  const auto version = get<std::uint32_t>(is);
  if (version != kFormatVersion)
    throw FormatError("unsupported flow checkpoint version " + std::to_string(version));
  FlowModel m;
  m.arch_.d = get<std::int64_t>(is);
  m.arch_.blocks = static_cast<int>(get<std::int64_t>(is));
  m.arch_.hidden = get<std::int64_t>(is);
  if (m.arch_.d < 1 || m.arch_.blocks < 1 || m.arch_.hidden < 1) throw FormatError("bad flow architecture");
  m.standardizer_.mean = get_doubles(is);
  m.standardizer_.scale = get_doubles(is);
  m.build_blocks();
  for (auto& blk : m.blocks_)
    for (auto& idx : blk.order) {
      const auto stored = get<std::int64_t>(is);
      if (stored != idx) throw FormatError("flow checkpoint block order mismatch");
    }
  m.params_ = get_doubles(is);
  if (m.params_.size() != m.parameter_count() || m.standardizer_.mean.size() != m.arch_.d ||
      m.standardizer_.scale.size() != m.arch_.d)
    throw FormatError("flow checkpoint sizes are inconsistent");
  return m;
}

void FlowModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoFailure("cannot open " + path);
  save(os);
}

FlowModel FlowModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoFailure("cannot open " + path);
  return load(is);
}

namespace {

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx,
                            std::size_t begin, std::size_t end) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(end - begin), m.cols());
  for (std::size_t r = begin; r < end; ++r) out.row(static_cast<Eigen::Index>(r - begin)) = m.row(idx[r]);
  return out;
}

void shuffle(std::vector<Eigen::Index>& v, Rng& rng) {
  // Fisher-Yates with an explicit draw so the sequence is fixed across stdlibs.
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

FlowFit train_flow(const Eigen::MatrixXd& samples, const FlowTrainConfig& config, Rng& rng) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n < 2) throw DegenerateEnsemble("flow training needs at least two samples");
  if (!samples.allFinite()) throw NonFinite("flow training samples are non-finite");
  if (!(config.validation_fraction > 0.0 && config.validation_fraction < 1.0))
    throw InvalidConfig("validation fraction must lie in (0, 1)");

  FlowFit fit;
  if (n < 2 * d) {
    fit.diagnostics.small_ensemble_warning = true;
    std::clog << "warning: fitting a " << d << "-dimensional flow to only " << n
              << " samples; expect a poor map\n";
  }

  FlowArchitecture arch = config.arch;
  arch.d = d;
  Standardizer st = config.standardize ? Standardizer::fit(samples) : Standardizer::identity(d);
  FlowModel model(arch, std::move(st), rng);

  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  shuffle(idx, rng);
  auto n_val = static_cast<Eigen::Index>(std::llround(config.validation_fraction * static_cast<double>(n)));
  n_val = std::clamp<Eigen::Index>(n_val, 1, n - 1);
  const Eigen::Index n_train = n - n_val;
  const Eigen::MatrixXd val = gather_rows(samples, idx, static_cast<std::size_t>(n_train), idx.size());
  std::vector<Eigen::Index> train(idx.begin(), idx.begin() + n_train);

  const Eigen::Index batch = std::max<Eigen::Index>(1, std::min(n_train, config.batch_size));
  Eigen::VectorXd best = model.parameters();
  double best_val = model.nll(val);
  if (!std::isfinite(best_val)) throw TrainingDiverged("initial validation loss is non-finite");
  fit.diagnostics.initial_validation_nll = best_val;

  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(model.parameter_count());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(model.parameter_count());
  Eigen::VectorXd grad;
  long step = 0;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle(train, rng);
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t stop = std::min(train.size(), start + static_cast<std::size_t>(batch));
      const Eigen::MatrixXd xb = gather_rows(samples, train, start, stop);
      double loss = 0.0;
      try {
        loss = model.nll_and_gradient(xb, grad);
      } catch (const NonFinite&) {
        throw TrainingDiverged("flow training loss became non-finite");
      }
      if (!std::isfinite(loss) || !grad.allFinite()) throw TrainingDiverged("flow training loss became non-finite");
      ++step;
      m1 = config.adam_beta1 * m1 + (1.0 - config.adam_beta1) * grad;
      m2 = config.adam_beta2 * m2 + (1.0 - config.adam_beta2) * grad.cwiseAbs2();
      const double c1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
      model.parameters().array() -=
          config.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.adam_eps);
    }
    const double v = model.nll(val);
    if (!std::isfinite(v)) throw TrainingDiverged("flow validation loss became non-finite");
    fit.diagnostics.epochs_run = epoch;
    if (v < best_val) {
      best_val = v;
      best = model.parameters();
      fit.diagnostics.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      fit.diagnostics.validation_history.push_back(best_val);
      break;
    }
    fit.diagnostics.validation_history.push_back(best_val);
  }
  model.parameters() = best;
  fit.diagnostics.best_validation_nll = best_val;
  fit.model = std::move(model);
  return fit;
}

}  // namespace faki
