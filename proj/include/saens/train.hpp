#pragma once

// Adam with a unit-norm decoder constraint, and the single-SAE training loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "saens/activation_data.hpp"
#include "saens/sae.hpp"

namespace saens {

struct TrainConfig {
  double learning_rate = 0.0003;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 10000;  // capped at the dataset size
  Index epochs = 1;
  std::uint64_t seed = 0;  // data-order seed
  double lambda = 0.75;
  double warmup_fraction = 0.05;
  Index log_interval = 50;  // steps per log row
  bool shuffle = true;

  void validate() const {
    require(learning_rate > 0.0, "train config: learning_rate must be positive");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "train config: adam_beta1 must lie in [0,1)");
    require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "train config: adam_beta2 must lie in [0,1)");
    require(adam_eps > 0.0, "train config: adam_eps must be positive");
    require(batch_size >= 1, "train config: batch_size must be >= 1");
    require(epochs >= 1, "train config: epochs must be >= 1");
    require(lambda >= 0.0, "train config: lambda must be non-negative");
    require(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "train config: warmup_fraction must lie in [0,1]");
    require(log_interval >= 1, "train config: log_interval must be >= 1");
  }
};

struct AdamState {
  SaeTensors m;
  SaeTensors v;
  long step = 0;

  static AdamState for_params(const SaeParams& p) { return {SaeTensors::zeros_like(p), SaeTensors::zeros_like(p), 0}; }
};

namespace detail {

template <typename T>
void adam_update(T& param, const T& grad, T& m, T& v, double lr, double b1, double b2, double eps, long t) {
  m = b1 * m + (1.0 - b1) * grad;
  v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

}  // namespace detail

// One Adam step with bias correction. Afterwards decoder columns are put back on
// the unit sphere and the decoder first moment is re-projected onto the tangent
// space of the renormalized columns.
inline void adam_step(SaeParams& params, const SaeTensors& grads, AdamState& state, const TrainConfig& cfg) {
  ++state.step;
  const double lr = cfg.learning_rate, b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_eps;
  detail::adam_update(params.w_enc, grads.w_enc, state.m.w_enc, state.v.w_enc, lr, b1, b2, eps, state.step);
  detail::adam_update(params.b_enc, grads.b_enc, state.m.b_enc, state.v.b_enc, lr, b1, b2, eps, state.step);
  detail::adam_update(params.w_dec, grads.w_dec, state.m.w_dec, state.v.w_dec, lr, b1, b2, eps, state.step);
  detail::adam_update(params.b_dec, grads.b_dec, state.m.b_dec, state.v.b_dec, lr, b1, b2, eps, state.step);
  if (params.activation.kind == ActivationKind::jumprelu) {
    detail::adam_update(params.activation.theta, grads.theta, state.m.theta, state.v.theta, lr, b1, b2, eps,
                        state.step);
    params.activation.theta = params.activation.theta.cwiseMax(0.0);
  }
  normalize_columns(params.w_dec);
  project_to_tangent(params.w_dec, state.m.w_dec);
}

struct TrainLogRow {
  Index step = 0;
  Index epoch = 0;
  double lambda = 0.0;
  double total_loss = 0.0;
  double recon_loss = 0.0;
  double sparsity_term = 0.0;
  double mean_l0 = 0.0;
  double ev_estimate = 0.0;
  Index dead_features = 0;  // features inactive on every sample of the interval
};

struct TrainResult {
  SaeParams params;
  std::vector<TrainLogRow> log;
};

// Maps a raw activation batch to the training target (identity for plain SAEs,
// the residual of the frozen prefix for boosting members).
using BatchTransform = std::function<Matrix(const Matrix&)>;

namespace detail {

// Accumulates per-interval statistics for one log row.
class IntervalStats {
 public:
  explicit IntervalStats(Index d, Index k) : sse_(Vector::Zero(d)), sum_(Vector::Zero(d)), sumsq_(Vector::Zero(d)),
                                             active_(k, 0) {}

  void add(const Matrix& target, const Matrix& recon, const Matrix& codes, const LossTerms& loss) {
    const double b = static_cast<double>(target.rows());
    sse_ += (target - recon).array().square().colwise().sum().transpose().matrix();
    sum_ += target.colwise().sum().transpose();
    sumsq_ += target.array().square().colwise().sum().transpose().matrix();
    n_ += target.rows();
    total_ += loss.total * b;
    recon_ += loss.recon * b;
    sparsity_ += loss.sparsity * b;
    l0_ += static_cast<double>((codes.array() != 0.0).count());
    for (Index j = 0; j < codes.cols(); ++j)
      if (!active_[static_cast<std::size_t>(j)] && (codes.col(j).array() != 0.0).any()) active_[static_cast<std::size_t>(j)] = 1;
  }

  bool empty() const { return n_ == 0; }

  TrainLogRow emit(Index step, Index epoch, double lambda) {
    const double n = static_cast<double>(n_);
    TrainLogRow row;
    row.step = step;
    row.epoch = epoch;
    row.lambda = lambda;
    row.total_loss = total_ / n;
    row.recon_loss = recon_ / n;
    row.sparsity_term = sparsity_ / n;
    row.mean_l0 = l0_ / n;
    double ev = 0.0;
    Index dims = 0;
    for (Index q = 0; q < sse_.size(); ++q) {
      const double sst = sumsq_(q) - sum_(q) * sum_(q) / n;
      if (sst > 0.0) {
        ev += 1.0 - sse_(q) / sst;
        ++dims;
      }
    }
    row.ev_estimate = dims > 0 ? ev / static_cast<double>(dims) : 0.0;
    row.dead_features = static_cast<Index>(std::count(active_.begin(), active_.end(), 0));
    *this = IntervalStats(sse_.size(), static_cast<Index>(active_.size()));
    return row;
  }

 private:
  Vector sse_, sum_, sumsq_;
  std::vector<char> active_;
  Index n_ = 0;
  double total_ = 0.0, recon_ = 0.0, sparsity_ = 0.0, l0_ = 0.0;
};

}  // namespace detail

// Streaming mean of transform(batch) over the dataset.
inline Vector transformed_mean(const ActivationDataset& data, const BatchTransform& transform, Index batch_size = 4096) {
  require(!data.empty(), "mean of an empty dataset");
  Vector mean = Vector::Zero(data.dim());
  Index seen = 0;
  BatchStream stream(data, batch_size);
  Matrix batch;
  while (stream.next(batch)) {
    const Matrix t = transform ? transform(batch) : batch;
    seen += t.rows();
    mean += (t.colwise().mean().transpose() - mean) * (static_cast<double>(t.rows()) / static_cast<double>(seen));
  }
  return mean;
}

inline Index total_steps(const ActivationDataset& data, const TrainConfig& cfg) {
  const Index b = std::min(cfg.batch_size, data.count());
  return cfg.epochs * ((data.count() + b - 1) / b);
}

// Trains one SAE from an existing initialization.
inline TrainResult train_from(const ActivationDataset& data, const TrainConfig& cfg, SaeParams params,
                              const BatchTransform& transform = {}) {
  cfg.validate();
  require(!data.empty(), "train_sae: empty dataset");
  params.validate();
  require_dims(params.dim(), data.dim(), "train_sae data");
  const Index batch_size = std::min(cfg.batch_size, data.count());
  const Index steps = total_steps(data, cfg);
  const auto warmup_steps = static_cast<double>(steps) * cfg.warmup_fraction;

  AdamState state = AdamState::for_params(params);
  TrainResult result;
  detail::IntervalStats stats(params.dim(), params.dict_size());
  Index step = 0;
  Matrix batch;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::optional<std::uint64_t> order_seed;
    if (cfg.shuffle) order_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
    BatchStream stream(data, batch_size, order_seed);
    while (stream.next(batch)) {
      const Matrix target = transform ? transform(batch) : batch;
      const double ramp = warmup_steps > 0.0 ? std::min(1.0, static_cast<double>(step + 1) / warmup_steps) : 1.0;
      const double lambda = cfg.lambda * ramp;

      const Matrix codes = encode(params, target);
      const Matrix recon = decode(params, codes);
      LossTerms loss;
      const double b = static_cast<double>(target.rows());
      loss.recon = (target - recon).squaredNorm() / b;
      loss.sparsity = (params.activation.kind == ActivationKind::topk ? 0.0 : lambda) *
                      code_norm(codes, params.p_norm()) / b;
      loss.total = loss.recon + loss.sparsity;
      if (!std::isfinite(loss.total)) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss is not finite)");
      }
      stats.add(target, recon, codes, loss);

      GradientOptions opt;
      opt.lambda = lambda;
      const SaeTensors grads = loss_gradients(params, target, opt);
      adam_step(params, grads, state, cfg);
      ++step;
      if (step % cfg.log_interval == 0 || step == steps) {
        result.log.push_back(stats.emit(step, epoch, lambda));
      }
    }
  }
  if (!all_finite(params.w_enc) || !all_finite(params.w_dec) || !all_finite(params.b_enc) || !all_finite(params.b_dec)) {
    throw DivergenceError("training produced non-finite parameters");
  }
  params.lambda = cfg.lambda;
  result.params = std::move(params);
  return result;
}

// Initializes (b_dec from the training-target mean) and trains one SAE.
inline TrainResult train_sae(const ActivationDataset& data, const TrainConfig& cfg, const Activation& activation,
                             Index k, std::uint64_t init_seed, const BatchTransform& transform = {}) {
  cfg.validate();
  require(!data.empty(), "train_sae: empty dataset");
  std::optional<Vector> mean;
  if (transform) {
    mean = transformed_mean(data, transform);
  } else if (data.cached_mean()) {
    mean = *data.cached_mean();
  } else {
    mean = compute_per_dim_mean(data);
  }
  SaeParams init = init_sae(data.dim(), k, activation, init_seed, cfg.lambda, mean);
  return train_from(data, cfg, std::move(init), transform);
}

}  // namespace saens
