#pragma once

// Sparse autoencoder model: g(a) = W_dec h(W_enc a + b_enc) + b_dec.
//
// Batches are B x d matrices with one sample per row. Codes are B x k.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "saens/common.hpp"

namespace saens {

enum class ActivationKind { relu, topk, jumprelu };

inline std::string to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::topk: return "topk";
    case ActivationKind::jumprelu: return "jumprelu";
  }
  return "?";
}

inline ActivationKind activation_kind_from_string(const std::string& s) {
  if (s == "relu") return ActivationKind::relu;
  if (s == "topk") return ActivationKind::topk;
  if (s == "jumprelu") return ActivationKind::jumprelu;
  throw ValidationError("unknown activation kind '" + s + "'");
}

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  Index topk = 0;            // K, topk only
  Vector theta;              // per-feature thresholds, jumprelu only
  double bandwidth = 0.001;  // straight-through kernel width, jumprelu only

  static Activation relu() { return {}; }
  static Activation top_k(Index k) { return {ActivationKind::topk, k, {}, 0.001}; }
  static Activation jump_relu(Vector theta, double bandwidth = 0.001) {
    return {ActivationKind::jumprelu, 0, std::move(theta), bandwidth};
  }

  // Loss norm order implied by the activation: L0 for JumpReLU, L1 otherwise.
  int p_norm() const { return kind == ActivationKind::jumprelu ? 0 : 1; }
};

struct SaeParams {
  Matrix w_enc;  // k x d
  Vector b_enc;  // k
  Matrix w_dec;  // d x k, unit-norm columns (the features)
  Vector b_dec;  // d
  Activation activation;
  double lambda = 0.0;

  Index dim() const { return w_dec.rows(); }
  Index dict_size() const { return w_dec.cols(); }
  int p_norm() const { return activation.p_norm(); }

  // TopK controls sparsity structurally, so its penalty is always zero.
  double effective_lambda() const { return activation.kind == ActivationKind::topk ? 0.0 : lambda; }

  void validate() const {
    const Index d = dim(), k = dict_size();
    require(d >= 1, "sae: dim must be >= 1");
    require(k > d, "sae: dictionary size k must exceed dim d");
    require_dims(w_enc.rows(), k, "sae w_enc rows");
    require_dims(w_enc.cols(), d, "sae w_enc cols");
    require_dims(b_enc.size(), k, "sae b_enc");
    require_dims(b_dec.size(), d, "sae b_dec");
    require(lambda >= 0.0, "sae: lambda must be non-negative");
    switch (activation.kind) {
      case ActivationKind::relu: break;
      case ActivationKind::topk:
        require(activation.topk >= 1 && activation.topk <= k, "sae: topk K must lie in [1, k]");
        break;
      case ActivationKind::jumprelu:
        require_dims(activation.theta.size(), k, "sae jumprelu theta");
        require((activation.theta.array() >= 0.0).all(), "sae: jumprelu theta must be >= 0");
        require(activation.bandwidth > 0.0, "sae: jumprelu bandwidth must be positive");
        break;
    }
  }
};

// Parameter-shaped container used for gradients and optimizer moments.
struct SaeTensors {
  Matrix w_enc;
  Vector b_enc;
  Matrix w_dec;
  Vector b_dec;
  Vector theta;  // empty unless jumprelu

  static SaeTensors zeros_like(const SaeParams& p) {
    SaeTensors t;
    t.w_enc = Matrix::Zero(p.w_enc.rows(), p.w_enc.cols());
    t.b_enc = Vector::Zero(p.b_enc.size());
    t.w_dec = Matrix::Zero(p.w_dec.rows(), p.w_dec.cols());
    t.b_dec = Vector::Zero(p.b_dec.size());
    t.theta = Vector::Zero(p.activation.theta.size());
    return t;
  }
};

// ---------------------------------------------------------------------------
// Forward pass

inline Matrix pre_activations(const SaeParams& sae, const Eigen::Ref<const Matrix>& batch) {
  require_dims(batch.cols(), sae.dim(), "encode input");
  Matrix pre = batch * sae.w_enc.transpose();
  pre.rowwise() += sae.b_enc.transpose();
  return pre;
}

// Indices of the kept coordinates of one pre-activation row under TopK:
// ReLU first, then the K largest values with ties going to the lower index.
inline void topk_support(const Eigen::Ref<const Eigen::RowVectorXd>& pre, Index k,
                         std::vector<Index>& scratch, std::vector<Index>& kept) {
  scratch.resize(static_cast<std::size_t>(pre.size()));
  std::iota(scratch.begin(), scratch.end(), Index{0});
  const auto kk = static_cast<std::ptrdiff_t>(std::min<Index>(k, pre.size()));
  std::partial_sort(scratch.begin(), scratch.begin() + kk, scratch.end(), [&](Index a, Index b) {
    return pre(a) > pre(b) || (pre(a) == pre(b) && a < b);
  });
  kept.clear();
  for (std::ptrdiff_t i = 0; i < kk; ++i) {
    const Index idx = scratch[static_cast<std::size_t>(i)];
    if (pre(idx) > 0.0) kept.push_back(idx);
  }
}

inline Matrix apply_activation(const Activation& act, const Matrix& pre) {
  switch (act.kind) {
    case ActivationKind::relu: return pre.cwiseMax(0.0);
    case ActivationKind::jumprelu: {
      Matrix c = Matrix::Zero(pre.rows(), pre.cols());
      for (Index j = 0; j < pre.cols(); ++j)
        for (Index n = 0; n < pre.rows(); ++n)
          if (pre(n, j) > act.theta(j)) c(n, j) = pre(n, j);
      return c;
    }
    case ActivationKind::topk: {
      Matrix c = Matrix::Zero(pre.rows(), pre.cols());
      std::vector<Index> scratch, kept;
      for (Index n = 0; n < pre.rows(); ++n) {
        topk_support(pre.row(n), act.topk, scratch, kept);
        for (Index i : kept) c(n, i) = pre(n, i);
      }
      return c;
    }
  }
  return pre;
}

inline Matrix encode(const SaeParams& sae, const Eigen::Ref<const Matrix>& batch) {
  return apply_activation(sae.activation, pre_activations(sae, batch));
}

inline Vector encode_one(const SaeParams& sae, const Eigen::Ref<const Vector>& a) {
  require_dims(a.size(), sae.dim(), "encode input");
  Matrix row = a.transpose();
  return encode(sae, row).row(0).transpose();
}

inline Matrix decode(const SaeParams& sae, const Eigen::Ref<const Matrix>& codes) {
  require_dims(codes.cols(), sae.dict_size(), "decode input");
  Matrix out = codes * sae.w_dec.transpose();
  out.rowwise() += sae.b_dec.transpose();
  return out;
}

inline Vector decode_one(const SaeParams& sae, const Eigen::Ref<const Vector>& c) {
  require_dims(c.size(), sae.dict_size(), "decode input");
  return sae.w_dec * c + sae.b_dec;
}

inline Matrix reconstruct(const SaeParams& sae, const Eigen::Ref<const Matrix>& batch) {
  return decode(sae, encode(sae, batch));
}

inline Vector reconstruct_one(const SaeParams& sae, const Eigen::Ref<const Vector>& a) {
  return decode_one(sae, encode_one(sae, a));
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct LossTerms {
  double total = 0.0;
  double recon = 0.0;     // mean squared reconstruction error per sample
  double sparsity = 0.0;  // mean lambda * ||c||_p per sample
};

inline double code_norm(const Eigen::Ref<const Matrix>& codes, int p) {
  if (p == 0) return static_cast<double>((codes.array() != 0.0).count());
  return codes.cwiseAbs().sum();
}

inline LossTerms sae_loss(const SaeParams& sae, const Eigen::Ref<const Matrix>& batch,
                          std::optional<double> lambda_override = std::nullopt) {
  require(batch.rows() >= 1, "sae_loss: empty batch");
  require(all_finite(batch), "sae_loss: batch contains NaN/Inf");
  const Matrix codes = encode(sae, batch);
  const Matrix recon = decode(sae, codes);
  const double b = static_cast<double>(batch.rows());
  const double lambda = sae.activation.kind == ActivationKind::topk ? 0.0
                        : lambda_override                          ? *lambda_override
                                                                   : sae.lambda;
  LossTerms t;
  t.recon = (batch - recon).squaredNorm() / b;
  t.sparsity = lambda * code_norm(codes, sae.p_norm()) / b;
  t.total = t.recon + t.sparsity;
  return t;
}

struct GradientOptions {
  bool project_decoder = true;        // remove the radial part of each decoder-column gradient
  std::optional<double> lambda;       // overrides sae.lambda (used by the warmup schedule)
};

// Projects each column gradient onto the tangent space of the unit sphere at that column.
inline void project_to_tangent(const Matrix& columns, Matrix& grads) {
  for (Index j = 0; j < columns.cols(); ++j) {
    grads.col(j) -= columns.col(j).dot(grads.col(j)) * columns.col(j);
  }
}

// Analytic gradients of sae_loss. ReLU uses subgradient 0 at the kink; TopK
// routes gradient only through kept coordinates; JumpReLU thresholds get a
// rectangle-kernel straight-through pseudo-gradient for both loss terms.
inline SaeTensors loss_gradients(const SaeParams& sae, const Eigen::Ref<const Matrix>& batch,
                                 const GradientOptions& opt = {}) {
  require(batch.rows() >= 1, "loss_gradients: empty batch");
  const double b = static_cast<double>(batch.rows());
  const double lambda = sae.activation.kind == ActivationKind::topk ? 0.0 : opt.lambda.value_or(sae.lambda);
  const Matrix pre = pre_activations(sae, batch);
  const Matrix codes = apply_activation(sae.activation, pre);
  Matrix err = decode(sae, codes) - batch;  // B x d
  err *= 2.0 / b;                           // dL/d(recon)

  SaeTensors g;
  g.w_dec.noalias() = err.transpose() * codes;
  g.b_dec = err.colwise().sum().transpose();
  const Matrix d_codes = err * sae.w_dec;  // B x k, reconstruction path

  Matrix d_pre = Matrix::Zero(pre.rows(), pre.cols());
  switch (sae.activation.kind) {
    case ActivationKind::relu:
      for (Index j = 0; j < pre.cols(); ++j)
        for (Index n = 0; n < pre.rows(); ++n)
          if (pre(n, j) > 0.0) d_pre(n, j) = d_codes(n, j) + lambda / b;
      break;
    case ActivationKind::topk:
      for (Index j = 0; j < pre.cols(); ++j)
        for (Index n = 0; n < pre.rows(); ++n)
          if (codes(n, j) != 0.0) d_pre(n, j) = d_codes(n, j);
      break;
    case ActivationKind::jumprelu: {
      const Vector& theta = sae.activation.theta;
      const double eps = sae.activation.bandwidth;
      g.theta = Vector::Zero(theta.size());
      for (Index j = 0; j < pre.cols(); ++j) {
        for (Index n = 0; n < pre.rows(); ++n) {
          const double x = pre(n, j);
          if (x > theta(j)) d_pre(n, j) = d_codes(n, j);
          if (std::abs(x - theta(j)) < 0.5 * eps) {
            // d/dtheta H(x - theta) ~= -K((x - theta)/eps)/eps with K the unit rectangle
            g.theta(j) -= (d_codes(n, j) * x + lambda / b) / eps;
          }
        }
      }
      break;
    }
  }
  g.w_enc.noalias() = d_pre.transpose() * batch;
  g.b_enc = d_pre.colwise().sum().transpose();
  if (g.theta.size() == 0) g.theta = Vector::Zero(sae.activation.theta.size());
  if (opt.project_decoder) project_to_tangent(sae.w_dec, g.w_dec);
  return g;
}

// ---------------------------------------------------------------------------
// Initialization

inline SaeParams init_sae(Index d, Index k, Activation activation, std::uint64_t seed,
                          double lambda = 0.0, const std::optional<Vector>& data_mean = std::nullopt) {
  require(d >= 1, "init_sae: d must be >= 1");
  require(k > d, "init_sae: k must exceed d");
  SaeParams p;
  Rng rng(mix_seed(seed, 17));
  std::normal_distribution<double> normal(0.0, 1.0);
  p.w_dec.resize(d, k);
  for (Index j = 0; j < k; ++j)
    for (Index q = 0; q < d; ++q) p.w_dec(q, j) = normal(rng);
  normalize_columns(p.w_dec);
  p.w_enc = p.w_dec.transpose();
  p.b_enc = Vector::Zero(k);
  p.b_dec = data_mean ? *data_mean : Vector::Zero(d);
  require_dims(p.b_dec.size(), d, "init_sae data mean");
  if (activation.kind == ActivationKind::jumprelu && activation.theta.size() != k) {
    activation.theta = Vector::Constant(k, 0.001);
  }
  p.activation = std::move(activation);
  p.lambda = lambda;
  p.validate();
  return p;
}

}  // namespace saens
