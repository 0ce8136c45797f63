#pragma once

// Intrinsic SAE metrics: reconstruction (MSE, explained variance), relative
// sparsity, diversity, connectivity and stability, plus the streaming
// evaluator that assembles them into a MetricsReport.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "saens/ensemble.hpp"

namespace saens {

// Values with magnitude at or below this are treated as exact zeros on insertion.
inline constexpr double kZeroFlush = 1e-12;

// Row-compressed N x m matrix of feature coefficients; zeros are never stored.
class CoefficientMatrix {
 public:
  explicit CoefficientMatrix(Index cols = 0) : cols_(cols) { row_ptr_.push_back(0); }

  void append_rows(const Eigen::Ref<const Matrix>& dense) {
    require_dims(dense.cols(), cols_, "coefficient matrix columns");
    for (Index n = 0; n < dense.rows(); ++n) {
      for (Index j = 0; j < cols_; ++j) {
        const double v = dense(n, j);
        if (std::abs(v) > kZeroFlush) {
          col_.push_back(j);
          val_.push_back(v);
        }
      }
      row_ptr_.push_back(static_cast<Index>(col_.size()));
    }
  }

  static CoefficientMatrix from_dense(const Eigen::Ref<const Matrix>& dense) {
    CoefficientMatrix c(dense.cols());
    c.append_rows(dense);
    return c;
  }

  Index rows() const { return static_cast<Index>(row_ptr_.size()) - 1; }
  Index cols() const { return cols_; }
  Index nonzeros() const { return static_cast<Index>(col_.size()); }

  template <typename F>
  void for_each_in_row(Index n, F&& f) const {
    for (Index p = row_ptr_[static_cast<std::size_t>(n)]; p < row_ptr_[static_cast<std::size_t>(n) + 1]; ++p) {
      f(col_[static_cast<std::size_t>(p)], val_[static_cast<std::size_t>(p)]);
    }
  }

  Index row_nonzeros(Index n) const {
    return row_ptr_[static_cast<std::size_t>(n) + 1] - row_ptr_[static_cast<std::size_t>(n)];
  }

 private:
  Index cols_;
  std::vector<Index> row_ptr_;
  std::vector<Index> col_;
  std::vector<double> val_;
};

// ---------------------------------------------------------------------------
// Reconstruction metrics

inline double mse(const Eigen::Ref<const Matrix>& originals, const Eigen::Ref<const Matrix>& recon) {
  require(originals.rows() >= 1, "mse: empty input");
  require_dims(recon.rows(), originals.rows(), "mse rows");
  require_dims(recon.cols(), originals.cols(), "mse cols");
  return (originals - recon).squaredNorm() / static_cast<double>(originals.rows());
}

// Per-dimension sums needed for explained variance.
struct VarianceAccumulator {
  Vector sse;  // sum_n (a_q - ahat_q)^2
  Vector sst;  // sum_n (a_q - mean_q)^2
  Vector mean;
  Index n = 0;

  explicit VarianceAccumulator(Vector per_dim_mean)
      : sse(Vector::Zero(per_dim_mean.size())), sst(Vector::Zero(per_dim_mean.size())), mean(std::move(per_dim_mean)) {}

  void add(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& ahat) {
    sse += (a - ahat).array().square().colwise().sum().transpose().matrix();
    sst += (a.rowwise() - mean.transpose()).array().square().colwise().sum().transpose().matrix();
    n += a.rows();
  }

  double explained_variance() const {
    std::vector<Index> zero;
    for (Index q = 0; q < sst.size(); ++q)
      if (!(sst(q) > 0.0)) zero.push_back(q);
    if (!zero.empty()) {
      std::string dims;
      for (Index q : zero) dims += (dims.empty() ? "" : ",") + std::to_string(q);
      throw ValidationError("explained_variance: zero-variance dimensions [" + dims + "]");
    }
    return (1.0 - (sse.array() / sst.array())).mean();
  }
};

inline double explained_variance(const Eigen::Ref<const Matrix>& originals, const Eigen::Ref<const Matrix>& recon,
                                 const Eigen::Ref<const Vector>& per_dim_mean) {
  require(originals.rows() >= 1, "explained_variance: empty input");
  require_dims(per_dim_mean.size(), originals.cols(), "explained_variance mean");
  require_dims(recon.rows(), originals.rows(), "explained_variance rows");
  VarianceAccumulator acc{Vector(per_dim_mean)};
  acc.add(originals, recon);
  return acc.explained_variance();
}

// ---------------------------------------------------------------------------
// Coefficient metrics

inline double relative_sparsity(const CoefficientMatrix& c) {
  require(c.cols() >= 1 && c.rows() >= 1, "relative_sparsity: empty coefficient matrix");
  return static_cast<double>(c.nonzeros()) / static_cast<double>(c.rows()) / static_cast<double>(c.cols());
}

// Accumulates the support of C^T C across rows. A pair (i, j) counts when the
// summed product of its stored coefficients is non-zero.
class CoactivationCounter {
 public:
  explicit CoactivationCounter(Index m) : m_(m) {
    if (m <= kDenseLimit) dense_.assign(static_cast<std::size_t>(m * m), 0.0);
  }

  void add(const CoefficientMatrix& c) {
    require_dims(c.cols(), m_, "coactivation columns");
    std::vector<std::pair<Index, double>> row;
    for (Index n = 0; n < c.rows(); ++n) {
      row.clear();
      c.for_each_in_row(n, [&](Index j, double v) { row.emplace_back(j, v); });
      for (const auto& [i, vi] : row)
        for (const auto& [j, vj] : row) accumulate(i, j, vi * vj);
    }
  }

  Index nonzero_pairs() const {
    if (!dense_.empty() || m_ == 0) {
      return static_cast<Index>(std::count_if(dense_.begin(), dense_.end(), [](double v) { return v != 0.0; }));
    }
    Index count = 0;
    for (const auto& [key, v] : sparse_)
      if (v != 0.0) ++count;
    return count;
  }

  Index m() const { return m_; }

 private:
  static constexpr Index kDenseLimit = 2048;

  void accumulate(Index i, Index j, double v) {
    if (!dense_.empty()) {
      dense_[static_cast<std::size_t>(i * m_ + j)] += v;
    } else {
      sparse_[i * m_ + j] += v;
    }
  }

  Index m_;
  std::vector<double> dense_;
  std::unordered_map<Index, double> sparse_;
};

// 1 - ||C^T C||_0 / m^2, as printed. Higher means fewer co-activated pairs.
inline double connectivity(const CoefficientMatrix& c) {
  require(c.cols() >= 1, "connectivity: m must be >= 1");
  CoactivationCounter counter(c.cols());
  counter.add(c);
  const double m = static_cast<double>(c.cols());
  return 1.0 - static_cast<double>(counter.nonzero_pairs()) / (m * m);
}

// ---------------------------------------------------------------------------
// Feature-geometry metrics

inline void require_unit_columns(const Matrix& f, std::string_view what) {
  if (f.cols() > 0 && max_column_norm_deviation(f) > 1e-6) {
    throw ValidationError(std::string(what) + ": feature columns are not unit-norm");
  }
}

// Per-feature max_{j != i} |<f_i, f_j>|, computed in column blocks.
inline Vector max_abs_cosine_to_others(const Matrix& features, Index block = 512) {
  const Index m = features.cols();
  Vector best = Vector::Constant(m, -std::numeric_limits<double>::infinity());
  for (Index i0 = 0; i0 < m; i0 += block) {
    const Index bi = std::min(block, m - i0);
    for (Index j0 = 0; j0 < m; j0 += block) {
      const Index bj = std::min(block, m - j0);
      const Matrix g = (features.middleCols(i0, bi).transpose() * features.middleCols(j0, bj)).cwiseAbs();
      for (Index i = 0; i < bi; ++i)
        for (Index j = 0; j < bj; ++j)
          if (i0 + i != j0 + j) best(i0 + i) = std::max(best(i0 + i), g(i, j));
    }
  }
  return best;
}

inline Index diversity(const Matrix& features, double tau) {
  require(tau > 0.0 && tau <= 1.0, "diversity: tau must lie in (0, 1]");
  require_unit_columns(features, "diversity");
  const Vector best = max_abs_cosine_to_others(features);
  return static_cast<Index>((best.array() <= tau).count());
}

inline std::map<double, Index> diversity_sweep(const Matrix& features, const std::vector<double>& taus) {
  require_unit_columns(features, "diversity");
  const Vector best = max_abs_cosine_to_others(features);
  std::map<double, Index> out;
  for (double tau : taus) {
    require(tau > 0.0 && tau <= 1.0, "diversity: tau must lie in (0, 1]");
    out[tau] = static_cast<Index>((best.array() <= tau).count());
  }
  return out;
}

// Mean over run s's features of the largest signed inner product with any
// feature of any other run.
inline double stability(const std::vector<Matrix>& runs, std::size_t s) {
  require(runs.size() >= 2, "stability: needs at least two runs");
  require(s < runs.size(), "stability: run index out of range");
  const Matrix& mine = runs[s];
  require(mine.cols() >= 1, "stability: run has no features");
  for (const auto& r : runs) {
    require_dims(r.rows(), mine.rows(), "stability feature dim");
    require_unit_columns(r, "stability");
  }
  Vector best = Vector::Constant(mine.cols(), -std::numeric_limits<double>::infinity());
  for (std::size_t o = 0; o < runs.size(); ++o) {
    if (o == s) continue;
    const Matrix g = mine.transpose() * runs[o];
    best = best.cwiseMax(g.rowwise().maxCoeff());
  }
  return best.mean();
}

// ---------------------------------------------------------------------------
// Evaluation

inline const Matrix& feature_matrix(const SaeParams& sae) { return sae.w_dec; }
inline Matrix feature_matrix(const Ensemble& e) { return flatten(e).w_dec_cat; }

struct MetricsReport {
  std::string target_id;
  std::string kind;  // single | naive_bagging | boosting
  Index J = 1;
  Index m = 0;
  Index N = 0;
  double mse = 0.0;
  double explained_variance = 0.0;
  double relative_sparsity = 0.0;
  std::map<double, Index> diversity;
  double connectivity = 0.0;
  double coactivation_density = 0.0;  // ||C^T C||_0 / m^2
  std::optional<double> stability;
  std::string eval_split;
};

namespace detail {

template <typename Target>
struct EvalOps;

template <>
struct EvalOps<SaeParams> {
  static Matrix codes(const SaeParams& s, const Matrix& b) { return encode(s, b); }
  static Matrix recon_from_codes(const SaeParams& s, const Matrix& c) { return decode(s, c); }
  static std::string kind(const SaeParams&) { return "single"; }
  static Index J(const SaeParams&) { return 1; }
};

template <>
struct EvalOps<FlattenedSae> {
  static Matrix codes(const FlattenedSae& f, const Matrix& b) { return encode(f, b); }
  static Matrix recon_from_codes(const FlattenedSae& f, const Matrix& c) { return decode(f, c); }
  static std::string kind(const FlattenedSae& f) { return to_string(f.source.kind); }
  static Index J(const FlattenedSae& f) { return f.source.size(); }
};

template <typename Target>
MetricsReport evaluate_impl(const Target& target, const Matrix& features, const ActivationDataset& data,
                            const std::vector<double>& taus, const std::string& split, Index batch_size) {
  using Ops = EvalOps<Target>;
  require(!data.empty(), "evaluate: empty evaluation dataset");
  const Vector mean = data.cached_mean() ? *data.cached_mean() : compute_per_dim_mean(data);
  VarianceAccumulator var(mean);
  double sq_err = 0.0;
  const Index m = features.cols();
  CoefficientMatrix coeffs(m);
  BatchStream stream(data, batch_size);
  Matrix batch;
  while (stream.next(batch)) {
    const Matrix c = Ops::codes(target, batch);
    const Matrix r = Ops::recon_from_codes(target, c);
    sq_err += (batch - r).squaredNorm();
    var.add(batch, r);
    coeffs.append_rows(c);
  }
  MetricsReport rep;
  rep.kind = Ops::kind(target);
  rep.J = Ops::J(target);
  rep.m = m;
  rep.N = data.count();
  rep.mse = sq_err / static_cast<double>(data.count());
  rep.explained_variance = var.explained_variance();
  rep.relative_sparsity = relative_sparsity(coeffs);
  rep.diversity = diversity_sweep(features, taus);
  CoactivationCounter counter(m);
  counter.add(coeffs);
  rep.coactivation_density = static_cast<double>(counter.nonzero_pairs()) / (static_cast<double>(m) * static_cast<double>(m));
  rep.connectivity = 1.0 - rep.coactivation_density;
  rep.eval_split = split;
  return rep;
}

}  // namespace detail

inline MetricsReport evaluate(const SaeParams& sae, const ActivationDataset& data, const std::vector<double>& taus,
                              const std::string& split = "eval", Index batch_size = 4096) {
  return detail::evaluate_impl(sae, sae.w_dec, data, taus, split, batch_size);
}

// Ensembles are evaluated through their flattened form.
inline MetricsReport evaluate(const Ensemble& e, const ActivationDataset& data, const std::vector<double>& taus,
                              const std::string& split = "eval", Index batch_size = 4096) {
  const FlattenedSae flat = flatten(e);
  return detail::evaluate_impl(flat, flat.w_dec_cat, data, taus, split, batch_size);
}

}  // namespace saens
