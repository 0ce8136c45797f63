#pragma once

// Naive bagging and boosting over SAEs, and the flattening of an ensemble into
// one SAE with concatenated decoder columns.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <set>
#include <thread>
#include <vector>

#include "saens/train.hpp"

namespace saens {

enum class EnsembleKind { naive_bagging, boosting };

inline std::string to_string(EnsembleKind k) {
  return k == EnsembleKind::naive_bagging ? "naive_bagging" : "boosting";
}

inline EnsembleKind ensemble_kind_from_string(const std::string& s) {
  if (s == "naive_bagging" || s == "bagging" || s == "bag") return EnsembleKind::naive_bagging;
  if (s == "boosting" || s == "boost") return EnsembleKind::boosting;
  throw ValidationError("unknown ensemble kind '" + s + "'");
}

struct Ensemble {
  EnsembleKind kind = EnsembleKind::naive_bagging;
  std::vector<SaeParams> members;
  std::vector<double> weights;
  std::vector<std::uint64_t> seeds;

  Index size() const { return static_cast<Index>(members.size()); }
  Index dim() const { return members.front().dim(); }
  Index dict_size() const { return members.front().dict_size(); }
  Index feature_count() const { return dict_size() * size(); }

  void validate() const {
    require(!members.empty(), "ensemble: needs at least one member");
    require_dims(static_cast<Index>(weights.size()), size(), "ensemble weights");
    const SaeParams& first = members.front();
    for (const auto& m : members) {
      m.validate();
      require(m.dim() == first.dim() && m.dict_size() == first.dict_size() &&
                  m.activation.kind == first.activation.kind && m.lambda == first.lambda,
              "ensemble: members must share (d, k, activation, lambda)");
    }
    for (double w : weights) require(w >= 0.0, "ensemble: weights must be non-negative");
    const double expect = kind == EnsembleKind::naive_bagging ? 1.0 / static_cast<double>(size()) : 1.0;
    for (double w : weights) require(w == expect, "ensemble: weights do not match the ensemble kind");
  }

  static Ensemble make(EnsembleKind kind, std::vector<SaeParams> members, std::vector<std::uint64_t> seeds = {}) {
    Ensemble e;
    e.kind = kind;
    const double w = kind == EnsembleKind::naive_bagging ? 1.0 / static_cast<double>(members.size()) : 1.0;
    e.weights.assign(members.size(), w);
    e.members = std::move(members);
    e.seeds = std::move(seeds);
    e.validate();
    return e;
  }
};

// ---------------------------------------------------------------------------
// Reconstruction

inline Matrix bag_reconstruct(const Ensemble& e, const Eigen::Ref<const Matrix>& batch) {
  if (e.kind != EnsembleKind::naive_bagging) throw ValidationError("bag_reconstruct: ensemble is not naive_bagging");
  Matrix sum = Matrix::Zero(batch.rows(), batch.cols());
  for (const auto& m : e.members) sum += reconstruct(m, batch);
  return sum / static_cast<double>(e.size());
}

// Returns the sum of member reconstructions; member j sees the residual left by members < j.
inline Matrix boost_reconstruct(const Ensemble& e, const Eigen::Ref<const Matrix>& batch,
                                Matrix* final_residual = nullptr) {
  if (e.kind != EnsembleKind::boosting) throw ValidationError("boost_reconstruct: ensemble is not boosting");
  Matrix residual = batch;
  Matrix total = Matrix::Zero(batch.rows(), batch.cols());
  for (const auto& m : e.members) {
    const Matrix part = reconstruct(m, residual);
    total += part;
    residual -= part;
  }
  if (final_residual) *final_residual = std::move(residual);
  return total;
}

inline Matrix reconstruct(const Ensemble& e, const Eigen::Ref<const Matrix>& batch) {
  return e.kind == EnsembleKind::naive_bagging ? bag_reconstruct(e, batch) : boost_reconstruct(e, batch);
}

// Concatenated, weight-scaled codes (B x kJ), member blocks in member order.
inline Matrix ensemble_encode(const Ensemble& e, const Eigen::Ref<const Matrix>& batch) {
  const Index k = e.dict_size();
  Matrix out(batch.rows(), k * e.size());
  Matrix residual = batch;
  for (Index j = 0; j < e.size(); ++j) {
    const SaeParams& m = e.members[static_cast<std::size_t>(j)];
    const Matrix codes = encode(m, e.kind == EnsembleKind::boosting ? residual : Matrix(batch));
    out.middleCols(j * k, k) = e.weights[static_cast<std::size_t>(j)] * codes;
    if (e.kind == EnsembleKind::boosting) residual -= decode(m, codes);
  }
  return out;
}

// The ensemble realized as a single SAE decoder over kJ features.
struct FlattenedSae {
  Matrix w_dec_cat;  // d x kJ
  Vector b_dec_sum;  // sum_j alpha_j b_dec_j
  Ensemble source;   // encoders come from the members
  std::vector<double> weights;

  Index feature_count() const { return w_dec_cat.cols(); }
};

inline FlattenedSae flatten(const Ensemble& e) {
  e.validate();
  const Index d = e.dim(), k = e.dict_size();
  FlattenedSae f;
  f.w_dec_cat.resize(d, k * e.size());
  f.b_dec_sum = Vector::Zero(d);
  for (Index j = 0; j < e.size(); ++j) {
    const auto& m = e.members[static_cast<std::size_t>(j)];
    f.w_dec_cat.middleCols(j * k, k) = m.w_dec;
    f.b_dec_sum += e.weights[static_cast<std::size_t>(j)] * m.b_dec;
  }
  f.source = e;
  f.weights = e.weights;
  return f;
}

inline Matrix encode(const FlattenedSae& f, const Eigen::Ref<const Matrix>& batch) {
  return ensemble_encode(f.source, batch);
}

inline Matrix decode(const FlattenedSae& f, const Eigen::Ref<const Matrix>& codes) {
  require_dims(codes.cols(), f.feature_count(), "flattened decode input");
  Matrix out = codes * f.w_dec_cat.transpose();
  out.rowwise() += f.b_dec_sum.transpose();
  return out;
}

inline Matrix reconstruct_flat(const FlattenedSae& f, const Eigen::Ref<const Matrix>& batch) {
  return decode(f, encode(f, batch));
}

// ---------------------------------------------------------------------------
// Training

struct EnsembleTrainResult {
  Ensemble ensemble;
  std::vector<std::vector<TrainLogRow>> logs;  // one per member
};

inline unsigned thread_cap_from_env() {
  if (const char* s = std::getenv("SAE_ENSEMBLE_THREADS")) {
    try {
      const long v = std::stol(s);
      if (v >= 1) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return 0;  // no cap
}

// Trains J SAEs on identical data in identical order, differing only in init seed.
// Members are independent; `parallel` > 1 trains them concurrently with
// results identical to sequential training.
inline EnsembleTrainResult bag_train(const ActivationDataset& data, const TrainConfig& cfg, const Activation& activation,
                                     Index k, const std::vector<std::uint64_t>& seeds, unsigned parallel = 1) {
  require(!seeds.empty(), "bag_train: J must be >= 1");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(),
          "bag_train: member seeds must be pairwise distinct");
  cfg.validate();
  const Vector mean = data.cached_mean() ? *data.cached_mean() : compute_per_dim_mean(data);
  ActivationDataset shared = data;
  shared.set_cached_mean(mean);

  std::vector<TrainResult> results(seeds.size());
  if (const unsigned cap = thread_cap_from_env(); cap > 0) parallel = std::min(parallel, cap);
  parallel = std::max(1u, std::min<unsigned>(parallel, static_cast<unsigned>(seeds.size())));
  if (parallel == 1) {
    for (std::size_t j = 0; j < seeds.size(); ++j) results[j] = train_sae(shared, cfg, activation, k, seeds[j]);
  } else {
    std::vector<std::exception_ptr> errors(seeds.size());
    for (std::size_t start = 0; start < seeds.size(); start += parallel) {
      std::vector<std::thread> pool;
      for (std::size_t j = start; j < std::min(seeds.size(), start + parallel); ++j) {
        pool.emplace_back([&, j] {
          try {
            results[j] = train_sae(shared, cfg, activation, k, seeds[j]);
          } catch (...) {
            errors[j] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  EnsembleTrainResult out;
  std::vector<SaeParams> members;
  for (auto& r : results) {
    members.push_back(std::move(r.params));
    out.logs.push_back(std::move(r.log));
  }
  out.ensemble = Ensemble::make(EnsembleKind::naive_bagging, std::move(members), seeds);
  return out;
}

// Residual targets for the next boosting member: a minus the summed
// reconstructions of the frozen prefix.
inline Matrix boosting_residual(const std::vector<SaeParams>& prefix, const Matrix& batch) {
  Matrix residual = batch;
  for (const auto& m : prefix) residual -= reconstruct(m, residual);
  return residual;
}

inline std::vector<std::uint64_t> default_member_seeds(std::uint64_t base, Index J) {
  std::vector<std::uint64_t> s(static_cast<std::size_t>(J));
  for (Index j = 0; j < J; ++j) s[static_cast<std::size_t>(j)] = base + static_cast<std::uint64_t>(j);
  return s;
}

// Sequential boosting. By default residuals are recomputed by streaming the
// frozen prefix members over each batch. With `cache_dir`, the residuals after
// each member are written once as temporary shards (f32) and removed at the end.
inline EnsembleTrainResult boost_train(const ActivationDataset& data, const TrainConfig& cfg, const Activation& activation,
                                       Index k, const std::vector<std::uint64_t>& seeds,
                                       const std::optional<std::filesystem::path>& cache_dir = std::nullopt) {
  require(!seeds.empty(), "boost_train: J must be >= 1");
  cfg.validate();
  EnsembleTrainResult out;
  std::vector<SaeParams> members;
  ActivationDataset cached = data;
  for (std::size_t j = 0; j < seeds.size(); ++j) {
    BatchTransform transform;
    if (j > 0 && !cache_dir) {
      transform = [prefix = members](const Matrix& batch) { return boosting_residual(prefix, batch); };
    }
    TrainResult r = train_sae(cache_dir ? cached : data, cfg, activation, k, seeds[j], transform);
    if (cache_dir && j + 1 < seeds.size()) {
      const auto manifest = *cache_dir / ("residual_" + std::to_string(j) + ".json");
      ShardWriter w(manifest, data.dim(), 65536);
      BatchStream stream(cached, 65536);
      Matrix batch;
      while (stream.next(batch)) w.append(batch - reconstruct(r.params, batch));
      w.finish();
      cached = ActivationDataset::open(manifest);
    }
    members.push_back(std::move(r.params));
    out.logs.push_back(std::move(r.log));
  }
  if (cache_dir) std::filesystem::remove_all(*cache_dir);
  out.ensemble = Ensemble::make(EnsembleKind::boosting, std::move(members), seeds);
  return out;
}

}  // namespace saens
