#pragma once

// Activation datasets: in-memory or shard-backed sample matrices, the binary
// shard format, batch streaming, and the synthetic ground-truth generator.
//
// Shard layout (all integers little-endian):
//   "SAEA" | u16 version=1 | u32 dim | u32 count | count*dim f32 | u32 crc32(payload)
//
// A manifest is a JSON file naming the shards (paths relative to the manifest),
// the dimension, the total count and optional per-sample i32 label files.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "saens/common.hpp"

namespace saens {

static_assert(std::endian::native == std::endian::little,
              "shard I/O assumes a little-endian host");

namespace fs = std::filesystem;
using LabelMap = std::map<std::string, std::vector<std::int32_t>>;

inline constexpr char kShardMagic[4] = {'S', 'A', 'E', 'A'};
inline constexpr std::uint16_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 4 + 2 + 4 + 4;

struct ShardDescriptor {
  fs::path path;
  Index count = 0;
  Index offset = 0;  // index of the shard's first sample in the dataset
};

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of file");
  return v;
}

inline std::uint32_t crc32_of(const void* data, std::size_t bytes, std::uint32_t crc = 0) {
  // zlib takes uInt lengths; feed in chunks.
  auto p = static_cast<const Bytef*>(data);
  uLong c = crc;
  while (bytes > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    bytes -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

struct ShardHeader {
  Index dim = 0;
  Index count = 0;
};

inline ShardHeader read_shard_header(std::istream& is, const fs::path& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kShardMagic, 4) != 0) {
    throw IoError("bad shard magic in " + path.string());
  }
  const auto version = get<std::uint16_t>(is);
  if (version != kShardVersion) {
    throw IoError("unsupported shard version " + std::to_string(version) + " in " + path.string());
  }
  ShardHeader h;
  h.dim = static_cast<Index>(get<std::uint32_t>(is));
  h.count = static_cast<Index>(get<std::uint32_t>(is));
  return h;
}

}  // namespace detail

class ActivationDataset {
 public:
  ActivationDataset() = default;

  static ActivationDataset from_rows(RowMatrix samples, LabelMap labels = {}) {
    require(samples.cols() >= 1, "activation dataset needs dim >= 1");
    require(all_finite(samples), "activation dataset contains non-finite values");
    for (const auto& [name, v] : labels) {
      require_dims(static_cast<Index>(v.size()), samples.rows(), "labels '" + name + "'");
    }
    ActivationDataset ds;
    ds.dim_ = samples.cols();
    ds.count_ = samples.rows();
    ds.memory_ = std::make_shared<const RowMatrix>(std::move(samples));
    ds.labels_ = std::move(labels);
    return ds;
  }

  // Opens a manifest. Shard headers and checksums are verified; payloads stay on disk.
  static ActivationDataset open(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest " + manifest_path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    const fs::path base = manifest_path.parent_path();
    ActivationDataset ds;
    ds.dim_ = j.at("dim").get<Index>();
    ds.count_ = j.at("count").get<Index>();
    Index offset = 0;
    for (const auto& s : j.at("shards")) {
      ShardDescriptor d;
      d.path = base / s.at("path").get<std::string>();
      d.count = s.at("count").get<Index>();
      d.offset = offset;
      verify_shard(d, ds.dim_);
      offset += d.count;
      ds.shards_.push_back(std::move(d));
    }
    if (offset != ds.count_) {
      throw IoError("manifest count " + std::to_string(ds.count_) + " != shard total " +
                    std::to_string(offset));
    }
    if (j.contains("labels")) {
      for (const auto& [name, file] : j.at("labels").items()) {
        ds.labels_[name] = read_labels(base / file.get<std::string>(), ds.count_);
      }
    }
    if (j.contains("per_dim_mean")) {
      ds.mean_ = Eigen::Map<const Vector>(j.at("per_dim_mean").get<std::vector<double>>().data(),
                                          ds.dim_);
    }
    return ds;
  }

  Index dim() const { return dim_; }
  Index count() const { return count_; }
  bool empty() const { return count_ == 0; }
  bool resident() const { return memory_ != nullptr; }
  const std::vector<ShardDescriptor>& shards() const { return shards_; }
  const LabelMap& labels() const { return labels_; }
  const std::optional<Vector>& cached_mean() const { return mean_; }
  void set_cached_mean(Vector mean) {
    require_dims(mean.size(), dim_, "per_dim_mean");
    mean_ = std::move(mean);
  }

  // Copies the requested samples (as rows) into out, which is resized to rows.size() x dim.
  void gather(std::span<const Index> rows, Matrix& out) const {
    out.resize(static_cast<Index>(rows.size()), dim_);
    if (memory_) {
      for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = memory_->row(rows[i]);
      return;
    }
    std::vector<float> buf;
    std::ifstream in;
    const ShardDescriptor* open_shard = nullptr;
    std::size_t i = 0;
    while (i < rows.size()) {
      const Index r = rows[i];
      if (r < 0 || r >= count_) throw ValidationError("sample index out of range");
      const ShardDescriptor& shard = shard_for(r);
      // extend over a run of consecutive indices inside the same shard
      std::size_t run = 1;
      while (i + run < rows.size() && rows[i + run] == r + static_cast<Index>(run) &&
             r + static_cast<Index>(run) < shard.offset + shard.count) {
        ++run;
      }
      if (open_shard != &shard) {
        in = std::ifstream(shard.path, std::ios::binary);
        if (!in) throw IoError("cannot open shard " + shard.path.string());
        open_shard = &shard;
      }
      const auto local = static_cast<std::streamoff>(r - shard.offset);
      in.seekg(static_cast<std::streamoff>(kShardHeaderBytes) +
               local * static_cast<std::streamoff>(dim_ * sizeof(float)));
      buf.resize(run * static_cast<std::size_t>(dim_));
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!in) throw IoError("short read from shard " + shard.path.string());
      for (std::size_t k = 0; k < run; ++k) {
        for (Index q = 0; q < dim_; ++q) {
          out(static_cast<Index>(i + k), q) = static_cast<double>(buf[k * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(q)]);
        }
      }
      i += run;
    }
  }

  Matrix rows(Index begin, Index end) const {
    std::vector<Index> idx(static_cast<std::size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    Matrix out;
    gather(idx, out);
    return out;
  }

  Matrix all() const { return rows(0, count_); }

  // Returns an in-memory copy (labels and cached mean included).
  ActivationDataset load_resident() const {
    if (memory_) return *this;
    ActivationDataset ds = *this;
    ds.memory_ = std::make_shared<const RowMatrix>(RowMatrix(all()));
    ds.shards_.clear();
    return ds;
  }

  // Payload exactly as stored on disk (f32). Resident datasets are rounded.
  std::vector<float> payload_f32() const {
    std::vector<float> out(static_cast<std::size_t>(count_ * dim_));
    const Matrix a = all();
    for (Index n = 0; n < count_; ++n)
      for (Index q = 0; q < dim_; ++q) out[static_cast<std::size_t>(n * dim_ + q)] = static_cast<float>(a(n, q));
    return out;
  }

 private:
  const ShardDescriptor& shard_for(Index r) const {
    auto it = std::upper_bound(shards_.begin(), shards_.end(), r,
                               [](Index v, const ShardDescriptor& s) { return v < s.offset; });
    return *std::prev(it);
  }

  static void verify_shard(const ShardDescriptor& d, Index dim) {
    std::ifstream in(d.path, std::ios::binary);
    if (!in) throw IoError("cannot open shard " + d.path.string());
    const auto h = detail::read_shard_header(in, d.path);
    if (h.dim != dim) throw IoError("shard dim mismatch in " + d.path.string());
    if (h.count != d.count) throw IoError("shard count mismatch in " + d.path.string());
    std::vector<char> payload(static_cast<std::size_t>(h.count * h.dim) * sizeof(float));
    in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!in) throw IoError("truncated shard " + d.path.string());
    const auto stored = detail::get<std::uint32_t>(in);
    if (stored != detail::crc32_of(payload.data(), payload.size())) {
      throw IoError("crc mismatch in " + d.path.string());
    }
    std::vector<float> values(static_cast<std::size_t>(h.count * h.dim));
    std::memcpy(values.data(), payload.data(), payload.size());
    for (float v : values) {
      if (!std::isfinite(v)) throw IoError("non-finite value in " + d.path.string());
    }
  }

  static std::vector<std::int32_t> read_labels(const fs::path& p, Index count) {
    std::ifstream in(p, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open label file " + p.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != static_cast<std::size_t>(count) * sizeof(std::int32_t)) {
      throw IoError("label file " + p.string() + " has wrong length");
    }
    in.seekg(0);
    std::vector<std::int32_t> v(static_cast<std::size_t>(count));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
    return v;
  }

  Index dim_ = 0;
  Index count_ = 0;
  std::vector<ShardDescriptor> shards_;
  std::shared_ptr<const RowMatrix> memory_;
  std::optional<Vector> mean_;
  LabelMap labels_;
};

// Appends samples into fixed-size shards. finish() writes the manifest.
class ShardWriter {
 public:
  ShardWriter(fs::path manifest_path, Index dim, Index samples_per_shard)
      : manifest_(std::move(manifest_path)), dim_(dim), per_shard_(samples_per_shard) {
    require(dim >= 1, "shard writer needs dim >= 1");
    require(samples_per_shard >= 1, "samples_per_shard must be >= 1");
    if (manifest_.has_parent_path()) fs::create_directories(manifest_.parent_path());
  }

  void append(const Eigen::Ref<const Matrix>& rows) {
    if (rows.cols() != dim_) {
      throw ValidationError("dimension mismatch across appends: got " + std::to_string(rows.cols()) +
                            ", expected " + std::to_string(dim_));
    }
    require(all_finite(rows), "refusing to write non-finite activations");
    for (Index n = 0; n < rows.rows(); ++n) {
      for (Index q = 0; q < dim_; ++q) pending_.push_back(static_cast<float>(rows(n, q)));
      if (static_cast<Index>(pending_.size()) == per_shard_ * dim_) flush();
    }
  }

  std::vector<ShardDescriptor> finish(const LabelMap& labels = {},
                                      const std::optional<Vector>& mean = std::nullopt) {
    flush();
    nlohmann::json j;
    j["format"] = "saea-manifest";
    j["version"] = 1;
    j["dim"] = dim_;
    j["count"] = total_;
    j["shards"] = nlohmann::json::array();
    for (const auto& s : shards_) {
      j["shards"].push_back({{"path", s.path.filename().string()}, {"count", s.count}});
    }
    if (!labels.empty()) {
      j["labels"] = nlohmann::json::object();
      for (const auto& [name, v] : labels) {
        require_dims(static_cast<Index>(v.size()), total_, "labels '" + name + "'");
        const fs::path lp = sibling(".labels." + name + ".i32");
        std::ofstream out(lp, std::ios::binary);
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(std::int32_t)));
        if (!out) throw IoError("failed writing " + lp.string());
        j["labels"][name] = lp.filename().string();
      }
    }
    if (mean) j["per_dim_mean"] = std::vector<double>(mean->data(), mean->data() + mean->size());
    std::ofstream out(manifest_);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing manifest " + manifest_.string());
    return shards_;
  }

 private:
  fs::path sibling(const std::string& suffix) const {
    return manifest_.parent_path() / (manifest_.stem().string() + suffix);
  }

  void flush() {
    if (pending_.empty()) return;
    const Index count = static_cast<Index>(pending_.size()) / dim_;
    char name[32];
    std::snprintf(name, sizeof(name), ".shard_%05zu.saea", shards_.size());
    const fs::path p = sibling(name);
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot create shard " + p.string());
    out.write(kShardMagic, 4);
    detail::put<std::uint16_t>(out, kShardVersion);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(count));
    const std::size_t bytes = pending_.size() * sizeof(float);
    out.write(reinterpret_cast<const char*>(pending_.data()), static_cast<std::streamsize>(bytes));
    detail::put<std::uint32_t>(out, detail::crc32_of(pending_.data(), bytes));
    if (!out) throw IoError("failed writing shard " + p.string());
    shards_.push_back({p, count, total_});
    total_ += count;
    pending_.clear();
  }

  fs::path manifest_;
  Index dim_;
  Index per_shard_;
  Index total_ = 0;
  std::vector<float> pending_;
  std::vector<ShardDescriptor> shards_;
};

inline std::vector<ShardDescriptor> write_shards(const ActivationDataset& data, const fs::path& manifest,
                                                 Index samples_per_shard) {
  ShardWriter w(manifest, std::max<Index>(data.dim(), 1), samples_per_shard);
  const Index step = std::max<Index>(samples_per_shard, 1);
  for (Index b = 0; b < data.count(); b += step) w.append(data.rows(b, std::min(data.count(), b + step)));
  return w.finish(data.labels(), data.cached_mean());
}

// Iterates over one epoch of a dataset in batches. Shuffling permutes an index
// array; shards are never rewritten.
class BatchStream {
 public:
  BatchStream(const ActivationDataset& data, Index batch_size,
              std::optional<std::uint64_t> shuffle_seed = std::nullopt)
      : data_(&data), batch_(batch_size), order_(static_cast<std::size_t>(data.count())) {
    require(batch_size >= 1, "batch_size must be >= 1");
    std::iota(order_.begin(), order_.end(), Index{0});
    if (shuffle_seed) {
      Rng rng(*shuffle_seed);
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  bool next(Matrix& out) {
    if (pos_ >= order_.size()) return false;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_), order_.size() - pos_);
    current_ = std::span<const Index>(order_.data() + pos_, n);
    data_->gather(current_, out);
    pos_ += n;
    return true;
  }

  // Dataset indices of the batch returned by the last next().
  std::span<const Index> indices() const { return current_; }
  Index batches() const { return (data_->count() + batch_ - 1) / batch_; }

 private:
  const ActivationDataset* data_;
  Index batch_;
  std::vector<Index> order_;
  std::size_t pos_ = 0;
  std::span<const Index> current_;
};

// Streaming mean with Chan's pairwise batch combination.
inline Vector compute_per_dim_mean(const ActivationDataset& data, Index batch_size = 4096) {
  if (data.empty()) throw ValidationError("per_dim_mean of an empty dataset");
  Vector mean = Vector::Zero(data.dim());
  Index seen = 0;
  BatchStream stream(data, batch_size);
  Matrix batch;
  while (stream.next(batch)) {
    const Index b = batch.rows();
    const Vector batch_mean = batch.colwise().mean().transpose();
    seen += b;
    mean += (batch_mean - mean) * (static_cast<double>(b) / static_cast<double>(seen));
  }
  return mean;
}

inline const Vector& per_dim_mean(ActivationDataset& data) {
  if (!data.cached_mean()) data.set_cached_mean(compute_per_dim_mean(data));
  return *data.cached_mean();
}

// ---------------------------------------------------------------------------
// Synthetic data with a known dictionary.

struct SyntheticDictionarySpec {
  Index dim = 16;
  Index true_feature_count = 32;
  Index active_per_sample = 1;
  double coeff_low = 1.0;
  double coeff_high = 1.0;
  double noise_std = 0.0;
  Vector bias;  // empty means zero
  std::uint64_t seed = 0;

  void validate() const {
    require(dim >= 1, "synthetic spec: dim must be >= 1");
    require(true_feature_count >= 1, "synthetic spec: true_feature_count must be >= 1");
    require(active_per_sample >= 1, "synthetic spec: active_per_sample must be >= 1");
    require(active_per_sample <= true_feature_count,
            "synthetic spec: active_per_sample exceeds true_feature_count");
    require(coeff_low >= 0.0 && coeff_low <= coeff_high, "synthetic spec: need 0 <= coeff_low <= coeff_high");
    require(noise_std >= 0.0, "synthetic spec: noise_std must be non-negative");
    require(bias.size() == 0 || bias.size() == dim, "synthetic spec: bias length must equal dim");
  }

  Vector bias_or_zero() const { return bias.size() == 0 ? Vector::Zero(dim) : bias; }
};

// Draws samples a = D z + bias + noise with non-negative sparse codes z.
class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(SyntheticDictionarySpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    bias_ = spec_.bias_or_zero();
    Rng rng(mix_seed(spec_.seed, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    dictionary_.resize(spec_.dim, spec_.true_feature_count);
    for (Index j = 0; j < dictionary_.cols(); ++j)
      for (Index q = 0; q < dictionary_.rows(); ++q) dictionary_(q, j) = normal(rng);
    normalize_columns(dictionary_);
    pool_.resize(static_cast<std::size_t>(spec_.true_feature_count));
  }

  const Matrix& dictionary() const { return dictionary_; }
  const SyntheticDictionarySpec& spec() const { return spec_; }

  // Writes one sample into `sample`; `code` (length K_true) receives the ground-truth code.
  void draw(Rng& rng, Eigen::Ref<Vector> sample, Eigen::Ref<Vector> code) {
    std::iota(pool_.begin(), pool_.end(), Index{0});
    code.setZero();
    for (Index s = 0; s < spec_.active_per_sample; ++s) {
      std::uniform_int_distribution<Index> pick(s, spec_.true_feature_count - 1);
      std::swap(pool_[static_cast<std::size_t>(s)], pool_[static_cast<std::size_t>(pick(rng))]);
      code(pool_[static_cast<std::size_t>(s)]) = coefficient(rng);
    }
    sample = dictionary_ * code + bias_;
    if (spec_.noise_std > 0.0) {
      std::normal_distribution<double> noise(0.0, spec_.noise_std);
      for (Index q = 0; q < sample.size(); ++q) sample(q) += noise(rng);
    }
  }

  double coefficient(Rng& rng) const {
    if (spec_.coeff_low == spec_.coeff_high) return spec_.coeff_low;
    std::uniform_real_distribution<double> u(spec_.coeff_low, spec_.coeff_high);
    return u(rng);
  }

 private:
  SyntheticDictionarySpec spec_;
  Vector bias_;
  Matrix dictionary_;
  std::vector<Index> pool_;
};

struct SyntheticData {
  ActivationDataset dataset;
  Matrix dictionary;  // d x K_true, unit-norm columns
  RowMatrix codes;    // N x K_true ground-truth codes
};

// `stream` selects an independent sample stream over the same dictionary
// (0 = training split, 1 = evaluation split, ...).
inline SyntheticData generate_synthetic(const SyntheticDictionarySpec& spec, Index n, std::uint64_t stream = 0) {
  require(n >= 1, "generate_synthetic: n must be >= 1");
  SyntheticGenerator gen(spec);
  Rng rng(mix_seed(spec.seed, 1 + stream));
  RowMatrix samples(n, spec.dim);
  RowMatrix codes(n, spec.true_feature_count);
  Vector a(spec.dim), z(spec.true_feature_count);
  for (Index i = 0; i < n; ++i) {
    gen.draw(rng, a, z);
    samples.row(i) = a.transpose();
    codes.row(i) = z.transpose();
  }
  return {ActivationDataset::from_rows(std::move(samples)), gen.dictionary(), std::move(codes)};
}

// Rounds every entry to float, the precision shards store.
inline void quantize_f32(RowMatrix& m) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

}  // namespace saens
