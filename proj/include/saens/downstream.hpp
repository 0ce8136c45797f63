#pragma once

// Downstream evaluations on labeled sequence corpora: concept detection with
// mean-difference feature selection, and spurious-correlation removal scored
// with the normalized SHIFT score.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saens/activation_data.hpp"
#include "saens/ensemble.hpp"
#include "saens/logistic.hpp"

namespace saens {

// Token activations grouped into sequences, with binary labels per sequence.
struct LabeledSequenceSet {
  RowMatrix tokens;                                // all tokens, sequence after sequence
  std::vector<std::pair<Index, Index>> ranges;     // [begin, end) token rows per sequence
  std::map<std::string, std::vector<int>> labels;  // per sequence
  std::map<std::string, Index> planted_atoms;      // synthetic ground truth: label -> dictionary column

  Index size() const { return static_cast<Index>(ranges.size()); }
  Index dim() const { return tokens.cols(); }

  const std::vector<int>& label(const std::string& name) const {
    auto it = labels.find(name);
    if (it == labels.end()) throw ValidationError("corpus has no label '" + name + "'");
    return it->second;
  }

  void validate() const {
    for (const auto& [b, e] : ranges) require(e > b && b >= 0 && e <= tokens.rows(), "corpus: empty or invalid sequence range");
    for (const auto& [name, v] : labels) {
      require_dims(static_cast<Index>(v.size()), size(), "corpus labels '" + name + "'");
      for (int l : v) require(l == 0 || l == 1, "corpus: labels must be binary");
    }
  }
};

// Codes in the target's feature space: k for one SAE, kJ (weight-folded) for an ensemble.
inline Matrix feature_codes(const SaeParams& sae, const Eigen::Ref<const Matrix>& batch) { return encode(sae, batch); }
inline Matrix feature_codes(const Ensemble& e, const Eigen::Ref<const Matrix>& batch) { return ensemble_encode(e, batch); }
inline Index feature_count(const SaeParams& sae) { return sae.dict_size(); }
inline Index feature_count(const Ensemble& e) { return e.feature_count(); }

template <typename Target>
Vector pool_sequence(const Target& target, const Eigen::Ref<const Matrix>& sequence) {
  require(sequence.rows() >= 1, "pool_sequence: empty sequence");
  return feature_codes(target, sequence).colwise().mean().transpose();
}

// Mean-pooled codes for every sequence (S x m).
template <typename Target>
Matrix pool_corpus(const Target& target, const LabeledSequenceSet& corpus) {
  corpus.validate();
  const Matrix codes = feature_codes(target, Matrix(corpus.tokens));
  Matrix pooled(corpus.size(), codes.cols());
  for (Index s = 0; s < corpus.size(); ++s) {
    const auto [b, e] = corpus.ranges[static_cast<std::size_t>(s)];
    pooled.row(s) = codes.middleRows(b, e - b).colwise().mean();
  }
  return pooled;
}

// Ranks features by |mean(class 1) - mean(class 0)|, ties to the lower index.
inline std::vector<Index> rank_by_mean_diff(const Eigen::Ref<const Matrix>& pooled, const std::vector<int>& labels) {
  require_dims(static_cast<Index>(labels.size()), pooled.rows(), "mean-diff labels");
  Vector sum1 = Vector::Zero(pooled.cols()), sum0 = Vector::Zero(pooled.cols());
  Index n1 = 0, n0 = 0;
  for (Index i = 0; i < pooled.rows(); ++i) {
    if (labels[static_cast<std::size_t>(i)] == 1) {
      sum1 += pooled.row(i).transpose();
      ++n1;
    } else {
      sum0 += pooled.row(i).transpose();
      ++n0;
    }
  }
  require(n1 > 0 && n0 > 0, "select_by_mean_diff: both classes must be present");
  const Vector diff = (sum1 / static_cast<double>(n1) - sum0 / static_cast<double>(n0)).cwiseAbs();
  std::vector<Index> order(static_cast<std::size_t>(pooled.cols()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return diff(a) > diff(b); });
  return order;
}

inline std::vector<Index> select_by_mean_diff(const Eigen::Ref<const Matrix>& pooled, const std::vector<int>& labels,
                                              Index L) {
  require(L >= 1 && L <= pooled.cols(), "select_by_mean_diff: L must lie in [1, m]");
  auto order = rank_by_mean_diff(pooled, labels);
  order.resize(static_cast<std::size_t>(L));
  return order;
}

inline Matrix select_columns(const Eigen::Ref<const Matrix>& m, const std::vector<Index>& cols) {
  Matrix out(m.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = m.col(cols[j]);
  return out;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<Index>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

// Stratified split: `train_fraction` of each class goes to train, order fixed by seed.
struct Split {
  std::vector<Index> train;
  std::vector<Index> test;
};

inline Split stratified_split(const std::vector<int>& labels, double train_fraction, std::uint64_t seed) {
  Split s;
  Rng rng(seed);
  for (int cls : {0, 1}) {
    std::vector<Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(static_cast<Index>(i));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
    s.test.insert(s.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline Matrix select_rows(const Eigen::Ref<const Matrix>& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Concept detection

struct ConceptResult {
  double accuracy = 0.0;        // held-out
  double train_accuracy = 0.0;
  std::vector<Index> selected;
  ProbeModel probe;
};

inline ConceptResult concept_detection_from_pooled(const Matrix& pooled, const std::vector<int>& labels, Index L,
                                                   std::uint64_t split_seed, double train_fraction = 0.8) {
  const Split split = stratified_split(labels, train_fraction, split_seed);
  require(!split.test.empty(), "concept detection: empty test split");
  const Matrix train_x = select_rows(pooled, split.train);
  const auto train_y = pick(labels, split.train);
  ConceptResult r;
  r.selected = select_by_mean_diff(train_x, train_y, L);
  r.probe = train_logistic(select_columns(train_x, r.selected), train_y);
  r.probe.selected_features = r.selected;
  r.train_accuracy = r.probe.accuracy(select_columns(train_x, r.selected), train_y);
  r.accuracy = r.probe.accuracy(select_columns(select_rows(pooled, split.test), r.selected), pick(labels, split.test));
  return r;
}

template <typename Target>
ConceptResult concept_detection_eval(const Target& target, const LabeledSequenceSet& corpus, const std::string& label,
                                     Index L, std::uint64_t split_seed) {
  return concept_detection_from_pooled(pool_corpus(target, corpus), corpus.label(label), L, split_seed);
}

// ---------------------------------------------------------------------------
// Spurious-correlation removal

enum class AttributionRule { weight_times_std, abs_weight };

inline std::string to_string(AttributionRule r) {
  return r == AttributionRule::weight_times_std ? "weight_times_std" : "abs_weight";
}

struct AttributionResult {
  std::vector<Index> ranking;  // all features, best first
  Vector scores;
  double probe_accuracy = 0.0;
  bool low_confidence = false;  // probe barely beats chance

  std::vector<Index> top(Index L) const {
    require(L >= 0 && L <= static_cast<Index>(ranking.size()), "attribution: L out of range");
    return {ranking.begin(), ranking.begin() + L};
  }
};

// Fits a probe for `labels` over all features; score_i = |w_i| * std(c_i)
// (or |w_i| alone), ties to the lower index.
inline AttributionResult probe_attribution(const Eigen::Ref<const Matrix>& pooled, const std::vector<int>& labels,
                                           AttributionRule rule = AttributionRule::weight_times_std) {
  const ProbeModel probe = train_logistic(pooled, labels);
  if (probe.weights.cwiseAbs().maxCoeff() == 0.0) throw ValidationError("probe attribution: degenerate probe (all weights zero)");
  AttributionResult r;
  r.scores = probe.weights.cwiseAbs();
  if (rule == AttributionRule::weight_times_std) {
    const Eigen::RowVectorXd mean = pooled.colwise().mean();
    const Vector sd = ((pooled.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(pooled.rows()))
                          .sqrt()
                          .transpose();
    r.scores = r.scores.cwiseProduct(sd);
  }
  r.ranking.resize(static_cast<std::size_t>(pooled.cols()));
  std::iota(r.ranking.begin(), r.ranking.end(), Index{0});
  std::stable_sort(r.ranking.begin(), r.ranking.end(), [&](Index a, Index b) { return r.scores(a) > r.scores(b); });
  r.probe_accuracy = probe.accuracy(pooled, labels);
  r.low_confidence = r.probe_accuracy < 0.6;
  return r;
}

inline std::vector<Index> probe_attribution_select(const Eigen::Ref<const Matrix>& pooled, const std::vector<int>& labels,
                                                   Index L, AttributionRule rule = AttributionRule::weight_times_std) {
  return probe_attribution(pooled, labels, rule).top(L);
}

inline Vector zero_ablate(const Eigen::Ref<const Vector>& code, const std::vector<Index>& indices) {
  Vector out = code;
  for (Index i : indices) {
    if (i < 0 || i >= out.size()) throw ValidationError("zero_ablate: index " + std::to_string(i) + " out of range");
    out(i) = 0.0;
  }
  return out;
}

inline Matrix zero_ablate_columns(const Eigen::Ref<const Matrix>& codes, const std::vector<Index>& indices) {
  Matrix out = codes;
  for (Index i : indices) {
    if (i < 0 || i >= out.cols()) throw ValidationError("zero_ablate: index " + std::to_string(i) + " out of range");
    out.col(i).setZero();
  }
  return out;
}

inline double shift_score(double a_abl, double a_base, double a_oracle) {
  if (a_oracle == a_base) throw ValidationError("shift_score: oracle accuracy equals base accuracy");
  return (a_abl - a_base) / (a_oracle - a_base);
}

struct ScrOptions {
  std::string task_label = "task";
  std::string spurious_label = "spurious";
  std::uint64_t split_seed = 0;
  double balanced_train_fraction = 0.5;
  AttributionRule rule = AttributionRule::weight_times_std;
  bool ablate_task_features = false;  // adversarial control
};

struct ScrPoint {
  Index L = 0;
  double accuracy_ablated = 0.0;
  double shift = 0.0;
  std::vector<Index> ablated;
};

struct ScrResult {
  double accuracy_base = 0.0;
  double accuracy_oracle = 0.0;
  double attribution_probe_accuracy = 0.0;
  bool low_confidence = false;
  std::vector<ScrPoint> points;
};

inline ScrResult scr_from_pooled(const Matrix& biased, const LabeledSequenceSet& biased_corpus, const Matrix& balanced,
                                 const LabeledSequenceSet& balanced_corpus, const std::vector<Index>& L_values,
                                 const ScrOptions& opt = {}) {
  const auto& task_b = biased_corpus.label(opt.task_label);
  const auto& task_u = balanced_corpus.label(opt.task_label);
  const auto& spur_u = balanced_corpus.label(opt.spurious_label);
  const Split split = stratified_split(task_u, opt.balanced_train_fraction, opt.split_seed);
  const Matrix u_train = select_rows(balanced, split.train);
  const Matrix u_test = select_rows(balanced, split.test);
  const auto task_train = pick(task_u, split.train);
  const auto task_test = pick(task_u, split.test);

  ScrResult r;
  const ProbeModel base = train_logistic(biased, task_b);
  r.accuracy_base = base.accuracy(u_test, task_test);
  r.accuracy_oracle = train_logistic(u_train, task_train).accuracy(u_test, task_test);

  // the attribution probe learns the spurious signal where it is decorrelated from the task
  const AttributionResult attr =
      probe_attribution(u_train, opt.ablate_task_features ? task_train : pick(spur_u, split.train), opt.rule);
  r.attribution_probe_accuracy = attr.probe_accuracy;
  r.low_confidence = attr.low_confidence;

  for (Index L : L_values) {
    ScrPoint p;
    p.L = L;
    p.ablated = attr.top(L);
    const ProbeModel modified = train_logistic(zero_ablate_columns(biased, p.ablated), task_b);
    p.accuracy_ablated = modified.accuracy(zero_ablate_columns(u_test, p.ablated), task_test);
    p.shift = shift_score(p.accuracy_ablated, r.accuracy_base, r.accuracy_oracle);
    r.points.push_back(std::move(p));
  }
  return r;
}

template <typename Target>
ScrResult scr_eval(const Target& target, const LabeledSequenceSet& biased, const LabeledSequenceSet& balanced,
                   const std::vector<Index>& L_values, const ScrOptions& opt = {}) {
  return scr_from_pooled(pool_corpus(target, biased), biased, pool_corpus(target, balanced), balanced, L_values, opt);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

// Per-attribute planting: when the attribute is 1 (0), each token includes
// the planted dictionary column with probability rate_on (rate_off).
struct PlantedAttribute {
  std::string name;
  Index atom = 0;
  double rate_on = 0.8;
  double rate_off = 0.1;
  double coeff = 1.0;
};

struct CorpusSpec {
  SyntheticDictionarySpec base;
  Index sequences = 400;
  Index tokens_per_sequence = 16;
  std::vector<PlantedAttribute> attributes;  // the first one is the primary (balanced) label
  double coupling = 0.5;                     // P(attribute j = attribute 0) for j > 0
  std::uint64_t seed = 0;

  void validate() const {
    base.validate();
    require(sequences >= 2, "corpus spec: needs >= 2 sequences");
    require(tokens_per_sequence >= 1, "corpus spec: tokens_per_sequence must be >= 1");
    require(!attributes.empty(), "corpus spec: needs at least one attribute");
    require(coupling >= 0.0 && coupling <= 1.0, "corpus spec: coupling must lie in [0,1]");
    for (const auto& a : attributes) {
      require(a.atom >= 0 && a.atom < base.true_feature_count, "corpus spec: planted atom out of range");
      require(a.rate_on >= 0 && a.rate_on <= 1 && a.rate_off >= 0 && a.rate_off <= 1, "corpus spec: rates must lie in [0,1]");
    }
  }
};

inline LabeledSequenceSet generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  SyntheticGenerator gen(spec.base);
  Rng rng(mix_seed(spec.seed, 7));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LabeledSequenceSet out;
  const Index T = spec.tokens_per_sequence;
  out.tokens.resize(spec.sequences * T, spec.base.dim);
  for (const auto& a : spec.attributes) {
    out.labels[a.name].resize(static_cast<std::size_t>(spec.sequences));
    out.planted_atoms[a.name] = a.atom;
  }
  Vector token(spec.base.dim), code(spec.base.true_feature_count);
  for (Index s = 0; s < spec.sequences; ++s) {
    std::vector<int> values(spec.attributes.size());
    values[0] = static_cast<int>(s % 2);
    for (std::size_t j = 1; j < values.size(); ++j) values[j] = u(rng) < spec.coupling ? values[0] : 1 - values[0];
    for (std::size_t j = 0; j < values.size(); ++j)
      out.labels[spec.attributes[j].name][static_cast<std::size_t>(s)] = values[j];
    for (Index t = 0; t < T; ++t) {
      gen.draw(rng, token, code);
      for (std::size_t j = 0; j < values.size(); ++j) {
        const auto& a = spec.attributes[j];
        if (u(rng) < (values[j] ? a.rate_on : a.rate_off)) token += a.coeff * gen.dictionary().col(a.atom);
      }
      out.tokens.row(s * T + t) = token.transpose();
    }
    out.ranges.emplace_back(s * T, (s + 1) * T);
  }
  return out;
}

// Corpus on disk: activation shards plus a JSON sidecar of sequence ranges and labels.
inline void save_corpus(const LabeledSequenceSet& c, const std::filesystem::path& sidecar, Index samples_per_shard = 65536) {
  c.validate();
  const auto manifest = sidecar.parent_path() / (sidecar.stem().string() + ".tokens.json");
  ShardWriter w(manifest, c.dim(), samples_per_shard);
  w.append(c.tokens);
  w.finish();
  nlohmann::json j{{"format", "saea-corpus"}, {"version", 1}, {"tokens", manifest.filename().string()}};
  j["sequences"] = nlohmann::json::array();
  for (Index s = 0; s < c.size(); ++s) {
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& [name, v] : c.labels) labels[name] = v[static_cast<std::size_t>(s)];
    const auto [b, e] = c.ranges[static_cast<std::size_t>(s)];
    j["sequences"].push_back({{"begin", b}, {"end", e}, {"labels", labels}});
  }
  j["planted_atoms"] = c.planted_atoms;
  std::ofstream out(sidecar);
  out << j.dump(1) << '\n';
  if (!out) throw IoError("failed writing corpus sidecar " + sidecar.string());
}

inline LabeledSequenceSet load_corpus(const std::filesystem::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw IoError("cannot open corpus sidecar " + sidecar.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed corpus sidecar " + sidecar.string() + ": " + e.what());
  }
  LabeledSequenceSet c;
  const ActivationDataset tokens = ActivationDataset::open(sidecar.parent_path() / j.at("tokens").get<std::string>());
  c.tokens = tokens.all();
  for (const auto& s : j.at("sequences")) {
    c.ranges.emplace_back(s.at("begin").get<Index>(), s.at("end").get<Index>());
    for (const auto& [name, v] : s.at("labels").items()) c.labels[name].push_back(v.get<int>());
  }
  if (j.contains("planted_atoms")) c.planted_atoms = j.at("planted_atoms").get<std::map<std::string, Index>>();
  c.validate();
  return c;
}

}  // namespace saens
