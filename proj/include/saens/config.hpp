#pragma once

// Experiment configuration: a schema-versioned JSON document. Parsing
// validates everything (including that referenced files exist) before any
// computation starts. Unknown keys are rejected.
//
// {
//   "schema_version": 1,
//   "seed": 42,
//   "output_dir": "runs/demo",
//   "dataset": {"manifest": "data/train.json", "eval_manifest": "data/eval.json"}
//           or {"synthetic": {"dim": 16, "true_feature_count": 32, "active_per_sample": 3,
//                             "coeff_low": 0.5, "coeff_high": 1.5, "noise_std": 0.05, "bias": 0.0,
//                             "n": 50000, "eval_n": 10000, "samples_per_shard": 16384}},
//   "sae": {"activation": "relu", "k": 32, "topk": 4, "lambda": 0.3, "learning_rate": 0.003, ...},
//   "ensemble": {"kind": "boosting", "J": 4, "seeds": [..], "parallel": 1, "cache_residuals": false},
//   "eval": {"taus": [0.3, 0.5, 0.7, 0.9], "target_id": "demo"},
//   "downstream": {"concept": {...}, "scr": {...}}
// }

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saens/downstream.hpp"
#include "saens/ensemble.hpp"

namespace saens {

inline constexpr int kConfigSchemaVersion = 1;

struct SyntheticDataConfig {
  SyntheticDictionarySpec spec;
  Index n = 0;
  Index eval_n = 0;
  Index samples_per_shard = 16384;
};

struct DatasetConfig {
  std::optional<std::filesystem::path> manifest;
  std::optional<std::filesystem::path> eval_manifest;
  std::optional<SyntheticDataConfig> synthetic;
};

struct SaeConfig {
  ActivationKind activation = ActivationKind::relu;
  Index k = 0;
  Index topk = 0;
  double bandwidth = 0.001;
  double theta_init = 0.001;
  TrainConfig train;
  std::uint64_t init_seed = 0;

  Activation make_activation() const {
    switch (activation) {
      case ActivationKind::relu: return Activation::relu();
      case ActivationKind::topk: return Activation::top_k(topk);
      case ActivationKind::jumprelu: return Activation::jump_relu(Vector::Constant(k, theta_init), bandwidth);
    }
    return Activation::relu();
  }
};

struct EnsembleConfig {
  EnsembleKind kind = EnsembleKind::naive_bagging;
  Index J = 1;
  std::vector<std::uint64_t> seeds;
  unsigned parallel = 1;
  bool cache_residuals = false;
};

struct ConceptConfig {
  Index L = 1;
  std::string label = "concept";
  std::uint64_t split_seed = 0;
  Index sequences = 1000;
  Index tokens_per_sequence = 16;
  PlantedAttribute attribute{"concept", 0, 0.5, 0.05, 1.0};
};

struct ScrConfig {
  std::vector<Index> L_values{0, 5, 10, 20};
  Index sequences = 1000;
  Index tokens_per_sequence = 16;
  PlantedAttribute task{"task", 0, 0.5, 0.2, 1.0};
  PlantedAttribute spurious{"spurious", 1, 0.6, 0.1, 1.0};
  double biased_coupling = 0.95;
  double balanced_coupling = 0.5;
  AttributionRule rule = AttributionRule::weight_times_std;
  std::uint64_t split_seed = 0;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  DatasetConfig dataset;
  std::optional<SaeConfig> sae;
  std::optional<EnsembleConfig> ensemble;
  std::vector<double> taus{0.7};
  std::string target_id;
  std::optional<ConceptConfig> concept_task;
  std::optional<ScrConfig> scr;
  std::string hash;  // FNV-1a of the canonical (post-override) config text

  std::vector<std::uint64_t> member_seeds() const {
    const Index J = ensemble ? ensemble->J : 1;
    if (ensemble && !ensemble->seeds.empty()) return ensemble->seeds;
    return default_member_seeds(sae ? sae->init_seed : seed, J);
  }
};

namespace detail {

// Reads keys from one JSON object, remembering which were consumed.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + path_ + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T required(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw ValidationError("config: missing required key '" + path_ + "." + key + "'");
    return convert<T>(key);
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), path_ + "." + key);
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ValidationError("config: unknown key '" + path_ + "." + key + "'");
  }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config: key '" + path_ + "." + key + "' has the wrong type");
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline PlantedAttribute parse_attribute(Section s, const std::string& name, const PlantedAttribute& d) {
  PlantedAttribute a;
  a.name = name;
  a.atom = s.get<Index>("atom", d.atom);
  a.rate_on = s.get<double>("rate_on", d.rate_on);
  a.rate_off = s.get<double>("rate_off", d.rate_off);
  a.coeff = s.get<double>("coeff", d.coeff);
  s.finish();
  return a;
}

}  // namespace detail

// `base_dir` resolves relative paths. `seed_override` replaces the global seed.
inline ExperimentConfig parse_config(nlohmann::json j, const std::filesystem::path& base_dir = ".",
                                     std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (seed_override) j["seed"] = *seed_override;
  ExperimentConfig c;
  c.hash = hex64(fnv1a64(j.dump()));
  detail::Section root(j, "config");
  c.schema_version = root.required<int>("schema_version");
  require(c.schema_version == kConfigSchemaVersion,
          "config: unsupported schema_version " + std::to_string(c.schema_version));
  c.seed = root.get<std::uint64_t>("seed", 0);
  c.output_dir = root.get<std::string>("output_dir", "out");
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };

  if (root.has("dataset")) {
    auto ds = root.child("dataset");
    if (ds.has("manifest")) {
      c.dataset.manifest = resolve(ds.get<std::string>("manifest", ""));
      if (!std::filesystem::exists(*c.dataset.manifest))
        throw ValidationError("config: dataset manifest not found: " + c.dataset.manifest->string());
    }
    if (ds.has("eval_manifest")) {
      c.dataset.eval_manifest = resolve(ds.get<std::string>("eval_manifest", ""));
      if (!std::filesystem::exists(*c.dataset.eval_manifest))
        throw ValidationError("config: eval manifest not found: " + c.dataset.eval_manifest->string());
    }
    if (ds.has("synthetic")) {
      auto s = ds.child("synthetic");
      SyntheticDataConfig syn;
      syn.spec.dim = s.required<Index>("dim");
      syn.spec.true_feature_count = s.required<Index>("true_feature_count");
      syn.spec.active_per_sample = s.get<Index>("active_per_sample", 1);
      syn.spec.coeff_low = s.get<double>("coeff_low", 1.0);
      syn.spec.coeff_high = s.get<double>("coeff_high", syn.spec.coeff_low);
      syn.spec.noise_std = s.get<double>("noise_std", 0.0);
      syn.spec.seed = s.get<std::uint64_t>("seed", mix_seed(c.seed, 101));
      if (s.has("bias")) {
        const auto& b = s.raw("bias");
        if (b.is_number()) {
          syn.spec.bias = Vector::Constant(std::max<Index>(syn.spec.dim, 0), b.get<double>());
        } else if (b.is_array()) {
          const auto v = b.get<std::vector<double>>();
          syn.spec.bias = Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
        } else {
          throw ValidationError("config: dataset.synthetic.bias must be a number or an array");
        }
      }
      syn.n = s.required<Index>("n");
      syn.eval_n = s.get<Index>("eval_n", 0);
      syn.samples_per_shard = s.get<Index>("samples_per_shard", 16384);
      s.finish();
      syn.spec.validate();
      require(syn.n >= 1, "config: dataset.synthetic.n must be >= 1");
      require(syn.eval_n >= 0, "config: dataset.synthetic.eval_n must be >= 0");
      require(syn.samples_per_shard >= 1, "config: dataset.synthetic.samples_per_shard must be >= 1");
      c.dataset.synthetic = std::move(syn);
    }
    ds.finish();
    require(c.dataset.manifest || c.dataset.synthetic, "config: dataset needs 'manifest' or 'synthetic'");
  }

  if (root.has("sae")) {
    auto s = root.child("sae");
    SaeConfig sae;
    sae.activation = activation_kind_from_string(s.get<std::string>("activation", "relu"));
    sae.k = s.required<Index>("k");
    sae.topk = s.get<Index>("topk", 0);
    sae.bandwidth = s.get<double>("bandwidth", 0.001);
    sae.theta_init = s.get<double>("theta_init", 0.001);
    TrainConfig& t = sae.train;
    t.learning_rate = s.get<double>("learning_rate", t.learning_rate);
    t.adam_beta1 = s.get<double>("adam_beta1", t.adam_beta1);
    t.adam_beta2 = s.get<double>("adam_beta2", t.adam_beta2);
    t.adam_eps = s.get<double>("adam_eps", t.adam_eps);
    t.batch_size = s.get<Index>("batch_size", t.batch_size);
    t.epochs = s.get<Index>("epochs", t.epochs);
    t.lambda = s.get<double>("lambda", sae.activation == ActivationKind::topk ? 0.0 : t.lambda);
    t.warmup_fraction = s.get<double>("warmup_fraction", t.warmup_fraction);
    t.log_interval = s.get<Index>("log_interval", t.log_interval);
    t.shuffle = s.get<bool>("shuffle", true);
    t.seed = s.get<std::uint64_t>("data_seed", mix_seed(c.seed, 202));
    sae.init_seed = s.get<std::uint64_t>("init_seed", mix_seed(c.seed, 303));
    s.finish();
    t.validate();
    require(sae.k >= 2, "config: sae.k must be >= 2");
    if (sae.activation == ActivationKind::topk) require(sae.topk >= 1 && sae.topk <= sae.k, "config: sae.topk must lie in [1, k]");
    if (sae.activation == ActivationKind::jumprelu) {
      require(sae.bandwidth > 0.0, "config: sae.bandwidth must be positive");
      require(sae.theta_init >= 0.0, "config: sae.theta_init must be >= 0");
    }
    if (c.dataset.synthetic) require(sae.k > c.dataset.synthetic->spec.dim, "config: sae.k must exceed the data dim");
    c.sae = std::move(sae);
  }

  if (root.has("ensemble")) {
    auto e = root.child("ensemble");
    EnsembleConfig ens;
    ens.kind = ensemble_kind_from_string(e.get<std::string>("kind", "naive_bagging"));
    ens.J = e.get<Index>("J", 1);
    ens.seeds = e.get<std::vector<std::uint64_t>>("seeds", {});
    ens.parallel = e.get<unsigned>("parallel", 1);
    ens.cache_residuals = e.get<bool>("cache_residuals", false);
    e.finish();
    require(ens.J >= 1, "config: ensemble.J must be >= 1");
    require(ens.seeds.empty() || static_cast<Index>(ens.seeds.size()) == ens.J,
            "config: ensemble.seeds must have J entries");
    require(std::set<std::uint64_t>(ens.seeds.begin(), ens.seeds.end()).size() == ens.seeds.size(),
            "config: ensemble.seeds must be pairwise distinct");
    require(ens.parallel >= 1, "config: ensemble.parallel must be >= 1");
    c.ensemble = std::move(ens);
  }

  if (root.has("eval")) {
    auto e = root.child("eval");
    c.taus = e.get<std::vector<double>>("taus", c.taus);
    c.target_id = e.get<std::string>("target_id", "");
    e.finish();
    for (double tau : c.taus) require(tau > 0.0 && tau <= 1.0, "config: eval.taus must lie in (0, 1]");
  }

  if (root.has("downstream")) {
    auto d = root.child("downstream");
    if (d.has("concept")) {
      auto s = d.child("concept");
      ConceptConfig cc;
      cc.L = s.get<Index>("L", 1);
      cc.label = s.get<std::string>("label", "concept");
      cc.split_seed = s.get<std::uint64_t>("split_seed", mix_seed(c.seed, 404));
      cc.sequences = s.get<Index>("sequences", cc.sequences);
      cc.tokens_per_sequence = s.get<Index>("tokens_per_sequence", cc.tokens_per_sequence);
      if (s.has("plant")) cc.attribute = detail::parse_attribute(s.child("plant"), cc.label, cc.attribute);
      cc.attribute.name = cc.label;
      s.finish();
      require(cc.L >= 1, "config: downstream.concept.L must be >= 1");
      c.concept_task = std::move(cc);
    }
    if (d.has("scr")) {
      auto s = d.child("scr");
      ScrConfig sc;
      sc.L_values = s.get<std::vector<Index>>("L_values", sc.L_values);
      sc.sequences = s.get<Index>("sequences", sc.sequences);
      sc.tokens_per_sequence = s.get<Index>("tokens_per_sequence", sc.tokens_per_sequence);
      if (s.has("task")) sc.task = detail::parse_attribute(s.child("task"), "task", sc.task);
      if (s.has("spurious")) sc.spurious = detail::parse_attribute(s.child("spurious"), "spurious", sc.spurious);
      sc.biased_coupling = s.get<double>("biased_coupling", sc.biased_coupling);
      sc.balanced_coupling = s.get<double>("balanced_coupling", sc.balanced_coupling);
      const auto rule = s.get<std::string>("rule", "weight_times_std");
      if (rule == "weight_times_std") {
        sc.rule = AttributionRule::weight_times_std;
      } else if (rule == "abs_weight") {
        sc.rule = AttributionRule::abs_weight;
      } else {
        throw ValidationError("config: downstream.scr.rule must be weight_times_std or abs_weight");
      }
      sc.split_seed = s.get<std::uint64_t>("split_seed", mix_seed(c.seed, 505));
      s.finish();
      for (Index L : sc.L_values) require(L >= 0, "config: downstream.scr.L_values must be >= 0");
      require(sc.task.atom != sc.spurious.atom, "config: scr task and spurious atoms must differ");
      c.scr = std::move(sc);
    }
    d.finish();
  }
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: malformed JSON in " + path.string() + ": " + e.what());
  }
  return parse_config(std::move(j), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path(),
                      seed_override);
}

}  // namespace saens
