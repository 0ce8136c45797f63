#pragma once

// Experiment pipelines behind the command-line tool. Each command validates its
// inputs first, then computes, then writes its outputs under the output
// directory. Every output embeds the config hash and library version.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saens/checkpoint.hpp"
#include "saens/config.hpp"
#include "saens/downstream.hpp"
#include "saens/metrics.hpp"
#include "saens/reports.hpp"

namespace saens {

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> parallel;
  bool cache_residuals = false;

  std::vector<std::filesystem::path> checkpoints;
  std::optional<std::filesystem::path> data;  // eval manifest
  std::vector<double> taus;
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> biased;
  std::optional<std::filesystem::path> balanced;
  std::optional<std::string> label;
  std::vector<Index> L_values;
  std::optional<std::uint64_t> split_seed;
  std::optional<std::string> rule;
  bool control = false;
  std::optional<std::string> target_id;
  std::optional<std::filesystem::path> results;
};

namespace detail {

struct CommandContext {
  std::optional<ExperimentConfig> cfg;
  Provenance prov;
  std::filesystem::path out;
};

// Without a config file the provenance hash covers the command-line inputs.
inline CommandContext make_context(const std::string& command, const CommandOptions& o, bool config_required) {
  CommandContext ctx;
  if (o.config) {
    ctx.cfg = load_config(*o.config, o.seed);
    ctx.prov.config_hash = ctx.cfg->hash;
  } else {
    require(!config_required, command + ": --config is required");
    nlohmann::json args{{"command", command}};
    std::vector<std::string> cps;
    for (const auto& p : o.checkpoints) cps.push_back(p.generic_string());
    args["checkpoints"] = cps;
    if (o.data) args["data"] = o.data->generic_string();
    args["taus"] = o.taus;
    if (o.corpus) args["corpus"] = o.corpus->generic_string();
    if (o.biased) args["biased"] = o.biased->generic_string();
    if (o.balanced) args["balanced"] = o.balanced->generic_string();
    if (o.label) args["label"] = *o.label;
    args["L"] = o.L_values;
    if (o.split_seed) args["split_seed"] = *o.split_seed;
    if (o.rule) args["rule"] = *o.rule;
    args["control"] = o.control;
    if (o.seed) args["seed"] = *o.seed;
    if (o.results) args["results"] = o.results->generic_string();
    if (o.target_id) args["target_id"] = *o.target_id;
    ctx.prov.config_hash = hex64(fnv1a64(args.dump()));
  }
  ctx.out = o.out ? *o.out : ctx.cfg ? ctx.cfg->output_dir : std::filesystem::path("out");
  return ctx;
}

inline nlohmann::json checkpoint_meta(const CommandContext& ctx) {
  nlohmann::json meta = ctx.prov.to_json();
  if (ctx.cfg) meta["seed"] = ctx.cfg->seed;
  return meta;
}

inline const SyntheticDataConfig& require_synthetic(const ExperimentConfig& cfg, const std::string& what) {
  require(cfg.dataset.synthetic.has_value(), what + ": config has no dataset.synthetic section");
  return *cfg.dataset.synthetic;
}

// Synthetic samples rounded to f32 so in-memory runs equal runs from written shards.
inline ActivationDataset synthetic_split(const SyntheticDataConfig& syn, Index n, std::uint64_t stream) {
  SyntheticData s = generate_synthetic(syn.spec, n, stream);
  RowMatrix rows = s.dataset.all();
  quantize_f32(rows);
  return ActivationDataset::from_rows(std::move(rows));
}

inline ActivationDataset open_resident(const std::filesystem::path& manifest) {
  ActivationDataset d = ActivationDataset::open(manifest);
  // keep datasets up to 1 GiB in memory; larger ones stream from disk
  if (static_cast<double>(d.count()) * static_cast<double>(d.dim()) * 8.0 <= 1073741824.0) return d.load_resident();
  return d;
}

inline ActivationDataset training_data(const ExperimentConfig& cfg) {
  if (cfg.dataset.manifest) return open_resident(*cfg.dataset.manifest);
  const auto& syn = require_synthetic(cfg, "training");
  return synthetic_split(syn, syn.n, 0);
}

inline CorpusSpec corpus_spec(const SyntheticDataConfig& syn, Index sequences, Index tokens,
                              std::vector<PlantedAttribute> attributes, double coupling, std::uint64_t seed) {
  CorpusSpec c;
  c.base = syn.spec;
  c.sequences = sequences;
  c.tokens_per_sequence = tokens;
  c.attributes = std::move(attributes);
  c.coupling = coupling;
  c.seed = seed;
  return c;
}

inline CorpusSpec concept_corpus_spec(const ExperimentConfig& cfg) {
  const auto& cc = *cfg.concept_task;
  return corpus_spec(require_synthetic(cfg, "concept corpus"), cc.sequences, cc.tokens_per_sequence, {cc.attribute}, 0.5,
                     mix_seed(cfg.seed, 606));
}

inline CorpusSpec scr_corpus_spec(const ExperimentConfig& cfg, bool biased) {
  const auto& sc = *cfg.scr;
  return corpus_spec(require_synthetic(cfg, "scr corpus"), sc.sequences, sc.tokens_per_sequence, {sc.task, sc.spurious},
                     biased ? sc.biased_coupling : sc.balanced_coupling, mix_seed(cfg.seed, biased ? 707 : 808));
}

inline LabeledSequenceSet generated_corpus(const CorpusSpec& spec) {
  LabeledSequenceSet c = generate_corpus(spec);
  quantize_f32(c.tokens);
  return c;
}

inline std::string target_name(const std::optional<std::string>& explicit_id, const ExperimentConfig* cfg,
                               const std::filesystem::path& checkpoint) {
  if (explicit_id) return *explicit_id;
  if (cfg && !cfg->target_id.empty()) return cfg->target_id;
  auto p = checkpoint.lexically_normal();
  if (!p.has_filename()) p = p.parent_path();
  return p.replace_extension().generic_string();
}

inline std::string target_kind(const Target& t) {
  return std::holds_alternative<SaeParams>(t) ? "single" : to_string(std::get<Ensemble>(t).kind);
}

inline Index target_J(const Target& t) {
  return std::holds_alternative<SaeParams>(t) ? 1 : std::get<Ensemble>(t).size();
}

inline const std::filesystem::path& single_checkpoint(const CommandOptions& o, const std::string& command) {
  require(o.checkpoints.size() == 1, command + ": exactly one --checkpoint is required");
  if (!std::filesystem::exists(o.checkpoints[0]))
    throw ValidationError(command + ": checkpoint not found: " + o.checkpoints[0].string());
  return o.checkpoints[0];
}

inline void require_exists(const std::optional<std::filesystem::path>& p, const std::string& what) {
  if (p && !std::filesystem::exists(*p)) throw ValidationError(what + " not found: " + p->string());
}

}  // namespace detail

// gen-data: <out>/data/train.json (+ eval.json, corpora when configured)
inline std::filesystem::path cmd_gen_data(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("gen-data", o, true);
  const auto& syn = detail::require_synthetic(*ctx.cfg, "gen-data");
  const auto dir = ctx.out / "data";
  const ActivationDataset train = detail::synthetic_split(syn, syn.n, 0);
  write_shards(train, dir / "train.json", syn.samples_per_shard);
  log << (dir / "train.json").string() << '\n';
  if (syn.eval_n > 0) {
    write_shards(detail::synthetic_split(syn, syn.eval_n, 1), dir / "eval.json", syn.samples_per_shard);
    log << (dir / "eval.json").string() << '\n';
  }
  if (ctx.cfg->concept_task) {
    save_corpus(detail::generated_corpus(detail::concept_corpus_spec(*ctx.cfg)), dir / "concept.json");
    log << (dir / "concept.json").string() << '\n';
  }
  if (ctx.cfg->scr) {
    save_corpus(detail::generated_corpus(detail::scr_corpus_spec(*ctx.cfg, true)), dir / "scr_biased.json");
    save_corpus(detail::generated_corpus(detail::scr_corpus_spec(*ctx.cfg, false)), dir / "scr_balanced.json");
    log << (dir / "scr_biased.json").string() << '\n' << (dir / "scr_balanced.json").string() << '\n';
  }
  return dir / "train.json";
}

// train: <out>/sae.saec and <out>/train_log.csv
inline std::filesystem::path cmd_train(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("train", o, true);
  require(ctx.cfg->sae.has_value(), "train: config has no sae section");
  const SaeConfig& s = *ctx.cfg->sae;
  const ActivationDataset data = detail::training_data(*ctx.cfg);
  TrainResult r = train_sae(data, s.train, s.make_activation(), s.k, s.init_seed);
  const auto path = ctx.out / "sae.saec";
  save_sae(r.params, path, detail::checkpoint_meta(ctx));
  write_text(ctx.out / "train_log.csv", train_log_csv({r.log}, ctx.prov));
  log << path.string() << '\n';
  return path;
}

namespace detail {

inline std::filesystem::path train_ensemble(EnsembleKind kind, const CommandOptions& o, std::ostream& log) {
  const std::string command = kind == EnsembleKind::naive_bagging ? "bag" : "boost";
  const auto ctx = make_context(command, o, true);
  require(ctx.cfg->sae.has_value(), command + ": config has no sae section");
  const SaeConfig& s = *ctx.cfg->sae;
  const auto seeds = ctx.cfg->member_seeds();
  const ActivationDataset data = training_data(*ctx.cfg);
  EnsembleTrainResult r;
  if (kind == EnsembleKind::naive_bagging) {
    const unsigned parallel = o.parallel ? *o.parallel : ctx.cfg->ensemble ? ctx.cfg->ensemble->parallel : 1u;
    require(parallel >= 1, "bag: --parallel must be >= 1");
    r = bag_train(data, s.train, s.make_activation(), s.k, seeds, parallel);
  } else {
    const bool cache = o.cache_residuals || (ctx.cfg->ensemble && ctx.cfg->ensemble->cache_residuals);
    r = boost_train(data, s.train, s.make_activation(), s.k, seeds,
                    cache ? std::optional<std::filesystem::path>(ctx.out / "residual_cache") : std::nullopt);
  }
  const auto dir = ctx.out / "ensemble";
  save_ensemble(r.ensemble, dir, checkpoint_meta(ctx));
  write_text(ctx.out / "train_log.csv", train_log_csv(r.logs, ctx.prov));
  log << dir.string() << '\n';
  return dir;
}

}  // namespace detail

// bag / boost: <out>/ensemble/ and <out>/train_log.csv
inline std::filesystem::path cmd_bag(const CommandOptions& o, std::ostream& log = std::cout) {
  return detail::train_ensemble(EnsembleKind::naive_bagging, o, log);
}

inline std::filesystem::path cmd_boost(const CommandOptions& o, std::ostream& log = std::cout) {
  return detail::train_ensemble(EnsembleKind::boosting, o, log);
}

// eval: <out>/metrics.json and <out>/metrics.csv
inline MetricsReport cmd_eval(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("eval", o, false);
  const auto& cp = detail::single_checkpoint(o, "eval");
  detail::require_exists(o.data, "eval manifest");
  std::vector<double> taus = !o.taus.empty() ? o.taus : ctx.cfg ? ctx.cfg->taus : std::vector<double>{0.7};
  for (double tau : taus) require(tau > 0.0 && tau <= 1.0, "eval: taus must lie in (0, 1]");

  ActivationDataset data;
  if (o.data) {
    data = detail::open_resident(*o.data);
  } else if (ctx.cfg && ctx.cfg->dataset.eval_manifest) {
    data = detail::open_resident(*ctx.cfg->dataset.eval_manifest);
  } else if (ctx.cfg && ctx.cfg->dataset.synthetic && ctx.cfg->dataset.synthetic->eval_n > 0) {
    data = detail::synthetic_split(*ctx.cfg->dataset.synthetic, ctx.cfg->dataset.synthetic->eval_n, 1);
  } else {
    throw ValidationError("eval: no evaluation data (use --data or configure an eval split)");
  }

  const Target target = load_target(cp);
  MetricsReport rep = std::visit([&](const auto& t) { return evaluate(t, data, taus); }, target);
  rep.target_id = detail::target_name(o.target_id, ctx.cfg ? &*ctx.cfg : nullptr, cp);
  write_text(ctx.out / "metrics.json", to_json(rep, ctx.prov).dump(2) + "\n");
  write_text(ctx.out / "metrics.csv", metrics_csv(rep, ctx.prov));
  log << (ctx.out / "metrics.csv").string() << '\n';
  return rep;
}

// stability: <out>/stability.csv, one row per checkpoint
inline std::vector<double> cmd_stability(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("stability", o, false);
  require(o.checkpoints.size() >= 2, "stability: needs at least two checkpoints");
  for (const auto& p : o.checkpoints)
    if (!std::filesystem::exists(p)) throw ValidationError("stability: checkpoint not found: " + p.string());
  std::vector<Matrix> runs;
  std::vector<ResultRow> rows;
  for (const auto& p : o.checkpoints) {
    const Target t = load_target(p);
    runs.push_back(std::visit([](const auto& x) { return Matrix(feature_matrix(x)); }, t));
    ResultRow r;
    r.target_id = detail::target_name(std::nullopt, nullptr, p);
    r.kind = detail::target_kind(t);
    r.J = detail::target_J(t);
    r.task = "stability";
    r.metric = "stability";
    rows.push_back(std::move(r));
  }
  std::vector<double> values;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    values.push_back(stability(runs, s));
    rows[s].value = values.back();
  }
  write_text(ctx.out / "stability.csv", results_csv(rows, ctx.prov));
  log << (ctx.out / "stability.csv").string() << '\n';
  return values;
}

// concept: <out>/concept.csv and <out>/concept.json
inline ConceptResult cmd_concept(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("concept", o, false);
  const auto& cp = detail::single_checkpoint(o, "concept");
  detail::require_exists(o.corpus, "concept corpus");
  const ConceptConfig defaults;
  const ConceptConfig& cc = ctx.cfg && ctx.cfg->concept_task ? *ctx.cfg->concept_task : defaults;
  const std::string label = o.label ? *o.label : cc.label;
  const Index L = !o.L_values.empty() ? o.L_values.front() : cc.L;
  require(L >= 1, "concept: L must be >= 1");
  const std::uint64_t split_seed = o.split_seed ? *o.split_seed : cc.split_seed;

  LabeledSequenceSet corpus;
  if (o.corpus) {
    corpus = load_corpus(*o.corpus);
  } else {
    require(ctx.cfg && ctx.cfg->concept_task, "concept: needs --corpus or a downstream.concept config section");
    corpus = detail::generated_corpus(detail::concept_corpus_spec(*ctx.cfg));
  }
  const Target target = load_target(cp);
  const ConceptResult r =
      std::visit([&](const auto& t) { return concept_detection_eval(t, corpus, label, L, split_seed); }, target);

  const std::string id = detail::target_name(o.target_id, ctx.cfg ? &*ctx.cfg : nullptr, cp);
  std::vector<ResultRow> rows;
  for (const auto& [metric, value] : {std::pair{"accuracy", r.accuracy}, std::pair{"train_accuracy", r.train_accuracy}})
    rows.push_back({id, detail::target_kind(target), detail::target_J(target), label, L, metric, value, split_seed});
  write_text(ctx.out / "concept.csv", results_csv(rows, ctx.prov));
  nlohmann::json j{{"target_id", id},
                   {"kind", detail::target_kind(target)},
                   {"J", detail::target_J(target)},
                   {"label", label},
                   {"L", L},
                   {"split_seed", split_seed},
                   {"split", "80/20 stratified"},
                   {"accuracy", r.accuracy},
                   {"train_accuracy", r.train_accuracy},
                   {"selected_features", r.selected},
                   {"probe_converged", r.probe.converged},
                   {"provenance", ctx.prov.to_json()}};
  write_text(ctx.out / "concept.json", j.dump(2) + "\n");
  log << (ctx.out / "concept.csv").string() << '\n';
  return r;
}

// scr: <out>/scr.csv and <out>/scr.json
inline ScrResult cmd_scr(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("scr", o, false);
  const auto& cp = detail::single_checkpoint(o, "scr");
  detail::require_exists(o.biased, "biased corpus");
  detail::require_exists(o.balanced, "balanced corpus");
  require(o.biased.has_value() == o.balanced.has_value(), "scr: give both --biased and --balanced, or neither");
  const ScrConfig defaults;
  const ScrConfig& sc = ctx.cfg && ctx.cfg->scr ? *ctx.cfg->scr : defaults;
  const std::vector<Index> L_values = !o.L_values.empty() ? o.L_values : sc.L_values;
  for (Index L : L_values) require(L >= 0, "scr: L values must be >= 0");
  ScrOptions opt;
  opt.split_seed = o.split_seed ? *o.split_seed : sc.split_seed;
  opt.rule = sc.rule;
  if (o.rule) {
    if (*o.rule == "weight_times_std") {
      opt.rule = AttributionRule::weight_times_std;
    } else if (*o.rule == "abs_weight") {
      opt.rule = AttributionRule::abs_weight;
    } else {
      throw ValidationError("scr: --rule must be weight_times_std or abs_weight");
    }
  }
  opt.ablate_task_features = o.control;

  LabeledSequenceSet biased, balanced;
  if (o.biased) {
    biased = load_corpus(*o.biased);
    balanced = load_corpus(*o.balanced);
  } else {
    require(ctx.cfg && ctx.cfg->scr, "scr: needs --biased/--balanced or a downstream.scr config section");
    biased = detail::generated_corpus(detail::scr_corpus_spec(*ctx.cfg, true));
    balanced = detail::generated_corpus(detail::scr_corpus_spec(*ctx.cfg, false));
  }
  const Target target = load_target(cp);
  const ScrResult r =
      std::visit([&](const auto& t) { return scr_eval(t, biased, balanced, L_values, opt); }, target);

  const std::string id = detail::target_name(o.target_id, ctx.cfg ? &*ctx.cfg : nullptr, cp);
  const std::string kind = detail::target_kind(target);
  const Index J = detail::target_J(target);
  const std::string task = o.control ? "scr_control" : "scr";
  std::vector<ResultRow> rows;
  rows.push_back({id, kind, J, task, 0, "accuracy_base", r.accuracy_base, opt.split_seed});
  rows.push_back({id, kind, J, task, 0, "accuracy_oracle", r.accuracy_oracle, opt.split_seed});
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : r.points) {
    rows.push_back({id, kind, J, task, p.L, "accuracy_ablated", p.accuracy_ablated, opt.split_seed});
    rows.push_back({id, kind, J, task, p.L, "s_shift", p.shift, opt.split_seed});
    points.push_back({{"L", p.L}, {"accuracy_ablated", p.accuracy_ablated}, {"s_shift", p.shift}, {"ablated", p.ablated}});
  }
  write_text(ctx.out / (task + ".csv"), results_csv(rows, ctx.prov));
  nlohmann::json j{{"target_id", id},
                   {"kind", kind},
                   {"J", J},
                   {"control", o.control},
                   {"rule", to_string(opt.rule)},
                   {"split_seed", opt.split_seed},
                   {"accuracy_base", r.accuracy_base},
                   {"accuracy_oracle", r.accuracy_oracle},
                   {"attribution_probe_accuracy", r.attribution_probe_accuracy},
                   {"low_confidence", r.low_confidence},
                   {"points", points},
                   {"provenance", ctx.prov.to_json()}};
  write_text(ctx.out / (task + ".json"), j.dump(2) + "\n");
  log << (ctx.out / (task + ".csv")).string() << '\n';
  return r;
}

// report: <out>/aggregate.csv
inline std::vector<AggregateRow> cmd_report(const CommandOptions& o, std::ostream& log = std::cout) {
  const auto ctx = detail::make_context("report", o, false);
  require(o.results.has_value(), "report: --results DIR is required");
  if (!std::filesystem::is_directory(*o.results)) throw ValidationError("report: results directory not found: " + o.results->string());
  const auto rows = aggregate_results(*o.results);
  require(!rows.empty(), "report: no result files under " + o.results->string());
  write_text(ctx.out / "aggregate.csv", aggregate_csv(rows, ctx.prov));
  log << (ctx.out / "aggregate.csv").string() << '\n';
  return rows;
}

}  // namespace saens
