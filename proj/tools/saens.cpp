// saens: train, evaluate and compare SAE ensembles from JSON configs.
//
// Exit codes: 0 ok, 2 validation error, 3 numerical divergence, 4 I/O error.

#include <CLI11.hpp>

#include <iostream>

#include "saens/saens.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

template <typename T>
void optional_option(CLI::App* app, const std::string& name, std::optional<T>& target, const std::string& help) {
  app->add_option_function<T>(name, [&target](const T& v) { target = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse autoencoder ensembles: bagging, boosting and their evaluation"};
  app.set_version_flag("--version", std::string(saens::kVersion));
  app.require_subcommand(1);

  saens::CommandOptions o;
  std::vector<std::string> checkpoints;

  auto common = [&](CLI::App* sub) {
    optional_option(sub, "--config", o.config, "experiment config (JSON)");
    optional_option(sub, "--out", o.out, "output directory (overrides output_dir)");
    optional_option(sub, "--seed", o.seed, "global seed override");
  };

  auto* gen = app.add_subcommand("gen-data", "write synthetic activation shards and corpora");
  auto* train = app.add_subcommand("train", "train one SAE");
  auto* bag = app.add_subcommand("bag", "train a naive bagging ensemble");
  auto* boost = app.add_subcommand("boost", "train a boosting ensemble");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* stab = app.add_subcommand("stability", "stability across training runs");
  auto* concept_cmd = app.add_subcommand("concept", "concept detection with a sparse probe");
  auto* scr = app.add_subcommand("scr", "spurious correlation removal");
  auto* report = app.add_subcommand("report", "aggregate result CSVs with 95% intervals");
  for (auto* sub : {gen, train, bag, boost, eval, stab, concept_cmd, scr, report}) common(sub);

  optional_option(bag, "--parallel", o.parallel, "members trained concurrently");
  boost->add_flag("--cache-residuals", o.cache_residuals, "materialize residuals as temporary shards");

  for (auto* sub : {eval, concept_cmd, scr}) sub->add_option("--checkpoint", checkpoints, "SAE file or ensemble directory");
  stab->add_option("--checkpoint", checkpoints, "SAE file or ensemble directory (repeat, >= 2)");
  optional_option(eval, "--data", o.data, "evaluation manifest");
  eval->add_option("--taus", o.taus, "diversity thresholds")->delimiter(',');
  optional_option(concept_cmd, "--corpus", o.corpus, "labeled corpus sidecar");
  optional_option(concept_cmd, "--label", o.label, "label to detect");
  concept_cmd->add_option("--L", o.L_values, "number of selected features")->expected(1);
  optional_option(scr, "--biased", o.biased, "biased corpus sidecar");
  optional_option(scr, "--balanced", o.balanced, "balanced corpus sidecar");
  scr->add_option("--L", o.L_values, "ablation sizes")->delimiter(',');
  optional_option(scr, "--rule", o.rule, "attribution rule: weight_times_std | abs_weight");
  scr->add_flag("--control", o.control, "ablate task-attributed features instead");
  for (auto* sub : {concept_cmd, scr}) optional_option(sub, "--split-seed", o.split_seed, "train/test split seed");
  for (auto* sub : {eval, concept_cmd, scr}) optional_option(sub, "--target-id", o.target_id, "name used in reports");
  optional_option(report, "--results", o.results, "directory of result CSVs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }
  for (const auto& c : checkpoints) o.checkpoints.emplace_back(c);

  try {
    if (gen->parsed()) saens::cmd_gen_data(o);
    else if (train->parsed()) saens::cmd_train(o);
    else if (bag->parsed()) saens::cmd_bag(o);
    else if (boost->parsed()) saens::cmd_boost(o);
    else if (eval->parsed()) saens::cmd_eval(o);
    else if (stab->parsed()) saens::cmd_stability(o);
    else if (concept_cmd->parsed()) saens::cmd_concept(o);
    else if (scr->parsed()) saens::cmd_scr(o);
    else if (report->parsed()) saens::cmd_report(o);
  } catch (const saens::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const saens::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const saens::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "i/o error: malformed input file: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
