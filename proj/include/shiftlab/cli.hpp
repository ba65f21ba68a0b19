#pragma once

// Command-line front end. Results go to `out`, diagnostics to `err`.
// Exit codes: 0 success, 1 usage error, 2 data / validation error,
// 3 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shiftlab/config.hpp"
#include "shiftlab/harness.hpp"
#include "shiftlab/metrics.hpp"
#include "shiftlab/proximity.hpp"
#include "shiftlab/rng.hpp"
#include "shiftlab/scores.hpp"
#include "shiftlab/shiftpack.hpp"
#include "shiftlab/synth.hpp"
#include "shiftlab/toynet.hpp"

namespace shiftlab::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

/// SHIFTLAB_SEED when set and numeric, else 0.
inline std::uint64_t default_seed() {
  const char* env = std::getenv("SHIFTLAB_SEED");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const auto v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw InvalidArgument("SHIFTLAB_SEED must be a non-negative integer");
  return v;
}

namespace detail {

struct RuleOptions {
  std::string rule;
  double temperature = 1.0;
  double react_percentile = 90.0;
  double ash_percentile = 90.0;
  std::string ash_variant = "prune";
  std::string fit;

  void add(CLI::App* app, bool rule_required = true) {
    auto* r = app->add_option("--rule", rule, "Scoring rule: msp, mls, energy, odin, gradnorm, she; "
                                              "optionally prefixed react+ or ash+");
    if (rule_required) r->required();
    app->add_option("--T", temperature, "Temperature")->capture_default_str();
    app->add_option("--react-percentile", react_percentile, "ReAct clipping percentile of ID activations")
        ->capture_default_str();
    app->add_option("--ash-percentile", ash_percentile, "ASH per-sample pruning percentile")->capture_default_str();
    app->add_option("--ash-variant", ash_variant, "ASH variant")
        ->check(CLI::IsMember({"prune", "scale"}))
        ->capture_default_str();
    app->add_option("--fit", fit, "ID training pack for ReAct thresholds and SHE prototypes");
  }

  scores::RuleParams params() const {
    scores::RuleParams p;
    p.temperature = temperature;
    p.react_percentile = react_percentile;
    p.ash_percentile = ash_percentile;
    p.ash_variant = ash_variant == "scale" ? scores::AshVariant::scale : scores::AshVariant::prune;
    p.check();
    return p;
  }
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void make_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

inline config::ScenarioConfig load_scenario(const std::string& path) {
  if (path.empty()) return {};
  return config::scenario_from_json(config::read_json_file(path));
}

inline toynet::TrainSpec load_spec(const std::string& path) {
  if (path.empty()) return {};
  return config::train_spec_from_json(config::read_json_file(path));
}

// Fit pack for rules that need one. Falls back to the scored pack.
inline const ShiftPack& fit_pack_for(const scores::RuleSpec& spec, const std::string& fit_path,
                                     std::optional<ShiftPack>& storage, const ShiftPack& fallback,
                                     std::ostream& err) {
  if (!spec.needs_fit()) return fallback;
  if (fit_path.empty()) {
    err << "warning: no --fit pack given; fitting " << scores::to_string(spec) << " on the scored ID pack\n";
    return fallback;
  }
  storage = read_pack_file(fit_path);
  return *storage;
}

inline void warn_degenerate(const scores::ScoreVector& s, std::ostream& err) {
  if (s.degenerate) {
    err << "warning: " << s.rule
        << " ran without input perturbation (no perturbed_logits); scores are temperature-scaled MSP\n";
  }
}

inline std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw InvalidArgument(std::string(what) + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw InvalidArgument(std::string(what) + ": empty list");
  return out;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

/// Builds the parser and runs the selected subcommand.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-hoc distribution-shift scoring, metrics and synthetic benchmarks", "shiftlab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::uint64_t seed = 0;
  std::string scenario_path, spec_path, out_dir;

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate raw-input packs for every split of a scenario");
  std::size_t n_train = 0, n_test = 0, n_aux = 0;
  std::optional<double> aux_overlap;
  synth_cmd->add_option("--scenario", scenario_path, "Scenario JSON file (defaults when omitted)");
  synth_cmd->add_option("--out", out_dir, "Output directory")->required();
  synth_cmd->add_option("--seed", seed, "Scenario seed (default: $SHIFTLAB_SEED or 0)");
  synth_cmd->add_option("--n-train", n_train, "ID training samples");
  synth_cmd->add_option("--n-test", n_test, "Samples per test split");
  synth_cmd->add_option("--n-aux", n_aux, "Auxiliary outlier samples");
  synth_cmd->add_option("--aux-overlap", aux_overlap, "Auxiliary overlap alpha in [0, 1]");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the toy classifier and export packs for every split");
  std::string loss_override;
  std::optional<double> odin_eps;
  double odin_T = 1000.0;
  bool want_proj = false;
  train_cmd->add_option("--scenario", scenario_path, "Scenario JSON file (defaults when omitted)");
  train_cmd->add_option("--spec", spec_path, "Training spec JSON file (defaults when omitted)");
  train_cmd->add_option("--loss", loss_override, "Override the training config's loss")->check(CLI::IsMember({"ce", "oe", "arpl"}));
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--seed", seed, "Scenario and training seed (default: $SHIFTLAB_SEED or 0)");
  train_cmd->add_option("--odin-epsilon", odin_eps, "Also export ODIN-perturbed logits with this step");
  train_cmd->add_option("--odin-temperature", odin_T, "Temperature for the ODIN perturbation")->capture_default_str();
  train_cmd->add_flag("--project2d", want_proj, "Fit a 2-D projection head and write proj2d.csv");

  // score
  auto* score_cmd = app.add_subcommand("score", "Score every sample of a pack");
  std::string pack_path, sidecar, format = "text";
  detail::RuleOptions score_rule;
  score_cmd->add_option("--pack", pack_path, "Pack to score")->required();
  score_rule.add(score_cmd);
  score_cmd->add_option("--out", sidecar, "Write scores to this CSV file instead of stdout");
  score_cmd->add_option("--format", format, "Output format")->check(CLI::IsMember({"text", "csv"}))->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate one rule on an ID pack against a shift pack");
  std::string id_path, shift_path, metric = "auroc", kind = "semantic";
  detail::RuleOptions eval_rule;
  eval_cmd->add_option("--id", id_path, "ID test pack")->required();
  eval_cmd->add_option("--shift", shift_path, "Shift pack")->required();
  eval_rule.add(eval_cmd);
  eval_cmd->add_option("--metric", metric, "Metric")
      ->check(CLI::IsMember(config::known_metrics()))
      ->capture_default_str();
  eval_cmd->add_option("--kind", kind, "Shift kind")->check(CLI::IsMember({"semantic", "covariate"}))->capture_default_str();
  eval_cmd->add_option("--format", format, "Output format")->check(CLI::IsMember({"text", "csv"}))->capture_default_str();

  // matrix
  auto* matrix_cmd = app.add_subcommand("matrix", "Run a method x rule x dataset x seed matrix");
  std::string matrix_path, report_format = "md";
  std::size_t jobs = 1;
  bool save_scores = false;
  std::optional<std::uint64_t> matrix_seed;
  matrix_cmd->add_option("--config", matrix_path, "Matrix JSON file")->required();
  matrix_cmd->add_option("--out", out_dir, "Output directory for results.csv / results.md")->required();
  matrix_cmd->add_option("--jobs", jobs, "Parallel (method, seed) jobs")->capture_default_str();
  matrix_cmd->add_option("--seed", matrix_seed, "Run this single seed instead of the configured list");
  matrix_cmd->add_flag("--save-scores", save_scores, "Write per-cell score sidecars under <out>/scores");
  matrix_cmd->add_option("--format", report_format, "Table echoed to stdout")
      ->check(CLI::IsMember({"md", "csv"}))
      ->capture_default_str();

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep one rule parameter over a grid");
  std::string param, grid_text;
  detail::RuleOptions sweep_rule;
  sweep_cmd->add_option("--id", id_path, "ID test pack")->required();
  sweep_cmd->add_option("--shift", shift_path, "Shift pack")->required();
  sweep_rule.add(sweep_cmd);
  sweep_cmd->add_option("--param", param, "Parameter to sweep")
      ->required()
      ->check(CLI::IsMember({"temperature", "react_percentile", "ash_percentile"}));
  sweep_cmd->add_option("--grid", grid_text, "Comma-separated grid values")->required();
  sweep_cmd->add_option("--metric", metric, "Metric")
      ->check(CLI::IsMember(config::known_metrics()))
      ->capture_default_str();
  sweep_cmd->add_option("--kind", kind, "Shift kind")->check(CLI::IsMember({"semantic", "covariate"}))->capture_default_str();
  sweep_cmd->add_option("--format", format, "Output format")->check(CLI::IsMember({"text", "csv"}))->capture_default_str();

  // proximity
  auto* prox_cmd = app.add_subcommand(
      "proximity", "Measure OOD/auxiliary proximity, or run the proximity study with --alphas");
  std::string ood_path, aux_path, feature_name, measure = "both", alphas_text, space = "input";
  std::size_t K = 10, threads = 1;
  double epsilon = 0.1;
  std::optional<double> bandwidth;
  prox_cmd->add_option("--ood", ood_path, "OOD pack");
  prox_cmd->add_option("--aux", aux_path, "Auxiliary pack");
  prox_cmd->add_option("--features", feature_name, "Feature tensor (default: features/input, else penultimate)");
  prox_cmd->add_option("--measure", measure, "Measure")->check(CLI::IsMember({"dist_nn", "mmd", "both"}))->capture_default_str();
  prox_cmd->add_option("-k,--k", K, "Neighbours for Dist_nn")->capture_default_str();
  prox_cmd->add_option("--epsilon", epsilon, "Deep-kernel mixing weight in (0, 1)")->capture_default_str();
  prox_cmd->add_option("--bandwidth", bandwidth, "Gaussian bandwidth for both kernels (default: median heuristic)");
  prox_cmd->add_option("--threads", threads, "Threads for Dist_nn")->capture_default_str();
  prox_cmd->add_option("--alphas", alphas_text, "Comma-separated auxiliary overlaps; runs the proximity study");
  prox_cmd->add_option("--scenario", scenario_path, "Scenario JSON file for the study");
  prox_cmd->add_option("--spec", spec_path, "OE training spec JSON file for the study");
  prox_cmd->add_option("--seed", seed, "Study seed (default: $SHIFTLAB_SEED or 0)");
  prox_cmd->add_option("--space", space, "Feature space for the study")
      ->check(CLI::IsMember({"input", "penultimate"}))
      ->capture_default_str();
  prox_cmd->add_option("--jobs", jobs, "Parallel models in the study")->capture_default_str();

  // activations
  auto* act_cmd = app.add_subcommand("activations", "Per-layer max-activation histograms and feature magnitudes");
  std::vector<std::string> shift_specs;
  std::string hist_path, train_path;
  std::size_t bins = 64;
  bool magnitude = false;
  act_cmd->add_option("--id", id_path, "ID test pack (reference)")->required();
  act_cmd->add_option("--shift", shift_specs, "Shift pack as NAME=PATH (repeatable)")->required();
  act_cmd->add_option("--train", train_path, "Optional ID training pack to include");
  act_cmd->add_option("--bins", bins, "Histogram bins")->capture_default_str();
  act_cmd->add_option("--histograms", hist_path, "Write histogram CSV to this file");
  act_cmd->add_flag("--magnitude", magnitude, "Print the feature-magnitude report instead of overlaps");

  // report
  auto* report_cmd = app.add_subcommand("report", "Render a results.csv as Markdown or CSV");
  std::string results_path;
  report_cmd->add_option("--results", results_path, "results.csv written by matrix")->required();
  report_cmd->add_option("--format", report_format, "Output format")->check(CLI::IsMember({"md", "csv"}))->capture_default_str();

  // validate
  auto* validate_cmd = app.add_subcommand("validate", "Check packs against the format invariants");
  std::vector<std::string> files;
  validate_cmd->add_option("files", files, "Pack files")->required();

  try {
    seed = default_seed();
    odin_T = 1000.0;
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (synth_cmd->parsed()) {
      auto sc = detail::load_scenario(scenario_path);
      sc.params.seed = seed;
      if (n_train) sc.samples.train = n_train;
      if (n_test) sc.samples.test = n_test;
      if (n_aux) sc.samples.aux = n_aux;
      if (aux_overlap) sc.params.aux_overlap = *aux_overlap;
      const auto scenario = synth::make_scenario(sc.params);
      detail::make_dir(out_dir);
      const auto test = synth::gen_id(scenario, sc.samples.test, "test");
      const std::vector<std::pair<std::string, ShiftPack>> packs{
          {"id_train", synth::to_pack(scenario, synth::gen_id(scenario, sc.samples.train, "train"), Role::id_train)},
          {"id_test", synth::to_pack(scenario, test, Role::id_test)},
          {"ood_test", synth::to_pack(scenario, synth::gen_semantic_ood(scenario, sc.samples.test), Role::ood_test)},
          {"covariate_test", synth::to_pack(scenario, synth::gen_covariate(scenario, test), Role::covariate_test)},
          {"aux_train", synth::to_pack(scenario, synth::gen_aux(scenario, sc.samples.aux), Role::aux_train)}};
      for (const auto& [name, p] : packs) {
        const auto path = out_dir + "/" + name + ".shpk";
        write_pack_file(p, path);
        out << path << '\n';
      }
      detail::write_text(out_dir + "/scenario.json", config::to_json(sc).dump(2) + "\n");
      out << out_dir << "/scenario.json\n";
      return kOk;
    }

    if (train_cmd->parsed()) {
      const auto sc = detail::load_scenario(scenario_path);
      auto spec = detail::load_spec(spec_path);
      if (!loss_override.empty()) spec.loss = toynet::parse_loss(loss_override);
      toynet::ExportOptions exp;
      exp.odin_epsilon = odin_eps;
      exp.odin_temperature = odin_T;
      err << "[train] loss=" << toynet::to_string(spec.loss) << " epochs=" << spec.epochs << " seed=" << seed << '\n';
      const auto run = harness::train_on_scenario(sc, spec, seed, exp);
      detail::make_dir(out_dir);
      toynet::save_checkpoint(run.trained.model, out_dir + "/model.shnt");
      out << out_dir << "/model.shnt\n";
      for (const auto* p : {&run.train, &run.id_test, &run.ood_test, &run.covariate_test, &run.aux}) {
        const auto path = out_dir + "/" + std::string(to_string(p->role)) + ".shpk";
        write_pack_file(*p, path);
        out << path << '\n';
      }
      std::string hist = "epoch,loss,accuracy\n";
      for (std::size_t e = 0; e < run.trained.history.size(); ++e) {
        hist += std::to_string(e + 1) + ',' + format_exact(run.trained.history[e].loss) + ',' +
                format_exact(run.trained.history[e].accuracy) + '\n';
      }
      detail::write_text(out_dir + "/history.csv", hist);
      out << out_dir << "/history.csv\n";
      if (want_proj) {
        const auto train = synth::gen_id(run.scenario, sc.samples.train, "train");
        const auto proj = toynet::project2d(run.trained.model, synth::inputs(train), synth::labels(train), seed);
        std::string csv = "split,index,label,x,y\n";
        for (const auto* p : {&run.id_test, &run.ood_test}) {
          const auto e = proj.embed(p->penultimate());
          const auto y = p->labels();
          for (std::size_t i = 0; i < e.rows(); ++i) {
            csv += std::string(to_string(p->role)) + ',' + std::to_string(i) + ',' + std::to_string(y[i]) + ',' +
                   format_exact(e(i, 0)) + ',' + format_exact(e(i, 1)) + '\n';
          }
        }
        detail::write_text(out_dir + "/proj2d.csv", csv);
        out << out_dir << "/proj2d.csv\n";
      }
      return kOk;
    }

    if (score_cmd->parsed()) {
      const auto pack = read_pack_file(pack_path);
      const auto spec = scores::parse_rule(score_rule.rule);
      const auto params = score_rule.params();
      std::optional<ShiftPack> fit_storage;
      const auto& fit_pack = detail::fit_pack_for(spec, score_rule.fit, fit_storage, pack, err);
      const auto fit = scores::fit_rule(spec, params, fit_pack);
      const auto s = scores::apply_rule(spec, params, fit, pack);
      detail::warn_degenerate(s, err);
      const bool as_csv = format == "csv" || !sidecar.empty();
      std::string text = as_csv ? "index,score\n" : "";
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        if (as_csv) text += std::to_string(i) + ',';
        text += format_exact(s.values[i]) + '\n';
      }
      if (!sidecar.empty()) {
        detail::write_text(sidecar, text);
      } else {
        out << text;
      }
      return kOk;
    }

    if (eval_cmd->parsed()) {
      const auto id = read_pack_file(id_path);
      const auto shift = read_pack_file(shift_path);
      const auto spec = scores::parse_rule(eval_rule.rule);
      const auto params = eval_rule.params();
      std::optional<ShiftPack> fit_storage;
      const auto& fit_pack = detail::fit_pack_for(spec, eval_rule.fit, fit_storage, id, err);
      const auto fit = scores::fit_rule(spec, params, fit_pack);
      const auto a = scores::apply_rule(spec, params, fit, id);
      const auto b = scores::apply_rule(spec, params, fit, shift);
      detail::warn_degenerate(a, err);
      const double v = harness::evaluate_metric(metric, a.values, harness::correctness(id), b.values,
                                                harness::correctness(shift), config::parse_shift_kind(kind));
      if (format == "csv") {
        out << "rule,metric,value\n" << a.rule << ',' << metric << ',' << format4(v) << '\n';
      } else {
        out << format4(v) << '\n';
      }
      return kOk;
    }

    if (matrix_cmd->parsed()) {
      const auto j = config::read_json_file(matrix_path);
      const auto base = std::filesystem::path(matrix_path).parent_path().string();
      auto cfg = config::matrix_from_json(j, base);
      if (matrix_seed) cfg.seeds = {*matrix_seed};
      detail::make_dir(out_dir);
      harness::RunOptions opts;
      opts.jobs = jobs;
      opts.log = &err;
      if (save_scores) opts.scores_dir = out_dir + "/scores";
      opts.provenance = "config " + detail::hex64(fnv1a(j.dump())) + ", shiftlab " + kVersion;
      const auto table = harness::run_matrix(cfg, opts);
      const auto csv = harness::to_csv(table);
      const auto md = harness::to_markdown(table);
      detail::write_text(out_dir + "/results.csv", csv);
      detail::write_text(out_dir + "/results.md", md);
      out << (report_format == "csv" ? csv : md);
      std::size_t failed = 0;
      for (const auto& c : table.cells) failed += c.ok() ? 0 : 1;
      if (failed) err << "warning: " << failed << " of " << table.cells.size() << " cells failed\n";
      return kOk;
    }

    if (sweep_cmd->parsed()) {
      const auto id = read_pack_file(id_path);
      const auto shift = read_pack_file(shift_path);
      const auto spec = scores::parse_rule(sweep_rule.rule);
      const auto grid = detail::parse_list(grid_text, "--grid");
      std::optional<ShiftPack> fit_storage;
      const auto& fit_pack = detail::fit_pack_for(spec, sweep_rule.fit, fit_storage, id, err);
      const auto res = harness::sweep(spec, sweep_rule.params(), param, grid, fit_pack, id, shift, metric,
                                      config::parse_shift_kind(kind));
      if (format == "csv") {
        out << "parameter,value,metric,best\n";
        for (std::size_t i = 0; i < res.curve.size(); ++i) {
          out << param << ',' << format_exact(res.curve[i].value) << ',' << format4(res.curve[i].metric) << ','
              << (i == res.best ? 1 : 0) << '\n';
        }
      } else {
        for (const auto& p : res.curve) out << format_exact(p.value) << '\t' << format4(p.metric) << '\n';
        out << "best\t" << format_exact(res.curve[res.best].value) << '\n';
      }
      return kOk;
    }

    if (prox_cmd->parsed()) {
      if (!alphas_text.empty()) {
        const auto sc = detail::load_scenario(scenario_path);
        auto spec = detail::load_spec(spec_path);
        if (spec_path.empty()) spec.loss = toynet::Loss::oe;
        const auto alphas = detail::parse_list(alphas_text, "--alphas");
        const auto study = harness::proximity_correlation(
            sc, alphas, spec, seed,
            space == "input" ? harness::ProximitySpace::input : harness::ProximitySpace::penultimate, K, jobs);
        out << "alpha,dist_nn,auroc\n";
        for (const auto& p : study.points) {
          out << format_exact(p.alpha) << ',' << format4(p.dist_nn) << ',' << format4(p.auroc) << '\n';
        }
        out << "spearman," << (study.spearman ? format4(*study.spearman) : std::string("undefined")) << '\n';
        return kOk;
      }
      if (ood_path.empty() || aux_path.empty()) {
        throw InvalidArgument("proximity needs --ood and --aux packs (or --alphas for the study)");
      }
      const auto ood = read_pack_file(ood_path);
      const auto aux = read_pack_file(aux_path);
      auto features = [&](const ShiftPack& p) {
        if (!feature_name.empty()) return p.matrix(feature_name);
        if (p.has("features/input")) return p.matrix("features/input");
        return p.penultimate();
      };
      const auto a = proximity::FeatureSet::normalized(features(ood), ood_path);
      const auto b = proximity::FeatureSet::normalized(features(aux), aux_path);
      if (measure == "dist_nn" || measure == "both") out << "dist_nn," << format4(proximity::dist_nn(a, b, K, threads)) << '\n';
      if (measure == "mmd" || measure == "both") {
        proximity::KernelConfig kc;
        kc.epsilon = epsilon;
        if (bandwidth) kc.kappa = kc.q = proximity::Bandwidth::fixed(*bandwidth);
        out << "mmd," << format4(proximity::mmd_dk(a, b, kc)) << '\n';
      }
      return kOk;
    }

    if (act_cmd->parsed()) {
      std::vector<std::pair<std::string, ShiftPack>> loaded;
      loaded.emplace_back("id_test", read_pack_file(id_path));
      if (!train_path.empty()) loaded.emplace_back("id_train", read_pack_file(train_path));
      for (const auto& s : shift_specs) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw InvalidArgument("--shift expects NAME=PATH, got '" + s + "'");
        loaded.emplace_back(s.substr(0, eq), read_pack_file(s.substr(eq + 1)));
      }
      if (magnitude) {
        out << "pack,id_mean_norm,shift_mean_norm,norm_auroc\n";
        for (std::size_t i = 1; i < loaded.size(); ++i) {
          const auto r = harness::magnitude_report(loaded[0].second, loaded[i].second);
          out << loaded[i].first << ',' << format4(r.id_mean_norm) << ',' << format4(r.shift_mean_norm) << ','
              << format4(r.norm_auroc) << '\n';
        }
        return kOk;
      }
      std::vector<std::pair<std::string, const ShiftPack*>> refs;
      for (const auto& [name, p] : loaded) refs.emplace_back(name, &p);
      const auto rep = harness::analyze_activations(refs, "id_test", bins);
      if (!hist_path.empty()) detail::write_text(hist_path, rep.histogram_csv());
      out << rep.overlap_csv();
      return kOk;
    }

    if (report_cmd->parsed()) {
      const auto table = harness::parse_results_csv(detail::read_text(results_path));
      out << harness::emit_report(table, report_format);
      return kOk;
    }

    if (validate_cmd->parsed()) {
      bool all_ok = true;
      for (const auto& f : files) {
        const std::string prefix = files.size() > 1 ? f + ": " : "";
        try {
          read_pack_file(f);
          out << prefix << "OK\n";
        } catch (const PackError& e) {
          all_ok = false;
          out << prefix << "INVALID: " << e.what() << '\n';
        }
      }
      return all_ok ? kOk : kData;
    }
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  err << "internal error: no subcommand ran\n";
  return kInternal;
}

}  // namespace shiftlab::cli
