#pragma once

// Benchmark driver: (method x rule x dataset x seed) matrices, parameter
// sweeps, per-layer activation histograms, feature-magnitude reports and the
// auxiliary-proximity study, plus CSV / Markdown rendering.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "shiftlab/config.hpp"
#include "shiftlab/error.hpp"
#include "shiftlab/metrics.hpp"
#include "shiftlab/proximity.hpp"
#include "shiftlab/scores.hpp"
#include "shiftlab/shiftpack.hpp"
#include "shiftlab/stats.hpp"
#include "shiftlab/synth.hpp"
#include "shiftlab/toynet.hpp"

namespace shiftlab {

inline constexpr const char* kVersion = "0.1.0";

/// Fixed four-decimal rendering used by every table.
inline std::string format4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Shortest text that parses back to the same double.
inline std::string format_exact(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace shiftlab

namespace shiftlab::harness {

// ---------------------------------------------------------------------------
// Producing packs from a scenario

struct TrainedRun {
  toynet::TrainResult trained;
  synth::ShiftScenario scenario;
  ShiftPack train, id_test, ood_test, covariate_test, aux;
};

/// Generates a scenario (seeded by `seed`), trains a model on it with the
/// same seed and exports every split through the model.
inline TrainedRun train_on_scenario(const config::ScenarioConfig& sc, const toynet::TrainSpec& spec, std::uint64_t seed,
                                    const toynet::ExportOptions& exp = {}) {
  auto params = sc.params;
  params.seed = seed;
  TrainedRun run;
  run.scenario = synth::make_scenario(params);
  const auto train = synth::gen_id(run.scenario, sc.samples.train, "train");
  const auto test = synth::gen_id(run.scenario, sc.samples.test, "test");
  const auto ood = synth::gen_semantic_ood(run.scenario, sc.samples.test);
  const auto cov = synth::gen_covariate(run.scenario, test);
  const auto aux = synth::gen_aux(run.scenario, sc.samples.aux);

  const auto X = synth::inputs(train);
  const auto A = synth::inputs(aux);
  auto model = toynet::make_model(run.scenario.dim, run.scenario.id_components.size(), spec, seed);
  run.trained = toynet::train(std::move(model), X, synth::labels(train), &A, spec, seed);
  const auto& m = run.trained.model;
  auto export_split = [&](const std::vector<synth::LabeledSample>& s, Role role) {
    auto p = toynet::export_pack(m, synth::inputs(s), synth::labels(s), role, exp);
    p.metadata["scenario_seed"] = std::to_string(seed);
    return p;
  };
  run.train = export_split(train, Role::id_train);
  run.id_test = export_split(test, Role::id_test);
  run.ood_test = export_split(ood, Role::ood_test);
  run.covariate_test = export_split(cov, Role::covariate_test);
  run.aux = export_split(aux, Role::aux_train);
  return run;
}

// ---------------------------------------------------------------------------
// Metrics over score vectors

inline std::vector<bool> correctness(const ShiftPack& pack) {
  const auto pred = scores::predictions(pack);
  std::vector<bool> out(pred.size(), false);
  if (!pack.has("labels")) return out;
  const auto y = pack.labels();
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = y[i] >= 0 && pred[i] == y[i];
  return out;
}

/// One metric for an (ID, shift) pair. For a covariate shift the shifted
/// samples belong to the ID side of OAA; they are still the "other" side for
/// the detection metrics.
inline double evaluate_metric(const std::string& metric, std::span<const double> id_scores,
                              const std::vector<bool>& id_correct, std::span<const double> shift_scores,
                              const std::vector<bool>& shift_correct, config::ShiftKind kind) {
  if (metric == "auroc") return metrics::auroc(id_scores, shift_scores);
  if (metric == "aupr") return metrics::aupr(id_scores, shift_scores);
  if (metric == "oscr") return metrics::oscr(id_scores, id_correct, shift_scores);
  if (metric == "moaa") {
    metrics::OaaInputs in;
    for (std::size_t i = 0; i < id_scores.size(); ++i) in.id_set.push_back({id_scores[i], id_correct[i]});
    for (std::size_t i = 0; i < shift_scores.size(); ++i) {
      if (kind == config::ShiftKind::covariate) {
        in.id_set.push_back({shift_scores[i], shift_correct[i]});
      } else {
        in.ood_set.push_back({shift_scores[i], false});
      }
    }
    in.thresholds = metrics::quantile_thresholds(in);
    return metrics::moaa(in);
  }
  if (metric == "id_accuracy") {
    if (id_correct.empty()) throw InvalidArgument("id_accuracy: no ID samples");
    const auto hits = std::count(id_correct.begin(), id_correct.end(), true);
    return static_cast<double>(hits) / static_cast<double>(id_correct.size());
  }
  throw InvalidArgument("unknown metric '" + metric + "'");
}

// ---------------------------------------------------------------------------
// Result tables

struct Cell {
  std::string method, rule, dataset, metric;
  double mean = 0.0;
  double std = 0.0;
  std::size_t n_seeds = 0;
  std::string failure;  // empty when the cell succeeded

  bool ok() const { return failure.empty(); }
};

struct ResultTable {
  std::vector<Cell> cells;
  std::string provenance;

  const Cell* find(std::string_view method, std::string_view rule, std::string_view dataset,
                   std::string_view metric) const {
    for (const auto& c : cells) {
      if (c.method == method && c.rule == rule && c.dataset == dataset && c.metric == metric) return &c;
    }
    return nullptr;
  }
};

struct RunOptions {
  std::size_t jobs = 1;
  std::optional<std::string> scores_dir;  // per-cell score sidecars
  std::ostream* log = nullptr;
  std::string provenance;
};

namespace detail {

struct ShiftSet {
  std::string name;
  config::ShiftKind kind;
  ShiftPack pack;
};

struct JobPacks {
  ShiftPack fit, id_test;
  std::vector<ShiftSet> shifts;
};

struct Outcome {
  bool ok = false;
  double value = 0.0;
  std::string failure;
};

inline std::vector<std::string> dataset_names(const config::MatrixConfig& cfg, const config::MethodConfig& m) {
  std::vector<std::string> out;
  if (m.external) {
    for (const auto& s : m.external->shifts) out.push_back(s.name);
  } else {
    for (auto k : cfg.datasets) out.emplace_back(config::to_string(k));
  }
  return out;
}

inline JobPacks job_packs(const config::MatrixConfig& cfg, const config::MethodConfig& m, std::uint64_t seed) {
  JobPacks jp;
  if (m.external) {
    const auto& x = *m.external;
    jp.id_test = read_pack_file(x.id_test);
    jp.fit = x.train ? read_pack_file(*x.train) : jp.id_test;
    for (const auto& s : x.shifts) jp.shifts.push_back({s.name, s.kind, read_pack_file(s.path)});
    return jp;
  }
  toynet::ExportOptions exp;
  exp.odin_epsilon = cfg.odin_epsilon;
  exp.odin_temperature = cfg.odin_temperature;
  auto run = train_on_scenario(cfg.scenario, *m.train, seed, exp);
  jp.fit = std::move(run.train);
  jp.id_test = std::move(run.id_test);
  for (auto k : cfg.datasets) {
    jp.shifts.push_back({std::string(config::to_string(k)), k,
                         k == config::ShiftKind::semantic ? run.ood_test : run.covariate_test});
  }
  return jp;
}

inline std::string sanitize(std::string s) {
  for (char& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' || c == '+' || c == '=')) c = '_';
  }
  return s;
}

inline void write_scores(const std::string& path, const std::vector<double>& id, const std::vector<double>& shift) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "split,index,score\n";
  for (std::size_t i = 0; i < id.size(); ++i) out << "id," << i << ',' << format_exact(id[i]) << '\n';
  for (std::size_t i = 0; i < shift.size(); ++i) out << "shift," << i << ',' << format_exact(shift[i]) << '\n';
}

// Values for one (method, seed): indexed [rule][dataset][metric].
using JobResult = std::vector<std::vector<std::vector<Outcome>>>;

inline JobResult run_job(const config::MatrixConfig& cfg, const config::MethodConfig& m, std::uint64_t seed,
                         const RunOptions& opts) {
  const auto datasets = dataset_names(cfg, m);
  JobResult res(cfg.rules.size(),
                std::vector<std::vector<Outcome>>(datasets.size(), std::vector<Outcome>(cfg.metrics.size())));
  auto fail_all = [&](const std::string& why) {
    for (auto& r : res)
      for (auto& d : r)
        for (auto& o : d) o = {false, 0.0, why};
  };
  JobPacks jp;
  try {
    jp = job_packs(cfg, m, seed);
  } catch (const std::exception& e) {
    fail_all(e.what());
    return res;
  }
  const auto id_correct = correctness(jp.id_test);
  for (std::size_t r = 0; r < cfg.rules.size(); ++r) {
    const auto& rule = cfg.rules[r];
    scores::RuleFit fit;
    scores::ScoreVector id_scores;
    try {
      fit = scores::fit_rule(rule.spec, rule.params, jp.fit);
      id_scores = scores::apply_rule(rule.spec, rule.params, fit, jp.id_test);
    } catch (const std::exception& e) {
      for (auto& d : res[r])
        for (auto& o : d) o = {false, 0.0, e.what()};
      continue;
    }
    for (std::size_t d = 0; d < jp.shifts.size(); ++d) {
      const auto& shift = jp.shifts[d];
      scores::ScoreVector shift_scores;
      std::vector<bool> shift_correct;
      try {
        shift_scores = scores::apply_rule(rule.spec, rule.params, fit, shift.pack);
        shift_correct = correctness(shift.pack);
        if (opts.scores_dir) {
          const auto path = *opts.scores_dir + "/" + sanitize(m.name) + "__seed" + std::to_string(seed) + "__" +
                            sanitize(rule.label) + "__" + sanitize(shift.name) + ".csv";
          write_scores(path, id_scores.values, shift_scores.values);
        }
      } catch (const std::exception& e) {
        for (auto& o : res[r][d]) o = {false, 0.0, e.what()};
        continue;
      }
      for (std::size_t k = 0; k < cfg.metrics.size(); ++k) {
        try {
          const double v = evaluate_metric(cfg.metrics[k], id_scores.values, id_correct, shift_scores.values,
                                           shift_correct, shift.kind);
          if (!std::isfinite(v)) throw DataError("metric is not finite");
          res[r][d][k] = {true, v, {}};
        } catch (const std::exception& e) {
          res[r][d][k] = {false, 0.0, e.what()};
        }
      }
    }
  }
  return res;
}

}  // namespace detail

/// Runs every (method, seed) job, possibly in parallel, and aggregates in
/// configuration order. Failures are confined to the cells they affect.
inline ResultTable run_matrix(const config::MatrixConfig& cfg, const RunOptions& opts = {}) {
  cfg.check();
  if (opts.scores_dir) std::filesystem::create_directories(*opts.scores_dir);
  const std::size_t n_jobs = cfg.methods.size() * cfg.seeds.size();
  std::vector<detail::JobResult> results(n_jobs);
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= n_jobs) return;
      const auto& m = cfg.methods[j / cfg.seeds.size()];
      const auto seed = cfg.seeds[j % cfg.seeds.size()];
      if (opts.log) {
        std::lock_guard lock(log_mu);
        *opts.log << "[matrix] " << m.name << " seed " << seed << '\n';
      }
      results[j] = detail::run_job(cfg, m, seed, opts);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opts.jobs, n_jobs));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ResultTable table;
  table.provenance = opts.provenance;
  for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
    const auto& m = cfg.methods[mi];
    const auto datasets = detail::dataset_names(cfg, m);
    for (std::size_t r = 0; r < cfg.rules.size(); ++r) {
      for (std::size_t d = 0; d < datasets.size(); ++d) {
        for (std::size_t k = 0; k < cfg.metrics.size(); ++k) {
          Cell c{m.name, cfg.rules[r].label, datasets[d], cfg.metrics[k], 0.0, 0.0, 0, {}};
          std::vector<double> values;
          for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
            const auto& o = results[mi * cfg.seeds.size() + s][r][d][k];
            if (!o.ok) {
              c.failure = o.failure;
              break;
            }
            values.push_back(o.value);
          }
          if (c.ok()) {
            c.mean = mean(values);
            c.std = sample_stddev(values);
            c.n_seeds = values.size();
          }
          table.cells.push_back(std::move(c));
        }
      }
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

inline std::string failed_text(const Cell& c) { return "FAILED(" + one_line(c.failure) + ")"; }

}  // namespace detail

inline std::string to_csv(const ResultTable& t) {
  std::string out = "method,rule,dataset,metric,mean,std,n_seeds,status\n";
  for (const auto& c : t.cells) {
    out += detail::csv_field(c.method) + ',' + detail::csv_field(c.rule) + ',' + detail::csv_field(c.dataset) + ',' +
           detail::csv_field(c.metric) + ',';
    if (c.ok()) {
      out += format4(c.mean) + ',' + format4(c.std) + ',' + std::to_string(c.n_seeds) + ",ok\n";
    } else {
      out += ",,0," + detail::csv_field(detail::failed_text(c)) + '\n';
    }
  }
  return out;
}

/// Best and runner-up values of one column (higher is better). Ties share a
/// rank.
struct ColumnRanks {
  std::optional<double> best, second;
};

inline ColumnRanks rank_column(const std::vector<const Cell*>& column) {
  ColumnRanks r;
  for (const auto* c : column) {
    if (!c || !c->ok()) continue;
    if (!r.best || c->mean > *r.best) {
      if (r.best) r.second = r.best;
      r.best = c->mean;
    } else if (c->mean < *r.best && (!r.second || c->mean > *r.second)) {
      r.second = c->mean;
    }
  }
  return r;
}

/// One grid per (method, metric): rules down, datasets across. Best value
/// per column in bold, second best underlined.
inline std::string to_markdown(const ResultTable& t) {
  std::vector<std::string> methods, metric_names;
  auto add_unique = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& c : t.cells) {
    add_unique(methods, c.method);
    add_unique(metric_names, c.metric);
  }
  std::string out = "# Results\n\n";
  if (!t.provenance.empty()) out += t.provenance + "\n\n";
  for (const auto& m : methods) {
    for (const auto& metric : metric_names) {
      std::vector<std::string> rules, datasets;
      for (const auto& c : t.cells) {
        if (c.method != m || c.metric != metric) continue;
        add_unique(rules, c.rule);
        add_unique(datasets, c.dataset);
      }
      if (rules.empty()) continue;
      out += "## " + m + " / " + metric + "\n\n| rule |";
      for (const auto& d : datasets) out += ' ' + d + " |";
      out += "\n|---|";
      for (std::size_t i = 0; i < datasets.size(); ++i) out += "---:|";
      out += '\n';
      std::vector<ColumnRanks> ranks;
      for (const auto& d : datasets) {
        std::vector<const Cell*> col;
        for (const auto& r : rules) col.push_back(t.find(m, r, d, metric));
        ranks.push_back(rank_column(col));
      }
      for (const auto& r : rules) {
        out += "| " + r + " |";
        for (std::size_t di = 0; di < datasets.size(); ++di) {
          const auto* c = t.find(m, r, datasets[di], metric);
          std::string text;
          if (!c) {
            text = "-";
          } else if (!c->ok()) {
            text = detail::failed_text(*c);
          } else {
            text = format4(c->mean);
            if (ranks[di].best && c->mean == *ranks[di].best) {
              text = "**" + text + "**";
            } else if (ranks[di].second && c->mean == *ranks[di].second) {
              text = "<u>" + text + "</u>";
            }
          }
          out += ' ' + text + " |";
        }
        out += '\n';
      }
      out += '\n';
    }
  }
  return out;
}

inline std::string emit_report(const ResultTable& t, std::string_view format) {
  if (format == "csv") return to_csv(t);
  if (format == "md" || format == "markdown") return to_markdown(t);
  throw InvalidArgument("unsupported report format '" + std::string(format) + "'");
}

namespace detail {

inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (quoted) throw DataError("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Reads back a table written by to_csv (means rounded to four decimals).
inline ResultTable parse_results_csv(std::string_view text) {
  const auto rows = detail::parse_csv(text);
  if (rows.empty() || rows[0] != std::vector<std::string>{"method", "rule", "dataset", "metric", "mean", "std",
                                                          "n_seeds", "status"}) {
    throw DataError("not a results table (unexpected header)");
  }
  ResultTable t;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 8) throw DataError("results row " + std::to_string(i) + " has " + std::to_string(r.size()) + " fields");
    Cell c{r[0], r[1], r[2], r[3], 0.0, 0.0, 0, {}};
    if (r[7] == "ok") {
      try {
        c.mean = std::stod(r[4]);
        c.std = std::stod(r[5]);
        c.n_seeds = std::stoul(r[6]);
      } catch (const std::exception&) {
        throw DataError("results row " + std::to_string(i) + " has a malformed number");
      }
    } else if (r[7].starts_with("FAILED(") && r[7].ends_with(")")) {
      c.failure = r[7].substr(7, r[7].size() - 8);
    } else {
      throw DataError("results row " + std::to_string(i) + " has unknown status '" + r[7] + "'");
    }
    t.cells.push_back(std::move(c));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Parameter sweeps

struct SweepPoint {
  double value = 0.0;
  double metric = 0.0;
};

struct SweepResult {
  std::string parameter;
  std::vector<SweepPoint> curve;
  std::size_t best = 0;  // first index attaining the maximum
};

inline void set_rule_param(scores::RuleParams& p, const scores::RuleSpec& spec, const std::string& name, double v) {
  using scores::BaseRule;
  using scores::Transform;
  if (name == "react_percentile") {
    if (spec.transform != Transform::react) throw InvalidArgument("react_percentile needs a react+ rule");
    p.react_percentile = v;
  } else if (name == "ash_percentile") {
    if (spec.transform != Transform::ash) throw InvalidArgument("ash_percentile needs an ash+ rule");
    p.ash_percentile = v;
  } else if (name == "temperature") {
    if (spec.base == BaseRule::mls || spec.base == BaseRule::she) {
      throw InvalidArgument("rule '" + scores::to_string(spec) + "' has no temperature");
    }
    p.temperature = v;
  } else {
    throw InvalidArgument("unknown sweep parameter '" + name + "'");
  }
}

inline SweepResult sweep(const scores::RuleSpec& spec, const scores::RuleParams& base, const std::string& parameter,
                         const std::vector<double>& grid, const ShiftPack& fit_pack, const ShiftPack& id_pack,
                         const ShiftPack& shift_pack, const std::string& metric = "auroc",
                         config::ShiftKind kind = config::ShiftKind::semantic) {
  if (grid.empty()) throw InvalidArgument("sweep: empty grid");
  SweepResult out{parameter, {}, 0};
  const auto id_correct = correctness(id_pack);
  const auto shift_correct = correctness(shift_pack);
  for (double v : grid) {
    auto p = base;
    set_rule_param(p, spec, parameter, v);
    const auto fit = scores::fit_rule(spec, p, fit_pack);
    const auto a = scores::apply_rule(spec, p, fit, id_pack);
    const auto b = scores::apply_rule(spec, p, fit, shift_pack);
    out.curve.push_back({v, evaluate_metric(metric, a.values, id_correct, b.values, shift_correct, kind)});
    if (out.curve.back().metric > out.curve[out.best].metric) out.best = out.curve.size() - 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-layer max-activation histograms

struct LayerReport {
  std::string layer;
  std::vector<double> edges;  // bins + 1, shared by every pack
  std::vector<std::pair<std::string, std::vector<std::size_t>>> counts;
  std::vector<std::pair<std::string, double>> overlap;  // reference vs each other pack
};

struct ActivationReport {
  std::string reference;
  std::vector<LayerReport> layers;

  std::string histogram_csv() const {
    std::string out = "layer,bin_left,bin_right,count,pack\n";
    for (const auto& l : layers) {
      for (const auto& [pack, counts] : l.counts) {
        for (std::size_t b = 0; b < counts.size(); ++b) {
          out += detail::csv_field(l.layer) + ',' + format_exact(l.edges[b]) + ',' + format_exact(l.edges[b + 1]) +
                 ',' + std::to_string(counts[b]) + ',' + detail::csv_field(pack) + '\n';
        }
      }
    }
    return out;
  }

  std::string overlap_csv() const {
    std::string out = "layer,pack,overlap\n";
    for (const auto& l : layers) {
      for (const auto& [pack, v] : l.overlap) {
        out += detail::csv_field(l.layer) + ',' + detail::csv_field(pack) + ',' + format4(v) + '\n';
      }
    }
    return out;
  }
};

inline std::vector<double> row_max(const MatrixD& m) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    if (r.empty()) throw DataError("row_max: zero-width features");
    out[i] = *std::max_element(r.begin(), r.end());
  }
  return out;
}

/// Histogram intersection of two count vectors after normalising each to
/// unit mass. Computed as sum min(a_i * n_b, b_i * n_a) / (n_a * n_b) so a
/// histogram against itself gives exactly 1.
inline double histogram_overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) throw InvalidArgument("histogram_overlap: bin counts differ");
  double na = 0.0, nb = 0.0;
  for (auto v : a) na += static_cast<double>(v);
  for (auto v : b) nb += static_cast<double>(v);
  if (na == 0.0 || nb == 0.0) throw InvalidArgument("histogram_overlap: empty histogram");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += std::min(static_cast<double>(a[i]) * nb, static_cast<double>(b[i]) * na);
  }
  return s / (na * nb);
}

/// For every "features/*" layer of the reference pack: per-sample maximum
/// activation in each pack, histograms on shared edges spanning the pooled
/// [min, max], and the overlap between the reference and every other pack.
inline ActivationReport analyze_activations(const std::vector<std::pair<std::string, const ShiftPack*>>& packs,
                                            const std::string& reference, std::size_t bins = 64) {
  if (bins == 0) throw InvalidArgument("analyze_activations: bins must be >= 1");
  const ShiftPack* ref = nullptr;
  for (const auto& [name, p] : packs) {
    if (name == reference) ref = p;
  }
  if (!ref) throw InvalidArgument("analyze_activations: no pack named '" + reference + "'");
  ActivationReport rep{reference, {}};
  const auto layers = ref->feature_names();
  if (layers.empty()) throw DataError("analyze_activations: reference pack has no features/* tensors");
  for (const auto& layer : layers) {
    LayerReport lr{layer, {}, {}, {}};
    std::vector<std::vector<double>> maxima;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [name, p] : packs) {
      if (!p->has(layer)) throw DataError("pack '" + name + "' is missing layer '" + layer + "'");
      maxima.push_back(row_max(p->matrix(layer)));
      for (double v : maxima.back()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!std::isfinite(lo)) throw DataError("analyze_activations: layer '" + layer + "' has no samples");
    for (std::size_t b = 0; b <= bins; ++b) {
      lr.edges.push_back(b == bins ? hi : lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
    }
    const double width = hi - lo;
    for (std::size_t i = 0; i < packs.size(); ++i) {
      std::vector<std::size_t> counts(bins, 0);
      for (double v : maxima[i]) {
        std::size_t b = 0;
        if (width > 0.0) {
          b = static_cast<std::size_t>((v - lo) / width * static_cast<double>(bins));
          b = std::min(b, bins - 1);
        }
        ++counts[b];
      }
      lr.counts.emplace_back(packs[i].first, std::move(counts));
    }
    const std::vector<std::size_t>* ref_counts = nullptr;
    for (const auto& [name, c] : lr.counts) {
      if (name == reference) ref_counts = &c;
    }
    for (const auto& [name, c] : lr.counts) {
      if (name == reference) continue;
      lr.overlap.emplace_back(name, histogram_overlap(*ref_counts, c));
    }
    rep.layers.push_back(std::move(lr));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Feature magnitudes

struct MagnitudeReport {
  double id_mean_norm = 0.0;
  double shift_mean_norm = 0.0;
  double norm_auroc = 0.0;  // the L2 norm used as an ID score
};

inline std::vector<double> row_norms(const MatrixD& m) {
  std::vector<double> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double v : m.row(i)) s += v * v;
    out[i] = std::sqrt(s);
  }
  return out;
}

inline MagnitudeReport magnitude_report(const MatrixD& id_features, const MatrixD& shift_features) {
  if (id_features.rows() == 0 || shift_features.rows() == 0) throw DataError("magnitude_report: empty features");
  const auto a = row_norms(id_features), b = row_norms(shift_features);
  return {mean(a), mean(b), metrics::auroc(a, b)};
}

/// Uses each pack's penultimate features.
inline MagnitudeReport magnitude_report(const ShiftPack& id_pack, const ShiftPack& shift_pack) {
  return magnitude_report(id_pack.penultimate(), shift_pack.penultimate());
}

// ---------------------------------------------------------------------------
// Auxiliary proximity vs OE benefit

enum class ProximitySpace { input, penultimate };

struct ProximityPoint {
  double alpha = 0.0;
  double dist_nn = 0.0;
  double auroc = 0.0;
};

struct ProximityStudy {
  std::vector<ProximityPoint> points;
  std::optional<double> spearman;  // empty when undefined (e.g. constant grid)
};

/// Trains one OE model per auxiliary-overlap value and relates Dist_nn
/// between test OOD and the auxiliary set to the model's MSP AUROC.
inline ProximityStudy proximity_correlation(const config::ScenarioConfig& sc, const std::vector<double>& alphas,
                                            const toynet::TrainSpec& spec, std::uint64_t seed,
                                            ProximitySpace space = ProximitySpace::input, std::size_t K = 10,
                                            std::size_t jobs = 1) {
  if (alphas.size() < 3) throw InvalidArgument("proximity_correlation: needs at least three alpha values");
  if (spec.loss != toynet::Loss::oe) throw InvalidArgument("proximity_correlation: spec must use the oe loss");
  ProximityStudy study;
  study.points.resize(alphas.size());
  std::vector<std::exception_ptr> errors(alphas.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= alphas.size()) return;
      try {
        auto cfg = sc;
        cfg.params.aux_overlap = alphas[i];
        const auto run = train_on_scenario(cfg, spec, seed);
        const auto id_s = scores::msp(run.id_test.matrix("logits"));
        const auto ood_s = scores::msp(run.ood_test.matrix("logits"));
        MatrixD ood_f, aux_f;
        if (space == ProximitySpace::input) {
          ood_f = synth::inputs(synth::gen_semantic_ood(run.scenario, cfg.samples.test));
          aux_f = synth::inputs(synth::gen_aux(run.scenario, cfg.samples.aux));
        } else {
          ood_f = run.ood_test.penultimate();
          aux_f = run.aux.penultimate();
        }
        const double d = proximity::dist_nn(proximity::FeatureSet::normalized(ood_f),
                                            proximity::FeatureSet::normalized(aux_f), K);
        study.points[i] = {alphas[i], d, metrics::auroc(id_s.values, ood_s.values)};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, alphas.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<double> d, a;
  for (const auto& p : study.points) {
    d.push_back(p.dist_nn);
    a.push_back(p.auroc);
  }
  study.spearman = spearman(d, a);
  return study;
}

}  // namespace shiftlab::harness
