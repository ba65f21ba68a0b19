#pragma once

// JSON files for scenarios, training specs and matrix runs. Unknown keys are
// rejected so typos fail loudly instead of silently using a default.

#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "shiftlab/error.hpp"
#include "shiftlab/scores.hpp"
#include "shiftlab/synth.hpp"
#include "shiftlab/toynet.hpp"

namespace shiftlab::config {

using nlohmann::json;

namespace detail {

inline void only_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw InvalidArgument(where + ": unknown key '" + k + "'");
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidArgument(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("'" + path + "' is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Scenario

struct SampleSizes {
  std::size_t train = 2000;
  std::size_t test = 2000;
  std::size_t aux = 2000;
};

struct ScenarioConfig {
  synth::ScenarioParams params;
  SampleSizes samples;
};

inline ScenarioConfig scenario_from_json(const json& j) {
  const std::string where = "scenario";
  detail::only_keys(j, {"dim", "id_classes", "ood_components", "id_radius", "ood_radius", "remote_radius", "sigma",
                        "rotation", "covariate_noise", "translation_norm", "aux_overlap", "seed", "samples"},
                    where);
  ScenarioConfig c;
  auto& p = c.params;
  detail::get_if(j, "dim", p.dim, where);
  detail::get_if(j, "id_classes", p.id_classes, where);
  detail::get_if(j, "ood_components", p.ood_components, where);
  detail::get_if(j, "id_radius", p.id_radius, where);
  detail::get_if(j, "ood_radius", p.ood_radius, where);
  detail::get_if(j, "remote_radius", p.remote_radius, where);
  detail::get_if(j, "sigma", p.sigma, where);
  detail::get_if(j, "rotation", p.rotation, where);
  detail::get_if(j, "covariate_noise", p.covariate_noise, where);
  detail::get_if(j, "translation_norm", p.translation_norm, where);
  detail::get_if(j, "aux_overlap", p.aux_overlap, where);
  detail::get_if(j, "seed", p.seed, where);
  if (j.contains("samples")) {
    const auto& s = j["samples"];
    detail::only_keys(s, {"train", "test", "aux"}, "scenario.samples");
    detail::get_if(s, "train", c.samples.train, "scenario.samples");
    detail::get_if(s, "test", c.samples.test, "scenario.samples");
    detail::get_if(s, "aux", c.samples.aux, "scenario.samples");
  }
  if (p.id_classes == 0) throw InvalidArgument("scenario: id_classes must be >= 1");
  return c;
}

inline json to_json(const ScenarioConfig& c) {
  const auto& p = c.params;
  return json{{"dim", p.dim},
              {"id_classes", p.id_classes},
              {"ood_components", p.ood_components},
              {"id_radius", p.id_radius},
              {"ood_radius", p.ood_radius},
              {"remote_radius", p.remote_radius},
              {"sigma", p.sigma},
              {"rotation", p.rotation},
              {"covariate_noise", p.covariate_noise},
              {"translation_norm", p.translation_norm},
              {"aux_overlap", p.aux_overlap},
              {"seed", p.seed},
              {"samples", {{"train", c.samples.train}, {"test", c.samples.test}, {"aux", c.samples.aux}}}};
}

// ---------------------------------------------------------------------------
// Training

inline toynet::TrainSpec train_spec_from_json(const json& j) {
  const std::string where = "train spec";
  detail::only_keys(j, {"loss", "hidden", "epochs", "batch_size", "learning_rate", "schedule", "momentum",
                        "weight_decay", "oe_lambda", "mixup_alpha", "arpl_open_weight", "partitions", "threads"},
                    where);
  toynet::TrainSpec s;
  if (j.contains("loss")) {
    if (!j["loss"].is_string()) throw InvalidArgument(where + ": key 'loss' has the wrong type");
    s.loss = toynet::parse_loss(j["loss"].get<std::string>());
  }
  detail::get_if(j, "hidden", s.hidden, where);
  detail::get_if(j, "epochs", s.epochs, where);
  detail::get_if(j, "batch_size", s.batch_size, where);
  detail::get_if(j, "learning_rate", s.learning_rate, where);
  if (j.contains("schedule")) {
    const auto sched = j["schedule"].is_string() ? j["schedule"].get<std::string>() : std::string();
    if (sched == "cosine") {
      s.cosine = true;
    } else if (sched == "constant") {
      s.cosine = false;
    } else {
      throw InvalidArgument(where + ": schedule must be \"constant\" or \"cosine\"");
    }
  }
  detail::get_if(j, "momentum", s.momentum, where);
  detail::get_if(j, "weight_decay", s.weight_decay, where);
  detail::get_if(j, "oe_lambda", s.oe_lambda, where);
  if (j.contains("mixup_alpha") && !j["mixup_alpha"].is_null()) {
    double a = 0.0;
    detail::get_if(j, "mixup_alpha", a, where);
    s.mixup_alpha = a;
  }
  detail::get_if(j, "arpl_open_weight", s.arpl.open_weight, where);
  detail::get_if(j, "partitions", s.partitions, where);
  detail::get_if(j, "threads", s.threads, where);
  s.check();
  return s;
}

inline json to_json(const toynet::TrainSpec& s) {
  json j{{"loss", std::string(toynet::to_string(s.loss))},
         {"hidden", s.hidden},
         {"epochs", s.epochs},
         {"batch_size", s.batch_size},
         {"learning_rate", s.learning_rate},
         {"schedule", s.cosine ? "cosine" : "constant"},
         {"momentum", s.momentum},
         {"weight_decay", s.weight_decay},
         {"oe_lambda", s.oe_lambda},
         {"arpl_open_weight", s.arpl.open_weight},
         {"partitions", s.partitions},
         {"threads", s.threads}};
  if (s.mixup_alpha) j["mixup_alpha"] = *s.mixup_alpha;
  return j;
}

// ---------------------------------------------------------------------------
// Matrix runs

enum class ShiftKind { semantic, covariate };

inline ShiftKind parse_shift_kind(const std::string& s) {
  if (s == "semantic") return ShiftKind::semantic;
  if (s == "covariate") return ShiftKind::covariate;
  throw InvalidArgument("dataset kind must be \"semantic\" or \"covariate\", got '" + s + "'");
}

inline std::string_view to_string(ShiftKind k) { return k == ShiftKind::semantic ? "semantic" : "covariate"; }

struct ExternalShift {
  std::string name;
  std::string path;
  ShiftKind kind = ShiftKind::semantic;
};

/// Packs produced elsewhere; evaluated without touching the trainer.
struct ExternalPacks {
  std::optional<std::string> train;  // fit pack for ReAct / SHE; id_test is used when absent
  std::string id_test;
  std::vector<ExternalShift> shifts;
};

struct MethodConfig {
  std::string name;
  std::optional<toynet::TrainSpec> train;
  std::optional<ExternalPacks> external;
};

/// One concrete rule column: identifier plus fully resolved parameters.
struct RuleConfig {
  std::string label;
  scores::RuleSpec spec;
  scores::RuleParams params;
};

struct MatrixConfig {
  ScenarioConfig scenario;
  std::vector<MethodConfig> methods;
  std::vector<RuleConfig> rules;
  std::vector<ShiftKind> datasets = {ShiftKind::semantic};
  std::vector<std::uint64_t> seeds = {0};
  std::vector<std::string> metrics = {"auroc"};
  std::optional<double> odin_epsilon;
  double odin_temperature = 1000.0;

  void check() const {
    if (methods.empty()) throw InvalidArgument("matrix: no methods");
    if (rules.empty()) throw InvalidArgument("matrix: no rules");
    if (seeds.empty()) throw InvalidArgument("matrix: no seeds");
    if (metrics.empty()) throw InvalidArgument("matrix: no metrics");
    std::set<std::string> names;
    for (const auto& m : methods) {
      if (!names.insert(m.name).second) throw InvalidArgument("matrix: duplicate method '" + m.name + "'");
      if (!m.train && !m.external) throw InvalidArgument("matrix: method '" + m.name + "' has no source");
      if (m.train && datasets.empty()) throw InvalidArgument("matrix: trained methods need at least one dataset");
      if (m.external && m.external->shifts.empty()) {
        throw InvalidArgument("matrix: external method '" + m.name + "' has no shift packs");
      }
    }
    std::set<std::string> labels;
    for (const auto& r : rules) {
      if (!labels.insert(r.label).second) throw InvalidArgument("matrix: duplicate rule column '" + r.label + "'");
    }
  }
};

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m{"auroc", "aupr", "oscr", "moaa", "id_accuracy"};
  return m;
}

namespace detail {

inline std::string format_param(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline void set_param(scores::RuleParams& p, const std::string& key, const json& v, const std::string& where) {
  if (key == "ash_variant") {
    const auto s = v.is_string() ? v.get<std::string>() : std::string();
    if (s == "prune") {
      p.ash_variant = scores::AshVariant::prune;
    } else if (s == "scale") {
      p.ash_variant = scores::AshVariant::scale;
    } else {
      throw InvalidArgument(where + ": ash_variant must be \"prune\" or \"scale\"");
    }
    return;
  }
  if (!v.is_number()) throw InvalidArgument(where + ": parameter '" + key + "' must be a number");
  const double d = v.get<double>();
  if (key == "temperature") {
    p.temperature = d;
  } else if (key == "react_percentile") {
    p.react_percentile = d;
  } else if (key == "ash_percentile") {
    p.ash_percentile = d;
  } else {
    throw InvalidArgument(where + ": unknown rule parameter '" + key + "'");
  }
}

}  // namespace detail

/// Expands {"id": "react+energy", "react_percentile": [85, 90]} into one
/// column per combination of grid values (scalars count as one-point grids).
/// Parameters that vary get appended to the label.
inline std::vector<RuleConfig> expand_rule(const json& j) {
  if (j.is_string()) {
    RuleConfig r{j.get<std::string>(), scores::parse_rule(j.get<std::string>()), {}};
    return {r};
  }
  detail::only_keys(j, {"id", "temperature", "react_percentile", "ash_percentile", "ash_variant"}, "rule");
  if (!j.contains("id") || !j["id"].is_string()) throw InvalidArgument("rule: missing string 'id'");
  const auto id = j["id"].get<std::string>();
  const auto spec = scores::parse_rule(id);
  std::vector<std::pair<std::string, std::vector<json>>> axes;
  for (const char* key : {"temperature", "react_percentile", "ash_percentile", "ash_variant"}) {
    if (!j.contains(key)) continue;
    const auto& v = j[key];
    std::vector<json> values;
    if (v.is_array()) {
      for (const auto& e : v) values.push_back(e);
      if (values.empty()) throw InvalidArgument("rule '" + id + "': empty grid for '" + key + "'");
    } else {
      values.push_back(v);
    }
    axes.emplace_back(key, std::move(values));
  }
  std::vector<RuleConfig> out{{id, spec, {}}};
  std::vector<std::string> suffixes{""};
  for (const auto& [key, values] : axes) {
    std::vector<RuleConfig> next;
    std::vector<std::string> next_suffix;
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (const auto& v : values) {
        RuleConfig r = out[i];
        detail::set_param(r.params, key, v, "rule '" + id + "'");
        std::string s = suffixes[i];
        if (values.size() > 1) {
          const auto text = v.is_string() ? v.get<std::string>() : detail::format_param(v.get<double>());
          s += (s.empty() ? "" : ",") + key + "=" + text;
        }
        next.push_back(r);
        next_suffix.push_back(s);
      }
    }
    out = std::move(next);
    suffixes = std::move(next_suffix);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].params.check();
    if (!suffixes[i].empty()) out[i].label = id + "[" + suffixes[i] + "]";
  }
  return out;
}

/// Relative pack paths in an external method resolve against `base_dir`.
inline MatrixConfig matrix_from_json(const json& j, const std::string& base_dir = "") {
  detail::only_keys(j, {"scenario", "methods", "rules", "datasets", "seeds", "metrics", "odin"}, "matrix");
  MatrixConfig c;
  if (j.contains("scenario")) c.scenario = scenario_from_json(j["scenario"]);
  auto resolve = [&](const std::string& p) {
    if (base_dir.empty() || p.empty() || p.front() == '/') return p;
    return base_dir + "/" + p;
  };
  if (!j.contains("methods") || !j["methods"].is_array()) throw InvalidArgument("matrix: 'methods' must be a list");
  for (const auto& mj : j["methods"]) {
    detail::only_keys(mj, {"name", "train", "external"}, "matrix.methods");
    MethodConfig m;
    if (!mj.contains("name") || !mj["name"].is_string()) throw InvalidArgument("matrix.methods: missing 'name'");
    m.name = mj["name"].get<std::string>();
    if (mj.contains("train") == mj.contains("external")) {
      throw InvalidArgument("matrix: method '" + m.name + "' needs exactly one of 'train' or 'external'");
    }
    if (mj.contains("train")) m.train = train_spec_from_json(mj["train"]);
    if (mj.contains("external")) {
      const auto& e = mj["external"];
      detail::only_keys(e, {"train", "id_test", "shifts"}, "matrix.methods.external");
      ExternalPacks x;
      if (!e.contains("id_test")) throw InvalidArgument("matrix: external method '" + m.name + "' has no id_test pack");
      x.id_test = resolve(e["id_test"].get<std::string>());
      if (e.contains("train")) x.train = resolve(e["train"].get<std::string>());
      if (e.contains("shifts")) {
        for (const auto& sj : e["shifts"]) {
          detail::only_keys(sj, {"name", "path", "kind"}, "matrix.methods.external.shifts");
          ExternalShift s;
          s.name = sj.at("name").get<std::string>();
          s.path = resolve(sj.at("path").get<std::string>());
          s.kind = parse_shift_kind(sj.value("kind", std::string("semantic")));
          x.shifts.push_back(std::move(s));
        }
      }
      m.external = std::move(x);
    }
    c.methods.push_back(std::move(m));
  }
  if (!j.contains("rules") || !j["rules"].is_array()) throw InvalidArgument("matrix: 'rules' must be a list");
  for (const auto& rj : j["rules"]) {
    auto expanded = expand_rule(rj);
    c.rules.insert(c.rules.end(), expanded.begin(), expanded.end());
  }
  if (j.contains("datasets")) {
    c.datasets.clear();
    for (const auto& d : j["datasets"]) c.datasets.push_back(parse_shift_kind(d.get<std::string>()));
  }
  detail::get_if(j, "seeds", c.seeds, "matrix");
  if (j.contains("metrics")) {
    c.metrics.clear();
    for (const auto& m : j["metrics"]) {
      const auto name = m.get<std::string>();
      const auto& known = known_metrics();
      if (std::find(known.begin(), known.end(), name) == known.end()) {
        throw InvalidArgument("matrix: unknown metric '" + name + "'");
      }
      c.metrics.push_back(name);
    }
  }
  if (j.contains("odin")) {
    const auto& o = j["odin"];
    detail::only_keys(o, {"epsilon", "temperature"}, "matrix.odin");
    double eps = 0.0;
    detail::get_if(o, "epsilon", eps, "matrix.odin");
    c.odin_epsilon = eps;
    detail::get_if(o, "temperature", c.odin_temperature, "matrix.odin");
  }
  c.check();
  return c;
}

}  // namespace shiftlab::config
