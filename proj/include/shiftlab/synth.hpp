#pragma once

// Synthetic shift scenarios with independently controllable semantic and
// covariate factors. Semantic identity is the mixture component a sample is
// drawn from; covariate factors are a rotation, translation and additive
// noise applied without touching the label.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "shiftlab/error.hpp"
#include "shiftlab/matrix.hpp"
#include "shiftlab/rng.hpp"
#include "shiftlab/shiftpack.hpp"

namespace shiftlab::synth {

struct Component {
  std::vector<double> mean;
  double sigma = 1.0;
};

struct CovariateShift {
  double rotation = 0.0;  // radians, applied in coordinates (0, 1)
  double noise = 0.0;     // std of additive Gaussian noise
  std::vector<double> translation;
};

enum class Provenance { id, semantic_ood, covariate, aux };

struct LabeledSample {
  std::vector<double> x;
  std::int64_t label = -1;
  Provenance provenance = Provenance::id;
};

struct ShiftScenario {
  std::size_t dim = 0;
  std::vector<Component> id_components;
  std::vector<Component> ood_components;
  // Far-away anchors the auxiliary means interpolate from; one per OOD
  // component.
  std::vector<std::vector<double>> remote_anchors;
  CovariateShift covariate;
  double aux_overlap = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (dim == 0) throw InvalidArgument("scenario: dim must be >= 1");
    if (id_components.empty()) throw InvalidArgument("scenario: needs at least one ID component");
    if (!(aux_overlap >= 0.0 && aux_overlap <= 1.0)) throw InvalidArgument("scenario: aux_overlap outside [0, 1]");
    auto check = [&](const Component& c, const char* what) {
      if (c.mean.size() != dim) throw InvalidArgument(std::string("scenario: ") + what + " mean has wrong dimension");
      if (!(c.sigma > 0.0)) throw InvalidArgument(std::string("scenario: ") + what + " sigma must be > 0");
    };
    for (const auto& c : id_components) check(c, "ID component");
    for (const auto& c : ood_components) check(c, "OOD component");
    if (remote_anchors.size() != ood_components.size()) {
      throw InvalidArgument("scenario: need one remote anchor per OOD component");
    }
    for (const auto& a : remote_anchors) {
      if (a.size() != dim) throw InvalidArgument("scenario: remote anchor has wrong dimension");
    }
    std::vector<const std::vector<double>*> means;
    for (const auto& c : id_components) means.push_back(&c.mean);
    for (const auto& c : ood_components) means.push_back(&c.mean);
    for (std::size_t i = 0; i < means.size(); ++i) {
      for (std::size_t j = i + 1; j < means.size(); ++j) {
        if (*means[i] == *means[j]) throw InvalidArgument("scenario: component means must be pairwise distinct");
      }
    }
    if (!covariate.translation.empty() && covariate.translation.size() != dim) {
      throw InvalidArgument("scenario: covariate translation has wrong dimension");
    }
    if (!(covariate.noise >= 0.0)) throw InvalidArgument("scenario: covariate noise must be >= 0");
  }
};

/// Knobs for generating a scenario from a seed.
struct ScenarioParams {
  std::size_t dim = 16;
  std::size_t id_classes = 6;
  std::size_t ood_components = 4;
  double id_radius = 4.0;
  double ood_radius = 2.5;
  double remote_radius = 8.0;
  double sigma = 1.0;
  double rotation = 0.5;
  double covariate_noise = 0.5;
  double translation_norm = 1.0;
  double aux_overlap = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> random_direction(CounterRng& rng, std::size_t dim, double radius) {
  std::vector<double> v(dim);
  double ss = 0.0;
  for (double& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  const double s = radius / std::sqrt(ss);
  for (double& x : v) x *= s;
  return v;
}

inline LabeledSample draw(const Component& c, std::size_t dim, CounterRng& rng, std::int64_t label, Provenance p) {
  LabeledSample s{std::vector<double>(dim), label, p};
  for (std::size_t j = 0; j < dim; ++j) s.x[j] = c.mean[j] + c.sigma * rng.normal();
  return s;
}

}  // namespace detail

/// Expands generator knobs into a concrete scenario. Component means are
/// random directions at the configured radii; remote anchors are further out.
inline ShiftScenario make_scenario(const ScenarioParams& p) {
  if (p.dim < 2) throw InvalidArgument("scenario: dim must be >= 2");
  ShiftScenario s;
  s.dim = p.dim;
  s.seed = p.seed;
  s.aux_overlap = p.aux_overlap;
  CounterRng rng(p.seed, "scenario/means");
  for (std::size_t k = 0; k < p.id_classes; ++k) {
    s.id_components.push_back({detail::random_direction(rng, p.dim, p.id_radius), p.sigma});
  }
  for (std::size_t k = 0; k < p.ood_components; ++k) {
    s.ood_components.push_back({detail::random_direction(rng, p.dim, p.ood_radius), p.sigma});
  }
  for (std::size_t k = 0; k < p.ood_components; ++k) {
    s.remote_anchors.push_back(detail::random_direction(rng, p.dim, p.remote_radius));
  }
  s.covariate.rotation = p.rotation;
  s.covariate.noise = p.covariate_noise;
  s.covariate.translation = detail::random_direction(rng, p.dim, p.translation_norm);
  s.validate();
  return s;
}

/// ID samples; component chosen uniformly, label = component index.
/// Deterministic given (scenario seed, split tag, n).
inline std::vector<LabeledSample> gen_id(const ShiftScenario& sc, std::size_t n, std::string_view split) {
  sc.validate();
  if (n == 0) throw InvalidArgument("gen_id: n must be >= 1");
  std::vector<LabeledSample> out;
  out.reserve(n);
  const std::string tag = "id/" + std::string(split);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(sc.seed, tag, i);
    const auto k = rng.below(sc.id_components.size());
    out.push_back(detail::draw(sc.id_components[k], sc.dim, rng, static_cast<std::int64_t>(k), Provenance::id));
  }
  return out;
}

/// Samples from the held-out components; labels are -1.
inline std::vector<LabeledSample> gen_semantic_ood(const ShiftScenario& sc, std::size_t n, std::string_view split = "test") {
  sc.validate();
  if (sc.ood_components.empty()) throw InvalidArgument("gen_semantic_ood: scenario has no OOD components");
  std::vector<LabeledSample> out;
  out.reserve(n);
  const std::string tag = "ood/" + std::string(split);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(sc.seed, tag, i);
    const auto k = rng.below(sc.ood_components.size());
    out.push_back(detail::draw(sc.ood_components[k], sc.dim, rng, -1, Provenance::semantic_ood));
  }
  return out;
}

/// Rotation in the first two coordinates, then translation, then additive
/// noise. Labels are preserved.
inline std::vector<LabeledSample> gen_covariate(const ShiftScenario& sc, const std::vector<LabeledSample>& id_samples) {
  sc.validate();
  const auto& cov = sc.covariate;
  if (sc.dim < 2 && cov.rotation != 0.0) throw InvalidArgument("gen_covariate: rotation needs dim >= 2");
  const double c = std::cos(cov.rotation), s = std::sin(cov.rotation);
  std::vector<LabeledSample> out;
  out.reserve(id_samples.size());
  for (std::size_t i = 0; i < id_samples.size(); ++i) {
    const auto& in = id_samples[i];
    if (in.label < 0) throw InvalidArgument("gen_covariate: inputs must carry valid labels");
    if (in.x.size() != sc.dim) throw InvalidArgument("gen_covariate: sample has wrong dimension");
    LabeledSample o{in.x, in.label, Provenance::covariate};
    if (cov.rotation != 0.0) {
      o.x[0] = c * in.x[0] - s * in.x[1];
      o.x[1] = s * in.x[0] + c * in.x[1];
    }
    if (!cov.translation.empty()) {
      for (std::size_t j = 0; j < sc.dim; ++j) o.x[j] += cov.translation[j];
    }
    if (cov.noise > 0.0) {
      CounterRng rng(sc.seed, "covariate", i);
      for (double& v : o.x) v += cov.noise * rng.normal();
    }
    out.push_back(std::move(o));
  }
  return out;
}

/// Auxiliary component means: (1 - alpha) * remote + alpha * ood.
inline std::vector<Component> aux_components(const ShiftScenario& sc) {
  std::vector<Component> comps;
  const double a = sc.aux_overlap;
  for (std::size_t k = 0; k < sc.ood_components.size(); ++k) {
    Component c{std::vector<double>(sc.dim), sc.ood_components[k].sigma};
    if (a == 1.0) {
      c.mean = sc.ood_components[k].mean;
    } else if (a == 0.0) {
      c.mean = sc.remote_anchors[k];
    } else {
      for (std::size_t j = 0; j < sc.dim; ++j) {
        c.mean[j] = (1.0 - a) * sc.remote_anchors[k][j] + a * sc.ood_components[k].mean[j];
      }
    }
    comps.push_back(std::move(c));
  }
  return comps;
}

/// Auxiliary outliers (labels -1).
inline std::vector<LabeledSample> gen_aux(const ShiftScenario& sc, std::size_t n) {
  sc.validate();
  if (n == 0) throw InvalidArgument("gen_aux: n must be >= 1");
  if (sc.ood_components.empty()) throw InvalidArgument("gen_aux: scenario has no OOD components");
  const auto comps = aux_components(sc);
  std::vector<LabeledSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(sc.seed, "aux", i);
    const auto k = rng.below(comps.size());
    out.push_back(detail::draw(comps[k], sc.dim, rng, -1, Provenance::aux));
  }
  return out;
}

inline MatrixD inputs(const std::vector<LabeledSample>& samples) {
  if (samples.empty()) return {};
  MatrixD x(samples.size(), samples.front().x.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].x.begin(), samples[i].x.end(), x.row(i).begin());
  }
  return x;
}

inline std::vector<std::int64_t> labels(const std::vector<LabeledSample>& samples) {
  std::vector<std::int64_t> y(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) y[i] = samples[i].label;
  return y;
}

/// Raw-input pack (no model): inputs under "features/input" plus labels.
inline ShiftPack to_pack(const ShiftScenario& sc, const std::vector<LabeledSample>& samples, Role role) {
  ShiftPack p;
  p.role = role;
  p.class_count = sc.id_components.size();
  p.put(make_float_tensor("features/input", inputs(samples)));
  const auto y = labels(samples);
  p.put(make_int_tensor("labels", {y.size()}, y));
  p.metadata["producer"] = "shiftlab-synth";
  p.metadata["seed"] = std::to_string(sc.seed);
  return p;
}

}  // namespace shiftlab::synth
