#pragma once

// Post-hoc scoring rules. Every rule returns one value per sample, oriented
// so that higher means more in-distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shiftlab/error.hpp"
#include "shiftlab/matrix.hpp"
#include "shiftlab/shiftpack.hpp"
#include "shiftlab/stats.hpp"

namespace shiftlab::scores {

struct ScoreVector {
  std::string rule;
  std::vector<double> values;
  // Set when ODIN ran without input perturbation (no perturbed logits).
  bool degenerate = false;
};

enum class AshVariant { prune, scale };

struct RuleParams {
  double temperature = 1.0;
  double react_percentile = 90.0;
  double ash_percentile = 90.0;
  AshVariant ash_variant = AshVariant::prune;
  double odin_epsilon = 0.0;

  void check() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InvalidArgument("temperature must be > 0");
    if (!(react_percentile >= 0.0 && react_percentile <= 100.0)) throw InvalidArgument("react percentile outside [0, 100]");
    if (!(ash_percentile >= 0.0 && ash_percentile <= 100.0)) throw InvalidArgument("ash percentile outside [0, 100]");
    if (!(odin_epsilon >= 0.0)) throw InvalidArgument("odin epsilon must be >= 0");
  }
};

struct ShePrototypes {
  MatrixD means;                    // [C, D]
  std::vector<std::size_t> counts;  // [C]
};

namespace detail {

inline void require_finite(const MatrixD& m, const char* what) {
  for (double v : m.flat()) {
    if (!std::isfinite(v)) throw DataError(std::string(what) + " contains a non-finite value");
  }
}

inline double row_max(std::span<const double> r) { return *std::max_element(r.begin(), r.end()); }

inline std::size_t row_argmax(std::span<const double> r) {
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

// softmax(row / T) written into out.
inline void softmax_row(std::span<const double> r, double T, std::span<double> out) {
  const double m = row_max(r);
  double sum = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    out[k] = std::exp((r[k] - m) / T);
    sum += out[k];
  }
  for (double& v : out) v /= sum;
}

}  // namespace detail

/// Maximum softmax probability at temperature T.
inline ScoreVector msp(const MatrixD& logits, double T = 1.0) {
  if (logits.cols() < 2) throw InvalidArgument("msp needs at least two classes");
  if (!(T > 0.0)) throw InvalidArgument("temperature must be > 0");
  detail::require_finite(logits, "logits");
  ScoreVector s{"msp", std::vector<double>(logits.rows()), false};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto r = logits.row(i);
    const double m = detail::row_max(r);
    double sum = 0.0;
    for (double z : r) sum += std::exp((z - m) / T);
    // The max entry contributes exp(0) = 1 to the numerator.
    s.values[i] = 1.0 / sum;
  }
  return s;
}

/// Maximum logit.
inline ScoreVector mls(const MatrixD& logits) {
  if (logits.cols() < 1) throw InvalidArgument("mls needs at least one class");
  detail::require_finite(logits, "logits");
  ScoreVector s{"mls", std::vector<double>(logits.rows()), false};
  for (std::size_t i = 0; i < logits.rows(); ++i) s.values[i] = detail::row_max(logits.row(i));
  return s;
}

/// Negative free energy T * logsumexp(z / T), max-shifted.
inline ScoreVector energy(const MatrixD& logits, double T = 1.0) {
  if (logits.cols() < 1) throw InvalidArgument("energy needs at least one class");
  if (!(T > 0.0)) throw InvalidArgument("temperature must be > 0");
  detail::require_finite(logits, "logits");
  ScoreVector s{"energy", std::vector<double>(logits.rows()), false};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto r = logits.row(i);
    const double m = detail::row_max(r);
    double sum = 0.0;
    for (double z : r) sum += std::exp((z - m) / T);
    s.values[i] = m + T * std::log(sum);
  }
  return s;
}

/// Temperature-scaled MSP on perturbed logits when a full-model producer
/// supplied them; otherwise plain temperature-scaled MSP flagged degenerate.
inline ScoreVector odin_temperature(const MatrixD& logits, double T, const MatrixD* perturbed_logits = nullptr) {
  if (perturbed_logits) {
    if (perturbed_logits->rows() != logits.rows() || perturbed_logits->cols() != logits.cols()) {
      throw DataError("perturbed_logits shape differs from logits");
    }
    auto s = msp(*perturbed_logits, T);
    s.rule = "odin";
    return s;
  }
  auto s = msp(logits, T);
  s.rule = "odin";
  s.degenerate = true;
  return s;
}

/// L1 norm of the gradient of KL(u || softmax(z / T)) with respect to the
/// final linear layer: ||softmax(z/T) - u||_1 * ||f||_1.
inline ScoreVector gradnorm(const MatrixD& logits, const MatrixD& features, double T = 1.0) {
  if (features.rows() != logits.rows()) throw DataError("gradnorm: features and logits disagree on N");
  if (!(T > 0.0)) throw InvalidArgument("temperature must be > 0");
  detail::require_finite(logits, "logits");
  detail::require_finite(features, "features");
  const std::size_t C = logits.cols();
  const double u = 1.0 / static_cast<double>(C);
  ScoreVector s{"gradnorm", std::vector<double>(logits.rows()), false};
  std::vector<double> p(C);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    detail::softmax_row(logits.row(i), T, p);
    double dz = 0.0;
    for (double pk : p) dz += std::abs(pk - u);
    double fl1 = 0.0;
    for (double f : features.row(i)) fl1 += std::abs(f);
    s.values[i] = dz * fl1;
  }
  return s;
}

/// Per-class mean feature over correctly classified training samples.
inline ShePrototypes she_fit(const MatrixD& features, const MatrixD& logits, std::span<const std::int64_t> labels) {
  const std::size_t N = features.rows(), D = features.cols(), C = logits.cols();
  if (logits.rows() != N || labels.size() != N) throw DataError("she_fit: features, logits and labels disagree on N");
  ShePrototypes p{MatrixD(C, D, 0.0), std::vector<std::size_t>(C, 0)};
  for (std::size_t i = 0; i < N; ++i) {
    const auto y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw DataError("she_fit: training labels must be valid classes");
    if (detail::row_argmax(logits.row(i)) != static_cast<std::size_t>(y)) continue;
    auto m = p.means.row(static_cast<std::size_t>(y));
    const auto f = features.row(i);
    for (std::size_t j = 0; j < D; ++j) m[j] += f[j];
    ++p.counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t k = 0; k < C; ++k) {
    if (p.counts[k] == 0) throw DataError("she_fit: class " + std::to_string(k) + " has no correctly classified sample");
    for (double& v : p.means.row(k)) v /= static_cast<double>(p.counts[k]);
  }
  return p;
}

/// Inner product with the prototype of the predicted class.
inline ScoreVector she_score(const MatrixD& features, const MatrixD& logits, const ShePrototypes& protos) {
  if (features.rows() != logits.rows()) throw DataError("she_score: features and logits disagree on N");
  if (features.cols() != protos.means.cols() || logits.cols() != protos.means.rows()) {
    throw DataError("she_score: dimension mismatch with prototypes");
  }
  ScoreVector s{"she", std::vector<double>(features.rows()), false};
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto k = detail::row_argmax(logits.row(i));
    const auto m = protos.means.row(k);
    const auto f = features.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) dot += f[j] * m[j];
    s.values[i] = dot;
  }
  return s;
}

/// Single global clipping threshold: nearest-rank p-th percentile of all
/// ID activation values.
inline double react_threshold(const MatrixD& id_features, double p) {
  if (id_features.empty()) throw InvalidArgument("react_threshold: empty features");
  return nearest_rank_percentile(id_features.flat(), p);
}

inline MatrixD react_transform(const MatrixD& features, double c) {
  if (!std::isfinite(c)) throw InvalidArgument("react_transform: threshold must be finite");
  MatrixD out = features;
  for (double& v : out.flat()) v = std::min(v, c);
  return out;
}

/// Per-sample activation shaping. Values strictly below the row's
/// nearest-rank p-th percentile are zeroed; the scale variant then rescales
/// survivors so the row sum matches the pre-prune sum (factor 1 when the
/// pruned sum is zero).
inline MatrixD ash_transform(const MatrixD& features, double p, AshVariant variant) {
  if (!(p >= 0.0 && p <= 100.0)) throw InvalidArgument("ash percentile outside [0, 100]");
  MatrixD out = features;
  std::vector<double> sorted;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    if (r.empty()) continue;
    sorted.assign(r.begin(), r.end());
    std::sort(sorted.begin(), sorted.end());
    const double t = nearest_rank_sorted(sorted, p);
    double before = 0.0, after = 0.0;
    for (double& v : r) {
      before += v;
      if (v < t) v = 0.0;
      after += v;
    }
    if (variant == AshVariant::scale && after != 0.0) {
      const double factor = before / after;
      if (factor != 1.0) {
        for (double& v : r) v *= factor;
      }
    }
  }
  return out;
}

/// logits = features * W^T + b, accumulated in index order.
inline MatrixD recompute_logits(const MatrixD& features, const MatrixD& W, std::span<const double> b) {
  if (W.cols() != features.cols()) throw DataError("recompute_logits: fc.weight width does not match features");
  if (b.size() != W.rows()) throw DataError("recompute_logits: fc.bias length does not match fc.weight");
  MatrixD out(features.rows(), W.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto f = features.row(i);
    for (std::size_t k = 0; k < W.rows(); ++k) {
      const auto w = W.row(k);
      double z = 0.0;
      for (std::size_t j = 0; j < f.size(); ++j) z += w[j] * f[j];
      out(i, k) = z + b[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rule identifiers: msp, mls, energy, odin, gradnorm, she, optionally
// prefixed by an activation transform: react+<rule>, ash+<rule>.

enum class BaseRule { msp, mls, energy, odin, gradnorm, she };
enum class Transform { none, react, ash };

struct RuleSpec {
  Transform transform = Transform::none;
  BaseRule base = BaseRule::msp;

  bool needs_features() const {
    return transform != Transform::none || base == BaseRule::gradnorm || base == BaseRule::she;
  }
  bool needs_fit() const { return transform == Transform::react || base == BaseRule::she; }
};

inline std::string_view to_string(BaseRule r) {
  switch (r) {
    case BaseRule::msp: return "msp";
    case BaseRule::mls: return "mls";
    case BaseRule::energy: return "energy";
    case BaseRule::odin: return "odin";
    case BaseRule::gradnorm: return "gradnorm";
    case BaseRule::she: return "she";
  }
  return "msp";
}

inline std::string to_string(const RuleSpec& r) {
  std::string prefix = r.transform == Transform::react ? "react+" : r.transform == Transform::ash ? "ash+" : "";
  return prefix + std::string(to_string(r.base));
}

inline RuleSpec parse_rule(std::string_view id) {
  RuleSpec spec;
  if (id.starts_with("react+")) {
    spec.transform = Transform::react;
    id.remove_prefix(6);
  } else if (id.starts_with("ash+")) {
    spec.transform = Transform::ash;
    id.remove_prefix(4);
  }
  for (BaseRule b : {BaseRule::msp, BaseRule::mls, BaseRule::energy, BaseRule::odin, BaseRule::gradnorm, BaseRule::she}) {
    if (to_string(b) == id) {
      spec.base = b;
      return spec;
    }
  }
  throw InvalidArgument("unknown scoring rule '" + std::string(id) + "'");
}

/// Quantities a rule derives from ID training data.
struct RuleFit {
  std::optional<double> react_threshold;
  std::optional<ShePrototypes> she;
};

namespace detail {

struct Head {
  MatrixD W;
  std::vector<double> b;
};

inline Head head_of(const ShiftPack& pack) {
  if (!pack.has("fc.weight") || !pack.has("fc.bias")) {
    throw DataError("rule needs fc.weight and fc.bias in the pack");
  }
  Head h{pack.matrix("fc.weight"), {}};
  const auto b = pack.matrix("fc.bias");
  h.b.assign(b.data().begin(), b.data().end());
  return h;
}

// Applies the rule's activation transform and produces matching logits.
// Rows the transform leaves bit-identical keep the producer's stored logits,
// so an identity transform reproduces the untransformed rule exactly.
inline std::pair<MatrixD, MatrixD> transformed_inputs(const RuleSpec& spec, const RuleParams& params,
                                                     const RuleFit& fit, const ShiftPack& pack) {
  MatrixD logits = pack.matrix("logits");
  if (!spec.needs_features()) return {std::move(logits), MatrixD{}};
  MatrixD features = pack.penultimate();
  if (features.rows() != logits.rows()) throw DataError("features and logits disagree on N");
  if (spec.transform == Transform::none) return {std::move(logits), std::move(features)};

  MatrixD shaped;
  if (spec.transform == Transform::react) {
    if (!fit.react_threshold) throw InvalidArgument("react rule used without a fitted threshold");
    shaped = react_transform(features, *fit.react_threshold);
  } else {
    shaped = ash_transform(features, params.ash_percentile, params.ash_variant);
  }
  const auto head = head_of(pack);
  if (head.W.cols() != features.cols()) throw DataError("fc.weight width does not match penultimate features");
  for (std::size_t i = 0; i < shaped.rows(); ++i) {
    const auto a = features.row(i);
    const auto s = shaped.row(i);
    if (std::equal(a.begin(), a.end(), s.begin())) continue;
    MatrixD one(1, s.size(), std::vector<double>(s.begin(), s.end()));
    const auto z = recompute_logits(one, head.W, head.b);
    std::copy(z.row(0).begin(), z.row(0).end(), logits.row(i).begin());
  }
  return {std::move(logits), std::move(shaped)};
}

}  // namespace detail

/// Derives the rule's ID-side statistics from a training (or reference ID)
/// pack: the ReAct threshold and SHE prototypes, as the rule requires.
inline RuleFit fit_rule(const RuleSpec& spec, const RuleParams& params, const ShiftPack& id_pack) {
  params.check();
  RuleFit fit;
  if (spec.transform == Transform::react) {
    fit.react_threshold = react_threshold(id_pack.penultimate(), params.react_percentile);
  }
  if (spec.base == BaseRule::she) {
    auto [logits, features] = detail::transformed_inputs(spec, params, fit, id_pack);
    fit.she = she_fit(features, logits, id_pack.labels());
  }
  return fit;
}

/// Scores every sample of a pack with a (possibly transformed) rule.
inline ScoreVector apply_rule(const RuleSpec& spec, const RuleParams& params, const RuleFit& fit,
                              const ShiftPack& pack) {
  params.check();
  auto [logits, features] = detail::transformed_inputs(spec, params, fit, pack);
  ScoreVector s;
  switch (spec.base) {
    case BaseRule::msp: s = msp(logits, params.temperature); break;
    case BaseRule::mls: s = mls(logits); break;
    case BaseRule::energy: s = energy(logits, params.temperature); break;
    case BaseRule::odin: {
      if (spec.transform == Transform::none && pack.has("perturbed_logits")) {
        const auto p = pack.matrix("perturbed_logits");
        s = odin_temperature(logits, params.temperature, &p);
      } else {
        s = odin_temperature(logits, params.temperature, nullptr);
      }
      break;
    }
    case BaseRule::gradnorm: s = gradnorm(logits, features, params.temperature); break;
    case BaseRule::she:
      if (!fit.she) throw InvalidArgument("she rule used without fitted prototypes");
      s = she_score(features, logits, *fit.she);
      break;
  }
  s.rule = to_string(spec);
  return s;
}

/// Closed-set predictions (argmax of the stored logits).
inline std::vector<std::int64_t> predictions(const ShiftPack& pack) {
  const auto logits = pack.matrix("logits");
  std::vector<std::int64_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = static_cast<std::int64_t>(detail::row_argmax(logits.row(i)));
  return out;
}

}  // namespace shiftlab::scores
