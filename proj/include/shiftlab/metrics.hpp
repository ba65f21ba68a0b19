#pragma once

// Detection metrics over ID-ness scores (higher = more in-distribution).
// A sample is predicted ID at threshold t when score >= t.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "shiftlab/error.hpp"
#include "shiftlab/stats.hpp"

namespace shiftlab::metrics {

namespace detail {

inline void require_sides(std::size_t m, std::size_t n, const char* what) {
  if (m == 0 || n == 0) throw InvalidArgument(std::string(what) + ": both ID and OOD scores must be non-empty");
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw InvalidArgument(std::string(what) + ": non-finite score");
  }
}

struct Tagged {
  double score;
  bool id;
  bool correct;
};

// Descending by score.
inline std::vector<Tagged> pooled_desc(std::span<const double> id, std::span<const double> ood,
                                       const std::vector<bool>* id_correct = nullptr) {
  std::vector<Tagged> all;
  all.reserve(id.size() + ood.size());
  for (std::size_t i = 0; i < id.size(); ++i) all.push_back({id[i], true, id_correct ? (*id_correct)[i] : true});
  for (double s : ood) all.push_back({s, false, false});
  std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) { return a.score > b.score; });
  return all;
}

}  // namespace detail

/// P(ID score > OOD score) with ties counted half, via the Mann-Whitney
/// rank sum with average ranks.
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  detail::require_sides(id_scores.size(), ood_scores.size(), "auroc");
  detail::require_finite(id_scores, "auroc");
  detail::require_finite(ood_scores, "auroc");
  std::vector<double> pooled(id_scores.begin(), id_scores.end());
  pooled.insert(pooled.end(), ood_scores.begin(), ood_scores.end());
  const auto ranks = average_ranks(pooled);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < id_scores.size(); ++i) rank_sum += ranks[i];
  const double m = static_cast<double>(id_scores.size());
  const double n = static_cast<double>(ood_scores.size());
  return (rank_sum - m * (m + 1.0) / 2.0) / (m * n);
}

/// Average precision with ID as the positive class: step-wise sum of
/// precision over recall increments, one step per distinct score.
inline double aupr(std::span<const double> id_scores, std::span<const double> ood_scores) {
  detail::require_sides(id_scores.size(), ood_scores.size(), "aupr");
  detail::require_finite(id_scores, "aupr");
  detail::require_finite(ood_scores, "aupr");
  const auto all = detail::pooled_desc(id_scores, ood_scores);
  const double m = static_cast<double>(id_scores.size());
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, area = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) {
      (all[j].id ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / m;
    if (recall > prev_recall) area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return area;
}

/// Open-set classification rate: area under correct-classification rate
/// vs false-positive rate as the threshold sweeps every distinct score,
/// trapezoid rule over FPR in [0, 1].
inline double oscr(std::span<const double> id_scores, const std::vector<bool>& id_correct,
                   std::span<const double> ood_scores) {
  detail::require_sides(id_scores.size(), ood_scores.size(), "oscr");
  if (id_correct.size() != id_scores.size()) throw InvalidArgument("oscr: id_correct length mismatch");
  detail::require_finite(id_scores, "oscr");
  detail::require_finite(ood_scores, "oscr");
  const auto all = detail::pooled_desc(id_scores, ood_scores, &id_correct);
  const double m = static_cast<double>(id_scores.size());
  const double n = static_cast<double>(ood_scores.size());
  double cc = 0.0, fp = 0.0, prev_fpr = 0.0, prev_ccr = 0.0, area = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) {
      if (all[j].id) {
        if (all[j].correct) cc += 1.0;
      } else {
        fp += 1.0;
      }
      ++j;
    }
    const double fpr = fp / n, ccr = cc / m;
    area += (fpr - prev_fpr) * (ccr + prev_ccr) / 2.0;
    prev_fpr = fpr;
    prev_ccr = ccr;
    i = j;
  }
  return area;
}

// ---------------------------------------------------------------------------
// Outlier-aware accuracy.

struct ScoredSample {
  double score = 0.0;
  bool correct = false;  // closed-set prediction correct; ignored for OOD
};

/// How true-OOD samples earn credit. `rejected` counts OOD samples predicted
/// OOD at the threshold. `misclassified` counts every true-OOD sample whose
/// class prediction is wrong, i.e. all of them, independent of threshold.
enum class OodCredit { rejected, misclassified };

struct OaaInputs {
  std::vector<ScoredSample> id_set;   // includes covariate-shifted samples
  std::vector<ScoredSample> ood_set;  // semantic OOD
  std::vector<double> thresholds;     // strictly increasing
  OodCredit ood_credit = OodCredit::rejected;
};

inline double oaa(const OaaInputs& in, double threshold) {
  if (!std::isfinite(threshold)) throw InvalidArgument("oaa: threshold must be finite");
  const std::size_t total = in.id_set.size() + in.ood_set.size();
  if (total == 0) throw InvalidArgument("oaa: no samples");
  std::size_t hits = 0;
  for (const auto& s : in.id_set) {
    if (s.score >= threshold && s.correct) ++hits;
  }
  for (const auto& s : in.ood_set) {
    if (in.ood_credit == OodCredit::misclassified || s.score < threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Mean OAA over the configured thresholds.
inline double moaa(const OaaInputs& in) {
  if (in.thresholds.empty()) throw InvalidArgument("moaa: no thresholds");
  double sum = 0.0;
  for (double t : in.thresholds) sum += oaa(in, t);
  return sum / static_cast<double>(in.thresholds.size());
}

/// Default threshold grid: nearest-rank quantiles of the pooled scores at
/// levels 100 * i / (N - 1), i = 0..N-1, de-duplicated so the grid is
/// strictly increasing.
inline std::vector<double> quantile_thresholds(const OaaInputs& in, std::size_t N = 100) {
  if (N == 0) throw InvalidArgument("quantile_thresholds: N must be >= 1");
  std::vector<double> pooled;
  pooled.reserve(in.id_set.size() + in.ood_set.size());
  for (const auto& s : in.id_set) pooled.push_back(s.score);
  for (const auto& s : in.ood_set) pooled.push_back(s.score);
  if (pooled.empty()) throw InvalidArgument("quantile_thresholds: no samples");
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> out;
  for (std::size_t i = 0; i < N; ++i) {
    const double level = N == 1 ? 50.0 : 100.0 * static_cast<double>(i) / static_cast<double>(N - 1);
    const double t = nearest_rank_sorted(pooled, level);
    if (out.empty() || t > out.back()) out.push_back(t);
  }
  return out;
}

/// Builds OAA inputs from score vectors; fills the default quantile grid.
inline OaaInputs make_oaa_inputs(std::span<const double> id_scores, const std::vector<bool>& id_correct,
                                 std::span<const double> ood_scores, std::size_t n_thresholds = 100) {
  if (id_correct.size() != id_scores.size()) throw InvalidArgument("oaa: id_correct length mismatch");
  OaaInputs in;
  for (std::size_t i = 0; i < id_scores.size(); ++i) in.id_set.push_back({id_scores[i], id_correct[i]});
  for (double s : ood_scores) in.ood_set.push_back({s, false});
  in.thresholds = quantile_thresholds(in, n_thresholds);
  return in;
}

}  // namespace shiftlab::metrics
