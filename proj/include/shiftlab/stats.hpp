#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "shiftlab/error.hpp"

namespace shiftlab {

/// Nearest-rank percentile of an ascending-sorted sample: the value at
/// 1-based rank max(1, ceil(p * n / 100)). p = 0 gives the minimum,
/// p = 100 the maximum.
inline double nearest_rank_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw InvalidArgument("percentile of an empty sample");
  if (!(p >= 0.0 && p <= 100.0)) throw InvalidArgument("percentile outside [0, 100]");
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

inline double nearest_rank_percentile(std::span<const double> values, double p) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return nearest_rank_sorted(sorted, p);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
/// Shifted by the first value so constant input gives exactly 0.
inline double sample_stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double n = static_cast<double>(v.size());
  double s = 0.0, ss = 0.0;
  for (double x : v) {
    s += x - v[0];
    ss += (x - v[0]) * (x - v[0]);
  }
  return std::sqrt(std::max(0.0, (ss - s * s / n) / (n - 1.0)));
}

/// 1-based ranks with ties replaced by their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation; empty when either side has zero variance.
inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("pearson: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation (Pearson on average ranks). Empty when
/// undefined, e.g. a constant input.
inline std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

}  // namespace shiftlab
