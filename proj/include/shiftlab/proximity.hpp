#pragma once

// Dataset proximity between OOD and auxiliary feature sets: mean Top-K
// nearest-neighbour distance and the deep-kernel MMD^2 U-statistic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "shiftlab/error.hpp"
#include "shiftlab/matrix.hpp"
#include "shiftlab/stats.hpp"

namespace shiftlab::proximity {

/// L2-normalized feature rows.
class FeatureSet {
 public:
  /// Normalizes every row; zero rows and empty sets are rejected.
  static FeatureSet normalized(const MatrixD& raw, std::string origin = {}) {
    if (raw.rows() == 0 || raw.cols() == 0) throw DataError("feature set is empty");
    MatrixD z = raw;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      auto r = z.row(i);
      double ss = 0.0;
      for (double v : r) {
        if (!std::isfinite(v)) throw DataError("feature set row " + std::to_string(i) + " is not finite");
        ss += v * v;
      }
      if (ss == 0.0) throw DataError("feature set row " + std::to_string(i) + " has zero norm");
      const double inv = 1.0 / std::sqrt(ss);
      for (double& v : r) v *= inv;
    }
    return FeatureSet(std::move(z), std::move(origin));
  }

  /// Wraps rows that are already unit-norm (checked to 1e-6).
  static FeatureSet from_unit_rows(MatrixD z, std::string origin = {}) {
    if (z.rows() == 0) throw DataError("feature set is empty");
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double ss = 0.0;
      for (double v : z.row(i)) ss += v * v;
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) throw DataError("feature set row " + std::to_string(i) + " is not unit norm");
    }
    return FeatureSet(std::move(z), std::move(origin));
  }

  const MatrixD& rows() const noexcept { return z_; }
  std::size_t size() const noexcept { return z_.rows(); }
  std::size_t dim() const noexcept { return z_.cols(); }
  const std::string& origin() const noexcept { return origin_; }

 private:
  FeatureSet(MatrixD z, std::string origin) : z_(std::move(z)), origin_(std::move(origin)) {}
  MatrixD z_;
  std::string origin_;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

namespace detail {

template <typename F>
void parallel_blocks(std::size_t n, std::size_t threads, F&& body) {
  if (threads <= 1 || n < 2) {
    body(std::size_t{0}, n);
    return;
  }
  threads = std::min(threads, n);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Mean Euclidean distance from each OOD row to its K nearest auxiliary
/// rows. Rows are scanned in cache-sized blocks with a bounded max-heap per
/// query; per-query sums are formed over the ascending K distances and
/// reduced in query order, so the result is independent of `threads`.
inline double dist_nn(const FeatureSet& ood, const FeatureSet& aux, std::size_t K = 10, std::size_t threads = 1) {
  if (K == 0) throw InvalidArgument("dist_nn: K must be >= 1");
  if (K > aux.size()) throw InvalidArgument("dist_nn: K exceeds the auxiliary set size");
  if (ood.dim() != aux.dim()) throw DataError("dist_nn: feature dimensions differ");
  std::vector<double> per_query(ood.size());
  constexpr std::size_t kBlock = 256;
  detail::parallel_blocks(ood.size(), threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::priority_queue<double>> heaps(kBlock);
    for (std::size_t q0 = lo; q0 < hi; q0 += kBlock) {
      const std::size_t q1 = std::min(hi, q0 + kBlock);
      for (auto& h : heaps) h = {};
      for (std::size_t a0 = 0; a0 < aux.size(); a0 += kBlock) {
        const std::size_t a1 = std::min(aux.size(), a0 + kBlock);
        for (std::size_t q = q0; q < q1; ++q) {
          auto& heap = heaps[q - q0];
          const auto x = ood.rows().row(q);
          for (std::size_t a = a0; a < a1; ++a) {
            const double d2 = squared_distance(x, aux.rows().row(a));
            if (heap.size() < K) {
              heap.push(d2);
            } else if (d2 < heap.top()) {
              heap.pop();
              heap.push(d2);
            }
          }
        }
      }
      for (std::size_t q = q0; q < q1; ++q) {
        auto& heap = heaps[q - q0];
        std::vector<double> nearest;
        nearest.reserve(K);
        while (!heap.empty()) {
          nearest.push_back(heap.top());
          heap.pop();
        }
        std::sort(nearest.begin(), nearest.end());
        double s = 0.0;
        for (double d2 : nearest) s += std::sqrt(d2);
        per_query[q] = s;
      }
    }
  });
  double total = 0.0;
  for (double s : per_query) total += s;
  return total / (static_cast<double>(K) * static_cast<double>(ood.size()));
}

// ---------------------------------------------------------------------------

/// Bandwidth of a Gaussian kernel: a fixed value, or the median pairwise
/// distance of the pooled sample.
struct Bandwidth {
  std::optional<double> value;  // empty = median heuristic
  static Bandwidth median() { return {}; }
  static Bandwidth fixed(double v) { return {v}; }
};

struct KernelConfig {
  double epsilon = 0.1;
  Bandwidth kappa = Bandwidth::median();
  Bandwidth q = Bandwidth::median();
  // When set, epsilon is drawn uniformly from (0, 1) with this seed instead
  // of using the fixed value.
  std::optional<std::uint64_t> epsilon_seed;

  double resolved_epsilon() const {
    double e = epsilon;
    if (epsilon_seed) {
      std::mt19937_64 gen(*epsilon_seed);
      do {
        e = static_cast<double>(gen() >> 11) * 0x1.0p-53;
      } while (e <= 0.0);
    }
    if (!(e > 0.0 && e < 1.0)) throw InvalidArgument("kernel epsilon must lie strictly inside (0, 1)");
    return e;
  }
};

/// Median pairwise Euclidean distance over the union of both sets
/// (lower median for an even count). Falls back to 1 when every point
/// coincides.
inline double median_pairwise_distance(const MatrixD& a, const MatrixD& b) {
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < a.rows(); ++i) rows.push_back(a.row(i).data());
  for (std::size_t i = 0; i < b.rows(); ++i) rows.push_back(b.row(i).data());
  const std::size_t D = a.cols();
  std::vector<double> d;
  d.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      d.push_back(std::sqrt(squared_distance({rows[i], D}, {rows[j], D})));
    }
  }
  if (d.empty()) return 1.0;
  const std::size_t k = (d.size() + 1) / 2 - 1;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  return d[k] > 0.0 ? d[k] : 1.0;
}

namespace detail {

inline bool canonical_before(const MatrixD& a, const MatrixD& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  return std::lexicographical_compare(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

struct DeepKernel {
  double epsilon, inv2_kappa, inv2_q;
  double operator()(std::span<const double> a, std::span<const double> b) const {
    const double d2 = squared_distance(a, b);
    const double kappa = std::exp(-d2 * inv2_kappa);
    const double q = std::exp(-d2 * inv2_q);
    return ((1.0 - epsilon) * kappa + epsilon) * q;
  }
};

inline double within_sum(const MatrixD& x, const DeepKernel& k) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = i + 1; j < x.rows(); ++j) s += k(x.row(i), x.row(j));
  }
  return 2.0 * s;
}

inline double cross_sum(const MatrixD& x, const MatrixD& y, const DeepKernel& k) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < y.rows(); ++j) s += k(x.row(i), y.row(j));
  }
  return s;
}

}  // namespace detail

/// Unbiased MMD^2 U-statistic with the kernel
/// phi(a, b) = [(1 - eps) * kappa(a, b) + eps] * q(a, b),
/// kappa and q Gaussian exp(-||a - b||^2 / (2 s^2)) with their own
/// bandwidths. Individual estimates can be negative.
inline double mmd_dk(const FeatureSet& ood, const FeatureSet& aux, const KernelConfig& cfg = {}) {
  if (ood.size() < 2 || aux.size() < 2) throw InvalidArgument("mmd_dk: each side needs at least two rows");
  if (ood.dim() != aux.dim()) throw DataError("mmd_dk: feature dimensions differ");
  // Evaluate in a canonical argument order so swapping the sets gives the
  // same bits.
  const bool swap = detail::canonical_before(aux.rows(), ood.rows());
  const MatrixD& x = swap ? aux.rows() : ood.rows();
  const MatrixD& y = swap ? ood.rows() : aux.rows();

  const bool need_median = !cfg.kappa.value || !cfg.q.value;
  const double med = need_median ? median_pairwise_distance(x, y) : 1.0;
  const double s_kappa = cfg.kappa.value.value_or(med);
  const double s_q = cfg.q.value.value_or(med);
  if (!(s_kappa > 0.0) || !(s_q > 0.0)) throw InvalidArgument("mmd_dk: bandwidths must be positive");
  const detail::DeepKernel k{cfg.resolved_epsilon(), 1.0 / (2.0 * s_kappa * s_kappa), 1.0 / (2.0 * s_q * s_q)};

  const double m = static_cast<double>(x.rows()), n = static_cast<double>(y.rows());
  return detail::within_sum(x, k) / (m * (m - 1.0)) + detail::within_sum(y, k) / (n * (n - 1.0)) -
         2.0 * detail::cross_sum(x, y, k) / (m * n);
}

}  // namespace shiftlab::proximity
