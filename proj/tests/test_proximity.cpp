#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "shiftlab/proximity.hpp"
#include "shiftlab/stats.hpp"

using namespace shiftlab;
using namespace shiftlab::proximity;

namespace {

MatrixD gaussian(std::mt19937_64& gen, std::size_t n, std::size_t d, double shift = 0.0) {
  std::normal_distribution<double> nd;
  MatrixD m(n, d);
  for (double& v : m.flat()) v = nd(gen) + shift;
  return m;
}

// Full sort of all distances per query.
double knn_brute(const MatrixD& q, const MatrixD& a, std::size_t K) {
  double total = 0.0;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < a.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += (q(i, c) - a(j, c)) * (q(i, c) - a(j, c));
      d.push_back(std::sqrt(s));
    }
    std::sort(d.begin(), d.end());
    for (std::size_t k = 0; k < K; ++k) total += d[k];
  }
  return total / static_cast<double>(K * q.rows());
}

double phi(std::span<const double> a, std::span<const double> b, double eps, double sk, double sq) {
  double d2 = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) d2 += (a[j] - b[j]) * (a[j] - b[j]);
  return ((1 - eps) * std::exp(-d2 / (2 * sk * sk)) + eps) * std::exp(-d2 / (2 * sq * sq));
}

// U-statistic written straight from the definition, i != j over ordered pairs.
double mmd_oracle(const MatrixD& x, const MatrixD& y, double eps, double sk, double sq) {
  const double m = static_cast<double>(x.rows()), n = static_cast<double>(y.rows());
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.rows(); ++j)
      if (i != j) xx += phi(x.row(i), x.row(j), eps, sk, sq);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.rows(); ++j)
      if (i != j) yy += phi(y.row(i), y.row(j), eps, sk, sq);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < y.rows(); ++j) xy += phi(x.row(i), y.row(j), eps, sk, sq);
  return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2 * xy / (m * n);
}

KernelConfig fixed(double eps, double bw) {
  KernelConfig c;
  c.epsilon = eps;
  c.kappa = Bandwidth::fixed(bw);
  c.q = Bandwidth::fixed(bw);
  return c;
}

}  // namespace

TEST(FeatureSetTest, NormalizesRows) {
  MatrixD m(2, 2, std::vector<double>{3, 4, 0, -2});
  const auto f = FeatureSet::normalized(m);
  EXPECT_DOUBLE_EQ(f.rows()(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(f.rows()(0, 1), 0.8);
  EXPECT_EQ(f.rows()(1, 1), -1.0);
}

TEST(FeatureSetTest, RejectsZeroEmptyAndNonUnit) {
  EXPECT_THROW(FeatureSet::normalized(MatrixD(2, 2, 0.0)), DataError);
  EXPECT_THROW(FeatureSet::normalized(MatrixD()), DataError);
  EXPECT_THROW(FeatureSet::from_unit_rows(MatrixD(1, 2, 1.0)), DataError);
  MatrixD bad(1, 2, std::vector<double>{1, std::nan("")});
  EXPECT_THROW(FeatureSet::normalized(bad), DataError);
}

TEST(DistNn, MatchesBruteForce) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = FeatureSet::normalized(gaussian(gen, 30 + trial * 37, 5));
    const auto a = FeatureSet::normalized(gaussian(gen, 20 + trial * 61, 5, 0.3));
    for (std::size_t K : {std::size_t{1}, std::size_t{3}, std::size_t{10}}) {
      EXPECT_NEAR(dist_nn(q, a, K), knn_brute(q.rows(), a.rows(), K), 1e-12);
    }
  }
}

TEST(DistNn, ThreadCountDoesNotChangeBits) {
  std::mt19937_64 gen(2);
  const auto q = FeatureSet::normalized(gaussian(gen, 700, 8));
  const auto a = FeatureSet::normalized(gaussian(gen, 600, 8));
  const double serial = dist_nn(q, a, 10, 1);
  for (std::size_t t : {2u, 3u, 8u}) EXPECT_EQ(dist_nn(q, a, 10, t), serial);
}

TEST(DistNn, SelfDistanceWithKOneIsZero) {
  std::mt19937_64 gen(3);
  const auto q = FeatureSet::normalized(gaussian(gen, 50, 4));
  EXPECT_EQ(dist_nn(q, q, 1), 0.0);
}

TEST(DistNn, Errors) {
  std::mt19937_64 gen(4);
  const auto q = FeatureSet::normalized(gaussian(gen, 5, 4));
  const auto a = FeatureSet::normalized(gaussian(gen, 5, 3));
  EXPECT_THROW(dist_nn(q, q, 0), InvalidArgument);
  EXPECT_THROW(dist_nn(q, q, 6), InvalidArgument);
  EXPECT_THROW(dist_nn(q, a, 1), DataError);
}

TEST(Mmd, HandExpandedTwoByTwo) {
  MatrixD m(2, 1, std::vector<double>{-1, 1});
  const auto x = FeatureSet::from_unit_rows(m);
  // Cross pairs at distance 0 give kernel 1, all others phi(d^2 = 4).
  const double p = (0.5 * std::exp(-2.0) + 0.5) * std::exp(-2.0);
  const double expect = p + p - 2.0 * (2.0 + 2.0 * p) / 4.0;
  EXPECT_NEAR(mmd_dk(x, x, fixed(0.5, 1.0)), expect, 1e-15);
  EXPECT_LT(expect, 0.0);
}

TEST(Mmd, MatchesDefinitionOracle) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 8; ++trial) {
    const auto x = FeatureSet::normalized(gaussian(gen, 10 + trial, 4));
    const auto y = FeatureSet::normalized(gaussian(gen, 7 + 2 * trial, 4, 0.5));
    EXPECT_NEAR(mmd_dk(x, y, fixed(0.1, 0.7)), mmd_oracle(x.rows(), y.rows(), 0.1, 0.7, 0.7), 1e-12);
    // median heuristic: lower median of pooled pairwise distances
    std::vector<double> d;
    MatrixD pool(x.size() + y.size(), 4);
    for (std::size_t i = 0; i < x.size(); ++i) std::copy(x.rows().row(i).begin(), x.rows().row(i).end(), pool.row(i).begin());
    for (std::size_t i = 0; i < y.size(); ++i)
      std::copy(y.rows().row(i).begin(), y.rows().row(i).end(), pool.row(x.size() + i).begin());
    for (std::size_t i = 0; i < pool.rows(); ++i)
      for (std::size_t j = i + 1; j < pool.rows(); ++j) d.push_back(std::sqrt(squared_distance(pool.row(i), pool.row(j))));
    std::sort(d.begin(), d.end());
    const double med = d[(d.size() + 1) / 2 - 1];
    KernelConfig cfg;
    EXPECT_NEAR(mmd_dk(x, y, cfg), mmd_oracle(x.rows(), y.rows(), 0.1, med, med), 1e-12);
  }
}

TEST(Mmd, SymmetricToTheBit) {
  std::mt19937_64 gen(6);
  const auto x = FeatureSet::normalized(gaussian(gen, 40, 6));
  const auto y = FeatureSet::normalized(gaussian(gen, 40, 6, 1.0));
  EXPECT_EQ(mmd_dk(x, y), mmd_dk(y, x));
}

TEST(Mmd, UnbiasedUnderTheNull) {
  std::mt19937_64 gen(7);
  std::vector<double> est;
  for (int r = 0; r < 2000; ++r) {
    const auto x = FeatureSet::normalized(gaussian(gen, 6, 3));
    const auto y = FeatureSet::normalized(gaussian(gen, 6, 3));
    est.push_back(mmd_dk(x, y, fixed(0.1, 1.0)));
  }
  const double m = mean(est), se = sample_stddev(est) / std::sqrt(static_cast<double>(est.size()));
  EXPECT_LT(std::abs(m), 4.0 * se);
  EXPECT_TRUE(std::any_of(est.begin(), est.end(), [](double v) { return v < 0.0; }));
}

TEST(Mmd, GrowsWithSeparation) {
  std::mt19937_64 gen(8);
  const auto x = FeatureSet::normalized(gaussian(gen, 60, 4));
  const auto near = FeatureSet::normalized(gaussian(gen, 60, 4, 0.2));
  const auto far = FeatureSet::normalized(gaussian(gen, 60, 4, 3.0));
  EXPECT_LT(mmd_dk(x, near, fixed(0.1, 0.5)), mmd_dk(x, far, fixed(0.1, 0.5)));
}

TEST(Mmd, EpsilonAndErrors) {
  KernelConfig c;
  c.epsilon = 1.0;
  EXPECT_THROW(c.resolved_epsilon(), InvalidArgument);
  c.epsilon_seed = 42;
  const double e = c.resolved_epsilon();
  EXPECT_GT(e, 0.0);
  EXPECT_LT(e, 1.0);
  EXPECT_EQ(c.resolved_epsilon(), e);
  MatrixD one(1, 1, 1.0);
  const auto x = FeatureSet::from_unit_rows(one);
  EXPECT_THROW(mmd_dk(x, x), InvalidArgument);
}
