#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "shiftlab/stats.hpp"

using namespace shiftlab;

TEST(Percentile, MatchesSortedNearestRank) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + gen() % 40;
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(static_cast<int>(gen() % 10)) - 3.0;
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (double p : {0.0, 1.0, 25.0, 50.0, 62.5, 90.0, 99.9, 100.0}) {
      // smallest value with at least p% of the data at or below it
      double expect = sorted.back();
      for (std::size_t i = 0; i < n; ++i) {
        if (100.0 * static_cast<double>(i + 1) >= p * static_cast<double>(n)) {
          expect = sorted[i];
          break;
        }
      }
      EXPECT_EQ(nearest_rank_percentile(v, p), expect) << "n=" << n << " p=" << p;
    }
  }
}

TEST(Percentile, Endpoints) {
  const std::vector<double> v{5, 1, 4, 2, 3};
  EXPECT_EQ(nearest_rank_percentile(v, 0), 1.0);
  EXPECT_EQ(nearest_rank_percentile(v, 100), 5.0);
  EXPECT_EQ(nearest_rank_percentile(v, 50), 3.0);
}

TEST(Percentile, RejectsBadInput) {
  const std::vector<double> empty;
  EXPECT_THROW(nearest_rank_percentile(empty, 50), InvalidArgument);
  const std::vector<double> v{1, 2};
  EXPECT_THROW(nearest_rank_percentile(v, 101), InvalidArgument);
  EXPECT_THROW(nearest_rank_percentile(v, -1), InvalidArgument);
}

TEST(Ranks, TiesGetAverageRank) {
  const std::vector<double> v{10, 20, 20, 5, 20};
  const auto r = average_ranks(v);
  EXPECT_DOUBLE_EQ(r[3], 1.0);
  EXPECT_DOUBLE_EQ(r[0], 2.0);
  EXPECT_DOUBLE_EQ(r[1], 4.0);
  EXPECT_DOUBLE_EQ(r[2], 4.0);
  EXPECT_DOUBLE_EQ(r[4], 4.0);
}

TEST(Spearman, MonotoneAndDegenerate) {
  const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 30, 400}, c{4, 3, 2, 1}, k{2, 2, 2, 2};
  EXPECT_DOUBLE_EQ(*spearman(a, b), 1.0);
  EXPECT_DOUBLE_EQ(*spearman(a, c), -1.0);
  EXPECT_FALSE(spearman(a, k).has_value());
}

TEST(Moments, MeanAndSampleStd) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_DOUBLE_EQ(mean(v), 5.0);
  EXPECT_NEAR(sample_stddev(v), std::sqrt(32.0 / 7.0), 1e-15);
  const std::vector<double> one{3.0};
  EXPECT_EQ(sample_stddev(one), 0.0);
  const std::vector<double> same(3, 0.1 + 0.2);
  EXPECT_EQ(sample_stddev(same), 0.0);
}
