#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "shiftlab/metrics.hpp"

using namespace shiftlab;
using namespace shiftlab::metrics;

namespace {

// Exhaustive pair counting with ties worth one half.
double auroc_pairs(const std::vector<double>& id, const std::vector<double>& ood) {
  double wins = 0.0;
  for (double a : id) {
    for (double b : ood) wins += a > b ? 1.0 : a == b ? 0.5 : 0.0;
  }
  return wins / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Average precision by enumerating each distinct score as a threshold
// (predict ID when score >= t), in decreasing order.
double aupr_thresholds(const std::vector<double>& id, const std::vector<double>& ood) {
  std::set<double, std::greater<>> ts(id.begin(), id.end());
  ts.insert(ood.begin(), ood.end());
  double prev_recall = 0.0, ap = 0.0;
  for (double t : ts) {
    double tp = 0, fp = 0;
    for (double s : id) tp += s >= t;
    for (double s : ood) fp += s >= t;
    const double recall = tp / static_cast<double>(id.size());
    if (tp + fp > 0) ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return ap;
}

// OSCR: CCR/FPR at every distinct threshold plus the origin, trapezoids.
double oscr_sweep(const std::vector<double>& id, const std::vector<bool>& correct, const std::vector<double>& ood) {
  std::set<double, std::greater<>> ts(id.begin(), id.end());
  ts.insert(ood.begin(), ood.end());
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (double t : ts) {
    double cc = 0, fp = 0;
    for (std::size_t i = 0; i < id.size(); ++i) cc += id[i] >= t && correct[i];
    for (double s : ood) fp += s >= t;
    pts.emplace_back(fp / static_cast<double>(ood.size()), cc / static_cast<double>(id.size()));
  }
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) / 2.0;
  }
  return area;
}

std::vector<double> random_scores(std::mt19937_64& gen, std::size_t n, int levels) {
  std::vector<double> v(n);
  for (auto& x : v) x = static_cast<double>(static_cast<int>(gen() % static_cast<unsigned>(levels))) / 7.0;
  return v;
}

}  // namespace

TEST(Auroc, MatchesPairCountingOnRandomInstances) {
  std::mt19937_64 gen(1234);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 1 + gen() % 120, n = 1 + gen() % 120;
    const int levels = trial % 3 == 0 ? 3 : trial % 3 == 1 ? 20 : 100000;
    const auto id = random_scores(gen, m, levels), ood = random_scores(gen, n, levels);
    EXPECT_NEAR(auroc(id, ood), auroc_pairs(id, ood), 1e-12);
  }
}

TEST(Auroc, ClosedForms) {
  const std::vector<double> hi{2, 3, 4}, lo{-1, 0, 1}, same{1, 1, 1};
  EXPECT_EQ(auroc(hi, lo), 1.0);
  EXPECT_EQ(auroc(lo, hi), 0.0);
  EXPECT_EQ(auroc(same, same), 0.5);
}

TEST(Auroc, Errors) {
  const std::vector<double> empty, one{1.0}, bad{std::nan("")};
  EXPECT_THROW(auroc(empty, one), InvalidArgument);
  EXPECT_THROW(auroc(one, empty), InvalidArgument);
  EXPECT_THROW(auroc(bad, one), InvalidArgument);
}

TEST(Aupr, MatchesThresholdEnumeration) {
  std::mt19937_64 gen(99);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 1 + gen() % 60, n = 1 + gen() % 60;
    const int levels = trial % 2 ? 4 : 1000;
    const auto id = random_scores(gen, m, levels), ood = random_scores(gen, n, levels);
    EXPECT_NEAR(aupr(id, ood), aupr_thresholds(id, ood), 1e-12);
  }
}

TEST(Aupr, PerfectSeparationIsOne) {
  const std::vector<double> id{5, 6}, ood{1, 2, 3};
  EXPECT_DOUBLE_EQ(aupr(id, ood), 1.0);
}

TEST(Oscr, MatchesThresholdSweep) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 1 + gen() % 60, n = 1 + gen() % 60;
    const int levels = trial % 2 ? 5 : 1000;
    const auto id = random_scores(gen, m, levels), ood = random_scores(gen, n, levels);
    std::vector<bool> correct(m);
    for (std::size_t i = 0; i < m; ++i) correct[i] = gen() % 4 != 0;
    EXPECT_NEAR(oscr(id, correct, ood), oscr_sweep(id, correct, ood), 1e-12);
  }
}

TEST(Oscr, AllCorrectEqualsAuroc) {
  std::mt19937_64 gen(8);
  const auto id = random_scores(gen, 50, 1000), ood = random_scores(gen, 40, 1000);
  std::vector<bool> correct(id.size(), true);
  EXPECT_NEAR(oscr(id, correct, ood), auroc(id, ood), 1e-12);
}

TEST(Oscr, LengthMismatch) {
  const std::vector<double> id{1, 2}, ood{0};
  EXPECT_THROW(oscr(id, std::vector<bool>{true}, ood), InvalidArgument);
}

// ---------------------------------------------------------------------------

TEST(Oaa, IdealDetectorAndClassifierScoresOne) {
  OaaInputs in;
  for (int i = 0; i < 20; ++i) in.id_set.push_back({1.0 + i, true});
  for (int i = 0; i < 15; ++i) in.ood_set.push_back({-1.0 - i, false});
  EXPECT_EQ(oaa(in, 0.5), 1.0);
  EXPECT_EQ(oaa(in, 1.0), 1.0);  // score >= threshold counts as ID
}

TEST(Oaa, HandCount) {
  OaaInputs in;
  in.id_set = {{0.9, true}, {0.8, false}, {0.2, true}};
  in.ood_set = {{0.7, false}, {0.1, false}};
  // threshold 0.5: ID accepted & correct: 1; OOD rejected: 1 -> 2/5
  EXPECT_DOUBLE_EQ(oaa(in, 0.5), 2.0 / 5.0);
  in.ood_credit = OodCredit::misclassified;
  EXPECT_DOUBLE_EQ(oaa(in, 0.5), 3.0 / 5.0);
}

TEST(Moaa, BoundedOnRandomInstances) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + gen() % 50, n = gen() % 50;
    const auto id = random_scores(gen, m, trial % 2 ? 3 : 500), ood = random_scores(gen, n, 500);
    std::vector<bool> correct(m);
    for (std::size_t i = 0; i < m; ++i) correct[i] = gen() % 2;
    const auto in = make_oaa_inputs(id, correct, ood);
    const double v = moaa(in);
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Moaa, CorruptingPredictionsLowersIt) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  std::vector<double> id(200), ood(200);
  for (auto& x : id) x = 2.0 + nd(gen);
  for (auto& x : ood) x = nd(gen);
  std::vector<bool> correct(id.size(), true);
  const double clean = moaa(make_oaa_inputs(id, correct, ood));
  for (std::size_t i = 0; i < id.size(); i += 5) correct[i] = false;  // 20%
  const double corrupted = moaa(make_oaa_inputs(id, correct, ood));
  EXPECT_LT(corrupted, clean);
}

TEST(Moaa, ThresholdGridIsStrictlyIncreasingQuantiles) {
  std::mt19937_64 gen(4);
  const auto id = random_scores(gen, 300, 7), ood = random_scores(gen, 100, 7);
  const auto in = make_oaa_inputs(id, std::vector<bool>(id.size(), true), ood);
  ASSERT_FALSE(in.thresholds.empty());
  for (std::size_t i = 1; i < in.thresholds.size(); ++i) EXPECT_LT(in.thresholds[i - 1], in.thresholds[i]);
  EXPECT_LE(in.thresholds.size(), 7u);
  EXPECT_EQ(in.thresholds.front(), *std::min_element(id.begin(), id.end()) < *std::min_element(ood.begin(), ood.end())
                                       ? *std::min_element(id.begin(), id.end())
                                       : *std::min_element(ood.begin(), ood.end()));
}

TEST(Moaa, AverageOfOaaOverThresholds) {
  OaaInputs in;
  in.id_set = {{0.9, true}, {0.8, false}, {0.2, true}};
  in.ood_set = {{0.7, false}, {0.1, false}};
  in.thresholds = {0.15, 0.5, 0.85};
  const double expect = (oaa(in, 0.15) + oaa(in, 0.5) + oaa(in, 0.85)) / 3.0;
  EXPECT_DOUBLE_EQ(moaa(in), expect);
  in.thresholds.clear();
  EXPECT_THROW(moaa(in), InvalidArgument);
}
