#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "shiftlab/scores.hpp"

using namespace shiftlab;
using namespace shiftlab::scores;

namespace {

MatrixD random_matrix(std::mt19937_64& gen, std::size_t r, std::size_t c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  MatrixD m(r, c);
  for (double& v : m.flat()) v = static_cast<double>(static_cast<float>(u(gen)));
  return m;
}

// A pack shaped like a model export: rectified features, a linear head and
// logits computed from them.
ShiftPack random_pack(std::uint64_t seed, std::size_t N = 40, std::size_t D = 12, std::size_t C = 5) {
  std::mt19937_64 gen(seed);
  auto f = random_matrix(gen, N, D, -1.0, 3.0);
  for (double& v : f.flat()) v = std::max(v, 0.0);
  const auto W = random_matrix(gen, C, D, -1.0, 1.0);
  std::vector<double> b(C);
  for (auto& v : b) v = static_cast<double>(static_cast<float>(std::uniform_real_distribution<double>(-0.5, 0.5)(gen)));
  ShiftPack p;
  p.class_count = C;
  auto z0 = recompute_logits(f, W, b);
  for (std::size_t k = 0; k < C; ++k) z0(k, k) += 100.0;  // every class predicted at least once
  p.put(make_float_tensor("logits", z0));
  p.put(make_float_tensor("features/layer_1", f));
  p.put(make_float_tensor("fc.weight", W));
  p.put(make_float_tensor("fc.bias", {C}, std::vector<float>(b.begin(), b.end())));
  std::vector<std::int64_t> y(N);
  const auto z = p.matrix("logits");
  for (std::size_t i = 0; i < N; ++i) {
    const auto r = z.row(i);
    y[i] = i % 7 == 0 ? static_cast<std::int64_t>((i / 7) % C)
                      : static_cast<std::int64_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  for (std::size_t k = 0; k < C; ++k) y[k] = static_cast<std::int64_t>(k);
  p.put(make_int_tensor("labels", {N}, y));
  return p;
}

}  // namespace

TEST(ClosedForms, EnergyOfZeroLogits) {
  const MatrixD z(3, 10, 0.0);
  for (double v : energy(z, 1.0).values) EXPECT_NEAR(v, std::log(10.0), 1e-9);
}

TEST(ClosedForms, MspOfZeroLogitsIsExactlyUniform) {
  const MatrixD z(3, 4, 0.0);
  for (double v : msp(z).values) EXPECT_EQ(v, 0.25);
}

TEST(ClosedForms, GradnormAtUniformSoftmaxIsZero) {
  const MatrixD z(4, 6, 1.5);
  std::mt19937_64 gen(2);
  const auto f = random_matrix(gen, 4, 9, 0.0, 5.0);
  for (double v : gradnorm(z, f).values) EXPECT_EQ(v, 0.0);
}

TEST(Rules, MspMatchesNaiveSoftmax) {
  std::mt19937_64 gen(11);
  const auto z = random_matrix(gen, 30, 7, -20, 20);
  for (double T : {0.5, 1.0, 1000.0}) {
    const auto s = msp(z, T);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double sum = 0.0, mx = -1e300;
      for (double v : z.row(i)) {
        sum += std::exp(v / T);
        mx = std::max(mx, std::exp(v / T));
      }
      EXPECT_NEAR(s.values[i], mx / sum, 1e-12);
    }
  }
}

TEST(Rules, EnergyMatchesNaiveLogSumExp) {
  std::mt19937_64 gen(12);
  const auto z = random_matrix(gen, 30, 7, -5, 5);
  for (double T : {0.5, 1.0, 3.0}) {
    const auto s = energy(z, T);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double sum = 0.0;
      for (double v : z.row(i)) sum += std::exp(v / T);
      EXPECT_NEAR(s.values[i], T * std::log(sum), 1e-12);
    }
  }
}

TEST(Rules, EnergyStableForHugeLogits) {
  MatrixD z(1, 3);
  z(0, 0) = 1e4;
  z(0, 1) = 1e4;
  z(0, 2) = -1e4;
  EXPECT_NEAR(energy(z).values[0], 1e4 + std::log(2.0), 1e-9);
  EXPECT_NEAR(msp(z).values[0], 0.5, 1e-15);
}

TEST(Rules, MlsIsRowMax) {
  MatrixD z(2, 3, std::vector<double>{1, 5, 2, -3, -1, -2});
  const auto s = mls(z);
  EXPECT_EQ(s.values[0], 5.0);
  EXPECT_EQ(s.values[1], -1.0);
}

TEST(Rules, GradnormMatchesExplicitLastLayerGradient) {
  std::mt19937_64 gen(13);
  const std::size_t N = 10, C = 4, D = 6;
  const auto z = random_matrix(gen, N, C, -3, 3);
  const auto f = random_matrix(gen, N, D, 0, 2);
  const auto s = gradnorm(z, f, 1.0);
  for (std::size_t i = 0; i < N; ++i) {
    // d/dW_kj of -sum_k u_k log softmax(z)_k = (p_k - 1/C) f_j; score is the L1 norm.
    double sum = 0.0;
    for (double v : z.row(i)) sum += std::exp(v);
    double l1 = 0.0;
    for (std::size_t k = 0; k < C; ++k) {
      const double g = std::exp(z(i, k)) / sum - 1.0 / C;
      for (std::size_t j = 0; j < D; ++j) l1 += std::abs(g * f(i, j));
    }
    EXPECT_NEAR(s.values[i], l1, 1e-12);
  }
}

TEST(Rules, OdinWithoutPerturbedLogitsIsFlaggedDegenerate) {
  std::mt19937_64 gen(14);
  const auto z = random_matrix(gen, 5, 3, -2, 2);
  const auto plain = odin_temperature(z, 1000.0);
  EXPECT_TRUE(plain.degenerate);
  EXPECT_EQ(plain.values, msp(z, 1000.0).values);
  const auto p = random_matrix(gen, 5, 3, -2, 2);
  const auto full = odin_temperature(z, 1000.0, &p);
  EXPECT_FALSE(full.degenerate);
  EXPECT_EQ(full.values, msp(p, 1000.0).values);
}

TEST(Rules, RejectBadInputs) {
  MatrixD z(2, 3, 0.0);
  EXPECT_THROW(msp(z, 0.0), InvalidArgument);
  EXPECT_THROW(energy(z, -1.0), InvalidArgument);
  z(0, 0) = std::nan("");
  EXPECT_THROW(msp(z), DataError);
}

// ---------------------------------------------------------------------------

TEST(She, PrototypesAreMeansOfCorrectSamples) {
  const auto p = random_pack(21);
  const auto f = p.matrix("features/layer_1");
  const auto z = p.matrix("logits");
  const auto y = p.labels();
  const auto protos = she_fit(f, z, y);
  for (std::size_t k = 0; k < 5; ++k) {
    std::vector<double> sum(f.cols(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < f.rows(); ++i) {
      const auto r = z.row(i);
      if (y[i] == static_cast<std::int64_t>(k) &&
          static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin()) == k) {
        for (std::size_t j = 0; j < f.cols(); ++j) sum[j] += f(i, j);
        ++n;
      }
    }
    if (n == 0) continue;
    EXPECT_EQ(protos.counts[k], n);
    for (std::size_t j = 0; j < f.cols(); ++j) EXPECT_NEAR(protos.means(k, j), sum[j] / n, 1e-12);
  }
}

TEST(She, ScoreIsDotWithPredictedPrototype) {
  ShePrototypes protos{MatrixD(2, 2, std::vector<double>{1, 0, 0, 2}), {1, 1}};
  MatrixD f(2, 2, std::vector<double>{3, 4, 3, 4});
  MatrixD z(2, 2, std::vector<double>{1, 0, 0, 1});
  const auto s = she_score(f, z, protos);
  EXPECT_EQ(s.values[0], 3.0);
  EXPECT_EQ(s.values[1], 8.0);
}

TEST(She, ClassWithoutCorrectSampleIsAnError) {
  MatrixD f(2, 1, std::vector<double>{1, 2});
  MatrixD z(2, 2, std::vector<double>{1, 0, 1, 0});
  const std::vector<std::int64_t> y{0, 0};
  EXPECT_THROW(she_fit(f, z, y), DataError);
}

// ---------------------------------------------------------------------------

TEST(React, ThresholdIsGlobalPercentile) {
  MatrixD f(2, 5, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  EXPECT_EQ(react_threshold(f, 90), 9.0);
  EXPECT_EQ(react_threshold(f, 100), 10.0);
  const auto c = react_transform(f, 4.5);
  EXPECT_EQ(c(0, 3), 4.0);
  EXPECT_EQ(c(1, 4), 4.5);
}

TEST(Ash, PruneZeroesStrictlyBelowRowPercentile) {
  MatrixD f(1, 4, std::vector<double>{1, 2, 3, 4});
  const auto out = ash_transform(f, 50, AshVariant::prune);
  // nearest-rank 50th percentile of 4 values is the 2nd smallest (2)
  EXPECT_EQ(out.data(), (std::vector<double>{0, 2, 3, 4}));
}

TEST(Ash, ScalePreservesRowSum) {
  MatrixD f(1, 4, std::vector<double>{1, 2, 3, 4});
  const auto out = ash_transform(f, 75, AshVariant::scale);
  double s = 0.0;
  for (double v : out.flat()) s += v;
  EXPECT_NEAR(s, 10.0, 1e-12);
  EXPECT_EQ(out(0, 0), 0.0);
  EXPECT_EQ(out(0, 1), 0.0);
}

TEST(Ash, PercentileMatchesSortOracle) {
  std::mt19937_64 gen(31);
  const auto f = random_matrix(gen, 20, 9, -1, 1);
  for (double p : {10.0, 33.0, 50.0, 90.0}) {
    const auto out = ash_transform(f, p, AshVariant::prune);
    for (std::size_t i = 0; i < f.rows(); ++i) {
      std::vector<double> s(f.row(i).begin(), f.row(i).end());
      std::sort(s.begin(), s.end());
      const auto rank = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(p * 9 / 100.0)));
      const double t = s[rank - 1];
      for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(out(i, j), f(i, j) < t ? 0.0 : f(i, j));
    }
  }
}

TEST(Identity, ReactAtHundredIsBitExactForEveryRule) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pack = random_pack(seed);
    RuleParams params;
    params.react_percentile = 100.0;
    for (auto base : {BaseRule::msp, BaseRule::mls, BaseRule::energy, BaseRule::gradnorm, BaseRule::she}) {
      const RuleSpec plain{Transform::none, base}, react{Transform::react, base};
      const auto a = apply_rule(plain, params, fit_rule(plain, params, pack), pack);
      const auto b = apply_rule(react, params, fit_rule(react, params, pack), pack);
      ASSERT_EQ(a.values, b.values) << to_string(react) << " seed " << seed;
    }
  }
}

TEST(Identity, AshPruneAtZeroIsIdentity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pack = random_pack(seed + 100);
    const auto f = pack.penultimate();
    EXPECT_EQ(ash_transform(f, 0.0, AshVariant::prune), f);
    RuleParams params;
    params.ash_percentile = 0.0;
    const RuleSpec plain{Transform::none, BaseRule::energy}, ash{Transform::ash, BaseRule::energy};
    EXPECT_EQ(apply_rule(plain, params, {}, pack).values, apply_rule(ash, params, {}, pack).values);
  }
}

TEST(Recompute, MatchesHandComputation) {
  MatrixD f(1, 2, std::vector<double>{1, 2});
  MatrixD W(2, 2, std::vector<double>{1, 1, 0, -1});
  const std::vector<double> b{0.5, 0};
  const auto z = recompute_logits(f, W, b);
  EXPECT_EQ(z(0, 0), 3.5);
  EXPECT_EQ(z(0, 1), -2.0);
  MatrixD bad(2, 3);
  EXPECT_THROW(recompute_logits(f, bad, b), DataError);
}

TEST(RuleIds, ParseAndPrintRoundTrip) {
  for (const char* id : {"msp", "mls", "energy", "odin", "gradnorm", "she", "react+energy", "ash+msp", "react+she"}) {
    EXPECT_EQ(to_string(parse_rule(id)), id);
  }
  EXPECT_THROW(parse_rule("godin"), InvalidArgument);
  EXPECT_THROW(parse_rule("react+"), InvalidArgument);
}

TEST(RuleIds, ReactWithoutFitIsRejected) {
  const auto pack = random_pack(3);
  EXPECT_THROW(apply_rule(parse_rule("react+mls"), {}, {}, pack), InvalidArgument);
}

TEST(Predictions, ArgmaxOfStoredLogits) {
  ShiftPack p;
  p.class_count = 3;
  p.put(make_float_tensor("logits", MatrixD(2, 3, std::vector<double>{0, 2, 1, 5, 1, 1})));
  EXPECT_EQ(predictions(p), (std::vector<std::int64_t>{1, 0}));
}
