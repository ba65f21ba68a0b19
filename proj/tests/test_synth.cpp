#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "shiftlab/stats.hpp"
#include "shiftlab/synth.hpp"

using namespace shiftlab;
using namespace shiftlab::synth;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  CounterRng a(1, "x", 3), b(1, "x", 3), c(1, "y", 3), d(1, "x", 4);
  const auto va = a.next();
  EXPECT_EQ(va, b.next());
  EXPECT_NE(va, c.next());
  EXPECT_NE(va, d.next());
}

TEST(Rng, MomentsOfNormalAndGamma) {
  CounterRng r(9, "moments");
  std::vector<double> n(100000), g(100000);
  for (auto& v : n) v = r.normal();
  for (auto& v : g) v = r.gamma(0.5);
  EXPECT_NEAR(mean(n), 0.0, 0.02);
  EXPECT_NEAR(sample_stddev(n), 1.0, 0.02);
  EXPECT_NEAR(mean(g), 0.5, 0.02);  // Gamma(k, 1) has mean k
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.below(7), 7u);
}

TEST(Scenario, MeansSitOnTheirRadii) {
  ScenarioParams p;
  const auto sc = make_scenario(p);
  EXPECT_EQ(sc.id_components.size(), p.id_classes);
  EXPECT_EQ(sc.ood_components.size(), p.ood_components);
  for (const auto& c : sc.id_components) EXPECT_NEAR(norm(c.mean), p.id_radius, 1e-12);
  for (const auto& c : sc.ood_components) EXPECT_NEAR(norm(c.mean), p.ood_radius, 1e-12);
  for (const auto& a : sc.remote_anchors) EXPECT_NEAR(norm(a), p.remote_radius, 1e-12);
  EXPECT_NEAR(norm(sc.covariate.translation), p.translation_norm, 1e-12);
}

TEST(Scenario, SeedDeterminesEverything) {
  ScenarioParams p;
  const auto a = make_scenario(p), b = make_scenario(p);
  EXPECT_EQ(a.id_components[0].mean, b.id_components[0].mean);
  p.seed = 1;
  EXPECT_NE(make_scenario(p).id_components[0].mean, a.id_components[0].mean);
}

TEST(Scenario, ValidationRejectsBadShapes) {
  auto sc = make_scenario({});
  auto bad = sc;
  bad.ood_components[0].mean = bad.id_components[0].mean;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = sc;
  bad.aux_overlap = 1.5;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = sc;
  bad.remote_anchors.pop_back();
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = sc;
  bad.id_components[1].sigma = 0.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  ScenarioParams p;
  p.dim = 1;
  EXPECT_THROW(make_scenario(p), InvalidArgument);
}

TEST(Generators, DeterministicAndPrefixStable) {
  const auto sc = make_scenario({});
  const auto a = gen_id(sc, 50, "train"), b = gen_id(sc, 80, "train");
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].x, b[i].x);
    EXPECT_EQ(a[i].label, b[i].label);
  }
  const auto t = gen_id(sc, 50, "test");
  EXPECT_NE(a[0].x, t[0].x);
}

TEST(Generators, LabelsAndProvenance) {
  const auto sc = make_scenario({});
  const auto id = gen_id(sc, 600, "train");
  std::set<std::int64_t> seen;
  for (const auto& s : id) {
    ASSERT_GE(s.label, 0);
    ASSERT_LT(s.label, 6);
    EXPECT_EQ(s.provenance, Provenance::id);
    seen.insert(s.label);
  }
  EXPECT_EQ(seen.size(), 6u);
  for (const auto& s : gen_semantic_ood(sc, 100)) {
    EXPECT_EQ(s.label, -1);
    EXPECT_EQ(s.provenance, Provenance::semantic_ood);
  }
  const auto cov = gen_covariate(sc, id);
  for (std::size_t i = 0; i < id.size(); ++i) {
    EXPECT_EQ(cov[i].label, id[i].label);
    EXPECT_EQ(cov[i].provenance, Provenance::covariate);
  }
  for (const auto& s : gen_aux(sc, 50)) EXPECT_EQ(s.label, -1);
}

TEST(Generators, SampleMeansApproachComponentMeans) {
  const auto sc = make_scenario({});
  const auto id = gen_id(sc, 6000, "train");
  std::vector<std::vector<double>> sum(6, std::vector<double>(sc.dim, 0.0));
  std::vector<double> cnt(6, 0.0);
  for (const auto& s : id) {
    for (std::size_t j = 0; j < sc.dim; ++j) sum[s.label][j] += s.x[j];
    cnt[s.label] += 1;
  }
  for (std::size_t k = 0; k < 6; ++k) {
    for (std::size_t j = 0; j < sc.dim; ++j) EXPECT_NEAR(sum[k][j] / cnt[k], sc.id_components[k].mean[j], 0.15);
  }
}

TEST(Covariate, IdentityWhenAllFactorsOff) {
  auto sc = make_scenario({});
  sc.covariate = {};
  const auto id = gen_id(sc, 20, "test");
  const auto cov = gen_covariate(sc, id);
  for (std::size_t i = 0; i < id.size(); ++i) EXPECT_EQ(cov[i].x, id[i].x);
}

TEST(Covariate, RotationActsOnFirstTwoCoordinates) {
  auto sc = make_scenario({});
  sc.covariate = {};
  sc.covariate.rotation = std::numbers::pi / 2;
  const auto id = gen_id(sc, 10, "test");
  const auto cov = gen_covariate(sc, id);
  for (std::size_t i = 0; i < id.size(); ++i) {
    EXPECT_NEAR(cov[i].x[0], -id[i].x[1], 1e-12);
    EXPECT_NEAR(cov[i].x[1], id[i].x[0], 1e-12);
    for (std::size_t j = 2; j < sc.dim; ++j) EXPECT_EQ(cov[i].x[j], id[i].x[j]);
  }
}

TEST(Aux, OverlapInterpolatesBetweenRemoteAndOod) {
  auto sc = make_scenario({});
  sc.aux_overlap = 1.0;
  for (std::size_t k = 0; k < sc.ood_components.size(); ++k) EXPECT_EQ(aux_components(sc)[k].mean, sc.ood_components[k].mean);
  sc.aux_overlap = 0.0;
  for (std::size_t k = 0; k < sc.ood_components.size(); ++k) EXPECT_EQ(aux_components(sc)[k].mean, sc.remote_anchors[k]);
  sc.aux_overlap = 0.25;
  const auto c = aux_components(sc);
  for (std::size_t j = 0; j < sc.dim; ++j) {
    EXPECT_NEAR(c[0].mean[j], 0.75 * sc.remote_anchors[0][j] + 0.25 * sc.ood_components[0].mean[j], 1e-12);
  }
}

TEST(Packs, RawPackIsValid) {
  const auto sc = make_scenario({});
  const auto p = to_pack(sc, gen_semantic_ood(sc, 30), Role::ood_test);
  EXPECT_TRUE(validate_pack(p).empty());
  EXPECT_EQ(p.penultimate_name(), "features/input");
  EXPECT_EQ(p.matrix("features/input").cols(), sc.dim);
  EXPECT_NO_THROW(decode_pack(encode_pack(p)));
}

TEST(Generators, RejectEmptyRequests) {
  const auto sc = make_scenario({});
  EXPECT_THROW(gen_id(sc, 0, "x"), InvalidArgument);
  EXPECT_THROW(gen_aux(sc, 0), InvalidArgument);
  auto none = sc;
  none.ood_components.clear();
  none.remote_anchors.clear();
  EXPECT_THROW(gen_semantic_ood(none, 5), InvalidArgument);
}
