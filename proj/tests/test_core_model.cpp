#include <gtest/gtest.h>

#include <cmath>

#include "sopo/reward.hpp"

using namespace sopo;

namespace {

CategoricalPolicy two_item_policy(Vec logits, std::uint64_t seed = 7) {
  Vocabulary vocab(2, 2, seed);
  return CategoricalPolicy(vocab, 1, std::move(logits));
}

}  // namespace

TEST(LogProb, UniformCategorical) {
  CategoricalPolicy p = two_item_policy({0.0, 0.0});
  EXPECT_NEAR(p.log_prob(p.vocab().motion(0), Condition{0}), std::log(0.5), 1e-12);
  EXPECT_NEAR(p.log_prob(p.vocab().motion(1), Condition{0}), -0.6931, 1e-4);
}

TEST(LogProb, StandardNormalAtMode) {
  GaussianPolicy g = GaussianPolicy::single({0.0, 0.0}, {1.0, 1.0});
  double lp = g.log_prob(Motion{{0.0, 0.0}, -1}, Condition{0});
  EXPECT_NEAR(lp, -std::log(2.0 * kPi), 1e-12);
  EXPECT_NEAR(lp, -1.8379, 1e-4);
}

TEST(LogProb, CategoricalSoftmax) {
  CategoricalPolicy p = two_item_policy({1.0, 0.0});
  // direct softmax evaluation as the oracle
  double expected = std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(p.log_prob(p.vocab().motion(0), Condition{0}), expected, 1e-12);
  EXPECT_NEAR(expected, -0.3133, 1e-4);
}

TEST(LogProb, Errors) {
  GaussianPolicy g = GaussianPolicy::single({0.0, 0.0}, {1.0, 1.0});
  EXPECT_THROW(g.log_prob(Motion{{0.0, 0.0, 0.0}, -1}, Condition{0}), std::invalid_argument);
  CategoricalPolicy p = two_item_policy({0.0, 0.0});
  EXPECT_THROW(p.log_prob(Motion{{}, 5}, Condition{0}), std::out_of_range);
  EXPECT_THROW(p.log_prob(p.vocab().motion(0), Condition{3}), std::out_of_range);
}

TEST(CategoricalPolicy, ProbsSumToOne) {
  RandomStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Vocabulary vocab(5, 2, static_cast<std::uint64_t>(trial));
    Vec logits(5);
    for (double& x : logits) x = 3.0 * rng.normal();
    CategoricalPolicy p(vocab, 1, logits);
    Vec probs = p.probs(Condition{0});
    KahanSum s;
    for (double v : probs) s.add(v);
    EXPECT_NEAR(s.value(), 1.0, 1e-12);
  }
}

TEST(Sample, DegenerateCategorical) {
  Vocabulary vocab(1, 2, 3);
  CategoricalPolicy p(vocab, 1, {0.0});
  auto xs = sample(Policy{p}, Condition{0}, 17, 99);
  ASSERT_EQ(xs.size(), 17u);
  for (const Motion& x : xs) EXPECT_EQ(x.item, 0);
}

TEST(Sample, GaussianMeanLawOfLargeNumbers) {
  GaussianPolicy g = GaussianPolicy::single({-2.0, 1.0}, {1.5, 0.5});
  const int n = 10000;
  auto xs = sample(Policy{g}, Condition{0}, n, 1234);
  KahanSum sx, sy;
  for (const Motion& x : xs) {
    sx.add(x.coords[0]);
    sy.add(x.coords[1]);
  }
  EXPECT_NEAR(sx.value() / n, -2.0, 5.0 * 1.5 / std::sqrt(n));
  EXPECT_NEAR(sy.value() / n, 1.0, 5.0 * 0.5 / std::sqrt(n));
}

TEST(Sample, Deterministic) {
  GaussianPolicy g = GaussianPolicy::single({0.0, 0.0}, {1.0, 2.0});
  auto a = sample(Policy{g}, Condition{0}, 64, 5);
  auto b = sample(Policy{g}, Condition{0}, 64, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].coords, b[i].coords);
  auto c = sample(Policy{g}, Condition{0}, 64, 6);
  EXPECT_NE(a[0].coords, c[0].coords);
  EXPECT_THROW(sample(Policy{g}, Condition{0}, 0, 5), std::invalid_argument);
}

TEST(LogRatio, ZeroWhenParamsEqual) {
  CategoricalPolicy p = two_item_policy({0.7, -0.3});
  ReferenceSnapshot ref{Policy{p}};
  for (int i = 0; i < 2; ++i)
    EXPECT_EQ(log_ratio(Policy{p}, ref, p.vocab().motion(i), Condition{0}), 0.0);
}

TEST(LogRatio, TwoSoftmaxEvaluations) {
  CategoricalPolicy theta = two_item_policy({1.0, 0.0});
  CategoricalPolicy ref_pol = two_item_policy({0.0, 0.0});
  ReferenceSnapshot ref{Policy{ref_pol}};
  double expected = std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)) - std::log(0.5);
  double got = log_ratio(Policy{theta}, ref, theta.vocab().motion(0), Condition{0});
  EXPECT_NEAR(got, expected, 1e-12);
  EXPECT_NEAR(got, 0.3799, 1e-4);
}

TEST(LogRatio, AntisymmetricUnderSwap) {
  CategoricalPolicy theta = two_item_policy({0.9, -0.4});
  CategoricalPolicy other = two_item_policy({-0.2, 0.5});
  ReferenceSnapshot ref_a{Policy{other}};
  ReferenceSnapshot ref_b{Policy{theta}};
  Motion x = theta.vocab().motion(1);
  EXPECT_NEAR(log_ratio(Policy{theta}, ref_a, x, Condition{0}),
              -log_ratio(Policy{other}, ref_b, x, Condition{0}), 1e-12);
}

TEST(LogRatio, KindMismatch) {
  CategoricalPolicy cat = two_item_policy({0.0, 0.0});
  GaussianPolicy g = GaussianPolicy::single({0.0, 0.0}, {1.0, 1.0});
  ReferenceSnapshot gaussian_ref{Policy{g}};
  EXPECT_THROW(log_ratio(Policy{cat}, gaussian_ref, cat.vocab().motion(0), Condition{0}),
               std::invalid_argument);
}

namespace {

MixtureReward paper_mixture() {
  return MixtureReward({MixtureComponent{{-3.0, 2.0}, Cov2(1.0, 0.5, 1.0), 0.5},
                        MixtureComponent{{2.0, -2.0}, Cov2(1.0, -0.5, 1.0), 0.5}});
}

}  // namespace

TEST(Reward, MixtureNearComponentMean) {
  MixtureReward rm = paper_mixture();
  EXPECT_GE(rm.score(Motion{{-3.0, 2.0}, -1}, Condition{0}), 0.99);
  EXPECT_LE(rm.score(Motion{{-3.0, 2.0}, -1}, Condition{0}), 1.0);
}

TEST(Reward, MixtureVanishesFarAway) {
  MixtureReward rm = paper_mixture();
  EXPECT_LT(rm.score(Motion{{80.0, 80.0}, -1}, Condition{0}), 1e-12);
}

TEST(Reward, MixtureModeNormalization) {
  MixtureReward rm = paper_mixture();
  // multi-start ascent found the global maximizer: nothing on a fine grid
  // around both means beats it
  double best = 0.0;
  for (double x = -5.0; x <= 4.0; x += 0.05)
    for (double y = -4.0; y <= 4.0; y += 0.05) best = std::max(best, rm.density({x, y}));
  EXPECT_LE(best, rm.max_density() * (1.0 + 1e-9));
}

TEST(Reward, TableReturnsStoredEntry) {
  TableReward table(2, 3, {0.1, 0.5, 0.9, 0.2, 0.4, 0.8});
  Vocabulary vocab(3, 2, 1);
  EXPECT_EQ(reward(RewardModel{table}, vocab.motion(2), Condition{0}), 0.9);
  EXPECT_EQ(reward(RewardModel{table}, vocab.motion(1), Condition{1}), 0.4);
  EXPECT_THROW(table.score(vocab.motion(1), Condition{2}), std::out_of_range);
}

TEST(Reward, CosineKindInUnitInterval) {
  CosineReward rm({{1.0, 0.0}});
  EXPECT_NEAR(rm.score(Motion{{2.0, 0.0}, -1}, Condition{0}), 1.0, 1e-12);
  EXPECT_NEAR(rm.score(Motion{{-1.0, 0.0}, -1}, Condition{0}), 0.0, 1e-12);
  EXPECT_NEAR(rm.score(Motion{{0.0, 3.0}, -1}, Condition{0}), 0.5, 1e-12);
}

TEST(CosineSimilarity, Basics) {
  EXPECT_NEAR(cosine_similarity(Vec{2.0, 1.0}, Vec{2.0, 1.0}), 1.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(Vec{1.0, 0.0}, Vec{0.0, 1.0}), 0.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(Vec{1.0, 0.0}, Vec{1.0, 1.0}), 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(CosineSimilarity, DegenerateAndErrors) {
  EXPECT_EQ(cosine_similarity(Vec{0.0, 0.0}, Vec{1.0, 1.0}), 0.0);
  EXPECT_EQ(cosine_similarity(Vec{1e-13, 0.0}, Vec{1.0, 1.0}), 0.0);
  EXPECT_THROW(cosine_similarity(Vec{1.0}, Vec{1.0, 0.0}), std::invalid_argument);
}

TEST(Cov2, RejectsNonSpd) {
  EXPECT_THROW(Cov2(0.0, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(Cov2(1.0, 2.0, 1.0), std::invalid_argument);
  EXPECT_NO_THROW(Cov2(1.0, 0.5, 1.0));
}

TEST(GaussianPolicy, RejectsBadConstruction) {
  EXPECT_THROW(GaussianPolicy::single({0.0, 0.0}, {1.0, 0.0}), std::domain_error);
  EXPECT_THROW(GaussianPolicy(1, 2, {0.0, 0.0, 0.0}), std::invalid_argument);
}
