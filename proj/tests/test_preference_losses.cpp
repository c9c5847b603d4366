#include <gtest/gtest.h>

#include <cmath>

#include "sopo/losses.hpp"
#include "sopo/oracles.hpp"

using namespace sopo;

namespace {

const double kLog2 = std::log(2.0);

struct Fixture {
  Vocabulary vocab;
  CategoricalPolicy theta;
  ReferenceSnapshot ref;
  LossConfig cfg;

  explicit Fixture(Vec theta_logits, Vec ref_logits, std::uint64_t seed = 21)
      : vocab(static_cast<int>(theta_logits.size()), 2, seed),
        theta(vocab, 1, std::move(theta_logits)),
        ref(Policy{CategoricalPolicy(vocab, 1, std::move(ref_logits))}) {}
};

// Direct transcription of the ranked-group likelihood with explicit
// exponentials and suffix sums; the independent oracle for the Plackett-Luce
// offline loss.
double pl_offline_reference(const CategoricalPolicy& theta, const ReferenceSnapshot& ref,
                            const std::vector<Motion>& group, Condition c, double beta) {
  double loglik = 0.0;
  for (std::size_t k = 0; k < group.size(); ++k) {
    double num = std::exp(beta * log_ratio(Policy{theta}, ref, group[k], c));
    double den = 0.0;
    for (std::size_t j = k; j < group.size(); ++j)
      den += std::exp(beta * log_ratio(Policy{theta}, ref, group[j], c));
    loglik += std::log(num / den);
  }
  return -loglik;
}

}  // namespace

TEST(DpoPairwise, ZeroMarginGivesLog2) {
  Fixture f({0.4, 0.4}, {0.1, 0.1});
  // equal h on both items: identical logit offsets cancel in the softmax
  double loss = dpo_pairwise_loss(Policy{f.theta}, f.ref, f.vocab.motion(0), f.vocab.motion(1),
                                  Condition{0}, f.cfg);
  EXPECT_NEAR(loss, kLog2, 1e-12);
}

TEST(DpoPairwise, SaturatedPreferenceVanishes) {
  Fixture f({40.0, -40.0}, {0.0, 0.0});
  double loss = dpo_pairwise_loss(Policy{f.theta}, f.ref, f.vocab.motion(0), f.vocab.motion(1),
                                  Condition{0}, f.cfg);
  EXPECT_LT(loss, 1e-30);
  EXPECT_GT(loss, 0.0);
}

TEST(DpoPairwise, ThetaEqualsRefGivesLog2ForAllPairs) {
  Vocabulary vocab(4, 2, 5);
  Vec logits{0.3, -1.0, 0.7, 0.2};
  CategoricalPolicy theta(vocab, 1, logits);
  ReferenceSnapshot ref{Policy{theta}};
  LossConfig cfg;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      EXPECT_NEAR(dpo_pairwise_loss(Policy{theta}, ref, vocab.motion(i), vocab.motion(j),
                                    Condition{0}, cfg),
                  kLog2, 1e-15);
}

TEST(PlRankProbs, SymmetricSuffixSums) {
  auto r = pl_rank_probs(Vec{2.0, 2.0, 2.0});
  ASSERT_EQ(r.p.size(), 3u);
  EXPECT_NEAR(r.p[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.p[1], 0.5, 1e-15);
  EXPECT_EQ(r.p[2], 1.0);
}

TEST(PlRankProbs, DirectSuffixArithmetic) {
  double e = std::exp(1.0);
  auto r = pl_rank_probs(Vec{e, 1.0});
  EXPECT_NEAR(r.p[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(r.p[0], 0.7311, 1e-4);
  EXPECT_EQ(r.p[1], 1.0);
}

TEST(PlRankProbs, SingleItemAndErrors) {
  auto r = pl_rank_probs(Vec{3.7});
  ASSERT_EQ(r.p.size(), 1u);
  EXPECT_EQ(r.p[0], 1.0);
  EXPECT_THROW(pl_rank_probs(Vec{1.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(pl_rank_probs(Vec{}), std::invalid_argument);
}

TEST(PlOffline, K2ReducesToPairwise) {
  for (int trial = 0; trial < 1000; ++trial) {
    FiniteInstance inst = make_random_instance(static_cast<std::uint64_t>(trial), 4, 1, 2);
    const auto& g = inst.gt_groups[0];
    PreferenceRecord record{Condition{0}, inst.vocab.motion(g[0]),
                            std::vector<Motion>{inst.vocab.motion(g[0]), inst.vocab.motion(g[1])}};
    LossConfig cfg;
    cfg.beta = 0.5 + 0.002 * trial;
    double pl = pl_offline_loss(Policy{inst.policy}, inst.reference, record, cfg);
    double pair = dpo_pairwise_loss(Policy{inst.policy}, inst.reference, record.winner,
                                    (*record.ranked_group)[1], Condition{0}, cfg);
    ASSERT_NEAR(pl, pair, 1e-12);
  }
}

TEST(PlOffline, ThetaEqualsRefK3GivesLog6) {
  Vocabulary vocab(3, 2, 9);
  CategoricalPolicy theta(vocab, 1, {0.2, -0.5, 1.1});
  ReferenceSnapshot ref{Policy{theta}};
  PreferenceRecord record{Condition{0}, vocab.motion(2),
                          std::vector<Motion>{vocab.motion(2), vocab.motion(0), vocab.motion(1)}};
  LossConfig cfg;
  EXPECT_NEAR(pl_offline_loss(Policy{theta}, ref, record, cfg), std::log(6.0), 1e-12);
  EXPECT_NEAR(std::log(6.0), 1.7918, 1e-4);
}

TEST(PlOffline, MatchesIndependentReimplementation) {
  RandomStream rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    FiniteInstance inst = make_random_instance(derive_seed(4242, static_cast<std::uint64_t>(trial)),
                                               5, 1, 3);
    std::vector<Motion> group;
    for (int item : inst.gt_groups[0]) group.push_back(inst.vocab.motion(item));
    PreferenceRecord record{Condition{0}, group[0], group};
    LossConfig cfg;
    cfg.beta = rng.uniform(0.3, 2.5);
    double got = pl_offline_loss(Policy{inst.policy}, inst.reference, record, cfg);
    double oracle = pl_offline_reference(inst.policy, inst.reference, group, Condition{0}, cfg.beta);
    ASSERT_NEAR(got, oracle, 1e-11);
  }
}

TEST(PlOffline, MissingGroup) {
  Fixture f({0.0, 0.0}, {0.0, 0.0});
  PreferenceRecord record{Condition{0}, f.vocab.motion(0), {}};
  EXPECT_THROW(pl_offline_loss(Policy{f.theta}, f.ref, record, f.cfg), std::invalid_argument);
}

TEST(OnlineDpo, UniformCase) {
  // equal rewards and theta == ref: sum_k 1/(K-k+1) * log(K-k+1)
  for (int k = 2; k <= 4; ++k) {
    Vec rewards(static_cast<std::size_t>(k), 0.5);
    Vec h(static_cast<std::size_t>(k), 0.0);
    double expected = 0.0;
    for (int rank = 1; rank <= k; ++rank)
      expected += 1.0 / (k - rank + 1) * std::log(static_cast<double>(k - rank + 1));
    EXPECT_NEAR(online_dpo_core(rewards, h, 1.0), expected, 1e-12);
  }
  EXPECT_NEAR(0.5 * kLog2, 0.3466, 1e-4);
}

TEST(OnlineDpo, OneHotLimitRecoversTopLogProb) {
  // a huge reward gap concentrates p_r on rank 1; the rank-2 term carries
  // log p_theta == 0, so the loss collapses to the DPO-style top term
  Vec rewards{500.0, 0.0};
  Vec h{0.9, -0.3};
  double beta = 1.3;
  Vec ranked{beta * h[0], beta * h[1]};
  double log_p_top = ranked[0] - logsumexp(ranked);
  EXPECT_NEAR(online_dpo_core(rewards, h, beta), -log_p_top, 1e-10);
}

TEST(OnlineDpo, ThroughPolicyInterface) {
  Fixture f({0.6, -0.2, 0.1}, {0.0, 0.0, 0.0});
  f.cfg.k = 3;
  TableReward table(1, 3, {0.9, 0.2, 0.5});
  std::vector<Motion> candidates{f.vocab.motion(1), f.vocab.motion(0), f.vocab.motion(2)};
  double got = online_dpo_loss(Policy{f.theta}, f.ref, RewardModel{table}, candidates,
                               Condition{0}, f.cfg);
  // independent route: explicit rewards + h values
  Vec rewards{0.2, 0.9, 0.5};
  Vec h(3);
  for (int i = 0; i < 3; ++i)
    h[static_cast<std::size_t>(i)] = log_ratio(Policy{f.theta}, f.ref, candidates[static_cast<std::size_t>(i)], Condition{0});
  EXPECT_NEAR(got, online_dpo_core(rewards, h, f.cfg.beta), 1e-14);
  EXPECT_THROW(online_dpo_loss(Policy{f.theta}, f.ref, RewardModel{table},
                               std::vector<Motion>{f.vocab.motion(0)}, Condition{0}, f.cfg),
               std::invalid_argument);
}

TEST(Dsopo, DegenerateWinnerEqualsLoser) {
  Fixture f({0.3, -0.8}, {0.0, 0.0});
  TableReward table(1, 2, {0.1, 0.9});
  PreferenceRecord record{Condition{0}, f.vocab.motion(0), {}};
  std::vector<Motion> candidates{f.vocab.motion(0)};
  double loss = dsopo_loss(Policy{f.theta}, f.ref, RewardModel{table}, record, candidates,
                           Condition{0}, f.cfg);
  EXPECT_NEAR(loss, kLog2, 1e-15);
}

TEST(Dsopo, SingletonCandidateIsLoserRegardlessOfReward) {
  Fixture f({0.3, -0.8}, {0.0, 0.0});
  TableReward table(1, 2, {0.99, 0.01});  // high reward, still selected
  PreferenceRecord record{Condition{0}, f.vocab.motion(1), {}};
  std::vector<Motion> candidates{f.vocab.motion(0)};
  double got = dsopo_loss(Policy{f.theta}, f.ref, RewardModel{table}, record, candidates,
                          Condition{0}, f.cfg);
  double expected = dpo_pairwise_loss(Policy{f.theta}, f.ref, record.winner, candidates[0],
                                      Condition{0}, f.cfg);
  EXPECT_EQ(got, expected);
  EXPECT_THROW(dsopo_loss(Policy{f.theta}, f.ref, RewardModel{table}, record,
                          std::vector<Motion>{}, Condition{0}, f.cfg),
               std::invalid_argument);
}

TEST(Usopo, WinnerOnlyBranchAtThetaEqualsRef) {
  Vocabulary vocab(3, 2, 33);
  CategoricalPolicy theta(vocab, 1, {0.5, 0.1, -0.2});
  ReferenceSnapshot ref{Policy{theta}};
  TableReward table(1, 3, {0.6, 0.8, 0.9});  // everything above tau = 0.45
  LossConfig cfg;
  PreferenceRecord record{Condition{0}, vocab.motion(0), {}};
  std::vector<Motion> candidates{vocab.motion(1), vocab.motion(2)};
  EXPECT_NEAR(usopo_loss(Policy{theta}, ref, RewardModel{table}, record, candidates, Condition{0},
                         cfg),
              kLog2, 1e-15);
}

TEST(Usopo, BelowThresholdMatchesDsopo) {
  Fixture f({0.7, -0.4, 0.2}, {0.1, 0.0, -0.3});
  TableReward table(1, 3, {0.2, 0.8, 0.5});
  PreferenceRecord record{Condition{0}, f.vocab.motion(1), {}};
  std::vector<Motion> candidates{f.vocab.motion(0), f.vocab.motion(2)};
  double u = usopo_loss(Policy{f.theta}, f.ref, RewardModel{table}, record, candidates,
                        Condition{0}, f.cfg);
  double d = dsopo_loss(Policy{f.theta}, f.ref, RewardModel{table}, record, candidates,
                        Condition{0}, f.cfg);
  EXPECT_EQ(u, d);
}

TEST(MinSimilarity, Examples) {
  Motion winner{{1.0, 0.0}, -1};
  std::vector<Motion> with_self{winner, Motion{{0.0, 1.0}, -1}};
  EXPECT_NEAR(min_similarity(winner, with_self), 0.0, 1e-15);
  std::vector<Motion> only_self{winner};
  EXPECT_NEAR(min_similarity(winner, only_self), 1.0, 1e-15);
  std::vector<Motion> mixed{Motion{{0.0, 1.0}, -1}, Motion{{-1.0, 0.0}, -1}};
  EXPECT_NEAR(min_similarity(winner, mixed), -1.0, 1e-15);
  EXPECT_THROW(min_similarity(winner, std::vector<Motion>{}), std::invalid_argument);
}

TEST(WinWeight, Arithmetic) {
  LossConfig cfg;  // beta = 1, C = 2
  EXPECT_EQ(win_weight(1.0, cfg), 1.0);
  EXPECT_EQ(win_weight(-1.0, cfg), 3.0);
  LossConfig boundary;
  boundary.c_const = 1.0;
  EXPECT_EQ(win_weight(1.0, boundary), 0.0);
}

TEST(Sopo, EqualsUsopoWhenWeightsCoincide) {
  // candidates colinear with the winner: S = 1, so beta_w = beta at C = 2
  MixtureReward mixture({MixtureComponent{{-3.0, 2.0}, Cov2(1.0, 0.5, 1.0), 0.5},
                         MixtureComponent{{2.0, -2.0}, Cov2(1.0, -0.5, 1.0), 0.5}});
  GaussianPolicy theta = GaussianPolicy::single({0.0, 0.0}, {1.0, 1.0});
  GaussianPolicy ref_pol = GaussianPolicy::single({0.5, -0.5}, {1.0, 1.0});
  ReferenceSnapshot ref{Policy{ref_pol}};
  LossConfig cfg;
  Motion winner{{1.0, 0.5}, -1};
  std::vector<Motion> candidates{Motion{{2.0, 1.0}, -1}, Motion{{4.0, 2.0}, -1}};
  PreferenceRecord record{Condition{0}, winner, {}};
  double s = sopo_loss(Policy{theta}, ref, RewardModel{mixture}, record, candidates, Condition{0},
                       cfg);
  double u = usopo_loss(Policy{theta}, ref, RewardModel{mixture}, record, candidates, Condition{0},
                        cfg);
  EXPECT_NEAR(s, u, 1e-14);
}

TEST(Sopo, ThetaEqualsRefGivesLog2BothBranches) {
  Vocabulary vocab(3, 2, 55);
  CategoricalPolicy theta(vocab, 1, {0.5, 0.1, -0.2});
  ReferenceSnapshot ref{Policy{theta}};
  LossConfig cfg;
  PreferenceRecord record{Condition{0}, vocab.motion(0), {}};
  std::vector<Motion> candidates{vocab.motion(1), vocab.motion(2)};
  TableReward low(1, 3, {0.5, 0.1, 0.2});   // loser below tau
  TableReward high(1, 3, {0.5, 0.8, 0.9});  // all above tau
  EXPECT_NEAR(sopo_loss(Policy{theta}, ref, RewardModel{low}, record, candidates, Condition{0}, cfg),
              kLog2, 1e-15);
  EXPECT_NEAR(sopo_loss(Policy{theta}, ref, RewardModel{high}, record, candidates, Condition{0}, cfg),
              kLog2, 1e-15);
}

TEST(Sopo, FarWinnerTriplesWinnerTerm) {
  // S = -1 with C = 2, beta = 1 gives beta_w = 3; check against the
  // hand-expanded sigmoid argument
  LossConfig cfg;
  Motion winner{{1.0, 0.0}, -1};
  std::vector<Motion> candidates{Motion{{-2.0, 0.0}, -1}};  // exactly opposite direction
  PreferenceRecord record{Condition{0}, winner, {}};

  GaussianPolicy theta = GaussianPolicy::single({0.3, 0.0}, {1.0, 1.0});
  GaussianPolicy ref_pol = GaussianPolicy::single({0.0, 0.0}, {1.0, 1.0});
  ReferenceSnapshot ref{Policy{ref_pol}};
  MixtureReward mixture({MixtureComponent{{-3.0, 2.0}, Cov2(1.0, 0.5, 1.0), 0.5},
                         MixtureComponent{{2.0, -2.0}, Cov2(1.0, -0.5, 1.0), 0.5}});

  double h_w = log_ratio(Policy{theta}, ref, winner, Condition{0});
  double h_l = log_ratio(Policy{theta}, ref, candidates[0], Condition{0});
  double r_l = reward(RewardModel{mixture}, candidates[0], Condition{0});
  double expected = r_l < cfg.tau ? neg_log_sigmoid(3.0 * h_w - h_l)
                                  : neg_log_sigmoid(3.0 * h_w);
  EXPECT_NEAR(sopo_loss(Policy{theta}, ref, RewardModel{mixture}, record, candidates, Condition{0},
                        cfg),
              expected, 1e-14);
}

TEST(Losses, BranchConsistencyAcrossFamily) {
  // whenever min reward < tau and beta_w == beta, the three losses coincide
  LossConfig cfg;
  Motion winner{{1.0, 1.0}, -1};
  GaussianPolicy theta = GaussianPolicy::single({0.1, 0.3}, {1.0, 1.2});
  GaussianPolicy ref_pol = GaussianPolicy::single({-0.2, 0.0}, {0.9, 1.0});
  ReferenceSnapshot ref{Policy{ref_pol}};
  MixtureReward rm({MixtureComponent{{5.0, 5.0}, Cov2(0.5, 0.0, 0.5), 1.0}});
  // colinear candidates keep S = 1; both sit far from the reward mode
  std::vector<Motion> cont{Motion{{2.0, 2.0}, -1}, Motion{{3.0, 3.0}, -1}};
  PreferenceRecord record{Condition{0}, winner, {}};
  double d = dsopo_loss(Policy{theta}, ref, RewardModel{rm}, record, cont, Condition{0}, cfg);
  double u = usopo_loss(Policy{theta}, ref, RewardModel{rm}, record, cont, Condition{0}, cfg);
  double s = sopo_loss(Policy{theta}, ref, RewardModel{rm}, record, cont, Condition{0}, cfg);
  ASSERT_LT(reward(RewardModel{rm}, cont[0], Condition{0}), cfg.tau);
  EXPECT_EQ(d, u);
  EXPECT_NEAR(s, u, 1e-14);
}

TEST(Losses, LogisticMonotonicityOfBranchForms) {
  LossConfig cfg;
  double beta_w = win_weight(0.3, cfg);
  double prev_w = std::numeric_limits<double>::infinity();
  for (double h_w = -3.0; h_w <= 3.0; h_w += 0.25) {
    double v = neg_log_sigmoid(beta_w * h_w - cfg.beta * 0.4);
    EXPECT_LT(v, prev_w);
    prev_w = v;
  }
  double prev_l = -std::numeric_limits<double>::infinity();
  for (double h_l = -3.0; h_l <= 3.0; h_l += 0.25) {
    double v = neg_log_sigmoid(beta_w * 0.4 - cfg.beta * h_l);
    EXPECT_GT(v, prev_l);
    prev_l = v;
  }
}

TEST(Losses, RaisingWinnerProbabilityLowersSopoLoss) {
  Vocabulary vocab(3, 2, 101);
  TableReward table(1, 3, {0.9, 0.1, 0.3});
  LossConfig cfg;
  PreferenceRecord record{Condition{0}, vocab.motion(0), {}};
  std::vector<Motion> candidates{vocab.motion(1), vocab.motion(2)};
  ReferenceSnapshot ref{Policy{CategoricalPolicy(vocab, 1, {0.0, 0.0, 0.0})}};
  double prev = std::numeric_limits<double>::infinity();
  for (double logit = -1.0; logit <= 2.0; logit += 0.5) {
    CategoricalPolicy theta(vocab, 1, {logit, 0.0, 0.0});
    double v = sopo_loss(Policy{theta}, ref, RewardModel{table}, record, candidates, Condition{0},
                         cfg);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Losses, PositiveAndFinite) {
  RandomStream rng(404);
  LossConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    FiniteInstance inst = make_random_instance(derive_seed(9000, static_cast<std::uint64_t>(trial)),
                                               4, 1, 3);
    RewardModel rm{inst.rewards};
    std::vector<Motion> candidates;
    for (int j = 0; j < 3; ++j) candidates.push_back(inst.vocab.motion(rng.uniform_int(4)));
    PreferenceRecord record{Condition{0}, inst.vocab.motion(rng.uniform_int(4)), {}};
    std::vector<Motion> group;
    for (int item : inst.gt_groups[0]) group.push_back(inst.vocab.motion(item));
    PreferenceRecord ranked{Condition{0}, group[0], group};
    for (double v :
         {dpo_pairwise_loss(Policy{inst.policy}, inst.reference, record.winner, candidates[0],
                            Condition{0}, cfg),
          pl_offline_loss(Policy{inst.policy}, inst.reference, ranked, cfg),
          online_dpo_loss(Policy{inst.policy}, inst.reference, rm, candidates, Condition{0}, cfg),
          dsopo_loss(Policy{inst.policy}, inst.reference, rm, record, candidates, Condition{0}, cfg),
          usopo_loss(Policy{inst.policy}, inst.reference, rm, record, candidates, Condition{0}, cfg),
          sopo_loss(Policy{inst.policy}, inst.reference, rm, record, candidates, Condition{0}, cfg)}) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GT(v, 0.0);
    }
  }
}

TEST(PreferenceRecord, ValidatesGroup) {
  Vocabulary vocab(3, 2, 5);
  PreferenceRecord bad_leader{Condition{0}, vocab.motion(1),
                              std::vector<Motion>{vocab.motion(0), vocab.motion(1)}};
  EXPECT_THROW(validate_record(bad_leader), std::invalid_argument);
  PreferenceRecord dup{Condition{0}, vocab.motion(0),
                       std::vector<Motion>{vocab.motion(0), vocab.motion(0)}};
  EXPECT_THROW(validate_record(dup), std::invalid_argument);
}
