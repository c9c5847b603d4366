#include <gtest/gtest.h>

#include <cmath>

#include "sopo/bench.hpp"

using namespace sopo;

TEST(BuildSetup, PaperDefaults) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  EXPECT_EQ(setup.generator_init.mean(Condition{0}, 0), -2.0);
  EXPECT_EQ(setup.generator_init.mean(Condition{0}, 1), 1.0);
  EXPECT_NEAR(setup.generator_init.scale(Condition{0}, 0), std::sqrt(2.0), 1e-15);
  const auto& comps = setup.reward.components();
  ASSERT_EQ(comps.size(), 2u);
  EXPECT_EQ(comps[0].cov.b(), 0.5);
  EXPECT_EQ(comps[1].cov.b(), -0.5);
  EXPECT_EQ(comps[0].weight, 0.5);
  EXPECT_EQ(setup.offline_unpreferred.mean, (Vec{0.0, 3.0}));
}

TEST(BuildSetup, RejectsDegenerateCovariance) {
  SetupConfig config;
  config.generator_var = {0.0, 2.0};
  EXPECT_THROW(build_setup(config), std::invalid_argument);
  SetupConfig bad_reward;
  bad_reward.reward_cov1 = {1.0, 1.5, 1.0};  // not SPD
  EXPECT_THROW(build_setup(bad_reward), std::invalid_argument);
}

TEST(EvaluatePolicy, ExtremesAndScaling) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  GaussianPolicy at_mode = GaussianPolicy::single({-3.0, 2.0}, {0.01, 0.01});
  EvalResult near_one = evaluate_policy(at_mode, setup, 2000, 1, cfg.tau);
  EXPECT_GT(near_one.mean_reward, 0.95);
  EXPECT_LT(near_one.low_reward_mass, 0.01);

  GaussianPolicy far = GaussianPolicy::single({50.0, 50.0}, {1.0, 1.0});
  EvalResult near_zero = evaluate_policy(far, setup, 2000, 1, cfg.tau);
  EXPECT_LT(near_zero.mean_reward, 1e-6);
  EXPECT_EQ(near_zero.low_reward_mass, 1.0);

  EvalResult se_small = evaluate_policy(setup.generator_init, setup, 8000, 3, cfg.tau);
  EvalResult se_large = evaluate_policy(setup.generator_init, setup, 4000, 3, cfg.tau);
  EXPECT_NEAR(se_large.mean_reward_se / se_small.mean_reward_se, std::sqrt(2.0), 0.35);

  EXPECT_THROW(evaluate_policy(far, setup, 999, 1, cfg.tau), std::invalid_argument);
}

TEST(TrainRegime, ZeroLearningRateKeepsParams) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  BenchOptions opt;
  opt.iters = 5;
  opt.lr = 0.0;
  for (Regime regime : {Regime::offline, Regime::online, Regime::modipo, Regime::sopo}) {
    BenchResult r = train_regime(setup, regime, cfg, opt, 9);
    EXPECT_EQ(r.final_policy.params(), setup.generator_init.params()) << regime_name(regime);
  }
}

TEST(TrainRegime, DeterministicUnderSeed) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  BenchOptions opt;
  opt.iters = 20;
  BenchResult a = train_regime(setup, Regime::offline, cfg, opt, 4);
  BenchResult b = train_regime(setup, Regime::offline, cfg, opt, 4);
  EXPECT_EQ(a.final_policy.params(), b.final_policy.params());
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
    EXPECT_EQ(a.curve[i].mean_reward, b.curve[i].mean_reward);
  }
  BenchResult c = train_regime(setup, Regime::offline, cfg, opt, 5);
  EXPECT_NE(a.final_policy.params(), c.final_policy.params());
}

TEST(TrainRegime, SopoRegressionBaseline) {
  // recorded regression value for the default-seed sopo run; the toy sopo
  // equilibrates as a wide both-mode Gaussian, so the recorded level sits
  // near the initial policy's score rather than above it
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  BenchOptions opt;
  opt.iters = 200;
  BenchResult r = train_regime(setup, Regime::sopo, cfg, opt, 0);
  EXPECT_NEAR(r.final_eval.mean_reward, 0.20, 0.05);
  EXPECT_GT(r.final_eval.mean_reward, 0.0);
}

TEST(TrainRegime, DivergenceDiagnostic) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  BenchOptions opt;
  opt.iters = 3;
  opt.lr = 1e308;  // forces an overflow in the first update
  try {
    train_regime(setup, Regime::offline, cfg, opt, 1);
    FAIL() << "expected divergence";
  } catch (const BenchDivergence& e) {
    EXPECT_EQ(e.iteration(), 0);
    EXPECT_NE(std::string(e.what()).find("offline"), std::string::npos);
  }
}

TEST(TrainRegime, FrozenCandidateFlagRuns) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  BenchOptions opt;
  opt.iters = 30;
  opt.freeze_candidates = true;
  BenchResult frozen = train_regime(setup, Regime::sopo, cfg, opt, 2);
  opt.freeze_candidates = false;
  BenchResult fresh = train_regime(setup, Regime::sopo, cfg, opt, 2);
  EXPECT_NE(frozen.final_policy.params(), fresh.final_policy.params());
}

TEST(TrainRegime, OnlinePolicyRewardCorrelationPositive) {
  SyntheticSetup setup = build_setup(SetupConfig{});
  LossConfig cfg;
  BenchOptions opt;
  opt.iters = 200;
  BenchResult r = train_regime(setup, Regime::online, cfg, opt, 7);
  auto xs = sample(Policy{r.final_policy}, Condition{0}, 2000, 717);
  Vec density, reward_vals;
  for (const Motion& x : xs) {
    density.push_back(r.final_policy.log_prob(x, Condition{0}));
    reward_vals.push_back(setup.reward.score(x, Condition{0}));
  }
  EXPECT_GT(spearman_correlation(density, reward_vals), 0.0);
}
