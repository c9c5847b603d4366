#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sopo/diffusion.hpp"
#include "sopo/oracles.hpp"

namespace sopo {

// Full-covariance 2D Gaussian used for the offline unpreferred source and
// the reward mixture components.
struct Gaussian2 {
  Vec mean{0.0, 0.0};
  Cov2 cov{};

  Vec sample(RandomStream& rng) const {
    auto d = cov.transform(rng.normal(), rng.normal());
    return Vec{mean[0] + d[0], mean[1] + d[1]};
  }
};

// Defaults reproduce the 2D toy comparison: generator N([-2, 1], diag(2, 2)),
// reward mixture with means [-3, 2] and [2, -2], covariance off-diagonals
// +-0.5, equal weights. The offline unpreferred source is a configured
// Gaussian sitting away from both reward modes.
struct SetupConfig {
  Vec generator_mean{-2.0, 1.0};
  Vec generator_var{2.0, 2.0};  // diagonal
  Vec unpreferred_mean{0.0, 3.0};
  Vec unpreferred_var{0.5, 0.5};  // diagonal
  Vec reward_mean1{-3.0, 2.0};
  Vec reward_mean2{2.0, -2.0};
  Vec reward_cov1{1.0, 0.5, 1.0};   // (a11, a12, a22)
  Vec reward_cov2{1.0, -0.5, 1.0};
  Vec reward_weights{0.5, 0.5};

  bool operator==(const SetupConfig&) const = default;
};

struct SyntheticSetup {
  GaussianPolicy generator_init;
  MixtureReward reward;
  Gaussian2 offline_unpreferred;
};

inline SyntheticSetup build_setup(const SetupConfig& config) {
  auto diag_scales = [](const Vec& var) {
    if (var.size() != 2) throw std::invalid_argument("build_setup: variances must be 2D");
    Vec s(2);
    for (int i = 0; i < 2; ++i) {
      if (!(var[static_cast<std::size_t>(i)] > 0.0))
        throw std::invalid_argument("build_setup: variances must be positive");
      s[static_cast<std::size_t>(i)] = std::sqrt(var[static_cast<std::size_t>(i)]);
    }
    return s;
  };
  if (config.reward_weights.size() != 2 || config.reward_cov1.size() != 3 ||
      config.reward_cov2.size() != 3 || config.reward_mean1.size() != 2 ||
      config.reward_mean2.size() != 2 || config.generator_mean.size() != 2 ||
      config.unpreferred_mean.size() != 2)
    throw std::invalid_argument("build_setup: malformed setup config");

  std::vector<MixtureComponent> components;
  components.push_back(MixtureComponent{
      config.reward_mean1, Cov2(config.reward_cov1[0], config.reward_cov1[1], config.reward_cov1[2]),
      config.reward_weights[0]});
  components.push_back(MixtureComponent{
      config.reward_mean2, Cov2(config.reward_cov2[0], config.reward_cov2[1], config.reward_cov2[2]),
      config.reward_weights[1]});

  return SyntheticSetup{
      GaussianPolicy::single(config.generator_mean, diag_scales(config.generator_var)),
      MixtureReward(std::move(components)),
      Gaussian2{config.unpreferred_mean,
                Cov2(config.unpreferred_var[0], 0.0, config.unpreferred_var[1])}};
}

enum class Regime { offline, online, modipo, sopo };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::offline: return "offline";
    case Regime::online: return "online";
    case Regime::modipo: return "modipo";
    case Regime::sopo: return "sopo";
  }
  return "unknown";
}

struct BenchOptions {
  int iters = 500;
  double lr = 0.05;
  int batch = 32;
  int eval_mc = 1000;
  int final_mc = 20000;
  int dataset_size = 256;          // fixed offline dataset entries per seed
  bool freeze_candidates = false;  // reuse iteration-0 candidate batches
  // The 2D toy draws online-DPO candidates from the frozen reference model;
  // false switches to current-policy sampling.
  bool online_from_reference = true;

  bool operator==(const BenchOptions&) const = default;
};

struct CurvePoint {
  int iteration;
  double loss;
  double mean_reward;
  double low_reward_mass;
};

struct EvalResult {
  double mean_reward = 0.0;
  double mean_reward_se = 0.0;
  double low_reward_mass = 0.0;
  double low_reward_mass_se = 0.0;
};

inline EvalResult evaluate_policy(const GaussianPolicy& policy, const SyntheticSetup& setup,
                                  int n_mc, std::uint64_t seed, double tau) {
  if (n_mc < 1000) throw std::invalid_argument("evaluate_policy: n_mc must be >= 1000");
  RandomStream rng(seed);
  KahanSum sum, sum_sq, low;
  Condition c{0};
  for (int i = 0; i < n_mc; ++i) {
    Motion x = policy.sample_one(c, rng);
    double r = setup.reward.score(x, c);
    sum.add(r);
    sum_sq.add(r * r);
    if (r < tau) low.add(1.0);
  }
  EvalResult out;
  out.mean_reward = sum.value() / n_mc;
  double var = std::max(0.0, sum_sq.value() / n_mc - out.mean_reward * out.mean_reward);
  out.mean_reward_se = std::sqrt(var / n_mc);
  out.low_reward_mass = low.value() / n_mc;
  out.low_reward_mass_se =
      std::sqrt(std::max(0.0, out.low_reward_mass * (1.0 - out.low_reward_mass)) / n_mc);
  return out;
}

struct BenchResult {
  Regime regime = Regime::offline;
  EvalResult final_eval;
  GaussianPolicy final_policy;
  std::vector<CurvePoint> curve;
};

class BenchDivergence : public std::runtime_error {
 public:
  BenchDivergence(Regime regime, int iteration)
      : std::runtime_error(std::string("training diverged: regime ") + regime_name(regime) +
                           " iteration " + std::to_string(iteration)),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

// -------------------------------------------------------------------------
// Analytic gradients of the regime losses for the diagonal Gaussian policy.
// Candidates and similarity weights are constants (stop-gradient); only the
// h terms of explicit winners/losers carry parameter sensitivity.

namespace detail {

inline void axpy(double a, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline void accumulate_pair_grad(const GaussianPolicy& policy, const ReferenceSnapshot& reference,
                                 const Motion& winner, const Motion& loser, Condition c,
                                 const LossConfig& cfg, KahanSum& loss, Vec& grad) {
  Policy as_variant{policy};
  double z = cfg.beta * (log_ratio(as_variant, reference, winner, c) -
                         log_ratio(as_variant, reference, loser, c));
  loss.add(neg_log_sigmoid(z));
  double dl_dz = -sigmoid(-z);
  axpy(dl_dz * cfg.beta, policy.grad_log_prob(winner, c), grad);
  axpy(-dl_dz * cfg.beta, policy.grad_log_prob(loser, c), grad);
}

inline void accumulate_online_grad(const GaussianPolicy& policy, const ReferenceSnapshot& reference,
                                   const SyntheticSetup& setup,
                                   const std::vector<Motion>& candidates, Condition c,
                                   const LossConfig& cfg, KahanSum& loss, Vec& grad) {
  const std::size_t k = candidates.size();
  Vec rewards(k);
  for (std::size_t i = 0; i < k; ++i) rewards[i] = setup.reward.score(candidates[i], c);
  auto order = rank_by_reward(rewards);

  Policy as_variant{policy};
  Vec scores(k);
  std::vector<Vec> h_grads(k);
  Vec reward_weights(k);
  for (std::size_t rank = 0; rank < k; ++rank) {
    std::size_t idx = order[rank];
    scores[rank] = cfg.beta * log_ratio(as_variant, reference, candidates[idx], c);
    h_grads[rank] = policy.grad_log_prob(candidates[idx], c);
    reward_weights[rank] = std::exp(rewards[idx]);
  }
  RankProbabilities pr = pl_rank_probs(reward_weights);
  Vec log_ptheta = pl_log_rank_probs(scores);

  for (std::size_t rank = 0; rank < k; ++rank) {
    loss.add(-pr.p[rank] * log_ptheta[rank]);
    // grad of log p_theta(rank): beta * (grad h_rank - sum_{j>=rank} s_j grad h_j)
    double lse = logsumexp(std::span<const double>(scores).subspan(rank));
    axpy(-pr.p[rank] * cfg.beta, h_grads[rank], grad);
    for (std::size_t j = rank; j < k; ++j) {
      double s_j = std::exp(scores[j] - lse);
      axpy(pr.p[rank] * cfg.beta * s_j, h_grads[j], grad);
    }
  }
}

inline void accumulate_sopo_grad(const GaussianPolicy& policy, const ReferenceSnapshot& reference,
                                 const SyntheticSetup& setup, const Motion& winner,
                                 const CandidateBatch& batch, Condition c, const LossConfig& cfg,
                                 KahanSum& loss, Vec& grad) {
  Policy as_variant{policy};
  double beta_w = win_weight(min_similarity(winner, batch.candidates), cfg);
  double h_w = log_ratio(as_variant, reference, winner, c);
  (void)setup;
  if (batch.branch == Branch::valuable_unpreferred) {
    const Motion& loser = batch.candidates[batch.loser_index];
    double z = beta_w * h_w - cfg.beta * log_ratio(as_variant, reference, loser, c);
    loss.add(neg_log_sigmoid(z));
    double dl_dz = -sigmoid(-z);
    axpy(dl_dz * beta_w, policy.grad_log_prob(winner, c), grad);
    axpy(-dl_dz * cfg.beta, policy.grad_log_prob(loser, c), grad);
  } else {
    double z = beta_w * h_w;
    loss.add(neg_log_sigmoid(z));
    axpy(-sigmoid(-z) * beta_w, policy.grad_log_prob(winner, c), grad);
  }
}

}  // namespace detail

inline BenchResult train_regime(const SyntheticSetup& setup, Regime regime, const LossConfig& cfg,
                                const BenchOptions& opt, std::uint64_t seed) {
  GaussianPolicy policy = setup.generator_init;
  ReferenceSnapshot reference{Policy{setup.generator_init}};
  RewardModel reward_model{setup.reward};
  Condition c{0};
  const std::uint64_t regime_tag = static_cast<std::uint64_t>(regime) + 1;
  const int n_data = std::max(opt.dataset_size, 1);

  // The offline preference data is a fixed, finite dataset drawn once per
  // seed: preferred motions from the reward mixture, unpreferred from the
  // configured off-mode Gaussian. SoPo reuses the same preferred entries.
  std::vector<Motion> offline_winners;
  std::vector<Motion> offline_losers;
  if (regime == Regime::offline || regime == Regime::sopo) {
    for (int i = 0; i < n_data; ++i) {
      RandomStream w_rng(derive_seed(seed, 101, static_cast<std::uint64_t>(i)));
      RandomStream l_rng(derive_seed(seed, 103, static_cast<std::uint64_t>(i)));
      offline_winners.push_back(Motion{setup.reward.sample(w_rng), -1});
      offline_losers.push_back(Motion{setup.offline_unpreferred.sample(l_rng), -1});
    }
  }

  // MoDiPO builds its fixed dataset once, from the frozen pretrained model.
  std::vector<std::pair<Motion, Motion>> modipo_pairs;
  if (regime == Regime::modipo) {
    modipo_pairs.reserve(static_cast<std::size_t>(n_data));
    for (int i = 0; i < n_data; ++i)
      modipo_pairs.push_back(modipo_pairing(reference.policy(), reward_model, c, cfg,
                                            derive_seed(seed, 300, static_cast<std::uint64_t>(i))));
  }

  std::vector<CandidateBatch> frozen_batches;  // per batch slot, when frozen

  BenchResult result;
  result.regime = regime;
  result.curve.reserve(static_cast<std::size_t>(opt.iters) + 1);

  for (int iter = 0; iter < opt.iters; ++iter) {
    KahanSum loss;
    Vec grad(policy.params().size(), 0.0);
    for (int b = 0; b < opt.batch; ++b) {
      const std::uint64_t it = static_cast<std::uint64_t>(iter);
      const std::uint64_t bt = static_cast<std::uint64_t>(b);
      const std::size_t data_idx =
          static_cast<std::size_t>((iter * opt.batch + b) % n_data);
      switch (regime) {
        case Regime::offline: {
          detail::accumulate_pair_grad(policy, reference, offline_winners[data_idx],
                                       offline_losers[data_idx], c, cfg, loss, grad);
          break;
        }
        case Regime::online: {
          std::uint64_t s = derive_seed(seed, 200 + regime_tag, it, bt);
          std::vector<Motion> candidates =
              opt.online_from_reference ? sample(reference.policy(), c, cfg.k, s)
                                        : sample(Policy{policy}, c, cfg.k, s);
          detail::accumulate_online_grad(policy, reference, setup, candidates, c, cfg, loss, grad);
          break;
        }
        case Regime::modipo: {
          const auto& pair = modipo_pairs[data_idx];
          detail::accumulate_pair_grad(policy, reference, pair.first, pair.second, c, cfg, loss,
                                       grad);
          break;
        }
        case Regime::sopo: {
          const Motion& winner = offline_winners[data_idx];
          CandidateBatch batch;
          if (opt.freeze_candidates) {
            if (iter == 0) {
              std::uint64_t s = derive_seed(seed, 200 + regime_tag, 0, bt);
              frozen_batches.push_back(
                  generate_candidates(Policy{policy}, reward_model, c, cfg, s));
            }
            batch = frozen_batches[static_cast<std::size_t>(b)];
          } else {
            std::uint64_t s = derive_seed(seed, 200 + regime_tag, it, bt);
            batch = generate_candidates(Policy{policy}, reward_model, c, cfg, s);
          }
          detail::accumulate_sopo_grad(policy, reference, setup, winner, batch, c, cfg, loss,
                                       grad);
          break;
        }
      }
    }

    Vec params = policy.params();
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= opt.lr * grad[i] / opt.batch;
    if (!all_finite(params)) throw BenchDivergence(regime, iter);
    policy.set_params(params);

    EvalResult eval = evaluate_policy(policy, setup, opt.eval_mc,
                                      derive_seed(seed, 900, static_cast<std::uint64_t>(iter)),
                                      cfg.tau);
    result.curve.push_back(
        CurvePoint{iter, loss.value() / opt.batch, eval.mean_reward, eval.low_reward_mass});
  }

  result.final_policy = policy;
  result.final_eval = evaluate_policy(policy, setup, opt.final_mc, derive_seed(seed, 901, 0), cfg.tau);
  return result;
}

// Spearman rank correlation; used to check the trained online policy ranks
// motions consistently with the reward.
inline double spearman_correlation(const Vec& a, const Vec& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman_correlation: need matched samples");
  auto ranks = [](const Vec& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    Vec r(v.size());
    for (std::size_t i = 0; i < order.size(); ++i) r[order[i]] = static_cast<double>(i);
    return r;
  };
  Vec ra = ranks(a), rb = ranks(b);
  double n = static_cast<double>(a.size());
  double mean = (n - 1.0) / 2.0;
  KahanSum cov, var_a, var_b;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov.add((ra[i] - mean) * (rb[i] - mean));
    var_a.add((ra[i] - mean) * (ra[i] - mean));
    var_b.add((rb[i] - mean) * (rb[i] - mean));
  }
  return cov.value() / std::sqrt(var_a.value() * var_b.value());
}

}  // namespace sopo
