#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sopo/core.hpp"
#include "sopo/reward.hpp"

namespace sopo {

// Shared hyperparameters of the loss family.
struct LossConfig {
  double beta = 1.0;    // DPO temperature
  double tau = 0.45;    // unpreferred-motion threshold
  double c_const = 2.0; // winner reweighting constant, >= 1
  int k = 4;            // online candidate count

  void validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("LossConfig: beta must be > 0");
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("LossConfig: tau must lie in (0, 1)");
    if (!(c_const >= 1.0)) throw std::invalid_argument("LossConfig: c_const must be >= 1");
    if (k < 2) throw std::invalid_argument("LossConfig: k must be >= 2");
  }

  bool operator==(const LossConfig&) const = default;
};

// One offline training unit: a condition, its preferred motion, and
// optionally a full ranked group (best first).
struct PreferenceRecord {
  Condition condition;
  Motion winner;
  std::optional<std::vector<Motion>> ranked_group;
};

inline void validate_record(const PreferenceRecord& record) {
  if (!record.ranked_group) return;
  const auto& group = *record.ranked_group;
  if (group.empty()) throw std::invalid_argument("PreferenceRecord: empty ranked group");
  if (group.front().item != record.winner.item || group.front().coords != record.winner.coords)
    throw std::invalid_argument("PreferenceRecord: winner must lead the ranked group");
  for (std::size_t i = 0; i < group.size(); ++i)
    for (std::size_t j = i + 1; j < group.size(); ++j)
      if (group[i].item >= 0 && group[i].item == group[j].item)
        throw std::invalid_argument("PreferenceRecord: duplicate items in ranked group");
}

// Plackett-Luce rank probabilities: p_k = w_k / sum_{j>=k} w_j.
struct RankProbabilities {
  Vec p;
};

inline RankProbabilities pl_rank_probs(std::span<const double> weights) {
  if (weights.empty()) throw std::invalid_argument("pl_rank_probs: empty weights");
  for (double w : weights)
    if (!(w > 0.0)) throw std::invalid_argument("pl_rank_probs: weights must be positive");
  const std::size_t k = weights.size();
  Vec suffix(k);
  double acc = 0.0;
  for (std::size_t i = k; i-- > 0;) {
    acc += weights[i];
    suffix[i] = acc;
  }
  RankProbabilities out;
  out.p.resize(k);
  for (std::size_t i = 0; i < k; ++i) out.p[i] = weights[i] / suffix[i];
  out.p[k - 1] = 1.0;  // last remaining item, exactly
  return out;
}

// log prod_k exp(b_k) / sum_{j>=k} exp(b_j), computed in log space
inline double pl_log_likelihood(std::span<const double> scores) {
  const std::size_t k = scores.size();
  if (k == 0) throw std::invalid_argument("pl_log_likelihood: empty scores");
  KahanSum ll;
  Vec suffix(scores.begin(), scores.end());
  for (std::size_t i = 0; i < k; ++i) {
    double lse = logsumexp(std::span<const double>(suffix).subspan(i));
    ll.add(scores[i] - lse);
  }
  return ll.value();
}

// per-rank log probabilities under the same model
inline Vec pl_log_rank_probs(std::span<const double> scores) {
  const std::size_t k = scores.size();
  Vec out(k);
  Vec suffix(scores.begin(), scores.end());
  for (std::size_t i = 0; i < k; ++i)
    out[i] = scores[i] - logsumexp(std::span<const double>(suffix).subspan(i));
  return out;
}

// -------------------------------------------------------------------------
// Pairwise DPO and its Plackett-Luce extension.

inline double dpo_pairwise_loss(const Policy& policy, const ReferenceSnapshot& reference,
                                const Motion& winner, const Motion& loser, Condition c,
                                const LossConfig& cfg) {
  double margin = log_ratio(policy, reference, winner, c) - log_ratio(policy, reference, loser, c);
  return neg_log_sigmoid(cfg.beta * margin);
}

inline double pl_offline_loss(const Policy& policy, const ReferenceSnapshot& reference,
                              const PreferenceRecord& record, const LossConfig& cfg) {
  if (!record.ranked_group) throw std::invalid_argument("pl_offline_loss: ranked group required");
  validate_record(record);
  const auto& group = *record.ranked_group;
  Vec scores(group.size());
  for (std::size_t i = 0; i < group.size(); ++i)
    scores[i] = cfg.beta * log_ratio(policy, reference, group[i], record.condition);
  return -pl_log_likelihood(scores);
}

// -------------------------------------------------------------------------
// Online DPO: candidates are ranked by reward (stable index tie-break) and
// the soft Plackett-Luce target p_r replaces the one-hot preference.

inline std::vector<std::size_t> rank_by_reward(std::span<const double> rewards) {
  std::vector<std::size_t> order(rewards.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rewards[a] > rewards[b]; });
  return order;
}

// Loss value given per-candidate rewards and log ratios in sampled order;
// ranking happens here.
inline double online_dpo_core(std::span<const double> rewards, std::span<const double> h_values,
                              double beta) {
  const std::size_t k = rewards.size();
  if (k < 2 || h_values.size() != k)
    throw std::invalid_argument("online_dpo_core: need matched rewards/h, k >= 2");
  auto order = rank_by_reward(rewards);
  Vec reward_weights(k);
  Vec h_scores(k);
  for (std::size_t rank = 0; rank < k; ++rank) {
    reward_weights[rank] = std::exp(rewards[order[rank]]);
    h_scores[rank] = beta * h_values[order[rank]];
  }
  RankProbabilities pr = pl_rank_probs(reward_weights);
  Vec log_ptheta = pl_log_rank_probs(h_scores);
  KahanSum loss;
  for (std::size_t rank = 0; rank < k; ++rank) loss.add(-pr.p[rank] * log_ptheta[rank]);
  return loss.value();
}

inline double online_dpo_loss(const Policy& policy, const ReferenceSnapshot& reference,
                              const RewardModel& reward_model,
                              std::span<const Motion> candidates, Condition c,
                              const LossConfig& cfg) {
  const std::size_t k = candidates.size();
  if (k < 2) throw std::invalid_argument("online_dpo_loss: need at least 2 candidates");
  Vec rewards(k);
  Vec h_values(k);
  for (std::size_t i = 0; i < k; ++i) {
    rewards[i] = reward(reward_model, candidates[i], c);
    h_values[i] = log_ratio(policy, reference, candidates[i], c);
  }
  return online_dpo_core(rewards, h_values, cfg.beta);
}

// -------------------------------------------------------------------------
// Semi-online losses. The K candidates are treated as constants
// (stop-gradient); the loser is the argmin-reward candidate with stable
// index tie-break.

inline std::size_t argmin_reward(std::span<const double> rewards) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rewards.size(); ++i)
    if (rewards[i] < rewards[best]) best = i;
  return best;
}

inline double dsopo_loss(const Policy& policy, const ReferenceSnapshot& reference,
                         const RewardModel& reward_model, const PreferenceRecord& record,
                         std::span<const Motion> candidates, Condition c,
                         const LossConfig& cfg) {
  if (candidates.empty()) throw std::invalid_argument("dsopo_loss: empty candidates");
  Vec rewards(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    rewards[i] = reward(reward_model, candidates[i], c);
  const Motion& loser = candidates[argmin_reward(rewards)];
  return dpo_pairwise_loss(policy, reference, record.winner, loser, c, cfg);
}

inline double usopo_loss(const Policy& policy, const ReferenceSnapshot& reference,
                         const RewardModel& reward_model, const PreferenceRecord& record,
                         std::span<const Motion> candidates, Condition c,
                         const LossConfig& cfg) {
  if (candidates.empty()) throw std::invalid_argument("usopo_loss: empty candidates");
  Vec rewards(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    rewards[i] = reward(reward_model, candidates[i], c);
  std::size_t loser = argmin_reward(rewards);
  double h_w = log_ratio(policy, reference, record.winner, c);
  if (rewards[loser] < cfg.tau) {
    double h_l = log_ratio(policy, reference, candidates[loser], c);
    return neg_log_sigmoid(cfg.beta * (h_w - h_l));
  }
  return neg_log_sigmoid(cfg.beta * h_w);
}

// S(x^w): minimum cosine similarity between the winner and the generated set
inline double min_similarity(const Motion& winner, std::span<const Motion> candidates) {
  if (candidates.empty()) throw std::invalid_argument("min_similarity: empty candidates");
  double s = 1.0;
  for (const Motion& x : candidates) s = std::min(s, cosine_similarity(winner, x));
  return s;
}

// beta_w = beta * (C - S)
inline double win_weight(double s, const LossConfig& cfg) { return cfg.beta * (cfg.c_const - s); }

inline double sopo_loss(const Policy& policy, const ReferenceSnapshot& reference,
                        const RewardModel& reward_model, const PreferenceRecord& record,
                        std::span<const Motion> candidates, Condition c,
                        const LossConfig& cfg) {
  if (candidates.empty()) throw std::invalid_argument("sopo_loss: empty candidates");
  Vec rewards(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    rewards[i] = reward(reward_model, candidates[i], c);
  std::size_t loser = argmin_reward(rewards);
  double beta_w = win_weight(min_similarity(record.winner, candidates), cfg);
  double h_w = log_ratio(policy, reference, record.winner, c);
  if (rewards[loser] < cfg.tau) {
    double h_l = log_ratio(policy, reference, candidates[loser], c);
    return neg_log_sigmoid(beta_w * h_w - cfg.beta * h_l);
  }
  return neg_log_sigmoid(beta_w * h_w);
}

// -------------------------------------------------------------------------
// Exact expectations on finite vocabularies.
//
// Candidate tuples are ordered K-tuples with repetition drawn from the
// current policy, so the tuple weight is prod_k pi_theta(x^k | c). Each loss
// admits two evaluation routes: the branch form (one pass over all tuples)
// and the Z-weighted split form (separate conditional expectations over the
// valuable-unpreferred and high-preference-unpreferred partitions). The two
// routes agree to tight tolerance; tests rely on comparing them.

namespace detail {

struct TupleView {
  double weight;                    // prod_k pi_theta(x^k | c), frozen
  const std::vector<int>& items;
  std::size_t loser_slot;
  double loser_reward;
};

template <typename Fn>
void for_each_candidate_tuple(const CategoricalPolicy& policy, const RewardModel& reward_model,
                              Condition c, const LossConfig& cfg, Fn&& fn) {
  const int v = policy.vocab().size();
  Vec probs = policy.probs(c);
  Vec item_reward(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i)
    item_reward[static_cast<std::size_t>(i)] = reward(reward_model, policy.vocab().motion(i), c);
  for_each_tuple(v, cfg.k, [&](const std::vector<int>& idx) {
    double w = 1.0;
    for (int item : idx) w *= probs[static_cast<std::size_t>(item)];
    std::size_t loser = 0;
    for (std::size_t s = 1; s < idx.size(); ++s)
      if (item_reward[static_cast<std::size_t>(idx[s])] <
          item_reward[static_cast<std::size_t>(idx[loser])])
        loser = s;
    fn(TupleView{w, idx, loser, item_reward[static_cast<std::size_t>(idx[loser])]});
  });
}

}  // namespace detail

// (Z_vu, Z_hu): probabilities of the two branch events under the K-tuple law
inline std::pair<double, double> exact_branch_partition(const CategoricalPolicy& policy,
                                                        const RewardModel& reward_model,
                                                        Condition c, const LossConfig& cfg) {
  KahanSum z_vu, z_hu;
  detail::for_each_candidate_tuple(policy, reward_model, c, cfg, [&](const detail::TupleView& t) {
    if (t.loser_reward < cfg.tau) {
      z_vu.add(t.weight);
    } else {
      z_hu.add(t.weight);
    }
  });
  return {z_vu.value(), z_hu.value()};
}

enum class SemiOnlineLoss { dsopo, usopo, sopo };

namespace detail {

// Per-item quantities fixed across the enumeration of one condition.
struct TupleLossContext {
  SemiOnlineLoss which;
  const LossConfig* cfg;
  double h_w;
  Vec item_h;    // h_theta(item, c) per vocab item
  Vec item_sim;  // cos(winner, item embedding) per vocab item

  double operator()(const TupleView& t) const {
    bool vu = t.loser_reward < cfg->tau;
    double h_l = item_h[static_cast<std::size_t>(t.items[t.loser_slot])];
    switch (which) {
      case SemiOnlineLoss::dsopo:
        return neg_log_sigmoid(cfg->beta * (h_w - h_l));
      case SemiOnlineLoss::usopo:
        return vu ? neg_log_sigmoid(cfg->beta * (h_w - h_l)) : neg_log_sigmoid(cfg->beta * h_w);
      case SemiOnlineLoss::sopo: {
        double s = 1.0;
        for (int item : t.items) s = std::min(s, item_sim[static_cast<std::size_t>(item)]);
        double beta_w = cfg->beta * (cfg->c_const - s);
        return vu ? neg_log_sigmoid(beta_w * h_w - cfg->beta * h_l)
                  : neg_log_sigmoid(beta_w * h_w);
      }
    }
    throw std::logic_error("TupleLossContext: unreachable");
  }
};

inline TupleLossContext make_tuple_loss_context(SemiOnlineLoss which,
                                                const CategoricalPolicy& policy,
                                                const ReferenceSnapshot& reference,
                                                const Motion& winner, Condition c,
                                                const LossConfig& cfg) {
  const auto& vocab = policy.vocab();
  TupleLossContext ctx;
  ctx.which = which;
  ctx.cfg = &cfg;
  ctx.h_w = policy.log_prob(winner, c) - log_prob(reference.policy(), winner, c);
  ctx.item_h.resize(static_cast<std::size_t>(vocab.size()));
  ctx.item_sim.resize(static_cast<std::size_t>(vocab.size()));
  for (int i = 0; i < vocab.size(); ++i) {
    Motion m = vocab.motion(i);
    ctx.item_h[static_cast<std::size_t>(i)] =
        policy.log_prob(m, c) - log_prob(reference.policy(), m, c);
    ctx.item_sim[static_cast<std::size_t>(i)] = cosine_similarity(winner.coords, m.coords);
  }
  return ctx;
}

}  // namespace detail

// Branch-form expectation: a single pass over all tuples.
inline double exact_expectation_branch(SemiOnlineLoss which, const CategoricalPolicy& policy,
                                       const ReferenceSnapshot& reference,
                                       const RewardModel& reward_model, const Motion& winner,
                                       Condition c, const LossConfig& cfg) {
  auto ctx = detail::make_tuple_loss_context(which, policy, reference, winner, c, cfg);
  KahanSum acc;
  detail::for_each_candidate_tuple(policy, reward_model, c, cfg,
                                   [&](const detail::TupleView& t) { acc.add(t.weight * ctx(t)); });
  return acc.value();
}

// Split-form expectation: Z_vu E_vu*[..] + Z_hu E_hu*[..], with the
// conditional expectations normalized by their partition mass.
inline double exact_expectation_split(SemiOnlineLoss which, const CategoricalPolicy& policy,
                                      const ReferenceSnapshot& reference,
                                      const RewardModel& reward_model, const Motion& winner,
                                      Condition c, const LossConfig& cfg) {
  auto ctx = detail::make_tuple_loss_context(which, policy, reference, winner, c, cfg);
  auto [z_vu, z_hu] = exact_branch_partition(policy, reward_model, c, cfg);
  KahanSum vu_sum, hu_sum;
  detail::for_each_candidate_tuple(policy, reward_model, c, cfg, [&](const detail::TupleView& t) {
    double value = ctx(t);
    if (t.loser_reward < cfg.tau) {
      vu_sum.add(t.weight * value);
    } else {
      hu_sum.add(t.weight * value);
    }
  });
  double out = 0.0;
  if (z_vu > 0.0) out += z_vu * (vu_sum.value() / z_vu);
  if (z_hu > 0.0) out += z_hu * (hu_sum.value() / z_hu);
  return out;
}

// The two addends of the split, L_vu and L_hu, for the chosen objective.
inline std::pair<double, double> exact_split_terms(SemiOnlineLoss which,
                                                   const CategoricalPolicy& policy,
                                                   const ReferenceSnapshot& reference,
                                                   const RewardModel& reward_model,
                                                   const Motion& winner, Condition c,
                                                   const LossConfig& cfg) {
  auto ctx = detail::make_tuple_loss_context(which, policy, reference, winner, c, cfg);
  KahanSum vu_sum, hu_sum;
  detail::for_each_candidate_tuple(policy, reward_model, c, cfg, [&](const detail::TupleView& t) {
    double value = ctx(t);
    if (t.loser_reward < cfg.tau) {
      vu_sum.add(t.weight * value);
    } else {
      hu_sum.add(t.weight * value);
    }
  });
  return {vu_sum.value(), hu_sum.value()};
}

}  // namespace sopo
