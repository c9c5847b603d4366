#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "sopo/losses.hpp"
#include "sopo/sampler.hpp"

namespace sopo {

// -------------------------------------------------------------------------
// Finite-difference gradient oracle.

using ScalarFn = std::function<double(const Vec&)>;

inline Vec finite_diff_grad(const ScalarFn& f, const Vec& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Vec g(params.size());
  Vec p = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    p[i] = params[i] + h;
    double fp = f(p);
    p[i] = params[i] - h;
    double fm = f(p);
    p[i] = params[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::domain_error("finite_diff_grad: objective not finite near evaluation point");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct GradientReport {
  Vec loss_grad;    // finite-difference gradient of the loss-side objective
  Vec oracle_grad;  // finite-difference gradient of the KL-side objective
  double max_abs_diff = 0.0;
  double rel_diff = 0.0;
  bool passed = false;
};

// rel_diff = ||g1 - g2||_inf / max(abs_floor, ||g2||_inf); a report passes
// when either the relative difference clears tol or the absolute difference
// is below the floor.
inline GradientReport compare_gradients(Vec loss_grad, Vec oracle_grad, double tol,
                                        double abs_floor) {
  if (loss_grad.size() != oracle_grad.size())
    throw std::invalid_argument("compare_gradients: length mismatch");
  GradientReport r;
  double scale = 0.0;
  for (std::size_t i = 0; i < loss_grad.size(); ++i) {
    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(loss_grad[i] - oracle_grad[i]));
    scale = std::max(scale, std::abs(oracle_grad[i]));
  }
  r.rel_diff = r.max_abs_diff / std::max(abs_floor, scale);
  r.passed = r.rel_diff < tol || r.max_abs_diff < abs_floor;
  r.loss_grad = std::move(loss_grad);
  r.oracle_grad = std::move(oracle_grad);
  return r;
}

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdRelTol = 1e-6;
inline constexpr double kFdAbsFloor = 1e-8;

// -------------------------------------------------------------------------
// Finite categorical instances.

// A fixed preference distribution over ranked groups (orderings of one item
// subset). probs must sum to 1; a single entry recovers the one-point case.
struct GtDistribution {
  std::vector<std::vector<int>> orderings;
  Vec probs;

  void validate() const {
    if (orderings.empty() || orderings.size() != probs.size())
      throw std::invalid_argument("GtDistribution: orderings/probs mismatch");
    KahanSum s;
    for (double p : probs) {
      if (!(p > 0.0)) throw std::invalid_argument("GtDistribution: probs must be positive");
      s.add(p);
    }
    if (std::abs(s.value() - 1.0) > 1e-9)
      throw std::invalid_argument("GtDistribution: probs must sum to 1");
    std::vector<int> base = orderings.front();
    std::sort(base.begin(), base.end());
    for (const auto& g : orderings) {
      std::vector<int> sorted = g;
      std::sort(sorted.begin(), sorted.end());
      if (sorted != base)
        throw std::invalid_argument("GtDistribution: orderings must permute one item set");
    }
  }
};

struct FiniteInstance {
  Vocabulary vocab;
  int n_conditions = 1;
  CategoricalPolicy policy;
  ReferenceSnapshot reference;
  TableReward rewards;
  std::vector<std::vector<int>> gt_groups;  // per condition, ranked item ids
  std::vector<GtDistribution> gt_dist;      // optional generic p_gt; empty = one-point
  int k = 2;

  void validate() const {
    if (vocab.size() > 8) throw std::invalid_argument("FiniteInstance: vocab_size must be <= 8");
    if (n_conditions < 1 || n_conditions > 4)
      throw std::invalid_argument("FiniteInstance: n_conditions must lie in [1, 4]");
    if (k < 1 || k > vocab.size()) throw std::invalid_argument("FiniteInstance: k out of range");
    if (static_cast<int>(gt_groups.size()) != n_conditions)
      throw std::invalid_argument("FiniteInstance: need one gt group per condition");
    for (int c = 0; c < n_conditions; ++c) {
      const auto& g = gt_groups[static_cast<std::size_t>(c)];
      if (static_cast<int>(g.size()) != k)
        throw std::invalid_argument("FiniteInstance: gt group must have k members");
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = i + 1; j < g.size(); ++j)
          if (g[i] == g[j]) throw std::invalid_argument("FiniteInstance: gt group has duplicates");
      for (int i = 0; i < vocab.size(); ++i)
        for (int j = i + 1; j < vocab.size(); ++j)
          if (rewards.entry(Condition{c}, i) == rewards.entry(Condition{c}, j))
            throw std::invalid_argument("FiniteInstance: table rewards must be distinct");
    }
    if (!gt_dist.empty()) {
      if (static_cast<int>(gt_dist.size()) != n_conditions)
        throw std::invalid_argument("FiniteInstance: need one gt distribution per condition");
      for (const auto& d : gt_dist) d.validate();
    }
  }
};

// Distinct rewards in (0, 1): shuffled bins with interior jitter.
inline Vec distinct_rewards(int vocab_size, RandomStream& rng) {
  std::vector<int> perm(static_cast<std::size_t>(vocab_size));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = vocab_size - 1; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
  Vec r(static_cast<std::size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i)
    r[static_cast<std::size_t>(i)] =
        (perm[static_cast<std::size_t>(i)] + 0.05 + 0.9 * rng.uniform()) / vocab_size;
  return r;
}

inline FiniteInstance make_random_instance(std::uint64_t seed, int vocab_size, int n_conditions,
                                           int k) {
  RandomStream rng(derive_seed(seed, 0x696e7374));
  Vocabulary vocab(vocab_size, 2, derive_seed(seed, 0x656d6264));
  Vec logits(static_cast<std::size_t>(n_conditions * vocab_size));
  Vec ref_logits(logits.size());
  for (double& x : logits) x = rng.normal();
  for (double& x : ref_logits) x = rng.normal();
  Vec table;
  std::vector<std::vector<int>> groups;
  for (int c = 0; c < n_conditions; ++c) {
    Vec r = distinct_rewards(vocab_size, rng);
    table.insert(table.end(), r.begin(), r.end());
    std::vector<int> perm(static_cast<std::size_t>(vocab_size));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = vocab_size - 1; i > 0; --i)
      std::swap(perm[static_cast<std::size_t>(i)],
                perm[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
    groups.emplace_back(perm.begin(), perm.begin() + k);
  }
  FiniteInstance inst{
      vocab,
      n_conditions,
      CategoricalPolicy(vocab, n_conditions, logits),
      ReferenceSnapshot(Policy{CategoricalPolicy(vocab, n_conditions, ref_logits)}),
      TableReward(n_conditions, vocab_size, table),
      std::move(groups),
      {},
      k};
  inst.validate();
  return inst;
}

// Attaches a generic p_gt over all K! orderings of each condition's group,
// with probabilities drawn from a seeded Dirichlet-like draw.
inline void attach_generic_gt(FiniteInstance& inst, std::uint64_t seed) {
  RandomStream rng(derive_seed(seed, 0x70677431));
  inst.gt_dist.clear();
  for (int c = 0; c < inst.n_conditions; ++c) {
    std::vector<int> base = inst.gt_groups[static_cast<std::size_t>(c)];
    std::sort(base.begin(), base.end());
    GtDistribution dist;
    do {
      dist.orderings.push_back(base);
    } while (std::next_permutation(base.begin(), base.end()));
    dist.probs.resize(dist.orderings.size());
    KahanSum total;
    for (double& p : dist.probs) {
      p = 0.05 + rng.uniform();
      total.add(p);
    }
    for (double& p : dist.probs) p /= total.value();
    dist.validate();
    inst.gt_dist.push_back(std::move(dist));
  }
}

// -------------------------------------------------------------------------
// Offline objective and its forward-KL counterpart (Theorem 1).

namespace detail {

inline double group_log_likelihood(const CategoricalPolicy& policy,
                                   const ReferenceSnapshot& reference,
                                   const std::vector<int>& group, Condition c, double beta) {
  Vec scores(group.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    Motion m = policy.vocab().motion(group[i]);
    scores[i] = beta * (policy.log_prob(m, c) - log_prob(reference.policy(), m, c));
  }
  return pl_log_likelihood(scores);
}

}  // namespace detail

inline double exact_offline_objective(const FiniteInstance& inst, const LossConfig& cfg) {
  KahanSum total;
  for (int c = 0; c < inst.n_conditions; ++c) {
    Condition cond{c};
    if (inst.gt_dist.empty()) {
      total.add(-detail::group_log_likelihood(inst.policy, inst.reference,
                                              inst.gt_groups[static_cast<std::size_t>(c)], cond,
                                              cfg.beta));
    } else {
      const auto& dist = inst.gt_dist[static_cast<std::size_t>(c)];
      KahanSum cond_sum;
      for (std::size_t g = 0; g < dist.orderings.size(); ++g)
        cond_sum.add(dist.probs[g] * -detail::group_log_likelihood(inst.policy, inst.reference,
                                                                   dist.orderings[g], cond,
                                                                   cfg.beta));
      total.add(cond_sum.value());
    }
  }
  return total.value() / inst.n_conditions;
}

inline double exact_kl_offline(const FiniteInstance& inst, const LossConfig& cfg) {
  KahanSum total;
  for (int c = 0; c < inst.n_conditions; ++c) {
    Condition cond{c};
    if (inst.gt_dist.empty()) {
      // one-point p_gt: KL reduces to the negative log likelihood
      total.add(-detail::group_log_likelihood(inst.policy, inst.reference,
                                              inst.gt_groups[static_cast<std::size_t>(c)], cond,
                                              cfg.beta));
    } else {
      const auto& dist = inst.gt_dist[static_cast<std::size_t>(c)];
      KahanSum cond_sum;
      for (std::size_t g = 0; g < dist.orderings.size(); ++g) {
        double ll = detail::group_log_likelihood(inst.policy, inst.reference, dist.orderings[g],
                                                 cond, cfg.beta);
        cond_sum.add(dist.probs[g] * (std::log(dist.probs[g]) - ll));
      }
      total.add(cond_sum.value());
    }
  }
  return total.value() / inst.n_conditions;
}

inline GradientReport check_theorem1(const FiniteInstance& inst, const LossConfig& cfg,
                                     double h = kFdStep, double tol = kFdRelTol,
                                     double abs_floor = kFdAbsFloor) {
  FiniteInstance work = inst;
  auto objective = [&](const Vec& p) {
    work.policy.set_params(p);
    return exact_offline_objective(work, cfg);
  };
  auto kl = [&](const Vec& p) {
    work.policy.set_params(p);
    return exact_kl_offline(work, cfg);
  };
  Vec at = inst.policy.params();
  return compare_gradients(finite_diff_grad(objective, at, h), finite_diff_grad(kl, at, h), tol,
                           abs_floor);
}

// -------------------------------------------------------------------------
// Online objective and the weighted forward KL (Theorem 2).
//
// Both enumerate every ordered K-tuple with repetition. The tuple weight
// prod_k pi(x^k|c) is FROZEN at the supplied probabilities: candidates are
// sampled without gradient backpropagation, so perturbing the policy during
// finite differencing must not move the sampling distribution.

inline std::vector<Vec> policy_probs(const CategoricalPolicy& policy) {
  std::vector<Vec> out;
  for (int c = 0; c < policy.n_conditions(); ++c) out.push_back(policy.probs(Condition{c}));
  return out;
}

namespace detail {

struct OnlineTupleTerms {
  double cross_entropy;
  double kl;
};

// ranks tuple slots by table reward (descending, stable) and evaluates both
// the -sum p_r log p_theta term and D_KL(p_r || p_theta)
inline OnlineTupleTerms online_tuple_terms(const std::vector<int>& items, const Vec& item_reward,
                                           const Vec& item_h, double beta) {
  const std::size_t k = items.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return item_reward[static_cast<std::size_t>(items[a])] >
           item_reward[static_cast<std::size_t>(items[b])];
  });
  Vec reward_weights(k), h_scores(k);
  for (std::size_t rank = 0; rank < k; ++rank) {
    int item = items[order[rank]];
    reward_weights[rank] = std::exp(item_reward[static_cast<std::size_t>(item)]);
    h_scores[rank] = beta * item_h[static_cast<std::size_t>(item)];
  }
  RankProbabilities pr = pl_rank_probs(reward_weights);
  Vec log_ptheta = pl_log_rank_probs(h_scores);
  KahanSum ce, kl;
  for (std::size_t rank = 0; rank < k; ++rank) {
    ce.add(-pr.p[rank] * log_ptheta[rank]);
    kl.add(pr.p[rank] * (std::log(pr.p[rank]) - log_ptheta[rank]));
  }
  return {ce.value(), kl.value()};
}

template <typename Accept>
double online_expectation(const FiniteInstance& inst, const LossConfig& cfg,
                          const std::vector<Vec>& frozen_probs, bool want_kl, Accept&& accept) {
  KahanSum total;
  const int v = inst.vocab.size();
  for (int c = 0; c < inst.n_conditions; ++c) {
    Condition cond{c};
    Vec item_reward(static_cast<std::size_t>(v)), item_h(static_cast<std::size_t>(v));
    for (int i = 0; i < v; ++i) {
      Motion m = inst.vocab.motion(i);
      item_reward[static_cast<std::size_t>(i)] = inst.rewards.score(m, cond);
      item_h[static_cast<std::size_t>(i)] =
          inst.policy.log_prob(m, cond) - log_prob(inst.reference.policy(), m, cond);
    }
    const Vec& probs = frozen_probs[static_cast<std::size_t>(c)];
    KahanSum cond_sum;
    for_each_tuple(v, cfg.k, [&](const std::vector<int>& items) {
      if (!accept(items)) return;
      double w = 1.0;
      for (int item : items) w *= probs[static_cast<std::size_t>(item)];
      if (w == 0.0) return;
      auto terms = online_tuple_terms(items, item_reward, item_h, cfg.beta);
      cond_sum.add(w * (want_kl ? terms.kl : terms.cross_entropy));
    });
    total.add(cond_sum.value());
  }
  return total.value() / inst.n_conditions;
}

}  // namespace detail

inline double exact_online_objective(const FiniteInstance& inst, const LossConfig& cfg,
                                     const std::vector<Vec>& frozen_probs) {
  return detail::online_expectation(inst, cfg, frozen_probs, /*want_kl=*/false,
                                    [](const std::vector<int>&) { return true; });
}

inline double exact_weighted_kl_online(const FiniteInstance& inst, const LossConfig& cfg,
                                       const std::vector<Vec>& frozen_probs) {
  return detail::online_expectation(inst, cfg, frozen_probs, /*want_kl=*/true,
                                    [](const std::vector<int>&) { return true; });
}

// frozen = true is the stop-gradient semantics of the theorem; frozen =
// false differentiates through the sampling weights and serves as the
// negative control (the two gradients then genuinely differ).
inline GradientReport check_theorem2(const FiniteInstance& inst, const LossConfig& cfg,
                                     bool frozen = true, double h = kFdStep,
                                     double tol = kFdRelTol, double abs_floor = kFdAbsFloor) {
  FiniteInstance work = inst;
  std::vector<Vec> frozen_probs = policy_probs(inst.policy);
  auto objective = [&](const Vec& p) {
    work.policy.set_params(p);
    return exact_online_objective(work, cfg, frozen ? frozen_probs : policy_probs(work.policy));
  };
  auto kl = [&](const Vec& p) {
    work.policy.set_params(p);
    return exact_weighted_kl_online(work, cfg, frozen ? frozen_probs : policy_probs(work.policy));
  };
  Vec at = inst.policy.params();
  return compare_gradients(finite_diff_grad(objective, at, h), finite_diff_grad(kl, at, h), tol,
                           abs_floor);
}

// -------------------------------------------------------------------------
// Vanishing-gradient limit: the online-objective contribution of tuples
// containing a designated near-zero-probability item.

// Single-condition instance with pi(star) = eps_prob and r(star) = star_reward.
// eps_prob == 0 places the star item at an underflowed logit so its tuples
// carry exactly zero weight.
inline FiniteInstance make_vanishing_instance(std::uint64_t seed, int vocab_size, int k,
                                              int star_item, double eps_prob,
                                              double star_reward = 0.999) {
  if (star_item < 0 || star_item >= vocab_size)
    throw std::invalid_argument("make_vanishing_instance: star item out of range");
  RandomStream rng(derive_seed(seed, 0x76616e69));
  Vocabulary vocab(vocab_size, 2, derive_seed(seed, 0x656d6232));
  Vec logits(static_cast<std::size_t>(vocab_size), 0.0);
  logits[static_cast<std::size_t>(star_item)] =
      eps_prob > 0.0 ? std::log(eps_prob * (vocab_size - 1) / (1.0 - eps_prob)) : -800.0;
  Vec ref_logits(static_cast<std::size_t>(vocab_size), 0.0);
  Vec table = distinct_rewards(vocab_size, rng);
  for (double& r : table) r *= 0.9;  // keep everything below the star reward
  table[static_cast<std::size_t>(star_item)] = star_reward;
  std::vector<int> group(static_cast<std::size_t>(k));
  std::iota(group.begin(), group.end(), 0);
  FiniteInstance inst{vocab,
                      1,
                      CategoricalPolicy(vocab, 1, logits),
                      ReferenceSnapshot(Policy{CategoricalPolicy(vocab, 1, ref_logits)}),
                      TableReward(1, vocab_size, table),
                      {group},
                      {},
                      k};
  inst.validate();
  return inst;
}

// L2 norm of the finite-difference gradient of the star-restricted online
// objective, with frozen sampling weights.
inline double check_vanishing_gradient(const FiniteInstance& inst, const LossConfig& cfg,
                                       int star_item, double h = kFdStep) {
  FiniteInstance work = inst;
  std::vector<Vec> frozen_probs = policy_probs(inst.policy);
  auto contains_star = [star_item](const std::vector<int>& items) {
    return std::find(items.begin(), items.end(), star_item) != items.end();
  };
  auto restricted = [&](const Vec& p) {
    work.policy.set_params(p);
    return detail::online_expectation(work, cfg, frozen_probs, /*want_kl=*/false, contains_star);
  };
  Vec g = finite_diff_grad(restricted, inst.policy.params(), h);
  return norm2(g);
}

// -------------------------------------------------------------------------
// DSoPo <= USoPo under the appendix premise.

struct BoundTrialSummary {
  int trials = 0;
  int passes = 0;
  int strict_cases = 0;   // trials with a genuinely positive gap
  double min_gap = 0.0;   // most negative E[USoPo] - E[DSoPo] observed
  double max_gap = 0.0;
};

// Constructs theta from the reference by damping every item whose reward
// clears tau (ratio pi_theta/pi_ref = u / Z <= 1 exactly on those items),
// which realizes the premise on every loser reachable in the hu branch.
inline BoundTrialSummary check_dsopo_usopo_bound(std::uint64_t seed, int n_trials,
                                                 const LossConfig& cfg) {
  BoundTrialSummary summary;
  summary.trials = n_trials;
  summary.min_gap = std::numeric_limits<double>::infinity();
  summary.max_gap = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < n_trials; ++trial) {
    RandomStream rng(derive_seed(seed, 0x626f756e, static_cast<std::uint64_t>(trial)));
    int vocab_size = 3 + rng.uniform_int(4);
    Vocabulary vocab(vocab_size, 2, derive_seed(seed, 0x766f6232, static_cast<std::uint64_t>(trial)));
    Vec ref_logits(static_cast<std::size_t>(vocab_size));
    for (double& x : ref_logits) x = rng.normal();
    CategoricalPolicy ref_policy(vocab, 1, ref_logits);
    Vec ref_probs = ref_policy.probs(Condition{0});

    Vec table = distinct_rewards(vocab_size, rng);
    TableReward rewards(1, vocab_size, table);

    bool force_equal = (trial % 10 == 9);
    double u = force_equal ? 1.0 : rng.uniform(0.2, 0.95);
    Vec probs = ref_probs;
    for (int i = 0; i < vocab_size; ++i)
      if (table[static_cast<std::size_t>(i)] >= cfg.tau) probs[static_cast<std::size_t>(i)] *= u;
    double z = 0.0;
    for (double p : probs) z += p;
    Vec logits(static_cast<std::size_t>(vocab_size));
    for (int i = 0; i < vocab_size; ++i)
      logits[static_cast<std::size_t>(i)] = std::log(probs[static_cast<std::size_t>(i)] / z);
    CategoricalPolicy policy(vocab, 1, logits);
    ReferenceSnapshot reference{Policy{ref_policy}};

    Motion winner = vocab.motion(rng.uniform_int(vocab_size));
    RewardModel rm{rewards};
    double e_dsopo = exact_expectation_branch(SemiOnlineLoss::dsopo, policy, reference, rm, winner,
                                              Condition{0}, cfg);
    double e_usopo = exact_expectation_branch(SemiOnlineLoss::usopo, policy, reference, rm, winner,
                                              Condition{0}, cfg);
    double gap = e_usopo - e_dsopo;
    summary.min_gap = std::min(summary.min_gap, gap);
    summary.max_gap = std::max(summary.max_gap, gap);
    if (gap >= -1e-12) ++summary.passes;
    auto [z_vu, z_hu] = exact_branch_partition(policy, rm, Condition{0}, cfg);
    if (!force_equal && z_hu > 1e-9 && gap > 1e-12) ++summary.strict_cases;
  }
  return summary;
}

}  // namespace sopo
