#pragma once

#include <utility>
#include <vector>

#include "sopo/losses.hpp"

namespace sopo {

enum class Branch { valuable_unpreferred, high_preference_unpreferred };

// One online candidate group: K sampled motions with rewards, the
// argmin-reward selection, and the tau-branch decision.
struct CandidateBatch {
  Condition condition;
  std::vector<Motion> candidates;
  Vec rewards;
  std::size_t loser_index = 0;
  Branch branch = Branch::high_preference_unpreferred;
};

inline CandidateBatch make_candidate_batch(std::vector<Motion> candidates,
                                           const RewardModel& reward_model, Condition c,
                                           double tau) {
  if (candidates.empty()) throw std::invalid_argument("make_candidate_batch: empty candidates");
  CandidateBatch batch;
  batch.condition = c;
  batch.rewards.resize(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    batch.rewards[i] = reward(reward_model, candidates[i], c);
  batch.candidates = std::move(candidates);
  batch.loser_index = argmin_reward(batch.rewards);
  batch.branch = batch.rewards[batch.loser_index] < tau ? Branch::valuable_unpreferred
                                                        : Branch::high_preference_unpreferred;
  return batch;
}

// Draws K candidates via an arbitrary sampling callable. The sampler sees
// only the derived seed; candidates carry no parameter sensitivity
// (stop-gradient semantics).
template <typename Sampler>
CandidateBatch generate_candidates_with(Sampler&& draw, const RewardModel& reward_model,
                                        Condition c, const LossConfig& cfg, std::uint64_t seed) {
  if (cfg.k < 1) throw std::invalid_argument("generate_candidates: k must be >= 1");
  std::vector<Motion> candidates = draw(cfg.k, seed);
  if (static_cast<int>(candidates.size()) != cfg.k)
    throw std::logic_error("generate_candidates: sampler returned wrong count");
  return make_candidate_batch(std::move(candidates), reward_model, c, cfg.tau);
}

inline CandidateBatch generate_candidates(const Policy& policy, const RewardModel& reward_model,
                                          Condition c, const LossConfig& cfg, std::uint64_t seed) {
  return generate_candidates_with(
      [&](int k, std::uint64_t s) { return sample(policy, c, k, s); }, reward_model, c, cfg, seed);
}

// MoDiPO-style pairing: K draws from the frozen pretrained model, paired as
// (argmax-reward, argmin-reward). Used only to construct baseline datasets.
inline std::pair<Motion, Motion> modipo_pairing(const Policy& pretrained,
                                                const RewardModel& reward_model, Condition c,
                                                const LossConfig& cfg, std::uint64_t seed) {
  if (cfg.k < 2) throw std::invalid_argument("modipo_pairing: k must be >= 2");
  std::vector<Motion> candidates = sample(pretrained, c, cfg.k, seed);
  Vec rewards(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    rewards[i] = reward(reward_model, candidates[i], c);
  std::size_t lo = argmin_reward(rewards);
  std::size_t hi = 0;
  for (std::size_t i = 1; i < rewards.size(); ++i)
    if (rewards[i] > rewards[hi]) hi = i;
  return {candidates[hi], candidates[lo]};
}

}  // namespace sopo
