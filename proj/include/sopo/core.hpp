#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <utility>
#include <variant>
#include <vector>

#include "sopo/common.hpp"

namespace sopo {

// A text condition, reduced to an index into a finite condition set.
struct Condition {
  int id = 0;
};

// A motion sample. `coords` is the D-dimensional feature vector; in
// categorical mode `item` additionally names the vocabulary entry and
// `coords` carries its fixed embedding.
struct Motion {
  Vec coords;
  int item = -1;
};

// Finite motion vocabulary with fixed, seeded embeddings so that cosine
// similarity is defined for categorical policies.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(int size, int dim, std::uint64_t seed) : dim_(dim) {
    if (size < 1 || dim < 1) throw std::invalid_argument("Vocabulary: size and dim must be >= 1");
    embeddings_.resize(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) {
      RandomStream rng(derive_seed(seed, 0x766f6361, static_cast<std::uint64_t>(i)));
      Vec e(static_cast<std::size_t>(dim));
      for (double& x : e) x = rng.normal();
      embeddings_[static_cast<std::size_t>(i)] = std::move(e);
    }
  }

  int size() const { return static_cast<int>(embeddings_.size()); }
  int dim() const { return dim_; }

  const Vec& embedding(int item) const {
    check_item(item);
    return embeddings_[static_cast<std::size_t>(item)];
  }

  Motion motion(int item) const {
    check_item(item);
    return Motion{embeddings_[static_cast<std::size_t>(item)], item};
  }

  bool operator==(const Vocabulary&) const = default;

 private:
  void check_item(int item) const {
    if (item < 0 || item >= size()) throw std::out_of_range("Vocabulary: item out of range");
  }
  int dim_ = 0;
  std::vector<Vec> embeddings_;
};

enum class PolicyKind { categorical, gaussian2d, diffusion };

// -------------------------------------------------------------------------
// Categorical policy: per-condition logits over a finite vocabulary.

class CategoricalPolicy {
 public:
  CategoricalPolicy() = default;
  CategoricalPolicy(Vocabulary vocab, int n_conditions, Vec logits)
      : vocab_(std::move(vocab)), n_conditions_(n_conditions), logits_(std::move(logits)) {
    if (n_conditions_ < 1) throw std::invalid_argument("CategoricalPolicy: need >= 1 condition");
    if (static_cast<int>(logits_.size()) != n_conditions_ * vocab_.size())
      throw std::invalid_argument("CategoricalPolicy: logits size mismatch");
    if (!all_finite(logits_)) throw std::domain_error("CategoricalPolicy: non-finite logits");
  }

  int n_conditions() const { return n_conditions_; }
  const Vocabulary& vocab() const { return vocab_; }

  double logit(Condition c, int item) const {
    check(c, item);
    return logits_[static_cast<std::size_t>(c.id * vocab_.size() + item)];
  }

  // exact per-condition probabilities (softmax of the condition's logits)
  Vec probs(Condition c) const {
    check(c, 0);
    const int v = vocab_.size();
    Vec row(static_cast<std::size_t>(v));
    for (int i = 0; i < v; ++i) row[static_cast<std::size_t>(i)] = logit(c, i);
    double lse = logsumexp(row);
    for (double& x : row) x = std::exp(x - lse);
    return row;
  }

  double log_prob(const Motion& x, Condition c) const {
    check(c, x.item);
    const int v = vocab_.size();
    Vec row(static_cast<std::size_t>(v));
    for (int i = 0; i < v; ++i) row[static_cast<std::size_t>(i)] = logit(c, i);
    return logit(c, x.item) - logsumexp(row);
  }

  Motion sample_one(Condition c, RandomStream& rng) const {
    Vec p = probs(c);
    double u = rng.uniform();
    double acc = 0.0;
    int pick = vocab_.size() - 1;
    for (int i = 0; i < vocab_.size(); ++i) {
      acc += p[static_cast<std::size_t>(i)];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    return vocab_.motion(pick);
  }

  const Vec& params() const { return logits_; }
  void set_params(const Vec& p) {
    if (p.size() != logits_.size()) throw std::invalid_argument("CategoricalPolicy: param size mismatch");
    if (!all_finite(p)) throw std::domain_error("CategoricalPolicy: non-finite params");
    logits_ = p;
  }

  bool operator==(const CategoricalPolicy&) const = default;

 private:
  void check(Condition c, int item) const {
    if (c.id < 0 || c.id >= n_conditions_) throw std::out_of_range("CategoricalPolicy: condition out of range");
    if (item < 0 || item >= vocab_.size()) throw std::out_of_range("CategoricalPolicy: item out of range");
  }

  Vocabulary vocab_;
  int n_conditions_ = 0;
  Vec logits_;
};

// -------------------------------------------------------------------------
// Diagonal Gaussian policy over R^D (D = 2 for the synthetic bench).
// Per-condition parameter block: mean (D), log-scale (D).

class GaussianPolicy {
 public:
  GaussianPolicy() = default;
  GaussianPolicy(int n_conditions, int dim, Vec params)
      : n_conditions_(n_conditions), dim_(dim), params_(std::move(params)) {
    if (n_conditions_ < 1 || dim_ < 1) throw std::invalid_argument("GaussianPolicy: bad shape");
    if (static_cast<int>(params_.size()) != n_conditions_ * 2 * dim_)
      throw std::invalid_argument("GaussianPolicy: param size mismatch");
    if (!all_finite(params_)) throw std::domain_error("GaussianPolicy: non-finite params");
  }

  static GaussianPolicy single(Vec mean, Vec scales) {
    const int d = static_cast<int>(mean.size());
    if (scales.size() != mean.size()) throw std::invalid_argument("GaussianPolicy: mean/scale mismatch");
    Vec p;
    p.reserve(static_cast<std::size_t>(2 * d));
    for (double m : mean) p.push_back(m);
    for (double s : scales) {
      if (!(s > 0.0)) throw std::domain_error("GaussianPolicy: scale must be positive");
      p.push_back(std::log(s));
    }
    return GaussianPolicy(1, d, std::move(p));
  }

  int n_conditions() const { return n_conditions_; }
  int dim() const { return dim_; }

  double mean(Condition c, int d) const { return params_[block(c) + static_cast<std::size_t>(d)]; }
  double log_scale(Condition c, int d) const {
    return params_[block(c) + static_cast<std::size_t>(dim_ + d)];
  }
  double scale(Condition c, int d) const {
    double s = std::exp(log_scale(c, d));
    if (!(s > 0.0) || !std::isfinite(s)) throw std::domain_error("GaussianPolicy: corrupted scale");
    return s;
  }

  double log_prob(const Motion& x, Condition c) const {
    check(c);
    if (static_cast<int>(x.coords.size()) != dim_)
      throw std::invalid_argument("GaussianPolicy: motion dimension mismatch");
    double lp = 0.0;
    for (int d = 0; d < dim_; ++d) {
      double s = scale(c, d);
      double z = (x.coords[static_cast<std::size_t>(d)] - mean(c, d)) / s;
      lp += -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * kPi);
    }
    return lp;
  }

  Motion sample_one(Condition c, RandomStream& rng) const {
    check(c);
    Vec x(static_cast<std::size_t>(dim_));
    for (int d = 0; d < dim_; ++d) x[static_cast<std::size_t>(d)] = mean(c, d) + scale(c, d) * rng.normal();
    return Motion{std::move(x), -1};
  }

  // d log pi / d params, full parameter-length vector (zeros outside c's block)
  Vec grad_log_prob(const Motion& x, Condition c) const {
    check(c);
    if (static_cast<int>(x.coords.size()) != dim_)
      throw std::invalid_argument("GaussianPolicy: motion dimension mismatch");
    Vec g(params_.size(), 0.0);
    for (int d = 0; d < dim_; ++d) {
      double s = scale(c, d);
      double z = (x.coords[static_cast<std::size_t>(d)] - mean(c, d)) / s;
      g[block(c) + static_cast<std::size_t>(d)] = z / s;
      g[block(c) + static_cast<std::size_t>(dim_ + d)] = z * z - 1.0;
    }
    return g;
  }

  const Vec& params() const { return params_; }
  void set_params(const Vec& p) {
    if (p.size() != params_.size()) throw std::invalid_argument("GaussianPolicy: param size mismatch");
    params_ = p;
  }

  bool operator==(const GaussianPolicy&) const = default;

 private:
  void check(Condition c) const {
    if (c.id < 0 || c.id >= n_conditions_) throw std::out_of_range("GaussianPolicy: condition out of range");
  }
  std::size_t block(Condition c) const { return static_cast<std::size_t>(c.id * 2 * dim_); }

  int n_conditions_ = 0;
  int dim_ = 0;
  Vec params_;
};

// -------------------------------------------------------------------------
// Policy variant and the shared log-ratio primitive.

using Policy = std::variant<CategoricalPolicy, GaussianPolicy>;

inline PolicyKind kind(const Policy& p) {
  return std::holds_alternative<CategoricalPolicy>(p) ? PolicyKind::categorical
                                                      : PolicyKind::gaussian2d;
}

inline double log_prob(const Policy& p, const Motion& x, Condition c) {
  return std::visit([&](const auto& m) { return m.log_prob(x, c); }, p);
}

inline std::vector<Motion> sample(const Policy& p, Condition c, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  RandomStream rng(seed);
  std::vector<Motion> out;
  out.reserve(static_cast<std::size_t>(n));
  std::visit(
      [&](const auto& m) {
        for (int i = 0; i < n; ++i) out.push_back(m.sample_one(c, rng));
      },
      p);
  return out;
}

inline Vec get_params(const Policy& p) {
  return std::visit([](const auto& m) { return m.params(); }, p);
}

inline void set_params(Policy& p, const Vec& v) {
  std::visit([&](auto& m) { m.set_params(v); }, p);
}

// Frozen copy of a policy; immutable after creation.
class ReferenceSnapshot {
 public:
  explicit ReferenceSnapshot(Policy p) : frozen_(std::move(p)) {}
  const Policy& policy() const { return frozen_; }
  PolicyKind kind() const { return sopo::kind(frozen_); }

 private:
  Policy frozen_;
};

// h(x, c) = log pi(x|c) - log pi_ref(x|c)
inline double log_ratio(const Policy& policy, const ReferenceSnapshot& reference,
                        const Motion& x, Condition c) {
  if (kind(policy) != reference.kind())
    throw std::invalid_argument("log_ratio: policy/reference kind mismatch");
  return log_prob(policy, x, c) - log_prob(reference.policy(), x, c);
}

}  // namespace sopo
