#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <variant>
#include <vector>

#include "sopo/core.hpp"

namespace sopo {

// Symmetric 2x2 covariance with cached inverse/Cholesky. Rejects non-SPD input.
class Cov2 {
 public:
  Cov2() : Cov2(1.0, 0.0, 1.0) {}
  Cov2(double a, double b, double c) : a_(a), b_(b), c_(c) {
    det_ = a_ * c_ - b_ * b_;
    if (!(a_ > 0.0) || !(det_ > 0.0)) throw std::invalid_argument("Cov2: covariance must be SPD");
    inv_a_ = c_ / det_;
    inv_b_ = -b_ / det_;
    inv_c_ = a_ / det_;
    chol_l11_ = std::sqrt(a_);
    chol_l21_ = b_ / chol_l11_;
    chol_l22_ = std::sqrt(c_ - chol_l21_ * chol_l21_);
  }

  double a() const { return a_; }
  double b() const { return b_; }
  double c() const { return c_; }
  double det() const { return det_; }

  // Sigma^{-1} v
  std::array<double, 2> solve(double vx, double vy) const {
    return {inv_a_ * vx + inv_b_ * vy, inv_b_ * vx + inv_c_ * vy};
  }

  // x = mu + L z with z standard normal
  std::array<double, 2> transform(double zx, double zy) const {
    return {chol_l11_ * zx, chol_l21_ * zx + chol_l22_ * zy};
  }

  double inv_a() const { return inv_a_; }
  double inv_b() const { return inv_b_; }
  double inv_c() const { return inv_c_; }

  bool operator==(const Cov2& o) const { return a_ == o.a_ && b_ == o.b_ && c_ == o.c_; }

 private:
  double a_, b_, c_;
  double det_;
  double inv_a_, inv_b_, inv_c_;
  double chol_l11_, chol_l21_, chol_l22_;
};

struct MixtureComponent {
  Vec mean;  // 2D
  Cov2 cov;
  double weight;
};

// -------------------------------------------------------------------------
// Gaussian-mixture reward over R^2. The raw density is unbounded above 0, so
// scores are normalized by the numerically located global density maximum;
// the maximizer is found by multi-start ascent (one start per component
// mean) with Newton polish to gradient norm 1e-10. This keeps the fixed
// threshold tau meaningful on a [0, 1] scale.

class MixtureReward {
 public:
  explicit MixtureReward(std::vector<MixtureComponent> components)
      : components_(std::move(components)) {
    if (components_.empty()) throw std::invalid_argument("MixtureReward: need components");
    KahanSum w;
    for (const auto& comp : components_) {
      if (comp.mean.size() != 2) throw std::invalid_argument("MixtureReward: means must be 2D");
      if (!(comp.weight > 0.0)) throw std::invalid_argument("MixtureReward: weights must be positive");
      w.add(comp.weight);
    }
    if (std::abs(w.value() - 1.0) > 1e-9)
      throw std::invalid_argument("MixtureReward: weights must sum to 1");
    max_density_ = locate_mode_max();
  }

  double density(const Vec& x) const {
    if (x.size() != 2) throw std::invalid_argument("MixtureReward: motion must be 2D");
    KahanSum s;
    for (const auto& comp : components_) s.add(comp.weight * component_density(comp, x));
    return s.value();
  }

  double score(const Motion& x, Condition) const {
    double v = density(x.coords) / max_density_;
    return v > 1.0 ? 1.0 : v;
  }

  // draw from the mixture (used as the offline preferred-sample source)
  Vec sample(RandomStream& rng) const {
    double u = rng.uniform();
    std::size_t pick = components_.size() - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < components_.size(); ++i) {
      acc += components_[i].weight;
      if (u < acc) {
        pick = i;
        break;
      }
    }
    const auto& comp = components_[pick];
    auto d = comp.cov.transform(rng.normal(), rng.normal());
    return Vec{comp.mean[0] + d[0], comp.mean[1] + d[1]};
  }

  double max_density() const { return max_density_; }
  const std::vector<MixtureComponent>& components() const { return components_; }

 private:
  static double component_density(const MixtureComponent& comp, const Vec& x) {
    double dx = x[0] - comp.mean[0];
    double dy = x[1] - comp.mean[1];
    auto sv = comp.cov.solve(dx, dy);
    double quad = dx * sv[0] + dy * sv[1];
    return std::exp(-0.5 * quad) / (2.0 * kPi * std::sqrt(comp.cov.det()));
  }

  void gradient_hessian(const Vec& x, std::array<double, 2>& grad,
                        std::array<double, 3>& hess) const {
    grad = {0.0, 0.0};
    hess = {0.0, 0.0, 0.0};  // hxx, hxy, hyy
    for (const auto& comp : components_) {
      double dx = x[0] - comp.mean[0];
      double dy = x[1] - comp.mean[1];
      auto sv = comp.cov.solve(dx, dy);  // Sigma^{-1} d
      double dens = comp.weight * component_density(comp, x);
      grad[0] += dens * (-sv[0]);
      grad[1] += dens * (-sv[1]);
      hess[0] += dens * (sv[0] * sv[0] - comp.cov.inv_a());
      hess[1] += dens * (sv[0] * sv[1] - comp.cov.inv_b());
      hess[2] += dens * (sv[1] * sv[1] - comp.cov.inv_c());
    }
  }

  double locate_mode_max() const {
    double best = 0.0;
    for (const auto& start : components_) {
      Vec x = start.mean;
      // ascent with backtracking, then Newton polish
      for (int it = 0; it < 500; ++it) {
        std::array<double, 2> g;
        std::array<double, 3> h;
        gradient_hessian(x, g, h);
        double gn = std::sqrt(g[0] * g[0] + g[1] * g[1]);
        if (gn < 1e-10) break;
        double step_x, step_y;
        double deth = h[0] * h[2] - h[1] * h[1];
        if (deth > 0.0 && h[0] < 0.0) {
          // Newton step on a locally concave density
          step_x = -(h[2] * g[0] - h[1] * g[1]) / deth;
          step_y = -(-h[1] * g[0] + h[0] * g[1]) / deth;
        } else {
          double f0 = density(x);
          double t = 1.0 / std::max(1.0, gn);
          while (t > 1e-12 && density({x[0] + t * g[0], x[1] + t * g[1]}) <= f0) t *= 0.5;
          step_x = t * g[0];
          step_y = t * g[1];
        }
        x[0] += step_x;
        x[1] += step_y;
      }
      best = std::max(best, density(x));
    }
    return best;
  }

  std::vector<MixtureComponent> components_;
  double max_density_ = 1.0;
};

// -------------------------------------------------------------------------
// Lookup-table reward over a finite vocabulary.

class TableReward {
 public:
  TableReward() = default;
  TableReward(int n_conditions, int vocab_size, Vec scores)
      : n_conditions_(n_conditions), vocab_size_(vocab_size), scores_(std::move(scores)) {
    if (n_conditions_ < 1 || vocab_size_ < 1) throw std::invalid_argument("TableReward: bad shape");
    if (static_cast<int>(scores_.size()) != n_conditions_ * vocab_size_)
      throw std::invalid_argument("TableReward: score table size mismatch");
    for (double s : scores_)
      if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("TableReward: scores must lie in [0, 1]");
  }

  double score(const Motion& x, Condition c) const {
    if (c.id < 0 || c.id >= n_conditions_) throw std::out_of_range("TableReward: condition out of range");
    if (x.item < 0 || x.item >= vocab_size_) throw std::out_of_range("TableReward: item out of range");
    return scores_[static_cast<std::size_t>(c.id * vocab_size_ + x.item)];
  }

  double entry(Condition c, int item) const { return score(Motion{{}, item}, c); }
  int n_conditions() const { return n_conditions_; }
  int vocab_size() const { return vocab_size_; }

 private:
  int n_conditions_ = 0;
  int vocab_size_ = 0;
  Vec scores_;
};

// -------------------------------------------------------------------------
// Cosine similarity and the cosine-embedding reward.

inline double cosine_similarity(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double na = norm2(a);
  double nb = norm2(b);
  if (na < 1e-12 || nb < 1e-12) return 0.0;  // neutral value for degenerate vectors
  double v = dot(a, b) / (na * nb);
  return std::clamp(v, -1.0, 1.0);
}

inline double cosine_similarity(const Motion& a, const Motion& b) {
  return cosine_similarity(a.coords, b.coords);
}

class CosineReward {
 public:
  explicit CosineReward(std::vector<Vec> condition_embeddings)
      : embeddings_(std::move(condition_embeddings)) {
    if (embeddings_.empty()) throw std::invalid_argument("CosineReward: need embeddings");
  }

  double score(const Motion& x, Condition c) const {
    if (c.id < 0 || c.id >= static_cast<int>(embeddings_.size()))
      throw std::out_of_range("CosineReward: condition out of range");
    return 0.5 * (1.0 + cosine_similarity(x.coords, embeddings_[static_cast<std::size_t>(c.id)]));
  }

 private:
  std::vector<Vec> embeddings_;
};

using RewardModel = std::variant<MixtureReward, TableReward, CosineReward>;

inline double reward(const RewardModel& model, const Motion& x, Condition c) {
  return std::visit([&](const auto& m) { return m.score(x, c); }, model);
}

}  // namespace sopo
