#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "sopo/sampler.hpp"

namespace sopo {

enum class OmegaMode { constant, snr };

// Variance-preserving discrete noise schedule: x_t = alpha_t x_0 + sigma_t eps
// with alpha_t^2 + sigma_t^2 = 1 and alpha strictly decreasing in t.
class NoiseSchedule {
 public:
  static NoiseSchedule cosine(int t_max, OmegaMode mode = OmegaMode::constant) {
    if (t_max < 1) throw std::invalid_argument("NoiseSchedule: t_max must be >= 1");
    const double s = 0.008;
    auto f = [&](int k) {
      double v = std::cos(((static_cast<double>(k) / t_max + s) / (1.0 + s)) * kPi / 2.0);
      return v * v;
    };
    // per-step betas from the raw cumulative products, clipped at 0.999 so
    // the chain never collapses to exactly zero signal
    Vec alpha_bar(static_cast<std::size_t>(t_max));
    double prev_raw = 1.0;
    double acc = 1.0;
    for (int t = 0; t < t_max; ++t) {
      double raw = f(t + 1) / f(0);
      double beta = std::clamp(1.0 - raw / prev_raw, 1e-12, 0.999);
      prev_raw = raw;
      acc *= 1.0 - beta;
      alpha_bar[static_cast<std::size_t>(t)] = acc;
    }
    return NoiseSchedule(std::move(alpha_bar), mode);
  }

  static NoiseSchedule from_alpha_bar(Vec alpha_bar, OmegaMode mode = OmegaMode::constant) {
    return NoiseSchedule(std::move(alpha_bar), mode);
  }

  int steps() const { return static_cast<int>(alpha_bar_.size()); }

  double alpha_bar(int t) const {
    if (t == -1) return 1.0;
    check(t);
    return alpha_bar_[static_cast<std::size_t>(t)];
  }
  double alpha(int t) const { return std::sqrt(alpha_bar(t)); }
  double sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

  double omega(int t) const {
    check(t);
    if (mode_ == OmegaMode::constant) return 1.0;
    double ab = alpha_bar(t);
    return ab / (1.0 - ab);  // signal-to-noise ratio
  }

  OmegaMode omega_mode() const { return mode_; }

 private:
  NoiseSchedule(Vec alpha_bar, OmegaMode mode) : alpha_bar_(std::move(alpha_bar)), mode_(mode) {
    if (alpha_bar_.empty()) throw std::invalid_argument("NoiseSchedule: empty schedule");
    double prev = 1.0;
    for (double ab : alpha_bar_) {
      if (!(ab >= 0.0) || ab > prev)
        throw std::invalid_argument("NoiseSchedule: alpha_bar must decrease within [0, 1]");
      prev = ab;
    }
    if (mode_ == OmegaMode::snr)
      for (double ab : alpha_bar_)
        if (!(ab > 0.0 && ab < 1.0))
          throw std::invalid_argument("NoiseSchedule: snr weights need alpha_bar in (0, 1)");
  }

  void check(int t) const {
    if (t < 0 || t >= steps()) throw std::out_of_range("NoiseSchedule: step out of range");
  }

  Vec alpha_bar_;
  OmegaMode mode_;
};

// -------------------------------------------------------------------------
// Per-timestep affine epsilon-predictor: eps_hat(x, t) = A_t x + b_t.
// Closed-form gradients keep every diffusion loss finite-difference
// verifiable. Parameter layout per step: A_t row-major, then b_t.

class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(int dim, int t_max, Vec params) : dim_(dim), t_max_(t_max), params_(std::move(params)) {
    if (dim_ < 1 || t_max_ < 1) throw std::invalid_argument("Denoiser: bad shape");
    if (params_.size() != static_cast<std::size_t>(t_max_) * block_size())
      throw std::invalid_argument("Denoiser: param size mismatch");
    if (!all_finite(params_)) throw std::domain_error("Denoiser: non-finite params");
  }

  static Denoiser zero(int dim, int t_max) {
    return Denoiser(dim, t_max, Vec(static_cast<std::size_t>(t_max) * static_cast<std::size_t>(dim * dim + dim), 0.0));
  }

  // eps-predictor of the standard-normal data distribution: for x0 ~ N(0, I)
  // the posterior mean of the noise is sigma_t x_t, so A_t = sigma_t I and
  // b_t = 0. Ancestral sampling from this denoiser generates approximately
  // standard-normal motions; it is the pretrained starting point of the toy.
  static Denoiser gaussian_matched(int dim, const NoiseSchedule& schedule) {
    Denoiser d = zero(dim, schedule.steps());
    Vec p = d.params();
    const std::size_t block = static_cast<std::size_t>(dim * dim + dim);
    for (int t = 0; t < schedule.steps(); ++t)
      for (int i = 0; i < dim; ++i)
        p[static_cast<std::size_t>(t) * block + static_cast<std::size_t>(i * dim + i)] =
            schedule.sigma(t);
    d.set_params(p);
    return d;
  }

  int dim() const { return dim_; }
  int t_max() const { return t_max_; }
  std::size_t param_count() const { return params_.size(); }

  Vec predict(const Vec& x, int t) const {
    check(t);
    if (static_cast<int>(x.size()) != dim_) throw std::invalid_argument("Denoiser: input dimension mismatch");
    const std::size_t base = static_cast<std::size_t>(t) * block_size();
    Vec out(static_cast<std::size_t>(dim_));
    for (int i = 0; i < dim_; ++i) {
      double acc = params_[base + static_cast<std::size_t>(dim_ * dim_ + i)];  // b_t[i]
      for (int j = 0; j < dim_; ++j)
        acc += params_[base + static_cast<std::size_t>(i * dim_ + j)] * x[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
  }

  // d ||predict(x, t) - eps||^2 / d params, accumulated into grad with
  // the given scale factor
  void accumulate_sq_error_grad(const Vec& x, int t, const Vec& eps, double scale,
                                Vec& grad) const {
    check(t);
    if (grad.size() != params_.size()) throw std::invalid_argument("Denoiser: grad size mismatch");
    Vec pred = predict(x, t);
    const std::size_t base = static_cast<std::size_t>(t) * block_size();
    for (int i = 0; i < dim_; ++i) {
      double resid = 2.0 * (pred[static_cast<std::size_t>(i)] - eps[static_cast<std::size_t>(i)]);
      for (int j = 0; j < dim_; ++j)
        grad[base + static_cast<std::size_t>(i * dim_ + j)] += scale * resid * x[static_cast<std::size_t>(j)];
      grad[base + static_cast<std::size_t>(dim_ * dim_ + i)] += scale * resid;
    }
  }

  const Vec& params() const { return params_; }
  void set_params(const Vec& p) {
    if (p.size() != params_.size()) throw std::invalid_argument("Denoiser: param size mismatch");
    params_ = p;
  }

  bool operator==(const Denoiser&) const = default;

 private:
  std::size_t block_size() const { return static_cast<std::size_t>(dim_ * dim_ + dim_); }
  void check(int t) const {
    if (t < 0 || t >= t_max_) throw std::out_of_range("Denoiser: step out of range");
  }

  int dim_ = 0;
  int t_max_ = 0;
  Vec params_;
};

inline Motion forward_noise(const Motion& x0, int t, const Vec& eps,
                            const NoiseSchedule& schedule) {
  if (eps.size() != x0.coords.size()) throw std::invalid_argument("forward_noise: eps dimension mismatch");
  double a = schedule.alpha(t);
  double s = schedule.sigma(t);
  Vec out(x0.coords.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0.coords[i] + s * eps[i];
  return Motion{std::move(out), -1};
}

inline double eps_loss(const Denoiser& model, const Motion& x_t, int t, const Vec& eps) {
  Vec pred = model.predict(x_t.coords, t);
  if (eps.size() != pred.size()) throw std::invalid_argument("eps_loss: eps dimension mismatch");
  KahanSum s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - eps[i];
    s.add(d * d);
  }
  return s.value();
}

struct DiffusionOptions {
  // Couple the loser term through beta_w, i.e. beta_w (dLw - beta dLl),
  // instead of the canonical beta_w dLw - beta dLl.
  bool coupled_weight_form = false;
  // Reuse the winner's noise draw for the loser.
  bool share_noise = false;

  bool operator==(const DiffusionOptions&) const = default;
};

namespace detail {

struct DiffSopoParts {
  double z;          // sigmoid argument
  double beta_w;
  double delta_w;    // L(theta, x_t^w) - L(ref, x_t^w)
  double delta_l;
  Motion noised_w;
  Motion noised_l;
  bool vu;
};

inline DiffSopoParts diff_sopo_parts(const Denoiser& theta, const Denoiser& ref,
                                     const CandidateBatch& batch, const Motion& winner, int t,
                                     const Vec& eps_w, const Vec& eps_l,
                                     const NoiseSchedule& schedule, const LossConfig& cfg,
                                     const DiffusionOptions& opt) {
  DiffSopoParts parts;
  parts.vu = batch.branch == Branch::valuable_unpreferred;
  double s = min_similarity(winner, batch.candidates);
  parts.beta_w = win_weight(s, cfg);
  parts.noised_w = forward_noise(winner, t, eps_w, schedule);
  double t_omega = schedule.steps() * schedule.omega(t);
  parts.delta_w = eps_loss(theta, parts.noised_w, t, eps_w) - eps_loss(ref, parts.noised_w, t, eps_w);
  parts.delta_l = 0.0;
  if (parts.vu) {
    const Motion& loser = batch.candidates[batch.loser_index];
    parts.noised_l = forward_noise(loser, t, eps_l, schedule);
    parts.delta_l = eps_loss(theta, parts.noised_l, t, eps_l) - eps_loss(ref, parts.noised_l, t, eps_l);
    double inner = opt.coupled_weight_form
                       ? parts.beta_w * (parts.delta_w - cfg.beta * parts.delta_l)
                       : parts.beta_w * parts.delta_w - cfg.beta * parts.delta_l;
    parts.z = -t_omega * inner;
  } else {
    parts.z = -t_omega * parts.beta_w * parts.delta_w;
  }
  return parts;
}

}  // namespace detail

inline double diff_sopo_loss(const Denoiser& theta, const Denoiser& ref,
                             const CandidateBatch& batch, const Motion& winner, int t,
                             const Vec& eps_w, const Vec& eps_l, const NoiseSchedule& schedule,
                             const LossConfig& cfg, const DiffusionOptions& opt = {}) {
  return neg_log_sigmoid(
      detail::diff_sopo_parts(theta, ref, batch, winner, t, eps_w, eps_l, schedule, cfg, opt).z);
}

// Closed-form gradient with respect to the policy denoiser parameters.
inline Vec diff_sopo_grad(const Denoiser& theta, const Denoiser& ref, const CandidateBatch& batch,
                          const Motion& winner, int t, const Vec& eps_w, const Vec& eps_l,
                          const NoiseSchedule& schedule, const LossConfig& cfg,
                          const DiffusionOptions& opt = {}) {
  auto parts = detail::diff_sopo_parts(theta, ref, batch, winner, t, eps_w, eps_l, schedule, cfg, opt);
  double dl_dz = -sigmoid(-parts.z);
  double t_omega = schedule.steps() * schedule.omega(t);
  Vec grad(theta.param_count(), 0.0);
  if (parts.vu) {
    double w_scale = parts.beta_w;
    double l_scale = opt.coupled_weight_form ? parts.beta_w * cfg.beta : cfg.beta;
    theta.accumulate_sq_error_grad(parts.noised_w.coords, t, eps_w, dl_dz * -t_omega * w_scale, grad);
    theta.accumulate_sq_error_grad(parts.noised_l.coords, t, eps_l, dl_dz * t_omega * l_scale, grad);
  } else {
    theta.accumulate_sq_error_grad(parts.noised_w.coords, t, eps_w, dl_dz * -t_omega * parts.beta_w, grad);
  }
  return grad;
}

// Standard DDPM-style ancestral sampling from pure noise; deterministic for
// a fixed seed. The condition is accepted for interface parity with the
// other policy kinds (the toy denoiser is unconditional).
inline Motion ancestral_sample(const Denoiser& model, const NoiseSchedule& schedule, Condition,
                               std::uint64_t seed) {
  RandomStream rng(seed);
  const int dim = model.dim();
  const int t_max = schedule.steps();
  if (model.t_max() != t_max) throw std::invalid_argument("ancestral_sample: schedule/model step mismatch");
  Vec x(static_cast<std::size_t>(dim));
  for (double& v : x) v = rng.normal();
  for (int t = t_max - 1; t >= 0; --t) {
    double ab = schedule.alpha_bar(t);
    double ab_prev = schedule.alpha_bar(t - 1);
    double step_alpha = ab / ab_prev;
    double beta = 1.0 - step_alpha;
    double sigma_t = schedule.sigma(t);
    Vec eps_hat = model.predict(x, t);
    for (int i = 0; i < dim; ++i) {
      std::size_t ui = static_cast<std::size_t>(i);
      x[ui] = (x[ui] - beta / sigma_t * eps_hat[ui]) / std::sqrt(step_alpha);
    }
    if (t > 0) {
      double post_var = (1.0 - ab_prev) / (1.0 - ab) * beta;
      double post_sd = std::sqrt(std::max(post_var, 0.0));
      for (double& v : x) v += post_sd * rng.normal();
    }
  }
  return Motion{std::move(x), -1};
}

// -------------------------------------------------------------------------
// One step of the SoPo training loop for the diffusion policy: draw a
// timestep, sample K candidates (stop-gradient), pick the loser, branch on
// tau, and return the loss with its closed-form parameter gradient.

using CandidateSampler = std::function<std::vector<Motion>(int k, std::uint64_t seed)>;

struct Algorithm1Result {
  double loss = 0.0;
  Vec grad;
  Branch branch = Branch::high_preference_unpreferred;
  CandidateBatch batch;
  int t = 0;
  Vec eps_w;
  Vec eps_l;
  double similarity = 0.0;
  double winner_weight = 0.0;
};

inline Algorithm1Result algorithm1_step(const Denoiser& theta, const Denoiser& ref,
                                        const PreferenceRecord& record,
                                        const CandidateSampler& sampler,
                                        const RewardModel& reward_model,
                                        const NoiseSchedule& schedule, const LossConfig& cfg,
                                        const DiffusionOptions& opt, std::uint64_t seed) {
  Algorithm1Result out;
  RandomStream t_rng(derive_seed(seed, 1));
  out.t = t_rng.uniform_int(schedule.steps());

  std::vector<Motion> candidates = sampler(cfg.k, derive_seed(seed, 2));
  out.batch = make_candidate_batch(std::move(candidates), reward_model, record.condition, cfg.tau);
  out.branch = out.batch.branch;
  out.similarity = min_similarity(record.winner, out.batch.candidates);
  out.winner_weight = win_weight(out.similarity, cfg);

  const int dim = theta.dim();
  RandomStream eps_rng(derive_seed(seed, 3));
  out.eps_w.resize(static_cast<std::size_t>(dim));
  for (double& v : out.eps_w) v = eps_rng.normal();
  if (opt.share_noise) {
    out.eps_l = out.eps_w;
  } else {
    out.eps_l.resize(static_cast<std::size_t>(dim));
    for (double& v : out.eps_l) v = eps_rng.normal();
  }

  out.loss = diff_sopo_loss(theta, ref, out.batch, record.winner, out.t, out.eps_w, out.eps_l,
                            schedule, cfg, opt);
  out.grad = diff_sopo_grad(theta, ref, out.batch, record.winner, out.t, out.eps_w, out.eps_l,
                            schedule, cfg, opt);
  return out;
}

}  // namespace sopo
