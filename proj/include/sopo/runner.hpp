#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sopo/config.hpp"

namespace sopo {

// -------------------------------------------------------------------------
// verify: run every theorem/identity check and emit a line-delimited report.

struct CheckRecord {
  std::string name;
  double residual = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

namespace detail {

inline LossConfig with_k(const LossConfig& base, int k) {
  LossConfig out = base;
  out.k = k;
  return out;
}

// direct entropy term  sum_tuples w * sum_k p_r log p_r, computed with its
// own enumeration pass
inline double direct_entropy_term(const FiniteInstance& inst, const LossConfig& cfg,
                                  const std::vector<Vec>& frozen_probs) {
  KahanSum total;
  const int v = inst.vocab.size();
  for (int c = 0; c < inst.n_conditions; ++c) {
    Condition cond{c};
    Vec item_reward(static_cast<std::size_t>(v));
    for (int i = 0; i < v; ++i)
      item_reward[static_cast<std::size_t>(i)] = inst.rewards.score(inst.vocab.motion(i), cond);
    const Vec& probs = frozen_probs[static_cast<std::size_t>(c)];
    KahanSum cond_sum;
    for_each_tuple(v, cfg.k, [&](const std::vector<int>& items) {
      double w = 1.0;
      for (int item : items) w *= probs[static_cast<std::size_t>(item)];
      if (w == 0.0) return;
      std::vector<std::size_t> order(items.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return item_reward[static_cast<std::size_t>(items[a])] >
               item_reward[static_cast<std::size_t>(items[b])];
      });
      Vec weights(items.size());
      for (std::size_t rank = 0; rank < items.size(); ++rank)
        weights[rank] = std::exp(item_reward[static_cast<std::size_t>(items[order[rank]])]);
      RankProbabilities pr = pl_rank_probs(weights);
      KahanSum ent;
      for (double p : pr.p) ent.add(p * std::log(p));
      cond_sum.add(w * ent.value());
    });
    total.add(cond_sum.value());
  }
  return total.value() / inst.n_conditions;
}

struct DiffusionCheckFixture {
  Denoiser theta;
  Denoiser ref;
  CandidateBatch batch;
  Motion winner;
  int t;
  Vec eps_w, eps_l;
  NoiseSchedule schedule;

  DiffusionCheckFixture(std::uint64_t seed, const LossConfig& cfg, bool force_vu, int t_steps)
      : theta(Denoiser::zero(2, t_steps)),
        ref(Denoiser::zero(2, t_steps)),
        winner{{0.0, 0.0}, -1},
        t(0),
        schedule(NoiseSchedule::cosine(t_steps)) {
    RandomStream rng(derive_seed(seed, 0xd1ffu));
    auto random_params = [&](Denoiser& d) {
      Vec p(d.param_count());
      for (double& x : p) x = 0.3 * rng.normal();
      d.set_params(p);
    };
    random_params(theta);
    random_params(ref);
    winner.coords = {rng.normal(), rng.normal()};
    t = rng.uniform_int(t_steps);
    const int k = std::max(2, cfg.k);
    batch.condition = Condition{0};
    batch.rewards.resize(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      batch.candidates.push_back(Motion{{rng.normal(), rng.normal()}, -1});
      double lo = force_vu ? 0.05 : cfg.tau + 0.05;
      double hi = force_vu ? cfg.tau - 0.05 : 0.95;
      batch.rewards[static_cast<std::size_t>(i)] = rng.uniform(lo, hi);
    }
    batch.loser_index = argmin_reward(batch.rewards);
    batch.branch = batch.rewards[batch.loser_index] < cfg.tau
                       ? Branch::valuable_unpreferred
                       : Branch::high_preference_unpreferred;
    eps_w = {rng.normal(), rng.normal()};
    eps_l = {rng.normal(), rng.normal()};
  }
};

}  // namespace detail

inline std::vector<CheckRecord> run_verify_checks(const RunConfig& cfg) {
  std::vector<CheckRecord> records;
  const VerifyTolerances& tol = cfg.verify;
  const std::uint64_t seed = cfg.seed;
  auto push = [&](const std::string& name, double residual, double tolerance) {
    records.push_back(CheckRecord{name, residual, tolerance, residual < tolerance});
  };

  // Theorem 1: offline DPO gradient equals the forward-KL gradient.
  {
    double worst_one_point = 0.0, worst_generic = 0.0;
    for (int i = 0; i < 20; ++i) {
      std::uint64_t s = derive_seed(seed, 0x7431, static_cast<std::uint64_t>(i));
      int vocab = 4 + (i % 2);
      int k = 2 + (i % 2);
      int n_cond = 1 + (i % 2);
      FiniteInstance inst = make_random_instance(s, vocab, n_cond, k);
      worst_one_point = std::max(worst_one_point, check_theorem1(inst, cfg.loss).rel_diff);
      attach_generic_gt(inst, s);
      worst_generic = std::max(worst_generic, check_theorem1(inst, cfg.loss).rel_diff);
    }
    push("theorem1_one_point_gt", worst_one_point, tol.rel_tol);
    push("theorem1_generic_gt", worst_generic, tol.rel_tol);
  }

  // Theorem 2 under frozen sampling weights, plus the negative control that
  // differentiates through them (which must fail on most instances).
  {
    double worst = 0.0;
    int control_matches = 0;
    for (int i = 0; i < 20; ++i) {
      std::uint64_t s = derive_seed(seed, 0x7432, static_cast<std::uint64_t>(i));
      FiniteInstance inst = make_random_instance(s, 3 + (i % 2), 1 + (i % 2), 2 + (i % 2));
      worst = std::max(worst, check_theorem2(inst, cfg.loss, /*frozen=*/true).rel_diff);
      if (check_theorem2(inst, cfg.loss, /*frozen=*/false).rel_diff < tol.rel_tol)
        ++control_matches;
    }
    push("theorem2_frozen_weights", worst, tol.rel_tol);
    push("theorem2_negative_control_matches", static_cast<double>(control_matches), 5.0 + 1e-9);
  }

  // Vanishing-gradient limit of the online objective.
  {
    LossConfig vcfg = detail::with_k(cfg.loss, 2);
    const int vocab = 4, star = 0;
    auto contribution = [&](double eps) {
      FiniteInstance inst = make_vanishing_instance(derive_seed(seed, 0x7667), vocab, vcfg.k, star, eps);
      return check_vanishing_gradient(inst, vcfg, star);
    };
    double c4 = contribution(1e-4), c6 = contribution(1e-6), c8 = contribution(1e-8);
    push("vanishing_gradient_at_1e8", c8, 1e-6);
    push("vanishing_gradient_monotone", std::max(c6 - c4, c8 - c6), 0.0 + 1e-18);
    push("vanishing_gradient_removed_item", contribution(0.0), tol.exact_tol);
  }

  // K=2 degeneracy of the Plackett-Luce offline loss.
  {
    double worst = 0.0;
    LossConfig kcfg = detail::with_k(cfg.loss, 2);
    for (int i = 0; i < 1000; ++i) {
      std::uint64_t s = derive_seed(seed, 0x6b32, static_cast<std::uint64_t>(i));
      FiniteInstance inst = make_random_instance(s, 4, 1, 2);
      const auto& group = inst.gt_groups[0];
      PreferenceRecord record{Condition{0}, inst.vocab.motion(group[0]),
                              std::vector<Motion>{inst.vocab.motion(group[0]),
                                                  inst.vocab.motion(group[1])}};
      double pl = pl_offline_loss(Policy{inst.policy}, inst.reference, record, kcfg);
      double pair = dpo_pairwise_loss(Policy{inst.policy}, inst.reference, record.winner,
                                      (*record.ranked_group)[1], Condition{0}, kcfg);
      worst = std::max(worst, std::abs(pl - pair));
    }
    push("k2_degeneracy", worst, tol.exact_tol);
  }

  // Split and equivalent-form identities, with the branch partition.
  {
    double worst_split = 0.0, worst_usopo = 0.0, worst_sopo = 0.0, worst_partition = 0.0;
    for (int i = 0; i < 10; ++i) {
      std::uint64_t s = derive_seed(seed, 0x7370, static_cast<std::uint64_t>(i));
      int vocab = 4 + (i % 3);
      int k = 2 + (i % 2);
      LossConfig kcfg = detail::with_k(cfg.loss, k);
      FiniteInstance inst = make_random_instance(s, vocab, 1, k);
      RewardModel rm{inst.rewards};
      Motion winner = inst.vocab.motion(i % vocab);
      Condition c0{0};

      double e_dsopo = exact_expectation_branch(SemiOnlineLoss::dsopo, inst.policy,
                                                inst.reference, rm, winner, c0, kcfg);
      auto [l_vu, l_hu] = exact_split_terms(SemiOnlineLoss::dsopo, inst.policy, inst.reference,
                                            rm, winner, c0, kcfg);
      worst_split = std::max(worst_split, std::abs(e_dsopo - (l_vu + l_hu)));

      for (auto which : {SemiOnlineLoss::usopo, SemiOnlineLoss::sopo}) {
        double branch_form = exact_expectation_branch(which, inst.policy, inst.reference, rm,
                                                      winner, c0, kcfg);
        double split_form = exact_expectation_split(which, inst.policy, inst.reference, rm,
                                                    winner, c0, kcfg);
        double diff = std::abs(branch_form - split_form);
        (which == SemiOnlineLoss::usopo ? worst_usopo : worst_sopo) =
            std::max(which == SemiOnlineLoss::usopo ? worst_usopo : worst_sopo, diff);
      }
      auto [z_vu, z_hu] = exact_branch_partition(inst.policy, rm, c0, kcfg);
      worst_partition = std::max(worst_partition, std::abs(z_vu + z_hu - 1.0));
    }
    push("dsopo_split_identity", worst_split, tol.identity_tol);
    push("usopo_equivalent_form", worst_usopo, tol.identity_tol);
    push("sopo_equivalent_form", worst_sopo, tol.identity_tol);
    push("branch_partition_sums_to_one", worst_partition, tol.exact_tol);
  }

  // DSoPo <= USoPo under the damped-loser construction.
  {
    BoundTrialSummary bound = check_dsopo_usopo_bound(derive_seed(seed, 0x6264), 1000, cfg.loss);
    push("dsopo_usopo_bound_failures", static_cast<double>(bound.trials - bound.passes),
         0.5);
  }

  // Entropy-difference identity between the two online objectives.
  {
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
      std::uint64_t s = derive_seed(seed, 0x656e74, static_cast<std::uint64_t>(i));
      LossConfig kcfg = detail::with_k(cfg.loss, 2 + (i % 2));
      FiniteInstance inst = make_random_instance(s, 3 + (i % 2), 1, kcfg.k);
      std::vector<Vec> frozen = policy_probs(inst.policy);
      double ce = exact_online_objective(inst, kcfg, frozen);
      double kl = exact_weighted_kl_online(inst, kcfg, frozen);
      double direct = detail::direct_entropy_term(inst, kcfg, frozen);
      worst = std::max(worst, std::abs((kl - ce) - direct));
    }
    push("online_entropy_difference_identity", worst, tol.identity_tol);
  }

  // Diffusion-form loss: analytic vs finite-difference gradients on both
  // branches, and the log 2 value at theta == ref.
  {
    DiffusionOptions opt{cfg.coupled_weight_form, cfg.share_noise};
    double worst_grad = 0.0, worst_log2 = 0.0;
    for (int i = 0; i < 20; ++i) {
      std::uint64_t s = derive_seed(seed, 0x646766, static_cast<std::uint64_t>(i));
      bool force_vu = (i % 2) == 0;
      detail::DiffusionCheckFixture fx(s, cfg.loss, force_vu, 10);
      Vec analytic = diff_sopo_grad(fx.theta, fx.ref, fx.batch, fx.winner, fx.t, fx.eps_w,
                                    fx.eps_l, fx.schedule, cfg.loss, opt);
      Denoiser probe = fx.theta;
      auto f = [&](const Vec& p) {
        probe.set_params(p);
        return diff_sopo_loss(probe, fx.ref, fx.batch, fx.winner, fx.t, fx.eps_w, fx.eps_l,
                              fx.schedule, cfg.loss, opt);
      };
      Vec fd = finite_diff_grad(f, fx.theta.params(), kFdStep);
      worst_grad = std::max(worst_grad,
                            compare_gradients(std::move(analytic), std::move(fd), tol.rel_tol,
                                              tol.abs_floor)
                                .rel_diff);

      Denoiser ref_copy = fx.theta;
      double loss_eq = diff_sopo_loss(fx.theta, ref_copy, fx.batch, fx.winner, fx.t, fx.eps_w,
                                      fx.eps_l, fx.schedule, cfg.loss, opt);
      worst_log2 = std::max(worst_log2, std::abs(loss_eq - std::log(2.0)));
    }
    push("diffusion_gradient_check", worst_grad, tol.rel_tol);
    push("diffusion_theta_eq_ref_log2", worst_log2, tol.exact_tol);
  }

  // Diffusion branch form vs Z-weighted split over an enumerable candidate
  // distribution.
  {
    DiffusionOptions opt{cfg.coupled_weight_form, cfg.share_noise};
    RandomStream rng(derive_seed(seed, 0x64737074));
    const int t_steps = 10;
    NoiseSchedule sched = NoiseSchedule::cosine(t_steps);
    Denoiser theta = Denoiser::zero(2, t_steps);
    Denoiser ref = Denoiser::zero(2, t_steps);
    Vec tp(theta.param_count()), rp(ref.param_count());
    for (double& x : tp) x = 0.3 * rng.normal();
    for (double& x : rp) x = 0.3 * rng.normal();
    theta.set_params(tp);
    ref.set_params(rp);
    Motion winner{{rng.normal(), rng.normal()}, -1};
    int t = rng.uniform_int(t_steps);
    Vec eps_w{rng.normal(), rng.normal()};
    Vec eps_l{rng.normal(), rng.normal()};

    const int m = 3;
    std::vector<Motion> points;
    Vec point_reward, q{0.5, 0.3, 0.2};
    for (int i = 0; i < m; ++i) {
      points.push_back(Motion{{rng.normal(), rng.normal()}, -1});
      point_reward.push_back(i == 0 ? 0.2 : 0.6 + 0.1 * i);  // one point below tau
    }
    LossConfig kcfg = detail::with_k(cfg.loss, 2);
    auto tuple_batch = [&](const std::vector<int>& items) {
      CandidateBatch b;
      b.condition = Condition{0};
      for (int it : items) {
        b.candidates.push_back(points[static_cast<std::size_t>(it)]);
        b.rewards.push_back(point_reward[static_cast<std::size_t>(it)]);
      }
      b.loser_index = argmin_reward(b.rewards);
      b.branch = b.rewards[b.loser_index] < kcfg.tau ? Branch::valuable_unpreferred
                                                     : Branch::high_preference_unpreferred;
      return b;
    };
    KahanSum branch_route, vu_sum, hu_sum, z_vu, z_hu;
    for_each_tuple(m, kcfg.k, [&](const std::vector<int>& items) {
      double w = 1.0;
      for (int it : items) w *= q[static_cast<std::size_t>(it)];
      CandidateBatch b = tuple_batch(items);
      double loss = diff_sopo_loss(theta, ref, b, winner, t, eps_w, eps_l, sched, kcfg, opt);
      branch_route.add(w * loss);
      if (b.branch == Branch::valuable_unpreferred) {
        z_vu.add(w);
        vu_sum.add(w * loss);
      } else {
        z_hu.add(w);
        hu_sum.add(w * loss);
      }
    });
    double split_route = 0.0;
    if (z_vu.value() > 0.0) split_route += z_vu.value() * (vu_sum.value() / z_vu.value());
    if (z_hu.value() > 0.0) split_route += z_hu.value() * (hu_sum.value() / z_hu.value());
    push("diffusion_branch_split_identity", std::abs(branch_route.value() - split_route),
         tol.identity_tol);
  }

  return records;
}

inline int run_verify(const RunConfig& cfg) {
  std::vector<CheckRecord> records = run_verify_checks(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream report(cfg.out_dir + "/verify_report.jsonl", std::ios::trunc);
  bool all_pass = true;
  for (const CheckRecord& r : records) {
    nlohmann::json j;
    j["check"] = r.name;
    j["residual"] = r.residual;
    j["tolerance"] = r.tolerance;
    j["pass"] = r.pass;
    report << j.dump() << "\n";
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name
              << " residual=" << format_double(r.residual)
              << " tolerance=" << format_double(r.tolerance) << "\n";
    all_pass = all_pass && r.pass;
  }
  std::cout << (all_pass ? "verify: all checks passed" : "verify: FAILURES present") << "\n";
  return all_pass ? 0 : 1;
}

// -------------------------------------------------------------------------
// bench: the four-regime synthetic comparison.

struct BenchRunOutput {
  EvalResult initial;
  std::vector<BenchResult> results;
};

inline BenchRunOutput run_bench_compute(const RunConfig& cfg) {
  SyntheticSetup setup = build_setup(cfg.setup);
  BenchRunOutput out;
  out.initial = evaluate_policy(setup.generator_init, setup, cfg.bench.final_mc,
                                derive_seed(cfg.seed, 901, 0), cfg.loss.tau);
  for (Regime regime : {Regime::offline, Regime::online, Regime::modipo, Regime::sopo})
    out.results.push_back(train_regime(setup, regime, cfg.loss, cfg.bench, cfg.seed));
  return out;
}

inline void write_bench_files(const RunConfig& cfg, const BenchRunOutput& out) {
  std::filesystem::create_directories(cfg.out_dir);
  for (const BenchResult& r : out.results) {
    std::ofstream curve(cfg.out_dir + "/bench_" + regime_name(r.regime) + ".csv", std::ios::trunc);
    curve << "iteration,loss,mean_reward,low_reward_mass\n";
    for (const CurvePoint& p : r.curve)
      curve << p.iteration << ',' << format_double(p.loss) << ',' << format_double(p.mean_reward)
            << ',' << format_double(p.low_reward_mass) << "\n";
  }
  std::ofstream summary(cfg.out_dir + "/bench_summary.csv", std::ios::trunc);
  summary << "regime,mean_reward,mean_reward_se,low_reward_mass,low_reward_mass_se\n";
  auto row = [&](const std::string& name, const EvalResult& e) {
    summary << name << ',' << format_double(e.mean_reward) << ','
            << format_double(e.mean_reward_se) << ',' << format_double(e.low_reward_mass) << ','
            << format_double(e.low_reward_mass_se) << "\n";
  };
  row("initial", out.initial);
  for (const BenchResult& r : out.results) row(regime_name(r.regime), r.final_eval);
}

inline int run_bench(const RunConfig& cfg) {
  BenchRunOutput out;
  try {
    out = run_bench_compute(cfg);
  } catch (const BenchDivergence& e) {
    std::cerr << "bench: " << e.what() << "\n";
    return 1;
  }
  write_bench_files(cfg, out);
  std::cout << "regime      mean_reward  low_reward_mass\n";
  auto line = [&](const std::string& name, const EvalResult& e) {
    std::cout << name;
    for (std::size_t i = name.size(); i < 12; ++i) std::cout << ' ';
    std::cout << format_fixed(e.mean_reward, 4) << "       " << format_fixed(e.low_reward_mass, 4)
              << "\n";
  };
  line("initial", out.initial);
  for (const BenchResult& r : out.results) line(regime_name(r.regime), r.final_eval);
  return 0;
}

// -------------------------------------------------------------------------
// train-diffusion: Algorithm-style SoPo loop on the toy diffusion policy.

struct DiffusionTrainOutput {
  Vec loss;
  Vec ema;
  std::vector<int> vu_counts;
  std::vector<int> hu_counts;
  Denoiser final_model{Denoiser::zero(2, 1)};
  Denoiser reference{Denoiser::zero(2, 1)};
};

inline DiffusionTrainOutput run_train_diffusion_compute(const RunConfig& cfg) {
  SyntheticSetup setup = build_setup(cfg.setup);
  RewardModel reward_model{setup.reward};
  NoiseSchedule schedule = NoiseSchedule::cosine(cfg.t_steps, cfg.omega);
  DiffusionOptions opt{cfg.coupled_weight_form, cfg.share_noise};

  std::vector<PreferenceRecord> records;
  for (int i = 0; i < cfg.diffusion.records; ++i) {
    RandomStream rng(derive_seed(cfg.seed, 0x726563, static_cast<std::uint64_t>(i)));
    records.push_back(PreferenceRecord{Condition{0}, Motion{setup.reward.sample(rng), -1}, {}});
  }

  DiffusionTrainOutput out;
  out.reference = Denoiser::gaussian_matched(2, schedule);
  Denoiser theta = out.reference;
  const double ema_alpha = 2.0 / (cfg.diffusion.ema_window + 1.0);

  for (int iter = 0; iter < cfg.diffusion.iters; ++iter) {
    KahanSum loss;
    Vec grad(theta.param_count(), 0.0);
    int vu = 0, hu = 0;
    for (std::size_t rec = 0; rec < records.size(); ++rec) {
      CandidateSampler sampler = [&](int k, std::uint64_t s) {
        std::vector<Motion> xs;
        for (int j = 0; j < k; ++j)
          xs.push_back(ancestral_sample(theta, schedule, Condition{0},
                                        derive_seed(s, static_cast<std::uint64_t>(j))));
        return xs;
      };
      Algorithm1Result step = algorithm1_step(
          theta, out.reference, records[rec], sampler, reward_model, schedule, cfg.loss, opt,
          derive_seed(cfg.seed, 0x616c67, static_cast<std::uint64_t>(iter),
                      static_cast<std::uint64_t>(rec)));
      loss.add(step.loss);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += step.grad[i];
      (step.branch == Branch::valuable_unpreferred ? vu : hu) += 1;
    }
    double mean_loss = loss.value() / static_cast<double>(records.size());
    if (!std::isfinite(mean_loss))
      throw std::runtime_error("train-diffusion: non-finite loss at iteration " +
                               std::to_string(iter));
    Vec params = theta.params();
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= cfg.diffusion.lr * grad[i] / static_cast<double>(records.size());
    if (!all_finite(params))
      throw std::runtime_error("train-diffusion: non-finite params at iteration " +
                               std::to_string(iter));
    theta.set_params(params);

    out.loss.push_back(mean_loss);
    out.ema.push_back(out.ema.empty() ? mean_loss
                                      : out.ema.back() + ema_alpha * (mean_loss - out.ema.back()));
    out.vu_counts.push_back(vu);
    out.hu_counts.push_back(hu);
  }
  out.final_model = theta;
  return out;
}

inline int run_train_diffusion(const RunConfig& cfg) {
  DiffusionTrainOutput out;
  try {
    out = run_train_diffusion_compute(cfg);
  } catch (const std::runtime_error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream log(cfg.out_dir + "/train_diffusion_log.csv", std::ios::trunc);
  log << "iteration,loss,ema_loss,vu_count,hu_count\n";
  for (std::size_t i = 0; i < out.loss.size(); ++i)
    log << i << ',' << format_double(out.loss[i]) << ',' << format_double(out.ema[i]) << ','
        << out.vu_counts[i] << ',' << out.hu_counts[i] << "\n";

  std::ofstream ckpt(cfg.out_dir + "/denoiser_final.txt", std::ios::trunc);
  ckpt << "dim 2 t_steps " << cfg.t_steps << "\n";
  for (double p : out.final_model.params()) ckpt << format_double(p) << "\n";

  if (!out.loss.empty())
    std::cout << "train-diffusion: " << out.loss.size() << " iterations, final loss "
              << format_double(out.loss.back()) << "\n";
  else
    std::cout << "train-diffusion: 0 iterations, checkpoint equals reference\n";
  return 0;
}

}  // namespace sopo
