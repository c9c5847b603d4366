#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sopo/runner.hpp"

namespace {

struct FlagOverrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> iters;
  std::optional<double> tau;
  std::optional<double> beta;
  std::optional<double> c_const;
  std::optional<int> k;
  std::optional<int> t_steps;
  std::optional<std::string> omega;
};

void add_common_flags(CLI::App* cmd, FlagOverrides& flags) {
  cmd->add_option("--config", flags.config_path, "declarative config file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", flags.seed, "master seed");
  cmd->add_option("--out", flags.out_dir, "output directory");
  cmd->add_option("--iters", flags.iters, "iteration count override");
  cmd->add_option("--tau", flags.tau, "preference threshold tau");
  cmd->add_option("--beta", flags.beta, "DPO temperature beta");
  cmd->add_option("--c-const", flags.c_const, "winner reweighting constant C");
  cmd->add_option("--k", flags.k, "online candidate count K");
  cmd->add_option("--t-steps", flags.t_steps, "diffusion step count");
  cmd->add_option("--omega", flags.omega, "timestep weight mode")
      ->check(CLI::IsMember({"const", "snr"}));
}

// precedence: flag > config file > SOPO_OUT env > built-in default
sopo::RunConfig resolve_config(const FlagOverrides& flags, bool iters_is_diffusion) {
  sopo::RunConfig cfg;
  if (const char* env_out = std::getenv("SOPO_OUT")) cfg.out_dir = env_out;
  if (flags.config_path) cfg = sopo::parse_config_file(*flags.config_path, cfg);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out_dir) cfg.out_dir = *flags.out_dir;
  if (flags.tau) cfg.loss.tau = *flags.tau;
  if (flags.beta) cfg.loss.beta = *flags.beta;
  if (flags.c_const) cfg.loss.c_const = *flags.c_const;
  if (flags.k) cfg.loss.k = *flags.k;
  if (flags.t_steps) cfg.t_steps = *flags.t_steps;
  if (flags.omega) cfg.omega = (*flags.omega == "snr") ? sopo::OmegaMode::snr
                                                       : sopo::OmegaMode::constant;
  if (flags.iters) {
    if (iters_is_diffusion)
      cfg.diffusion.iters = *flags.iters;
    else
      cfg.bench.iters = *flags.iters;
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SoPo preference-optimization laboratory"};
  app.require_subcommand(1);

  FlagOverrides verify_flags, bench_flags, diffusion_flags;
  CLI::App* verify = app.add_subcommand("verify", "run the theorem and identity checks");
  CLI::App* bench = app.add_subcommand("bench", "run the 2D synthetic alignment benchmark");
  CLI::App* train = app.add_subcommand("train-diffusion", "train the toy diffusion policy");
  add_common_flags(verify, verify_flags);
  add_common_flags(bench, bench_flags);
  add_common_flags(train, diffusion_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (verify->parsed()) return sopo::run_verify(resolve_config(verify_flags, false));
    if (bench->parsed()) return sopo::run_bench(resolve_config(bench_flags, false));
    if (train->parsed()) return sopo::run_train_diffusion(resolve_config(diffusion_flags, true));
  } catch (const sopo::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
