#pragma once

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "sopo/bench.hpp"

namespace sopo {

struct DiffusionTrainOptions {
  int iters = 150;
  double lr = 5e-4;
  int records = 64;    // preference records per iteration
  int ema_window = 10;

  bool operator==(const DiffusionTrainOptions&) const = default;
};

struct VerifyTolerances {
  double rel_tol = 1e-6;      // gradient checks, relative
  double abs_floor = 1e-8;    // gradient checks, absolute floor
  double identity_tol = 1e-10;  // exact-expectation identities
  double exact_tol = 1e-12;   // bit-level accounting identities

  bool operator==(const VerifyTolerances&) const = default;
};

// Declarative run configuration; one flat section per module. CLI flags
// override file values, which override the environment default.
struct RunConfig {
  LossConfig loss;
  int t_steps = 50;
  OmegaMode omega = OmegaMode::constant;
  bool coupled_weight_form = false;
  bool share_noise = false;
  SetupConfig setup;
  BenchOptions bench;
  DiffusionTrainOptions diffusion;
  VerifyTolerances verify;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  bool operator==(const RunConfig&) const = default;

  void validate() const {
    loss.validate();
    if (t_steps < 1) throw std::invalid_argument("RunConfig: t_steps must be >= 1");
    if (bench.iters < 0 || bench.batch < 1 || !(bench.lr >= 0.0))
      throw std::invalid_argument("RunConfig: bad bench options");
    if (bench.eval_mc < 1000 || bench.final_mc < 1000)
      throw std::invalid_argument("RunConfig: Monte-Carlo sizes must be >= 1000");
    if (diffusion.iters < 0 || diffusion.records < 1 || diffusion.ema_window < 1 ||
        !(diffusion.lr >= 0.0))
      throw std::invalid_argument("RunConfig: bad diffusion options");
    if (!(verify.rel_tol >= 0.0) || !(verify.abs_floor >= 0.0) ||
        !(verify.identity_tol >= 0.0) || !(verify.exact_tol >= 0.0))
      throw std::invalid_argument("RunConfig: tolerances must be non-negative");
  }
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(int line, const std::string& what)
      : std::runtime_error("config:" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double_field(const std::string& value, int line, const std::string& field) {
  char* end = nullptr;
  double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError(line, "field '" + field + "': expected a number, got '" + value + "'");
  return v;
}

inline long long parse_int_field(const std::string& value, int line, const std::string& field) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError(line, "field '" + field + "': expected an integer, got '" + value + "'");
  return v;
}

inline bool parse_bool_field(const std::string& value, int line, const std::string& field) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(line, "field '" + field + "': expected true/false, got '" + value + "'");
}

inline Vec parse_vec_field(const std::string& value, int line, const std::string& field,
                           std::size_t expect) {
  std::istringstream in(value);
  Vec out;
  std::string tok;
  while (in >> tok) out.push_back(parse_double_field(tok, line, field));
  if (out.size() != expect)
    throw ConfigError(line, "field '" + field + "': expected " + std::to_string(expect) +
                                " numbers, got " + std::to_string(out.size()));
  return out;
}

inline OmegaMode parse_omega_field(const std::string& value, int line, const std::string& field) {
  if (value == "const") return OmegaMode::constant;
  if (value == "snr") return OmegaMode::snr;
  throw ConfigError(line, "field '" + field + "': expected const or snr, got '" + value + "'");
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text, RunConfig cfg = RunConfig{}) {
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(line_no, "unterminated section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (section != "loss" && section != "schedule" && section != "setup" &&
          section != "bench" && section != "diffusion" && section != "verify" &&
          section != "run")
        throw ConfigError(line_no, "unknown section '" + section + "'");
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "expected 'key = value'");
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    std::string field = section + "." + key;
    const int ln = line_no;

    auto fnum = [&] { return detail::parse_double_field(value, ln, field); };
    auto fint = [&] { return detail::parse_int_field(value, ln, field); };
    auto fbool = [&] { return detail::parse_bool_field(value, ln, field); };
    auto fvec = [&](std::size_t n) { return detail::parse_vec_field(value, ln, field, n); };

    if (section == "loss") {
      if (key == "beta") cfg.loss.beta = fnum();
      else if (key == "tau") cfg.loss.tau = fnum();
      else if (key == "c_const") cfg.loss.c_const = fnum();
      else if (key == "k") cfg.loss.k = static_cast<int>(fint());
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else if (section == "schedule") {
      if (key == "t_steps") cfg.t_steps = static_cast<int>(fint());
      else if (key == "omega") cfg.omega = detail::parse_omega_field(value, ln, field);
      else if (key == "coupled_weight_form") cfg.coupled_weight_form = fbool();
      else if (key == "share_noise") cfg.share_noise = fbool();
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else if (section == "setup") {
      if (key == "generator_mean") cfg.setup.generator_mean = fvec(2);
      else if (key == "generator_var") cfg.setup.generator_var = fvec(2);
      else if (key == "unpreferred_mean") cfg.setup.unpreferred_mean = fvec(2);
      else if (key == "unpreferred_var") cfg.setup.unpreferred_var = fvec(2);
      else if (key == "reward_mean1") cfg.setup.reward_mean1 = fvec(2);
      else if (key == "reward_mean2") cfg.setup.reward_mean2 = fvec(2);
      else if (key == "reward_cov1") cfg.setup.reward_cov1 = fvec(3);
      else if (key == "reward_cov2") cfg.setup.reward_cov2 = fvec(3);
      else if (key == "reward_weights") cfg.setup.reward_weights = fvec(2);
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else if (section == "bench") {
      if (key == "iters") cfg.bench.iters = static_cast<int>(fint());
      else if (key == "lr") cfg.bench.lr = fnum();
      else if (key == "batch") cfg.bench.batch = static_cast<int>(fint());
      else if (key == "eval_mc") cfg.bench.eval_mc = static_cast<int>(fint());
      else if (key == "final_mc") cfg.bench.final_mc = static_cast<int>(fint());
      else if (key == "dataset_size") cfg.bench.dataset_size = static_cast<int>(fint());
      else if (key == "freeze_candidates") cfg.bench.freeze_candidates = fbool();
      else if (key == "online_from_reference") cfg.bench.online_from_reference = fbool();
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else if (section == "diffusion") {
      if (key == "iters") cfg.diffusion.iters = static_cast<int>(fint());
      else if (key == "lr") cfg.diffusion.lr = fnum();
      else if (key == "records") cfg.diffusion.records = static_cast<int>(fint());
      else if (key == "ema_window") cfg.diffusion.ema_window = static_cast<int>(fint());
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else if (section == "verify") {
      if (key == "rel_tol") cfg.verify.rel_tol = fnum();
      else if (key == "abs_floor") cfg.verify.abs_floor = fnum();
      else if (key == "identity_tol") cfg.verify.identity_tol = fnum();
      else if (key == "exact_tol") cfg.verify.exact_tol = fnum();
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else if (section == "run") {
      if (key == "seed") cfg.seed = static_cast<std::uint64_t>(fint());
      else if (key == "out") cfg.out_dir = value;
      else throw ConfigError(ln, "unknown field '" + field + "'");
    } else {
      throw ConfigError(ln, "field '" + key + "' outside any section");
    }
  }
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path, RunConfig base = RunConfig{}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), std::move(base));
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  auto vec = [](const Vec& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ' ';
      s += format_double(v[i]);
    }
    return s;
  };
  out << "[loss]\n";
  out << "beta = " << format_double(cfg.loss.beta) << "\n";
  out << "tau = " << format_double(cfg.loss.tau) << "\n";
  out << "c_const = " << format_double(cfg.loss.c_const) << "\n";
  out << "k = " << cfg.loss.k << "\n\n";
  out << "[schedule]\n";
  out << "t_steps = " << cfg.t_steps << "\n";
  out << "omega = " << (cfg.omega == OmegaMode::constant ? "const" : "snr") << "\n";
  out << "coupled_weight_form = " << (cfg.coupled_weight_form ? "true" : "false") << "\n";
  out << "share_noise = " << (cfg.share_noise ? "true" : "false") << "\n\n";
  out << "[setup]\n";
  out << "generator_mean = " << vec(cfg.setup.generator_mean) << "\n";
  out << "generator_var = " << vec(cfg.setup.generator_var) << "\n";
  out << "unpreferred_mean = " << vec(cfg.setup.unpreferred_mean) << "\n";
  out << "unpreferred_var = " << vec(cfg.setup.unpreferred_var) << "\n";
  out << "reward_mean1 = " << vec(cfg.setup.reward_mean1) << "\n";
  out << "reward_mean2 = " << vec(cfg.setup.reward_mean2) << "\n";
  out << "reward_cov1 = " << vec(cfg.setup.reward_cov1) << "\n";
  out << "reward_cov2 = " << vec(cfg.setup.reward_cov2) << "\n";
  out << "reward_weights = " << vec(cfg.setup.reward_weights) << "\n\n";
  out << "[bench]\n";
  out << "iters = " << cfg.bench.iters << "\n";
  out << "lr = " << format_double(cfg.bench.lr) << "\n";
  out << "batch = " << cfg.bench.batch << "\n";
  out << "eval_mc = " << cfg.bench.eval_mc << "\n";
  out << "final_mc = " << cfg.bench.final_mc << "\n";
  out << "dataset_size = " << cfg.bench.dataset_size << "\n";
  out << "freeze_candidates = " << (cfg.bench.freeze_candidates ? "true" : "false") << "\n";
  out << "online_from_reference = " << (cfg.bench.online_from_reference ? "true" : "false")
      << "\n\n";
  out << "[diffusion]\n";
  out << "iters = " << cfg.diffusion.iters << "\n";
  out << "lr = " << format_double(cfg.diffusion.lr) << "\n";
  out << "records = " << cfg.diffusion.records << "\n";
  out << "ema_window = " << cfg.diffusion.ema_window << "\n\n";
  out << "[verify]\n";
  out << "rel_tol = " << format_double(cfg.verify.rel_tol) << "\n";
  out << "abs_floor = " << format_double(cfg.verify.abs_floor) << "\n";
  out << "identity_tol = " << format_double(cfg.verify.identity_tol) << "\n";
  out << "exact_tol = " << format_double(cfg.verify.exact_tol) << "\n\n";
  out << "[run]\n";
  out << "seed = " << cfg.seed << "\n";
  out << "out = " << cfg.out_dir << "\n";
  return out.str();
}

}  // namespace sopo
