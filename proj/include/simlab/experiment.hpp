#pragma once

/// Experiment orchestration: flat `key = value` configuration, seeded runs,
/// sweeps, presets and the property battery behind `check-all`.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "simlab/analysis.hpp"
#include "simlab/errors.hpp"
#include "simlab/losses.hpp"
#include "simlab/optimizer.hpp"
#include "simlab/sphere.hpp"

namespace simlab {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailure = 1,
  kExitConfigError = 2,
  kExitRuntimeAbort = 3,
};

/// Raw key/value configuration; later assignments override earlier ones.
using ConfigMap = std::map<std::string, std::string>;

inline const std::vector<std::string> &required_keys() {
  static const std::vector<std::string> keys = {"n", "d", "batch_size",
                                                "loss.family"};
  return keys;
}

inline const std::set<std::string> &known_keys() {
  static const std::set<std::string> keys = {
      "n",
      "d",
      "batch_size",
      "restarts",
      "preset",
      "output_dir",
      "workers",
      "seed",
      "checks",
      "check.tol",
      "check.var_tol",
      "check.full_var",
      "check.allow_unconverged",
      "loss.family",
      "loss.c1",
      "loss.c2",
      "loss.temperature",
      "loss.bias",
      "loss.vrns_lambda",
      "loss.n_global",
      "loss.siglip_weight",
      "opt.step_size",
      "opt.max_steps",
      "opt.grad_tol",
      "opt.init",
      "opt.noise_sigma",
      "opt.record_every",
      "opt.mode",
      "opt.max_halvings",
      "opt.warm_start",
      "opt.init_jitter",
      "sweep.axis",
      "sweep.values",
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string &s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos)
    return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::pair<std::string, std::string>
split_assignment(const std::string &text, const std::string &where) {
  const auto eq = text.find('=');
  if (eq == std::string::npos)
    throw ConfigError(where + ": expected 'key = value', got '" + text + "'");
  std::string key = trim(text.substr(0, eq));
  std::string value = trim(text.substr(eq + 1));
  if (key.empty())
    throw ConfigError(where + ": empty key");
  if (!known_keys().count(key))
    throw ConfigError(where + ": unknown key '" + key + "'");
  return {std::move(key), std::move(value)};
}

} // namespace detail

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// ignored.
inline ConfigMap parse_config(std::istream &is) {
  ConfigMap out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string body = detail::trim(line);
    if (body.empty() || body[0] == '#')
      continue;
    auto [key, value] =
        detail::split_assignment(body, "config line " + std::to_string(line_no));
    out[key] = value;
  }
  return out;
}

inline ConfigMap load_config_file(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_config(in);
}

/// Applies a `key=value` override.
inline void apply_override(ConfigMap &cfg, const std::string &assignment) {
  auto [key, value] = detail::split_assignment(assignment, "--set");
  cfg[key] = value;
}

/// Preset defaults; keys already present in `cfg` win.
inline void apply_preset(ConfigMap &cfg) {
  const auto it = cfg.find("preset");
  if (it == cfg.end() || it->second.empty())
    return;
  ConfigMap defaults;
  const std::string &name = it->second;
  if (name == "figure2") {
    defaults = {{"n", "4"},
                {"d", "3"},
                {"batch_size", "2"},
                {"loss.family", "simclr"},
                {"loss.temperature", "0.2"},
                {"opt.step_size", "2"},
                {"opt.init_jitter", "0.05"}};
  } else if (name == "variance-sweep") {
    defaults = {{"n", "32"},
                {"d", "32"},
                {"batch_size", "32"},
                {"loss.family", "simclr"},
                {"loss.temperature", "0.2"},
                {"opt.step_size", "2"},
                {"restarts", "1"},
                {"sweep.axis", "batch_size"},
                {"sweep.values", "2,4,8,16,32"}};
  } else if (name == "temperature-sweep") {
    defaults = {{"n", "8"},
                {"d", "8"},
                {"batch_size", "8"},
                {"loss.family", "simclr"},
                {"loss.temperature", "0.2"},
                {"opt.step_size", "0.5"},
                {"sweep.axis", "temperature"},
                {"sweep.values", "0.1,0.2,0.5,1"}};
  } else if (name == "excess-separation") {
    defaults = {{"n", "16"},
                {"d", "16"},
                {"batch_size", "16"},
                {"loss.family", "siglip"},
                {"loss.temperature", "10"},
                {"loss.bias", "-5"},
                {"opt.step_size", "0.05"}};
  } else {
    throw ConfigError("preset: unknown value '" + name +
                      "' (expected figure2, variance-sweep, "
                      "temperature-sweep or excess-separation)");
  }
  for (auto &[key, value] : defaults)
    cfg.emplace(key, value);
}

enum class SweepAxis { BatchSize, Temperature, Lambda };

inline const char *to_string(SweepAxis a) {
  switch (a) {
  case SweepAxis::BatchSize:
    return "batch_size";
  case SweepAxis::Temperature:
    return "temperature";
  case SweepAxis::Lambda:
    return "lambda";
  }
  return "?";
}

inline SweepAxis parse_sweep_axis(const std::string &s) {
  if (s == "batch_size")
    return SweepAxis::BatchSize;
  if (s == "temperature")
    return SweepAxis::Temperature;
  if (s == "lambda")
    return SweepAxis::Lambda;
  throw ConfigError("sweep.axis: expected batch_size, temperature or lambda, "
                    "got '" + s + "'");
}

/// Validated experiment configuration.
struct ExperimentConfig {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t batch_size = 0;
  LossSpec loss;
  OptimizerConfig opt;
  std::size_t restarts = 1;
  std::string preset;
  std::filesystem::path output_dir = "out";
  std::size_t workers = 1;
  std::vector<std::string> checks = {"auto"};
  double check_tol = 1e-2;
  double check_var_tol = 0.02;
  double check_full_var = 1e-3;
  bool allow_unconverged = false;
  std::optional<std::filesystem::path> warm_start;
  double init_jitter = 0.0;
  std::optional<SweepAxis> sweep_axis;
  std::vector<double> sweep_values;
};

namespace detail {

inline double parse_real(const std::string &key, const std::string &s) {
  try {
    std::size_t used = 0;
    const double x = std::stod(s, &used);
    if (used != s.size())
      throw std::invalid_argument(s);
    return x;
  } catch (const std::logic_error &) {
    throw ConfigError(key + ": expected a real number, got '" + s + "'");
  }
}

inline std::size_t parse_count(const std::string &key, const std::string &s) {
  const double x = parse_real(key, s);
  if (!(x >= 0) || x != std::floor(x) || x > 1e15)
    throw ConfigError(key + ": expected a nonnegative integer, got '" + s +
                      "'");
  return static_cast<std::size_t>(x);
}

inline bool parse_bool(const std::string &key, const std::string &s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on")
    return true;
  if (s == "0" || s == "false" || s == "no" || s == "off")
    return false;
  throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string &s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (auto t = trim(item); !t.empty())
      out.push_back(t);
  return out;
}

} // namespace detail

/// Builds and validates the configuration (after presets). Missing required
/// keys are reported together.
inline ExperimentConfig build_config(ConfigMap cfg) {
  apply_preset(cfg);
  std::vector<std::string> missing;
  for (const auto &k : required_keys())
    if (!cfg.count(k) || cfg.at(k).empty())
      missing.push_back(k);
  if (!missing.empty()) {
    std::string msg = "missing required keys:";
    for (const auto &k : missing)
      msg += " " + k;
    throw ConfigError(msg);
  }
  auto get = [&](const std::string &k) -> const std::string * {
    const auto it = cfg.find(k);
    return it == cfg.end() ? nullptr : &it->second;
  };
  using detail::parse_bool;
  using detail::parse_count;
  using detail::parse_real;

  ExperimentConfig c;
  c.n = parse_count("n", *get("n"));
  c.d = parse_count("d", *get("d"));
  c.batch_size = parse_count("batch_size", *get("batch_size"));
  if (c.n < 2)
    throw ConfigError("n: must be >= 2");
  if (c.d < 2)
    throw ConfigError("d: must be >= 2");
  if (c.batch_size < 1 || c.batch_size > c.n || c.n % c.batch_size != 0)
    throw ConfigError("batch_size: must divide n=" + std::to_string(c.n));

  const LossFamily family = parse_loss_family(*get("loss.family"));
  if (family == LossFamily::GenericInfo || family == LossFamily::GenericIndAdd)
    throw ConfigError("loss.family: generic families need programmatic maps "
                      "and cannot be configured from text");
  const double t = get("loss.temperature")
                       ? parse_real("loss.temperature", *get("loss.temperature"))
                       : 0.2;
  c.loss = LossSpec::named(family, t, c.n);
  if (auto *s = get("loss.c1"))
    c.loss.c1 = static_cast<int>(parse_count("loss.c1", *s));
  if (auto *s = get("loss.c2"))
    c.loss.c2 = static_cast<int>(parse_count("loss.c2", *s));
  if (auto *s = get("loss.bias"))
    c.loss.bias = parse_real("loss.bias", *s);
  if (auto *s = get("loss.vrns_lambda"))
    c.loss.vrns_lambda = parse_real("loss.vrns_lambda", *s);
  if (auto *s = get("loss.n_global"))
    c.loss.n_global = parse_count("loss.n_global", *s);
  if (auto *s = get("loss.siglip_weight"))
    c.loss.siglip_weight = parse_real("loss.siglip_weight", *s);
  try {
    c.loss.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(std::string("loss: ") + e.what());
  }

  c.restarts = c.batch_size < c.n ? 5 : 1;
  if (auto *s = get("restarts"))
    c.restarts = parse_count("restarts", *s);
  if (c.restarts < 1)
    throw ConfigError("restarts: must be >= 1");
  if (auto *s = get("seed"))
    c.opt.seed = parse_count("seed", *s);
  if (auto *s = get("opt.step_size"))
    c.opt.step_size = parse_real("opt.step_size", *s);
  if (auto *s = get("opt.max_steps"))
    c.opt.max_steps = parse_count("opt.max_steps", *s);
  if (auto *s = get("opt.grad_tol"))
    c.opt.grad_tol = parse_real("opt.grad_tol", *s);
  if (auto *s = get("opt.noise_sigma"))
    c.opt.noise_sigma = parse_real("opt.noise_sigma", *s);
  if (auto *s = get("opt.record_every"))
    c.opt.record_every = parse_count("opt.record_every", *s);
  if (auto *s = get("opt.max_halvings"))
    c.opt.max_halvings = parse_count("opt.max_halvings", *s);
  if (auto *s = get("opt.mode")) {
    if (*s == "summed")
      c.opt.mode = StepMode::Summed;
    else if (*s == "round-robin")
      c.opt.mode = StepMode::RoundRobin;
    else
      throw ConfigError("opt.mode: expected summed or round-robin, got '" + *s +
                        "'");
  }
  if (auto *s = get("opt.init")) {
    if (*s == "random-gaussian")
      c.opt.init = InitMode::RandomGaussian;
    else if (*s == "warm-start")
      c.opt.init = InitMode::WarmStart;
    else
      throw ConfigError("opt.init: expected random-gaussian or warm-start, "
                        "got '" + *s + "'");
  }
  if (auto *s = get("opt.warm_start"))
    c.warm_start = *s;
  if (c.opt.init == InitMode::WarmStart && !c.warm_start)
    throw ConfigError("opt.warm_start: required when opt.init = warm-start");
  if (auto *s = get("opt.init_jitter"))
    c.init_jitter = parse_real("opt.init_jitter", *s);
  if (!(c.init_jitter >= 0))
    throw ConfigError("opt.init_jitter: must be nonnegative");
  try {
    c.opt.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(e.what());
  }

  if (auto *s = get("preset"))
    c.preset = *s;
  if (auto *s = get("output_dir"))
    c.output_dir = *s;
  if (auto *s = get("workers"))
    c.workers = std::max<std::size_t>(1, parse_count("workers", *s));
  if (auto *s = get("checks"))
    c.checks = detail::split_list(*s);
  if (auto *s = get("check.tol"))
    c.check_tol = parse_real("check.tol", *s);
  if (auto *s = get("check.var_tol"))
    c.check_var_tol = parse_real("check.var_tol", *s);
  if (auto *s = get("check.full_var"))
    c.check_full_var = parse_real("check.full_var", *s);
  if (!(c.check_tol >= 0) || !(c.check_var_tol >= 0) || !(c.check_full_var >= 0))
    throw ConfigError("check.*: tolerances must be nonnegative");
  if (auto *s = get("check.allow_unconverged"))
    c.allow_unconverged = parse_bool("check.allow_unconverged", *s);
  static const std::set<std::string> check_names = {
      "auto",   "none",  "fullbatch", "variance-bounds", "overexpansion",
      "excess", "vrns",  "lemmas"};
  for (const auto &name : c.checks)
    if (!check_names.count(name))
      throw ConfigError("checks: unknown check '" + name + "'");

  if (auto *s = get("sweep.axis"); s && !s->empty())
    c.sweep_axis = parse_sweep_axis(*s);
  if (auto *s = get("sweep.values"))
    for (const auto &item : detail::split_list(*s))
      c.sweep_values.push_back(parse_real("sweep.values", item));
  if (c.sweep_axis && c.sweep_values.empty())
    throw ConfigError("sweep.values: required when sweep.axis is set");
  return c;
}

// ---------------------------------------------------------------------------
// Warm-start configurations
// ---------------------------------------------------------------------------

/// Every batch occupies the same (m-1)-simplex ETF: maximal negative-pair
/// variance among batch optima. u_i = v_i.
inline EmbeddingSet coaxial_batches(std::size_t n, std::size_t m,
                                    std::size_t d) {
  if (m < 2 || n % m != 0)
    throw ConfigError("coaxial_batches needs m >= 2 and m | n");
  const Matrix w = make_etf(m, d);
  Matrix u(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < n / m; ++k)
    u.middleRows(static_cast<Eigen::Index>(k * m),
                 static_cast<Eigen::Index>(m)) = w;
  return EmbeddingSet::self_paired(u);
}

/// Batch k occupies its own block of m-1 coordinates: cross-batch
/// similarities vanish, giving the minimal variance. Needs d >= b(m-1).
inline EmbeddingSet orthogonal_batches(std::size_t n, std::size_t m,
                                       std::size_t d) {
  if (m < 2 || n % m != 0)
    throw ConfigError("orthogonal_batches needs m >= 2 and m | n");
  const std::size_t b = n / m;
  if (d < b * (m - 1))
    throw DimensionError("orthogonal_batches needs d >= b(m-1) = " +
                         std::to_string(b * (m - 1)));
  const Matrix w = make_etf(m, m - 1);
  Matrix u = Matrix::Zero(static_cast<Eigen::Index>(n),
                          static_cast<Eigen::Index>(d));
  const auto mm = static_cast<Eigen::Index>(m);
  for (std::size_t k = 0; k < b; ++k)
    u.block(static_cast<Eigen::Index>(k) * mm,
            static_cast<Eigen::Index>(k * (m - 1)), mm, mm - 1) = w;
  return EmbeddingSet::self_paired(u);
}

/// Adds seeded Gaussian noise of scale sigma to every row, then projects.
inline EmbeddingSet jitter(const EmbeddingSet &e, double sigma,
                           std::uint64_t seed) {
  if (sigma <= 0)
    return e;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, sigma);
  Matrix u = e.u(), v = e.v();
  for (Matrix *x : {&u, &v})
    for (Eigen::Index i = 0; i < x->rows(); ++i)
      for (Eigen::Index j = 0; j < x->cols(); ++j)
        (*x)(i, j) += gauss(rng);
  return {project_rows(u), project_rows(v)};
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

struct RunOutcome {
  OptimizeResult result;
  std::vector<CheckReport> checks;
  std::size_t restart_seed = 0;
};

inline constexpr double kConvergedGradNorm = 1e-6;

namespace detail {

inline CheckReport convergence_report(const OptimizeResult &r) {
  CheckReport c;
  c.name = "convergence";
  c.lhs = r.grad_norm;
  c.rhs = kConvergedGradNorm;
  c.margin = kConvergedGradNorm - r.grad_norm;
  c.tolerance = kConvergedGradNorm;
  c.passed = r.reason != Termination::NonFinite &&
             r.grad_norm <= kConvergedGradNorm;
  c.details = std::string("termination=") + to_string(r.reason) +
              " steps=" + std::to_string(r.steps);
  if (!r.diagnostic.empty())
    c.details += " diagnostic=" + r.diagnostic;
  return c;
}

inline CheckReport variance_membership_report(const SimilarityStats &s,
                                              const VarianceBounds &vb,
                                              double var_tol, double tol) {
  CheckReport c;
  c.name = "variance_bounds";
  c.lhs = s.neg_var;
  c.rhs = vb.upper;
  c.tolerance = var_tol;
  const double below = (vb.lower - var_tol) - s.neg_var;
  const double above = s.neg_var - (vb.upper + var_tol);
  c.margin = -std::max(below, above);
  const double mean_err =
      std::abs(s.neg_mean + 1.0 / (static_cast<double>(vb.n) - 1.0));
  c.passed = c.margin >= 0 && mean_err <= tol && s.pos_mean >= 1.0 - tol;
  c.details = "interval=[" + fmt(vb.lower) + ", " + fmt(vb.upper) +
              "] neg_mean_err=" + fmt(mean_err) +
              " pos_mean=" + fmt(s.pos_mean) +
              (vb.dim_condition_met ? "" : " (d < b(m-1))");
  return c;
}

inline CheckReport excess_report(const SimilarityStats &s, std::size_t n,
                                 const ExcessCondition &cond) {
  constexpr double kNegMargin = 5e-3;
  constexpr double kPosMargin = 1e-3;
  const double target = -1.0 / (static_cast<double>(n) - 1.0);
  CheckReport c;
  c.name = "excess_separation";
  c.lhs = s.neg_mean;
  c.rhs = target - kNegMargin;
  c.margin = c.rhs - c.lhs;
  c.tolerance = kNegMargin;
  c.passed = cond.verdict == ExcessClass::Excessive && c.margin >= 0 &&
             s.pos_mean <= 1.0 - kPosMargin;
  c.details = std::string("condition=") + to_string(cond.verdict) +
              " L=" + fmt(cond.ratio) + " threshold=" + fmt(cond.threshold) +
              " pos_mean=" + fmt(s.pos_mean);
  return c;
}

inline CheckReport vrns_report(const SimilarityStats &s, std::size_t n,
                               double tol) {
  constexpr double kVarMax = 0.01;
  CheckReport c;
  c.name = "vrns_variance";
  c.lhs = s.neg_var;
  c.rhs = kVarMax;
  c.margin = kVarMax - s.neg_var;
  c.tolerance = tol;
  const double mean_err =
      std::abs(s.neg_mean + 1.0 / (static_cast<double>(n) - 1.0));
  c.passed = c.margin >= 0 && mean_err <= tol;
  c.details = "neg_mean_err=" + fmt(mean_err);
  return c;
}

} // namespace detail

/// Checks for a finished run. Unconverged runs only get the convergence
/// report unless `allow_unconverged` is set.
inline std::vector<CheckReport> run_checks(const ExperimentConfig &c,
                                           const OptimizeResult &r) {
  if (c.checks.size() == 1 && c.checks[0] == "none")
    return {};
  CheckReport conv = detail::convergence_report(r);
  if (r.reason == Termination::NonFinite)
    return {conv};
  if (!conv.passed) {
    if (!c.allow_unconverged)
      return {conv};
    conv.passed = true;
    conv.details += " (unconverged run checked by override)";
  }
  std::vector<CheckReport> out{conv};

  const SimilarityStats s = similarity_stats(r.embeddings);
  const bool full = c.batch_size == c.n;
  std::set<std::string> wanted(c.checks.begin(), c.checks.end());
  if (wanted.count("auto")) {
    wanted.erase("auto");
    wanted.insert("overexpansion");
    if (c.loss.vrns_lambda > 0)
      wanted.insert("vrns");
    else if (!full)
      wanted.insert("variance-bounds");
    else if (c.loss.family == LossFamily::SigLip && c.n >= 3 &&
             sigmoid_excess_condition(c.n, c.loss.temperature, c.loss.bias)
                     .verdict == ExcessClass::Excessive)
      wanted.insert("excess");
    else
      wanted.insert("fullbatch");
  }
  if (wanted.count("fullbatch"))
    out.push_back(check_fullbatch_optimum(s, c.n, c.check_tol));
  if (wanted.count("variance-bounds")) {
    if (c.batch_size < 2)
      throw ConfigError("checks: variance-bounds needs batch_size >= 2");
    out.push_back(detail::variance_membership_report(
        s, variance_bounds(c.n, c.batch_size, c.d), c.check_var_tol,
        c.check_tol));
  }
  if (wanted.count("excess")) {
    if (c.loss.family != LossFamily::SigLip || c.n < 3)
      throw ConfigError("checks: excess applies to the siglip family, n >= 3");
    out.push_back(detail::excess_report(
        s, c.n,
        sigmoid_excess_condition(c.n, c.loss.temperature, c.loss.bias)));
  }
  if (wanted.count("vrns"))
    out.push_back(detail::vrns_report(s, c.n, c.check_tol));
  if (wanted.count("overexpansion"))
    out.push_back(check_overexpansion(r.embeddings, 1e-10));
  if (wanted.count("lemmas"))
    for (auto &rep : lemma_suite(r.embeddings))
      out.push_back(std::move(rep));
  return out;
}

/// One configured optimization (best of `restarts` seeds for mini-batch runs).
inline RunOutcome execute(const ExperimentConfig &c,
                          std::size_t restart_workers = 1) {
  const BatchPartition p = partition_fixed(c.n, c.batch_size);
  std::optional<EmbeddingSet> warm;
  if (c.opt.init == InitMode::WarmStart) {
    std::ifstream in(*c.warm_start);
    if (!in)
      throw ConfigError("opt.warm_start: cannot open '" +
                        c.warm_start->string() + "'");
    warm = jitter(read_embeddings(in), c.init_jitter, c.opt.seed);
  }
  RunOutcome out{c.restarts > 1
                     ? optimize_best_of(c.loss, c.opt, p, c.n, c.d, c.restarts,
                                        restart_workers,
                                        warm ? &*warm : nullptr)
                     : optimize(c.loss, c.opt, p, c.n, c.d,
                                warm ? &*warm : nullptr),
                 {},
                 c.opt.seed};
  out.checks = run_checks(c, out.result);
  return out;
}

inline nlohmann::json stats_json(const SimilarityStats &s) {
  return {{"pos_mean", s.pos_mean},   {"pos_var", s.pos_var},
          {"neg_mean", s.neg_mean},   {"neg_var", s.neg_var},
          {"within_mean", s.within_mean}, {"within_var", s.within_var}};
}

inline nlohmann::json final_stats_json(const ExperimentConfig &c,
                                       const OptimizeResult &r) {
  const SimilarityStats s = similarity_stats(r.embeddings);
  nlohmann::json j = {
      {"n", c.n},
      {"d", c.d},
      {"batch_size", c.batch_size},
      {"loss", to_string(c.loss.family)},
      {"temperature", c.loss.temperature},
      {"bias", c.loss.bias},
      {"vrns_lambda", c.loss.vrns_lambda},
      {"seed", c.opt.seed},
      {"termination", to_string(r.reason)},
      {"steps", r.steps},
      {"step_size", r.step_size},
      {"halvings", r.halvings},
      {"final_loss", std::isfinite(r.final_loss) ? nlohmann::json(r.final_loss)
                                                 : nlohmann::json("nan")},
      {"grad_norm", std::isfinite(r.grad_norm) ? nlohmann::json(r.grad_norm)
                                               : nlohmann::json("nan")},
      {"stats", stats_json(s)},
      {"alignment", alignment_metric(r.embeddings)},
      {"uniformity_exact", uniformity_exact(r.embeddings)},
      {"uniformity_approx", uniformity_approx(s)},
  };
  if (c.batch_size >= 2) {
    const VarianceBounds vb = variance_bounds(c.n, c.batch_size, c.d);
    j["variance_bounds"] = {{"lower", vb.lower},
                            {"upper", vb.upper},
                            {"dim_condition_met", vb.dim_condition_met}};
  }
  if (!r.diagnostic.empty())
    j["diagnostic"] = r.diagnostic;
  return j;
}

namespace detail {

inline void write_text(const std::filesystem::path &path,
                       const std::function<void(std::ostream &)> &body) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write '" + path.string() + "'");
  body(out);
  if (!out)
    throw Error("write failed for '" + path.string() + "'");
}

} // namespace detail

/// Writes trajectory.csv, final_stats.json, checks.json and embeddings.txt.
inline void write_run_artifacts(const std::filesystem::path &dir,
                                const ExperimentConfig &c,
                                const RunOutcome &o) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "trajectory.csv", [&](std::ostream &os) {
    write_trajectory_csv(os, o.result.trajectory);
  });
  detail::write_text(dir / "final_stats.json", [&](std::ostream &os) {
    os << final_stats_json(c, o.result).dump(2) << '\n';
  });
  detail::write_text(dir / "checks.json", [&](std::ostream &os) {
    os << to_json(o.checks).dump(2) << '\n';
  });
  detail::write_text(dir / "embeddings.txt", [&](std::ostream &os) {
    write_embeddings(os, o.result.embeddings);
  });
}

inline void print_checks(std::ostream &os,
                         const std::vector<CheckReport> &reports,
                         const std::string &prefix = {}) {
  for (const auto &r : reports)
    os << (r.passed ? "PASS " : "FAIL ") << prefix << r.name
       << " margin=" << detail::fmt(r.margin) << " " << r.details << '\n';
}

// ---------------------------------------------------------------------------
// figure2 preset
// ---------------------------------------------------------------------------

struct Figure2Outcome {
  RunOutcome full, coaxial, orthogonal;
  std::vector<CheckReport> checks;
};

/// Full-batch run plus two warm-started mini-batch runs seeking the variance
/// extremes of the fixed-batch optimum set.
inline Figure2Outcome run_figure2(const ExperimentConfig &base) {
  if (base.batch_size >= base.n)
    throw ConfigError("figure2: batch_size must be smaller than n");
  const VarianceBounds vb = variance_bounds(base.n, base.batch_size, base.d);
  const double target = -1.0 / (static_cast<double>(base.n) - 1.0);

  ExperimentConfig full = base;
  full.batch_size = base.n;
  full.restarts = 1;
  full.checks = {"fullbatch", "overexpansion"};

  ExperimentConfig mini = base;
  mini.restarts = 1;
  mini.opt.init = InitMode::WarmStart;
  mini.checks = {"variance-bounds", "overexpansion"};

  auto warm_run = [&](const EmbeddingSet &start) {
    const BatchPartition p = partition_fixed(mini.n, mini.batch_size);
    const EmbeddingSet w = jitter(start, mini.init_jitter, mini.opt.seed);
    RunOutcome o{optimize(mini.loss, mini.opt, p, mini.n, mini.d, &w), {},
                 mini.opt.seed};
    o.checks = run_checks(mini, o.result);
    return o;
  };

  Figure2Outcome f{
      execute(full),
      warm_run(coaxial_batches(base.n, base.batch_size, base.d)),
      warm_run(orthogonal_batches(base.n, base.batch_size, base.d)),
      {}};

  auto summary = [&](const std::string &name, const RunOutcome &o,
                     double var_target, double var_tol, bool upper_only) {
    const SimilarityStats s = similarity_stats(o.result.embeddings);
    CheckReport c;
    c.name = name;
    c.lhs = s.neg_var;
    c.rhs = var_target;
    c.tolerance = var_tol;
    c.margin = upper_only ? var_tol - s.neg_var
                          : var_tol - std::abs(s.neg_var - var_target);
    const double mean_err = std::abs(s.neg_mean - target);
    const bool converged = o.result.grad_norm <= kConvergedGradNorm;
    c.passed = c.margin >= 0 && mean_err <= base.check_tol &&
               (converged || base.allow_unconverged);
    c.details = "neg_mean=" + detail::fmt(s.neg_mean) +
                " neg_mean_err=" + detail::fmt(mean_err) +
                " grad_norm=" + detail::fmt(o.result.grad_norm);
    return c;
  };
  f.checks = {
      summary("figure2_full_batch", f.full, 0.0, base.check_full_var, true),
      summary("figure2_coaxial", f.coaxial, vb.upper, base.check_var_tol,
              false),
      summary("figure2_orthogonal", f.orthogonal, vb.lower,
              base.check_var_tol, false)};
  return f;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepPoint {
  double value = 0;
  SimilarityStats stats;
  std::vector<CheckReport> checks;
  bool passed = false;
  std::string error;
  std::optional<RunOutcome> outcome;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::BatchSize;
  std::vector<SweepPoint> points;
};

inline constexpr const char *kSweepHeader =
    "axis,value,pos_mean,neg_mean,neg_var,within_mean,passed_checks";

/// Configuration of sweep point k: the axis value replaces the base field and
/// the seed becomes seed + k.
inline ExperimentConfig sweep_point_config(const ExperimentConfig &base,
                                           SweepAxis axis, double value,
                                           std::size_t k) {
  ExperimentConfig c = base;
  c.opt.seed = base.opt.seed + k;
  switch (axis) {
  case SweepAxis::BatchSize: {
    if (!(value >= 1) || value != std::floor(value))
      throw ConfigError("batch_size value must be a positive integer");
    c.batch_size = static_cast<std::size_t>(value);
    if (c.batch_size > c.n || c.n % c.batch_size != 0)
      throw ConfigError("batch_size " + detail::fmt(value) +
                        " does not divide n=" + std::to_string(c.n));
    break;
  }
  case SweepAxis::Temperature:
    c.loss.temperature = value;
    break;
  case SweepAxis::Lambda:
    c.loss.vrns_lambda = value;
    break;
  }
  c.loss.validate();
  return c;
}

/// Independent seeded runs per axis value; failures are recorded per point.
inline SweepResult sweep(const ExperimentConfig &base, SweepAxis axis,
                         const std::vector<double> &values) {
  SweepResult res;
  res.axis = axis;
  res.points.resize(values.size());
  auto run_point = [&](std::size_t k) {
    SweepPoint &pt = res.points[k];
    pt.value = values[k];
    try {
      const ExperimentConfig c = sweep_point_config(base, axis, values[k], k);
      RunOutcome o = execute(c);
      pt.stats = similarity_stats(o.result.embeddings);
      pt.checks = o.checks;
      pt.passed = all_passed(o.checks);
      pt.outcome = std::move(o);
    } catch (const std::exception &e) {
      pt.error = e.what();
      pt.passed = false;
      pt.stats = {std::nan(""), std::nan(""), std::nan(""),
                  std::nan(""), std::nan(""), std::nan("")};
    }
  };
  const std::size_t workers =
      std::max<std::size_t>(1, std::min(base.workers, values.size()));
  if (workers == 1) {
    for (std::size_t k = 0; k < values.size(); ++k)
      run_point(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < values.size(); k += workers)
          run_point(k);
      });
    for (auto &th : pool)
      th.join();
  }
  return res;
}

inline void write_sweep_csv(std::ostream &os, const SweepResult &r) {
  os << kSweepHeader << '\n';
  for (const auto &p : r.points)
    os << to_string(r.axis) << ',' << format_g12(p.value) << ','
       << format_g12(p.stats.pos_mean) << ',' << format_g12(p.stats.neg_mean)
       << ',' << format_g12(p.stats.neg_var) << ','
       << format_g12(p.stats.within_mean) << ',' << (p.passed ? 1 : 0) << '\n';
}

struct SweepRow {
  std::string axis;
  double value = 0, pos_mean = 0, neg_mean = 0, neg_var = 0, within_mean = 0;
  bool passed_checks = false;
};

inline std::vector<SweepRow> read_sweep_csv(std::istream &is) {
  std::string line;
  if (!std::getline(is, line) || line != kSweepHeader)
    throw FormatError("sweep CSV: unexpected header");
  std::vector<SweepRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty())
      continue;
    std::vector<std::string> cells;
    std::stringstream in(line);
    std::string cell;
    while (std::getline(in, cell, ','))
      cells.push_back(cell);
    if (cells.size() != 7 || (cells[6] != "0" && cells[6] != "1"))
      throw FormatError("sweep CSV line " + std::to_string(line_no) +
                        ": malformed row");
    try {
      rows.push_back({cells[0], std::stod(cells[1]), std::stod(cells[2]),
                      std::stod(cells[3]), std::stod(cells[4]),
                      std::stod(cells[5]), cells[6] == "1"});
    } catch (const std::logic_error &) {
      throw FormatError("sweep CSV line " + std::to_string(line_no) +
                        ": malformed number");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Property battery
// ---------------------------------------------------------------------------

/// Aggregated outcome of one family of property checks.
struct BatteryLine {
  std::string name;
  std::size_t passed = 0;
  std::size_t total = 0;
  double worst_margin = std::numeric_limits<double>::infinity();
  std::string first_failure;

  explicit BatteryLine(std::string line_name) : name(std::move(line_name)) {}

  bool ok() const { return total > 0 && passed == total; }

  void add(const CheckReport &r, double margin) {
    ++total;
    if (r.passed)
      ++passed;
    else if (first_failure.empty())
      first_failure = r.name + ": " + r.details;
    worst_margin = std::min(worst_margin, margin);
  }
};

struct BatteryOptions {
  std::uint64_t seed = 0;
  std::optional<double> tolerance; // replaces every check's tolerance
  std::size_t lemma_instances = 1000;
  std::size_t fd_seeds = 20;
  std::size_t monotonicity_sets = 50;
  std::size_t mgf_samples = 1000000;
};

namespace detail {

/// Re-evaluates `passed` of a report whose margin is a residual magnitude.
inline CheckReport with_residual_tol(CheckReport r, std::optional<double> tol) {
  if (tol) {
    r.tolerance = *tol;
    r.passed = r.margin <= *tol;
  }
  return r;
}

inline std::vector<LossSpec> fd_loss_zoo(std::size_t n) {
  std::vector<LossSpec> zoo = {
      LossSpec::named(LossFamily::InfoNce, 0.5, n),
      LossSpec::named(LossFamily::SimClr, 0.5, n),
      LossSpec::named(LossFamily::Dcl, 0.5, n),
      LossSpec::named(LossFamily::Dhel, 0.5, n),
      LossSpec::named(LossFamily::SigLip, 2.0, n, -1.0),
      LossSpec::named(LossFamily::Spectral, 1.0, n),
      LossSpec::named(LossFamily::SimClr, 0.5, n, 0.0, 3.0),
  };
  LossSpec gi = LossSpec::named(LossFamily::GenericInfo, 0.5, n);
  gi.c1 = 1;
  gi.c2 = 1;
  gi.phi = maps::exp_scaled(0.5);
  gi.psi = maps::log1p();
  zoo.push_back(gi);
  LossSpec ga = LossSpec::named(LossFamily::GenericIndAdd, 1.0, n);
  ga.c1 = 1;
  ga.c2 = 1;
  ga.phi = maps::neg_softplus(2.0, 0.5);
  ga.psi = maps::square();
  zoo.push_back(ga);
  return zoo;
}

} // namespace detail

/// Runs the property battery: lemma suite, combined ETF, finite differences,
/// gradient monotonicity, MGF probe, condition agreement and variance-bound
/// monotonicity.
inline std::vector<BatteryLine> check_all(const BatteryOptions &o) {
  std::vector<BatteryLine> lines;
  std::mt19937_64 rng(o.seed);

  // identities and inequalities over fuzzed sets
  BatteryLine decomposition{"decomposition_identity"},
      overexpansion{"overexpansion_identity"}, ineq{"pos_neg_inequality"},
      ineq2{"pos_neg_inequality_v2"}, ineq3{"pos_neg_inequality_v3"},
      etf{"combined_etf_mean"};
  std::uniform_int_distribution<std::size_t> pick_n(2, 16), pick_d(2, 8);
  for (std::size_t k = 0; k < o.lemma_instances; ++k) {
    const EmbeddingSet e = random_embedding_set(pick_n(rng), pick_d(rng), rng);
    const CheckReport dec = detail::with_residual_tol(
        check_decomposition(e), o.tolerance);
    decomposition.add(dec, dec.tolerance - dec.margin);

    CheckReport ov = check_overexpansion(e, o.tolerance.value_or(1e-10));
    const auto terms =
        overexpansion_terms(e.u(), e.v(), similarity_stats(e));
    const double id_tol = o.tolerance.value_or(1e-10);
    ov.passed = ov.margin >= -id_tol && terms.identity_residual <= id_tol;
    overexpansion.add(ov, std::min(ov.margin, id_tol - terms.identity_residual));

    const double itol = o.tolerance.value_or(1e-10);
    for (auto [line, rep] :
         {std::pair{&ineq, check_pos_neg_inequality(e, itol)},
          std::pair{&ineq2, check_pos_neg_inequality_v2(e, itol)},
          std::pair{&ineq3, check_pos_neg_inequality_v3(e, itol)}})
      line->add(rep, rep.margin);

    std::uniform_int_distribution<std::size_t> pick_pq(2, 6);
    const std::size_t p = pick_pq(rng), q = pick_pq(rng);
    const std::size_t d = std::max(p, q) + pick_d(rng);
    const Matrix a = make_etf(p, d) * random_rotation(d, rng);
    const Matrix b = make_etf(q, d) * random_rotation(d, rng);
    const CheckReport ce = check_combined_etf(a, b, o.tolerance.value_or(1e-10));
    etf.add(ce, ce.tolerance - ce.margin);
  }
  for (auto *l : {&decomposition, &overexpansion, &ineq, &ineq2, &ineq3, &etf})
    lines.push_back(std::move(*l));

  // analytic gradients against central differences
  BatteryLine fd{"finite_difference_gradients"};
  for (std::size_t s = 0; s < o.fd_seeds; ++s)
    for (std::size_t n : {3u, 5u, 8u}) {
      const EmbeddingSet e = random_embedding_set(n, 4, rng);
      for (const LossSpec &spec : detail::fd_loss_zoo(n)) {
        const CheckReport r = finite_difference_check(
            spec, e, full_index(n), 1e-5, o.tolerance.value_or(1e-6));
        fd.add(r, r.margin);
      }
    }
  lines.push_back(std::move(fd));

  // gradient monotonicity in the prefix size
  BatteryLine mono{"gradient_monotonicity"};
  std::uniform_int_distribution<std::size_t> pick_mono(3, 16);
  for (std::size_t k = 0; k < o.monotonicity_sets; ++k) {
    const EmbeddingSet e = random_embedding_set(pick_mono(rng), 6, rng);
    CheckReport r = gradient_monotonicity_probe(e, 0.5, 20, o.seed + k);
    if (o.tolerance)
      r.passed = r.passed && r.margin > *o.tolerance;
    mono.add(r, r.margin);
  }
  lines.push_back(std::move(mono));

  // normal moment generating function
  BatteryLine mgf{"mgf_probe"};
  for (auto [mu, sigma] : {std::pair{-1.0 / 7.0, 0.05}, std::pair{0.0, 0.2},
                           std::pair{-0.3, 0.3}}) {
    const CheckReport r = mgf_probe(mu, sigma, o.mgf_samples,
                                    o.tolerance.value_or(5e-3), o.seed);
    mgf.add(r, r.tolerance - r.margin);
  }
  lines.push_back(std::move(mgf));

  // closed-form sigmoid condition against the derivative form
  BatteryLine cond{"sigmoid_condition_agreement"};
  const double ctol = o.tolerance.value_or(1e-10);
  for (std::size_t n : {3u, 4u, 8u, 16u, 64u})
    for (double t : {0.1, 1.0, 2.0, 5.0, 10.0, 20.0})
      for (double b : {-10.0, -5.0, -1.0, 0.0, 1.0, 3.0, 10.0}) {
        const ExcessCondition a = sigmoid_excess_condition(n, t, b);
        const ExcessCondition g = derivative_excess_condition(
            n, maps::neg_softplus(t, b),
            maps::softplus_weighted(t, b, static_cast<double>(n) - 1.0));
        CheckReport r;
        r.name = "sigmoid_condition";
        r.margin = std::abs(a.ratio - g.ratio) / std::max(1.0, a.ratio);
        r.passed = a.verdict == g.verdict && r.margin <= ctol;
        r.details = "n=" + std::to_string(n) + " t=" + detail::fmt(t) +
                    " b=" + detail::fmt(b);
        cond.add(r, ctol - r.margin);
      }
  lines.push_back(std::move(cond));

  // variance bounds strictly decrease in m and vanish at m = n
  BatteryLine vb{"variance_bounds_monotone"};
  for (std::size_t n : {4u, 8u, 12u, 16u, 32u, 64u}) {
    std::optional<VarianceBounds> prev;
    for (std::size_t m = 2; m <= n; ++m) {
      if (n % m)
        continue;
      const VarianceBounds cur = variance_bounds(n, m, n);
      CheckReport r;
      r.name = "variance_bounds";
      r.details = "n=" + std::to_string(n) + " m=" + std::to_string(m);
      r.margin = cur.upper - cur.lower;
      r.passed = cur.lower >= 0 && cur.lower <= cur.upper &&
                 (m != n || (cur.lower == 0 && cur.upper == 0));
      if (prev) {
        r.margin = std::min({prev->lower - cur.lower,
                             prev->upper - cur.upper, r.margin});
        r.passed = r.passed && cur.lower < prev->lower &&
                   cur.upper < prev->upper;
      }
      if (o.tolerance && m != n)
        r.passed = r.passed && r.margin > *o.tolerance;
      vb.add(r, r.margin);
      prev = cur;
    }
  }
  lines.push_back(std::move(vb));

  // rotation invariance of the similarity statistics
  BatteryLine rot{"rotation_invariance"};
  const double rtol = o.tolerance.value_or(1e-10);
  for (std::size_t k = 0; k < 100; ++k) {
    const std::size_t n = pick_n(rng), d = pick_d(rng);
    const EmbeddingSet e = random_embedding_set(n, d, rng);
    const Matrix q = random_rotation(d, rng);
    const SimilarityStats a = similarity_stats(e);
    const SimilarityStats b = similarity_stats(e.u() * q, e.v() * q);
    CheckReport r;
    r.name = "rotation_invariance";
    r.margin = std::max({std::abs(a.pos_mean - b.pos_mean),
                         std::abs(a.pos_var - b.pos_var),
                         std::abs(a.neg_mean - b.neg_mean),
                         std::abs(a.neg_var - b.neg_var),
                         std::abs(a.within_mean - b.within_mean),
                         std::abs(a.within_var - b.within_var)});
    r.passed = r.margin <= rtol;
    rot.add(r, rtol - r.margin);
  }
  lines.push_back(std::move(rot));
  return lines;
}

inline void print_battery(std::ostream &os,
                          const std::vector<BatteryLine> &lines) {
  os << std::left << std::setw(32) << "check" << std::setw(8) << "status"
     << std::setw(14) << "passed" << "worst_margin\n";
  for (const auto &l : lines) {
    os << std::left << std::setw(32) << l.name << std::setw(8)
       << (l.ok() ? "PASS" : "FAIL") << std::setw(14)
       << (std::to_string(l.passed) + "/" + std::to_string(l.total))
       << detail::fmt(l.worst_margin) << '\n';
    if (!l.first_failure.empty())
      os << "    first failure: " << l.first_failure << '\n';
  }
}

} // namespace simlab
