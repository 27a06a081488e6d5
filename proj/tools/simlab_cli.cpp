// simlab command-line front end: run, sweep, check-all, etf, grad-check.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "simlab/simlab.hpp"

namespace fs = std::filesystem;
using namespace simlab;

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::size_t> workers;
};

ConfigMap gather(const GlobalFlags &g) {
  ConfigMap m = g.config.empty() ? ConfigMap{} : load_config_file(g.config);
  for (const auto &s : g.sets)
    apply_override(m, s);
  if (g.seed)
    m["seed"] = std::to_string(*g.seed);
  if (!g.out.empty())
    m["output_dir"] = g.out;
  if (g.workers)
    m["workers"] = std::to_string(*g.workers);
  return m;
}

int checks_exit(const std::vector<CheckReport> &reports) {
  return all_passed(reports) ? kExitOk : kExitCheckFailure;
}

int run_sweep(const ExperimentConfig &c) {
  const SweepResult r = sweep(c, *c.sweep_axis, c.sweep_values);
  fs::create_directories(c.output_dir);
  for (std::size_t k = 0; k < r.points.size(); ++k) {
    const auto &pt = r.points[k];
    std::cout << to_string(r.axis) << "=" << format_g12(pt.value) << "  "
              << (pt.passed ? "PASS" : "FAIL") << "  neg_mean="
              << format_g12(pt.stats.neg_mean)
              << " neg_var=" << format_g12(pt.stats.neg_var) << '\n';
    if (!pt.error.empty())
      std::cout << "    error: " << pt.error << '\n';
    if (pt.outcome) {
      const ExperimentConfig pc =
          sweep_point_config(c, r.axis, pt.value, k);
      write_run_artifacts(c.output_dir / ("point_" + std::to_string(k)), pc,
                          *pt.outcome);
      print_checks(std::cout, pt.checks, "    ");
    }
  }
  std::ofstream csv(c.output_dir / "sweep.csv", std::ios::binary);
  if (!csv)
    throw Error("cannot write sweep.csv");
  write_sweep_csv(csv, r);
  for (const auto &pt : r.points)
    if (!pt.passed)
      return kExitCheckFailure;
  return kExitOk;
}

int run_figure2_preset(const ExperimentConfig &c) {
  const Figure2Outcome f = run_figure2(c);
  const std::pair<const char *, const RunOutcome *> parts[] = {
      {"full", &f.full}, {"coaxial", &f.coaxial}, {"orthogonal", &f.orthogonal}};
  std::vector<CheckReport> all = f.checks;
  for (auto [name, outcome] : parts) {
    ExperimentConfig pc = c;
    if (std::string(name) == "full")
      pc.batch_size = c.n;
    write_run_artifacts(c.output_dir / name, pc, *outcome);
    print_checks(std::cout, outcome->checks, std::string(name) + ": ");
    all.insert(all.end(), outcome->checks.begin(), outcome->checks.end());
  }
  print_checks(std::cout, f.checks);
  std::ofstream out(c.output_dir / "checks.json", std::ios::binary);
  if (!out)
    throw Error("cannot write checks.json");
  out << to_json(all).dump(2) << '\n';
  return checks_exit(all);
}

int cmd_run(const GlobalFlags &g) {
  const ExperimentConfig c = build_config(gather(g));
  if (c.preset == "figure2")
    return run_figure2_preset(c);
  if (c.sweep_axis)
    return run_sweep(c);
  const RunOutcome o = execute(c, c.workers);
  write_run_artifacts(c.output_dir, c, o);
  const SimilarityStats s = similarity_stats(o.result.embeddings);
  std::cout << "termination=" << to_string(o.result.reason)
            << " steps=" << o.result.steps
            << " loss=" << format_g12(o.result.final_loss)
            << " grad_norm=" << format_g12(o.result.grad_norm) << '\n'
            << "pos_mean=" << format_g12(s.pos_mean)
            << " neg_mean=" << format_g12(s.neg_mean)
            << " neg_var=" << format_g12(s.neg_var) << '\n';
  print_checks(std::cout, o.checks);
  if (o.result.reason == Termination::NonFinite) {
    std::cerr << "aborted: " << o.result.diagnostic << '\n';
    return kExitRuntimeAbort;
  }
  return checks_exit(o.checks);
}

int cmd_sweep(const GlobalFlags &g, const std::string &axis,
              const std::string &values) {
  ConfigMap m = gather(g);
  if (!axis.empty())
    m["sweep.axis"] = axis;
  if (!values.empty())
    m["sweep.values"] = values;
  const ExperimentConfig c = build_config(m);
  if (!c.sweep_axis)
    throw ConfigError("sweep.axis: required for the sweep command");
  return run_sweep(c);
}

int cmd_check_all(const GlobalFlags &g) {
  const ConfigMap m = gather(g);
  BatteryOptions o;
  if (auto it = m.find("seed"); it != m.end())
    o.seed = detail::parse_count("seed", it->second);
  if (auto it = m.find("check.tol"); it != m.end())
    o.tolerance = detail::parse_real("check.tol", it->second);
  const auto lines = check_all(o);
  print_battery(std::cout, lines);
  for (const auto &l : lines)
    if (!l.ok())
      return kExitCheckFailure;
  return kExitOk;
}

int cmd_etf(const GlobalFlags &g, std::optional<std::size_t> n,
            std::optional<std::size_t> d) {
  const ConfigMap m = gather(g);
  auto pick = [&](std::optional<std::size_t> flag, const char *key) {
    if (flag)
      return *flag;
    if (auto it = m.find(key); it != m.end())
      return detail::parse_count(key, it->second);
    throw ConfigError(std::string(key) + ": required for etf (use -n / -d)");
  };
  const Matrix x = make_etf(pick(n, "n"), pick(d, "d"));
  if (g.out.empty()) {
    write_matrix(std::cout, x, 'u');
  } else {
    std::ofstream out(g.out, std::ios::binary);
    if (!out)
      throw Error("cannot write '" + g.out + "'");
    write_matrix(out, x, 'u');
  }
  return kExitOk;
}

int cmd_grad_check(const GlobalFlags &g, double h, double tol) {
  ConfigMap m = gather(g);
  m.emplace("n", "5");
  m.emplace("d", "4");
  m.emplace("batch_size", m.at("n"));
  m.emplace("loss.family", "simclr");
  const ExperimentConfig c = build_config(m);
  std::mt19937_64 rng(c.opt.seed);
  const EmbeddingSet e = random_embedding_set(c.n, c.d, rng);
  const CheckReport r =
      finite_difference_check(c.loss, e, full_index(c.n), h, tol);
  print_checks(std::cout, {r});
  return r.passed ? kExitOk : kExitCheckFailure;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Contrastive-geometry laboratory: optimize unit-sphere "
               "embeddings and verify closed-form similarity results"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--out", g.out, "output directory (file for etf)");
  app.add_option("--set", g.sets, "override, key=value (repeatable)")
      ->allow_extra_args(false);
  app.add_option("--workers", g.workers, "concurrent runs");

  auto *run = app.add_subcommand("run", "optimize one configuration or preset");
  auto *sw = app.add_subcommand("sweep", "sweep batch_size, temperature or lambda");
  std::string axis, values;
  sw->add_option("--axis", axis, "batch_size | temperature | lambda");
  sw->add_option("--values", values, "comma-separated axis values");
  auto *ca = app.add_subcommand("check-all", "run the property battery");
  auto *etf = app.add_subcommand("etf", "emit a simplex ETF matrix file");
  std::optional<std::size_t> etf_n, etf_d;
  etf->add_option("-n", etf_n, "number of vectors");
  etf->add_option("-d", etf_d, "dimension");
  auto *gc = app.add_subcommand("grad-check",
                                "analytic gradient vs central differences");
  double h = 1e-5, tol = 1e-6;
  gc->add_option("--step", h, "finite-difference step");
  gc->add_option("--tol", tol, "maximum relative error");
  for (auto *sub : {run, sw, ca, etf, gc})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (*run)
      return cmd_run(g);
    if (*sw)
      return cmd_sweep(g, axis, values);
    if (*ca)
      return cmd_check_all(g);
    if (*etf)
      return cmd_etf(g, etf_n, etf_d);
    if (*gc)
      return cmd_grad_check(g, h, tol);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const FormatError &e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DimensionError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception &e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitRuntimeAbort;
  }
  return kExitConfigError;
}
