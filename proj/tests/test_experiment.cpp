#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "simlab/experiment.hpp"

using namespace simlab;
namespace fs = std::filesystem;

namespace {

ConfigMap base_map() {
  return {{"n", "4"}, {"d", "3"}, {"batch_size", "4"}, {"loss.family", "simclr"}};
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch_dir(const std::string &name) {
  const fs::path dir = fs::temp_directory_path() /
                       ("simlab_test_" + name + "_" +
                        std::to_string(::testing::UnitTest::GetInstance()
                                           ->random_seed()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string &args, const fs::path &log) {
  const std::string cmd = std::string("\"") + SIMLAB_CLI_PATH + "\" " + args +
                          " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Config, ParsesKeyValueLines) {
  std::istringstream in("# comment\n\nn = 8\n d=4 \nbatch_size = 2\n"
                        "loss.family = dcl\nloss.temperature = 0.5\n");
  const ConfigMap m = parse_config(in);
  EXPECT_EQ(m.at("n"), "8");
  EXPECT_EQ(m.at("d"), "4");
  const ExperimentConfig c = build_config(m);
  EXPECT_EQ(c.n, 8u);
  EXPECT_EQ(c.batch_size, 2u);
  EXPECT_EQ(c.loss.family, LossFamily::Dcl);
  EXPECT_DOUBLE_EQ(c.loss.temperature, 0.5);
  EXPECT_EQ(c.restarts, 5u);
}

TEST(Config, UnknownAndMalformedLines) {
  std::istringstream unknown("n = 4\nbogus = 1\n");
  EXPECT_THROW(parse_config(unknown), ConfigError);
  std::istringstream no_eq("n 4\n");
  EXPECT_THROW(parse_config(no_eq), ConfigError);
}

TEST(Config, MissingKeysReportedTogether) {
  try {
    build_config({{"n", "4"}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError &e) {
    const std::string msg = e.what();
    for (const char *k : {"d", "batch_size", "loss.family"})
      EXPECT_NE(msg.find(k), std::string::npos) << msg;
  }
}

TEST(Config, Defaults) {
  const ExperimentConfig c = build_config(base_map());
  EXPECT_DOUBLE_EQ(c.loss.temperature, 0.2);
  EXPECT_EQ(c.restarts, 1u);
  EXPECT_EQ(c.checks, std::vector<std::string>{"auto"});
  EXPECT_EQ(c.loss.n_global, 4u);
}

TEST(Config, OverridesWin) {
  ConfigMap m = base_map();
  apply_override(m, "loss.temperature=0.7");
  apply_override(m, "opt.max_steps = 12");
  const ExperimentConfig c = build_config(m);
  EXPECT_DOUBLE_EQ(c.loss.temperature, 0.7);
  EXPECT_EQ(c.opt.max_steps, 12u);
  EXPECT_THROW(apply_override(m, "novalue"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  auto with = [](const std::string &k, const std::string &v) {
    ConfigMap m = base_map();
    m[k] = v;
    return m;
  };
  EXPECT_THROW(build_config(with("batch_size", "3")), ConfigError);
  EXPECT_THROW(build_config(with("d", "1")), ConfigError);
  EXPECT_THROW(build_config(with("n", "abc")), ConfigError);
  EXPECT_THROW(build_config(with("loss.family", "nope")), ConfigError);
  EXPECT_THROW(build_config(with("loss.family", "generic-info")), ConfigError);
  EXPECT_THROW(build_config(with("loss.temperature", "-1")), ConfigError);
  EXPECT_THROW(build_config(with("opt.mode", "fast")), ConfigError);
  EXPECT_THROW(build_config(with("opt.init", "warm-start")), ConfigError);
  EXPECT_THROW(build_config(with("checks", "fullbatch,magic")), ConfigError);
  EXPECT_THROW(build_config(with("sweep.axis", "width")), ConfigError);
  EXPECT_THROW(build_config(with("sweep.axis", "temperature")), ConfigError);
  EXPECT_THROW(build_config(with("preset", "unknown")), ConfigError);
}

TEST(Config, PresetsFillOnlyMissingKeys) {
  const ExperimentConfig f = build_config({{"preset", "figure2"}});
  EXPECT_EQ(f.n, 4u);
  EXPECT_EQ(f.d, 3u);
  EXPECT_EQ(f.batch_size, 2u);
  const ExperimentConfig s =
      build_config({{"preset", "variance-sweep"}, {"n", "16"}, {"d", "16"},
                    {"batch_size", "16"}});
  EXPECT_EQ(s.n, 16u);
  ASSERT_TRUE(s.sweep_axis);
  EXPECT_EQ(*s.sweep_axis, SweepAxis::BatchSize);
  EXPECT_EQ(s.sweep_values.size(), 5u);
  const ExperimentConfig x = build_config({{"preset", "excess-separation"}});
  EXPECT_EQ(x.loss.family, LossFamily::SigLip);
  EXPECT_DOUBLE_EQ(x.loss.bias, -5.0);
  EXPECT_EQ(build_config({{"preset", "temperature-sweep"}}).sweep_values.size(),
            4u);
}

TEST(Config, LoadsFile) {
  const fs::path dir = scratch_dir("load");
  {
    std::ofstream out(dir / "c.cfg");
    out << "n = 6\nd = 3\nbatch_size = 3\nloss.family = info-nce\n";
  }
  const ExperimentConfig c = build_config(load_config_file(dir / "c.cfg"));
  EXPECT_EQ(c.n, 6u);
  EXPECT_THROW(load_config_file(dir / "missing.cfg"), ConfigError);
  fs::remove_all(dir);
}

TEST(WarmStarts, ReachTheVarianceBounds) {
  for (auto [n, m, d] : {std::tuple{4, 2, 3}, {8, 2, 4}, {8, 4, 6}}) {
    const auto vb = variance_bounds(n, m, d);
    const auto co = similarity_stats(coaxial_batches(n, m, d));
    const auto orth = similarity_stats(orthogonal_batches(n, m, d));
    EXPECT_NEAR(co.neg_var, vb.upper, 1e-12);
    EXPECT_NEAR(orth.neg_var, vb.lower, 1e-12);
    EXPECT_NEAR(co.neg_mean, -1.0 / (n - 1.0), 1e-12);
    EXPECT_NEAR(orth.neg_mean, -1.0 / (n - 1.0), 1e-12);
  }
  EXPECT_THROW(orthogonal_batches(8, 2, 3), DimensionError);
  EXPECT_THROW(coaxial_batches(8, 3, 3), ConfigError);
}

TEST(Jitter, DeterministicAndUnit) {
  const auto e = coaxial_batches(4, 2, 3);
  const auto a = jitter(e, 0.05, 7);
  const auto b = jitter(e, 0.05, 7);
  EXPECT_EQ(a.u(), b.u());
  EXPECT_NE(a.u(), e.u());
  for (Eigen::Index i = 0; i < 4; ++i)
    EXPECT_NEAR(a.u().row(i).norm(), 1.0, 1e-12);
  EXPECT_EQ(jitter(e, 0.0, 7).u(), e.u());
}

TEST(RunChecks, AutoSelection) {
  ConfigMap m = base_map();
  m["opt.max_steps"] = "5000";
  m["opt.step_size"] = "0.5";
  const ExperimentConfig c = build_config(m);
  const RunOutcome o = execute(c);
  ASSERT_EQ(o.checks.size(), 3u);
  EXPECT_EQ(o.checks[0].name, "convergence");
  EXPECT_EQ(o.checks[1].name, "fullbatch_optimum");
  EXPECT_EQ(o.checks[2].name, "overexpansion");
  EXPECT_TRUE(all_passed(o.checks));
}

TEST(RunChecks, UnconvergedRunOnlyReportsConvergence) {
  ConfigMap m = base_map();
  m["opt.max_steps"] = "3";
  const RunOutcome o = execute(build_config(m));
  ASSERT_EQ(o.checks.size(), 1u);
  EXPECT_FALSE(o.checks[0].passed);
  m["check.allow_unconverged"] = "true";
  const RunOutcome forced = execute(build_config(m));
  EXPECT_GT(forced.checks.size(), 1u);
  m["checks"] = "none";
  EXPECT_TRUE(execute(build_config(m)).checks.empty());
}

TEST(Sweep, CsvRoundTrip) {
  ConfigMap m = base_map();
  m["n"] = "8";
  m["d"] = "6";
  m["batch_size"] = "8";
  m["opt.step_size"] = "0.5";
  m["opt.max_steps"] = "4000";
  const ExperimentConfig c = build_config(m);
  const SweepResult r = sweep(c, SweepAxis::BatchSize, {2, 3, 8});
  ASSERT_EQ(r.points.size(), 3u);
  EXPECT_FALSE(r.points[1].error.empty());
  EXPECT_FALSE(r.points[1].passed);
  std::stringstream ss;
  write_sweep_csv(ss, r);
  const auto rows = read_sweep_csv(ss);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].axis, "batch_size");
  EXPECT_EQ(rows[2].value, 8.0);
  EXPECT_EQ(rows[2].passed_checks, r.points[2].passed);
  EXPECT_EQ(format_g12(rows[2].neg_var), format_g12(r.points[2].stats.neg_var));
  std::stringstream bad("axis,value\n");
  EXPECT_THROW(read_sweep_csv(bad), FormatError);
}

TEST(Sweep, SingleValueMatchesRun) {
  ConfigMap m = base_map();
  m["opt.max_steps"] = "500";
  m["seed"] = "3";
  const ExperimentConfig c = build_config(m);
  const SweepResult r = sweep(c, SweepAxis::Temperature, {0.2});
  const RunOutcome o = execute(c);
  ASSERT_TRUE(r.points[0].outcome);
  EXPECT_EQ(r.points[0].outcome->result.embeddings.u(), o.result.embeddings.u());
}

TEST(Sweep, WorkersDoNotChangeResults) {
  ConfigMap m = base_map();
  m["opt.max_steps"] = "300";
  ExperimentConfig c = build_config(m);
  const SweepResult a = sweep(c, SweepAxis::Temperature, {0.1, 0.3, 0.6});
  c.workers = 3;
  const SweepResult b = sweep(c, SweepAxis::Temperature, {0.1, 0.3, 0.6});
  for (std::size_t k = 0; k < 3; ++k)
    EXPECT_EQ(a.points[k].outcome->result.embeddings.u(),
              b.points[k].outcome->result.embeddings.u());
}

TEST(Figure2, ProducesThreeRegimes) {
  const Figure2Outcome f = run_figure2(build_config({{"preset", "figure2"}}));
  ASSERT_EQ(f.checks.size(), 3u);
  for (const auto &c : f.checks)
    EXPECT_TRUE(c.passed) << c.name << ": " << c.details;
  const auto co = similarity_stats(f.coaxial.result.embeddings);
  const auto orth = similarity_stats(f.orthogonal.result.embeddings);
  EXPECT_GT(co.neg_var, orth.neg_var);
}

TEST(Battery, SmallRunPasses) {
  BatteryOptions o;
  o.lemma_instances = 50;
  o.fd_seeds = 2;
  o.monotonicity_sets = 5;
  o.mgf_samples = 200000;
  for (const auto &l : check_all(o))
    EXPECT_TRUE(l.ok()) << l.name << ": " << l.first_failure;
}

TEST(Cli, RunWritesIdenticalArtifactsForSameSeed) {
  const fs::path dir = scratch_dir("cli_run");
  const std::string common =
      "--seed 4 --set n=4 --set d=3 --set batch_size=4 "
      "--set loss.family=simclr --set opt.max_steps=3000 ";
  ASSERT_EQ(run_cli(common + "--out \"" + (dir / "a").string() + "\" run",
                    dir / "a.log"),
            0)
      << slurp(dir / "a.log");
  ASSERT_EQ(run_cli(common + "--out \"" + (dir / "b").string() + "\" run",
                    dir / "b.log"),
            0);
  for (const char *f :
       {"trajectory.csv", "final_stats.json", "checks.json", "embeddings.txt"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli_codes");
  EXPECT_EQ(run_cli("run --set n=4", dir / "missing.log"), 2);
  EXPECT_NE(slurp(dir / "missing.log").find("batch_size"), std::string::npos);
  EXPECT_EQ(run_cli("run --set bogus=1", dir / "unknown.log"), 2);
  EXPECT_EQ(run_cli("--out \"" + (dir / "short").string() +
                        "\" run --set n=4 --set d=3 --set batch_size=4 "
                        "--set loss.family=simclr --set opt.max_steps=2",
                    dir / "short.log"),
            1);
  EXPECT_EQ(run_cli("--set check.tol=0 check-all", dir / "strict.log"), 1);
  EXPECT_EQ(run_cli("etf -n 4 -d 3", dir / "etf.log"), 0);
  std::ifstream etf(dir / "etf.log");
  const auto e = read_embeddings(etf);
  EXPECT_TRUE(is_etf(e.u()));
  EXPECT_EQ(run_cli("grad-check --set loss.family=dhel", dir / "gc.log"), 0)
      << slurp(dir / "gc.log");
  fs::remove_all(dir);
}
