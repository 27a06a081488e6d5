#pragma once

/// Projected (Riemannian) gradient descent over free unit-row embeddings under
/// full-batch or fixed mini-batch objectives.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "simlab/errors.hpp"
#include "simlab/losses.hpp"
#include "simlab/sphere.hpp"

namespace simlab {

/// Fixed contiguous partition I_k = {m k, ..., m k + m - 1} (zero-based).
struct BatchPartition {
  std::vector<IndexSet> blocks;
  std::size_t m = 0;
  std::size_t b = 0;

  std::size_t n() const noexcept { return m * b; }
};

inline BatchPartition partition_fixed(std::size_t n, std::size_t m) {
  if (m < 1 || m > n)
    throw ConfigError("batch size must satisfy 1 <= m <= n (m=" +
                      std::to_string(m) + ", n=" + std::to_string(n) + ")");
  if (n % m != 0)
    throw ConfigError("batch size " + std::to_string(m) +
                      " does not divide n=" + std::to_string(n));
  BatchPartition p;
  p.m = m;
  p.b = n / m;
  for (std::size_t k = 0; k < p.b; ++k) {
    IndexSet block(m);
    for (std::size_t i = 0; i < m; ++i)
      block[i] = k * m + i;
    p.blocks.push_back(std::move(block));
  }
  return p;
}

/// Sum of per-block total losses and the n x d ambient gradient.
inline LossAndGrad sum_batch_evaluate(const LossSpec &spec, const Matrix &u,
                                      const Matrix &v,
                                      const BatchPartition &p) {
  if (p.n() != static_cast<std::size_t>(u.rows()))
    throw ConfigError("partition covers " + std::to_string(p.n()) +
                      " instances but the embedding set has " +
                      std::to_string(u.rows()));
  LossAndGrad out{0.0, {Matrix::Zero(u.rows(), u.cols()),
                        Matrix::Zero(v.rows(), v.cols())}};
  for (const auto &block : p.blocks) {
    const LossAndGrad part = evaluate(spec, u, v, block);
    out.loss += part.loss;
    for (std::size_t k = 0; k < block.size(); ++k) {
      const auto r = static_cast<Eigen::Index>(block[k]);
      const auto kk = static_cast<Eigen::Index>(k);
      out.grad.d_u.row(r) += part.grad.d_u.row(kk);
      out.grad.d_v.row(r) += part.grad.d_v.row(kk);
    }
  }
  return out;
}

inline double sum_batch_loss(const LossSpec &spec, const EmbeddingSet &e,
                             const BatchPartition &p) {
  return sum_batch_evaluate(spec, e.u(), e.v(), p).loss;
}

enum class InitMode { RandomGaussian, WarmStart };
enum class StepMode { Summed, RoundRobin };

struct OptimizerConfig {
  double step_size = 0.5;
  std::size_t max_steps = 20000;
  double grad_tol = 1e-7;
  std::uint64_t seed = 0;
  InitMode init = InitMode::RandomGaussian;
  double noise_sigma = 0.0;
  std::size_t record_every = 100;
  StepMode mode = StepMode::Summed;
  /// Restarts with a halved step after a non-finite loss or gradient.
  std::size_t max_halvings = 10;

  void validate() const {
    if (!(step_size > 0))
      throw ConfigError("opt.step_size must be positive");
    if (!(grad_tol > 0))
      throw ConfigError("opt.grad_tol must be positive");
    if (max_steps < 1)
      throw ConfigError("opt.max_steps must be >= 1");
    if (!(noise_sigma >= 0))
      throw ConfigError("opt.noise_sigma must be nonnegative");
    if (record_every < 1)
      throw ConfigError("opt.record_every must be >= 1");
  }
};

struct TrajectoryRecord {
  std::size_t step = 0;
  double loss = 0;
  SimilarityStats stats;
  double grad_norm = 0;
};

enum class Termination { Converged, MaxSteps, NonFinite };

inline const char *to_string(Termination t) {
  switch (t) {
  case Termination::Converged:
    return "converged";
  case Termination::MaxSteps:
    return "max-steps";
  case Termination::NonFinite:
    return "non-finite";
  }
  return "?";
}

struct OptimizeResult {
  EmbeddingSet embeddings;
  std::vector<TrajectoryRecord> trajectory;
  Termination reason = Termination::MaxSteps;
  double final_loss = 0;
  double grad_norm = 0;
  std::size_t steps = 0;
  double step_size = 0;
  std::size_t halvings = 0;
  std::string diagnostic;
};

/// Called for every recorded step with the snapshot it describes.
using RecordObserver =
    std::function<void(const TrajectoryRecord &, const Matrix &, const Matrix &)>;

/// Frobenius norm of the tangential gradient over all 2n rows.
inline double tangential_norm(const GradPair &g, const Matrix &u,
                              const Matrix &v) {
  const double a = tangential(g.d_u, u).squaredNorm();
  const double b = tangential(g.d_v, v).squaredNorm();
  return std::sqrt(a + b);
}

namespace detail {

inline bool all_finite(const Matrix &m) { return m.allFinite(); }

} // namespace detail

/// Minimises the summed fixed-batch objective by
///   x <- project_rows(x - step * tangential_grad(x))
/// on all 2n rows at once. Stops when the tangential gradient norm of the
/// summed objective is <= grad_tol or after max_steps updates.
inline OptimizeResult optimize(const LossSpec &spec, const OptimizerConfig &cfg,
                               const BatchPartition &p, std::size_t n,
                               std::size_t d,
                               const EmbeddingSet *warm_start = nullptr,
                               const RecordObserver &observer = {}) {
  spec.validate();
  cfg.validate();
  if (d < 2)
    throw ConfigError("optimization needs d >= 2");
  if (p.n() != n)
    throw ConfigError("partition is inconsistent with n=" + std::to_string(n));
  if (cfg.init == InitMode::WarmStart) {
    if (!warm_start)
      throw ConfigError("warm-start initialisation needs an embedding set");
    if (warm_start->n() != n || warm_start->d() != d)
      throw ConfigError("warm-start embedding shape does not match (n, d)");
  }

  double step = cfg.step_size;
  std::string diagnostic;
  std::optional<OptimizeResult> last_abort;
  for (std::size_t attempt = 0; attempt <= cfg.max_halvings; ++attempt) {
    std::mt19937_64 rng(cfg.seed);
    Matrix u, v;
    if (cfg.init == InitMode::WarmStart) {
      u = warm_start->u();
      v = warm_start->v();
    } else {
      u = random_unit_rows(n, d, rng);
      v = random_unit_rows(n, d, rng);
    }
    std::normal_distribution<double> noise(0.0, 1.0);

    std::vector<TrajectoryRecord> trajectory;
    auto record = [&](std::size_t k, double loss, double gnorm) {
      TrajectoryRecord r{k, loss, similarity_stats(u, v), gnorm};
      if (observer)
        observer(r, u, v);
      trajectory.push_back(r);
    };

    bool non_finite = false;
    for (std::size_t k = 0;; ++k) {
      const LossAndGrad full = sum_batch_evaluate(spec, u, v, p);
      if (!std::isfinite(full.loss) || !detail::all_finite(full.grad.d_u) ||
          !detail::all_finite(full.grad.d_v)) {
        non_finite = true;
        diagnostic = "non-finite loss or gradient at step " +
                     std::to_string(k) + " with step size " +
                     std::to_string(step);
        break;
      }
      const double gnorm = tangential_norm(full.grad, u, v);
      const bool converged = gnorm <= cfg.grad_tol;
      const bool exhausted = k >= cfg.max_steps;
      if (converged || exhausted || k % cfg.record_every == 0)
        record(k, full.loss, gnorm);
      if (converged || exhausted) {
        OptimizeResult out{EmbeddingSet(u, v),
                           std::move(trajectory),
                           converged ? Termination::Converged
                                     : Termination::MaxSteps,
                           full.loss,
                           gnorm,
                           k,
                           step,
                           attempt,
                           {}};
        return out;
      }

      GradPair g;
      if (cfg.mode == StepMode::RoundRobin && p.b > 1) {
        const IndexSet &block = p.blocks[k % p.b];
        const LossAndGrad part = evaluate(spec, u, v, block);
        g.d_u = Matrix::Zero(u.rows(), u.cols());
        g.d_v = Matrix::Zero(v.rows(), v.cols());
        for (std::size_t i = 0; i < block.size(); ++i) {
          const auto r = static_cast<Eigen::Index>(block[i]);
          g.d_u.row(r) = part.grad.d_u.row(static_cast<Eigen::Index>(i));
          g.d_v.row(r) = part.grad.d_v.row(static_cast<Eigen::Index>(i));
        }
      } else {
        g = full.grad;
      }
      Matrix next_u = u - step * tangential(g.d_u, u);
      Matrix next_v = v - step * tangential(g.d_v, v);
      if (cfg.noise_sigma > 0)
        for (Eigen::Index i = 0; i < next_v.rows(); ++i)
          for (Eigen::Index j = 0; j < next_v.cols(); ++j)
            next_v(i, j) += cfg.noise_sigma * noise(rng);
      try {
        u = project_rows(next_u);
        v = project_rows(next_v);
      } catch (const ZeroRowError &err) {
        non_finite = true;
        diagnostic = std::string("degenerate update: ") + err.what();
        break;
      }
    }
    if (non_finite) {
      // keep the last diagnostic record; retry with a smaller step
      last_abort = OptimizeResult{EmbeddingSet(u, v),
                                  std::move(trajectory),
                                  Termination::NonFinite,
                                  std::numeric_limits<double>::quiet_NaN(),
                                  std::numeric_limits<double>::quiet_NaN(),
                                  0,
                                  step,
                                  attempt,
                                  diagnostic};
      step *= 0.5;
    }
  }
  return std::move(*last_abort);
}

/// Independent runs with seeds seed, seed+1, ...; returns the lowest final
/// loss among finished runs. Runs are spread over `workers` threads and merged
/// by restart index, so the outcome does not depend on `workers`.
inline OptimizeResult optimize_best_of(const LossSpec &spec,
                                       const OptimizerConfig &cfg,
                                       const BatchPartition &p, std::size_t n,
                                       std::size_t d, std::size_t restarts,
                                       std::size_t workers = 1,
                                       const EmbeddingSet *warm_start = nullptr) {
  if (restarts < 1)
    throw ConfigError("restarts must be >= 1");
  std::vector<std::optional<OptimizeResult>> results(restarts);
  std::vector<std::exception_ptr> errors(restarts);
  auto run_one = [&](std::size_t r) {
    try {
      OptimizerConfig c = cfg;
      c.seed = cfg.seed + r;
      results[r] = optimize(spec, c, p, n, d, warm_start);
    } catch (...) {
      errors[r] = std::current_exception();
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, restarts));
  if (workers == 1) {
    for (std::size_t r = 0; r < restarts; ++r)
      run_one(r);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t r = w; r < restarts; r += workers)
          run_one(r);
      });
    for (auto &th : pool)
      th.join();
  }
  for (auto &err : errors)
    if (err)
      std::rethrow_exception(err);
  std::size_t best = 0;
  for (std::size_t r = 1; r < restarts; ++r) {
    const auto &cand = *results[r];
    const auto &cur = *results[best];
    const bool cand_ok = cand.reason != Termination::NonFinite;
    const bool cur_ok = cur.reason != Termination::NonFinite;
    if ((cand_ok && !cur_ok) ||
        (cand_ok == cur_ok && cand.final_loss < cur.final_loss))
      best = r;
  }
  return std::move(*results[best]);
}

// ---------------------------------------------------------------------------
// Trajectory CSV
// ---------------------------------------------------------------------------

inline constexpr const char *kTrajectoryHeader =
    "step,loss,pos_mean,pos_var,neg_mean,neg_var,within_mean,within_var,"
    "grad_norm";

/// Decimal with 12 significant digits.
inline std::string format_g12(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

inline void write_trajectory_csv(std::ostream &os,
                                 const std::vector<TrajectoryRecord> &rows) {
  os << kTrajectoryHeader << '\n';
  for (const auto &r : rows) {
    os << r.step << ',' << format_g12(r.loss) << ','
       << format_g12(r.stats.pos_mean) << ',' << format_g12(r.stats.pos_var)
       << ',' << format_g12(r.stats.neg_mean) << ','
       << format_g12(r.stats.neg_var) << ',' << format_g12(r.stats.within_mean)
       << ',' << format_g12(r.stats.within_var) << ','
       << format_g12(r.grad_norm) << '\n';
  }
}

inline std::vector<TrajectoryRecord> read_trajectory_csv(std::istream &is) {
  std::string line;
  if (!std::getline(is, line) || line != kTrajectoryHeader)
    throw FormatError("trajectory CSV: unexpected header");
  std::vector<TrajectoryRecord> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty())
      continue;
    std::istringstream in(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(in, cell, ','))
      cells.push_back(cell);
    if (cells.size() != 9)
      throw FormatError("trajectory CSV line " + std::to_string(line_no) +
                        ": expected 9 fields");
    try {
      TrajectoryRecord r;
      r.step = std::stoull(cells[0]);
      r.loss = std::stod(cells[1]);
      r.stats.pos_mean = std::stod(cells[2]);
      r.stats.pos_var = std::stod(cells[3]);
      r.stats.neg_mean = std::stod(cells[4]);
      r.stats.neg_var = std::stod(cells[5]);
      r.stats.within_mean = std::stod(cells[6]);
      r.stats.within_var = std::stod(cells[7]);
      r.grad_norm = std::stod(cells[8]);
      rows.push_back(r);
    } catch (const std::logic_error &) {
      throw FormatError("trajectory CSV line " + std::to_string(line_no) +
                        ": malformed number");
    }
  }
  return rows;
}

} // namespace simlab
