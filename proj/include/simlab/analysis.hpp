#pragma once

/// Numerical checks of the closed-form optima, inequalities, identities and
/// hyperparameter conditions, each reported as a CheckReport.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "simlab/errors.hpp"
#include "simlab/losses.hpp"
#include "simlab/sphere.hpp"

namespace simlab {

struct CheckReport {
  std::string name;
  bool passed = false;
  double lhs = 0;
  double rhs = 0;
  double margin = 0;
  double tolerance = 0;
  std::string details;
};

inline nlohmann::json to_json(const CheckReport &r) {
  // NaN / inf are not representable in JSON; emit them as strings.
  auto num = [](double x) -> nlohmann::json {
    if (std::isfinite(x))
      return x;
    return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  };
  return {{"name", r.name},         {"passed", r.passed},
          {"lhs", num(r.lhs)},      {"rhs", num(r.rhs)},
          {"margin", num(r.margin)}, {"tolerance", num(r.tolerance)},
          {"details", r.details}};
}

inline nlohmann::json to_json(const std::vector<CheckReport> &reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto &r : reports)
    arr.push_back(to_json(r));
  return arr;
}

inline bool all_passed(const std::vector<CheckReport> &reports) {
  return std::all_of(reports.begin(), reports.end(),
                     [](const CheckReport &r) { return r.passed; });
}

// ---------------------------------------------------------------------------
// Mini-batch variance interval
// ---------------------------------------------------------------------------

struct VarianceBounds {
  double lower = 0;
  double upper = 0;
  std::size_t n = 0;
  std::size_t m = 0;
  bool dim_condition_met = false; // d >= b (m - 1)
};

/// Interval of negative-pair variances reachable by minimizers of the
/// fixed-batch objective with batch size m.
inline VarianceBounds variance_bounds(std::size_t n, std::size_t m,
                                      std::size_t d) {
  if (m < 2 || m > n)
    throw ConfigError("variance_bounds needs 2 <= m <= n (n=" +
                      std::to_string(n) + ", m=" + std::to_string(m) + ")");
  if (n % m != 0)
    throw ConfigError("variance_bounds needs m | n (n=" + std::to_string(n) +
                      ", m=" + std::to_string(m) + ")");
  const double nn = static_cast<double>(n);
  const double mm = static_cast<double>(m);
  const double base = (nn - mm) / ((mm - 1.0) * (nn - 1.0) * (nn - 1.0));
  VarianceBounds vb;
  vb.n = n;
  vb.m = m;
  vb.lower = base;
  vb.upper = nn * base;
  vb.dim_condition_met = d * m >= n * (m - 1);
  return vb;
}

// ---------------------------------------------------------------------------
// Optimum checks
// ---------------------------------------------------------------------------

/// Full-batch optimum: pos -> 1 and every negative pair -> -1/(n-1).
inline CheckReport check_fullbatch_optimum(const SimilarityStats &s,
                                           std::size_t n, double tol) {
  if (n < 2)
    throw IndexError("check_fullbatch_optimum needs n >= 2");
  const double target = -1.0 / (static_cast<double>(n) - 1.0);
  const double e_pos = std::abs(s.pos_mean - 1.0);
  const double e_neg = std::abs(s.neg_mean - target);
  CheckReport r;
  r.name = "fullbatch_optimum";
  r.lhs = s.neg_mean;
  r.rhs = target;
  r.tolerance = tol;
  r.margin = std::max({e_pos, e_neg, s.pos_var, s.neg_var});
  r.passed = e_pos <= tol && s.pos_var <= tol * tol && e_neg <= tol &&
             s.neg_var <= tol * tol;
  std::ostringstream os;
  os.precision(12);
  os << "pos_mean=" << s.pos_mean << " pos_var=" << s.pos_var
     << " neg_mean=" << s.neg_mean << " neg_var=" << s.neg_var
     << " (var bound " << tol * tol << ")";
  r.details = os.str();
  return r;
}

/// Equality residuals of the positive/negative inequality.
struct OverexpansionTerms {
  double r1 = 0; // trace of the population covariance of u_i - v_i
  double r2 = 0; // squared norm of the mean of u_i + v_i
  double identity_residual = 0;
  double printed_form_residual = 0;
};

inline OverexpansionTerms overexpansion_terms(const Matrix &u, const Matrix &v,
                                              const SimilarityStats &s) {
  const double n = static_cast<double>(u.rows());
  const Matrix diff = u - v;
  const Vector mean_diff = diff.colwise().mean();
  const Vector mean_sum = (u + v).colwise().mean();
  OverexpansionTerms t;
  t.r1 = diff.rowwise().squaredNorm().mean() - mean_diff.squaredNorm();
  t.r2 = mean_sum.squaredNorm();
  const double half = 0.5 * (t.r1 + t.r2);
  t.identity_residual = std::abs(1.0 - ((n - 2.0) / n) * s.pos_mean +
                                 (2.0 * (n - 1.0) / n) * s.neg_mean - half);
  t.printed_form_residual = std::abs(1.0 - ((n - 1.0) / n) * s.pos_mean +
                                     ((n - 1.0) / n) * s.neg_mean - half);
  return t;
}

/// pos_mean <= 1 + neg_mean + 1/(n-1), together with the exact identity
///   1 - ((n-2)/n) pos + (2(n-1)/n) neg = (r1 + r2) / 2.
/// The identity residual must stay below 1e-10.
inline CheckReport check_overexpansion(const EmbeddingSet &e, double tol) {
  if (e.n() < 2)
    throw IndexError("check_overexpansion needs n >= 2");
  constexpr double kIdentityTol = 1e-10;
  const SimilarityStats s = similarity_stats(e);
  const OverexpansionTerms t = overexpansion_terms(e.u(), e.v(), s);
  const double n = static_cast<double>(e.n());
  CheckReport r;
  r.name = "overexpansion";
  r.lhs = s.pos_mean;
  r.rhs = 1.0 + s.neg_mean + 1.0 / (n - 1.0);
  r.margin = r.rhs - r.lhs;
  r.tolerance = tol;
  r.passed = r.margin >= -tol && t.identity_residual <= kIdentityTol;
  std::ostringstream os;
  os.precision(12);
  os << "r1=" << t.r1 << " r2=" << t.r2
     << " identity_residual=" << t.identity_residual
     << " printed_form_residual=" << t.printed_form_residual;
  r.details = os.str();
  return r;
}

// ---------------------------------------------------------------------------
// Sigmoid loss hyperparameter condition
// ---------------------------------------------------------------------------

enum class ExcessClass { Excessive, Aligned, Boundary };

inline const char *to_string(ExcessClass c) {
  switch (c) {
  case ExcessClass::Excessive:
    return "excessive";
  case ExcessClass::Aligned:
    return "aligned";
  case ExcessClass::Boundary:
    return "boundary";
  }
  return "?";
}

struct ExcessCondition {
  ExcessClass verdict = ExcessClass::Boundary;
  double ratio = 0;     // L = (1 + e^{t/(n-1)+b}) / (1 + e^{t-b})
  double threshold = 0; // (n - 2) / 2
};

inline constexpr double kBoundaryTol = 1e-12;

inline ExcessClass classify_excess(double ratio, double threshold) {
  if (std::abs(ratio - threshold) <= kBoundaryTol)
    return ExcessClass::Boundary;
  return ratio < threshold ? ExcessClass::Excessive : ExcessClass::Aligned;
}

/// Sigmoid loss condition, evaluated as log L = softplus(t/(n-1)+b) -
/// softplus(t-b).
inline ExcessCondition sigmoid_excess_condition(std::size_t n, double t,
                                                double b) {
  if (n < 3)
    throw ConfigError("sigmoid_excess_condition needs n >= 3");
  if (!(t > 0))
    throw ConfigError("sigmoid_excess_condition needs t > 0");
  const double nn = static_cast<double>(n);
  const double log_ratio =
      maps::softplus(t / (nn - 1.0) + b) - maps::softplus(t - b);
  ExcessCondition c;
  c.ratio = std::exp(log_ratio);
  c.threshold = (nn - 2.0) / 2.0;
  c.verdict = classify_excess(c.ratio, c.threshold);
  return c;
}

/// General condition phi'(1) < ((n-2)/(2(n-1))) psi'(-1/(n-1)), expressed as
/// the same ratio (n-1) phi'(1) / psi'(-1/(n-1)) against (n-2)/2.
inline ExcessCondition derivative_excess_condition(std::size_t n,
                                                   const ScalarMap &phi,
                                                   const ScalarMap &psi) {
  if (n < 3)
    throw ConfigError("derivative_excess_condition needs n >= 3");
  const double nn = static_cast<double>(n);
  const double dphi = phi.derivative(1.0);
  const double dpsi = psi.derivative(-1.0 / (nn - 1.0));
  if (!(dpsi > 0))
    throw DomainError("psi'(-1/(n-1)) must be positive");
  ExcessCondition c;
  c.ratio = (nn - 1.0) * dphi / dpsi;
  c.threshold = (nn - 2.0) / 2.0;
  c.verdict = classify_excess(c.ratio, c.threshold);
  return c;
}

// ---------------------------------------------------------------------------
// Alignment and uniformity
// ---------------------------------------------------------------------------

/// Mean over positive pairs of |u_i - v_i|^2.
inline double alignment_metric(const EmbeddingSet &e) {
  return (e.u() - e.v()).rowwise().squaredNorm().mean();
}

/// log of the mean over all n^2 ordered (u_i, v_j) of exp(-|u_i - v_j|^2).
inline double uniformity_exact(const EmbeddingSet &e) {
  if (e.n() < 2)
    throw IndexError("uniformity needs n >= 2");
  // |u - v|^2 = 2 - 2 u.v on the sphere
  const Matrix s = e.u() * e.v().transpose();
  const Matrix z = (2.0 * s.array() - 2.0).matrix();
  const double mx = z.maxCoeff();
  const double sum = (z.array() - mx).exp().sum();
  return mx + std::log(sum / static_cast<double>(s.size()));
}

inline double uniformity_approx(const SimilarityStats &s) {
  return 2.0 * (s.neg_mean + s.neg_var - 1.0);
}

// ---------------------------------------------------------------------------
// Identity and inequality lemmas
// ---------------------------------------------------------------------------

namespace detail {

inline double off_diagonal_sum(const Matrix &g) {
  return g.sum() - g.trace();
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(12);
  os << x;
  return os.str();
}

/// Inequality lhs >= rhs whose slack is known in closed form.
inline CheckReport inequality_report(std::string name, double lhs, double rhs,
                                     double slack, double tol,
                                     const std::string &extra = {}) {
  CheckReport r;
  r.name = std::move(name);
  r.lhs = lhs;
  r.rhs = rhs;
  r.margin = lhs - rhs;
  r.tolerance = tol;
  const double slack_residual = std::abs(r.margin - slack);
  r.passed = r.margin >= -tol && slack_residual <= tol;
  r.details = "closed_form_slack=" + fmt(slack) +
              " slack_residual=" + fmt(slack_residual);
  if (!extra.empty())
    r.details += " " + extra;
  return r;
}

} // namespace detail

/// Decomposition of the all-pairs mean into positive and negative parts.
inline CheckReport check_decomposition(const EmbeddingSet &e,
                                       double tol = 1e-12) {
  const SimilarityStats s = similarity_stats(e);
  const double n = static_cast<double>(e.n());
  CheckReport r;
  r.name = "decomposition";
  r.lhs = all_pairs_mean(e.u(), e.v());
  r.rhs = s.pos_mean / n + ((n - 1.0) / n) * s.neg_mean;
  r.margin = std::abs(r.lhs - r.rhs);
  r.tolerance = tol;
  r.passed = r.margin <= tol;
  return r;
}

/// (1/(n(n-1))) sum_{i!=j} u_i.v_j >=
///   ((n-2)/(2n(n-1))) sum_i u_i.v_i - n/(2(n-1)).
inline CheckReport check_pos_neg_inequality(const EmbeddingSet &e,
                                            double tol = 1e-10) {
  const double n = static_cast<double>(e.n());
  const Matrix suv = e.u() * e.v().transpose();
  const double pos_sum = suv.trace();
  const double lhs = detail::off_diagonal_sum(suv) / (n * (n - 1.0));
  const double rhs =
      (n - 2.0) / (2.0 * n * (n - 1.0)) * pos_sum - n / (2.0 * (n - 1.0));
  const Matrix diff = e.u() - e.v();
  const double r1 = diff.rowwise().squaredNorm().mean() -
                    Vector(diff.colwise().mean()).squaredNorm();
  const double r2 = Vector((e.u() + e.v()).colwise().mean()).squaredNorm();
  const double slack = n / (4.0 * (n - 1.0)) * (r1 + r2);
  return detail::inequality_report("pos_neg_inequality", lhs, rhs, slack, tol,
                                   "r1=" + detail::fmt(r1) +
                                       " r2=" + detail::fmt(r2));
}

/// (1/(n(n-1))) sum_{i!=j} (u_i.u_j + v_i.v_j + 2 u_i.v_j) >=
///   -(2/(n(n-1))) sum_i u_i.v_i - 2/(n-1),
/// equality iff sum_i (u_i + v_i) = 0.
inline CheckReport check_pos_neg_inequality_v2(const EmbeddingSet &e,
                                               double tol = 1e-10) {
  const double n = static_cast<double>(e.n());
  const double norm = n * (n - 1.0);
  const Matrix &u = e.u();
  const Matrix &v = e.v();
  const Matrix suv = u * v.transpose();
  const double lhs = (detail::off_diagonal_sum(u * u.transpose()) +
                      detail::off_diagonal_sum(v * v.transpose()) +
                      2.0 * detail::off_diagonal_sum(suv)) /
                     norm;
  const double rhs = -2.0 * suv.trace() / norm - 2.0 / (n - 1.0);
  const double centroid = Vector((u + v).colwise().sum()).squaredNorm();
  return detail::inequality_report("pos_neg_inequality_v2", lhs, rhs,
                                   centroid / norm, tol,
                                   "|sum(u+v)|^2=" + detail::fmt(centroid));
}

/// (1/(n(n-1))) sum_{i!=j} (u_i.u_j + v_i.v_j) >= -2/(n-1),
/// equality iff sum_i u_i = sum_i v_i = 0.
inline CheckReport check_pos_neg_inequality_v3(const EmbeddingSet &e,
                                               double tol = 1e-10) {
  const double n = static_cast<double>(e.n());
  const double norm = n * (n - 1.0);
  const Matrix &u = e.u();
  const Matrix &v = e.v();
  const double lhs = (detail::off_diagonal_sum(u * u.transpose()) +
                      detail::off_diagonal_sum(v * v.transpose())) /
                     norm;
  const double rhs = -2.0 / (n - 1.0);
  const double cu = Vector(u.colwise().sum()).squaredNorm();
  const double cv = Vector(v.colwise().sum()).squaredNorm();
  return detail::inequality_report("pos_neg_inequality_v3", lhs, rhs,
                                   (cu + cv) / norm, tol,
                                   "|sum u|^2=" + detail::fmt(cu) +
                                       " |sum v|^2=" + detail::fmt(cv));
}

/// Decomposition identity, the three pos/neg inequalities and the
/// overexpansion inequality with its identity residual.
inline std::vector<CheckReport> lemma_suite(const EmbeddingSet &e) {
  if (e.n() < 2)
    throw IndexError("lemma_suite needs n >= 2");
  return {check_decomposition(e), check_pos_neg_inequality(e),
          check_pos_neg_inequality_v2(e), check_pos_neg_inequality_v3(e),
          check_overexpansion(e, 1e-10)};
}

/// combined_etf_mean(a, b) == -1/(p+q-1).
inline CheckReport check_combined_etf(const Matrix &a, const Matrix &b,
                                      double tol = 1e-10) {
  CheckReport r;
  r.name = "combined_etf_mean";
  r.lhs = combined_etf_mean(a, b);
  r.rhs = -1.0 / static_cast<double>(a.rows() + b.rows() - 1);
  r.margin = std::abs(r.lhs - r.rhs);
  r.tolerance = tol;
  r.passed = r.margin <= tol;
  r.details = "p=" + std::to_string(a.rows()) + " q=" + std::to_string(b.rows());
  return r;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// For `pairs` sampled (i, j), evaluates the InfoNCE negative-pair gradient at
/// every prefix size m = max(i,j)+1 .. n and requires nonnegative values that
/// strictly decrease in m. Margin is the smallest observed decrease.
inline CheckReport gradient_monotonicity_probe(const EmbeddingSet &e, double t,
                                               std::size_t pairs,
                                               std::uint64_t seed = 0) {
  const std::size_t n = e.n();
  if (n < 3)
    throw IndexError("gradient_monotonicity_probe needs n >= 3");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  CheckReport r;
  r.name = "gradient_monotonicity";
  r.passed = true;
  r.margin = std::numeric_limits<double>::infinity();
  r.lhs = std::numeric_limits<double>::infinity();
  std::size_t comparisons = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    std::size_t i = pick(rng), j = pick(rng);
    while (j == i)
      j = pick(rng);
    double prev = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t m = std::max(i, j) + 1; m <= n; ++m) {
      const double g = infonce_neg_pair_grad(e, i, j, t, m);
      r.lhs = std::min(r.lhs, g);
      if (!(g >= 0)) {
        r.passed = false;
        r.details += "negative value at (" + std::to_string(i) + "," +
                     std::to_string(j) + ") m=" + std::to_string(m) + "; ";
      }
      if (!std::isnan(prev)) {
        const double drop = prev - g;
        r.margin = std::min(r.margin, drop);
        ++comparisons;
        if (!(drop > 0)) {
          r.passed = false;
          r.details += "no strict decrease at (" + std::to_string(i) + "," +
                       std::to_string(j) + ") m=" + std::to_string(m) + "; ";
        }
      }
      prev = g;
    }
  }
  r.rhs = 0;
  r.tolerance = 0;
  r.details += "min_value=" + detail::fmt(r.lhs) +
               " comparisons=" + std::to_string(comparisons);
  return r;
}

/// Monte-Carlo check of log E[exp(2X)] = 2(mu + sigma^2) for normal X.
inline CheckReport mgf_probe(double mu, double sigma,
                             std::size_t samples = 1000000,
                             double tol = 5e-3, std::uint64_t seed = 0) {
  if (samples < 1)
    throw ConfigError("mgf_probe needs at least one sample");
  if (!(sigma >= 0))
    throw ConfigError("mgf_probe needs sigma >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> law(mu, sigma);
  std::vector<double> z(samples);
  for (auto &x : z)
    x = 2.0 * law(rng);
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0;
  for (double x : z)
    sum += std::exp(x - mx);
  CheckReport r;
  r.name = "mgf_probe";
  r.lhs = mx + std::log(sum / static_cast<double>(samples));
  r.rhs = 2.0 * (mu + sigma * sigma);
  r.margin = std::abs(r.lhs - r.rhs);
  r.tolerance = tol;
  r.passed = r.margin <= tol;
  r.details = "mu=" + detail::fmt(mu) + " sigma=" + detail::fmt(sigma) +
              " samples=" + std::to_string(samples);
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

/// Analytic ambient gradient against central differences of the total loss on
/// the given index set. The relative error is
///   max |analytic - fd| / max(max |fd|, 1e-12).
inline CheckReport finite_difference_check(const LossSpec &spec,
                                           const EmbeddingSet &e,
                                           const IndexSet &idx,
                                           double h = 1e-5,
                                           double tol = 1e-6) {
  const LossAndGrad analytic = evaluate(spec, e.u(), e.v(), idx);
  // gradient rows are packed in idx order
  Matrix u = e.u();
  Matrix v = e.v();
  double max_err = 0;
  double max_fd = 0;
  auto probe = [&](Matrix &x, const Matrix &g) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(idx[k]);
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double saved = x(row, c);
        x(row, c) = saved + h;
        const double up = evaluate(spec, u, v, idx).loss;
        x(row, c) = saved - h;
        const double down = evaluate(spec, u, v, idx).loss;
        x(row, c) = saved;
        const double fd = (up - down) / (2.0 * h);
        max_fd = std::max(max_fd, std::abs(fd));
        max_err = std::max(
            max_err, std::abs(g(static_cast<Eigen::Index>(k), c) - fd));
      }
    }
  };
  probe(u, analytic.grad.d_u);
  probe(v, analytic.grad.d_v);
  CheckReport r;
  r.name = std::string("finite_difference_") + to_string(spec.family);
  r.lhs = max_err / std::max(max_fd, 1e-12);
  r.rhs = tol;
  r.margin = tol - r.lhs;
  r.tolerance = tol;
  r.passed = r.lhs <= tol;
  r.details = "max_abs_err=" + detail::fmt(max_err) +
              " max_abs_fd=" + detail::fmt(max_fd) +
              " n=" + std::to_string(idx.size());
  return r;
}

} // namespace simlab
