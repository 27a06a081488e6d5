#pragma once

/// Contrastive loss families with analytic gradients.
///
/// Every loss here is a function of the three similarity blocks of the
/// evaluated index set: S_uv(i,j) = u_i.v_j, S_uu(i,j) = u_i.u_j and
/// S_vv(i,j) = v_i.v_j (off-diagonal entries only for S_uu and S_vv). The
/// "core" routines return the loss together with dL/dS; the embedding-level
/// routines chain those into ambient-space gradients:
///
///   dL/du_i = sum_j G_uv(i,j) v_j + sum_j (G_uu(i,j) + G_uu(j,i)) u_j
///   dL/dv_j = sum_i G_uv(i,j) u_i + sum_i (G_vv(i,j) + G_vv(j,i)) v_i

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "simlab/errors.hpp"
#include "simlab/sphere.hpp"

namespace simlab {

enum class LossFamily {
  InfoNce,
  SimClr,
  Dcl,
  Dhel,
  SigLip,
  Spectral,
  GenericInfo,
  GenericIndAdd,
};

inline const char *to_string(LossFamily f) {
  switch (f) {
  case LossFamily::InfoNce:
    return "info-nce";
  case LossFamily::SimClr:
    return "simclr";
  case LossFamily::Dcl:
    return "dcl";
  case LossFamily::Dhel:
    return "dhel";
  case LossFamily::SigLip:
    return "siglip";
  case LossFamily::Spectral:
    return "spectral";
  case LossFamily::GenericInfo:
    return "generic-info";
  case LossFamily::GenericIndAdd:
    return "generic-ind-add";
  }
  return "?";
}

inline LossFamily parse_loss_family(const std::string &name) {
  for (auto f : {LossFamily::InfoNce, LossFamily::SimClr, LossFamily::Dcl,
                 LossFamily::Dhel, LossFamily::SigLip, LossFamily::Spectral,
                 LossFamily::GenericInfo, LossFamily::GenericIndAdd})
    if (name == to_string(f))
      return f;
  throw ConfigError("unknown loss family '" + name + "'");
}

/// Families of the softmax (InfoNCE-shaped) form.
inline bool is_info_family(LossFamily f) {
  return f == LossFamily::InfoNce || f == LossFamily::SimClr ||
         f == LossFamily::Dcl || f == LossFamily::Dhel ||
         f == LossFamily::GenericInfo;
}

/// Families of the independently additive form.
inline bool is_ind_add_family(LossFamily f) { return !is_info_family(f); }

/// (c1, c2) fixed by the named instantiations; nullopt for the generic ones.
inline std::optional<std::pair<int, int>> pinned_selectors(LossFamily f) {
  switch (f) {
  case LossFamily::InfoNce:
    return std::pair{1, 0};
  case LossFamily::SimClr:
  case LossFamily::Dcl:
    return std::pair{1, 1};
  case LossFamily::Dhel:
    return std::pair{0, 1};
  case LossFamily::SigLip:
  case LossFamily::Spectral:
    return std::pair{1, 0};
  default:
    return std::nullopt;
  }
}

/// A smooth scalar map with its derivative, used by the generic families.
struct ScalarMap {
  std::string name;
  std::function<double(double)> value;
  std::function<double(double)> derivative;
};

namespace maps {

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) {
  if (z >= 0)
    return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline ScalarMap exp_scaled(double t) {
  return {"exp", [t](double x) { return std::exp(x / t); },
          [t](double x) { return std::exp(x / t) / t; }};
}
inline ScalarMap linear() {
  return {"linear", [](double x) { return x; }, [](double) { return 1.0; }};
}
inline ScalarMap square() {
  return {"square", [](double x) { return x * x; },
          [](double x) { return 2 * x; }};
}
inline ScalarMap log1p() {
  return {"log1p",
          [](double x) {
            if (!(x > -1))
              throw DomainError("log1p map: argument " + std::to_string(x) +
                                " <= -1");
            return std::log1p(x);
          },
          [](double x) { return 1.0 / (1.0 + x); }};
}
inline ScalarMap log() {
  return {"log",
          [](double x) {
            if (!(x > 0))
              throw DomainError("log map: nonpositive argument " +
                                std::to_string(x));
            return std::log(x);
          },
          [](double x) { return 1.0 / x; }};
}
/// -log(1 + exp(-t x + b)): the positive-pair map of the sigmoid loss.
inline ScalarMap neg_softplus(double t, double b) {
  return {"neg-softplus", [t, b](double x) { return -softplus(-t * x + b); },
          [t, b](double x) { return t * sigmoid(-t * x + b); }};
}
/// w * log(1 + exp(t x - b)): the negative-pair map of the sigmoid loss.
inline ScalarMap softplus_weighted(double t, double b, double w) {
  return {"softplus", [t, b, w](double x) { return w * softplus(t * x - b); },
          [t, b, w](double x) { return w * t * sigmoid(t * x - b); }};
}

} // namespace maps

/// Loss configuration. Named families pin (c1, c2); the generic families take
/// their maps from `phi` / `psi`.
struct LossSpec {
  LossFamily family = LossFamily::InfoNce;
  int c1 = 1;
  int c2 = 0;
  double temperature = 1.0;
  double bias = 0.0;
  double vrns_lambda = 0.0;
  std::size_t n_global = 2;
  /// Overrides the (n_global - 1) weight inside the sigmoid negative map.
  std::optional<double> siglip_weight;
  std::optional<ScalarMap> phi;
  std::optional<ScalarMap> psi;

  /// Named family with its pinned selectors.
  static LossSpec named(LossFamily family, double temperature,
                        std::size_t n_global, double bias = 0.0,
                        double vrns_lambda = 0.0) {
    LossSpec s;
    s.family = family;
    if (auto sel = pinned_selectors(family))
      std::tie(s.c1, s.c2) = *sel;
    s.temperature = temperature;
    s.bias = bias;
    s.vrns_lambda = vrns_lambda;
    s.n_global = n_global;
    return s;
  }

  double sigmoid_weight() const {
    return siglip_weight.value_or(static_cast<double>(n_global) - 1.0);
  }

  void validate() const {
    const bool valid_sel =
        (c1 == 0 && c2 == 1) || (c1 == 1 && c2 == 0) || (c1 == 1 && c2 == 1);
    if (!valid_sel)
      throw ConfigError("(c1, c2) must be one of (0,1), (1,0), (1,1); got (" +
                        std::to_string(c1) + "," + std::to_string(c2) + ")");
    if (auto sel = pinned_selectors(family);
        sel && *sel != std::pair{c1, c2})
      throw ConfigError(std::string("family ") + to_string(family) +
                        " pins (c1,c2) = (" + std::to_string(sel->first) +
                        "," + std::to_string(sel->second) + ")");
    if (!(temperature > 0))
      throw ConfigError("temperature must be positive");
    if (!(vrns_lambda >= 0))
      throw ConfigError("vrns_lambda must be nonnegative");
    if (n_global < 1)
      throw ConfigError("n_global must be positive");
    if (family == LossFamily::GenericInfo ||
        family == LossFamily::GenericIndAdd) {
      if (!phi || !psi || !phi->value || !phi->derivative || !psi->value ||
          !psi->derivative)
        throw ConfigError(std::string(to_string(family)) +
                          " requires both phi and psi maps");
    }
  }
};

/// Ambient-space gradient with respect to the rows of the evaluated block.
struct GradPair {
  Matrix d_u;
  Matrix d_v;
};

/// Loss value plus dL/dS for the three similarity blocks.
struct SimilarityGrad {
  double loss = 0;
  Matrix g_uv;
  Matrix g_uu;
  Matrix g_vv;
};

/// Similarity blocks of an index set.
struct SimilarityBlocks {
  Matrix suv, suu, svv;
};

namespace detail {

inline void check_index_set(const IndexSet &idx, std::size_t n,
                            std::size_t min_size) {
  if (idx.size() < min_size)
    throw IndexError("index set must contain at least " +
                     std::to_string(min_size) + " indices");
  std::vector<bool> seen(n, false);
  for (auto i : idx) {
    if (i >= n)
      throw IndexError("index " + std::to_string(i) + " out of range [0, " +
                       std::to_string(n) + ")");
    if (seen[i])
      throw IndexError("duplicate index " + std::to_string(i));
    seen[i] = true;
  }
}

inline Matrix gather_rows(const Matrix &m, const IndexSet &idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) =
        m.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

inline SimilarityGrad zero_grad(Eigen::Index m) {
  return {0.0, Matrix::Zero(m, m), Matrix::Zero(m, m), Matrix::Zero(m, m)};
}

/// One softmax-style row: a list of (argument, target entry) pairs. The
/// log-sum-exp is max-shifted; an optional implicit zero argument models the
/// "1 +" inside log(1 + x).
struct LseTerm {
  double arg;
  Matrix *target;
  Eigen::Index r, c;
};

inline double accumulate_lse_row(const std::vector<LseTerm> &terms,
                                 bool include_one, double scale, double t,
                                 Matrix &g_uv, Eigen::Index i) {
  if (terms.empty() && !include_one)
    throw DomainError("log of an empty sum (no negative pairs selected)");
  double mx = include_one ? 0.0 : -std::numeric_limits<double>::infinity();
  for (const auto &term : terms)
    mx = std::max(mx, term.arg);
  double sum = include_one ? std::exp(-mx) : 0.0;
  for (const auto &term : terms)
    sum += std::exp(term.arg - mx);
  const double lse = mx + std::log(sum);
  if (!std::isfinite(lse))
    throw DomainError("non-finite log-sum-exp");
  for (const auto &term : terms) {
    const double w = std::exp(term.arg - lse) * scale / t;
    (*term.target)(term.r, term.c) += w;
    g_uv(i, i) -= w;
  }
  return scale * lse;
}

} // namespace detail

/// Similarity blocks of `idx` (in index-set order).
inline SimilarityBlocks similarity_blocks(const Matrix &u, const Matrix &v,
                                          const IndexSet &idx) {
  const Matrix ub = detail::gather_rows(u, idx);
  const Matrix vb = detail::gather_rows(v, idx);
  return {ub * vb.transpose(), ub * ub.transpose(), vb * vb.transpose()};
}

/// Symmetric InfoNCE-shaped loss on precomputed similarity blocks.
inline SimilarityGrad info_sym_core(const LossSpec &spec,
                                    const SimilarityBlocks &s) {
  const Eigen::Index m = s.suv.rows();
  SimilarityGrad out = detail::zero_grad(m);
  const double scale = 0.5 / static_cast<double>(m);
  const bool c1 = spec.c1 != 0, c2 = spec.c2 != 0;

  if (spec.family == LossFamily::GenericInfo) {
    const ScalarMap &phi = *spec.phi;
    const ScalarMap &psi = *spec.psi;
    // direction 0: anchor u_i against v_j (cross) and u_j (within)
    // direction 1: anchor v_i against u_j (cross) and v_j (within)
    for (int dir = 0; dir < 2; ++dir) {
      const Matrix &within = dir == 0 ? s.suu : s.svv;
      Matrix &g_within = dir == 0 ? out.g_uu : out.g_vv;
      for (Eigen::Index i = 0; i < m; ++i) {
        const double pos = s.suv(i, i);
        double x = 0;
        for (Eigen::Index j = 0; j < m; ++j) {
          if (j == i)
            continue;
          const double cross = dir == 0 ? s.suv(i, j) : s.suv(j, i);
          if (c1)
            x += phi.value(cross - pos);
          if (c2)
            x += phi.value(within(i, j) - pos);
        }
        const double value = psi.value(x);
        if (!std::isfinite(value))
          throw DomainError("psi(" + std::to_string(x) + ") is not finite");
        out.loss += scale * value;
        const double dpsi = scale * psi.derivative(x);
        for (Eigen::Index j = 0; j < m; ++j) {
          if (j == i)
            continue;
          if (c1) {
            const double cross = dir == 0 ? s.suv(i, j) : s.suv(j, i);
            const double w = dpsi * phi.derivative(cross - pos);
            (dir == 0 ? out.g_uv(i, j) : out.g_uv(j, i)) += w;
            out.g_uv(i, i) -= w;
          }
          if (c2) {
            const double w = dpsi * phi.derivative(within(i, j) - pos);
            g_within(i, j) += w;
            out.g_uv(i, i) -= w;
          }
        }
      }
    }
    return out;
  }

  // Named families: phi(x) = exp(x / t); psi = log(1 + x) or log(x).
  const double t = spec.temperature;
  const bool include_one =
      spec.family == LossFamily::InfoNce || spec.family == LossFamily::SimClr;
  std::vector<detail::LseTerm> terms;
  terms.reserve(static_cast<std::size_t>(2 * m));
  for (int dir = 0; dir < 2; ++dir) {
    const Matrix &within = dir == 0 ? s.suu : s.svv;
    Matrix &g_within = dir == 0 ? out.g_uu : out.g_vv;
    for (Eigen::Index i = 0; i < m; ++i) {
      terms.clear();
      const double pos = s.suv(i, i);
      for (Eigen::Index j = 0; j < m; ++j) {
        if (j == i)
          continue;
        if (c1) {
          if (dir == 0)
            terms.push_back({(s.suv(i, j) - pos) / t, &out.g_uv, i, j});
          else
            terms.push_back({(s.suv(j, i) - pos) / t, &out.g_uv, j, i});
        }
        if (c2)
          terms.push_back({(within(i, j) - pos) / t, &g_within, i, j});
      }
      out.loss +=
          detail::accumulate_lse_row(terms, include_one, scale, t, out.g_uv, i);
    }
  }
  return out;
}

/// Independently additive loss on precomputed similarity blocks. A block of a
/// single instance carries only the positive term.
inline SimilarityGrad ind_add_core(const LossSpec &spec,
                                   const SimilarityBlocks &s) {
  const Eigen::Index m = s.suv.rows();
  SimilarityGrad out = detail::zero_grad(m);

  ScalarMap phi, psi;
  switch (spec.family) {
  case LossFamily::SigLip:
    phi = maps::neg_softplus(spec.temperature, spec.bias);
    psi = maps::softplus_weighted(spec.temperature, spec.bias,
                                  spec.sigmoid_weight());
    break;
  case LossFamily::Spectral:
    phi = maps::linear();
    psi = maps::square();
    break;
  case LossFamily::GenericIndAdd:
    phi = *spec.phi;
    psi = *spec.psi;
    break;
  default:
    throw ConfigError(std::string(to_string(spec.family)) +
                      " is not an independently additive family");
  }

  const double md = static_cast<double>(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    out.loss -= phi.value(s.suv(i, i)) / md;
    out.g_uv(i, i) -= phi.derivative(s.suv(i, i)) / md;
  }
  if (m < 2)
    return out;
  const double cross_w = spec.c1 / (md * (md - 1));
  const double within_w = spec.c2 / (2 * md * (md - 1));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == j)
        continue;
      if (cross_w != 0) {
        out.loss += cross_w * psi.value(s.suv(i, j));
        out.g_uv(i, j) += cross_w * psi.derivative(s.suv(i, j));
      }
      if (within_w != 0) {
        out.loss += within_w * (psi.value(s.suu(i, j)) + psi.value(s.svv(i, j)));
        out.g_uu(i, j) += within_w * psi.derivative(s.suu(i, j));
        out.g_vv(i, j) += within_w * psi.derivative(s.svv(i, j));
      }
    }
  }
  return out;
}

/// Variance-reducing auxiliary term: mean squared deviation of the batch's
/// cross-view negative similarities from -1/(n_global - 1).
inline SimilarityGrad vrns_core(const SimilarityBlocks &s,
                                std::size_t n_global) {
  const Eigen::Index m = s.suv.rows();
  if (m < 2)
    throw IndexError("VRNS needs at least two instances in the batch");
  if (n_global < 2)
    throw ConfigError("VRNS needs n_global >= 2");
  SimilarityGrad out = detail::zero_grad(m);
  const double target = -1.0 / (static_cast<double>(n_global) - 1.0);
  const double w = 1.0 / static_cast<double>(m * (m - 1));
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      if (i == j)
        continue;
      const double r = s.suv(i, j) - target;
      out.loss += w * r * r;
      out.g_uv(i, j) += 2 * w * r;
    }
  return out;
}

/// Family loss (without the VRNS term) on similarity blocks.
inline SimilarityGrad family_core(const LossSpec &spec,
                                  const SimilarityBlocks &s) {
  return is_info_family(spec.family) ? info_sym_core(spec, s)
                                     : ind_add_core(spec, s);
}

/// Family loss plus lambda * VRNS on similarity blocks.
inline SimilarityGrad total_core(const LossSpec &spec,
                                 const SimilarityBlocks &s) {
  SimilarityGrad out = family_core(spec, s);
  if (spec.vrns_lambda > 0) {
    const SimilarityGrad aux = vrns_core(s, spec.n_global);
    out.loss += spec.vrns_lambda * aux.loss;
    out.g_uv += spec.vrns_lambda * aux.g_uv;
  }
  return out;
}

/// Chain dL/dS into ambient gradients for the rows of `idx`.
inline GradPair chain_to_embeddings(const SimilarityGrad &g, const Matrix &u,
                                    const Matrix &v, const IndexSet &idx) {
  const Matrix ub = detail::gather_rows(u, idx);
  const Matrix vb = detail::gather_rows(v, idx);
  const Matrix guu = g.g_uu + g.g_uu.transpose();
  const Matrix gvv = g.g_vv + g.g_vv.transpose();
  return {g.g_uv * vb + guu * ub, g.g_uv.transpose() * ub + gvv * vb};
}

struct LossAndGrad {
  double loss = 0;
  GradPair grad;
};

/// Total loss and its ambient gradient on raw matrices (no unit-norm check,
/// so finite-difference probes can step off the sphere).
inline LossAndGrad evaluate(const LossSpec &spec, const Matrix &u,
                            const Matrix &v, const IndexSet &idx) {
  const std::size_t min_size = is_info_family(spec.family) ? 2 : 1;
  detail::check_index_set(idx, static_cast<std::size_t>(u.rows()), min_size);
  const SimilarityGrad g = total_core(spec, similarity_blocks(u, v, idx));
  return {g.loss, chain_to_embeddings(g, u, v, idx)};
}

inline double eval_info_sym(const LossSpec &spec, const EmbeddingSet &e,
                            const IndexSet &idx) {
  if (!is_info_family(spec.family))
    throw ConfigError(std::string(to_string(spec.family)) +
                      " is not an InfoNCE-shaped family");
  detail::check_index_set(idx, e.n(), 2);
  return info_sym_core(spec, similarity_blocks(e.u(), e.v(), idx)).loss;
}

inline double eval_ind_add(const LossSpec &spec, const EmbeddingSet &e,
                           const IndexSet &idx) {
  if (!is_ind_add_family(spec.family))
    throw ConfigError(std::string(to_string(spec.family)) +
                      " is not an independently additive family");
  detail::check_index_set(idx, e.n(), 1);
  return ind_add_core(spec, similarity_blocks(e.u(), e.v(), idx)).loss;
}

inline double eval_vrns(const EmbeddingSet &e, const IndexSet &idx,
                        std::size_t n_global) {
  detail::check_index_set(idx, e.n(), 2);
  return vrns_core(similarity_blocks(e.u(), e.v(), idx), n_global).loss;
}

inline double total_loss(const LossSpec &spec, const EmbeddingSet &e,
                         const IndexSet &idx) {
  return evaluate(spec, e.u(), e.v(), idx).loss;
}

inline GradPair grad(const LossSpec &spec, const EmbeddingSet &e,
                     const IndexSet &idx) {
  return evaluate(spec, e.u(), e.v(), idx).grad;
}

/// Removes from each gradient row its component along the matching point.
inline Matrix tangential(const Matrix &g, const Matrix &x) {
  const Vector radial = (g.array() * x.array()).rowwise().sum();
  return g - (x.array().colwise() * radial.array()).matrix();
}

/// Index set {0, 1, ..., n-1}.
inline IndexSet full_index(std::size_t n) {
  IndexSet idx(n);
  for (std::size_t i = 0; i < n; ++i)
    idx[i] = i;
  return idx;
}

/// dL/d(u_i.v_j) of the (unhalved) InfoNCE loss on the prefix of the first m
/// instances: (1/(m t)) * (row softmax of u_i against v + column softmax of
/// v_j against u), both evaluated at entry (i, j).
inline double infonce_neg_pair_grad(const EmbeddingSet &e, std::size_t i,
                                    std::size_t j, double t, std::size_t m) {
  if (i == j)
    throw IndexError("infonce_neg_pair_grad needs i != j");
  if (m > e.n() || i >= m || j >= m)
    throw IndexError("infonce_neg_pair_grad needs i, j < m <= n");
  if (!(t > 0))
    throw ConfigError("temperature must be positive");
  const auto mi = static_cast<Eigen::Index>(m);
  const Matrix s = e.u().topRows(mi) * e.v().topRows(mi).transpose();
  const auto ii = static_cast<Eigen::Index>(i);
  const auto jj = static_cast<Eigen::Index>(j);
  auto softmax_at = [&](auto &&value, Eigen::Index pick) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < mi; ++k)
      mx = std::max(mx, value(k) / t);
    double sum = 0;
    for (Eigen::Index k = 0; k < mi; ++k)
      sum += std::exp(value(k) / t - mx);
    return std::exp(value(pick) / t - mx) / sum;
  };
  const double row = softmax_at([&](Eigen::Index k) { return s(ii, k); }, jj);
  const double col = softmax_at([&](Eigen::Index k) { return s(k, jj); }, ii);
  return (row + col) / (static_cast<double>(m) * t);
}

} // namespace simlab
