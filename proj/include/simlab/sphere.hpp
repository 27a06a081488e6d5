#pragma once

/// Unit-sphere embedding sets: construction, validation, simplex ETFs and the
/// positive / negative-pair similarity statistics.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "simlab/errors.hpp"

namespace simlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IndexSet = std::vector<std::size_t>;

/// Paired views: row i of `u` and row i of `v` form the positive pair of
/// instance i. Both matrices are n x d with unit-norm rows.
class EmbeddingSet {
public:
  static constexpr double kUnitTolerance = 1e-12;

  EmbeddingSet(Matrix u, Matrix v) : u_(std::move(u)), v_(std::move(v)) {
    if (u_.rows() != v_.rows() || u_.cols() != v_.cols())
      throw DimensionError("u and v must have identical shape");
    if (u_.rows() < 1 || u_.cols() < 1)
      throw DimensionError("embedding set must have n >= 1 and d >= 1");
    check_rows(u_, "u");
    check_rows(v_, "v");
  }

  /// Self-paired set (v = u).
  static EmbeddingSet self_paired(const Matrix &u) { return {u, u}; }

  const Matrix &u() const noexcept { return u_; }
  const Matrix &v() const noexcept { return v_; }
  std::size_t n() const noexcept { return static_cast<std::size_t>(u_.rows()); }
  std::size_t d() const noexcept { return static_cast<std::size_t>(u_.cols()); }

private:
  static void check_rows(const Matrix &m, const char *view) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double norm = m.row(i).norm();
      if (!(std::abs(norm - 1.0) <= kUnitTolerance)) {
        std::ostringstream os;
        os << "row " << i << " of view " << view << " has norm " << norm
           << ", expected 1";
        throw DimensionError(os.str());
      }
    }
  }

  Matrix u_;
  Matrix v_;
};

/// Population moments of the three similarity populations.
struct SimilarityStats {
  double pos_mean = 0, pos_var = 0;       // u_i.v_i, n values
  double neg_mean = 0, neg_var = 0;       // u_i.v_j, i != j, n(n-1) values
  double within_mean = 0, within_var = 0; // u_i.u_j and v_i.v_j, 2n(n-1)
};

namespace detail {

/// Two-pass population mean / variance over values produced by `visit`.
template <class Visit> std::pair<double, double> moments(Visit &&visit) {
  double sum = 0;
  std::size_t count = 0;
  visit([&](double x) {
    sum += x;
    ++count;
  });
  if (count == 0)
    return {0.0, 0.0};
  const double mean = sum / static_cast<double>(count);
  double sq = 0;
  visit([&](double x) { sq += (x - mean) * (x - mean); });
  return {mean, sq / static_cast<double>(count)};
}

} // namespace detail

/// Normalise every row; the zero vector cannot be projected.
inline Matrix project_rows(const Matrix &m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (!(norm > 1e-30))
      throw ZeroRowError(static_cast<std::size_t>(i));
    out.row(i) /= norm;
  }
  return out;
}

/// Regular simplex ETF: n unit rows in R^d with pairwise inner product
/// -1/(n-1). Built from the Helmert basis of the orthogonal complement of the
/// all-ones vector, scaled so that the Gram matrix is n/(n-1) * centering.
inline Matrix make_etf(std::size_t n, std::size_t d) {
  if (n < 2)
    throw DimensionError("simplex ETF needs n >= 2");
  if (d + 1 < n)
    throw DimensionError("simplex ETF with n=" + std::to_string(n) +
                         " needs d >= n-1, got d=" + std::to_string(d));
  const auto rows = static_cast<Eigen::Index>(n);
  Matrix x = Matrix::Zero(rows, static_cast<Eigen::Index>(d));
  const double scale = std::sqrt(static_cast<double>(n) / (n - 1.0));
  for (Eigen::Index k = 1; k < rows; ++k) {
    const double kk = static_cast<double>(k);
    const double inv = scale / std::sqrt(kk * (kk + 1.0));
    for (Eigen::Index i = 0; i < k; ++i)
      x(i, k - 1) = inv;
    x(k, k - 1) = -kk * inv;
  }
  return x;
}

/// True when the rows are unit vectors with all pairwise inner products equal
/// to -1/(n-1) (within `tol`).
inline bool is_etf(const Matrix &m, double tol = 1e-10) {
  const auto n = m.rows();
  if (n < 2)
    return false;
  const Matrix g = m * m.transpose();
  const double off = -1.0 / static_cast<double>(n - 1);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (std::abs(g(i, j) - (i == j ? 1.0 : off)) > tol)
        return false;
  return true;
}

/// Similarity statistics from raw view matrices (rows need not be validated).
inline SimilarityStats similarity_stats(const Matrix &u, const Matrix &v) {
  const auto n = u.rows();
  if (n < 2)
    throw IndexError("similarity statistics need n >= 2");
  const Matrix suv = u * v.transpose();
  const Matrix suu = u * u.transpose();
  const Matrix svv = v * v.transpose();
  SimilarityStats s;
  std::tie(s.pos_mean, s.pos_var) = detail::moments([&](auto &&emit) {
    for (Eigen::Index i = 0; i < n; ++i)
      emit(suv(i, i));
  });
  std::tie(s.neg_mean, s.neg_var) = detail::moments([&](auto &&emit) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j)
          emit(suv(i, j));
  });
  std::tie(s.within_mean, s.within_var) = detail::moments([&](auto &&emit) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j) {
          emit(suu(i, j));
          emit(svv(i, j));
        }
  });
  return s;
}

inline SimilarityStats similarity_stats(const EmbeddingSet &e) {
  return similarity_stats(e.u(), e.v());
}

/// Mean of u_i.v_j over all n^2 ordered pairs, i == j included.
inline double all_pairs_mean(const Matrix &u, const Matrix &v) {
  const Vector ubar = u.colwise().mean();
  const Vector vbar = v.colwise().mean();
  return ubar.dot(vbar);
}

/// Mean pairwise inner product over the ordered distinct pairs of the
/// concatenation of two ETFs.
inline double combined_etf_mean(const Matrix &a, const Matrix &b) {
  if (a.cols() != b.cols())
    throw DimensionError("combined_etf_mean: dimension mismatch (" +
                         std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()) + ")");
  if (!is_etf(a) || !is_etf(b))
    throw DimensionError("combined_etf_mean: inputs must be simplex ETFs");
  Matrix all(a.rows() + b.rows(), a.cols());
  all << a, b;
  const Matrix g = all * all.transpose();
  const auto total = all.rows();
  double sum = 0;
  for (Eigen::Index i = 0; i < total; ++i)
    for (Eigen::Index j = 0; j < total; ++j)
      if (i != j)
        sum += g(i, j);
  return sum / static_cast<double>(total * (total - 1));
}

/// n rows drawn from a standard Gaussian, then normalised.
template <class Rng>
Matrix random_unit_rows(std::size_t n, std::size_t d, Rng &rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = gauss(rng);
  return project_rows(m);
}

template <class Rng>
EmbeddingSet random_embedding_set(std::size_t n, std::size_t d, Rng &rng) {
  Matrix u = random_unit_rows(n, d, rng);
  Matrix v = random_unit_rows(n, d, rng);
  return {std::move(u), std::move(v)};
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix).
template <class Rng> Matrix random_rotation(std::size_t d, Rng &rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto dd = static_cast<Eigen::Index>(d);
  Matrix a(dd, dd);
  for (Eigen::Index i = 0; i < dd; ++i)
    for (Eigen::Index j = 0; j < dd; ++j)
      a(i, j) = gauss(rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < dd; ++j)
    if (r(j, j) < 0)
      q.col(j) *= -1.0;
  return q;
}

// ---------------------------------------------------------------------------
// Plain-text matrix files
//
//   # embeddings n=<n> d=<d> view=<u|v>
//   x11 x12 ... x1d
//   ...
// ---------------------------------------------------------------------------

inline void write_matrix(std::ostream &os, const Matrix &m, char view) {
  os << "# embeddings n=" << m.rows() << " d=" << m.cols() << " view=" << view
     << '\n';
  char buf[40];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      if (j)
        os << ' ';
      os << buf;
    }
    os << '\n';
  }
}

inline void write_embeddings(std::ostream &os, const EmbeddingSet &e) {
  write_matrix(os, e.u(), 'u');
  write_matrix(os, e.v(), 'v');
}

struct MatrixBlock {
  char view;
  Matrix values;
};

/// Reads every matrix block in the stream.
inline std::vector<MatrixBlock> read_matrices(std::istream &is) {
  std::vector<MatrixBlock> blocks;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string &what) {
    throw FormatError("line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    long n = -1, d = -1;
    char view = 0;
    if (std::sscanf(line.c_str(), "# embeddings n=%ld d=%ld view=%c", &n, &d,
                    &view) != 3 ||
        n < 1 || d < 1 || (view != 'u' && view != 'v'))
      fail("expected header '# embeddings n=<n> d=<d> view=<u|v>'");
    Matrix m(n, d);
    for (long i = 0; i < n; ++i) {
      if (!std::getline(is, line))
        fail("unexpected end of file inside matrix block");
      ++line_no;
      std::istringstream row(line);
      for (long j = 0; j < d; ++j)
        if (!(row >> m(i, j)))
          fail("expected " + std::to_string(d) + " values");
      std::string extra;
      if (row >> extra)
        fail("too many values in row");
    }
    blocks.push_back({view, std::move(m)});
  }
  return blocks;
}

/// Reads a u block followed by a v block. A lone u block yields a self-paired
/// set.
inline EmbeddingSet read_embeddings(std::istream &is) {
  auto blocks = read_matrices(is);
  if (blocks.empty() || blocks[0].view != 'u')
    throw FormatError("embedding file must start with a view=u block");
  if (blocks.size() == 1)
    return EmbeddingSet::self_paired(blocks[0].values);
  if (blocks.size() != 2 || blocks[1].view != 'v')
    throw FormatError("embedding file must contain a u block and a v block");
  return {std::move(blocks[0].values), std::move(blocks[1].values)};
}

} // namespace simlab
