#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "simlab/analysis.hpp"
#include "simlab/losses.hpp"

using namespace simlab;

namespace {

/// Direct evaluation of the one-sided InfoNCE-shaped loss, no shifting.
double naive_info_one_side(const Matrix &u, const Matrix &v, int c1, int c2,
                           double t, bool log1p_psi) {
  const auto m = u.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    double inner = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i)
        continue;
      inner += c1 * std::exp((v.row(j) - v.row(i)).dot(u.row(i)) / t);
      inner += c2 * std::exp((u.row(j) - v.row(i)).dot(u.row(i)) / t);
    }
    total += log1p_psi ? std::log(1.0 + inner) : std::log(inner);
  }
  return total / static_cast<double>(m);
}

double naive_info(const Matrix &u, const Matrix &v, int c1, int c2, double t,
                  bool log1p_psi) {
  return 0.5 * naive_info_one_side(u, v, c1, c2, t, log1p_psi) +
         0.5 * naive_info_one_side(v, u, c1, c2, t, log1p_psi);
}

template <class Phi, class Psi>
double naive_ind_add(const Matrix &u, const Matrix &v, int c1, int c2,
                     Phi phi, Psi psi) {
  const double m = static_cast<double>(u.rows());
  double pos = 0, cross = 0, within = 0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    pos += phi(u.row(i).dot(v.row(i)));
    for (Eigen::Index j = 0; j < u.rows(); ++j) {
      if (i == j)
        continue;
      cross += psi(u.row(i).dot(v.row(j)));
      within += psi(u.row(i).dot(u.row(j))) + psi(v.row(i).dot(v.row(j)));
    }
  }
  double out = -pos / m;
  if (m > 1) {
    out += c1 * cross / (m * (m - 1));
    out += c2 * within / (2 * m * (m - 1));
  }
  return out;
}

double softplus_ref(double z) { return std::log(1.0 + std::exp(z)); }

Matrix rows(std::initializer_list<std::vector<double>> r) {
  Matrix m(static_cast<Eigen::Index>(r.size()),
           static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto &row : r) {
    for (std::size_t j = 0; j < row.size(); ++j)
      m(i, static_cast<Eigen::Index>(j)) = row[j];
    ++i;
  }
  return m;
}

EmbeddingSet antipodal_pair() {
  return EmbeddingSet::self_paired(rows({{1, 0}, {-1, 0}}));
}

std::vector<LossSpec> named_zoo(std::size_t n) {
  return {LossSpec::named(LossFamily::InfoNce, 0.5, n),
          LossSpec::named(LossFamily::SimClr, 0.5, n),
          LossSpec::named(LossFamily::Dcl, 0.5, n),
          LossSpec::named(LossFamily::Dhel, 0.5, n),
          LossSpec::named(LossFamily::SigLip, 2.0, n, -1.0),
          LossSpec::named(LossFamily::Spectral, 1.0, n)};
}

} // namespace

// ---------------------------------------------------------------------------
// Named values
// ---------------------------------------------------------------------------

TEST(InfoSym, InfoNceAntipodalPair) {
  const auto spec = LossSpec::named(LossFamily::InfoNce, 1.0, 2);
  EXPECT_NEAR(eval_info_sym(spec, antipodal_pair(), full_index(2)),
              std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(eval_info_sym(spec, antipodal_pair(), full_index(2)), 0.126928,
              1e-6);
}

TEST(InfoSym, InfoNceAllIdentical) {
  const auto spec = LossSpec::named(LossFamily::InfoNce, 1.0, 2);
  const auto e = EmbeddingSet::self_paired(rows({{0, 1}, {0, 1}}));
  EXPECT_NEAR(eval_info_sym(spec, e, full_index(2)), std::log(2.0), 1e-12);
}

TEST(InfoSym, DclAntipodalPair) {
  const auto spec = LossSpec::named(LossFamily::Dcl, 1.0, 2);
  EXPECT_NEAR(eval_info_sym(spec, antipodal_pair(), full_index(2)),
              std::log(2.0) - 2.0, 1e-12);
}

TEST(IndAdd, SpectralValues) {
  const auto spec = LossSpec::named(LossFamily::Spectral, 1.0, 2);
  EXPECT_NEAR(eval_ind_add(spec, antipodal_pair(), full_index(2)), 0.0, 1e-15);
  const auto same = EmbeddingSet::self_paired(rows({{1, 0}, {1, 0}}));
  EXPECT_NEAR(eval_ind_add(spec, same, full_index(2)), 0.0, 1e-15);
  const auto ortho = EmbeddingSet::self_paired(rows({{1, 0}, {0, 1}}));
  EXPECT_NEAR(eval_ind_add(spec, ortho, full_index(2)), -1.0, 1e-15);
}

TEST(IndAdd, SigLipSingleInstance) {
  const auto spec = LossSpec::named(LossFamily::SigLip, 1.0, 4, 0.0);
  const auto e = EmbeddingSet::self_paired(rows({{1, 0}, {0, 1}}));
  EXPECT_NEAR(eval_ind_add(spec, e, {1}), std::log1p(std::exp(-1.0)), 1e-12);
}

TEST(Vrns, EtfIsZero) {
  const auto e = EmbeddingSet::self_paired(make_etf(5, 4));
  EXPECT_NEAR(eval_vrns(e, full_index(5), 5), 0.0, 1e-15);
}

TEST(Vrns, ConstructedPairs) {
  const auto same = EmbeddingSet::self_paired(rows({{1, 0}, {1, 0}, {0, 1}}));
  EXPECT_NEAR(eval_vrns(same, {0, 1}, 4), 16.0 / 9.0, 1e-15);
  const auto anti = EmbeddingSet::self_paired(rows({{1, 0}, {-1, 0}, {0, 1}}));
  EXPECT_NEAR(eval_vrns(anti, {0, 1}, 4), 4.0 / 9.0, 1e-15);
}

TEST(Vrns, ZeroExactlyAtTarget) {
  // cross-view similarity -1/(n_global-1) in every ordered pair
  const auto e = EmbeddingSet::self_paired(make_etf(3, 2));
  EXPECT_NEAR(eval_vrns(e, full_index(3), 3), 0.0, 1e-15);
  EXPECT_GT(eval_vrns(e, full_index(3), 4), 1e-3);
  std::mt19937_64 rng(1);
  for (int k = 0; k < 50; ++k)
    EXPECT_GT(eval_vrns(random_embedding_set(6, 3, rng), full_index(6), 6), 0.0);
}

TEST(TotalLoss, AddsWeightedVrns) {
  const auto e = EmbeddingSet::self_paired(make_etf(4, 3));
  auto spec = LossSpec::named(LossFamily::SimClr, 0.2, 4);
  const double base = total_loss(spec, e, full_index(4));
  EXPECT_DOUBLE_EQ(base, eval_info_sym(spec, e, full_index(4)));
  spec.vrns_lambda = 30;
  EXPECT_NEAR(total_loss(spec, e, full_index(4)), base, 1e-12);

  auto spectral = LossSpec::named(LossFamily::Spectral, 1.0, 3, 0.0, 1.0);
  const auto ortho = EmbeddingSet::self_paired(rows({{1, 0}, {0, 1}, {-1, 0}}));
  EXPECT_NEAR(total_loss(spectral, ortho, {0, 1}), -1.0 + 0.25, 1e-15);
}

// ---------------------------------------------------------------------------
// Oracle agreement
// ---------------------------------------------------------------------------

TEST(InfoSym, MatchesDirectEvaluation) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const auto e = random_embedding_set(n, 3, rng);
    const double t = 0.3 + 0.1 * (trial % 5);
    struct Case {
      LossFamily f;
      int c1, c2;
      bool log1p;
    };
    for (auto c : {Case{LossFamily::InfoNce, 1, 0, true},
                   Case{LossFamily::SimClr, 1, 1, true},
                   Case{LossFamily::Dcl, 1, 1, false},
                   Case{LossFamily::Dhel, 0, 1, false}}) {
      const auto spec = LossSpec::named(c.f, t, n);
      EXPECT_NEAR(eval_info_sym(spec, e, full_index(n)),
                  naive_info(e.u(), e.v(), c.c1, c.c2, t, c.log1p), 1e-11)
          << to_string(c.f);
    }
  }
}

TEST(InfoSym, InfoNceEqualsSoftmaxCrossEntropy) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 8;
    const auto e = random_embedding_set(n, 4, rng);
    const double t = 0.25;
    const Matrix s = e.u() * e.v().transpose();
    double ce = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      double row = 0, col = 0;
      for (Eigen::Index j = 0; j < s.rows(); ++j) {
        row += std::exp(s(i, j) / t);
        col += std::exp(s(j, i) / t);
      }
      ce -= std::log(std::exp(s(i, i) / t) / row);
      ce -= std::log(std::exp(s(i, i) / t) / col);
    }
    ce /= 2.0 * static_cast<double>(n);
    const auto spec = LossSpec::named(LossFamily::InfoNce, t, n);
    EXPECT_NEAR(eval_info_sym(spec, e, full_index(n)), ce, 1e-12);
  }
}

TEST(IndAdd, MatchesDirectEvaluation) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + trial % 7;
    const auto e = random_embedding_set(n, 3, rng);
    const double t = 1.0 + trial % 4, b = -1.0 + 0.5 * (trial % 5);
    const std::size_t n_global = n + 3;
    const auto sig = LossSpec::named(LossFamily::SigLip, t, n_global, b);
    const double w = static_cast<double>(n_global) - 1.0;
    EXPECT_NEAR(eval_ind_add(sig, e, full_index(n)),
                naive_ind_add(
                    e.u(), e.v(), 1, 0,
                    [&](double x) { return -softplus_ref(-t * x + b); },
                    [&](double x) { return w * softplus_ref(t * x - b); }),
                1e-11);
    const auto spec = LossSpec::named(LossFamily::Spectral, 1.0, n);
    EXPECT_NEAR(eval_ind_add(spec, e, full_index(n)),
                naive_ind_add(
                    e.u(), e.v(), 1, 0, [](double x) { return x; },
                    [](double x) { return x * x; }),
                1e-12);
  }
}

TEST(IndAdd, SigLipWeightOverride) {
  std::mt19937_64 rng(24);
  const auto e = random_embedding_set(4, 3, rng);
  auto spec = LossSpec::named(LossFamily::SigLip, 2.0, 100, 1.0);
  spec.siglip_weight = 3.0;
  const auto same = LossSpec::named(LossFamily::SigLip, 2.0, 4, 1.0);
  EXPECT_NEAR(eval_ind_add(spec, e, full_index(4)),
              eval_ind_add(same, e, full_index(4)), 1e-13);
}

TEST(Generic, InfoFamilyMatchesNamedPath) {
  std::mt19937_64 rng(25);
  const auto e = random_embedding_set(6, 3, rng);
  LossSpec g = LossSpec::named(LossFamily::GenericInfo, 0.4, 6);
  g.phi = maps::exp_scaled(0.4);
  for (auto [c1, c2, named, psi] :
       {std::tuple{1, 0, LossFamily::InfoNce, maps::log1p()},
        std::tuple{1, 1, LossFamily::SimClr, maps::log1p()},
        std::tuple{1, 1, LossFamily::Dcl, maps::log()},
        std::tuple{0, 1, LossFamily::Dhel, maps::log()}}) {
    g.c1 = c1;
    g.c2 = c2;
    g.psi = psi;
    const auto ref = LossSpec::named(named, 0.4, 6);
    EXPECT_NEAR(total_loss(g, e, full_index(6)),
                total_loss(ref, e, full_index(6)), 1e-12);
    const GradPair a = grad(g, e, full_index(6));
    const GradPair b = grad(ref, e, full_index(6));
    EXPECT_LE((a.d_u - b.d_u).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((a.d_v - b.d_v).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Generic, IndAddMatchesSigLip) {
  std::mt19937_64 rng(26);
  const auto e = random_embedding_set(5, 3, rng);
  LossSpec g = LossSpec::named(LossFamily::GenericIndAdd, 3.0, 5);
  g.c1 = 1;
  g.c2 = 0;
  g.phi = maps::neg_softplus(3.0, 0.5);
  g.psi = maps::softplus_weighted(3.0, 0.5, 4.0);
  const auto ref = LossSpec::named(LossFamily::SigLip, 3.0, 5, 0.5);
  EXPECT_NEAR(total_loss(g, e, full_index(5)),
              total_loss(ref, e, full_index(5)), 1e-12);
}

TEST(Stability, SmallTemperatureStaysFinite) {
  // similarities of +-1 at t = 0.01 put exp(200) inside the sums
  const auto e = antipodal_pair();
  for (auto f : {LossFamily::InfoNce, LossFamily::SimClr, LossFamily::Dcl,
                 LossFamily::Dhel}) {
    const auto spec = LossSpec::named(f, 0.01, 2);
    const LossAndGrad r = evaluate(spec, e.u(), e.v(), full_index(2));
    EXPECT_TRUE(std::isfinite(r.loss)) << to_string(f);
    EXPECT_TRUE(r.grad.d_u.allFinite());
  }
  const auto all_same = EmbeddingSet::self_paired(rows({{1, 0}, {1, 0}}));
  const auto dcl = LossSpec::named(LossFamily::Dcl, 0.01, 2);
  EXPECT_NEAR(eval_info_sym(dcl, all_same, full_index(2)), std::log(2.0),
              1e-12);
  const auto sig = LossSpec::named(LossFamily::SigLip, 500.0, 8, -300.0);
  EXPECT_TRUE(std::isfinite(total_loss(sig, all_same, full_index(2))));
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

TEST(Grad, FiniteDifferenceEveryFamily) {
  std::mt19937_64 rng(31);
  for (int seed = 0; seed < 20; ++seed)
    for (std::size_t n : {3u, 5u, 8u}) {
      const auto e = random_embedding_set(n, 4, rng);
      auto zoo = named_zoo(n);
      zoo.push_back(LossSpec::named(LossFamily::SimClr, 0.2, n, 0.0, 30.0));
      zoo.push_back(LossSpec::named(LossFamily::SigLip, 2.0, n, -1.0, 2.0));
      for (const auto &spec : zoo) {
        const CheckReport r = finite_difference_check(spec, e, full_index(n));
        EXPECT_TRUE(r.passed) << r.name << " " << r.details;
      }
    }
}

TEST(Grad, FiniteDifferenceOnSubsetIndex) {
  std::mt19937_64 rng(32);
  const auto e = random_embedding_set(8, 3, rng);
  for (const auto &spec : named_zoo(8)) {
    const CheckReport r = finite_difference_check(spec, e, {6, 1, 3});
    EXPECT_TRUE(r.passed) << r.name << " " << r.details;
  }
}

TEST(Grad, TangentialVanishesAtEtf) {
  const auto e = EmbeddingSet::self_paired(make_etf(6, 6));
  const auto spec = LossSpec::named(LossFamily::SimClr, 0.2, 6);
  const GradPair g = grad(spec, e, full_index(6));
  const double norm = std::sqrt(tangential(g.d_u, e.u()).squaredNorm() +
                                tangential(g.d_v, e.v()).squaredNorm());
  EXPECT_LE(norm, 1e-8);
  EXPECT_GT(g.d_u.norm(), 1e-3); // the ambient gradient is radial, not zero
}

TEST(Grad, SwappingViewsSwapsGradients) {
  std::mt19937_64 rng(33);
  const auto e = random_embedding_set(5, 3, rng);
  const EmbeddingSet swapped(e.v(), e.u());
  for (const auto &spec : named_zoo(5)) {
    const GradPair a = grad(spec, e, full_index(5));
    const GradPair b = grad(spec, swapped, full_index(5));
    EXPECT_LE((a.d_u - b.d_v).cwiseAbs().maxCoeff(), 1e-12) << to_string(spec.family);
    EXPECT_LE((a.d_v - b.d_u).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Loss, PermutationInvariance) {
  std::mt19937_64 rng(34);
  for (int trial = 0; trial < 10; ++trial) {
    const auto e = random_embedding_set(7, 3, rng);
    std::vector<Eigen::Index> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix pu(7, 3), pv(7, 3);
    for (Eigen::Index i = 0; i < 7; ++i) {
      pu.row(perm[i]) = e.u().row(i);
      pv.row(perm[i]) = e.v().row(i);
    }
    const EmbeddingSet pe(pu, pv);
    const IndexSet idx = {0, 2, 3, 6};
    IndexSet pidx;
    for (auto i : idx)
      pidx.push_back(static_cast<std::size_t>(perm[i]));
    for (auto spec : named_zoo(7)) {
      spec.vrns_lambda = 2.0;
      EXPECT_NEAR(total_loss(spec, e, idx), total_loss(spec, pe, pidx), 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Negative-pair gradient of InfoNCE
// ---------------------------------------------------------------------------

TEST(NegPairGrad, AllEqualSimilarities) {
  Matrix u = Matrix::Zero(8, 2);
  u.col(0).setOnes();
  const auto e = EmbeddingSet::self_paired(u);
  for (std::size_t m = 2; m <= 8; ++m)
    for (double t : {0.2, 1.0})
      EXPECT_NEAR(infonce_neg_pair_grad(e, 0, 1, t, m), 2.0 / (m * m * t),
                  1e-14);
}

TEST(NegPairGrad, MatchesFiniteDifferenceInSimilarity) {
  // unhalved InfoNCE as a function of the similarity matrix
  std::mt19937_64 rng(41);
  const auto e = random_embedding_set(6, 3, rng);
  const double t = 0.5;
  const std::size_t m = 5;
  auto infonce = [&](const Matrix &s) {
    double total = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      double row = 0, col = 0;
      for (Eigen::Index j = 0; j < s.rows(); ++j) {
        row += std::exp(s(i, j) / t);
        col += std::exp(s(j, i) / t);
      }
      total += std::log(row) - s(i, i) / t + std::log(col) - s(i, i) / t;
    }
    return total / static_cast<double>(s.rows());
  };
  Matrix s = e.u().topRows(m) * e.v().topRows(m).transpose();
  const double h = 1e-6;
  s(1, 3) += h;
  const double up = infonce(s);
  s(1, 3) -= 2 * h;
  const double down = infonce(s);
  EXPECT_NEAR(infonce_neg_pair_grad(e, 1, 3, t, m), (up - down) / (2 * h),
              1e-8);
}

TEST(NegPairGrad, MonotoneInPrefixSize) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_embedding_set(8, 4, rng);
    const double g2 = infonce_neg_pair_grad(e, 0, 1, 0.5, 2);
    const double g4 = infonce_neg_pair_grad(e, 0, 1, 0.5, 4);
    const double g8 = infonce_neg_pair_grad(e, 0, 1, 0.5, 8);
    EXPECT_GE(g8, 0.0);
    EXPECT_GT(g2, g4);
    EXPECT_GT(g4, g8);
    EXPECT_EQ(infonce_neg_pair_grad(e, 0, 1, 0.5, 4), g4);
  }
}

TEST(NegPairGrad, Errors) {
  const auto e = EmbeddingSet::self_paired(make_etf(4, 3));
  EXPECT_THROW(infonce_neg_pair_grad(e, 1, 1, 1.0, 3), IndexError);
  EXPECT_THROW(infonce_neg_pair_grad(e, 0, 3, 1.0, 3), IndexError);
  EXPECT_THROW(infonce_neg_pair_grad(e, 0, 1, 1.0, 5), IndexError);
}

// ---------------------------------------------------------------------------
// Configuration errors
// ---------------------------------------------------------------------------

TEST(LossSpec, Validation) {
  auto s = LossSpec::named(LossFamily::SimClr, 0.2, 4);
  EXPECT_NO_THROW(s.validate());
  s.c2 = 0;
  EXPECT_THROW(s.validate(), ConfigError); // pinned to (1,1)
  s = LossSpec::named(LossFamily::InfoNce, 0.0, 4);
  EXPECT_THROW(s.validate(), ConfigError);
  s = LossSpec::named(LossFamily::InfoNce, 1.0, 4, 0.0, -1.0);
  EXPECT_THROW(s.validate(), ConfigError);
  s = LossSpec::named(LossFamily::GenericInfo, 1.0, 4);
  s.c1 = 0;
  s.c2 = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.c1 = 1;
  EXPECT_THROW(s.validate(), ConfigError); // maps missing
  EXPECT_THROW(parse_loss_family("triplet"), ConfigError);
  EXPECT_EQ(parse_loss_family("dhel"), LossFamily::Dhel);
}

TEST(Loss, IndexErrors) {
  const auto e = EmbeddingSet::self_paired(make_etf(4, 3));
  const auto spec = LossSpec::named(LossFamily::InfoNce, 1.0, 4);
  EXPECT_THROW(eval_info_sym(spec, e, {0, 4}), IndexError);
  EXPECT_THROW(eval_info_sym(spec, e, {1}), IndexError);
  EXPECT_THROW(eval_info_sym(spec, e, {1, 1}), IndexError);
  EXPECT_THROW(eval_vrns(e, {0, 9}, 4), IndexError);
  EXPECT_THROW(eval_ind_add(spec, e, {0, 1}), ConfigError);
}

TEST(Maps, LogRejectsNonpositive) {
  EXPECT_THROW(maps::log().value(0.0), DomainError);
  EXPECT_THROW(maps::log1p().value(-1.0), DomainError);
}
