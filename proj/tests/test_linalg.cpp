#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rlrr/error.hpp"
#include "rlrr/linalg.hpp"
#include "rlrr/random.hpp"
#include "testing.hpp"

using namespace rlrr;
using namespace rlrr::linalg;

namespace {

double orthogonality_error(const Tensor<double>& q) {
  Tensor<double> g = matmul(transpose(q), q);
  for (std::size_t i = 0; i < g.rows(); ++i) g.at(i, i) -= 1.0;
  return frobenius(g);
}

double relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  const double nb = frobenius(b);
  return frobenius(sub(a, b)) / (nb > 0 ? nb : 1.0);
}

void check_invariants(const Tensor<double>& w, const SvdFactorization& f) {
  const std::size_t k = std::min(w.rows(), w.cols());
  REQUIRE(f.sigma.size() == k);
  REQUIRE(f.u.shape() == Shape{w.rows(), k});
  REQUIRE(f.v.shape() == Shape{w.cols(), k});
  for (std::size_t d = 0; d < k; ++d) {
    CHECK(f.sigma[d] >= 0.0);
    if (d > 0) CHECK(f.sigma[d] <= f.sigma[d - 1]);
    for (std::size_t i = 0; i < f.u.rows(); ++i) {
      if (std::abs(f.u.at(i, d)) > 1e-12) {
        CHECK(f.u.at(i, d) > 0.0);
        break;
      }
    }
  }
  CHECK(orthogonality_error(f.u) < 1e-8);
  CHECK(orthogonality_error(f.v) < 1e-8);
  CHECK(relative_error(reconstruct(f), w) < 1e-8);
}

Tensor<double> outer_scaled(const Tensor<double>& w, const Tensor<double>& sl,
                            const Tensor<double>& sr) {
  Tensor<double> d(w.shape());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) d.at(i, j) = sl[i] * w.at(i, j) * sr[j];
  return d;
}

}  // namespace

TEST_CASE("svd: diagonal spectrum") {
  Tensor<double> w(Shape{3, 3}, {3, 0, 0, 0, 2, 0, 0, 0, 1});
  auto f = svd(w);
  CHECK(f.sigma[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(f.sigma[1] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(f.sigma[2] == doctest::Approx(1.0).epsilon(1e-14));
  check_invariants(w, f);
}

TEST_CASE("svd: permutation has unit spectrum") {
  Tensor<double> w(Shape{2, 2}, {0, 1, 1, 0});
  auto f = svd(w);
  CHECK(f.sigma[0] == doctest::Approx(1.0));
  CHECK(f.sigma[1] == doctest::Approx(1.0));
  check_invariants(w, f);
}

TEST_CASE("svd: random 4x4 against characteristic polynomial of WtW") {
  Rng rng(404);
  for (int trial = 0; trial < 5; ++trial) {
    auto w = testing::random_matrix(rng, 4, 4, -1.0, 1.0);
    auto f = svd(w);
    auto g = oracle::gram(w);
    double hi = 0.0;
    for (auto& row : g)
      for (double x : row) hi += std::abs(x);
    auto roots = oracle::real_roots(oracle::characteristic_polynomial(g), -1e-3, hi + 1.0);
    REQUIRE(roots.size() == 4);
    for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(f.sigma[d] * f.sigma[d] - roots[d]) < 1e-8);
  }
}

TEST_CASE("svd: rejects empty and non-finite input") {
  CHECK_THROWS_AS(svd(Tensor<double>(Shape{0, 3})), DimensionError);
  Tensor<double> w(Shape{2, 2}, {1, NAN, 0, 1});
  CHECK_THROWS_AS(svd(w), ContractError);
}

TEST_CASE("svd: non-convergence carries the residual") {
  Rng rng(5);
  auto w = testing::random_matrix(rng, 6, 6, -1.0, 1.0);
  try {
    svd(w, SvdOptions{1e-12, 1});
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(e.residual() > 1e-12);
  }
}

TEST_CASE("svd: invariants on 1000 random matrices against the Sturm oracle") {
  Rng rng(20240601);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = testing::extent(rng, 1, 16), n = testing::extent(rng, 1, 16);
    auto w = testing::random_matrix(rng, m, n, -2.0, 2.0);
    auto f = svd(w);
    check_invariants(w, f);
    auto eig = oracle::symmetric_eigenvalues(oracle::gram(w));
    for (std::size_t d = 0; d < f.sigma.size(); ++d)
      CHECK(std::abs(f.sigma[d] * f.sigma[d] - eig[d]) < 1e-8);
  }
}

TEST_CASE("svd: degenerate clusters are ordered deterministically") {
  // Orthogonal Q times identity: every singular value is 1.
  Rng rng(77);
  auto q = svd(testing::random_matrix(rng, 5, 5, -1.0, 1.0)).u;
  auto f = svd(q);
  check_invariants(q, f);
  for (std::size_t d = 1; d < 5; ++d) {
    CHECK(f.sigma[d] == f.sigma[0]);
    bool greater = false;
    for (std::size_t i = 0; i < 5; ++i) {
      if (f.u.at(i, d - 1) != f.u.at(i, d)) {
        greater = f.u.at(i, d - 1) > f.u.at(i, d);
        break;
      }
    }
    CHECK(greater);
  }
  auto again = svd(q);
  CHECK(again.u.identical(f.u));
  CHECK(again.v.identical(f.v));
}

TEST_CASE("reconstruct: round trip, zero spectrum, outer product") {
  Rng rng(11);
  auto w = testing::random_matrix(rng, 7, 4, -1.0, 1.0);
  CHECK(relative_error(reconstruct(svd(w)), w) < 1e-8);

  auto f = svd(w);
  f.sigma = Tensor<double>(Shape{f.sigma.size()}, 0.0);
  CHECK(frobenius(reconstruct(f)) == 0.0);

  auto a = testing::random_matrix(rng, 5, 1, -1.0, 1.0);
  auto b = testing::random_matrix(rng, 1, 6, -1.0, 1.0);
  auto fo = svd(matmul(a, b));
  CHECK(std::abs(fo.sigma[0] - frobenius(a) * frobenius(b)) < 1e-12);
  for (std::size_t d = 1; d < fo.sigma.size(); ++d) CHECK(fo.sigma[d] < 1e-12);
}

TEST_CASE("effective_rank: outer product, zeros, full rank") {
  Rng rng(3);
  auto down = testing::random_matrix(rng, 4, 1, -1.0, 1.0);
  auto up = testing::random_matrix(rng, 1, 4, -1.0, 1.0);
  CHECK(effective_rank(matmul(down, up)) == 1);
  CHECK(effective_rank(Tensor<double>(Shape{3, 3}, 0.0)) == 0);
  auto full = testing::random_matrix(rng, 5, 5, -1.0, 1.0);
  REQUIRE(std::abs(oracle::determinant(oracle::to_mat(full))) > 1e-6);
  CHECK(effective_rank(full) == 5);
  CHECK_THROWS_AS(effective_rank(full, 0.0), ContractError);
}

TEST_CASE("effective_rank: low-rank products never exceed the inner dimension") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = testing::extent(rng, 1, 12), n = testing::extent(rng, 1, 12);
    const std::size_t r = testing::extent(rng, 1, 6);
    auto prod = matmul(testing::random_matrix(rng, m, r, -1.0, 1.0),
                       testing::random_matrix(rng, r, n, -1.0, 1.0));
    CHECK(effective_rank(prod) <= r);
  }
}

TEST_CASE("effective_rank: scale invariant") {
  Rng rng(9);
  auto prod = matmul(testing::random_matrix(rng, 6, 2, -1.0, 1.0),
                     testing::random_matrix(rng, 2, 6, -1.0, 1.0));
  CHECK(effective_rank(prod) == effective_rank(scaled(prod, 1e-9)));
}

TEST_CASE("spectral report: zero delta is the exact identity report") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = testing::random_matrix(rng, testing::extent(rng, 1, 10), testing::extent(rng, 1, 10),
                                    -1.0, 1.0);
    auto r = spectral_perturbation_report(w, Tensor<double>(w.shape(), 0.0));
    CHECK(r.spectrum_after.identical(r.spectrum_before));
    for (double a : r.subspace_alignment.data()) CHECK(a == 1.0);
    CHECK(r.orthogonality_defect == 0.0);
    CHECK(r.delta_effective_rank == 0);
  }
}

TEST_CASE("spectral report: doubling") {
  Rng rng(22);
  auto w = testing::random_matrix(rng, 6, 6, -1.0, 1.0);
  auto r = spectral_perturbation_report(w, w);
  for (std::size_t d = 0; d < 6; ++d) {
    CHECK(std::abs(r.spectrum_after[d] - 2.0 * r.spectrum_before[d]) < 1e-10);
    CHECK(std::abs(r.subspace_alignment[d] - 1.0) < 1e-9);
  }
  CHECK(r.delta_effective_rank == 6);
}

TEST_CASE("spectral report: RLRR delta matches a from-scratch recomputation") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    auto w = testing::random_matrix(rng, 8, 8, -1.0, 1.0);
    auto sl = testing::random_vector(rng, 8, -0.05, 0.05);
    auto sr = testing::random_vector(rng, 8, -0.05, 0.05);
    auto delta = outer_scaled(w, sl, sr);
    auto after = add(w, delta);
    auto r = spectral_perturbation_report(w, delta);

    auto gb = oracle::gram(w), ga = oracle::gram(after);
    auto eb = oracle::symmetric_eigenvalues(gb), ea = oracle::symmetric_eigenvalues(ga);
    for (std::size_t d = 0; d < 8; ++d) {
      CHECK(std::abs(r.spectrum_before[d] - std::sqrt(eb[d])) < 1e-8);
      CHECK(std::abs(r.spectrum_after[d] - std::sqrt(ea[d])) < 1e-8);
    }

    // Random spectra are simple, so alignment is the per-index |cos|.
    std::vector<std::vector<double>> vb, va;
    for (std::size_t d = 0; d < 8; ++d) {
      vb.push_back(oracle::inverse_iteration(gb, eb[d]));
      va.push_back(oracle::inverse_iteration(ga, ea[d]));
      double c = 0.0;
      for (std::size_t j = 0; j < 8; ++j) c += vb[d][j] * va[d][j];
      CHECK(std::abs(r.subspace_alignment[d] - std::abs(c)) < 1e-7);
      CHECK(r.subspace_alignment[d] >= 0.0);
      CHECK(r.subspace_alignment[d] <= 1.0 + 1e-9);
    }

    REQUIRE(std::abs(oracle::determinant(oracle::to_mat(delta))) > 0.0);
    CHECK(r.delta_effective_rank == 8);

    // V'ᵀ row d = v_dᵀ Wᵀ (W + ΔW) / σ_d².
    auto wt_after = oracle::gram(w);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        double s = 0.0;
        for (std::size_t q = 0; q < 8; ++q) s += w.at(q, i) * after.at(q, j);
        wt_after[i][j] = s;
      }
    std::vector<std::vector<double>> rows(8, std::vector<double>(8, 0.0));
    for (std::size_t d = 0; d < 8; ++d)
      for (std::size_t j = 0; j < 8; ++j) {
        for (std::size_t i = 0; i < 8; ++i) rows[d][j] += vb[d][i] * wt_after[i][j];
        rows[d][j] /= eb[d];
      }
    double defect = 0.0;
    for (std::size_t d = 0; d < 8; ++d)
      for (std::size_t e = 0; e < 8; ++e) {
        double g = 0.0;
        for (std::size_t j = 0; j < 8; ++j) g += rows[d][j] * rows[e][j];
        if (d == e) g -= 1.0;
        defect += g * g;
      }
    CHECK(std::abs(r.orthogonality_defect - std::sqrt(defect)) < 1e-7);
    CHECK(r.orthogonality_defect > 0.0);
  }
}

TEST_CASE("spectral report: shape mismatch") {
  CHECK_THROWS_AS(spectral_perturbation_report(Tensor<double>(Shape{2, 3}, 1.0),
                                               Tensor<double>(Shape{3, 2}, 1.0)),
                  DimensionError);
}

TEST_CASE("singular item identity: scalar case") {
  Tensor<double> w(Shape{1, 1}, {2.0});
  Tensor<double> sl(Shape{1}, {3.0}), sr(Shape{1}, {4.0});
  CHECK(verify_singular_item_identity(w, sl, sr) == 0.0);
  CHECK(outer_scaled(w, sl, sr)[0] + w[0] == 26.0);
}

TEST_CASE("singular item identity: zero scales reduce to reconstruction") {
  Rng rng(31);
  auto w = testing::random_matrix(rng, 5, 7, -1.0, 1.0);
  CHECK(verify_singular_item_identity(w, Tensor<double>(Shape{5}, 0.0),
                                      Tensor<double>(Shape{7}, 0.0)) < 1e-10);
}

TEST_CASE("singular item identity: holds across shapes") {
  Rng rng(32);
  auto w = testing::random_matrix(rng, 16, 16, -1.0, 1.0);
  CHECK(verify_singular_item_identity(w, testing::random_vector(rng, 16, -1.0, 1.0),
                                      testing::random_vector(rng, 16, -1.0, 1.0)) < 1e-8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = testing::extent(rng, 1, 16), n = testing::extent(rng, 1, 16);
    auto wr = testing::random_matrix(rng, m, n, -1.0, 1.0);
    CHECK(verify_singular_item_identity(wr, testing::random_vector(rng, m, -1.0, 1.0),
                                        testing::random_vector(rng, n, -1.0, 1.0)) < 1e-8);
  }
  CHECK_THROWS_AS(verify_singular_item_identity(w, Tensor<double>(Shape{3}, 0.0),
                                                Tensor<double>(Shape{16}, 0.0)),
                  DimensionError);
}
