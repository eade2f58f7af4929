#pragma once

#include <cstddef>
#include <optional>

#include "rlrr/tensor.hpp"

namespace rlrr::linalg {

/// W = U · diag(sigma) · Vᵀ with k = min(m, n).
///
/// Invariants: sigma is non-negative and non-increasing; U and V have
/// orthonormal columns; the first entry of every U column with magnitude
/// above 1e-12 is non-negative. Columns that share a singular value (a
/// degenerate cluster) are ordered lexicographically by their U column,
/// descending, after the sign fix.
struct SvdFactorization {
  Tensor<double> u;      // m×k, left singular vectors
  Tensor<double> sigma;  // k
  Tensor<double> v;      // n×k, right singular vectors
  std::size_t sweeps = 0;
};

struct SvdOptions {
  double tolerance = 1e-12;
  std::size_t max_sweeps = 60;
};

/// One-sided (Hestenes) Jacobi SVD. Throws NumericalError carrying the
/// residual off-diagonal measure when max_sweeps is exhausted.
SvdFactorization svd(const Tensor<double>& w, const SvdOptions& opts = {});

Tensor<double> reconstruct(const SvdFactorization& f);

/// Number of singular values strictly above tol·σ_max; 0 for a zero matrix.
std::size_t effective_rank(const Tensor<double>& delta, double tol = 1e-8);

/// Index ranges [first, last) of singular values that coincide within
/// rel_tol·σ_max.
std::vector<std::pair<std::size_t, std::size_t>> degenerate_clusters(
    const Tensor<double>& sigma, double rel_tol = 1e-8);

/// Cosines of the principal angles between span(a) and span(b), descending.
/// Both inputs have orthonormal columns and the same shape.
std::vector<double> principal_cosines(const Tensor<double>& a,
                                      const Tensor<double>& b);

struct SpectralReport {
  Tensor<double> spectrum_before;
  Tensor<double> spectrum_after;
  /// Per index, |cos| of the principal angle between the right singular
  /// subspaces of W and W + ΔW, computed cluster-wise over degenerate groups.
  Tensor<double> subspace_alignment;
  std::size_t delta_effective_rank = 0;
  /// ‖V'ᵀV' − I‖_F where V'ᵀ = Σ⁻¹Uᵀ(W + ΔW) restricted to non-zero σ: the
  /// right vectors W + ΔW would need if W's left vectors and spectrum were
  /// kept. For a column rescaling W·diag(s) this is exactly the columns of V
  /// scaled by s.
  double orthogonality_defect = 0.0;
};

SpectralReport spectral_perturbation_report(const Tensor<double>& w,
                                            const Tensor<double>& delta);

/// Reconstructs W + s_left ⊙ W ⊙ s_rightᵀ directly and as the sum of
/// singular items Σ_d (1 + s_left[i]·s_right[j])·λ_d·U[i,d]·V[j,d]; returns
/// the largest absolute entry difference.
double verify_singular_item_identity(const Tensor<double>& w,
                                     const Tensor<double>& s_left,
                                     const Tensor<double>& s_right);

}  // namespace rlrr::linalg
