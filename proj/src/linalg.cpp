#include "rlrr/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rlrr::linalg {
namespace {

using Column = std::vector<double>;

double dot(const Column& a, const Column& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Orthonormal completion: column j of `u` is replaced by the standard basis
// vector with the largest residual after two rounds of Gram–Schmidt against
// every column flagged as valid.
void complete_basis(std::vector<Column>& u, std::vector<bool>& valid) {
  const std::size_t m = u.empty() ? 0 : u.front().size();
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (valid[j]) continue;
    Column best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < m; ++e) {
      Column c(m, 0.0);
      c[e] = 1.0;
      for (int round = 0; round < 2; ++round) {
        for (std::size_t q = 0; q < u.size(); ++q) {
          if (!valid[q]) continue;
          const double proj = dot(c, u[q]);
          for (std::size_t i = 0; i < m; ++i) c[i] -= proj * u[q][i];
        }
      }
      const double nrm = std::sqrt(dot(c, c));
      if (nrm > best_norm + 1e-12) {
        best_norm = nrm;
        best = std::move(c);
      }
    }
    for (double& x : best) x /= best_norm;
    u[j] = std::move(best);
    valid[j] = true;
  }
}

std::vector<Column> columns_of(const Tensor<double>& a) {
  std::vector<Column> cols(a.cols(), Column(a.rows()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) cols[j][i] = a.at(i, j);
  return cols;
}

Tensor<double> from_columns(const std::vector<Column>& cols, std::size_t rows) {
  Tensor<double> t(Shape{rows, cols.size()});
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < rows; ++i) t.at(i, j) = cols[j][i];
  return t;
}

// Tall case (m ≥ n). Returns U m×n, sigma n, V n×n before ordering.
void jacobi_tall(const Tensor<double>& a, const SvdOptions& opts, std::vector<Column>& g,
                 std::vector<Column>& v, std::size_t& sweeps) {
  const std::size_t n = a.cols();
  g = columns_of(a);
  v.assign(n, Column(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

  double off = 0.0;
  for (sweeps = 1; sweeps <= opts.max_sweeps; ++sweeps) {
    bool rotated = false;
    off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(g[p], g[p]);
        const double beta = dot(g[q], g[q]);
        const double gamma = dot(g[p], g[q]);
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        const double measure = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, measure);
        if (measure <= opts.tolerance) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < g[p].size(); ++i) {
          const double gp = g[p][i], gq = g[q][i];
          g[p][i] = c * gp - s * gq;
          g[q][i] = s * gp + c * gq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[p][i], vq = v[q][i];
          v[p][i] = c * vp - s * vq;
          v[q][i] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericalError("svd: Jacobi sweeps did not converge, residual off-diagonal " +
                           std::to_string(off),
                       off);
}

bool lex_greater(const Column& a, const Column& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return a[i] > b[i];
  }
  return false;
}

// Sign convention on U, then a deterministic order inside clusters of
// coincident singular values.
void canonicalize(std::vector<Column>& u, std::vector<Column>& v, std::vector<double>& s) {
  const std::size_t k = s.size();
  for (std::size_t r = 0; r < k; ++r) {
    for (double x : u[r]) {
      if (std::abs(x) > 1e-12) {
        if (x < 0.0) {
          for (double& y : u[r]) y = -y;
          for (double& y : v[r]) y = -y;
        }
        break;
      }
    }
  }
  Tensor<double> sig_t(Shape{k}, s);
  for (auto [first, last] : degenerate_clusters(sig_t, 1e-13)) {
    if (last - first < 2) continue;
    std::vector<std::size_t> idx(last - first);
    std::iota(idx.begin(), idx.end(), first);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return lex_greater(u[x], u[y]); });
    std::vector<Column> u2, v2;
    double mean = 0.0;
    for (std::size_t x : idx) {
      u2.push_back(u[x]);
      v2.push_back(v[x]);
      mean += s[x];
    }
    mean /= double(idx.size());
    for (std::size_t q = 0; q < idx.size(); ++q) {
      u[first + q] = std::move(u2[q]);
      v[first + q] = std::move(v2[q]);
      s[first + q] = mean;
    }
  }
}

}  // namespace

SvdFactorization svd(const Tensor<double>& w, const SvdOptions& opts) {
  if (w.rank() != 2 || w.rows() == 0 || w.cols() == 0) {
    throw DimensionError("svd: expected a non-empty matrix, got " + shape_str(w.shape()));
  }
  if (!w.all_finite()) throw ContractError("svd: matrix has non-finite entries");

  const bool wide = w.rows() < w.cols();
  const Tensor<double> a = wide ? transpose(w) : w;
  const std::size_t m = a.rows(), k = a.cols();

  std::vector<Column> g, v;
  SvdFactorization out;
  jacobi_tall(a, opts, g, v, out.sweeps);

  std::vector<double> sigma(k);
  for (std::size_t j = 0; j < k; ++j) sigma[j] = std::sqrt(dot(g[j], g[j]));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double smax = sigma[order.front()];
  std::vector<Column> u(k), vs(k);
  std::vector<double> s(k);
  std::vector<bool> valid(k, true);
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t j = order[r];
    s[r] = sigma[j];
    vs[r] = v[j];
    if (s[r] > 0.0 && s[r] > smax * 1e-14) {
      u[r] = g[j];
      for (double& x : u[r]) x /= s[r];
    } else {
      u[r] = Column(m, 0.0);
      valid[r] = false;
    }
  }
  complete_basis(u, valid);

  if (wide) std::swap(u, vs);
  canonicalize(u, vs, s);
  out.u = from_columns(u, w.rows());
  out.v = from_columns(vs, w.cols());
  out.sigma = Tensor<double>(Shape{k}, std::move(s));
  return out;
}

Tensor<double> reconstruct(const SvdFactorization& f) {
  const std::size_t m = f.u.rows(), n = f.v.rows(), k = f.sigma.size();
  Tensor<double> us = f.u;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t d = 0; d < k; ++d) us.at(i, d) *= f.sigma[d];
  Tensor<double> out = matmul(us, transpose(f.v));
  return out.reshaped({m, n});
}

std::size_t effective_rank(const Tensor<double>& delta, double tol) {
  if (!(tol > 0.0)) throw ContractError("effective_rank: tolerance must be positive");
  const SvdFactorization f = svd(delta);
  const double smax = f.sigma[0];
  if (smax == 0.0) return 0;
  std::size_t r = 0;
  for (double s : f.sigma.data()) r += s > tol * smax ? 1 : 0;
  return r;
}

std::vector<std::pair<std::size_t, std::size_t>> degenerate_clusters(const Tensor<double>& sigma,
                                                                     double rel_tol) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t k = sigma.size();
  if (k == 0) return out;
  const double smax = sigma[0];
  std::size_t first = 0;
  for (std::size_t i = 1; i <= k; ++i) {
    if (i == k || std::abs(sigma[i - 1] - sigma[i]) > rel_tol * smax) {
      out.emplace_back(first, i);
      first = i;
    }
  }
  return out;
}

std::vector<double> principal_cosines(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("principal_cosines: bases differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const Tensor<double> m = matmul(transpose(a), b);
  const SvdFactorization f = svd(m.reshaped({a.cols(), b.cols()}));
  return std::vector<double>(f.sigma.data().begin(), f.sigma.data().end());
}

namespace {

// Union of the cluster partitions of two spectra: overlapping ranges merge.
std::vector<std::pair<std::size_t, std::size_t>> merged_clusters(const Tensor<double>& a,
                                                                 const Tensor<double>& b) {
  const std::size_t k = a.size();
  std::vector<bool> cut(k + 1, false);
  cut[0] = cut[k] = true;
  auto ca = degenerate_clusters(a), cb = degenerate_clusters(b);
  // A boundary survives only if both partitions have it.
  std::vector<int> votes(k + 1, 0);
  for (auto [f, l] : ca) ++votes[l];
  for (auto [f, l] : cb) ++votes[l];
  for (std::size_t i = 1; i < k; ++i) cut[i] = votes[i] == 2;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t first = 0;
  for (std::size_t i = 1; i <= k; ++i) {
    if (cut[i]) {
      out.emplace_back(first, i);
      first = i;
    }
  }
  return out;
}

}  // namespace

SpectralReport spectral_perturbation_report(const Tensor<double>& w, const Tensor<double>& delta) {
  if (w.shape() != delta.shape()) {
    throw DimensionError("spectral report: weight " + shape_str(w.shape()) + " and delta " +
                         shape_str(delta.shape()) + " differ");
  }
  const SvdFactorization fb = svd(w);
  const std::size_t k0 = fb.sigma.size();
  if (std::all_of(delta.data().begin(), delta.data().end(), [](double x) { return x == 0.0; })) {
    SpectralReport r;
    r.spectrum_before = fb.sigma;
    r.spectrum_after = fb.sigma;
    r.subspace_alignment = Tensor<double>(Shape{k0}, 1.0);
    return r;
  }
  const Tensor<double> after = add(w, delta);
  const SvdFactorization fa = svd(after);
  const std::size_t k = fb.sigma.size();

  SpectralReport r;
  r.spectrum_before = fb.sigma;
  r.spectrum_after = fa.sigma;
  r.subspace_alignment = Tensor<double>(Shape{k});
  for (auto [first, last] : merged_clusters(fb.sigma, fa.sigma)) {
    auto cos = principal_cosines(slice_cols(fb.v, first, last), slice_cols(fa.v, first, last));
    for (std::size_t q = 0; q < cos.size(); ++q)
      r.subspace_alignment[first + q] = std::min(cos[q], 1.0);
  }
  r.delta_effective_rank = effective_rank(delta);

  // V'ᵀ = Σ⁻¹ Uᵀ (W + ΔW) over the non-null part of W's spectrum.
  const double smax = fb.sigma[0];
  std::size_t live = 0;
  while (live < k && fb.sigma[live] > 1e-12 * smax) ++live;
  if (live > 0) {
    Tensor<double> vpt = matmul(transpose(slice_cols(fb.u, 0, live)), after);
    const std::size_t n = vpt.cols();
    for (std::size_t d = 0; d < live; ++d)
      for (std::size_t j = 0; j < n; ++j) vpt.at(d, j) /= fb.sigma[d];
    Tensor<double> gram = matmul(vpt, transpose(vpt));
    for (std::size_t d = 0; d < live; ++d) gram.at(d, d) -= 1.0;
    r.orthogonality_defect = frobenius(gram);
  }
  return r;
}

double verify_singular_item_identity(const Tensor<double>& w, const Tensor<double>& s_left,
                                     const Tensor<double>& s_right) {
  const std::size_t m = w.rows(), n = w.cols();
  if (s_left.size() != m || s_right.size() != n) {
    throw DimensionError("singular item identity: scales " + shape_str(s_left.shape()) + "/" +
                         shape_str(s_right.shape()) + " do not bind to " + shape_str(w.shape()));
  }
  Tensor<double> direct(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double wij = w.at(i, j);
      direct.at(i, j) = wij + s_left[i] * wij * s_right[j];
    }

  const SvdFactorization f = svd(w);
  Tensor<double> items(Shape{m, n});
  for (std::size_t d = 0; d < f.sigma.size(); ++d) {
    const double lambda = f.sigma[d];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        items.at(i, j) += (1.0 + s_left[i] * s_right[j]) * lambda * f.u.at(i, d) * f.v.at(j, d);
  }
  return max_abs_diff(direct, items);
}

}  // namespace rlrr::linalg
