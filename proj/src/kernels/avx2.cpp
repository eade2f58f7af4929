// Compiled with -mavx2 -ffp-contract=off. Keep multiplies and adds separate so
// gemm/axpy stay bitwise equal to the scalar reference.

#include <immintrin.h>

#include <algorithm>

#include "rlrr/kernels.hpp"

namespace rlrr::kernels::avx2 {
namespace {

void axpy_f32(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) {
    float prod = alpha * x[i];
    y[i] = y[i] + prod;
  }
}

void axpy_f64(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) {
    double prod = alpha * x[i];
    y[i] = y[i] + prod;
  }
}

template <typename T, void (*Axpy)(std::size_t, T, const T*, T*)>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b,
          T* c) {
  std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      Axpy(n, a[i * k + p], b + p * n, c + i * n);
    }
  }
}

float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d high64 = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
}

float dot_f32(std::size_t n, const float* x, const float* y) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc = _mm256_add_ps(
        acc, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  float s = hsum(acc);
  for (; i < n; ++i) {
    float prod = x[i] * y[i];
    s = s + prod;
  }
  return s;
}

double dot_f64(std::size_t n, const double* x, const double* y) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(
        acc, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  double s = hsum(acc);
  for (; i < n; ++i) {
    double prod = x[i] * y[i];
    s = s + prod;
  }
  return s;
}

template <typename T, T (*Dot)(std::size_t, const T*, const T*)>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] = Dot(k, a + i * k, b + j * k);
    }
  }
}

const Table kTable{
    "avx2",
    {&gemm<float, &axpy_f32>, &gemm_nt<float, &dot_f32>, &axpy_f32, &dot_f32},
    {&gemm<double, &axpy_f64>, &gemm_nt<double, &dot_f64>, &axpy_f64,
     &dot_f64},
};

}  // namespace

const Table* table() { return &kTable; }

}  // namespace rlrr::kernels::avx2
