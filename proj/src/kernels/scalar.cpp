#include <algorithm>

#include "rlrr/kernels.hpp"

namespace rlrr::kernels::scalar {
namespace {

template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b,
          T* c) {
  std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        T prod = aip * brow[j];
        crow[j] = crow[j] + prod;
      }
    }
  }
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T prod = x[i] * y[i];
    acc = acc + prod;
  }
  return acc;
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      c[i * n + j] = dot(k, a + i * k, b + j * k);
    }
  }
}

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) {
    T prod = alpha * x[i];
    y[i] = y[i] + prod;
  }
}

}  // namespace

const Table table{
    "scalar",
    {&gemm<float>, &gemm_nt<float>, &axpy<float>, &dot<float>},
    {&gemm<double>, &gemm_nt<double>, &axpy<double>, &dot<double>},
};

}  // namespace rlrr::kernels::scalar
