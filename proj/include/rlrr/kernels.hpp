#pragma once

// Dense inner-loop kernels. Every routine has a portable scalar reference and
// an AVX2 variant; the active table is picked once per process from CPU
// features, or forced with RLRR_KERNELS=scalar|avx2.
//
// gemm and axpy variants are bitwise identical to the scalar reference: the
// AVX2 code uses separate multiply and add (no FMA) and the same per-element
// accumulation order. dot reduces in lanes and agrees only to rounding.

#include <cstddef>
#include <string_view>

namespace rlrr::kernels {

template <typename T>
struct Ops {
  // C[m×n] = A[m×k] · B[k×n], row-major, C overwritten.
  void (*gemm)(std::size_t m, std::size_t k, std::size_t n, const T* a,
               const T* b, T* c);
  // C[m×n] = A[m×k] · B[n×k]ᵀ.
  void (*gemm_nt)(std::size_t m, std::size_t k, std::size_t n, const T* a,
                  const T* b, T* c);
  // y += alpha · x
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
  T (*dot)(std::size_t n, const T* x, const T* y);
};

struct Table {
  std::string_view name;
  Ops<float> f32;
  Ops<double> f64;
};

namespace scalar {
extern const Table table;
}

namespace avx2 {
/// Nullptr when the build has no AVX2 backend.
const Table* table();
}

bool cpu_has_avx2();

/// Active table for this process.
const Table& active();

/// Force a backend by name ("scalar", "avx2", "auto"); returns false when the
/// requested backend is unavailable. Tests use this to compare variants.
bool select(std::string_view name);

template <typename T>
const Ops<T>& ops() {
  if constexpr (sizeof(T) == sizeof(float)) {
    return active().f32;
  } else {
    return active().f64;
  }
}

}  // namespace rlrr::kernels
