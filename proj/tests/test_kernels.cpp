#include <cstring>
#include <vector>

#include "doctest.h"
#include "rlrr/kernels.hpp"
#include "testing.hpp"

using namespace rlrr;

namespace {

template <typename T>
std::vector<T> draw(Rng& rng, std::size_t n) {
  std::vector<T> v(n);
  for (T& x : v) x = static_cast<T>(rng.uniform(-2.0, 2.0));
  return v;
}

template <typename T>
bool same_bits(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
void check_equivalence(const kernels::Ops<T>& ref, const kernels::Ops<T>& simd) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = testing::extent(rng, 1, 19);
    const std::size_t k = testing::extent(rng, 1, 37);
    const std::size_t n = testing::extent(rng, 1, 41);
    auto a = draw<T>(rng, m * k);
    auto b = draw<T>(rng, k * n);
    auto bt = draw<T>(rng, n * k);
    std::vector<T> c_ref(m * n), c_simd(m * n);
    ref.gemm(m, k, n, a.data(), b.data(), c_ref.data());
    simd.gemm(m, k, n, a.data(), b.data(), c_simd.data());
    REQUIRE(same_bits(c_ref, c_simd));

    std::vector<T> y_ref = draw<T>(rng, n), y_simd = y_ref;
    auto x = draw<T>(rng, n);
    ref.axpy(n, T(0.75), x.data(), y_ref.data());
    simd.axpy(n, T(0.75), x.data(), y_simd.data());
    REQUIRE(same_bits(y_ref, y_simd));

    // dot reduces in lanes; compare against the scalar order within rounding.
    const double tol = sizeof(T) == 4 ? 1e-4 : 1e-12;
    ref.gemm_nt(m, k, n, a.data(), bt.data(), c_ref.data());
    simd.gemm_nt(m, k, n, a.data(), bt.data(), c_simd.data());
    for (std::size_t i = 0; i < m * n; ++i) {
      REQUIRE(std::abs(double(c_ref[i]) - double(c_simd[i])) <= tol * (1.0 + std::abs(double(c_ref[i]))));
    }
  }
}

}  // namespace

TEST_CASE("scalar gemm matches a hand-computed product") {
  const double a[] = {1, 2, 3, 4};
  const double b[] = {0, 1};
  double c[2];
  kernels::scalar::table.f64.gemm(2, 2, 1, a, b, c);
  CHECK(c[0] == 2.0);
  CHECK(c[1] == 4.0);
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
  const kernels::Table* simd = kernels::avx2::table();
  if (!simd || !kernels::cpu_has_avx2()) {
    MESSAGE("AVX2 backend unavailable on this host; skipping equivalence");
    return;
  }
  check_equivalence(kernels::scalar::table.f32, simd->f32);
  check_equivalence(kernels::scalar::table.f64, simd->f64);
}

TEST_CASE("backend selection") {
  const std::string_view before = kernels::active().name;
  CHECK(kernels::select("scalar"));
  CHECK(kernels::active().name == "scalar");
  CHECK_FALSE(kernels::select("neon-on-x86"));
  CHECK(kernels::active().name == "scalar");
  if (kernels::cpu_has_avx2() && kernels::avx2::table()) {
    CHECK(kernels::select("avx2"));
    CHECK(kernels::active().name == "avx2");
  }
  kernels::select(before);
}

TEST_CASE("matmul results do not depend on the backend") {
  Rng rng(3);
  auto a = rng.uniform_tensor<float>({13, 29}, -1, 1);
  auto b = rng.uniform_tensor<float>({29, 11}, -1, 1);
  const std::string_view before = kernels::active().name;
  kernels::select("scalar");
  Tensor<float> ref = matmul(a, b);
  kernels::select("auto");
  Tensor<float> fast = matmul(a, b);
  kernels::select(before);
  CHECK(ref.identical(fast));
}
