#pragma once

#include <cmath>

#include "rlrr/random.hpp"
#include "rlrr/tensor.hpp"

namespace rlrr::testing {

inline Tensor<double> random_matrix(Rng& rng, std::size_t m, std::size_t n,
                                    double lo = -1.0, double hi = 1.0) {
  return rng.uniform_tensor<double>({m, n}, lo, hi);
}

inline Tensor<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0,
                                    double hi = 1.0) {
  return rng.uniform_tensor<double>({n}, lo, hi);
}

inline std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.below(hi - lo + 1);
}

}  // namespace rlrr::testing
