#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rlrr/autodiff.hpp"

namespace rlrr {

struct CheckedParam {
  std::string name;
  Tensor<double> value;
  bool trainable = true;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;  // trainable parameters only
  double tolerance = 0.0;
  bool passed() const;
  double max_rel_error() const;
};

/// Builds a scalar loss on the given tape from one leaf per parameter, in the
/// order the parameters were passed.
using LossBuilder = std::function<ad::Var<double>(
    ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Central differences (f(p+h) − f(p−h)) / 2h against the reverse-mode
/// gradient for every entry of every trainable parameter. The relative error
/// of an entry is |a − n| / max(|a|, |n|, 1e-3); the floor keeps entries
/// whose true gradient is ~0 from reporting noise as relative error.
GradCheckReport finite_diff_check(const LossBuilder& loss,
                                  const std::vector<CheckedParam>& params,
                                  double h = 1e-5, double tol = 1e-4);

}  // namespace rlrr
