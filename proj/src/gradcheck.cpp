#include "rlrr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace rlrr {

bool GradCheckReport::passed() const {
  return std::all_of(params.begin(), params.end(),
                     [](const ParamCheck& p) { return p.passed; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

namespace {

double evaluate(const LossBuilder& loss, const std::vector<CheckedParam>& params) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.constant(p.value));
  return loss(tape, leaves).value()[0];
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss,
                                  const std::vector<CheckedParam>& params,
                                  double h, double tol) {
  if (h < 1e-6 || h > 1e-3) {
    throw ContractError("finite_diff_check: step h must lie in [1e-6, 1e-3]");
  }
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p.value, p.trainable, p.name));
  ad::Var<double> out = loss(tape, leaves);
  ad::Gradients<double> grads = tape.backward(out);

  GradCheckReport report;
  report.tolerance = tol;
  std::vector<CheckedParam> probe = params;
  for (std::size_t q = 0; q < params.size(); ++q) {
    if (!params[q].trainable) continue;
    const Tensor<double>& analytic = grads.of(leaves[q]);
    ParamCheck check;
    check.name = params[q].name;
    for (std::size_t i = 0; i < params[q].value.size(); ++i) {
      const double orig = params[q].value[i];
      probe[q].value[i] = orig + h;
      const double fp = evaluate(loss, probe);
      probe[q].value[i] = orig - h;
      const double fm = evaluate(loss, probe);
      probe[q].value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > check.max_rel_error || (i == 0 && check.max_rel_error == 0.0)) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.analytic = a;
        check.numeric = numeric;
      }
    }
    check.passed = check.max_rel_error < tol;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace rlrr
