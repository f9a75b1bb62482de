#ifndef MILKIT_TESTS_GRADCHECK_HPP_
#define MILKIT_TESTS_GRADCHECK_HPP_

#include <algorithm>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "milkit/autograd.hpp"

namespace milkit::testing {

struct GradReport {
  double worst = 0.0;   // largest per-tensor relative error
  std::string where;    // tensor that produced it
};

// Compares backward() against central differences for every entry of
// every Var in `inputs`. Error per tensor is |a - n| / max(|a|, |n|) with
// norms taken over the whole tensor.
inline GradReport check_gradients(const std::vector<std::pair<std::string, ag::Var>>& inputs,
                                  const std::function<ag::Var(ag::Tape&)>& build,
                                  double eps = 1e-6) {
  for (const auto& item : inputs) item.second->zero_grad();
  {
    ag::Tape tape;
    tape.backward(build(tape));
  }
  const auto value = [&] {
    ag::Tape tape(false);
    return build(tape)->value(0, 0);
  };
  GradReport report;
  for (const auto& [name, var] : inputs) {
    const ag::Matrix analytic = var->grad.size() == 0
                                ? ag::Matrix::Zero(var->value.rows(), var->value.cols())
                                : var->grad;
    ag::Matrix numeric(var->value.rows(), var->value.cols());
    for (Eigen::Index i = 0; i < var->value.size(); ++i) {
      const double keep = var->value.data()[i];
      var->value.data()[i] = keep + eps;
      const double up = value();
      var->value.data()[i] = keep - eps;
      const double down = value();
      var->value.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2.0 * eps);
    }
    const double scale = std::max(analytic.norm(), numeric.norm());
    const double err = scale < 1e-10 ? (analytic - numeric).norm() : (analytic - numeric).norm() / scale;
    if (err > report.worst) {
      report.worst = err;
      report.where = name;
    }
  }
  return report;
}

}  // namespace milkit::testing

#endif  // MILKIT_TESTS_GRADCHECK_HPP_
