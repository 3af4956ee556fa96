#include "rtt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace rtt {

std::pair<double, Tensor<double>> value_and_grad(const ScalarFn& f, const Tensor<double>& x) {
  Tape<double> tape;
  auto xv = tape.variable(x);
  auto out = f(tape, xv);
  tape.backward(out);
  return {out.value()[0], tape.grad(xv)};
}

GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& x, double eps, double kink_tolerance) {
  GradCheckResult result;
  const auto analytic = value_and_grad(f, x).second;
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape;
    return f(tape, tape.constant(at)).value()[0];
  };
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    probe[i] = orig + eps;
    const double fp = eval(probe);
    const auto gp = value_and_grad(f, probe).second[i];
    probe[i] = orig - eps;
    const double fm = eval(probe);
    const auto gm = value_and_grad(f, probe).second[i];
    probe[i] = orig;

    const double a = analytic[i];
    if (std::abs(gp - gm) > kink_tolerance * (std::abs(a) + 1.0)) {
      result.flagged.push_back(i);
      continue;
    }
    const double cd = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.checked;
  }
  return result;
}

}  // namespace rtt
