#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "rtt/autodiff.hpp"

namespace rtt {

/// Scalar-valued function built on a double tape from a single input variable.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose analytic gradient jumps inside the +-eps window (a kink such as
  /// relu at 0). They are excluded from max_rel_error.
  std::vector<std::size_t> flagged;
};

/// Compares the tape gradient of f at x with central differences.
/// Per coordinate: |analytic - cd| / (|analytic| + |cd| + 1e-12).
GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-6,
                           double kink_tolerance = 1e-3);

/// Value and gradient of f at x.
std::pair<double, Tensor<double>> value_and_grad(const ScalarFn& f, const Tensor<double>& x);

}  // namespace rtt
