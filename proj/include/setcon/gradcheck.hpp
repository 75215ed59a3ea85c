#pragma once

#include <functional>
#include <string>

#include "setcon/params.hpp"

namespace setcon {

struct GradCheckResult {
  /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Builds a scalar on the given tape from a single input.
using ScalarFn = std::function<Var<double>(Var<double>)>;
/// Builds a scalar on the given tape from bound parameters.
using ScalarTreeFn = std::function<Var<double>(Tape<double>&, const BoundParameters<double>&)>;

/// Compares tape gradients against central differences at every coordinate
/// of theta. Throws NumericError on non-finite function values.
GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& theta, double eps = 1e-5);

/// Same over every coordinate of every tree entry. `stride` > 1 checks only
/// every stride-th coordinate of each entry (always including the first).
GradCheckResult grad_check(const ScalarTreeFn& f, const ParameterTree<double>& theta, double eps = 1e-5,
                           std::size_t stride = 1);

}  // namespace setcon
