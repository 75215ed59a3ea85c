#pragma once

#include <cstdint>

#include "setcon/params.hpp"

namespace setcon {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled: applied as theta -= lr * weight_decay * theta after the adaptive step.
  double weight_decay = 0.0;
};

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  ParameterTree<T> first_moment;
  ParameterTree<T> second_moment;
  AdamConfig hyper;

  static OptimizerState init(const ParameterTree<T>& params, AdamConfig hyper) {
    return OptimizerState{0, params.zeros_like(), params.zeros_like(), hyper};
  }
};

/// One bias-corrected Adam update of `params` in place. Throws
/// StructuralError when `grads` or the moments are not congruent to `params`.
template <typename T>
void adam_step(ParameterTree<T>& params, const ParameterTree<T>& grads, OptimizerState<T>& state);

}  // namespace setcon
