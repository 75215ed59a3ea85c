#include "setcon/optim.hpp"

#include <cmath>

namespace setcon {

template <typename T>
void adam_step(ParameterTree<T>& params, const ParameterTree<T>& grads, OptimizerState<T>& state) {
  params.require_congruent(grads, "adam_step gradients");
  params.require_congruent(state.first_moment, "adam_step first moment");
  params.require_congruent(state.second_moment, "adam_step second moment");
  const auto& h = state.hyper;
  const std::uint64_t step = state.step + 1;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const T b1 = T(h.beta1), b2 = T(h.beta2);
  const T lr = T(h.lr), eps = T(h.eps), decay = T(h.lr * h.weight_decay);
  const T inv_c1 = T(1.0 / c1), inv_c2 = T(1.0 / c2);

  for (auto& [name, p] : params) {
    auto& theta = p.value;
    const auto& g = grads.at(name);
    auto& m = state.first_moment.at(name);
    auto& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T m_hat = m[i] * inv_c1;
      const T v_hat = v[i] * inv_c2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      theta[i] -= decay * theta[i];
    }
  }
  state.step = step;
}

template void adam_step(ParameterTree<float>&, const ParameterTree<float>&, OptimizerState<float>&);
template void adam_step(ParameterTree<double>&, const ParameterTree<double>&, OptimizerState<double>&);

}  // namespace setcon
