#include "setcon/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace setcon {

namespace {

double checked(double v) {
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

void record(GradCheckResult& r, const std::string& name, std::size_t index, double analytic, double numeric) {
  if (!std::isfinite(analytic)) throw NumericError("grad_check: non-finite analytic gradient at " + name);
  const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
  ++r.coordinates;
  if (err >= r.max_rel_error) {
    r.max_rel_error = err;
    r.worst_name = name;
    r.worst_index = index;
    r.analytic = analytic;
    r.numeric = numeric;
  }
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Tensor<double>& theta, double eps) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    auto x = tape.variable(theta);
    auto out = f(x);
    checked(out.value()[0]);
    tape.backward(out);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape;
    return checked(f(tape.constant(at)).value()[0]);
  };
  GradCheckResult r;
  Tensor<double> probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + eps;
    const double up = eval(probe);
    probe[i] = theta[i] - eps;
    const double down = eval(probe);
    probe[i] = theta[i];
    record(r, "theta", i, analytic[i], (up - down) / (2 * eps));
  }
  return r;
}

GradCheckResult grad_check(const ScalarTreeFn& f, const ParameterTree<double>& theta, double eps,
                           std::size_t stride) {
  ParameterTree<double> analytic;
  {
    Tape<double> tape;
    BoundParameters<double> bound(tape, theta, true);
    auto out = f(tape, bound);
    checked(out.value()[0]);
    tape.backward(out);
    analytic = bound.gradients();
  }
  ParameterTree<double> probe = theta;
  auto eval = [&] {
    Tape<double> tape;
    BoundParameters<double> bound(tape, probe, false);
    return checked(f(tape, bound).value()[0]);
  };
  GradCheckResult r;
  stride = std::max<std::size_t>(stride, 1);
  for (const auto& [name, p] : theta) {
    auto& slot = probe.at(name);
    for (std::size_t i = 0; i < p.value.size(); i += stride) {
      const double base = p.value[i];
      slot[i] = base + eps;
      const double up = eval();
      slot[i] = base - eps;
      const double down = eval();
      slot[i] = base;
      record(r, name, i, analytic.at(name)[i], (up - down) / (2 * eps));
    }
  }
  return r;
}

}  // namespace setcon
