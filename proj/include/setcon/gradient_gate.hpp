#pragma once

// Finite-difference suite over every differentiable operation and the
// end-to-end training objectives (64-bit, micro-batches of 2 sequences x 3
// frames of 5x5 pixels).

#include <cstdint>
#include <string>
#include <vector>

#include "setcon/gradcheck.hpp"

namespace setcon::gate {

inline constexpr double kTolerance = 1e-4;
/// Central-difference step for the end-to-end checks. Contrastive logits of
/// an untrained model are large enough that 1e-5 leaves visible truncation error.
inline constexpr double kObjectiveStep = 1e-6;

struct GateCase {
  std::string name;
  GradCheckResult result;
  bool passed = false;
};

/// Names of the single-operation checks.
std::vector<std::string> primitive_names();
/// Names of the end-to-end checks.
std::vector<std::string> objective_names();

/// One randomized check of operation `name` (shapes and values drawn from `seed`).
GradCheckResult check_primitive(const std::string& name, std::uint64_t seed);

/// One check of objective `name` on a freshly initialized model.
GradCheckResult check_objective(const std::string& name, std::uint64_t seed, double eps = kObjectiveStep);

struct GateOptions {
  std::size_t trials = 3;  ///< random draws per primitive
  std::uint64_t seed = 0;
  double tolerance = kTolerance;
  bool objectives = true;
};

std::vector<GateCase> run_gradient_gate(const GateOptions& options = {});

}  // namespace setcon::gate
