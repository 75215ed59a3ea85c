#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace setcon {

/// Counter-based seed derivation: one root seed is split into independent
/// named streams, each indexed by a counter (step, sequence number, ...).
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t counter = 0);

inline std::mt19937_64 make_rng(std::uint64_t root, std::string_view stream, std::uint64_t counter = 0) {
  return std::mt19937_64(derive_seed(root, stream, counter));
}

}  // namespace setcon
