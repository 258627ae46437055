#pragma once

#include <cmath>
#include <vector>

#include "bevfuse/rng.hpp"

namespace bevfuse {

// Glorot/Xavier uniform for a weight with the given fan-in and fan-out.
inline std::vector<float> xavier_uniform(std::size_t n, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(uniform(rng, -bound, bound));
  return v;
}

// He/Kaiming normal for ReLU layers.
inline std::vector<float> he_normal(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(normal(rng, 0.0, stddev));
  return v;
}

}  // namespace bevfuse
