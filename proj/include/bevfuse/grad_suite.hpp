#pragma once

#include <string>
#include <vector>

#include "bevfuse/grad_check.hpp"

namespace bevfuse {

struct GradSuiteEntry {
  std::string name;
  GradCheckResult result;
};

struct GradSuiteOptions {
  double epsilon = 1e-3;
  std::uint64_t seed = 1;
  bool end_to_end = true;  // the five fusion -> encode -> head -> loss graphs
};

// Finite-difference checks of every differentiable op, each fusion operator
// and the full detection graphs on 8x8 grids, all in double precision.
std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& options = {});

}  // namespace bevfuse
