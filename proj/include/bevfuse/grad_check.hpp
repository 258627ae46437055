#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

struct GradCheckOptions {
  double epsilon = 1e-3;
  // Above this many input coordinates, a seeded subsample is probed instead.
  std::size_t max_full_coordinates = 10000;
  std::size_t subsample = 2048;
  std::uint64_t seed = 0x6A09E667F3BCC908ULL;
  // Denominator floor, relative to the largest analytic gradient magnitude,
  // so coordinates whose true gradient is ~0 are compared absolutely.
  double relative_floor = 1e-3;
  // Leave out probes whose +/- epsilon evaluations take a different branch of
  // a piecewise op (relu, max, abs) than the unperturbed point.
  bool skip_kink_crossings = true;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t kink_crossings_skipped = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

template <typename T>
using GraphFn = std::function<BasicTensor<T>(std::span<const BasicTensor<T>>)>;

// Compares tape gradients with central differences. A non-scalar graph
// output is reduced by a fixed seeded random projection. Inputs are
// perturbed in place through their handles, so tensors aliased elsewhere
// (e.g. inside a ParamStore captured by `graph`) see the perturbation.
template <typename T>
GradCheckResult grad_check(const GraphFn<T>& graph, std::vector<BasicTensor<T>> inputs,
                           const GradCheckOptions& options = {});

extern template GradCheckResult grad_check<float>(const GraphFn<float>&, std::vector<BasicTensor<float>>,
                                                  const GradCheckOptions&);
extern template GradCheckResult grad_check<double>(const GraphFn<double>&, std::vector<BasicTensor<double>>,
                                                   const GradCheckOptions&);

}  // namespace bevfuse
