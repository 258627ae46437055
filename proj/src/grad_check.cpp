#include "bevfuse/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "bevfuse/rng.hpp"

namespace bevfuse {

namespace {

template <typename T>
double evaluate(const GraphFn<T>& graph, std::span<const BasicTensor<T>> inputs, const std::vector<double>& weights,
                std::uint64_t* fingerprint);

template <typename T>
double project(const BasicTensor<T>& out, const std::vector<double>& weights) {
  if (out.numel() == 1 && weights.empty()) return static_cast<double>(out.data()[0]);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * static_cast<double>(out.data()[i]);
  return acc;
}

template <typename T>
double evaluate(const GraphFn<T>& graph, std::span<const BasicTensor<T>> inputs, const std::vector<double>& weights,
                std::uint64_t* fingerprint) {
  if (fingerprint) debug::start_branch_trace();
  const auto out = graph(inputs);
  if (fingerprint) *fingerprint = debug::stop_branch_trace();
  return project(out, weights);
}

}  // namespace

template <typename T>
GradCheckResult grad_check(const GraphFn<T>& graph, std::vector<BasicTensor<T>> inputs,
                           const GradCheckOptions& options) {
  if (!(options.epsilon > 0.0 && options.epsilon <= 1e-1)) {
    throw RangeError("grad_check epsilon must lie in (0, 0.1]");
  }
  Rng rng(options.seed);

  // Analytic pass.
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  std::vector<double> weights;
  {
    Tape<T> tape;
    const BasicTensor<T> out = graph(inputs);
    if (out.numel() != 1) {
      weights.resize(out.numel());
      for (auto& w : weights) w = uniform(rng, -1.0, 1.0);
    }
    std::vector<T> seed(out.numel(), T(1));
    for (std::size_t i = 0; i < weights.size(); ++i) seed[i] = static_cast<T>(weights[i]);
    tape.backward(out, seed);
  }
  std::vector<std::vector<double>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic[i].assign(inputs[i].numel(), 0.0);
    if (inputs[i].has_grad()) std::copy(inputs[i].grad().begin(), inputs[i].grad().end(), analytic[i].begin());
  }

  // Coordinates to probe.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (const auto& in : inputs) total += in.numel();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) coords.emplace_back(i, j);
  }
  if (total > options.max_full_coordinates && options.subsample < coords.size()) {
    for (std::size_t k = 0; k < options.subsample; ++k) {
      const std::size_t pick = k + uniform_index(rng, coords.size() - k);
      std::swap(coords[k], coords[pick]);
    }
    coords.resize(options.subsample);
  }

  double scale = 0.0;
  for (const auto& [i, j] : coords) scale = std::max(scale, std::abs(analytic[i][j]));
  const double floor = std::max(options.relative_floor * scale, 1e-12);

  std::uint64_t base_print = 0;
  std::uint64_t* track = options.skip_kink_crossings ? &base_print : nullptr;
  if (track) evaluate<T>(graph, inputs, weights, track);

  GradCheckResult result;
  const T eps = static_cast<T>(options.epsilon);
  bool first = true;
  for (const auto& [i, j] : coords) {
    T& x = inputs[i].mutable_data()[j];
    const T original = x;
    const T plus = original + eps;
    const T minus = original - eps;
    std::uint64_t print_plus = 0, print_minus = 0;
    x = plus;
    const double f_plus = evaluate<T>(graph, inputs, weights, track ? &print_plus : nullptr);
    x = minus;
    const double f_minus = evaluate<T>(graph, inputs, weights, track ? &print_minus : nullptr);
    x = original;
    if (track && (print_plus != base_print || print_minus != base_print)) {
      ++result.kink_crossings_skipped;
      continue;
    }
    ++result.coordinates_checked;
    // Divide by the step actually taken after rounding, not by 2*eps.
    const double h = static_cast<double>(plus) - static_cast<double>(minus);
    const double numeric = (f_plus - f_minus) / h;
    const double a = analytic[i][j];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (first || rel > result.max_relative_error) {
      first = false;
      result.max_relative_error = rel;
      result.worst_input = i;
      result.worst_index = j;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

template GradCheckResult grad_check<float>(const GraphFn<float>&, std::vector<BasicTensor<float>>,
                                           const GradCheckOptions&);
template GradCheckResult grad_check<double>(const GraphFn<double>&, std::vector<BasicTensor<double>>,
                                            const GradCheckOptions&);

}  // namespace bevfuse
