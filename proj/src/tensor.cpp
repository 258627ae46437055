#include "bevfuse/tensor.hpp"

#include <cmath>
#include <sstream>

namespace bevfuse {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  node_->value.assign(shape_numel(shape), T(0));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, const std::vector<T>& values, bool requires_grad)
    : BasicTensor(std::move(shape), AlignedVector<T>(values.begin(), values.end()), requires_grad) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, AlignedVector<T>&& values, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  BasicTensor t(std::move(shape));
  std::fill(t.node_->value.begin(), t.node_->value.end(), value);
  return t;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
void assert_finite(const BasicTensor<T>& t, std::string_view what) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      std::ostringstream os;
      os << "non-finite value " << d[i] << " in " << what << " at flat index " << i << " of shape "
         << shape_str(t.shape());
      throw NumericError(os.str());
    }
  }
}

namespace {

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

struct BackwardFault {
  std::string op;
  double factor = 1.0;
};

BackwardFault& fault() {
  static BackwardFault f;
  return f;
}

}  // namespace

namespace debug {

void set_backward_fault(std::string op, double factor) { fault() = {std::move(op), factor}; }
void clear_backward_fault() { fault() = {}; }

}  // namespace debug

template <typename T>
Tape<T>::Tape() : previous_(g_active_tape<T>) {
  g_active_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
  g_active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return g_active_tape<T>;
}

template <typename T>
void Tape<T>::record(std::string_view op, std::shared_ptr<TensorNode<T>> out,
                     std::function<void()> backward) {
  entries_.push_back({std::string(op), std::move(out), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const T one(1);
  backward(loss, std::span<const T>(&one, 1));
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& output, std::span<const T> seed) {
  if (seed.size() != output.numel()) {
    throw DimensionError("backward seed has " + std::to_string(seed.size()) +
                         " values for output of shape " + shape_str(output.shape()));
  }
  for (auto& e : entries_) e.out->grad.clear();
  if (!output.requires_grad()) return;
  auto& node = *output.node();
  node.ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) node.grad[i] += seed[i];

  const auto& f = fault();
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    if (!f.op.empty() && f.op == it->op) {
      for (auto& g : it->out->grad) g = static_cast<T>(g * f.factor);
    }
    it->backward();
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template void assert_finite<float>(const BasicTensor<float>&, std::string_view);
template void assert_finite<double>(const BasicTensor<double>&, std::string_view);

}  // namespace bevfuse
