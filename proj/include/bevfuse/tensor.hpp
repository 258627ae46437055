#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bevfuse/error.hpp"

namespace bevfuse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-byte aligned storage. Vectorized kernels choose their peeling by address,
// so fixed alignment keeps results independent of where buffers land.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tape;

// Dense row-major tensor handle. Copies share storage; `clone()` copies values.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, bool requires_grad = false);
  BasicTensor(Shape shape, const std::vector<T>& values, bool requires_grad = false);
  BasicTensor(Shape shape, AlignedVector<T>&& values, bool requires_grad = false);
  BasicTensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
      : BasicTensor(std::move(shape), AlignedVector<T>(values), requires_grad) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Only leaves (inputs, parameters) should be written through this.
  std::span<T> mutable_data() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size() && numel() > 0; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  BasicTensor clone() const { return BasicTensor(shape(), AlignedVector<T>(node_->value), false); }

  // Storage identity; equal for handles that share the same node.
  const void* identity() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  AlignedVector<To> v(t.data().begin(), t.data().end());
  return BasicTensor<To>(t.shape(), std::move(v), t.requires_grad());
}

// Throws NumericError naming `what` and the first offending index.
template <typename T>
void assert_finite(const BasicTensor<T>& t, std::string_view what);

// Reverse-mode tape. Constructing a tape makes it the active recorder for
// element type T on the current thread until it is destroyed; ops record a
// backward closure whenever an input requires grad and a tape is active.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::string_view op, std::shared_ptr<TensorNode<T>> out, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays the tape. Leaf gradients
  // accumulate across calls; intermediate gradients are recomputed.
  void backward(const BasicTensor<T>& loss);
  // Same, but seeds an arbitrary output with the given cotangent.
  void backward(const BasicTensor<T>& output, std::span<const T> seed);

  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::string op;
    std::shared_ptr<TensorNode<T>> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

namespace debug {

// Negative-control hook: scales the gradient entering every recorded op
// named `op` during backward. Factor 1 (or an empty name) disables it.
void set_backward_fault(std::string op, double factor);
void clear_backward_fault();

// Fingerprint of the branches taken by piecewise-linear ops (relu, max_pair,
// L1) while tracing is on. Two evaluations with equal fingerprints lie on the
// same smooth piece.
struct BranchTrace {
  bool enabled = false;
  std::uint64_t hash = 0xCBF29CE484222325ULL;
};
inline thread_local BranchTrace branch_trace;

inline void start_branch_trace() { branch_trace = {true, 0xCBF29CE484222325ULL}; }
inline std::uint64_t stop_branch_trace() {
  branch_trace.enabled = false;
  return branch_trace.hash;
}
inline bool tracing_branches() { return branch_trace.enabled; }
inline void note_branch(int which) { branch_trace.hash = (branch_trace.hash ^ static_cast<std::uint64_t>(which + 1)) * 0x100000001B3ULL; }

}  // namespace debug

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bevfuse
