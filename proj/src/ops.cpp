#include "bevfuse/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>

namespace bevfuse {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
Tape<T>* tape_for(std::initializer_list<const BasicTensor<T>*> inputs) {
  auto* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
void require_defined(const BasicTensor<T>& t, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor operand");
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

// Returns the grad buffer of `n` if it participates in differentiation.
template <typename T>
T* grad_of(const NodePtr<T>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* op, auto fwd, auto dfdx) {
  require_defined(x, op);
  AlignedVector<T> v(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(in[i]);
  auto* tape = tape_for<T>({&x});
  BasicTensor<T> out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), on = out.node();
    tape->record(op, on, [xn, on, dfdx] {
      if (T* gx = grad_of(xn)) {
        for (std::size_t i = 0; i < on->value.size(); ++i) {
          gx[i] += on->grad[i] * dfdx(xn->value[i], on->value[i]);
        }
      }
    });
  }
  return out;
}

template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t pad, T* cols) {
  const std::size_t hw = height * width;
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* dst = cols + ((c * k + ki) * k + kj) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(pad);
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t iy = y + dy;
          T* row = dst + y * w;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + w, T(0));
            continue;
          }
          const T* src = in + (static_cast<std::ptrdiff_t>(c) * h + iy) * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t ix = x + dx;
            row[x] = (ix < 0 || ix >= w) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k, std::size_t pad, T* out) {
  const std::size_t hw = height * width;
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* src = cols + ((c * k + ki) * k + kj) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(pad);
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t iy = y + dy;
          if (iy < 0 || iy >= h) continue;
          T* dst = out + (static_cast<std::ptrdiff_t>(c) * h + iy) * w;
          const T* row = src + y * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t ix = x + dx;
            if (ix >= 0 && ix < w) dst[ix] += row[x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  AlignedVector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("add", on, [an, bn, on] {
      const std::size_t n = on->grad.size();
      if (T* ga = grad_of(an)) for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i];
      if (T* gb = grad_of(bn)) for (std::size_t i = 0; i < n; ++i) gb[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  AlignedVector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("sub", on, [an, bn, on] {
      const std::size_t n = on->grad.size();
      if (T* ga = grad_of(an)) for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i];
      if (T* gb = grad_of(bn)) for (std::size_t i = 0; i < n; ++i) gb[i] -= on->grad[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  AlignedVector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("mul", on, [an, bn, on] {
      const std::size_t n = on->grad.size();
      if (T* ga = grad_of(an)) for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * bn->value[i];
      if (T* gb = grad_of(bn)) for (std::size_t i = 0; i < n; ++i) gb[i] += on->grad[i] * an->value[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return unary<T>(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  require_defined(x, "mul_scalar");
  require_defined(s, "mul_scalar");
  if (s.numel() != 1) throw DimensionError("mul_scalar: scale must hold one value, got " + shape_str(s.shape()));
  const T sv = s.data()[0];
  AlignedVector<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * sv;
  auto* tape = tape_for<T>({&x, &s});
  BasicTensor<T> out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), sn = s.node(), on = out.node();
    tape->record("mul_scalar", on, [xn, sn, on] {
      const std::size_t n = on->grad.size();
      if (T* gx = grad_of(xn)) for (std::size_t i = 0; i < n; ++i) gx[i] += on->grad[i] * sn->value[0];
      if (T* gs = grad_of(sn)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(on->grad[i]) * xn->value[i];
        gs[0] += static_cast<T>(acc);
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  if (debug::tracing_branches()) {
    for (T v : x.data()) debug::note_branch(v > T(0));
  }
  return unary<T>(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary<T>(
      x, "sigmoid", [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> max_pair(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "max_pair");
  AlignedVector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] >= b.data()[i] ? a.data()[i] : b.data()[i];
  if (debug::tracing_branches()) {
    for (std::size_t i = 0; i < v.size(); ++i) debug::note_branch(a.data()[i] >= b.data()[i]);
  }
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(a.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("max_pair", on, [an, bn, on] {
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (an->value[i] >= bn->value[i]) {
          if (ga) ga[i] += on->grad[i];
        } else if (gb) {
          gb[i] += on->grad[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  auto* tape = tape_for<T>({&x});
  BasicTensor<T> out(Shape{1}, AlignedVector<T>{static_cast<T>(acc)}, tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), on = out.node();
    tape->record("sum", on, [xn, on] {
      if (T* gx = grad_of(xn)) for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += on->grad[0];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  auto* tape = tape_for<T>({&x});
  BasicTensor<T> out(Shape{1}, AlignedVector<T>{static_cast<T>(acc / n)}, tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), on = out.node();
    tape->record("mean", on, [xn, on] {
      if (T* gx = grad_of(xn)) {
        const T g = static_cast<T>(on->grad[0] / static_cast<double>(xn->value.size()));
        for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t padding) {
  require_rank(input, 3, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require_rank(bias, 1, "conv2d", "bias");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1)) + " input channels, input is " +
                         shape_str(input.shape()));
  }
  if (weight.dim(3) != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd size, got " + shape_str(weight.shape()));
  }
  if (2 * padding + 1 != k) {
    throw DimensionError("conv2d: padding " + std::to_string(padding) + " does not preserve size for k=" +
                         std::to_string(k));
  }
  if (bias.dim(0) != cout) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(cout) +
                         " output channels");
  }
  const std::size_t hw = h * w, ck = cin * k * k;

  // k == 1 uses the input directly as its column matrix.
  std::shared_ptr<AlignedVector<T>> cols;
  const T* col_ptr = input.data().data();
  if (k > 1) {
    cols = std::make_shared<AlignedVector<T>>(ck * hw);
    im2col(input.data().data(), cin, h, w, k, padding, cols->data());
    col_ptr = cols->data();
  }

  AlignedVector<T> v(cout * hw);
  MapR<T> out_m(v.data(), cout, hw);
  CMapR<T> w_m(weight.data().data(), cout, ck);
  CMapR<T> c_m(col_ptr, ck, hw);
  out_m.noalias() = w_m * c_m;
  for (std::size_t o = 0; o < cout; ++o) {
    const T b = bias.data()[o];
    T* row = v.data() + o * hw;
    for (std::size_t i = 0; i < hw; ++i) row[i] += b;
  }

  auto* tape = tape_for<T>({&input, &weight, &bias});
  BasicTensor<T> out(Shape{cout, h, w}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> in_n = input.node(), w_n = weight.node(), b_n = bias.node(), on = out.node();
    tape->record("conv2d", on, [=] {
      const T* cp = cols ? cols->data() : in_n->value.data();
      CMapR<T> g(on->grad.data(), cout, hw);
      if (T* gw = grad_of(w_n)) {
        MapR<T> gw_m(gw, cout, ck);
        gw_m.noalias() += g * CMapR<T>(cp, ck, hw).transpose();
      }
      if (T* gb = grad_of(b_n)) {
        for (std::size_t o = 0; o < cout; ++o) gb[o] += g.row(o).sum();
      }
      if (T* gi = grad_of(in_n)) {
        CMapR<T> wm(w_n->value.data(), cout, ck);
        if (k == 1) {
          MapR<T>(gi, ck, hw).noalias() += wm.transpose() * g;
        } else {
          AlignedVector<T> dcols(ck * hw);
          MapR<T>(dcols.data(), ck, hw).noalias() = wm.transpose() * g;
          col2im_add(dcols.data(), cin, h, w, k, padding, gi);
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> linear_tokens(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& bias) {
  require_rank(input, 2, "linear_tokens", "input");
  require_rank(weight, 2, "linear_tokens", "weight");
  require_rank(bias, 1, "linear_tokens", "bias");
  const std::size_t t = input.dim(0), din = input.dim(1), dout = weight.dim(1);
  if (weight.dim(0) != din || bias.dim(0) != dout) {
    throw DimensionError("linear_tokens: input " + shape_str(input.shape()) + ", weight " +
                         shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  AlignedVector<T> v(t * dout);
  MapR<T> out_m(v.data(), t, dout);
  out_m.noalias() = CMapR<T>(input.data().data(), t, din) * CMapR<T>(weight.data().data(), din, dout);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = 0; c < dout; ++c) v[r * dout + c] += bias.data()[c];
  }
  auto* tape = tape_for<T>({&input, &weight, &bias});
  BasicTensor<T> out(Shape{t, dout}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> in_n = input.node(), w_n = weight.node(), b_n = bias.node(), on = out.node();
    tape->record("linear_tokens", on, [=] {
      CMapR<T> g(on->grad.data(), t, dout);
      if (T* gi = grad_of(in_n)) {
        MapR<T>(gi, t, din).noalias() += g * CMapR<T>(w_n->value.data(), din, dout).transpose();
      }
      if (T* gw = grad_of(w_n)) {
        MapR<T>(gw, din, dout).noalias() += CMapR<T>(in_n->value.data(), t, din).transpose() * g;
      }
      if (T* gb = grad_of(b_n)) {
        for (std::size_t c = 0; c < dout; ++c) gb[c] += g.col(c).sum();
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  AlignedVector<T> v(m * n);
  MapR<T>(v.data(), m, n).noalias() = CMapR<T>(a.data().data(), m, k) * CMapR<T>(b.data().data(), k, n);
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(Shape{m, n}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("matmul", on, [=] {
      CMapR<T> g(on->grad.data(), m, n);
      if (T* ga = grad_of(an)) MapR<T>(ga, m, k).noalias() += g * CMapR<T>(bn->value.data(), k, n).transpose();
      if (T* gb = grad_of(bn)) MapR<T>(gb, k, n).noalias() += CMapR<T>(an->value.data(), m, k).transpose() * g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 2, "matmul_nt", "lhs");
  require_rank(b, 2, "matmul_nt", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  AlignedVector<T> v(m * n);
  MapR<T>(v.data(), m, n).noalias() =
      CMapR<T>(a.data().data(), m, k) * CMapR<T>(b.data().data(), n, k).transpose();
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(Shape{m, n}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("matmul_nt", on, [=] {
      CMapR<T> g(on->grad.data(), m, n);
      if (T* ga = grad_of(an)) MapR<T>(ga, m, k).noalias() += g * CMapR<T>(bn->value.data(), n, k);
      if (T* gb = grad_of(bn)) MapR<T>(gb, n, k).noalias() += g.transpose() * CMapR<T>(an->value.data(), m, k);
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  require_rank(x, 2, "softmax_rows", "input");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  AlignedVector<T> v(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* o = v.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    const T inv = static_cast<T>(1.0 / total);
    for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
  }
  auto* tape = tape_for<T>({&x});
  BasicTensor<T> out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), on = out.node();
    tape->record("softmax_rows", on, [xn, on, rows, cols] {
      T* gx = grad_of(xn);
      if (!gx) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->value.data() + r * cols;
        const T* g = on->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[c]) * y[c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - static_cast<T>(dot));
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> to_tokens(const BasicTensor<T>& x) {
  require_rank(x, 3, "to_tokens", "input");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  AlignedVector<T> v(x.numel());
  MapR<T>(v.data(), hw, c) = CMapR<T>(x.data().data(), c, hw).transpose();
  auto* tape = tape_for<T>({&x});
  BasicTensor<T> out(Shape{hw, c}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), on = out.node();
    tape->record("to_tokens", on, [xn, on, c, hw] {
      if (T* gx = grad_of(xn)) MapR<T>(gx, c, hw) += CMapR<T>(on->grad.data(), hw, c).transpose();
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> from_tokens(const BasicTensor<T>& tokens, std::size_t height, std::size_t width) {
  require_rank(tokens, 2, "from_tokens", "tokens");
  const std::size_t hw = tokens.dim(0), c = tokens.dim(1);
  if (hw != height * width) {
    throw DimensionError("from_tokens: " + std::to_string(hw) + " tokens cannot form a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  AlignedVector<T> v(tokens.numel());
  MapR<T>(v.data(), c, hw) = CMapR<T>(tokens.data().data(), hw, c).transpose();
  auto* tape = tape_for<T>({&tokens});
  BasicTensor<T> out(Shape{c, height, width}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> tn = tokens.node(), on = out.node();
    tape->record("from_tokens", on, [tn, on, c, hw] {
      if (T* gt = grad_of(tn)) MapR<T>(gt, hw, c) += CMapR<T>(on->grad.data(), c, hw).transpose();
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t len) {
  require_rank(x, 2, "slice_cols", "input");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (start + len > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") outside " + shape_str(x.shape()));
  }
  AlignedVector<T> v(rows * len);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * cols + start, len, v.data() + r * len);
  }
  auto* tape = tape_for<T>({&x});
  BasicTensor<T> out(Shape{rows, len}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> xn = x.node(), on = out.node();
    tape->record("slice_cols", on, [xn, on, rows, cols, start, len] {
      if (T* gx = grad_of(xn)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < len; ++c) gx[r * cols + start + c] += on->grad[r * len + c];
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_cols(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t rows = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols", "operand");
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: row count mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  AlignedVector<T> v(rows * total);
  std::size_t offset = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.data().data() + r * w, w, v.data() + r * total + offset);
    offset += w;
    any_grad = any_grad || p.requires_grad();
  }
  auto* tape = any_grad ? Tape<T>::active() : nullptr;
  BasicTensor<T> out(Shape{rows, total}, std::move(v), tape != nullptr);
  if (tape) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    NodePtr<T> on = out.node();
    tape->record("concat_cols", on, [nodes, on, rows, total] {
      std::size_t off = 0;
      for (const auto& n : nodes) {
        const std::size_t w = n->shape[1];
        if (T* g = grad_of(n)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < w; ++c) g[r * w + c] += on->grad[r * total + off + c];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 3, "concat_channels", "lhs");
  require_rank(b, 3, "concat_channels", "rhs");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  AlignedVector<T> v;
  v.reserve(a.numel() + b.numel());
  v.insert(v.end(), a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  auto* tape = tape_for<T>({&a, &b});
  BasicTensor<T> out(Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(v), tape != nullptr);
  if (tape) {
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    tape->record("concat_channels", on, [an, bn, on] {
      const std::size_t na = an->value.size();
      if (T* ga = grad_of(an)) for (std::size_t i = 0; i < na; ++i) ga[i] += on->grad[i];
      if (T* gb = grad_of(bn)) for (std::size_t i = 0; i < bn->value.size(); ++i) gb[i] += on->grad[na + i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> bce_with_logits_sum(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  require_same_shape(logits, targets, "bce_with_logits_sum");
  double acc = 0.0;
  const auto x = logits.data();
  const auto t = targets.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    acc += std::max(xi, 0.0) - xi * t[i] + std::log1p(std::exp(-std::abs(xi)));
  }
  auto* tape = tape_for<T>({&logits});
  BasicTensor<T> out(Shape{1}, AlignedVector<T>{static_cast<T>(acc)}, tape != nullptr);
  if (tape) {
    NodePtr<T> ln = logits.node(), tn = targets.node(), on = out.node();
    tape->record("bce_with_logits_sum", on, [ln, tn, on] {
      if (T* g = grad_of(ln)) {
        const T go = on->grad[0];
        for (std::size_t i = 0; i < ln->value.size(); ++i) {
          g[i] += go * (stable_sigmoid(ln->value[i]) - tn->value[i]);
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> masked_l1_sum(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                             std::span<const std::uint8_t> mask) {
  require_same_shape(pred, target, "masked_l1_sum");
  require_rank(pred, 3, "masked_l1_sum", "pred");
  const std::size_t k = pred.dim(0), hw = pred.dim(1) * pred.dim(2);
  if (mask.size() != hw) {
    throw DimensionError("masked_l1_sum: mask has " + std::to_string(mask.size()) + " cells, grid has " +
                         std::to_string(hw));
  }
  double acc = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      if (!mask[i]) continue;
      const double d = static_cast<double>(pred.data()[c * hw + i]) - target.data()[c * hw + i];
      acc += std::abs(d);
      if (debug::tracing_branches()) debug::note_branch(d > 0 ? 1 : (d < 0 ? -1 : 0));
    }
  }
  auto* tape = tape_for<T>({&pred});
  BasicTensor<T> out(Shape{1}, AlignedVector<T>{static_cast<T>(acc)}, tape != nullptr);
  if (tape) {
    NodePtr<T> pn = pred.node(), tn = target.node(), on = out.node();
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    tape->record("masked_l1_sum", on, [pn, tn, on, m = std::move(m), k, hw] {
      if (T* g = grad_of(pn)) {
        const T go = on->grad[0];
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t i = 0; i < hw; ++i) {
            if (!m[i]) continue;
            const T d = pn->value[c * hw + i] - tn->value[c * hw + i];
            g[c * hw + i] += go * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> masked_cross_entropy_sum(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                        std::span<const std::uint8_t> mask) {
  require_rank(logits, 3, "masked_cross_entropy_sum", "logits");
  const std::size_t n = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  if (labels.size() != hw || mask.size() != hw) {
    throw DimensionError("masked_cross_entropy_sum: labels/mask size does not match grid " +
                         shape_str(logits.shape()));
  }
  const auto x = logits.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    if (!mask[i]) continue;
    const auto label = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || label >= n) throw RangeError("masked_cross_entropy_sum: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(x[c * hw + i]));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(x[c * hw + i] - mx);
    acc += mx + std::log(z) - x[label * hw + i];
  }
  auto* tape = tape_for<T>({&logits});
  BasicTensor<T> out(Shape{1}, AlignedVector<T>{static_cast<T>(acc)}, tape != nullptr);
  if (tape) {
    NodePtr<T> ln = logits.node(), on = out.node();
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    tape->record("masked_cross_entropy_sum", on, [ln, on, lab = std::move(lab), m = std::move(m), n, hw] {
      T* g = grad_of(ln);
      if (!g) return;
      const T go = on->grad[0];
      const auto& xv = ln->value;
      for (std::size_t i = 0; i < hw; ++i) {
        if (!m[i]) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(xv[c * hw + i]));
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) z += std::exp(xv[c * hw + i] - mx);
        for (std::size_t c = 0; c < n; ++c) {
          const double p = std::exp(xv[c * hw + i] - mx) / z;
          const double onehot = static_cast<std::size_t>(lab[i]) == c ? 1.0 : 0.0;
          g[c * hw + i] += go * static_cast<T>(p - onehot);
        }
      }
    });
  }
  return out;
}

#define BEVFUSE_INSTANTIATE_OPS(T)                                                                       \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                               \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                \
  template BasicTensor<T> max_pair(const BasicTensor<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,    \
                                 std::size_t);                                                           \
  template BasicTensor<T> linear_tokens(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                        const BasicTensor<T>&);                                          \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                           \
  template BasicTensor<T> to_tokens(const BasicTensor<T>&);                                              \
  template BasicTensor<T> from_tokens(const BasicTensor<T>&, std::size_t, std::size_t);                  \
  template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::size_t, std::size_t);                   \
  template BasicTensor<T> concat_cols(std::span<const BasicTensor<T>>);                                  \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> bce_with_logits_sum(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> masked_l1_sum(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                        std::span<const std::uint8_t>);                                  \
  template BasicTensor<T> masked_cross_entropy_sum(const BasicTensor<T>&, std::span<const std::int32_t>, \
                                                   std::span<const std::uint8_t>);

BEVFUSE_INSTANTIATE_OPS(float)
BEVFUSE_INSTANTIATE_OPS(double)

#undef BEVFUSE_INSTANTIATE_OPS

}  // namespace bevfuse
