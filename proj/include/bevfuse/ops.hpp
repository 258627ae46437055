#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bevfuse/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes eagerly and throws
// DimensionError; when a Tape<T> is active and an input requires grad, the
// op records its backward pass on that tape.
namespace bevfuse {

// Element-wise, same-shape operands only (no broadcasting).
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
// s must hold exactly one value; the only broadcast the library supports.
template <typename T> BasicTensor<T> mul_scalar(const BasicTensor<T>& x, const BasicTensor<T>& s);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
// Element-wise maximum. On ties the gradient goes to `a`.
template <typename T> BasicTensor<T> max_pair(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);

// input [C_in,H,W], weight [C_out,C_in,k,k], bias [C_out]; k odd and
// padding == (k-1)/2, so the spatial size is preserved.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t padding);

// Per-token affine map: input [T,D_in], weight [D_in,D_out], bias [D_out].
template <typename T>
BasicTensor<T> linear_tokens(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                             const BasicTensor<T>& bias);

// a [M,K] x b [K,N] -> [M,N]
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// a [M,K] x b[N,K]^T -> [M,N]
template <typename T> BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Row-wise softmax over a [T,S] matrix, max-subtracted.
template <typename T> BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

// [C,H,W] <-> [H*W,C] token layout.
template <typename T> BasicTensor<T> to_tokens(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> from_tokens(const BasicTensor<T>& tokens, std::size_t height, std::size_t width);

// Column block [start, start+len) of a [T,D] matrix, and its inverse.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t len);
template <typename T> BasicTensor<T> concat_cols(std::span<const BasicTensor<T>> parts);

// [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Loss primitives; targets and masks are constants.

// Sum over all elements of the numerically stable logistic loss.
template <typename T>
BasicTensor<T> bce_with_logits_sum(const BasicTensor<T>& logits, const BasicTensor<T>& targets);

// pred/target [K,H,W]; mask has H*W entries. Sum of |pred - target| over
// masked cells and all K channels.
template <typename T>
BasicTensor<T> masked_l1_sum(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                             std::span<const std::uint8_t> mask);

// logits [N,H,W]; labels and mask have H*W entries. Sum of softmax
// cross-entropy over masked cells.
template <typename T>
BasicTensor<T> masked_cross_entropy_sum(const BasicTensor<T>& logits,
                                        std::span<const std::int32_t> labels,
                                        std::span<const std::uint8_t> mask);

}  // namespace bevfuse
