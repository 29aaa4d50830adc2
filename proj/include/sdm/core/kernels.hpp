#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "sdm/core/tensor.hpp"

/// Forward and gradient kernels on plain tensors. These are pure functions;
/// the differentiation tape in autodiff.hpp composes them.
namespace sdm::kernels {

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

/// input [C, H, W], kernel [O, C, kh, kw] -> [O, Ho, Wo]. Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad);
template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& kernel, const Shape& input_shape,
                            std::size_t stride, std::size_t pad);
template <typename T>
Tensor<T> conv2d_grad_kernel(const Tensor<T>& grad_out, const Tensor<T>& input, const Shape& kernel_shape,
                             std::size_t stride, std::size_t pad);

/// input [C, H, W], kernel [C, kh, kw]; channel c of the output reads only channel c.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad);
template <typename T>
Tensor<T> depthwise_conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& kernel, const Shape& input_shape,
                                      std::size_t stride, std::size_t pad);
template <typename T>
Tensor<T> depthwise_conv2d_grad_kernel(const Tensor<T>& grad_out, const Tensor<T>& input,
                                       const Shape& kernel_shape, std::size_t stride, std::size_t pad);

template <typename T>
struct PoolResult {
  Tensor<T> values;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// k x k max pooling, no padding. Ties resolve to the first element in
/// row-major window order.
template <typename T>
PoolResult<T> maxpool2d(const Tensor<T>& input, std::size_t k, std::size_t stride);
template <typename T>
Tensor<T> maxpool2d_grad(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax, const Shape& input_shape);

/// Max-subtracted softmax along `axis`. Entries with mask == 0 get probability 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, const std::vector<unsigned char>* mask = nullptr);
template <typename T>
Tensor<T> softmax_grad(const Tensor<T>& y, const Tensor<T>& grad_y, std::size_t axis);

/// op(a) * op(b) for rank-2 tensors, op = transpose when the flag is set.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Bilinear resize by an integer factor, half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t factor);
template <typename T>
Tensor<T> bilinear_upsample_grad(const Tensor<T>& grad_out, const Shape& input_shape, std::size_t factor);

/// softmax(Q K^T * scale) V. Q [n, d], K [m, d], V [m, dv].
template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scale);
/// Same with scale = 1 / sqrt(d).
template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

enum class LinearAttentionForm {
  Normalized,  // phi(Q) (phi(K)^T V) / (phi(Q) . sum_j phi(K_j))
  Literal,     // phi(Q) (phi(K)^T phi(V)), no normalizer
};

/// Kernelized attention with phi(x) = elu(x) + 1.
template <typename T>
Tensor<T> linear_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           LinearAttentionForm form = LinearAttentionForm::Normalized);

template <typename T>
Tensor<T> elu(const Tensor<T>& x);

}  // namespace sdm::kernels
