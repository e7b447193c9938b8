#pragma once

#include <vector>

#include "exgn/tensor.hpp"

// Differentiable tensor ops. Each op records its backward rule on the active
// tape when any input requires grad, and throws ShapeError on incompatible
// shapes and NumericError on non-finite outputs.

namespace exgn {
inline namespace EXGN_PRECISION_NS {

/// Trailing-dimension broadcast of two shapes (1s prepended to the shorter).
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Binary elementwise with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Unary elementwise.
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, real factor);
Tensor add_scalar(const Tensor& x, real offset);

enum class ElementwiseKind { add, sub, mul, div, exp, log, sigmoid, silu, relu, scale };

/// Dispatching form of the elementwise family. `b` is required for the
/// binary kinds; `factor` is used by `scale` only.
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b = nullptr,
                   real factor = real(1));

/// Batched matrix product over the last two dimensions; batch dimensions
/// broadcast by the trailing rule.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of x[B,Cin,H,W] with w[Cout,Cin,kh,kw], zero padding.
/// Output size is floor((H + 2*pad - kh) / stride) + 1. `bias` may be an
/// empty (default-constructed) tensor.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
/// log(1 - softmax(x)) computed as a difference of log-sum-exps, so it stays
/// finite when a probability rounds to one.
Tensor log1m_softmax(const Tensor& x, int axis);

/// Normalizes x[B,C,...] per (sample, group) then applies per-channel affine.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Bilinear resize of x[B,C,H,W] by an integer factor, half-pixel centers
/// (align_corners = false) with edge clamping.
Tensor upsample_bilinear(const Tensor& x, int factor);
inline Tensor upsample_bilinear2x(const Tensor& x) { return upsample_bilinear(x, 2); }

enum class PoolKind { avg, max };

/// Square-window pooling without padding; the window grid must tile exactly.
Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
/// Max along `axis`; the gradient goes to the first maximal element.
Tensor max(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor stack(const std::vector<Tensor>& parts, int axis = 0);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
