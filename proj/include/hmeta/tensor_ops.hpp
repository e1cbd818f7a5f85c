#pragma once

#include "hmeta/tensor.hpp"

namespace hmeta::ops {

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Softmax along the last axis, stabilized by max subtraction.
Tensor softmax(const Tensor& x);

/// Layer norm over the last axis with variance epsilon 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

inline constexpr double kLayerNormEps = 1e-5;

}  // namespace hmeta::ops
