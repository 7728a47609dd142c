#pragma once

// Token-wise building blocks with hand-written adjoints. Every function treats a
// TokenGrid as an (N x channels) matrix with N = batch * tokens.

#include <cmath>
#include <vector>

#include "vrwkv/tensor.hpp"

namespace vrwkv::layers {

inline constexpr double kLayerNormEps = 1e-5;

/// y = x W (+ bias). W is (in x out).
template <typename Real>
TokenGrid<Real> linear(const TokenGrid<Real>& x, const Tensor<Real>& weight,
                       const Tensor<Real>* bias = nullptr);

/// Accumulates dW (and db when given) and returns dx.
template <typename Real>
TokenGrid<Real> linear_backward(const TokenGrid<Real>& x, const TokenGrid<Real>& g_out,
                                const Tensor<Real>& weight, Tensor<Real>& g_weight,
                                Tensor<Real>* g_bias = nullptr);

template <typename Real>
struct LayerNormCache {
  TokenGrid<Real> normalized;  // (x - mean) * rstd
  std::vector<Real> rstd;      // one per token
};

/// Layer normalisation over the channel dimension.
template <typename Real>
TokenGrid<Real> layer_norm(const TokenGrid<Real>& x, const Tensor<Real>& gamma,
                           const Tensor<Real>& beta, LayerNormCache<Real>* cache = nullptr);

template <typename Real>
TokenGrid<Real> layer_norm_backward(const LayerNormCache<Real>& cache,
                                    const TokenGrid<Real>& g_out, const Tensor<Real>& gamma,
                                    Tensor<Real>& g_gamma, Tensor<Real>& g_beta);

template <typename Real>
Real sigmoid(Real x) {
  return Real{1} / (Real{1} + std::exp(-x));
}

template <typename Real>
Real squared_relu(Real x) {
  return x > Real{0} ? x * x : Real{0};
}

}  // namespace vrwkv::layers
