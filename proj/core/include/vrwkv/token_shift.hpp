#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vrwkv/tensor.hpp"

namespace vrwkv {

enum class ShiftMode {
  quad,           // four axis-aligned neighbours, one quarter of the channels each
  causal,         // previous token in raster order, all channels
  bidirectional,  // left / right neighbours, half of the channels each
  none,           // identity
};

ShiftMode parse_shift_mode(std::string_view name);
std::string to_string(ShiftMode mode);

struct ShiftOptions {
  ShiftMode mode = ShiftMode::quad;
  // X + (1 - mu) * X_shifted instead of the convex mu * X + (1 - mu) * X_shifted.
  bool residual_form = false;
};

enum class ShiftTarget { r, k, v };

template <typename Real>
struct ShiftParams {
  std::vector<Real> mu_r;
  std::vector<Real> mu_k;
  std::vector<Real> mu_v;
  ShiftOptions options;

  std::span<const Real> mu(ShiftTarget which) const {
    switch (which) {
      case ShiftTarget::r: return mu_r;
      case ShiftTarget::k: return mu_k;
      case ShiftTarget::v: return mu_v;
    }
    return {};
  }
};

template <typename Real>
struct ShiftGradients {
  TokenGrid<Real> gx;
  std::vector<Real> gmu;
};

/// The shifted grid X† for `mode`, zero where the neighbour falls outside
/// the grid. Never mixes batch items.
template <typename Real>
TokenGrid<Real> neighbor_grid(const TokenGrid<Real>& x, ShiftMode mode);

/// Interpolates X with X† channel-wise. `mu` entries are clamped to [0, 1].
template <typename Real>
TokenGrid<Real> apply_shift(const TokenGrid<Real>& x, std::span<const Real> mu,
                            ShiftOptions options);

/// Quad-directional shift, convex interpolation.
template <typename Real>
TokenGrid<Real> q_shift(const TokenGrid<Real>& x, std::span<const Real> mu) {
  return apply_shift(x, mu, ShiftOptions{ShiftMode::quad, false});
}

template <typename Real>
TokenGrid<Real> shift_dispatch(const TokenGrid<Real>& x, const ShiftParams<Real>& params,
                               ShiftTarget which) {
  return apply_shift(x, params.mu(which), params.options);
}

/// Adjoint of apply_shift with respect to X and mu.
template <typename Real>
ShiftGradients<Real> shift_backward(const TokenGrid<Real>& g_out, const TokenGrid<Real>& x,
                                    std::span<const Real> mu, ShiftOptions options);

}  // namespace vrwkv
