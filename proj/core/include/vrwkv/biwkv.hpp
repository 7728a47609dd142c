#pragma once

// Bidirectional WKV attention.
//
//   wkv[t,c] = ( sum_{i != t} exp(-(|t-i|-1)/T * w[c] + k[i,c]) * v[i,c] + exp(u[c] + k[t,c]) * v[t,c] )
//            / ( sum_{i != t} exp(-(|t-i|-1)/T * w[c] + k[i,c])          + exp(u[c] + k[t,c]) )
//
// biwkv_oracle evaluates the double sum directly in O(T^2 C). biwkv_forward and
// biwkv_backward use the split past/future recurrences in O(T C), with every
// accumulator stored as (mantissa, running max exponent) so no exponential
// factor applied during an update exceeds 1.

#include <cstdint>
#include <vector>

#include "vrwkv/tensor.hpp"

namespace vrwkv {

/// Per-channel spatial decay `w` (any sign) and current-token bonus `u`.
template <typename Real>
struct DecayParams {
  std::vector<Real> w;
  std::vector<Real> u;

  std::size_t channels() const { return w.size(); }
};

enum class WkvDirection {
  bidirectional,  // every token sees every other token
  causal,         // token t sees tokens i <= t only (original RWKV attention)
};

struct WkvOptions {
  WkvDirection direction = WkvDirection::bidirectional;
  // Divide the distance bias by T. Off reproduces the unbounded exponent.
  bool bounded = true;
  // Max-subtraction representation of accumulators. Off uses raw exp().
  bool safe_exp = true;
  // Flip the sign of the past-state decay. Negative control for self-tests.
  bool inject_bug = false;
};

/// Running recurrence state for one direction pair, one entry per channel.
/// `num` / `den` are mantissas; the true sums are num * exp(exponent).
template <typename Real>
struct WkvRecurrenceState {
  std::vector<Real> num;
  std::vector<Real> den;
  std::vector<Real> exponent;

  explicit WkvRecurrenceState(std::size_t channels);

  /// Decay everything held by one step (factor exp(-lambda)) and add
  /// exp(k) * v to the numerator and exp(k) to the denominator.
  void absorb(std::size_t c, Real lambda, Real k, Real v);
};

template <typename Real>
struct WkvContext {
  Tensor<Real> k;
  Tensor<Real> v;
  DecayParams<Real> params;
  WkvOptions options;
};

template <typename Real>
struct WkvResult {
  Tensor<Real> wkv;
  WkvContext<Real> context;
};

template <typename Real>
struct WkvGradients {
  std::vector<Real> gw;
  std::vector<Real> gu;
  Tensor<Real> gk;
  Tensor<Real> gv;
};

/// Direct double-precision evaluation of the summation form. O(T^2 C).
/// Only `direction` and `bounded` of `options` are honoured.
Tensor<double> biwkv_oracle(const Tensor<double>& k, const Tensor<double>& v,
                            const DecayParams<double>& params, WkvOptions options = {});

/// Linear-time forward. Throws NumericalError on non-finite input, and on
/// non-finite output when `options.safe_exp` is set.
template <typename Real>
WkvResult<Real> biwkv_forward(const Tensor<Real>& k, const Tensor<Real>& v,
                              const DecayParams<Real>& params, WkvOptions options = {});

/// Linear-time backward. Recomputes the recurrence states from the saved
/// inputs; always uses the safe-exponential path.
template <typename Real>
WkvGradients<Real> biwkv_backward(const WkvContext<Real>& ctx, const Tensor<Real>& gy);

/// Analytic forward cost model: 13 * T * C. Throws on non-positive input
/// or 64-bit overflow.
std::int64_t flops_estimate(std::int64_t tokens, std::int64_t channels);

}  // namespace vrwkv
