#pragma once

// Central finite-difference verification of the hand-written backward passes.
// The scalar objective is sum(gy * y) for a random cotangent gy; the numeric
// derivative is accumulated as sum(gy * (y+ - y-)) / (2 eps) to avoid
// differencing two large sums.

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "vrwkv/biwkv.hpp"
#include "vrwkv/model.hpp"
#include "vrwkv/token_shift.hpp"

namespace vrwkv {

/// ||a - n||_2 / max(||a||_2, ||n||_2); 0 when both vanish.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

struct GradcheckReport {
  // Worst relative error per parameter class.
  std::map<std::string, double> worst;
  // Largest |gradient| seen, analytic and numeric, for the gy = 0 smoke case.
  double max_abs_analytic = 0;
  double max_abs_numeric = 0;

  double overall() const;
  void merge(const GradcheckReport& other);
};

struct KernelCase {
  std::size_t tokens = 16;
  std::size_t channels = 8;
  std::uint64_t seed = 0;
  WkvOptions options;
  bool zero_cotangent = false;
  double eps = 1e-5;
};

/// Analytic gradients of the linear-time kernel against finite differences of
/// the summation-form oracle. Classes: w, u, k, v.
GradcheckReport gradcheck_kernel(const KernelCase& c);

struct ShiftCase {
  std::size_t rows = 4, cols = 5, channels = 8, batch = 2;
  std::uint64_t seed = 0;
  ShiftOptions options;
  bool zero_cotangent = false;
  double eps = 1e-5;
};

/// Classes: x, mu.
GradcheckReport gradcheck_shift(const ShiftCase& c);

/// Small config for model-level checks: C = 8, L = 1, 3 x 3 grid.
ModelConfig gradcheck_model_config();

/// Parameters with O(1) magnitudes so that every adjoint contributes
/// visibly: projections N(0, 0.5^2), norms 1 + N(0, 0.1^2), mixes U(0.2, 0.8).
ModelParams<double> gradcheck_params(const ModelConfig& config, std::uint64_t seed);

struct ModelCase {
  ModelConfig config = gradcheck_model_config();
  std::size_t batch = 2;
  std::uint64_t seed = 0;
  bool zero_cotangent = false;
  double eps = 1e-5;
};

/// Every parameter tensor plus the input image (class "image"). Classes are
/// parameter names with the "blocks.<i>." prefix removed.
GradcheckReport gradcheck_model(const ModelCase& c);

}  // namespace vrwkv
