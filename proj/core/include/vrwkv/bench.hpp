#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "vrwkv/model.hpp"
#include "vrwkv/tensor.hpp"

namespace vrwkv {

/// Dense softmax(Q K^T / sqrt(C)) V. Materialises the full T x T score matrix.
template <typename Real>
Tensor<Real> quadratic_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                 const Tensor<Real>& v);

enum class Mechanism { biwkv, quadratic };

std::string to_string(Mechanism m);
Mechanism parse_mechanism(std::string_view name);

/// Bytes of the working buffers one call allocates, for `word` byte reals.
/// Bi-WKV: output plus the stored future states (4 T C) and the running past
/// state (3 C). Quadratic: score matrix (T^2) plus output (T C).
std::uint64_t activation_bytes(Mechanism m, std::uint64_t tokens, std::uint64_t channels,
                               std::uint64_t word = sizeof(float));

struct BenchRecord {
  Mechanism mechanism = Mechanism::biwkv;
  std::size_t tokens = 0;
  std::size_t channels = 0;
  std::size_t reps = 0;
  double median_seconds = 0;
  std::uint64_t activation_bytes = 0;
  // Median below the trustworthy range of the clock.
  bool flagged = false;
};

struct BenchOptions {
  std::size_t channels = 64;
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
  double min_resolvable_seconds = 1e-5;
  bool double_precision = false;
};

/// Times calls for each T (ascending), interleaving the sizes rep by rep.
/// Warmup calls are discarded; each record holds the median of `reps` timed calls.
std::vector<BenchRecord> bench_scaling(Mechanism m, const std::vector<std::size_t>& tokens,
                                       const BenchOptions& options);

inline constexpr std::string_view kBenchCsvHeader =
    "mechanism,T,C,reps,median_seconds,activation_bytes";
void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records);

struct ErfMap {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;  // row-major, >= 0, max 1 unless all zero

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Effective receptive field of the centre token (rows/2, cols/2) for a
/// single fixed uniform-random image of side `image_size`. Every feature
/// channel of the centre token receives gradient 1; each grid cell reports
/// the summed absolute input gradient over its patch pixels and channels.
template <typename Real>
ErfMap erf_map(const ModelParams<Real>& params, const ModelConfig& config,
               std::size_t image_size, std::uint64_t input_seed = 0);

void write_erf_csv(std::ostream& out, const ErfMap& map);
/// Grayscale heatmap, black 0 to white 1, one rectangle per cell.
void write_erf_svg(std::ostream& out, const ErfMap& map, std::size_t cell_px = 16);

}  // namespace vrwkv
