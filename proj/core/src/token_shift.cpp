#include "vrwkv/token_shift.hpp"

#include <algorithm>
#include <cstdint>

namespace vrwkv {
namespace {

struct Offset {
  std::int64_t dh = 0;
  std::int64_t dw = 0;
};

void check_channels(std::size_t channels, ShiftMode mode) {
  if (mode == ShiftMode::quad && channels % 4 != 0)
    throw ShapeError("q_shift: channel count must be divisible by 4");
  if (mode == ShiftMode::bidirectional && channels % 2 != 0)
    throw ShapeError("bidirectional shift: channel count must be even");
}

// Grid offset of the source token for channel c, for the two spatial modes.
Offset spatial_offset(ShiftMode mode, std::size_t c, std::size_t channels) {
  if (mode == ShiftMode::quad) {
    switch (c / (channels / 4)) {
      case 0: return {-1, 0};
      case 1: return {1, 0};
      case 2: return {0, -1};
      default: return {0, 1};
    }
  }
  return c < channels / 2 ? Offset{0, -1} : Offset{0, 1};
}

// Calls f(dst_offset, src_offset, c) for every (token, channel) that has an
// in-grid source; offsets index TokenGrid::data.
template <typename Real, typename F>
void for_each_source(const TokenGrid<Real>& x, ShiftMode mode, F&& f) {
  const std::size_t C = x.channels, T = x.tokens();
  if (mode == ShiftMode::none) return;
  if (mode == ShiftMode::causal) {
    for (std::size_t b = 0; b < x.batch; ++b)
      for (std::size_t t = 1; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
          f(((b * T) + t) * C + c, ((b * T) + t - 1) * C + c, c);
    return;
  }
  std::vector<Offset> offsets(C);
  for (std::size_t c = 0; c < C; ++c) offsets[c] = spatial_offset(mode, c, C);
  const auto H = static_cast<std::int64_t>(x.rows), W = static_cast<std::int64_t>(x.cols);
  for (std::size_t b = 0; b < x.batch; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::size_t c = 0; c < C; ++c) {
          const std::int64_t sh = h + offsets[c].dh, sw = w + offsets[c].dw;
          if (sh < 0 || sh >= H || sw < 0 || sw >= W) continue;
          const std::size_t dst = ((b * T) + static_cast<std::size_t>(h * W + w)) * C + c;
          const std::size_t src = ((b * T) + static_cast<std::size_t>(sh * W + sw)) * C + c;
          f(dst, src, c);
        }
}

template <typename Real>
Real clamp01(Real v) {
  return std::clamp(v, Real{0}, Real{1});
}

}  // namespace

ShiftMode parse_shift_mode(std::string_view name) {
  if (name == "quad") return ShiftMode::quad;
  if (name == "causal") return ShiftMode::causal;
  if (name == "bidirectional") return ShiftMode::bidirectional;
  if (name == "none") return ShiftMode::none;
  throw Error("unknown shift mode '" + std::string(name) + "'");
}

std::string to_string(ShiftMode mode) {
  switch (mode) {
    case ShiftMode::quad: return "quad";
    case ShiftMode::causal: return "causal";
    case ShiftMode::bidirectional: return "bidirectional";
    case ShiftMode::none: return "none";
  }
  return "unknown";
}

template <typename Real>
TokenGrid<Real> neighbor_grid(const TokenGrid<Real>& x, ShiftMode mode) {
  check_channels(x.channels, mode);
  TokenGrid<Real> out(x.batch, x.rows, x.cols, x.channels);
  for_each_source(x, mode, [&](std::size_t dst, std::size_t src, std::size_t) {
    out.data[dst] = x.data[src];
  });
  return out;
}

template <typename Real>
TokenGrid<Real> apply_shift(const TokenGrid<Real>& x, std::span<const Real> mu,
                            ShiftOptions options) {
  if (options.mode == ShiftMode::none) return x;
  if (mu.size() != x.channels) throw ShapeError("shift: mu length must equal channel count");
  const TokenGrid<Real> shifted = neighbor_grid(x, options.mode);
  TokenGrid<Real> out(x.batch, x.rows, x.cols, x.channels);
  const std::size_t C = x.channels;
  std::vector<Real> m(C);
  for (std::size_t c = 0; c < C; ++c) m[c] = clamp01(mu[c]);
  for (std::size_t n = 0; n < x.size(); n += C)
    for (std::size_t c = 0; c < C; ++c) {
      const Real self = options.residual_form ? x.data[n + c] : m[c] * x.data[n + c];
      out.data[n + c] = self + (Real{1} - m[c]) * shifted.data[n + c];
    }
  return out;
}

template <typename Real>
ShiftGradients<Real> shift_backward(const TokenGrid<Real>& g_out, const TokenGrid<Real>& x,
                                    std::span<const Real> mu, ShiftOptions options) {
  if (!g_out.same_shape(x)) throw ShapeError("shift_backward: gradient shape mismatch");
  const std::size_t C = x.channels;
  ShiftGradients<Real> g{TokenGrid<Real>(x.batch, x.rows, x.cols, C), std::vector<Real>(C, 0)};
  if (options.mode == ShiftMode::none) {
    g.gx = g_out;
    return g;
  }
  if (mu.size() != C) throw ShapeError("shift_backward: mu length must equal channel count");
  check_channels(C, options.mode);

  std::vector<Real> m(C);
  for (std::size_t c = 0; c < C; ++c) m[c] = clamp01(mu[c]);

  for (std::size_t n = 0; n < x.size(); n += C)
    for (std::size_t c = 0; c < C; ++c) {
      g.gx.data[n + c] = options.residual_form ? g_out.data[n + c] : m[c] * g_out.data[n + c];
      if (!options.residual_form) g.gmu[c] += g_out.data[n + c] * x.data[n + c];
    }
  for_each_source(x, options.mode, [&](std::size_t dst, std::size_t src, std::size_t c) {
    g.gx.data[src] += (Real{1} - m[c]) * g_out.data[dst];
    g.gmu[c] -= g_out.data[dst] * x.data[src];
  });
  for (std::size_t c = 0; c < C; ++c)
    if (mu[c] < Real{0} || mu[c] > Real{1}) g.gmu[c] = Real{0};
  return g;
}

template TokenGrid<float> neighbor_grid(const TokenGrid<float>&, ShiftMode);
template TokenGrid<double> neighbor_grid(const TokenGrid<double>&, ShiftMode);
template TokenGrid<float> apply_shift(const TokenGrid<float>&, std::span<const float>,
                                      ShiftOptions);
template TokenGrid<double> apply_shift(const TokenGrid<double>&, std::span<const double>,
                                       ShiftOptions);
template ShiftGradients<float> shift_backward(const TokenGrid<float>&, const TokenGrid<float>&,
                                              std::span<const float>, ShiftOptions);
template ShiftGradients<double> shift_backward(const TokenGrid<double>&,
                                               const TokenGrid<double>&,
                                               std::span<const double>, ShiftOptions);

}  // namespace vrwkv
