#include "vrwkv/layers.hpp"

#include <cmath>

namespace vrwkv::layers {

template <typename Real>
TokenGrid<Real> linear(const TokenGrid<Real>& x, const Tensor<Real>& weight,
                       const Tensor<Real>* bias) {
  const std::size_t in = weight.rows(), out = weight.cols();
  if (x.channels != in) throw ShapeError("linear: input channels do not match weight rows");
  TokenGrid<Real> y(x.batch, x.rows, x.cols, out);
  const std::size_t n = x.batch * x.tokens();
  for (std::size_t r = 0; r < n; ++r) {
    Real* yr = y.data.data() + r * out;
    const Real* xr = x.data.data() + r * in;
    if (bias) std::copy(bias->data(), bias->data() + out, yr);
    for (std::size_t i = 0; i < in; ++i) {
      const Real xi = xr[i];
      const Real* wi = weight.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
  return y;
}

template <typename Real>
TokenGrid<Real> linear_backward(const TokenGrid<Real>& x, const TokenGrid<Real>& g_out,
                                const Tensor<Real>& weight, Tensor<Real>& g_weight,
                                Tensor<Real>* g_bias) {
  const std::size_t in = weight.rows(), out = weight.cols();
  if (g_out.channels != out || x.channels != in)
    throw ShapeError("linear_backward: shape mismatch");
  TokenGrid<Real> gx(x.batch, x.rows, x.cols, in);
  const std::size_t n = x.batch * x.tokens();
  for (std::size_t r = 0; r < n; ++r) {
    const Real* gr = g_out.data.data() + r * out;
    const Real* xr = x.data.data() + r * in;
    Real* gxr = gx.data.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const Real* wi = weight.data() + i * out;
      Real* gwi = g_weight.data() + i * out;
      Real acc = 0;
      const Real xi = xr[i];
      for (std::size_t o = 0; o < out; ++o) {
        acc += gr[o] * wi[o];
        gwi[o] += xi * gr[o];
      }
      gxr[i] = acc;
    }
    if (g_bias)
      for (std::size_t o = 0; o < out; ++o) (*g_bias)[o] += gr[o];
  }
  return gx;
}

template <typename Real>
TokenGrid<Real> layer_norm(const TokenGrid<Real>& x, const Tensor<Real>& gamma,
                           const Tensor<Real>& beta, LayerNormCache<Real>* cache) {
  const std::size_t C = x.channels;
  if (gamma.size() != C || beta.size() != C) throw ShapeError("layer_norm: parameter length");
  const std::size_t n = x.batch * x.tokens();
  TokenGrid<Real> y(x.batch, x.rows, x.cols, C);
  if (cache) {
    cache->normalized = TokenGrid<Real>(x.batch, x.rows, x.cols, C);
    cache->rstd.assign(n, Real{0});
  }
  for (std::size_t r = 0; r < n; ++r) {
    const Real* xr = x.data.data() + r * C;
    Real mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<Real>(C);
    Real var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<Real>(C);
    const Real rstd = Real{1} / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    for (std::size_t c = 0; c < C; ++c) {
      const Real xhat = (xr[c] - mean) * rstd;
      y.data[r * C + c] = xhat * gamma[c] + beta[c];
      if (cache) cache->normalized.data[r * C + c] = xhat;
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

template <typename Real>
TokenGrid<Real> layer_norm_backward(const LayerNormCache<Real>& cache,
                                    const TokenGrid<Real>& g_out, const Tensor<Real>& gamma,
                                    Tensor<Real>& g_gamma, Tensor<Real>& g_beta) {
  const auto& xhat = cache.normalized;
  if (!g_out.same_shape(xhat)) throw ShapeError("layer_norm_backward: shape mismatch");
  const std::size_t C = xhat.channels;
  const std::size_t n = xhat.batch * xhat.tokens();
  TokenGrid<Real> gx(xhat.batch, xhat.rows, xhat.cols, C);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* g = g_out.data.data() + r * C;
    const Real* xh = xhat.data.data() + r * C;
    Real sum_gxhat = 0, sum_gxhat_xhat = 0;
    for (std::size_t c = 0; c < C; ++c) {
      g_gamma[c] += g[c] * xh[c];
      g_beta[c] += g[c];
      const Real gh = g[c] * gamma[c];
      sum_gxhat += gh;
      sum_gxhat_xhat += gh * xh[c];
    }
    const Real inv_c = Real{1} / static_cast<Real>(C);
    for (std::size_t c = 0; c < C; ++c) {
      const Real gh = g[c] * gamma[c];
      gx.data[r * C + c] =
          cache.rstd[r] * (gh - inv_c * sum_gxhat - xh[c] * inv_c * sum_gxhat_xhat);
    }
  }
  return gx;
}

#define VRWKV_INSTANTIATE(Real)                                                              \
  template TokenGrid<Real> linear(const TokenGrid<Real>&, const Tensor<Real>&,               \
                                  const Tensor<Real>*);                                      \
  template TokenGrid<Real> linear_backward(const TokenGrid<Real>&, const TokenGrid<Real>&,   \
                                           const Tensor<Real>&, Tensor<Real>&,               \
                                           Tensor<Real>*);                                   \
  template TokenGrid<Real> layer_norm(const TokenGrid<Real>&, const Tensor<Real>&,           \
                                      const Tensor<Real>&, LayerNormCache<Real>*);           \
  template TokenGrid<Real> layer_norm_backward(const LayerNormCache<Real>&,                  \
                                               const TokenGrid<Real>&, const Tensor<Real>&,  \
                                               Tensor<Real>&, Tensor<Real>&);

VRWKV_INSTANTIATE(float)
VRWKV_INSTANTIATE(double)
#undef VRWKV_INSTANTIATE

}  // namespace vrwkv::layers
