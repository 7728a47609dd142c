#pragma once

// VRWKV encoder: patch embedding, L encoder layers (spatial-mix + channel-mix,
// pre-norm residuals with layer scale), final layer norm, mean pooling and a
// linear head. Every layer has a hand-derived backward pass.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vrwkv/biwkv.hpp"
#include "vrwkv/layers.hpp"
#include "vrwkv/tensor.hpp"
#include "vrwkv/token_shift.hpp"

namespace vrwkv {

struct ModelConfig {
  std::size_t embed_dim = 192;
  std::size_t hidden_dim = 768;
  std::size_t depth = 12;
  std::size_t patch_size = 16;
  std::size_t num_classes = 1000;
  std::size_t image_channels = 3;
  // Resolution the position embedding is learned at; other resolutions
  // resize it bilinearly.
  std::size_t image_size = 224;
  bool extra_norm = false;
  double layer_scale_init = 1.0;
  ShiftMode shift_mode = ShiftMode::quad;
  bool shift_residual_form = false;
  WkvDirection attention = WkvDirection::bidirectional;

  /// Throws ShapeError when an invariant is violated.
  void validate() const;
  std::size_t base_grid() const { return image_size / patch_size; }
  std::size_t patch_dim() const { return patch_size * patch_size * image_channels; }
  ShiftOptions shift_options() const { return {shift_mode, shift_residual_form}; }
  WkvOptions wkv_options() const { return {attention, true, true, false}; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named presets. "tiny" is the desk-scale training configuration.
ModelConfig preset_config(const std::string& name);

template <typename Real>
struct SpatialMixParams {
  Tensor<Real> mu_r, mu_k, mu_v;                  // {C}
  Tensor<Real> w_r, w_k, w_v, w_o;                // {C, C}
  Tensor<Real> decay, bonus;                      // {C}
  Tensor<Real> post_norm_weight, post_norm_bias;  // {C}; empty unless extra_norm
};

template <typename Real>
struct ChannelMixParams {
  Tensor<Real> mu_r, mu_k;                      // {C}
  Tensor<Real> w_r;                             // {C, C}
  Tensor<Real> w_k;                             // {C, hidden}
  Tensor<Real> w_v;                             // {hidden, C}
  Tensor<Real> key_norm_weight, key_norm_bias;  // {hidden}; empty unless extra_norm
};

template <typename Real>
struct BlockParams {
  Tensor<Real> norm1_weight, norm1_bias;
  SpatialMixParams<Real> spatial;
  Tensor<Real> gamma_s;
  Tensor<Real> norm2_weight, norm2_bias;
  ChannelMixParams<Real> channel;
  Tensor<Real> gamma_c;
};

template <typename Real>
struct ModelParams {
  Tensor<Real> patch_weight;  // {p*p*channels, C}
  Tensor<Real> patch_bias;    // {C}
  Tensor<Real> pos_embed;     // {base_grid^2, C}
  std::vector<BlockParams<Real>> blocks;
  Tensor<Real> final_norm_weight, final_norm_bias;
  Tensor<Real> head_weight;  // {C, num_classes}
  Tensor<Real> head_bias;    // {num_classes}
};

/// Visits every non-empty learnable tensor in declaration order as
/// f(name, tensor, weight_decay). Works on const and non-const params.
template <typename Params, typename F>
void visit_params(Params& p, F&& f) {
  auto v = [&](const std::string& name, auto& t, bool decay) {
    if (t.size() > 0) f(name, t, decay);
  };
  v("patch_embed.weight", p.patch_weight, true);
  v("patch_embed.bias", p.patch_bias, false);
  v("pos_embed", p.pos_embed, true);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    v(pre + "norm1.weight", b.norm1_weight, false);
    v(pre + "norm1.bias", b.norm1_bias, false);
    v(pre + "spatial.mu_r", b.spatial.mu_r, false);
    v(pre + "spatial.mu_k", b.spatial.mu_k, false);
    v(pre + "spatial.mu_v", b.spatial.mu_v, false);
    v(pre + "spatial.w_r", b.spatial.w_r, true);
    v(pre + "spatial.w_k", b.spatial.w_k, true);
    v(pre + "spatial.w_v", b.spatial.w_v, true);
    v(pre + "spatial.w_o", b.spatial.w_o, true);
    v(pre + "spatial.decay", b.spatial.decay, false);
    v(pre + "spatial.bonus", b.spatial.bonus, false);
    v(pre + "spatial.post_norm.weight", b.spatial.post_norm_weight, false);
    v(pre + "spatial.post_norm.bias", b.spatial.post_norm_bias, false);
    v(pre + "gamma_s", b.gamma_s, false);
    v(pre + "norm2.weight", b.norm2_weight, false);
    v(pre + "norm2.bias", b.norm2_bias, false);
    v(pre + "channel.mu_r", b.channel.mu_r, false);
    v(pre + "channel.mu_k", b.channel.mu_k, false);
    v(pre + "channel.w_r", b.channel.w_r, true);
    v(pre + "channel.w_k", b.channel.w_k, true);
    v(pre + "channel.w_v", b.channel.w_v, true);
    v(pre + "channel.key_norm.weight", b.channel.key_norm_weight, false);
    v(pre + "channel.key_norm.bias", b.channel.key_norm_bias, false);
    v(pre + "gamma_c", b.gamma_c, false);
  }
  v("final_norm.weight", p.final_norm_weight, false);
  v("final_norm.bias", p.final_norm_bias, false);
  v("head.weight", p.head_weight, true);
  v("head.bias", p.head_bias, false);
}

/// Per-component scalar parameter counts.
struct ParamBreakdown {
  std::size_t patch_embed = 0;
  std::size_t pos_embed = 0;
  std::size_t spatial_mix = 0;    // all layers
  std::size_t channel_mix = 0;    // all layers
  std::size_t block_norms = 0;    // pre-norms and layer-scale vectors, all layers
  std::size_t final_norm = 0;
  std::size_t head = 0;

  std::size_t total() const {
    return patch_embed + pos_embed + spatial_mix + channel_mix + block_norms + final_norm + head;
  }
};

ParamBreakdown param_breakdown(const ModelConfig& config);
std::size_t count_params(const ModelConfig& config);

/// Deterministic per seed. Projections and the position embedding draw from a
/// N(0, 0.02^2) truncated at 3 sigma; biases zero; norms identity; decay
/// linearly spaced in [-1, 1]; bonus zero; shift mixes 0.5; layer scale
/// `layer_scale_init`.
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& config, std::uint64_t seed);

/// Same structure as `p`, every entry zero.
template <typename Real>
ModelParams<Real> zeros_like(const ModelParams<Real>& p);

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& p);

std::size_t param_count(const ModelParams<double>& p);
std::size_t param_count(const ModelParams<float>& p);

/// B x H x W x channels image batch.
template <typename Real>
struct ImageBatch {
  std::size_t batch = 0, height = 0, width = 0, channels = 0;
  std::vector<Real> data;

  ImageBatch() = default;
  ImageBatch(std::size_t b, std::size_t h, std::size_t w, std::size_t c, Real fill = Real{0})
      : batch(b), height(h), width(w), channels(c), data(b * h * w * c, fill) {}
  Real& at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
    return data[((b * height + y) * width + x) * channels + c];
  }
  const Real& at(std::size_t b, std::size_t y, std::size_t x, std::size_t c) const {
    return data[((b * height + y) * width + x) * channels + c];
  }
};

// Bilinear resize (half-pixel centres, edge clamped) of a {h*w, C} position
// table and its adjoint.
template <typename Real>
Tensor<Real> resize_pos_embed(const Tensor<Real>& table, std::size_t in_h, std::size_t in_w,
                              std::size_t out_h, std::size_t out_w);
template <typename Real>
void resize_pos_embed_backward(const Tensor<Real>& g_out, std::size_t in_h, std::size_t in_w,
                               std::size_t out_h, std::size_t out_w, Tensor<Real>& g_table);

template <typename Real>
struct PatchEmbedCache {
  TokenGrid<Real> patches;  // one p*p*channels row per token
};

template <typename Real>
TokenGrid<Real> patch_embed(const ImageBatch<Real>& image, const ModelParams<Real>& params,
                            const ModelConfig& config, PatchEmbedCache<Real>* cache = nullptr);

/// Accumulates patch / position gradients; writes the image gradient when
/// `g_image` is non-null.
template <typename Real>
void patch_embed_backward(const PatchEmbedCache<Real>& cache, const TokenGrid<Real>& g_out,
                          const ModelParams<Real>& params, const ModelConfig& config,
                          ModelParams<Real>& grads, ImageBatch<Real>* g_image);

template <typename Real>
struct SpatialMixCache {
  TokenGrid<Real> x, xr, xk, xv;  // input and its three shifted versions
  TokenGrid<Real> r, k, v;
  TokenGrid<Real> wkv;
  TokenGrid<Real> gated;
  std::vector<WkvContext<Real>> wkv_contexts;  // one per batch item
  layers::LayerNormCache<Real> post_norm;
};

template <typename Real>
TokenGrid<Real> spatial_mix(const TokenGrid<Real>& x, const SpatialMixParams<Real>& p,
                            const ModelConfig& config, SpatialMixCache<Real>* cache = nullptr);

template <typename Real>
TokenGrid<Real> spatial_mix_backward(const SpatialMixCache<Real>& cache,
                                     const TokenGrid<Real>& g_out,
                                     const SpatialMixParams<Real>& p, const ModelConfig& config,
                                     SpatialMixParams<Real>& grads);

template <typename Real>
struct ChannelMixCache {
  TokenGrid<Real> x, xr, xk;
  TokenGrid<Real> r, k;
  TokenGrid<Real> activated;  // squared ReLU of k, normalised when extra_norm
  TokenGrid<Real> v;
  layers::LayerNormCache<Real> key_norm;
};

template <typename Real>
TokenGrid<Real> channel_mix(const TokenGrid<Real>& x, const ChannelMixParams<Real>& p,
                            const ModelConfig& config, ChannelMixCache<Real>* cache = nullptr);

template <typename Real>
TokenGrid<Real> channel_mix_backward(const ChannelMixCache<Real>& cache,
                                     const TokenGrid<Real>& g_out,
                                     const ChannelMixParams<Real>& p, const ModelConfig& config,
                                     ChannelMixParams<Real>& grads);

template <typename Real>
struct EncoderLayerCache {
  layers::LayerNormCache<Real> norm1, norm2;
  SpatialMixCache<Real> spatial;
  ChannelMixCache<Real> channel;
  TokenGrid<Real> spatial_out, channel_out;
};

template <typename Real>
TokenGrid<Real> encoder_layer(const TokenGrid<Real>& x, const BlockParams<Real>& p,
                              const ModelConfig& config, EncoderLayerCache<Real>* cache = nullptr);

template <typename Real>
TokenGrid<Real> encoder_layer_backward(const EncoderLayerCache<Real>& cache,
                                       const TokenGrid<Real>& g_out, const BlockParams<Real>& p,
                                       const ModelConfig& config, BlockParams<Real>& grads);

template <typename Real>
struct ModelCache {
  PatchEmbedCache<Real> embed;
  std::vector<EncoderLayerCache<Real>> layers;
  layers::LayerNormCache<Real> final_norm;
  TokenGrid<Real> features;  // output of the last encoder layer
  Tensor<Real> pooled;       // {B, C}
  bool valid = false;
};

/// Patch embedding followed by the encoder layers.
template <typename Real>
TokenGrid<Real> forward_features(const ImageBatch<Real>& image, const ModelParams<Real>& params,
                                 const ModelConfig& config, ModelCache<Real>* cache = nullptr);

/// Returns {B, num_classes} logits.
template <typename Real>
Tensor<Real> model_forward(const ImageBatch<Real>& image, const ModelParams<Real>& params,
                           const ModelConfig& config, ModelCache<Real>* cache = nullptr);

/// Gradients of every parameter given d(loss)/d(features). Throws Error when
/// the cache was not filled by a forward pass.
template <typename Real>
ModelParams<Real> features_backward(const ModelCache<Real>& cache,
                                    const TokenGrid<Real>& g_features,
                                    const ModelParams<Real>& params, const ModelConfig& config,
                                    ImageBatch<Real>* g_image = nullptr);

template <typename Real>
ModelParams<Real> model_backward(const ModelCache<Real>& cache, const Tensor<Real>& g_logits,
                                 const ModelParams<Real>& params, const ModelConfig& config,
                                 ImageBatch<Real>* g_image = nullptr);

}  // namespace vrwkv
