#include "vrwkv/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

namespace vrwkv {

using layers::sigmoid;

void ModelConfig::validate() const {
  if (embed_dim == 0 || embed_dim % 4 != 0)
    throw ShapeError("model config: embed_dim must be a positive multiple of 4");
  if (hidden_dim < embed_dim) throw ShapeError("model config: hidden_dim must be >= embed_dim");
  if (patch_size == 0) throw ShapeError("model config: patch_size must be >= 1");
  if (image_channels == 0) throw ShapeError("model config: image_channels must be >= 1");
  if (image_size < patch_size || image_size % patch_size != 0)
    throw ShapeError("model config: image_size must be a positive multiple of patch_size");
  if (!(layer_scale_init >= 0.0)) throw ShapeError("model config: layer_scale_init must be >= 0");
}

ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  auto scale = [&](std::size_t dim, std::size_t depth, bool extra) {
    c.embed_dim = dim;
    c.hidden_dim = 4 * dim;
    c.depth = depth;
    c.extra_norm = extra;
  };
  if (name == "vrwkv-t") {
    scale(192, 12, false);
  } else if (name == "vrwkv-s") {
    scale(384, 12, false);
  } else if (name == "vrwkv-b") {
    scale(768, 12, false);
  } else if (name == "vrwkv-l") {
    scale(1024, 24, true);
  } else if (name == "tiny") {
    scale(16, 2, false);
    c.patch_size = 4;
    c.num_classes = 10;
    c.image_size = 32;
  } else {
    throw Error("unknown model preset '" + name + "'");
  }
  return c;
}

ParamBreakdown param_breakdown(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.embed_dim, H = cfg.hidden_dim, L = cfg.depth;
  const std::size_t G = cfg.base_grid();
  ParamBreakdown b;
  b.patch_embed = cfg.patch_dim() * C + C;
  b.pos_embed = G * G * C;
  b.spatial_mix = L * (3 * C + 4 * C * C + 2 * C + (cfg.extra_norm ? 2 * C : 0));
  b.channel_mix = L * (2 * C + C * C + 2 * C * H + (cfg.extra_norm ? 2 * H : 0));
  b.block_norms = L * (2 * C + 2 * C + C + C);
  b.final_norm = 2 * C;
  b.head = C * cfg.num_classes + cfg.num_classes;
  return b;
}

std::size_t count_params(const ModelConfig& config) { return param_breakdown(config).total(); }

template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t C = cfg.embed_dim, H = cfg.hidden_dim, G = cfg.base_grid();
  ModelParams<Real> p;
  p.patch_weight = Tensor<Real>({cfg.patch_dim(), C});
  p.patch_bias = Tensor<Real>({C});
  p.pos_embed = Tensor<Real>({G * G, C});
  p.blocks.resize(cfg.depth);
  for (auto& b : p.blocks) {
    b.norm1_weight = b.norm1_bias = Tensor<Real>({C});
    b.spatial.mu_r = b.spatial.mu_k = b.spatial.mu_v = Tensor<Real>({C});
    b.spatial.w_r = b.spatial.w_k = b.spatial.w_v = b.spatial.w_o = Tensor<Real>({C, C});
    b.spatial.decay = b.spatial.bonus = Tensor<Real>({C});
    if (cfg.extra_norm) b.spatial.post_norm_weight = b.spatial.post_norm_bias = Tensor<Real>({C});
    b.gamma_s = Tensor<Real>({C});
    b.norm2_weight = b.norm2_bias = Tensor<Real>({C});
    b.channel.mu_r = b.channel.mu_k = Tensor<Real>({C});
    b.channel.w_r = Tensor<Real>({C, C});
    b.channel.w_k = Tensor<Real>({C, H});
    b.channel.w_v = Tensor<Real>({H, C});
    if (cfg.extra_norm) b.channel.key_norm_weight = b.channel.key_norm_bias = Tensor<Real>({H});
    b.gamma_c = Tensor<Real>({C});
  }
  p.final_norm_weight = p.final_norm_bias = Tensor<Real>({C});
  p.head_weight = Tensor<Real>({C, cfg.num_classes});
  p.head_bias = Tensor<Real>({cfg.num_classes});

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto trunc_normal = [&] {
    double z = normal(rng);
    while (std::abs(z) > 3.0) z = normal(rng);
    return 0.02 * z;
  };
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };

  visit_params(p, [&](const std::string& name, Tensor<Real>& t, bool decay) {
    if (decay) {
      for (auto& x : t.values()) x = static_cast<Real>(trunc_normal());
    } else if (name.find("norm") != std::string::npos && ends_with(name, ".weight")) {
      t.fill(Real{1});
    } else if (name.find(".mu_") != std::string::npos) {
      t.fill(Real{0.5});
    } else if (ends_with(name, ".decay")) {
      const std::size_t n = t.size();
      for (std::size_t c = 0; c < n; ++c)
        t[c] = n == 1 ? Real{0}
                      : static_cast<Real>(-1.0 + 2.0 * static_cast<double>(c) /
                                                     static_cast<double>(n - 1));
    } else if (ends_with(name, "gamma_s") || ends_with(name, "gamma_c")) {
      t.fill(static_cast<Real>(cfg.layer_scale_init));
    } else {
      t.fill(Real{0});
    }
  });
  return p;
}

template <typename Real>
ModelParams<Real> zeros_like(const ModelParams<Real>& p) {
  ModelParams<Real> z = p;
  visit_params(z, [](const std::string&, Tensor<Real>& t, bool) { t.fill(Real{0}); });
  return z;
}

namespace {

template <typename To, typename From>
Tensor<To> convert_tensor(const Tensor<From>& t) {
  if (t.rank() == 0) return {};
  std::vector<To> v(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(v));
}

template <typename Real>
std::vector<Real> to_vector(const Tensor<Real>& t) {
  return {t.values().begin(), t.values().end()};
}

template <typename Real>
void add_into(std::vector<Real>& dst, const std::vector<Real>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename Real>
void add_into(Tensor<Real>& dst, const std::vector<Real>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename Real>
void add_into(TokenGrid<Real>& dst, const TokenGrid<Real>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

struct Tap {
  std::size_t src;
  double weight;
};

// Four taps per output cell, half-pixel centres, clamped at the borders.
std::vector<std::array<Tap, 4>> bilinear_taps(std::size_t in_h, std::size_t in_w,
                                              std::size_t out_h, std::size_t out_w) {
  auto axis = [](std::size_t in, std::size_t out, std::size_t i) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  std::vector<std::array<Tap, 4>> taps(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, ly] = axis(in_h, out_h, y);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, lx] = axis(in_w, out_w, x);
      taps[y * out_w + x] = {Tap{y0 * in_w + x0, (1 - ly) * (1 - lx)},
                             Tap{y0 * in_w + x1, (1 - ly) * lx},
                             Tap{y1 * in_w + x0, ly * (1 - lx)}, Tap{y1 * in_w + x1, ly * lx}};
    }
  }
  return taps;
}

}  // namespace

template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& p) {
  auto cv = [](const Tensor<From>& t) { return convert_tensor<To>(t); };
  ModelParams<To> o;
  o.patch_weight = cv(p.patch_weight);
  o.patch_bias = cv(p.patch_bias);
  o.pos_embed = cv(p.pos_embed);
  for (const auto& b : p.blocks) {
    BlockParams<To> q;
    q.norm1_weight = cv(b.norm1_weight);
    q.norm1_bias = cv(b.norm1_bias);
    q.spatial = {cv(b.spatial.mu_r), cv(b.spatial.mu_k), cv(b.spatial.mu_v),
                 cv(b.spatial.w_r),  cv(b.spatial.w_k),  cv(b.spatial.w_v),
                 cv(b.spatial.w_o),  cv(b.spatial.decay), cv(b.spatial.bonus),
                 cv(b.spatial.post_norm_weight), cv(b.spatial.post_norm_bias)};
    q.gamma_s = cv(b.gamma_s);
    q.norm2_weight = cv(b.norm2_weight);
    q.norm2_bias = cv(b.norm2_bias);
    q.channel = {cv(b.channel.mu_r), cv(b.channel.mu_k), cv(b.channel.w_r),
                 cv(b.channel.w_k),  cv(b.channel.w_v),  cv(b.channel.key_norm_weight),
                 cv(b.channel.key_norm_bias)};
    q.gamma_c = cv(b.gamma_c);
    o.blocks.push_back(std::move(q));
  }
  o.final_norm_weight = cv(p.final_norm_weight);
  o.final_norm_bias = cv(p.final_norm_bias);
  o.head_weight = cv(p.head_weight);
  o.head_bias = cv(p.head_bias);
  return o;
}

template <typename Real>
static std::size_t count_entries(const ModelParams<Real>& p) {
  std::size_t n = 0;
  visit_params(p, [&](const std::string&, const Tensor<Real>& t, bool) { n += t.size(); });
  return n;
}
std::size_t param_count(const ModelParams<double>& p) { return count_entries(p); }
std::size_t param_count(const ModelParams<float>& p) { return count_entries(p); }

template <typename Real>
Tensor<Real> resize_pos_embed(const Tensor<Real>& table, std::size_t in_h, std::size_t in_w,
                              std::size_t out_h, std::size_t out_w) {
  if (table.rows() != in_h * in_w) throw ShapeError("resize_pos_embed: table rows != in_h*in_w");
  if (in_h == out_h && in_w == out_w) return table;
  const std::size_t C = table.cols();
  Tensor<Real> out({out_h * out_w, C});
  const auto taps = bilinear_taps(in_h, in_w, out_h, out_w);
  for (std::size_t t = 0; t < taps.size(); ++t)
    for (const Tap& tap : taps[t])
      for (std::size_t c = 0; c < C; ++c)
        out.at(t, c) += static_cast<Real>(tap.weight) * table.at(tap.src, c);
  return out;
}

template <typename Real>
void resize_pos_embed_backward(const Tensor<Real>& g_out, std::size_t in_h, std::size_t in_w,
                               std::size_t out_h, std::size_t out_w, Tensor<Real>& g_table) {
  const std::size_t C = g_out.cols();
  if (in_h == out_h && in_w == out_w) {
    for (std::size_t i = 0; i < g_out.size(); ++i) g_table[i] += g_out[i];
    return;
  }
  const auto taps = bilinear_taps(in_h, in_w, out_h, out_w);
  for (std::size_t t = 0; t < taps.size(); ++t)
    for (const Tap& tap : taps[t])
      for (std::size_t c = 0; c < C; ++c)
        g_table.at(tap.src, c) += static_cast<Real>(tap.weight) * g_out.at(t, c);
}

template <typename Real>
TokenGrid<Real> patch_embed(const ImageBatch<Real>& image, const ModelParams<Real>& params,
                            const ModelConfig& cfg, PatchEmbedCache<Real>* cache) {
  const std::size_t p = cfg.patch_size;
  if (image.channels != cfg.image_channels)
    throw ShapeError("patch_embed: image channel count does not match the config");
  if (image.height == 0 || image.width == 0 || image.height % p != 0 || image.width % p != 0)
    throw ShapeError("patch_embed: image height and width must be positive multiples of the patch size");
  const std::size_t hp = image.height / p, wp = image.width / p, ch = image.channels;

  TokenGrid<Real> patches(image.batch, hp, wp, cfg.patch_dim());
  for (std::size_t b = 0; b < image.batch; ++b)
    for (std::size_t h = 0; h < hp; ++h)
      for (std::size_t w = 0; w < wp; ++w) {
        auto row = patches.token(b, h, w);
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t c = 0; c < ch; ++c)
              row[(py * p + px) * ch + c] = image.at(b, h * p + py, w * p + px, c);
      }

  TokenGrid<Real> tokens = layers::linear(patches, params.patch_weight, &params.patch_bias);
  const std::size_t g = cfg.base_grid();
  const Tensor<Real> pos = resize_pos_embed(params.pos_embed, g, g, hp, wp);
  for (std::size_t b = 0; b < tokens.batch; ++b)
    for (std::size_t t = 0; t < tokens.tokens(); ++t) {
      auto row = tokens.token(b, t);
      for (std::size_t c = 0; c < tokens.channels; ++c) row[c] += pos.at(t, c);
    }
  if (cache) cache->patches = std::move(patches);
  return tokens;
}

template <typename Real>
void patch_embed_backward(const PatchEmbedCache<Real>& cache, const TokenGrid<Real>& g_out,
                          const ModelParams<Real>& params, const ModelConfig& cfg,
                          ModelParams<Real>& grads, ImageBatch<Real>* g_image) {
  const auto& patches = cache.patches;
  TokenGrid<Real> g_patches = layers::linear_backward(patches, g_out, params.patch_weight,
                                                      grads.patch_weight, &grads.patch_bias);
  Tensor<Real> g_pos({g_out.tokens(), g_out.channels});
  for (std::size_t b = 0; b < g_out.batch; ++b)
    for (std::size_t t = 0; t < g_out.tokens(); ++t) {
      auto row = g_out.token(b, t);
      for (std::size_t c = 0; c < g_out.channels; ++c) g_pos.at(t, c) += row[c];
    }
  const std::size_t g = cfg.base_grid();
  resize_pos_embed_backward(g_pos, g, g, g_out.rows, g_out.cols, grads.pos_embed);

  if (g_image) {
    const std::size_t p = cfg.patch_size, ch = cfg.image_channels;
    *g_image = ImageBatch<Real>(g_out.batch, g_out.rows * p, g_out.cols * p, ch);
    for (std::size_t b = 0; b < g_out.batch; ++b)
      for (std::size_t h = 0; h < g_out.rows; ++h)
        for (std::size_t w = 0; w < g_out.cols; ++w) {
          auto row = g_patches.token(b, h, w);
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
              for (std::size_t c = 0; c < ch; ++c)
                g_image->at(b, h * p + py, w * p + px, c) = row[(py * p + px) * ch + c];
        }
  }
}

template <typename Real>
TokenGrid<Real> spatial_mix(const TokenGrid<Real>& x, const SpatialMixParams<Real>& p,
                            const ModelConfig& cfg, SpatialMixCache<Real>* cache) {
  const ShiftOptions shift = cfg.shift_options();
  TokenGrid<Real> xr = apply_shift(x, p.mu_r.values(), shift);
  TokenGrid<Real> xk = apply_shift(x, p.mu_k.values(), shift);
  TokenGrid<Real> xv = apply_shift(x, p.mu_v.values(), shift);
  TokenGrid<Real> r = layers::linear(xr, p.w_r);
  TokenGrid<Real> k = layers::linear(xk, p.w_k);
  TokenGrid<Real> v = layers::linear(xv, p.w_v);

  const DecayParams<Real> decay{to_vector(p.decay), to_vector(p.bonus)};
  TokenGrid<Real> wkv(x.batch, x.rows, x.cols, x.channels);
  std::vector<WkvContext<Real>> contexts;
  for (std::size_t b = 0; b < x.batch; ++b) {
    auto res = biwkv_forward(k.sequence(b), v.sequence(b), decay, cfg.wkv_options());
    wkv.set_sequence(b, res.wkv);
    if (cache) contexts.push_back(std::move(res.context));
  }

  TokenGrid<Real> gated = wkv;
  for (std::size_t i = 0; i < gated.size(); ++i) gated.data[i] *= sigmoid(r.data[i]);
  TokenGrid<Real> out = layers::linear(gated, p.w_o);
  if (cfg.extra_norm)
    out = layers::layer_norm(out, p.post_norm_weight, p.post_norm_bias,
                             cache ? &cache->post_norm : nullptr);

  if (cache) {
    cache->x = x;
    cache->xr = std::move(xr);
    cache->xk = std::move(xk);
    cache->xv = std::move(xv);
    cache->r = std::move(r);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->wkv = std::move(wkv);
    cache->gated = std::move(gated);
    cache->wkv_contexts = std::move(contexts);
  }
  return out;
}

template <typename Real>
TokenGrid<Real> spatial_mix_backward(const SpatialMixCache<Real>& cache,
                                     const TokenGrid<Real>& g_out,
                                     const SpatialMixParams<Real>& p, const ModelConfig& cfg,
                                     SpatialMixParams<Real>& grads) {
  TokenGrid<Real> g = g_out;
  if (cfg.extra_norm)
    g = layers::layer_norm_backward(cache.post_norm, g, p.post_norm_weight,
                                    grads.post_norm_weight, grads.post_norm_bias);
  const TokenGrid<Real> g_gated = layers::linear_backward(cache.gated, g, p.w_o, grads.w_o);

  TokenGrid<Real> g_wkv = g_gated, g_r = g_gated;
  for (std::size_t i = 0; i < g_gated.size(); ++i) {
    const Real s = sigmoid(cache.r.data[i]);
    g_wkv.data[i] = g_gated.data[i] * s;
    g_r.data[i] = g_gated.data[i] * cache.wkv.data[i] * s * (Real{1} - s);
  }

  TokenGrid<Real> g_k(g_out.batch, g_out.rows, g_out.cols, g_out.channels);
  TokenGrid<Real> g_v = g_k;
  for (std::size_t b = 0; b < g_out.batch; ++b) {
    const auto wg = biwkv_backward(cache.wkv_contexts.at(b), g_wkv.sequence(b));
    g_k.set_sequence(b, wg.gk);
    g_v.set_sequence(b, wg.gv);
    add_into(grads.decay, wg.gw);
    add_into(grads.bonus, wg.gu);
  }

  const ShiftOptions shift = cfg.shift_options();
  const auto g_xr = layers::linear_backward(cache.xr, g_r, p.w_r, grads.w_r);
  const auto g_xk = layers::linear_backward(cache.xk, g_k, p.w_k, grads.w_k);
  const auto g_xv = layers::linear_backward(cache.xv, g_v, p.w_v, grads.w_v);
  auto sr = shift_backward(g_xr, cache.x, p.mu_r.values(), shift);
  auto sk = shift_backward(g_xk, cache.x, p.mu_k.values(), shift);
  auto sv = shift_backward(g_xv, cache.x, p.mu_v.values(), shift);
  add_into(grads.mu_r, sr.gmu);
  add_into(grads.mu_k, sk.gmu);
  add_into(grads.mu_v, sv.gmu);
  add_into(sr.gx, sk.gx);
  add_into(sr.gx, sv.gx);
  return std::move(sr.gx);
}

template <typename Real>
TokenGrid<Real> channel_mix(const TokenGrid<Real>& x, const ChannelMixParams<Real>& p,
                            const ModelConfig& cfg, ChannelMixCache<Real>* cache) {
  const ShiftOptions shift = cfg.shift_options();
  TokenGrid<Real> xr = apply_shift(x, p.mu_r.values(), shift);
  TokenGrid<Real> xk = apply_shift(x, p.mu_k.values(), shift);
  TokenGrid<Real> r = layers::linear(xr, p.w_r);
  TokenGrid<Real> k = layers::linear(xk, p.w_k);
  TokenGrid<Real> act = k;
  for (auto& e : act.data) e = layers::squared_relu(e);
  if (cfg.extra_norm)
    act = layers::layer_norm(act, p.key_norm_weight, p.key_norm_bias,
                             cache ? &cache->key_norm : nullptr);
  TokenGrid<Real> v = layers::linear(act, p.w_v);
  TokenGrid<Real> out = v;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= sigmoid(r.data[i]);
  if (cache) {
    cache->x = x;
    cache->xr = std::move(xr);
    cache->xk = std::move(xk);
    cache->r = std::move(r);
    cache->k = std::move(k);
    cache->activated = std::move(act);
    cache->v = std::move(v);
  }
  return out;
}

template <typename Real>
TokenGrid<Real> channel_mix_backward(const ChannelMixCache<Real>& cache,
                                     const TokenGrid<Real>& g_out,
                                     const ChannelMixParams<Real>& p, const ModelConfig& cfg,
                                     ChannelMixParams<Real>& grads) {
  TokenGrid<Real> g_v = g_out, g_r = g_out;
  for (std::size_t i = 0; i < g_out.size(); ++i) {
    const Real s = sigmoid(cache.r.data[i]);
    g_v.data[i] = g_out.data[i] * s;
    g_r.data[i] = g_out.data[i] * cache.v.data[i] * s * (Real{1} - s);
  }
  TokenGrid<Real> g_act = layers::linear_backward(cache.activated, g_v, p.w_v, grads.w_v);
  if (cfg.extra_norm)
    g_act = layers::layer_norm_backward(cache.key_norm, g_act, p.key_norm_weight,
                                        grads.key_norm_weight, grads.key_norm_bias);
  for (std::size_t i = 0; i < g_act.size(); ++i) {
    const Real kv = cache.k.data[i];
    g_act.data[i] *= kv > Real{0} ? Real{2} * kv : Real{0};
  }
  const ShiftOptions shift = cfg.shift_options();
  const auto g_xk = layers::linear_backward(cache.xk, g_act, p.w_k, grads.w_k);
  const auto g_xr = layers::linear_backward(cache.xr, g_r, p.w_r, grads.w_r);
  auto sr = shift_backward(g_xr, cache.x, p.mu_r.values(), shift);
  auto sk = shift_backward(g_xk, cache.x, p.mu_k.values(), shift);
  add_into(grads.mu_r, sr.gmu);
  add_into(grads.mu_k, sk.gmu);
  add_into(sr.gx, sk.gx);
  return std::move(sr.gx);
}

template <typename Real>
TokenGrid<Real> encoder_layer(const TokenGrid<Real>& x, const BlockParams<Real>& p,
                              const ModelConfig& cfg, EncoderLayerCache<Real>* cache) {
  const std::size_t C = x.channels;
  const auto h1 = layers::layer_norm(x, p.norm1_weight, p.norm1_bias,
                                     cache ? &cache->norm1 : nullptr);
  TokenGrid<Real> s = spatial_mix(h1, p.spatial, cfg, cache ? &cache->spatial : nullptr);
  TokenGrid<Real> x1 = x;
  for (std::size_t i = 0; i < x1.size(); ++i) x1.data[i] += p.gamma_s[i % C] * s.data[i];

  const auto h2 = layers::layer_norm(x1, p.norm2_weight, p.norm2_bias,
                                     cache ? &cache->norm2 : nullptr);
  TokenGrid<Real> m = channel_mix(h2, p.channel, cfg, cache ? &cache->channel : nullptr);
  TokenGrid<Real> x2 = x1;
  for (std::size_t i = 0; i < x2.size(); ++i) x2.data[i] += p.gamma_c[i % C] * m.data[i];

  if (cache) {
    cache->spatial_out = std::move(s);
    cache->channel_out = std::move(m);
  }
  return x2;
}

template <typename Real>
TokenGrid<Real> encoder_layer_backward(const EncoderLayerCache<Real>& cache,
                                       const TokenGrid<Real>& g_out, const BlockParams<Real>& p,
                                       const ModelConfig& cfg, BlockParams<Real>& grads) {
  const std::size_t C = g_out.channels;
  TokenGrid<Real> g_x1 = g_out;
  TokenGrid<Real> g_m = g_out;
  for (std::size_t i = 0; i < g_out.size(); ++i) {
    grads.gamma_c[i % C] += g_out.data[i] * cache.channel_out.data[i];
    g_m.data[i] = g_out.data[i] * p.gamma_c[i % C];
  }
  const auto g_h2 = channel_mix_backward(cache.channel, g_m, p.channel, cfg, grads.channel);
  add_into(g_x1, layers::layer_norm_backward(cache.norm2, g_h2, p.norm2_weight,
                                             grads.norm2_weight, grads.norm2_bias));

  TokenGrid<Real> g_x = g_x1;
  TokenGrid<Real> g_s = g_x1;
  for (std::size_t i = 0; i < g_x1.size(); ++i) {
    grads.gamma_s[i % C] += g_x1.data[i] * cache.spatial_out.data[i];
    g_s.data[i] = g_x1.data[i] * p.gamma_s[i % C];
  }
  const auto g_h1 = spatial_mix_backward(cache.spatial, g_s, p.spatial, cfg, grads.spatial);
  add_into(g_x, layers::layer_norm_backward(cache.norm1, g_h1, p.norm1_weight,
                                            grads.norm1_weight, grads.norm1_bias));
  return g_x;
}

template <typename Real>
TokenGrid<Real> forward_features(const ImageBatch<Real>& image, const ModelParams<Real>& params,
                                 const ModelConfig& cfg, ModelCache<Real>* cache) {
  if (params.blocks.size() != cfg.depth)
    throw ShapeError("model: parameter depth does not match the config");
  TokenGrid<Real> x = patch_embed(image, params, cfg, cache ? &cache->embed : nullptr);
  if (cache) cache->layers.assign(cfg.depth, EncoderLayerCache<Real>{});
  for (std::size_t l = 0; l < cfg.depth; ++l)
    x = encoder_layer(x, params.blocks[l], cfg, cache ? &cache->layers[l] : nullptr);
  if (cache) {
    cache->features = x;
    cache->valid = true;
  }
  return x;
}

template <typename Real>
Tensor<Real> model_forward(const ImageBatch<Real>& image, const ModelParams<Real>& params,
                           const ModelConfig& cfg, ModelCache<Real>* cache) {
  const TokenGrid<Real> feats = forward_features(image, params, cfg, cache);
  const auto normed = layers::layer_norm(feats, params.final_norm_weight, params.final_norm_bias,
                                         cache ? &cache->final_norm : nullptr);
  const std::size_t B = feats.batch, T = feats.tokens(), C = feats.channels;
  const std::size_t K = cfg.num_classes;
  Tensor<Real> pooled({B, C});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      auto row = normed.token(b, t);
      for (std::size_t c = 0; c < C; ++c) pooled.at(b, c) += row[c];
    }
    for (std::size_t c = 0; c < C; ++c) pooled.at(b, c) /= static_cast<Real>(T);
  }
  Tensor<Real> logits({B, K});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      Real acc = params.head_bias[k];
      for (std::size_t c = 0; c < C; ++c) acc += pooled.at(b, c) * params.head_weight.at(c, k);
      logits.at(b, k) = acc;
    }
  if (cache) cache->pooled = std::move(pooled);
  return logits;
}

template <typename Real>
ModelParams<Real> features_backward(const ModelCache<Real>& cache,
                                    const TokenGrid<Real>& g_features,
                                    const ModelParams<Real>& params, const ModelConfig& cfg,
                                    ImageBatch<Real>* g_image) {
  if (!cache.valid || cache.layers.size() != cfg.depth)
    throw Error("model backward: forward pass did not save activations");
  if (!g_features.same_shape(cache.features))
    throw ShapeError("model backward: feature gradient shape mismatch");
  ModelParams<Real> grads = zeros_like(params);
  TokenGrid<Real> g = g_features;
  for (std::size_t l = cfg.depth; l-- > 0;)
    g = encoder_layer_backward(cache.layers[l], g, params.blocks[l], cfg, grads.blocks[l]);
  patch_embed_backward(cache.embed, g, params, cfg, grads, g_image);
  return grads;
}

template <typename Real>
ModelParams<Real> model_backward(const ModelCache<Real>& cache, const Tensor<Real>& g_logits,
                                 const ModelParams<Real>& params, const ModelConfig& cfg,
                                 ImageBatch<Real>* g_image) {
  if (!cache.valid) throw Error("model backward: forward pass did not save activations");
  const auto& feats = cache.features;
  const std::size_t B = feats.batch, T = feats.tokens(), C = feats.channels;
  const std::size_t K = cfg.num_classes;
  if (g_logits.rank() != 2 || g_logits.rows() != B || g_logits.cols() != K)
    throw ShapeError("model backward: logit gradient shape mismatch");

  Tensor<Real> g_head_w({C, K}), g_head_b({K});
  Tensor<Real> g_pooled({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      const Real g = g_logits.at(b, k);
      g_head_b[k] += g;
      for (std::size_t c = 0; c < C; ++c) {
        g_head_w.at(c, k) += cache.pooled.at(b, c) * g;
        g_pooled.at(b, c) += g * params.head_weight.at(c, k);
      }
    }
  TokenGrid<Real> g_normed(B, feats.rows, feats.cols, C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      auto row = g_normed.token(b, t);
      for (std::size_t c = 0; c < C; ++c) row[c] = g_pooled.at(b, c) / static_cast<Real>(T);
    }
  Tensor<Real> g_fn_w({C}), g_fn_b({C});
  const auto g_feats =
      layers::layer_norm_backward(cache.final_norm, g_normed, params.final_norm_weight, g_fn_w, g_fn_b);

  ModelParams<Real> grads = features_backward(cache, g_feats, params, cfg, g_image);
  grads.head_weight = std::move(g_head_w);
  grads.head_bias = std::move(g_head_b);
  grads.final_norm_weight = std::move(g_fn_w);
  grads.final_norm_bias = std::move(g_fn_b);
  return grads;
}

#define VRWKV_INSTANTIATE(Real)                                                                  \
  template ModelParams<Real> init_params(const ModelConfig&, std::uint64_t);                     \
  template ModelParams<Real> zeros_like(const ModelParams<Real>&);                               \
  template Tensor<Real> resize_pos_embed(const Tensor<Real>&, std::size_t, std::size_t,          \
                                         std::size_t, std::size_t);                              \
  template void resize_pos_embed_backward(const Tensor<Real>&, std::size_t, std::size_t,         \
                                          std::size_t, std::size_t, Tensor<Real>&);              \
  template TokenGrid<Real> patch_embed(const ImageBatch<Real>&, const ModelParams<Real>&,        \
                                       const ModelConfig&, PatchEmbedCache<Real>*);              \
  template void patch_embed_backward(const PatchEmbedCache<Real>&, const TokenGrid<Real>&,       \
                                     const ModelParams<Real>&, const ModelConfig&,               \
                                     ModelParams<Real>&, ImageBatch<Real>*);                     \
  template TokenGrid<Real> spatial_mix(const TokenGrid<Real>&, const SpatialMixParams<Real>&,    \
                                       const ModelConfig&, SpatialMixCache<Real>*);              \
  template TokenGrid<Real> spatial_mix_backward(const SpatialMixCache<Real>&,                    \
                                                const TokenGrid<Real>&,                          \
                                                const SpatialMixParams<Real>&,                   \
                                                const ModelConfig&, SpatialMixParams<Real>&);    \
  template TokenGrid<Real> channel_mix(const TokenGrid<Real>&, const ChannelMixParams<Real>&,    \
                                       const ModelConfig&, ChannelMixCache<Real>*);              \
  template TokenGrid<Real> channel_mix_backward(const ChannelMixCache<Real>&,                    \
                                                const TokenGrid<Real>&,                          \
                                                const ChannelMixParams<Real>&,                   \
                                                const ModelConfig&, ChannelMixParams<Real>&);    \
  template TokenGrid<Real> encoder_layer(const TokenGrid<Real>&, const BlockParams<Real>&,       \
                                         const ModelConfig&, EncoderLayerCache<Real>*);          \
  template TokenGrid<Real> encoder_layer_backward(const EncoderLayerCache<Real>&,                \
                                                  const TokenGrid<Real>&,                        \
                                                  const BlockParams<Real>&, const ModelConfig&,  \
                                                  BlockParams<Real>&);                           \
  template TokenGrid<Real> forward_features(const ImageBatch<Real>&, const ModelParams<Real>&,   \
                                            const ModelConfig&, ModelCache<Real>*);              \
  template Tensor<Real> model_forward(const ImageBatch<Real>&, const ModelParams<Real>&,         \
                                      const ModelConfig&, ModelCache<Real>*);                    \
  template ModelParams<Real> features_backward(const ModelCache<Real>&, const TokenGrid<Real>&,  \
                                               const ModelParams<Real>&, const ModelConfig&,     \
                                               ImageBatch<Real>*);                               \
  template ModelParams<Real> model_backward(const ModelCache<Real>&, const Tensor<Real>&,        \
                                            const ModelParams<Real>&, const ModelConfig&,        \
                                            ImageBatch<Real>*);

VRWKV_INSTANTIATE(float)
VRWKV_INSTANTIATE(double)
#undef VRWKV_INSTANTIATE

template ModelParams<float> convert_params(const ModelParams<double>&);
template ModelParams<double> convert_params(const ModelParams<float>&);
template ModelParams<double> convert_params(const ModelParams<double>&);
template ModelParams<float> convert_params(const ModelParams<float>&);

}  // namespace vrwkv
