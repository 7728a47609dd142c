#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vrwkv/gradcheck.hpp"
#include "vrwkv/model.hpp"

using namespace vrwkv;

namespace {

using Mat = std::vector<std::vector<double>>;  // [token][channel]

ModelConfig micro_config(bool extra_norm = false) {
  ModelConfig c;
  c.embed_dim = 4;
  c.hidden_dim = 8;
  c.depth = 1;
  c.patch_size = 1;
  c.num_classes = 3;
  c.image_channels = 2;
  c.image_size = 2;
  c.extra_norm = extra_norm;
  return c;
}

Mat to_mat(const TokenGrid<double>& g) {
  Mat m(g.tokens(), std::vector<double>(g.channels));
  for (std::size_t t = 0; t < g.tokens(); ++t)
    for (std::size_t c = 0; c < g.channels; ++c) m[t][c] = g.token(0, t)[c];
  return m;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Quad shift on a rows x cols grid, convex form, written out per neighbour.
Mat hand_shift(const Mat& x, std::size_t rows, std::size_t cols, const Tensor<double>& mu) {
  const std::size_t C = x[0].size(), q = C / 4;
  Mat y = x;
  for (std::size_t h = 0; h < rows; ++h)
    for (std::size_t w = 0; w < cols; ++w)
      for (std::size_t c = 0; c < C; ++c) {
        long nh = static_cast<long>(h), nw = static_cast<long>(w);
        if (c < q) nh -= 1;
        else if (c < 2 * q) nh += 1;
        else if (c < 3 * q) nw -= 1;
        else nw += 1;
        double nb = 0.0;
        if (nh >= 0 && nw >= 0 && nh < static_cast<long>(rows) && nw < static_cast<long>(cols))
          nb = x[static_cast<std::size_t>(nh) * cols + static_cast<std::size_t>(nw)][c];
        const double m = std::clamp(mu[c], 0.0, 1.0);
        y[h * cols + w][c] = m * x[h * cols + w][c] + (1 - m) * nb;
      }
  return y;
}

Mat hand_matmul(const Mat& x, const Tensor<double>& w) {
  Mat y(x.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t o = 0; o < w.cols(); ++o)
      for (std::size_t i = 0; i < w.rows(); ++i) y[t][o] += x[t][i] * w.at(i, o);
  return y;
}

Mat hand_layer_norm(const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
  Mat y = x;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double n = static_cast<double>(x[t].size());
    double mean = 0, var = 0;
    for (double v : x[t]) mean += v / n;
    for (double v : x[t]) var += (v - mean) * (v - mean) / n;
    for (std::size_t c = 0; c < x[t].size(); ++c)
      y[t][c] = (x[t][c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return y;
}

Mat hand_spatial(const Mat& x, std::size_t rows, std::size_t cols,
                 const SpatialMixParams<double>& p, bool extra_norm) {
  const std::size_t T = x.size(), C = x[0].size();
  const Mat r = hand_matmul(hand_shift(x, rows, cols, p.mu_r), p.w_r);
  const Mat k = hand_matmul(hand_shift(x, rows, cols, p.mu_k), p.w_k);
  const Mat v = hand_matmul(hand_shift(x, rows, cols, p.mu_v), p.w_v);
  Mat gated(T, std::vector<double>(C));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      double num = 0, den = 0;
      for (std::size_t i = 0; i < T; ++i) {
        double e;
        if (i == t) {
          e = std::exp(p.bonus[c] + k[i][c]);
        } else {
          const double d = std::abs(static_cast<double>(i) - static_cast<double>(t));
          e = std::exp(-(d - 1) / static_cast<double>(T) * p.decay[c] + k[i][c]);
        }
        num += e * v[i][c];
        den += e;
      }
      gated[t][c] = sig(r[t][c]) * num / den;
    }
  Mat out = hand_matmul(gated, p.w_o);
  if (extra_norm) out = hand_layer_norm(out, p.post_norm_weight, p.post_norm_bias);
  return out;
}

Mat hand_channel(const Mat& x, std::size_t rows, std::size_t cols,
                 const ChannelMixParams<double>& p, bool extra_norm) {
  const Mat r = hand_matmul(hand_shift(x, rows, cols, p.mu_r), p.w_r);
  Mat k = hand_matmul(hand_shift(x, rows, cols, p.mu_k), p.w_k);
  for (auto& row : k)
    for (auto& e : row) e = e > 0 ? e * e : 0.0;
  if (extra_norm) k = hand_layer_norm(k, p.key_norm_weight, p.key_norm_bias);
  Mat out = hand_matmul(k, p.w_v);
  for (std::size_t t = 0; t < out.size(); ++t)
    for (std::size_t c = 0; c < out[t].size(); ++c) out[t][c] *= sig(r[t][c]);
  return out;
}

double mat_diff(const Mat& a, const Mat& b) {
  double m = 0;
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t c = 0; c < a[t].size(); ++c) m = std::max(m, std::abs(a[t][c] - b[t][c]));
  return m;
}

ImageBatch<double> random_image(std::size_t b, std::size_t h, std::size_t w, std::size_t ch,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  ImageBatch<double> img(b, h, w, ch);
  for (auto& v : img.data) v = d(rng);
  return img;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("patch_embed: 224x224 with 16x16 patches gives a 14x14 grid") {
  const auto cfg = preset_config("vrwkv-t");
  const auto p = init_params<double>(cfg, 0);
  const auto tokens = patch_embed(ImageBatch<double>(1, 224, 224, 3), p, cfg);
  CHECK(tokens.rows == 14);
  CHECK(tokens.cols == 14);
  CHECK(tokens.tokens() == 196);
  CHECK(tokens.channels == 192);
}

TEST_CASE("patch_embed: single patch is its projection plus the position embedding") {
  auto cfg = micro_config();
  cfg.patch_size = 2;
  const auto p = gradcheck_params(cfg, 3);
  const auto img = random_image(1, 2, 2, 2, 4);
  const auto tokens = patch_embed(img, p, cfg);
  REQUIRE(tokens.tokens() == 1);
  for (std::size_t c = 0; c < 4; ++c) {
    double expected = p.patch_bias[c] + p.pos_embed.at(0, c);
    for (std::size_t i = 0; i < 8; ++i) expected += img.data[i] * p.patch_weight.at(i, c);
    CHECK(tokens.token(0, 0)[c] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("patch_embed: zero image and zero position embedding give the bias everywhere") {
  auto cfg = micro_config();
  cfg.image_size = 4;
  auto p = gradcheck_params(cfg, 5);
  p.pos_embed.fill(0.0);
  const auto tokens = patch_embed(ImageBatch<double>(2, 4, 4, 2), p, cfg);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < tokens.tokens(); ++t)
      for (std::size_t c = 0; c < 4; ++c) CHECK(tokens.token(b, t)[c] == p.patch_bias[c]);
}

TEST_CASE("patch_embed: non-divisible resolution is rejected") {
  auto cfg = micro_config();
  cfg.patch_size = 2;
  const auto p = gradcheck_params(cfg, 6);
  CHECK_THROWS_AS(patch_embed(ImageBatch<double>(1, 3, 4, 2), p, cfg), ShapeError);
  CHECK_THROWS_AS(patch_embed(ImageBatch<double>(1, 4, 4, 3), p, cfg), ShapeError);
}

TEST_CASE("spatial_mix: single token reduces to the gated value path") {
  auto cfg = micro_config();
  cfg.image_size = 1;
  const auto p = gradcheck_params(cfg, 7).blocks[0].spatial;
  const auto x = test::random_grid(1, 1, 1, 4, 8);
  const auto y = spatial_mix(x, p, cfg);
  Mat xv(1, std::vector<double>(4)), xr = xv;
  for (std::size_t c = 0; c < 4; ++c) {
    xv[0][c] = p.mu_v[c] * x.data[c];
    xr[0][c] = p.mu_r[c] * x.data[c];
  }
  Mat v = hand_matmul(xv, p.w_v), r = hand_matmul(xr, p.w_r);
  for (std::size_t c = 0; c < 4; ++c) v[0][c] *= sig(r[0][c]);
  const Mat expected = hand_matmul(v, p.w_o);
  CHECK(mat_diff(to_mat(y), expected) < 1e-12);
}

TEST_CASE("spatial_mix: zero receptance halves the value path") {
  const auto cfg = micro_config();
  auto p = gradcheck_params(cfg, 9).blocks[0].spatial;
  const auto x = test::random_grid(1, 2, 2, 4, 10);
  p.w_r.fill(0.0);
  SpatialMixCache<double> cache;
  const auto y = spatial_mix(x, p, cfg, &cache);
  for (std::size_t i = 0; i < cache.gated.size(); ++i)
    CHECK(cache.gated.data[i] == doctest::Approx(0.5 * cache.wkv.data[i]).epsilon(1e-15));
  CHECK(y.size() == x.size());
}

TEST_CASE("spatial_mix: 2x2 grid C=4 matches a straight-line evaluation") {
  for (bool extra : {false, true}) {
    const auto cfg = micro_config(extra);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto p = gradcheck_params(cfg, 100 + seed).blocks[0].spatial;
      const auto x = test::random_grid(1, 2, 2, 4, 200 + seed);
      const auto y = spatial_mix(x, p, cfg);
      CHECK(mat_diff(to_mat(y), hand_spatial(to_mat(x), 2, 2, p, extra)) < 1e-10);
    }
  }
}

TEST_CASE("channel_mix: zero key projection gives zero output") {
  const auto cfg = micro_config();
  auto p = gradcheck_params(cfg, 11).blocks[0].channel;
  p.w_k.fill(0.0);
  const auto y = channel_mix(test::random_grid(2, 2, 2, 4, 12), p, cfg);
  for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("channel_mix: squared ReLU definition") {
  CHECK(layers::squared_relu(-3.0) == 0.0);
  CHECK(layers::squared_relu(2.0) == 4.0);
  CHECK(layers::squared_relu(0.0) == 0.0);
}

TEST_CASE("channel_mix: 2x2 grid C=4 matches a straight-line evaluation") {
  for (bool extra : {false, true}) {
    const auto cfg = micro_config(extra);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto p = gradcheck_params(cfg, 300 + seed).blocks[0].channel;
      const auto x = test::random_grid(1, 2, 2, 4, 400 + seed);
      const auto y = channel_mix(x, p, cfg);
      CHECK(mat_diff(to_mat(y), hand_channel(to_mat(x), 2, 2, p, extra)) < 1e-10);
    }
  }
}

TEST_CASE("encoder_layer: composition of the mix oracles") {
  for (bool extra : {false, true}) {
    const auto cfg = micro_config(extra);
    const auto bp = gradcheck_params(cfg, 500).blocks[0];
    const auto x = test::random_grid(1, 2, 2, 4, 501);
    const auto y = encoder_layer(x, bp, cfg);

    Mat x1 = to_mat(x);
    const Mat s = hand_spatial(hand_layer_norm(x1, bp.norm1_weight, bp.norm1_bias), 2, 2,
                               bp.spatial, extra);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 4; ++c) x1[t][c] += bp.gamma_s[c] * s[t][c];
    Mat x2 = x1;
    const Mat m = hand_channel(hand_layer_norm(x1, bp.norm2_weight, bp.norm2_bias), 2, 2,
                               bp.channel, extra);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 4; ++c) x2[t][c] += bp.gamma_c[c] * m[t][c];
    CHECK(mat_diff(to_mat(y), x2) < 1e-10);
  }
}

TEST_CASE("encoder_layer: zero layer scale is the exact identity") {
  auto cfg = micro_config(true);
  cfg.image_size = 3;
  auto bp = gradcheck_params(cfg, 13).blocks[0];
  bp.gamma_s.fill(0.0);
  bp.gamma_c.fill(0.0);
  const auto x = test::random_grid(2, 3, 3, 4, 14);
  CHECK(encoder_layer(x, bp, cfg) == x);
}

TEST_CASE("model: zero layer scale at any depth equals the depth-0 model") {
  auto cfg = micro_config();
  cfg.depth = 3;
  cfg.image_size = 4;
  cfg.layer_scale_init = 0.0;
  const auto p = init_params<double>(cfg, 15);
  auto cfg0 = cfg;
  cfg0.depth = 0;
  auto p0 = p;
  p0.blocks.clear();
  const auto img = random_image(2, 4, 4, 2, 16);
  CHECK(model_forward(img, p, cfg) == model_forward(img, p0, cfg0));
}

TEST_CASE("model: zero head weights give the head bias for any image") {
  auto cfg = micro_config();
  cfg.image_size = 4;
  auto p = gradcheck_params(cfg, 17);
  p.head_weight.fill(0.0);
  const auto logits = model_forward(random_image(3, 4, 4, 2, 18), p, cfg);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 3; ++j) CHECK(logits.at(b, j) == p.head_bias[j]);
}

TEST_CASE("model: any resolution divisible by the patch size is accepted") {
  auto cfg = preset_config("tiny");
  const auto p = init_params<double>(cfg, 19);
  for (std::size_t size : {16u, 32u, 48u, 64u}) {
    ModelCache<double> cache;
    const auto logits = model_forward(random_image(1, size, size, 3, size), p, cfg, &cache);
    CHECK(cache.features.tokens() == (size / 4) * (size / 4));
    CHECK(logits.rows() == 1);
    CHECK(logits.cols() == 10);
    for (double v : logits.values()) CHECK(std::isfinite(v));
  }
  CHECK_THROWS_AS(model_forward(random_image(1, 30, 30, 3, 1), p, cfg), ShapeError);
}

TEST_CASE("model: tiny config forward is finite and bitwise reproducible") {
  ModelConfig cfg = preset_config("tiny");
  cfg.embed_dim = 8;
  cfg.hidden_dim = 32;
  cfg.image_size = 16;
  const auto img = random_image(2, 16, 16, 3, 20);
  const auto a = model_forward(img, init_params<double>(cfg, 21), cfg);
  const auto b = model_forward(img, init_params<double>(cfg, 21), cfg);
  CHECK(a == b);
  for (double v : a.values()) CHECK(std::isfinite(v));
}

TEST_CASE("model_backward: zero logit gradient gives zero gradients") {
  auto cfg = micro_config();
  cfg.image_size = 3;
  const auto p = gradcheck_params(cfg, 22);
  ModelCache<double> cache;
  const auto logits = model_forward(random_image(2, 3, 3, 2, 23), p, cfg, &cache);
  const auto g = model_backward(cache, Tensor<double>(logits.shape()), p, cfg);
  visit_params(g, [](const std::string& name, const Tensor<double>& t, bool) {
    for (double v : t.values()) CHECK_MESSAGE(v == 0.0, name);
  });
}

TEST_CASE("model_backward: head adjoint equals the pooled upstream signal") {
  auto cfg = micro_config();
  cfg.image_size = 3;
  const auto p = gradcheck_params(cfg, 24);
  ModelCache<double> cache;
  const auto logits = model_forward(random_image(2, 3, 3, 2, 25), p, cfg, &cache);
  const auto gy = test::random_matrix(2, 3, 26);
  const auto g = model_backward(cache, gy, p, cfg);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(g.head_bias[j] == doctest::Approx(gy.at(0, j) + gy.at(1, j)).epsilon(1e-14));
    for (std::size_t c = 0; c < 4; ++c) {
      const double e = cache.pooled.at(0, c) * gy.at(0, j) + cache.pooled.at(1, c) * gy.at(1, j);
      CHECK(g.head_weight.at(c, j) == doctest::Approx(e).epsilon(1e-13));
    }
  }
}

TEST_CASE("model_backward: missing activations are rejected") {
  const auto cfg = micro_config();
  const auto p = gradcheck_params(cfg, 27);
  CHECK_THROWS_AS(model_backward(ModelCache<double>{}, Tensor<double>({1, 3}), p, cfg), Error);
}

TEST_CASE("model_backward: micro config matches finite differences") {
  for (bool extra : {false, true}) {
    ModelCase c;
    c.config.extra_norm = extra;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      c.seed = seed;
      const auto r = gradcheck_model(c);
      for (const auto& [name, err] : r.worst) CHECK_MESSAGE(err < 1e-5, name << " " << err);
    }
  }
}

TEST_CASE("count_params: table presets") {
  CHECK(count_params(preset_config("vrwkv-t")) == 6'159'400);
  CHECK(count_params(preset_config("vrwkv-s")) == 23'819'368);
  CHECK(std::abs(count_params(preset_config("vrwkv-t")) / 6.2e6 - 1) <= 0.05);
  CHECK(std::abs(count_params(preset_config("vrwkv-s")) / 23.8e6 - 1) <= 0.05);
  CHECK(std::abs(count_params(preset_config("vrwkv-b")) / 93.7e6 - 1) <= 0.05);
}

TEST_CASE("count_params: depth 0 and no classes leaves the embedding side only") {
  ModelConfig c;
  c.embed_dim = 8;
  c.hidden_dim = 32;
  c.depth = 0;
  c.num_classes = 0;
  c.patch_size = 2;
  c.image_channels = 3;
  c.image_size = 8;
  CHECK(count_params(c) == (2 * 2 * 3 * 8 + 8) + 4 * 4 * 8 + 2 * 8);
}

TEST_CASE("count_params agrees with the materialised parameters") {
  for (const char* name : {"tiny", "vrwkv-t"}) {
    auto cfg = preset_config(name);
    CHECK(param_count(init_params<double>(cfg, 0)) == count_params(cfg));
    cfg.extra_norm = true;
    CHECK(param_count(init_params<double>(cfg, 0)) == count_params(cfg));
  }
}

TEST_CASE("init_params: deterministic per seed, documented constants") {
  const auto cfg = preset_config("tiny");
  CHECK(init_params<double>(cfg, 7).pos_embed == init_params<double>(cfg, 7).pos_embed);
  CHECK(!(init_params<double>(cfg, 7).pos_embed == init_params<double>(cfg, 8).pos_embed));
  const auto p = init_params<double>(cfg, 7);
  const auto& s = p.blocks[0].spatial;
  CHECK(s.decay[0] == doctest::Approx(-1.0));
  CHECK(s.decay[cfg.embed_dim - 1] == doctest::Approx(1.0));
  for (double v : s.bonus.values()) CHECK(v == 0.0);
  for (double v : s.mu_k.values()) CHECK(v == 0.5);
  for (double v : p.patch_bias.values()) CHECK(v == 0.0);
  for (double v : p.blocks[1].gamma_c.values()) CHECK(v == cfg.layer_scale_init);
}

TEST_CASE("init_params: projection spread is within 10% of 0.02") {
  const auto p = init_params<double>(preset_config("vrwkv-t"), 3);
  const auto& w = p.blocks[0].channel.w_k;
  REQUIRE(w.size() >= 10'000);
  double mean = 0, sq = 0;
  for (double v : w.values()) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w.values()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(w.size() - 1));
  CHECK(std::abs(sd / 0.02 - 1) < 0.1);
}

TEST_CASE("stress: 64x64 grid, 24 layers, extra norm, single precision stays finite") {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 32;
  cfg.depth = 24;
  cfg.patch_size = 1;
  cfg.image_channels = 1;
  cfg.image_size = 64;
  cfg.num_classes = 2;
  cfg.extra_norm = true;
  const auto p = convert_params<float>(gradcheck_params(cfg, 28));
  ImageBatch<float> img(1, 64, 64, 1);
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : img.data) v = d(rng);
  const auto logits = model_forward(img, p, cfg);
  for (float v : logits.values()) CHECK(std::isfinite(v));
}

}  // TEST_SUITE
