#include "vrwkv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace vrwkv {
namespace {

double norm2(std::span<const double> x) {
  double s = 0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

double max_abs(std::span<const double> x) {
  double m = 0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m;
}

void fill_normal(std::span<double> x, std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : x) v = dist(rng);
}

double dot_diff(std::span<const double> gy, std::span<const double> plus,
                std::span<const double> minus) {
  double s = 0;
  for (std::size_t i = 0; i < gy.size(); ++i) s += gy[i] * (plus[i] - minus[i]);
  return s;
}

void record(GradcheckReport& r, const std::string& cls, std::span<const double> analytic,
            std::span<const double> numeric) {
  auto& w = r.worst[cls];
  w = std::max(w, relative_error(analytic, numeric));
  r.max_abs_analytic = std::max(r.max_abs_analytic, max_abs(analytic));
  r.max_abs_numeric = std::max(r.max_abs_numeric, max_abs(numeric));
}

// Numeric gradient of sum(gy * f(x)) with respect to every entry of x.
template <typename F>
std::vector<double> numeric_grad(std::span<double> x, std::span<const double> gy, double eps,
                                 F&& f) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const auto plus = f();
    x[i] = keep - eps;
    const auto minus = f();
    x[i] = keep;
    g[i] = dot_diff(gy, plus, minus) / (2 * eps);
  }
  return g;
}

std::string param_class(const std::string& name) {
  if (name.rfind("blocks.", 0) != 0) return name;
  return name.substr(name.find('.', 7) + 1);
}

}  // namespace

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw ShapeError("relative_error: size mismatch");
  std::vector<double> diff(analytic.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
  const double scale = std::max(norm2(analytic), norm2(numeric));
  return scale == 0 ? 0.0 : norm2(diff) / scale;
}

double GradcheckReport::overall() const {
  double m = 0;
  for (const auto& [_, e] : worst) m = std::max(m, e);
  return m;
}

void GradcheckReport::merge(const GradcheckReport& other) {
  for (const auto& [k, e] : other.worst) worst[k] = std::max(worst[k], e);
  max_abs_analytic = std::max(max_abs_analytic, other.max_abs_analytic);
  max_abs_numeric = std::max(max_abs_numeric, other.max_abs_numeric);
}

GradcheckReport gradcheck_kernel(const KernelCase& c) {
  std::mt19937_64 rng(c.seed);
  const std::size_t T = c.tokens, C = c.channels;
  Tensor<double> k({T, C}), v({T, C}), gy({T, C});
  DecayParams<double> p{std::vector<double>(C), std::vector<double>(C)};
  fill_normal(k.values(), rng, 1.0);
  fill_normal(v.values(), rng, 1.0);
  std::uniform_real_distribution<double> decay(-3.0, 3.0);
  for (auto& w : p.w) w = decay(rng);
  fill_normal(p.u, rng, 1.0);
  if (!c.zero_cotangent) fill_normal(gy.values(), rng, 1.0);

  const auto fwd = biwkv_forward(k, v, p, c.options);
  const auto g = biwkv_backward(fwd.context, gy);
  auto oracle = [&] {
    auto y = biwkv_oracle(k, v, p, c.options);
    return std::vector<double>(y.values().begin(), y.values().end());
  };

  GradcheckReport r;
  record(r, "w", g.gw, numeric_grad(std::span<double>(p.w), gy.values(), c.eps, oracle));
  record(r, "u", g.gu, numeric_grad(std::span<double>(p.u), gy.values(), c.eps, oracle));
  record(r, "k", g.gk.values(), numeric_grad(k.values(), gy.values(), c.eps, oracle));
  record(r, "v", g.gv.values(), numeric_grad(v.values(), gy.values(), c.eps, oracle));
  return r;
}

GradcheckReport gradcheck_shift(const ShiftCase& c) {
  std::mt19937_64 rng(c.seed);
  TokenGrid<double> x(c.batch, c.rows, c.cols, c.channels), gy(c.batch, c.rows, c.cols, c.channels);
  fill_normal(x.data, rng, 1.0);
  if (!c.zero_cotangent) fill_normal(gy.data, rng, 1.0);
  std::vector<double> mu(c.channels);
  std::uniform_real_distribution<double> mix(0.2, 0.8);
  for (auto& m : mu) m = mix(rng);

  const auto g = shift_backward(gy, x, std::span<const double>(mu), c.options);
  auto f = [&] { return apply_shift(x, std::span<const double>(mu), c.options).data; };

  GradcheckReport r;
  record(r, "x", g.gx.data, numeric_grad(std::span<double>(x.data), gy.data, c.eps, f));
  record(r, "mu", g.gmu, numeric_grad(std::span<double>(mu), gy.data, c.eps, f));
  return r;
}

ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 16;
  cfg.depth = 1;
  cfg.patch_size = 2;
  cfg.num_classes = 3;
  cfg.image_channels = 2;
  cfg.image_size = 6;
  cfg.validate();
  return cfg;
}

ModelParams<double> gradcheck_params(const ModelConfig& config, std::uint64_t seed) {
  auto params = init_params<double>(config, seed);
  std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
  std::normal_distribution<double> wide(0.0, 0.5), narrow(0.0, 0.1);
  std::uniform_real_distribution<double> mix(0.2, 0.8), decay(-2.0, 2.0);
  visit_params(params, [&](const std::string& name, Tensor<double>& t, bool) {
    const auto leaf = name.substr(name.rfind('.') + 1);
    for (auto& v : t.values()) {
      if (leaf.rfind("mu_", 0) == 0)
        v = mix(rng);
      else if (leaf == "decay")
        v = decay(rng);
      else if (leaf == "weight" && name.find("norm") != std::string::npos)
        v = 1.0 + narrow(rng);
      else if (leaf == "gamma_s" || leaf == "gamma_c")
        v = 1.0 + narrow(rng);
      else
        v = wide(rng);
    }
  });
  return params;
}

GradcheckReport gradcheck_model(const ModelCase& c) {
  const auto& cfg = c.config;
  auto params = gradcheck_params(cfg, c.seed);
  std::mt19937_64 rng(c.seed + 1);
  ImageBatch<double> image(c.batch, cfg.image_size, cfg.image_size, cfg.image_channels);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& v : image.data) v = unit(rng);
  Tensor<double> gy({c.batch, cfg.num_classes});
  if (!c.zero_cotangent) fill_normal(gy.values(), rng, 1.0);

  ModelCache<double> cache;
  model_forward(image, params, cfg, &cache);
  ImageBatch<double> g_image;
  auto grads = model_backward(cache, gy, params, cfg, &g_image);

  auto f = [&] {
    auto y = model_forward(image, params, cfg);
    return std::vector<double>(y.values().begin(), y.values().end());
  };

  std::vector<std::pair<std::string, Tensor<double>*>> ps;
  std::vector<const Tensor<double>*> gs;
  visit_params(params, [&](const std::string& name, Tensor<double>& t, bool) {
    ps.emplace_back(name, &t);
  });
  visit_params(grads, [&](const std::string&, const Tensor<double>& t, bool) { gs.push_back(&t); });
  if (ps.size() != gs.size()) throw ShapeError("gradcheck_model: gradient structure mismatch");

  GradcheckReport r;
  for (std::size_t i = 0; i < ps.size(); ++i)
    record(r, param_class(ps[i].first), gs[i]->values(),
           numeric_grad(ps[i].second->values(), gy.values(), c.eps, f));
  record(r, "image", g_image.data, numeric_grad(std::span<double>(image.data), gy.values(), c.eps, f));
  return r;
}

}  // namespace vrwkv
