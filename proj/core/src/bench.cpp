#include "vrwkv/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "vrwkv/biwkv.hpp"

namespace vrwkv {

template <typename Real>
Tensor<Real> quadratic_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                 const Tensor<Real>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape() != k.shape() ||
      q.shape() != v.shape())
    throw ShapeError("quadratic_attention: Q, K and V must all be T x C");
  if (!all_finite(q.values()) || !all_finite(k.values()) || !all_finite(v.values()))
    throw NumericalError("quadratic_attention: non-finite input");
  const std::size_t T = q.rows(), C = q.cols();
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(C));
  std::vector<Real> scores(T * T);
  for (std::size_t i = 0; i < T; ++i) {
    const Real* qi = q.data() + i * C;
    Real* s = scores.data() + i * T;
    for (std::size_t j = 0; j < T; ++j) {
      const Real* kj = k.data() + j * C;
      Real dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += qi[c] * kj[c];
      s[j] = dot * scale;
    }
    const Real top = *std::max_element(s, s + T);
    Real z = 0;
    for (std::size_t j = 0; j < T; ++j) z += s[j] = std::exp(s[j] - top);
    for (std::size_t j = 0; j < T; ++j) s[j] /= z;
  }
  Tensor<Real> out({T, C});
  for (std::size_t i = 0; i < T; ++i) {
    Real* oi = out.data() + i * C;
    const Real* s = scores.data() + i * T;
    for (std::size_t j = 0; j < T; ++j) {
      const Real* vj = v.data() + j * C;
      for (std::size_t c = 0; c < C; ++c) oi[c] += s[j] * vj[c];
    }
  }
  return out;
}

std::string to_string(Mechanism m) { return m == Mechanism::biwkv ? "biwkv" : "quadratic"; }

Mechanism parse_mechanism(std::string_view name) {
  if (name == "biwkv") return Mechanism::biwkv;
  if (name == "quadratic") return Mechanism::quadratic;
  throw Error("unknown mechanism '" + std::string(name) + "'");
}

std::uint64_t activation_bytes(Mechanism m, std::uint64_t tokens, std::uint64_t channels,
                               std::uint64_t word) {
  if (m == Mechanism::biwkv) return (4 * tokens * channels + 3 * channels) * word;
  return (tokens * tokens + tokens * channels) * word;
}

namespace {

template <typename Real>
Tensor<Real> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<Real> t({rows, cols});
  for (auto& x : t.values()) x = static_cast<Real>(dist(rng));
  return t;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

template <typename Real>
struct Workload {
  Tensor<Real> a, b, c;
  DecayParams<Real> decay;
};

template <typename Real>
std::vector<BenchRecord> bench_scaling_impl(Mechanism m, const std::vector<std::size_t>& tokens,
                                            const BenchOptions& options) {
  using clock = std::chrono::steady_clock;
  const std::size_t C = options.channels;
  std::mt19937_64 rng(options.seed);
  std::vector<Workload<Real>> work;
  for (std::size_t T : tokens) {
    if (T == 0) throw Error("bench: token counts must be >= 1");
    Workload<Real> w{random_matrix<Real>(T, C, rng), random_matrix<Real>(T, C, rng),
                     random_matrix<Real>(T, C, rng),
                     {std::vector<Real>(C), std::vector<Real>(C, Real{0})}};
    for (std::size_t i = 0; i < C; ++i)
      w.decay.w[i] = C > 1 ? static_cast<Real>(-1.0 + 2.0 * static_cast<double>(i) /
                                                          static_cast<double>(C - 1))
                           : Real{0};
    work.push_back(std::move(w));
  }

  Real sink = 0;
  auto run = [&](const Workload<Real>& w) {
    if (m == Mechanism::biwkv)
      sink += biwkv_forward(w.a, w.b, w.decay).wkv[0];
    else
      sink += quadratic_attention(w.a, w.b, w.c)[0];
  };
  for (std::size_t i = 0; i < options.warmup; ++i)
    for (const auto& w : work) run(w);
  // Round-robin over T so that slow drift of the host affects every size alike.
  std::vector<std::vector<double>> times(work.size());
  for (std::size_t i = 0; i < options.reps; ++i)
    for (std::size_t j = 0; j < work.size(); ++j) {
      const auto t0 = clock::now();
      run(work[j]);
      times[j].push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
  if (!std::isfinite(sink)) throw NumericalError("bench: non-finite output");

  std::vector<BenchRecord> records;
  for (std::size_t j = 0; j < work.size(); ++j) {
    BenchRecord r;
    r.mechanism = m;
    r.tokens = tokens[j];
    r.channels = C;
    r.reps = options.reps;
    r.median_seconds = median(times[j]);
    r.activation_bytes = activation_bytes(m, tokens[j], C, sizeof(Real));
    r.flagged = r.median_seconds < options.min_resolvable_seconds;
    records.push_back(r);
  }
  return records;
}

}  // namespace

std::vector<BenchRecord> bench_scaling(Mechanism m, const std::vector<std::size_t>& tokens,
                                       const BenchOptions& options) {
  if (options.reps < 5) throw Error("bench: at least 5 timed repetitions are required");
  if (options.channels == 0) throw Error("bench: channels must be >= 1");
  if (!std::is_sorted(tokens.begin(), tokens.end()))
    throw Error("bench: token counts must be sorted ascending");
  return options.double_precision ? bench_scaling_impl<double>(m, tokens, options)
                                  : bench_scaling_impl<float>(m, tokens, options);
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  const auto old = out.precision(9);
  out << kBenchCsvHeader << '\n';
  for (const auto& r : records)
    out << to_string(r.mechanism) << ',' << r.tokens << ',' << r.channels << ',' << r.reps << ','
        << r.median_seconds << ',' << r.activation_bytes << '\n';
  out.precision(old);
}

template <typename Real>
ErfMap erf_map(const ModelParams<Real>& params, const ModelConfig& config,
               std::size_t image_size, std::uint64_t input_seed) {
  const std::size_t p = config.patch_size;
  if (image_size == 0 || image_size % p != 0)
    throw ShapeError("erf_map: image size must be a positive multiple of the patch size");
  ImageBatch<Real> image(1, image_size, image_size, config.image_channels);
  std::mt19937_64 rng(input_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& x : image.data) x = static_cast<Real>(unit(rng));

  ModelCache<Real> cache;
  const TokenGrid<Real> features = forward_features(image, params, config, &cache);
  TokenGrid<Real> g(1, features.rows, features.cols, features.channels);
  for (auto& x : g.token(0, features.rows / 2, features.cols / 2)) x = Real{1};
  ImageBatch<Real> g_image;
  features_backward(cache, g, params, config, &g_image);

  ErfMap map{features.rows, features.cols, std::vector<double>(features.tokens(), 0.0)};
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x)
      for (std::size_t c = 0; c < config.image_channels; ++c)
        map.values[(y / p) * map.cols + x / p] += std::abs(static_cast<double>(g_image.at(0, y, x, c)));
  const double top = *std::max_element(map.values.begin(), map.values.end());
  if (!std::isfinite(top)) throw NumericalError("erf_map: non-finite input gradient");
  if (top > 0)
    for (auto& v : map.values) v /= top;
  return map;
}

void write_erf_csv(std::ostream& out, const ErfMap& map) {
  const auto old = out.precision(17);
  for (std::size_t r = 0; r < map.rows; ++r)
    for (std::size_t c = 0; c < map.cols; ++c)
      out << map.at(r, c) << (c + 1 == map.cols ? '\n' : ',');
  out.precision(old);
}

void write_erf_svg(std::ostream& out, const ErfMap& map, std::size_t cell_px) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << map.cols * cell_px
      << "\" height=\"" << map.rows * cell_px << "\">\n";
  for (std::size_t r = 0; r < map.rows; ++r)
    for (std::size_t c = 0; c < map.cols; ++c) {
      const int level = static_cast<int>(std::lround(255.0 * std::clamp(map.at(r, c), 0.0, 1.0)));
      out << "  <rect x=\"" << c * cell_px << "\" y=\"" << r * cell_px << "\" width=\"" << cell_px
          << "\" height=\"" << cell_px << "\" fill=\"rgb(" << level << ',' << level << ',' << level
          << ")\"/>\n";
    }
  out << "</svg>\n";
}

template Tensor<float> quadratic_attention(const Tensor<float>&, const Tensor<float>&,
                                           const Tensor<float>&);
template Tensor<double> quadratic_attention(const Tensor<double>&, const Tensor<double>&,
                                            const Tensor<double>&);
template ErfMap erf_map(const ModelParams<float>&, const ModelConfig&, std::size_t, std::uint64_t);
template ErfMap erf_map(const ModelParams<double>&, const ModelConfig&, std::size_t,
                        std::uint64_t);

}  // namespace vrwkv
