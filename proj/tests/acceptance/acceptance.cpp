// Acceptance harness: one PASS/FAIL line per criterion. Run with
// --criterion N for a single criterion, or without arguments for all ten.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cli.hpp"
#include "vrwkv/bench.hpp"
#include "vrwkv/biwkv.hpp"
#include "vrwkv/model.hpp"
#include "vrwkv/training.hpp"

using namespace vrwkv;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

struct CliRun {
  int code;
  std::string out;
  double seconds;
};

CliRun run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const auto t0 = std::chrono::steady_clock::now();
  const int code = cli::run(args, out, err);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {code, out.str() + err.str(), s};
}

std::string last_line(const std::string& text) {
  auto end = text.find_last_not_of('\n');
  if (end == std::string::npos) return "";
  auto begin = text.rfind('\n', end);
  return text.substr(begin == std::string::npos ? 0 : begin + 1, end - (begin == std::string::npos ? 0 : begin + 1) + 1);
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

Outcome oracle_equivalence() {
  const auto r = run_cli({"oracle-check", "--tokens", "1,2,3,8,16,32,64", "--channels",
                          "1,2,4,8,16", "--seeds", "20", "--precision", "f64", "--tolerance",
                          "1e-10"});
  return {r.code == 0 && r.seconds < 30.0,
          last_line(r.out) + " runtime=" + fmt(r.seconds) + "s (limit 30s)"};
}

Outcome kernel_gradients() {
  const auto r = run_cli({"gradcheck", "--scope", "kernel", "--tokens", "16", "--channels", "8",
                          "--seeds", "10", "--eps", "1e-5", "--tolerance", "1e-6"});
  return {r.code == 0 && r.seconds < 60.0,
          last_line(r.out) + " runtime=" + fmt(r.seconds) + "s (limit 60s)"};
}

Outcome model_gradients() {
  const auto r = run_cli({"gradcheck", "--scope", "model", "--tolerance", "1e-5"});
  return {r.code == 0 && r.seconds < 300.0,
          last_line(r.out) + " runtime=" + fmt(r.seconds) + "s (limit 300s)"};
}

Outcome flops_model() {
  const auto hi = run_cli({"flops", "--T", "16384", "--C", "192"});
  bool ok = hi.code == 0 && hi.out.find("total 40894464\n") != std::string::npos;
  for (const auto& [t, c] : std::vector<std::pair<int, int>>{{196, 192}, {1, 1}, {4096, 768}}) {
    const auto r = run_cli({"flops", "--T", std::to_string(t), "--C", std::to_string(c)});
    ok = ok && r.code == 0 &&
         r.out.find("total " + std::to_string(13LL * t * c) + "\n") != std::string::npos;
  }
  return {ok, "T=16384 C=192 -> " + last_line(hi.out) + " (expected 40894464)"};
}

Outcome linear_scaling() {
  BenchOptions o;
  o.channels = 64;
  o.reps = 11;
  o.warmup = 1;
  const auto wkv = bench_scaling(Mechanism::biwkv, {8192, 16384, 32768, 65536}, o);
  const auto quad = bench_scaling(Mechanism::quadratic, {4096, 8192}, o);
  bool ok = true;
  std::string detail = "biwkv ratios";
  for (std::size_t i = 1; i < wkv.size(); ++i) {
    const double r = wkv[i].median_seconds / wkv[i - 1].median_seconds;
    ok = ok && r >= 1.6 && r <= 2.6 && !wkv[i].flagged;
    detail += " " + fmt(r);
  }
  const double rq = quad[1].median_seconds / quad[0].median_seconds;
  ok = ok && rq >= 3.4;
  detail += " (band [1.6, 2.6]); quadratic ratio " + fmt(rq) + " (>= 3.4)";
  return {ok, detail};
}

Outcome parameter_counts() {
  const double t = static_cast<double>(count_params(preset_config("vrwkv-t")));
  const double s = static_cast<double>(count_params(preset_config("vrwkv-s")));
  const double et = t / 6.2e6 - 1, es = s / 23.8e6 - 1;
  return {std::abs(et) <= 0.05 && std::abs(es) <= 0.05,
          "vrwkv-t " + fmt(t, 10) + " (" + fmt(100 * et) + "% vs 6.2M), vrwkv-s " + fmt(s, 10) +
              " (" + fmt(100 * es) + "% vs 23.8M)"};
}

Outcome stability() {
  const auto safe = run_cli({"stability", "--tokens", "65536"});
  const bool both = safe.out.find("f32 T=65536") != std::string::npos &&
                    safe.out.find("f64 T=65536") != std::string::npos;
  const auto unsafe = run_cli({"stability", "--tokens", "65536", "--unsafe", "--precision", "f32"});
  const bool overflowed = unsafe.out.find("nonfinite=0/") == std::string::npos;
  return {safe.code == 0 && both && unsafe.code == cli::kDiverged && overflowed,
          "safe exit " + std::to_string(safe.code) + " (" + last_line(safe.out) +
              "); unsafe exit " + std::to_string(unsafe.code) + " (" + last_line(unsafe.out) + ")"};
}

Outcome erf_properties() {
  auto causal = preset_config("tiny");
  causal.shift_mode = ShiftMode::none;
  causal.attention = WkvDirection::causal;
  const auto mc = erf_map(init_params<double>(causal, 0), causal, 64);
  const std::size_t centre = (mc.rows / 2) * mc.cols + mc.cols / 2;
  std::size_t future_nonzero = 0, past_zero = 0;
  for (std::size_t t = 0; t < mc.values.size(); ++t) {
    if (t > centre && mc.values[t] != 0.0) ++future_nonzero;
    if (t <= centre && mc.values[t] == 0.0) ++past_zero;
  }
  auto quad = preset_config("tiny");
  const auto mq = erf_map(init_params<double>(quad, 0), quad, 64);
  const double minq = *std::min_element(mq.values.begin(), mq.values.end());
  return {mc.rows == 16 && mq.rows == 16 && future_nonzero == 0 && minq > 0.0,
          "causal+none: " + std::to_string(future_nonzero) + " nonzero future cells of " +
              std::to_string(mc.values.size() - centre - 1) + " (" + std::to_string(past_zero) +
              " zero past cells); biwkv+quad 16x16 min=" + fmt(minq)};
}

Outcome toy_convergence() {
  const ShiftMode modes[] = {ShiftMode::quad, ShiftMode::causal, ShiftMode::none};
  std::vector<double> acc[3];
  for (int m = 0; m < 3; ++m)
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      TrainConfig c;
      c.seed = seed;
      c.task.seed = seed;
      c.model.shift_mode = modes[m];
      acc[m].push_back(train<float>(c).final_accuracy);
    }
  auto med = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
  };
  const double q = med(acc[0]), c = med(acc[1]), n = med(acc[2]);
  const double worst_quad = *std::min_element(acc[0].begin(), acc[0].end());
  return {worst_quad >= 0.9 && q >= c && c >= n,
          "quad min " + fmt(worst_quad) + " (>= 0.9); medians quad " + fmt(q) + " >= causal " +
              fmt(c) + " >= none " + fmt(n)};
}

Outcome algebraic_invariants() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(-3.0, 3.0);
  auto mat = [&](std::size_t T, std::size_t C) {
    Tensor<double> t({T, C});
    for (auto& x : t.values()) x = nd(rng);
    return t;
  };
  std::size_t cases = 0;
  double convex = 0, linear = 0, reversal = 0, channel = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng() % 48, C = 1 + rng() % 8;
    const auto k = mat(T, C), v = mat(T, C), v2 = mat(T, C);
    DecayParams<double> d{std::vector<double>(C), std::vector<double>(C)};
    for (std::size_t c = 0; c < C; ++c) {
      d.w[c] = ud(rng);
      d.u[c] = ud(rng);
    }
    const auto y = biwkv_forward(k, v, d).wkv;
    for (std::size_t c = 0; c < C; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t t = 0; t < T; ++t) {
        lo = std::min(lo, v.at(t, c));
        hi = std::max(hi, v.at(t, c));
      }
      for (std::size_t t = 0; t < T; ++t)
        convex = std::max({convex, lo - y.at(t, c), y.at(t, c) - hi});
    }
    Tensor<double> mix({T, C});
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * v[i] - 0.75 * v2[i];
    const auto ym = biwkv_forward(k, mix, d).wkv, y2 = biwkv_forward(k, v2, d).wkv;
    for (std::size_t i = 0; i < ym.size(); ++i)
      linear = std::max(linear, std::abs(ym[i] - (2.5 * y[i] - 0.75 * y2[i])));
    Tensor<double> kr({T, C}), vr({T, C});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        kr.at(T - 1 - t, c) = k.at(t, c);
        vr.at(T - 1 - t, c) = v.at(t, c);
      }
    const auto yr = biwkv_forward(kr, vr, d).wkv;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        reversal = std::max(reversal, std::abs(yr.at(T - 1 - t, c) - y.at(t, c)));
    auto k2 = k, vv = v;
    for (std::size_t t = 0; t < T; ++t) {
      k2.at(t, 0) = nd(rng);
      vv.at(t, 0) = nd(rng);
    }
    const auto yc = biwkv_forward(k2, vv, d).wkv;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 1; c < C; ++c)
        channel = std::max(channel, std::abs(yc.at(t, c) - y.at(t, c)));
    ++cases;
  }

  bool identity = true;
  for (std::size_t depth : {1u, 3u}) {
    auto cfg = preset_config("tiny");
    cfg.depth = depth;
    cfg.extra_norm = depth == 3;
    cfg.layer_scale_init = 0.0;
    const auto p = init_params<double>(cfg, depth);
    TokenGrid<double> x(2, 8, 8, cfg.embed_dim);
    for (auto& e : x.data) e = nd(rng);
    auto y = x;
    for (const auto& b : p.blocks) y = encoder_layer(y, b, cfg);
    identity = identity && y == x;
  }

  const bool ok = convex <= 1e-12 && linear <= 1e-10 && reversal <= 1e-12 && channel == 0.0 &&
                  identity;
  return {ok, std::to_string(cases) + " random cases: convexity excess " + fmt(convex) +
                  ", V-linearity " + fmt(linear) + ", reversal " + fmt(reversal) +
                  ", channel leak " + fmt(channel) + ", gamma=0 identity " +
                  (identity ? "exact" : "broken")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle equivalence", oracle_equivalence},
      {"kernel gradients", kernel_gradients},
      {"full-model gradients", model_gradients},
      {"flops model", flops_model},
      {"linear scaling", linear_scaling},
      {"parameter counts", parameter_counts},
      {"stability", stability},
      {"erf properties", erf_properties},
      {"toy convergence and shift ordering", toy_convergence},
      {"algebraic invariants", algebraic_invariants},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << i + 1 << " [" << criteria[i].first << "]: "
              << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
