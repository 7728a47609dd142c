#include <cmath>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "vrwkv/bench.hpp"

using namespace vrwkv;

namespace {

ModelConfig erf_config(ShiftMode shift, WkvDirection attention, std::size_t depth) {
  auto c = preset_config("tiny");
  c.depth = depth;
  c.shift_mode = shift;
  c.attention = attention;
  return c;
}

}  // namespace

TEST_SUITE("bench_erf") {

TEST_CASE("quadratic_attention: single token returns V") {
  const auto q = test::random_matrix(1, 3, 1), k = test::random_matrix(1, 3, 2),
             v = test::random_matrix(1, 3, 3);
  CHECK(quadratic_attention(q, k, v) == v);
}

TEST_CASE("quadratic_attention: zero keys average the values") {
  const auto q = test::random_matrix(5, 4, 4), v = test::random_matrix(5, 4, 5);
  const auto y = quadratic_attention(q, Tensor<double>({5, 4}), v);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < 5; ++i) mean += v.at(i, c) / 5;
    for (std::size_t t = 0; t < 5; ++t) CHECK(std::abs(y.at(t, c) - mean) < 1e-14);
  }
}

TEST_CASE("quadratic_attention: T=6 C=3 matches a scalar double loop") {
  const auto q = test::random_matrix(6, 3, 6), k = test::random_matrix(6, 3, 7),
             v = test::random_matrix(6, 3, 8);
  const auto y = quadratic_attention(q, k, v);
  for (std::size_t t = 0; t < 6; ++t) {
    double s[6], z = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      s[i] = 0;
      for (std::size_t c = 0; c < 3; ++c) s[i] += q.at(t, c) * k.at(i, c);
      s[i] = std::exp(s[i] / std::sqrt(3.0));
      z += s[i];
    }
    for (std::size_t c = 0; c < 3; ++c) {
      double o = 0;
      for (std::size_t i = 0; i < 6; ++i) o += s[i] / z * v.at(i, c);
      CHECK(std::abs(y.at(t, c) - o) < 1e-12);
    }
  }
}

TEST_CASE("quadratic_attention: bad input") {
  auto q = test::random_matrix(3, 2, 9);
  CHECK_THROWS_AS(quadratic_attention(q, test::random_matrix(3, 3, 1), q), ShapeError);
  q.at(1, 1) = std::nan("");
  CHECK_THROWS_AS(quadratic_attention(q, q, q), NumericalError);
}

TEST_CASE("activation_bytes: stated formulas") {
  CHECK(activation_bytes(Mechanism::biwkv, 16384, 192) == (4ull * 16384 * 192 + 3 * 192) * 4);
  CHECK(activation_bytes(Mechanism::quadratic, 16384, 192) ==
        (16384ull * 16384 + 16384ull * 192) * 4);
  CHECK(activation_bytes(Mechanism::biwkv, 10, 2, 8) == (4 * 10 * 2 + 3 * 2) * 8);
}

TEST_CASE("activation_bytes: score matrix vs Bi-WKV working set at T=16384, C=192") {
  const double scores = 16384.0 * 16384.0 * 4;
  const double ratio = scores / static_cast<double>(activation_bytes(Mechanism::biwkv, 16384, 192));
  CHECK(ratio == doctest::Approx(16384.0 / (4 * 192 + 3.0 * 192 / 16384)).epsilon(1e-12));
  CHECK(ratio > 20);
}

TEST_CASE("activation_bytes: score matrix exceeds the Bi-WKV working set by 100x at T=16384, "
          "C=192" * doctest::should_fail()) {
  const double scores = 16384.0 * 16384.0 * 4;
  CHECK(scores >= 100.0 * static_cast<double>(activation_bytes(Mechanism::biwkv, 16384, 192)));
}

TEST_CASE("bench_scaling: records, ordering and CSV") {
  BenchOptions o;
  o.channels = 8;
  o.reps = 5;
  const auto recs = bench_scaling(Mechanism::biwkv, {64, 128}, o);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].tokens == 64);
  CHECK(recs[1].reps == 5);
  CHECK(recs[1].activation_bytes == activation_bytes(Mechanism::biwkv, 128, 8));
  for (const auto& r : recs) CHECK(r.median_seconds > 0);
  std::ostringstream csv;
  write_bench_csv(csv, recs);
  const std::string text = csv.str();
  CHECK(text.rfind(std::string(kBenchCsvHeader) + "\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  o.reps = 4;
  CHECK_THROWS_AS(bench_scaling(Mechanism::biwkv, {64}, o), Error);
  o.reps = 5;
  CHECK_THROWS_AS(bench_scaling(Mechanism::quadratic, {128, 64}, o), Error);
}

TEST_CASE("bench_scaling: tiny workloads are flagged as unresolvable") {
  BenchOptions o;
  o.channels = 1;
  o.min_resolvable_seconds = 1.0;
  const auto recs = bench_scaling(Mechanism::quadratic, {1}, o);
  CHECK(recs[0].flagged);
}

TEST_CASE("erf: causal attention without shift is exactly zero on the raster future") {
  const auto cfg = erf_config(ShiftMode::none, WkvDirection::causal, 1);
  const auto map = erf_map(init_params<double>(cfg, 1), cfg, 64);
  REQUIRE(map.rows == 16);
  const std::size_t centre = 8 * 16 + 8;
  for (std::size_t t = 0; t < map.values.size(); ++t) {
    if (t > centre) CHECK(map.values[t] == 0.0);
    else CHECK(map.values[t] > 0.0);
  }
}

TEST_CASE("erf: bidirectional attention with quad shift covers every cell at 16x16") {
  const auto cfg = erf_config(ShiftMode::quad, WkvDirection::bidirectional, 2);
  const auto map = erf_map(init_params<double>(cfg, 2), cfg, 64);
  REQUIRE(map.values.size() == 256);
  for (double v : map.values) CHECK(v > 0.0);
  CHECK(*std::max_element(map.values.begin(), map.values.end()) == 1.0);
}

TEST_CASE("erf: zero layer scale reaches only the centre cell") {
  auto cfg = erf_config(ShiftMode::quad, WkvDirection::bidirectional, 2);
  cfg.layer_scale_init = 0.0;
  const auto map = erf_map(init_params<double>(cfg, 3), cfg, 32);
  for (std::size_t r = 0; r < map.rows; ++r)
    for (std::size_t c = 0; c < map.cols; ++c)
      CHECK(map.at(r, c) == (r == 4 && c == 4 ? 1.0 : 0.0));
}

TEST_CASE("erf: writers and bad sizes") {
  const ErfMap map{2, 3, {0.0, 0.5, 1.0, 0.25, 0.0, 0.75}};
  std::ostringstream csv, svg;
  write_erf_csv(csv, map);
  CHECK(csv.str() == "0,0.5,1\n0.25,0,0.75\n");
  write_erf_svg(svg, map, 10);
  CHECK(svg.str().find("width=\"30\" height=\"20\"") != std::string::npos);
  CHECK(svg.str().find("rgb(255,255,255)") != std::string::npos);
  const auto cfg = preset_config("tiny");
  CHECK_THROWS_AS(erf_map(init_params<double>(cfg, 0), cfg, 30), ShapeError);
}

}  // TEST_SUITE
