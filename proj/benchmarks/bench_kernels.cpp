#include <benchmark/benchmark.h>

#include <random>

#include "vrwkv/bench.hpp"
#include "vrwkv/biwkv.hpp"
#include "vrwkv/token_shift.hpp"

using namespace vrwkv;

namespace {

constexpr std::size_t kChannels = 64;

Tensor<float> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor<float> t({rows, cols});
  for (auto& x : t.values()) x = d(rng);
  return t;
}

DecayParams<float> decay(std::size_t C) {
  DecayParams<float> p{std::vector<float>(C), std::vector<float>(C, 0.0f)};
  for (std::size_t i = 0; i < C; ++i) p.w[i] = -1.0f + 2.0f * static_cast<float>(i) / static_cast<float>(C - 1);
  return p;
}

void BM_BiwkvForward(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const auto k = random_matrix(T, kChannels, 1), v = random_matrix(T, kChannels, 2);
  const auto p = decay(kChannels);
  for (auto _ : state) benchmark::DoNotOptimize(biwkv_forward(k, v, p).wkv.data());
  state.SetComplexityN(state.range(0));
  state.counters["flops"] = benchmark::Counter(
      static_cast<double>(flops_estimate(static_cast<std::int64_t>(T), kChannels)),
      benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_BiwkvForward)->RangeMultiplier(2)->Range(1 << 10, 1 << 16)->Complexity(benchmark::oN)
    ->Unit(benchmark::kMillisecond);

void BM_BiwkvBackward(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const auto k = random_matrix(T, kChannels, 3), v = random_matrix(T, kChannels, 4);
  const auto gy = random_matrix(T, kChannels, 5);
  const auto ctx = biwkv_forward(k, v, decay(kChannels)).context;
  for (auto _ : state) benchmark::DoNotOptimize(biwkv_backward(ctx, gy).gk.data());
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_BiwkvBackward)->RangeMultiplier(2)->Range(1 << 10, 1 << 15)->Complexity(benchmark::oN)
    ->Unit(benchmark::kMillisecond);

void BM_QuadraticAttention(benchmark::State& state) {
  const auto T = static_cast<std::size_t>(state.range(0));
  const auto q = random_matrix(T, kChannels, 6), k = random_matrix(T, kChannels, 7),
             v = random_matrix(T, kChannels, 8);
  for (auto _ : state) benchmark::DoNotOptimize(quadratic_attention(q, k, v).data());
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_QuadraticAttention)->RangeMultiplier(2)->Range(1 << 8, 1 << 12)
    ->Complexity(benchmark::oNSquared)->Unit(benchmark::kMillisecond);

void BM_QShift(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  TokenGrid<float> x(1, side, side, kChannels);
  std::mt19937_64 rng(9);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& e : x.data) e = d(rng);
  const std::vector<float> mu(kChannels, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(q_shift(x, std::span<const float>(mu)).data.data());
  state.SetComplexityN(static_cast<std::int64_t>(side * side));
}
BENCHMARK(BM_QShift)->RangeMultiplier(2)->Range(16, 128)->Complexity(benchmark::oN)
    ->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
