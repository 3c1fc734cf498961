// Serial reference vs OpenMP kernels at the default model's shapes.
// Run: ./build/bench/bench_kernels --benchmark_min_time=0.2

#include <benchmark/benchmark.h>

#include <vector>

#include "bvit/butterfly.hpp"
#include "bvit/kernels.hpp"
#include "bvit/moe.hpp"
#include "bvit/ternary.hpp"

using namespace bvit;

namespace {

constexpr std::size_t kTokens = 32 * 65;  // one batch of 32 images, 64 patches + CLS
constexpr std::size_t kDModel = 256;
constexpr std::size_t kDff = 1024;

std::vector<float> randn(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

template <bool Parallel>
void BM_GemmNT(benchmark::State& state) {
  const auto a = randn(kTokens * kDModel, 1), b = randn(kDff * kDModel, 2);
  std::vector<float> c(kTokens * kDff);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::gemm_nt(a.data(), b.data(), c.data(), kTokens, kDModel, kDff);
    else
      kernels::serial::gemm_nt(a.data(), b.data(), c.data(), kTokens, kDModel, kDff);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kTokens * kDModel * kDff));
}

template <bool Parallel>
void BM_Ternary(benchmark::State& state) {
  const auto x = randn(kTokens * kDModel, 3);
  Rng rng(4);
  std::vector<std::int8_t> trits(kDff * kDModel);
  for (auto& t : trits) t = static_cast<std::int8_t>(static_cast<int>(rng.below(3)) - 1);
  std::vector<float> y(kTokens * kDff);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::ternary_gemm(x.data(), trits.data(), y.data(), kTokens, kDff, kDModel, 0.5f);
    else
      kernels::serial::ternary_gemm(x.data(), trits.data(), y.data(), kTokens, kDff, kDModel, 0.5f);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kTokens * kDModel * kDff));
}

template <bool Parallel>
void BM_Butterfly(benchmark::State& state) {
  const auto dim = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  ButterflyAngles<float> angles(dim, 2);
  angles.angles = gaussian<float>(rng, angles.angles.shape(), 0.0, 0.5);
  const auto x = gaussian<float>(rng, {kTokens, dim}, 0.0, 1.0);
  for (auto _ : state) {
    if constexpr (Parallel)
      benchmark::DoNotOptimize(butterfly_forward(x, angles));
    else
      benchmark::DoNotOptimize(serial::butterfly_forward(x, angles));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kTokens));
}

void BM_OrbitalLayerForward(benchmark::State& state) {
  OrbitalMoELayer<float> layer(kDModel, kDff, 8, 2);
  Rng rng(6);
  layer.init(rng);
  const auto h = gaussian<float>(rng, {kTokens, kDModel}, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(h, 32));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kTokens));
}

}  // namespace

BENCHMARK(BM_GemmNT<false>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GemmNT<true>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Ternary<false>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Ternary<true>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Butterfly<false>)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Butterfly<true>)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_OrbitalLayerForward)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
