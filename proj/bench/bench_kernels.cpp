// Serial reference kernels against their OpenMP counterparts.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "draft/kernels.hpp"

namespace {

using namespace draft::kernels;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  GemmArgs g{.m = n, .n = n, .k = n, .a = a, .b = b, .c = c};
  for (auto _ : state) {
    Parallel ? omp::gemm(g) : serial::gemm(g);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 64;
  auto x = random_values(rows * cols, 3);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    Parallel ? omp::softmax_rows(rows, cols, x, {}, y) : serial::softmax_rows(rows, cols, x, {}, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 64;
  auto x = random_values(rows * dim, 4);
  std::vector<double> gamma(dim, 1.0), beta(dim, 0.0), y(x.size()), mean(rows), rstd(rows);
  for (auto _ : state) {
    if (Parallel)
      omp::layer_norm_rows(rows, dim, x, gamma, beta, 1e-5, y, mean, rstd);
    else
      serial::layer_norm_rows(rows, dim, x, gamma, beta, 1e-5, y, mean, rstd);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_Conv1d(benchmark::State& state) {
  Conv1dArgs c;
  c.batch = 16, c.time = static_cast<std::size_t>(state.range(0)), c.in_ch = 64, c.out_ch = 64, c.width = 3;
  c.stride = 2, c.left_pad = 2, c.out_time = (c.time + 1) / 2;
  auto x = random_values(c.batch * c.time * c.in_ch, 5);
  auto w = random_values(c.width * c.in_ch * c.out_ch, 6);
  std::vector<double> y(c.batch * c.out_time * c.out_ch);
  c.x = x, c.w = w, c.y = y;
  for (auto _ : state) {
    Parallel ? omp::conv1d(c) : serial::conv1d(c);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Softmax<false>)->Arg(1024)->Arg(8192);
BENCHMARK(BM_Softmax<true>)->Arg(1024)->Arg(8192);
BENCHMARK(BM_LayerNorm<false>)->Arg(1024)->Arg(8192);
BENCHMARK(BM_LayerNorm<true>)->Arg(1024)->Arg(8192);
BENCHMARK(BM_Conv1d<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_Conv1d<true>)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
