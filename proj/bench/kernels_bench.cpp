// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "motok/kernels.hpp"
#include "motok/rng.hpp"

namespace {

using motok::Rng;
namespace k = motok::kernels;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::gemm_nn(a.data(), b.data(), c.data(), n, n, n, false);
    else
      k::serial::gemm_nn(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n * n * n));
}

template <bool Parallel>
void BM_nearest_rows(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const std::size_t m = 64, d = 32;
  const auto a = random_vec(n * d, 3), b = random_vec(m * d, 4);
  std::vector<std::int64_t> idx(n);
  std::vector<double> dist(n);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::nearest_rows(a.data(), b.data(), idx.data(), dist.data(), n, m, d);
    else
      k::serial::nearest_rows(a.data(), b.data(), idx.data(), dist.data(), n, m, d);
    benchmark::DoNotOptimize(idx.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n));
}

template <bool Parallel>
void BM_pairwise_sqdist(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const std::size_t d = 32;
  const auto a = random_vec(n * d, 5), b = random_vec(n * d, 6);
  std::vector<double> out(n * n);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::pairwise_sqdist(a.data(), b.data(), out.data(), n, n, d);
    else
      k::serial::pairwise_sqdist(a.data(), b.data(), out.data(), n, n, d);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_im2col(benchmark::State& st) {
  const auto len = static_cast<std::size_t>(st.range(0));
  const std::size_t ch = 48, kernel = 4, stride = 2, pad = 1;
  const std::size_t out_len = k::conv_out_len(len, kernel, stride, pad);
  const auto x = random_vec(len * ch, 7);
  std::vector<double> cols(out_len * ch * kernel);
  for (auto _ : st) {
    if constexpr (Parallel)
      k::omp::im2col_1d(x.data(), cols.data(), len, ch, out_len, kernel, stride, pad);
    else
      k::serial::im2col_1d(x.data(), cols.data(), len, ch, out_len, kernel, stride, pad);
    benchmark::DoNotOptimize(cols.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/omp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_nearest_rows<false>)->Name("nearest_rows/serial")->Arg(256)->Arg(4096);
BENCHMARK(BM_nearest_rows<true>)->Name("nearest_rows/omp")->Arg(256)->Arg(4096);
BENCHMARK(BM_pairwise_sqdist<false>)->Name("pairwise_sqdist/serial")->Arg(64)->Arg(512);
BENCHMARK(BM_pairwise_sqdist<true>)->Name("pairwise_sqdist/omp")->Arg(64)->Arg(512);
BENCHMARK(BM_im2col<false>)->Name("im2col_1d/serial")->Arg(64)->Arg(1024);
BENCHMARK(BM_im2col<true>)->Name("im2col_1d/omp")->Arg(64)->Arg(1024);

BENCHMARK_MAIN();
