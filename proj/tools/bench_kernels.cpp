// Benchmarks the serial reference kernels against their OpenMP variants.

#include <benchmark/benchmark.h>

#include <vector>

#include "pyramid/kernels.hpp"
#include "pyramid/tensor.hpp"

using namespace pyramid;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    RandomSource rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

void bm_matmul_serial(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    auto a = random_vec(static_cast<std::size_t>(n) * n, 1);
    auto b = random_vec(static_cast<std::size_t>(n) * n, 2);
    std::vector<double> c(static_cast<std::size_t>(n) * n);
    for (auto _ : state) {
        kernels::matmul_serial(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
}

void bm_matmul_omp(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    auto a = random_vec(static_cast<std::size_t>(n) * n, 1);
    auto b = random_vec(static_cast<std::size_t>(n) * n, 2);
    std::vector<double> c(static_cast<std::size_t>(n) * n);
    for (auto _ : state) {
        kernels::matmul_omp(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
}

void bm_conv1d_serial(benchmark::State& state) {
    const int t = static_cast<int>(state.range(0)), c_n = 64, ks = 3;
    auto x = random_vec(static_cast<std::size_t>(t) * c_n, 3);
    auto w = random_vec(static_cast<std::size_t>(ks) * c_n * c_n, 4);
    std::vector<double> o(static_cast<std::size_t>(t) * c_n);
    for (auto _ : state) {
        kernels::conv1d_serial(x.data(), w.data(), o.data(), t, c_n, c_n, ks, 2, 1);
        benchmark::DoNotOptimize(o.data());
    }
}

void bm_conv1d_omp(benchmark::State& state) {
    const int t = static_cast<int>(state.range(0)), c_n = 64, ks = 3;
    auto x = random_vec(static_cast<std::size_t>(t) * c_n, 3);
    auto w = random_vec(static_cast<std::size_t>(ks) * c_n * c_n, 4);
    std::vector<double> o(static_cast<std::size_t>(t) * c_n);
    for (auto _ : state) {
        kernels::conv1d_omp(x.data(), w.data(), o.data(), t, c_n, c_n, ks, 2, 1);
        benchmark::DoNotOptimize(o.data());
    }
}

BENCHMARK(bm_matmul_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_omp)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_conv1d_serial)->Arg(128)->Arg(512);
BENCHMARK(bm_conv1d_omp)->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
