// Serial references vs OpenMP kernels, plus the renderer and chamfer paths.
// Thread count follows OMP_NUM_THREADS (PCGEN_DETERMINISTIC=1 forces one).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "pcgen/geometry.hpp"
#include "pcgen/kernels.hpp"
#include "pcgen/metrics.hpp"
#include "pcgen/render.hpp"

using namespace pcgen;

namespace {

std::vector<float> uniform(std::size_t n, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

PointCloud cloud(std::size_t n, std::uint64_t seed) { return PointCloud{uniform(3 * n, seed, -0.5f, 0.5f)}; }

void BM_matmul(benchmark::State& st) {
    const auto n = st.range(0);
    const auto a = uniform(static_cast<std::size_t>(n * n), 1), b = uniform(static_cast<std::size_t>(n * n), 2);
    std::vector<float> c(static_cast<std::size_t>(n * n));
    for (auto _ : st) {
        kernels::matmul(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}

void BM_matmul_reference(benchmark::State& st) {
    const auto n = st.range(0);
    const auto a = uniform(static_cast<std::size_t>(n * n), 1), b = uniform(static_cast<std::size_t>(n * n), 2);
    std::vector<float> c(static_cast<std::size_t>(n * n));
    for (auto _ : st) {
        kernels::matmul_reference(a, b, c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}

kernels::ConvGeometry conv_geometry(std::int64_t size) { return {1, 32, size, size, 32, 3, 3, 1, 1}; }

void BM_conv2d(benchmark::State& st) {
    const auto g = conv_geometry(st.range(0));
    const auto x = uniform(static_cast<std::size_t>(g.in_channels * g.in_h * g.in_w), 3);
    const auto w = uniform(static_cast<std::size_t>(g.out_channels * g.in_channels * 9), 4);
    std::vector<float> y(static_cast<std::size_t>(g.out_channels * g.out_h() * g.out_w()));
    for (auto _ : st) {
        kernels::conv2d_forward(g, x, w, y);
        benchmark::DoNotOptimize(y.data());
    }
}

void BM_conv2d_reference(benchmark::State& st) {
    const auto g = conv_geometry(st.range(0));
    const auto x = uniform(static_cast<std::size_t>(g.in_channels * g.in_h * g.in_w), 3);
    const auto w = uniform(static_cast<std::size_t>(g.out_channels * g.in_channels * 9), 4);
    std::vector<float> y(static_cast<std::size_t>(g.out_channels * g.out_h() * g.out_w()));
    for (auto _ : st) {
        kernels::conv2d_forward_reference(g, x, w, y);
        benchmark::DoNotOptimize(y.data());
    }
}

RenderConfig render_cfg(int upsample) {
    RenderConfig rc;
    rc.height = rc.width = 128;
    rc.upsample = upsample;
    return rc;
}

Pose bench_pose() {
    ViewConfig vc;
    vc.image_size = 128;
    return make_fixed_views(vc).fixed_views[0];
}

void BM_pseudo_render(benchmark::State& st) {
    const auto pc = cloud(static_cast<std::size_t>(st.range(0)), 5);
    const auto rc = render_cfg(static_cast<int>(st.range(1)));
    const auto pose = bench_pose();
    for (auto _ : st) benchmark::DoNotOptimize(pseudo_render(pc, pose, rc));
}

void BM_brute_force_render(benchmark::State& st) {
    const auto pc = cloud(static_cast<std::size_t>(st.range(0)), 5);
    const auto rc = render_cfg(static_cast<int>(st.range(1)));
    const auto pose = bench_pose();
    for (auto _ : st) benchmark::DoNotOptimize(brute_force_render(pc, pose, rc));
}

void BM_chamfer_kdtree(benchmark::State& st) {
    const auto a = cloud(static_cast<std::size_t>(st.range(0)), 6), b = cloud(static_cast<std::size_t>(st.range(0)), 7);
    for (auto _ : st) benchmark::DoNotOptimize(chamfer_bidirectional(a, b));
}

void BM_chamfer_brute_force(benchmark::State& st) {
    const auto a = cloud(static_cast<std::size_t>(st.range(0)), 6), b = cloud(static_cast<std::size_t>(st.range(0)), 7);
    for (auto _ : st) benchmark::DoNotOptimize(chamfer_brute_force(a, b));
}

}  // namespace

BENCHMARK(BM_matmul)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_matmul_reference)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv2d)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv2d_reference)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_pseudo_render)->Args({10000, 1})->Args({10000, 5})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_brute_force_render)->Args({10000, 1})->Args({10000, 5})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_chamfer_kdtree)->Arg(2000)->Arg(10000)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_chamfer_brute_force)->Arg(2000)->Unit(benchmark::kMicrosecond);

int main(int argc, char** argv) {
    kernels::apply_determinism_from_env();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
