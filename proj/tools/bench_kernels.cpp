// Benchmark: OpenMP kernels vs the serial reference, plus batched
// demonstration preloading at different batch sizes.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cmr/kernels.hpp"
#include "cmr/model.hpp"
#include "cmr/pipeline.hpp"
#include "cmr/rng.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0)
        .count();
}

double bench_gemm(std::size_t n, bool parallel, int reps) {
    cmr::Rng rng(42);
    std::vector<double> a(n * n), b(n * n), c(n * n);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    cmr::kernels::set_mode(parallel ? cmr::kernels::Mode::kParallel
                                    : cmr::kernels::Mode::kSerial);
    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r)
        cmr::kernels::gemm_nn(a.data(), b.data(), c.data(), n, n, n);
    return ms_since(t0) / reps;
}

double bench_preload(const cmr::Model& model,
                     const std::vector<cmr::TokenSeq>& demos,
                     std::size_t batch, int reps) {
    // warm-up
    cmr::preload_demos(model, demos, batch, cmr::CombineMode::kMean);
    std::vector<double> times;
    for (int r = 0; r < reps; ++r) {
        auto t0 = Clock::now();
        cmr::preload_demos(model, demos, batch, cmr::CombineMode::kMean);
        times.push_back(ms_since(t0));
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];  // median
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP not enabled\n");
#endif

    std::printf("\ngemm_nn serial vs parallel (ms per call)\n");
    std::printf("%8s %12s %12s %8s\n", "n", "serial", "parallel", "speedup");
    for (std::size_t n : {64, 128, 256, 512}) {
        int reps = n <= 128 ? 20 : 5;
        double s = bench_gemm(n, false, reps);
        double p = bench_gemm(n, true, reps);
        std::printf("%8zu %12.3f %12.3f %8.2fx\n", n, s, p, s / p);
    }
    cmr::kernels::set_mode(cmr::kernels::Mode::kParallel);

    std::printf("\ndemonstration preloading, k=15 (median ms over 5 runs)\n");
    cmr::ModelConfig mc;
    mc.vocab_size = 101;
    mc.seed = 3;
    cmr::Model model(mc);
    cmr::Rng rng(7);
    std::vector<cmr::TokenSeq> demos;
    for (int i = 0; i < 15; ++i) {
        cmr::TokenSeq seq(60);
        for (auto& t : seq) t = static_cast<cmr::TokenId>(rng.below(101));
        demos.push_back(std::move(seq));
    }
    std::printf("%14s %12s\n", "demo_batch", "median_ms");
    for (std::size_t batch : {1, 4}) {
        double m = bench_preload(model, demos, batch, 5);
        std::printf("%14zu %12.3f\n", batch, m);
    }
    return 0;
}
