#include "cmr/kernels.hpp"

#include <atomic>
#include <cstring>

namespace cmr::kernels {

namespace {

std::atomic<Mode> g_mode{Mode::kParallel};

// Work (in multiply-adds) below which spawning threads is not worth it.
constexpr std::size_t kParallelThreshold = 16 * 1024;

// Row blocks shared by the serial and parallel paths. Each output element
// accumulates over the reduction index in ascending order, which keeps the
// two paths bitwise identical.
inline void nn_rows(const double* a, const double* b, double* c,
                    std::size_t k, std::size_t n,
                    std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void nt_rows(const double* a, const double* b, double* c,
                    std::size_t k, std::size_t n,
                    std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
}

inline void tn_rows(const double* a, const double* b, double* c,
                    std::size_t r, std::size_t m, std::size_t n,
                    std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        for (std::size_t p = 0; p < r; ++p) {
            const double av = a[p * m + i];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline bool go_parallel(std::size_t work) {
    return g_mode.load(std::memory_order_relaxed) == Mode::kParallel &&
           work >= kParallelThreshold;
}

}  // namespace

void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }
Mode mode() { return g_mode.load(std::memory_order_relaxed); }

void gemm_nn_serial(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    nn_rows(a, b, c, k, n, 0, m);
}

void gemm_nt_serial(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    nt_rows(a, b, c, k, n, 0, m);
}

void gemm_tn_serial(const double* a, const double* b, double* c,
                    std::size_t r, std::size_t m, std::size_t n) {
    tn_rows(a, b, c, r, m, n, 0, m);
}

void gemm_nn(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n) {
    if (!go_parallel(m * k * n)) {
        nn_rows(a, b, c, k, n, 0, m);
        return;
    }
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i) {
        nn_rows(a, b, c, k, n, static_cast<std::size_t>(i),
                static_cast<std::size_t>(i) + 1);
    }
}

void gemm_nt(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n) {
    if (!go_parallel(m * k * n)) {
        nt_rows(a, b, c, k, n, 0, m);
        return;
    }
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i) {
        nt_rows(a, b, c, k, n, static_cast<std::size_t>(i),
                static_cast<std::size_t>(i) + 1);
    }
}

void gemm_tn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t m, std::size_t n) {
    if (!go_parallel(r * m * n)) {
        tn_rows(a, b, c, r, m, n, 0, m);
        return;
    }
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i) {
        tn_rows(a, b, c, r, m, n, static_cast<std::size_t>(i),
                static_cast<std::size_t>(i) + 1);
    }
}

}  // namespace cmr::kernels
