#pragma once

#include <cstddef>

namespace cmr::kernels {

/// Execution mode for the dense kernels. Parallel uses OpenMP across output
/// rows; every output element is reduced in a fixed left-to-right order in
/// both modes, so results are bitwise identical regardless of mode or
/// thread count.
enum class Mode { kSerial, kParallel };

void set_mode(Mode m);
Mode mode();

// c[m x n] = a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n);
// c[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n);
// c[m x n] = a[r x m]^T * b[r x n]
void gemm_tn(const double* a, const double* b, double* c,
             std::size_t r, std::size_t m, std::size_t n);

// Serial reference paths, kept callable for tests and benchmarks.
void gemm_nn_serial(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n);
void gemm_nt_serial(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n);
void gemm_tn_serial(const double* a, const double* b, double* c,
                    std::size_t r, std::size_t m, std::size_t n);

}  // namespace cmr::kernels
