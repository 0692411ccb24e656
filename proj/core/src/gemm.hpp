#pragma once

#include <cstdint>

// Row-major double GEMM kernels. Each output row is produced by exactly
// one thread with a fixed-order inner loop, so results are bitwise
// deterministic regardless of thread count.

namespace gaze::detail {

// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
             bool accumulate);

// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* bt, double* c, int64_t m, int64_t k, int64_t n,
             bool accumulate);

// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(const double* at, const double* b, double* c, int64_t m, int64_t k, int64_t n,
             bool accumulate);

}  // namespace gaze::detail
