#pragma once

#include <cstddef>

namespace mantis {

// Row-major general matrix multiply: C = alpha * op(A) * op(B) + beta * C.
// op(A) is m x k, op(B) is k x n, C is m x n. Leading dimensions are the
// row strides of the stored (untransposed) matrices.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

// Caps the number of threads the gemm backend may use. n <= 0 resets to the
// hardware default.
void set_gemm_threads(int n);

// Name of the active backend ("openblas" or "builtin"), for diagnostics.
const char* gemm_backend();

}  // namespace mantis
