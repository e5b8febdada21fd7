#include "mantis/gemm.hpp"

#include <cstdlib>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>

namespace {

// Training allocates and frees the same large activation buffers every
// batch. Left at defaults, glibc serves them with mmap/munmap, so each batch
// pays the full page-fault cost again. Keep large blocks on the heap.
__attribute__((constructor(102))) void tune_malloc() {
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
}

}  // namespace
#endif

#ifdef MANTIS_USE_CBLAS
#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace {

// OpenBLAS picks its kernels from the CPU model id, which virtualised
// machines often report as "unknown"; that lands on a slow generic kernel
// even when AVX-512 is available. Point it at the matching kernel family
// before the library constructor runs. Users can still override via the
// environment.
__attribute__((constructor(101))) void hint_openblas_core_type() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512vl") &&
      __builtin_cpu_supports("avx512dq") && __builtin_cpu_supports("avx512bw")) {
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", /*overwrite=*/0);
  } else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    setenv("OPENBLAS_CORETYPE", "HASWELL", /*overwrite=*/0);
  }
#endif
}

}  // namespace
#endif  // MANTIS_USE_CBLAS

namespace mantis {

namespace {

// Fallback kernel, and the path for matrices too small to amortise a BLAS
// call. Plain loops in a fixed order keep results deterministic.
template <class S>
void gemm_naive(bool trans_a, bool trans_b, int m, int n, int k, S alpha,
                const S* a, int lda, const S* b, int ldb, S beta, S* c,
                int ldc) {
  for (int i = 0; i < m; ++i) {
    S* crow = c + std::size_t(i) * ldc;
    if (beta == S(0))
      for (int j = 0; j < n; ++j) crow[j] = S(0);
    else if (beta != S(1))
      for (int j = 0; j < n; ++j) crow[j] *= beta;
  }
  if (!trans_a && !trans_b) {
    for (int i = 0; i < m; ++i) {
      const S* arow = a + std::size_t(i) * lda;
      S* crow = c + std::size_t(i) * ldc;
      for (int p = 0; p < k; ++p) {
        const S aip = alpha * arow[p];
        const S* brow = b + std::size_t(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (int i = 0; i < m; ++i) {
      const S* arow = a + std::size_t(i) * lda;
      S* crow = c + std::size_t(i) * ldc;
      for (int j = 0; j < n; ++j) {
        const S* brow = b + std::size_t(j) * ldb;
        S acc = 0;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += alpha * acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (int p = 0; p < k; ++p) {
      const S* arow = a + std::size_t(p) * lda;
      const S* brow = b + std::size_t(p) * ldb;
      for (int i = 0; i < m; ++i) {
        const S aip = alpha * arow[i];
        S* crow = c + std::size_t(i) * ldc;
        for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      S* crow = c + std::size_t(i) * ldc;
      for (int j = 0; j < n; ++j) {
        S acc = 0;
        for (int p = 0; p < k; ++p) acc += a[std::size_t(p) * lda + i] * b[std::size_t(j) * ldb + p];
        crow[j] += alpha * acc;
      }
    }
  }
}

// Below this flop count the dispatch overhead of a threaded BLAS call
// exceeds the work itself (attention-score sized matrices).
constexpr long kSmallGemmFlops = 96 * 1024;

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc) {
#ifdef MANTIS_USE_CBLAS
  if (static_cast<long>(m) * n * k >= kSmallGemmFlops) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
    return;
  }
#endif
  gemm_naive(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
#ifdef MANTIS_USE_CBLAS
  if (static_cast<long>(m) * n * k >= kSmallGemmFlops) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
    return;
  }
#endif
  gemm_naive(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void set_gemm_threads(int n) {
#ifdef MANTIS_USE_CBLAS
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n > 0) openblas_set_num_threads(n);
#else
  (void)n;
#endif
}

const char* gemm_backend() {
#ifdef MANTIS_USE_CBLAS
  return "openblas";
#else
  return "builtin";
#endif
}

}  // namespace mantis
