#pragma once

#include <cstdint>

#ifdef PHD_HAVE_CBLAS
#include <cblas.h>
#endif

namespace phd {

// C[m x n] (+)= A[m x k] * B[k x n], row-major. When `accumulate` is false C
// is overwritten. The CBLAS backend and the built-in loops compute the same
// sums; the built-in kernel is the fallback when no BLAS is linked.

template <class T>
inline void gemm_nn_ref(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                        bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate)
      for (int64_t j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T  (dot products of rows).
template <class T>
inline void gemm_nt_ref(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                        bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// C[k x n] (+)= A[m x k]^T * B[m x n].
template <class T>
inline void gemm_tn_ref(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                        bool accumulate) {
  if (!accumulate)
    for (int64_t i = 0; i < k * n; ++i) c[i] = T(0);
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

#ifdef PHD_HAVE_CBLAS
// BLAS-internal threading is disabled: sequences are already parallelized at
// the batch level, and a fixed gemm partitioning keeps results reproducible.
extern "C" void openblas_set_num_threads(int);
inline const bool kBlasSingleThread = [] {
  openblas_set_num_threads(1);
  return true;
}();

inline void cblas_gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const float* a,
                       int64_t lda, const float* b, int64_t ldb, float beta, float* c,
                       int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
inline void cblas_gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a,
                       int64_t lda, const double* b, int64_t ldb, double beta, double* c,
                       int64_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
#endif

template <class T>
inline void gemm_nn(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                    bool accumulate = false) {
#ifdef PHD_HAVE_CBLAS
  cblas_gemm(false, false, m, n, k, a, k, b, n, accumulate ? T(1) : T(0), c, n);
#else
  gemm_nn_ref(c, a, b, m, k, n, accumulate);
#endif
}

template <class T>
inline void gemm_nt(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                    bool accumulate = false) {
#ifdef PHD_HAVE_CBLAS
  cblas_gemm(false, true, m, n, k, a, k, b, k, accumulate ? T(1) : T(0), c, n);
#else
  gemm_nt_ref(c, a, b, m, k, n, accumulate);
#endif
}

template <class T>
inline void gemm_tn(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n,
                    bool accumulate = false) {
#ifdef PHD_HAVE_CBLAS
  cblas_gemm(true, false, k, n, m, a, k, b, n, accumulate ? T(1) : T(0), c, n);
#else
  gemm_tn_ref(c, a, b, m, k, n, accumulate);
#endif
}

}  // namespace phd
