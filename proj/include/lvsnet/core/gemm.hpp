#pragma once

#include <cstdint>

#if defined(LVSNET_WITH_OPENBLAS)
#include <cblas.h>
#endif

namespace lvsnet {

// Row-major C = alpha * op(A) * op(B) + beta * C, the single dense kernel
// behind every convolution and projection. Delegates to OpenBLAS when built
// with LVSNET_WITH_OPENBLAS, otherwise falls back to a blocked loop nest.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

#if defined(LVSNET_WITH_OPENBLAS)

template <>
inline void gemm<float>(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                        float alpha, const float* a, std::int64_t lda, const float* b,
                        std::int64_t ldb, float beta, float* c, std::int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

template <>
inline void gemm<double>(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                         double alpha, const double* a, std::int64_t lda, const double* b,
                         std::int64_t ldb, double beta, double* c, std::int64_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

#else

namespace detail {

template <class T>
inline T cell(const T* p, std::int64_t ld, bool trans, std::int64_t r, std::int64_t col) {
  return trans ? p[col * ld + r] : p[r * ld + col];
}

}  // namespace detail

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  constexpr std::int64_t kBlock = 64;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      c[i * ldc + j] = beta == T(0) ? T(0) : beta * c[i * ldc + j];
    }
  }
  for (std::int64_t k0 = 0; k0 < k; k0 += kBlock) {
    const std::int64_t k1 = std::min<std::int64_t>(k0 + kBlock, k);
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t kk = k0; kk < k1; ++kk) {
        const T av = alpha * detail::cell(a, lda, trans_a, i, kk);
        if (av == T(0)) continue;
        T* crow = c + i * ldc;
        if (!trans_b) {
          const T* brow = b + kk * ldb;
          for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        } else {
          for (std::int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + kk];
        }
      }
    }
  }
}

#endif  // LVSNET_WITH_OPENBLAS

}  // namespace lvsnet
