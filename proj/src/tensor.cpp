#include "unoise/tensor.hpp"

#include <thread>

#if defined(__SSE2__)
#include <immintrin.h>
#endif

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#if defined(UNOISE_USE_BLAS)
extern "C" {
void cblas_sgemm(int order, int trans_a, int trans_b, int m, int n, int k,
                 float alpha, const float* a, int lda, const float* b, int ldb,
                 float beta, float* c, int ldc);
void cblas_dgemm(int order, int trans_a, int trans_b, int m, int n, int k,
                 double alpha, const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc);
void openblas_set_num_threads(int n);
}
#endif

namespace unoise {

int& kernel_threads() {
  static int threads = 0;  // 0 = all hardware threads
  return threads;
}

namespace detail {

void tune_allocator() {
  static const bool done = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
#if defined(__SSE2__)
    // Saturated activations produce subnormal float32 gradients, which cost
    // two orders of magnitude more per op on x86. Flush them to zero; they
    // are far below any tolerance used here (doubles are unaffected until
    // 1e-308).
    _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
    return true;
  }();
  (void)done;
}

}  // namespace detail

#if defined(UNOISE_USE_BLAS)
namespace detail {
namespace {

constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

void sync_blas_threads() {
  static int applied = -1;
  const int want = kernel_threads();
  if (want != applied) {
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    openblas_set_num_threads(want > 0 ? want : (hw > 0 ? hw : 1));
    applied = want;
  }
}

}  // namespace

void blas_gemm(bool trans_a, bool trans_b, int M, int N, int K, const float* A,
               int lda, const float* B, int ldb, float beta, float* C, int ldc) {
  sync_blas_threads();
  cblas_sgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
              M, N, K, 1.0f, A, lda, B, ldb, beta, C, ldc);
}

void blas_gemm(bool trans_a, bool trans_b, int M, int N, int K, const double* A,
               int lda, const double* B, int ldb, double beta, double* C, int ldc) {
  sync_blas_threads();
  cblas_dgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
              M, N, K, 1.0, A, lda, B, ldb, beta, C, ldc);
}

}  // namespace detail
#endif

}  // namespace unoise
