#include "snt/kernels.hpp"

#include <atomic>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace snt::kernels {

namespace {
std::atomic<bool> g_parallel{true};

// Work below this many multiply-adds is not worth a parallel region.
constexpr long kParallelCutoff = 32768;
}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Row-of-C microkernel: c_row[0..n) (+)= sum_k a[i,k] * b_row_k. The j loop is
// a contiguous axpy, which the compiler vectorizes.
static inline void gemm_row(const double* a_row, const double* b, int ldb,
                            double* c_row, int k, int n, bool accumulate) {
  if (!accumulate) {
    std::memset(c_row, 0, static_cast<size_t>(n) * sizeof(double));
  }
  for (int kk = 0; kk < k; ++kk) {
    const double aik = a_row[kk];
    if (aik == 0.0) continue;
    const double* b_row = b + static_cast<size_t>(kk) * ldb;
    for (int j = 0; j < n; ++j) {
      c_row[j] += aik * b_row[j];
    }
  }
}

void gemm_serial(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    gemm_row(a + static_cast<size_t>(i) * lda, b, ldb,
             c + static_cast<size_t>(i) * ldc, k, n, accumulate);
  }
}

void gemm_omp(const double* a, int lda, const double* b, int ldb,
              double* c, int ldc, int m, int k, int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (m > 1 && work >= kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    gemm_row(a + static_cast<size_t>(i) * lda, b, ldb,
             c + static_cast<size_t>(i) * ldc, k, n, accumulate);
  }
}

void gemm(const double* a, int lda, const double* b, int ldb,
          double* c, int ldc, int m, int k, int n, bool accumulate) {
  if (g_parallel.load()) {
    gemm_omp(a, lda, b, ldb, c, ldc, m, k, n, accumulate);
  } else {
    gemm_serial(a, lda, b, ldb, c, ldc, m, k, n, accumulate);
  }
}

// c[kk,:] += sum_m a[m,kk] * b[m,:]; each output row is owned by one thread.
static inline void gemm_tn_row(const double* a, int lda, const double* b,
                               int ldb, double* c_row, int m, int kk, int n) {
  for (int mm = 0; mm < m; ++mm) {
    const double w = a[static_cast<size_t>(mm) * lda + kk];
    if (w == 0.0) continue;
    const double* b_row = b + static_cast<size_t>(mm) * ldb;
    for (int j = 0; j < n; ++j) {
      c_row[j] += w * b_row[j];
    }
  }
}

void gemm_tn_serial(const double* a, int lda, const double* b, int ldb,
                    double* c, int ldc, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    gemm_tn_row(a, lda, b, ldb, c + static_cast<size_t>(kk) * ldc, m, kk, n);
  }
}

void gemm_tn_omp(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (k > 1 && work >= kParallelCutoff)
  for (int kk = 0; kk < k; ++kk) {
    gemm_tn_row(a, lda, b, ldb, c + static_cast<size_t>(kk) * ldc, m, kk, n);
  }
}

void gemm_tn(const double* a, int lda, const double* b, int ldb,
             double* c, int ldc, int m, int k, int n) {
  if (g_parallel.load()) {
    gemm_tn_omp(a, lda, b, ldb, c, ldc, m, k, n);
  } else {
    gemm_tn_serial(a, lda, b, ldb, c, ldc, m, k, n);
  }
}

// c[i,kk] += dot(a[i,:], b[kk,:]); dot accumulation order fixed by j.
static inline void gemm_nt_row(const double* a_row, const double* b, int ldb,
                               double* c_row, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    const double* b_row = b + static_cast<size_t>(kk) * ldb;
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
      acc += a_row[j] * b_row[j];
    }
    c_row[kk] += acc;
  }
}

void gemm_nt_serial(const double* a, int lda, const double* b, int ldb,
                    double* c, int ldc, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    gemm_nt_row(a + static_cast<size_t>(i) * lda, b, ldb,
                c + static_cast<size_t>(i) * ldc, k, n);
  }
}

void gemm_nt_omp(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (m > 1 && work >= kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    gemm_nt_row(a + static_cast<size_t>(i) * lda, b, ldb,
                c + static_cast<size_t>(i) * ldc, k, n);
  }
}

void gemm_nt(const double* a, int lda, const double* b, int ldb,
             double* c, int ldc, int m, int k, int n) {
  if (g_parallel.load()) {
    gemm_nt_omp(a, lda, b, ldb, c, ldc, m, k, n);
  } else {
    gemm_nt_serial(a, lda, b, ldb, c, ldc, m, k, n);
  }
}

}  // namespace snt::kernels
