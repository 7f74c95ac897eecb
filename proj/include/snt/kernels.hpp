#pragma once

// Dense double-precision kernels backing the tensor ops. Every kernel has a
// serial reference implementation and an OpenMP variant that partitions work
// by output row only; the per-element arithmetic and loop order are identical,
// so results are bit-identical for any thread count. The active variant is a
// process-wide switch (parallel by default).

namespace snt::kernels {

void set_parallel(bool enabled);
bool parallel_enabled();
int max_threads();

// c[m,n] = (accumulate ? c : 0) + a[m,k] * b[k,n]; lda/ldb/ldc are row strides.
void gemm_serial(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n, bool accumulate);
void gemm_omp(const double* a, int lda, const double* b, int ldb,
              double* c, int ldc, int m, int k, int n, bool accumulate);
void gemm(const double* a, int lda, const double* b, int ldb,
          double* c, int ldc, int m, int k, int n, bool accumulate);

// c[k,n] += a[m,k]^T * b[m,n]  (weight-gradient shape)
void gemm_tn_serial(const double* a, int lda, const double* b, int ldb,
                    double* c, int ldc, int m, int k, int n);
void gemm_tn_omp(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n);
void gemm_tn(const double* a, int lda, const double* b, int ldb,
             double* c, int ldc, int m, int k, int n);

// c[m,k] += a[m,n] * b[k,n]^T  (input-gradient shape)
void gemm_nt_serial(const double* a, int lda, const double* b, int ldb,
                    double* c, int ldc, int m, int k, int n);
void gemm_nt_omp(const double* a, int lda, const double* b, int ldb,
                 double* c, int ldc, int m, int k, int n);
void gemm_nt(const double* a, int lda, const double* b, int ldb,
             double* c, int ldc, int m, int k, int n);

}  // namespace snt::kernels
