#pragma once

#include <cstdint>

namespace foba::kern {

// Numeric inner loops live behind this API. Every routine has a scalar
// reference implementation in kern::ref; the float entry points below
// dispatch to AVX2+FMA variants when the CPU supports them (checked once at
// runtime). The two paths are equivalence-tested against each other.
//
// The double entry points always run the reference path: doubles are only
// used by gradient checks and oracle-grade tests, where being the reference
// is the point.

bool avx2_available();

// Force the scalar path for the float API (diagnostics / A-B testing).
void force_scalar(bool on);
bool using_avx2();

// ---- dispatched float API ----------------------------------------------

// C[m,n] = alpha * op(A) * op(B) + beta * C, all row-major.
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc);

void sadd(const float* a, const float* b, float* y, int64_t n);           // y = a + b
void smul(const float* a, const float* b, float* y, int64_t n);           // y = a * b
void saxpy(float alpha, const float* x, float* y, int64_t n);             // y += alpha * x
void smuladd(const float* a, const float* b, float* y, int64_t n);        // y += a * b
void sscale(float* x, float alpha, int64_t n);
float ssum(const float* x, int64_t n);
float sdot(const float* a, const float* b, int64_t n);
void srelu_fwd(const float* x, float* y, int64_t n);
void srelu_bwd(const float* x, const float* gy, float* gx, int64_t n);    // gx += (x > 0) * gy
void ssigmoid_fwd(const float* x, float* y, int64_t n);
void ssigmoid_bwd(const float* y, const float* gy, float* gx, int64_t n); // gx += y(1-y) * gy
void sexp(const float* x, float* y, int64_t n);

// Selective state-space scan over a token sequence, sequential in t,
// data-parallel over (channel, state) pairs.
//   u, delta, y : [L, di]   b_seq, c_seq : [L, ds]   a : [di, ds]   d : [di]
//   h_all       : [L, di, ds] hidden states, written by fwd, read by bwd
//   h[t] = exp(delta[t] ⊙ a) * h[t-1] + delta[t] * b[t] * u[t],  h[-1] = 0
//   y[t,i] = Σ_n c[t,n] h[t,i,n] + d[i] u[t,i]
void sscan_fwd(int L, int di, int ds, const float* u, const float* delta,
               const float* a, const float* b_seq, const float* c_seq,
               const float* d, float* h_all, float* y);
void sscan_bwd(int L, int di, int ds, const float* u, const float* delta,
               const float* a, const float* b_seq, const float* c_seq,
               const float* d, const float* h_all, const float* gy,
               float* gu, float* gdelta, float* ga, float* gb_seq,
               float* gc_seq, float* gd);

// ---- double API (reference path) ---------------------------------------

void dgemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
           const double* a, int lda, const double* b, int ldb, double beta,
           double* c, int ldc);
void dscan_fwd(int L, int di, int ds, const double* u, const double* delta,
               const double* a, const double* b_seq, const double* c_seq,
               const double* d, double* h_all, double* y);
void dscan_bwd(int L, int di, int ds, const double* u, const double* delta,
               const double* a, const double* b_seq, const double* c_seq,
               const double* d, const double* h_all, const double* gy,
               double* gu, double* gdelta, double* ga, double* gb_seq,
               double* gc_seq, double* gd);

// ---- type-generic facade ------------------------------------------------

template <typename T>
void gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
    if constexpr (sizeof(T) == sizeof(float))
        sgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    else
        dgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void scan_fwd(int L, int di, int ds, const T* u, const T* delta, const T* a,
              const T* b_seq, const T* c_seq, const T* d, T* h_all, T* y) {
    if constexpr (sizeof(T) == sizeof(float))
        sscan_fwd(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, y);
    else
        dscan_fwd(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, y);
}

template <typename T>
void scan_bwd(int L, int di, int ds, const T* u, const T* delta, const T* a,
              const T* b_seq, const T* c_seq, const T* d, const T* h_all,
              const T* gy, T* gu, T* gdelta, T* ga, T* gb_seq, T* gc_seq,
              T* gd) {
    if constexpr (sizeof(T) == sizeof(float))
        sscan_bwd(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, gy, gu,
                  gdelta, ga, gb_seq, gc_seq, gd);
    else
        dscan_bwd(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, gy, gu,
                  gdelta, ga, gb_seq, gc_seq, gd);
}

// ---- scalar reference implementations -----------------------------------
// Instantiated for float and double in kernels_ref.cpp; tests call these
// directly when comparing against the SIMD variants.

namespace ref {

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
          int lda, const T* b, int ldb, T beta, T* c, int ldc);

template <typename T> void add(const T* a, const T* b, T* y, int64_t n);
template <typename T> void mul(const T* a, const T* b, T* y, int64_t n);
template <typename T> void axpy(T alpha, const T* x, T* y, int64_t n);
template <typename T> void muladd(const T* a, const T* b, T* y, int64_t n);
template <typename T> void scale(T* x, T alpha, int64_t n);
template <typename T> T sum(const T* x, int64_t n);
template <typename T> T dot(const T* a, const T* b, int64_t n);
template <typename T> void relu_fwd(const T* x, T* y, int64_t n);
template <typename T> void relu_bwd(const T* x, const T* gy, T* gx, int64_t n);
template <typename T> void sigmoid_fwd(const T* x, T* y, int64_t n);
template <typename T> void sigmoid_bwd(const T* y, const T* gy, T* gx, int64_t n);
template <typename T> void exp_fwd(const T* x, T* y, int64_t n);

template <typename T>
void scan_fwd(int L, int di, int ds, const T* u, const T* delta, const T* a,
              const T* b_seq, const T* c_seq, const T* d, T* h_all, T* y);
template <typename T>
void scan_bwd(int L, int di, int ds, const T* u, const T* delta, const T* a,
              const T* b_seq, const T* c_seq, const T* d, const T* h_all,
              const T* gy, T* gu, T* gdelta, T* ga, T* gb_seq, T* gc_seq,
              T* gd);

}  // namespace ref

}  // namespace foba::kern
