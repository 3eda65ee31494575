#pragma once

#include <cstdint>

// Private interface between the dispatcher and the AVX2 translation unit.
// kernels_avx2.cpp is compiled with -mavx2 -mfma when the compiler supports
// it; on other toolchains it degrades to compiled() == false and the
// dispatcher never routes here.

namespace foba::kern::avx2 {

bool compiled();

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc);

void sadd(const float* a, const float* b, float* y, int64_t n);
void smul(const float* a, const float* b, float* y, int64_t n);
void saxpy(float alpha, const float* x, float* y, int64_t n);
void smuladd(const float* a, const float* b, float* y, int64_t n);
void sscale(float* x, float alpha, int64_t n);
float ssum(const float* x, int64_t n);
float sdot(const float* a, const float* b, int64_t n);
void srelu_fwd(const float* x, float* y, int64_t n);
void srelu_bwd(const float* x, const float* gy, float* gx, int64_t n);
void ssigmoid_fwd(const float* x, float* y, int64_t n);
void ssigmoid_bwd(const float* y, const float* gy, float* gx, int64_t n);
void sexp(const float* x, float* y, int64_t n);

void sscan_fwd(int L, int di, int ds, const float* u, const float* delta,
               const float* a, const float* b_seq, const float* c_seq,
               const float* d, float* h_all, float* y);
void sscan_bwd(int L, int di, int ds, const float* u, const float* delta,
               const float* a, const float* b_seq, const float* c_seq,
               const float* d, const float* h_all, const float* gy, float* gu,
               float* gdelta, float* ga, float* gb_seq, float* gc_seq,
               float* gd);

}  // namespace foba::kern::avx2
