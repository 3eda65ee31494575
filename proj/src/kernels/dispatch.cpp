#include "foba/kernels.hpp"

#include <atomic>

#include "kernels_simd.hpp"

namespace foba::kern {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

std::atomic<bool> g_force_scalar{false};

bool route_avx2() {
    static const bool usable = avx2::compiled() && cpu_has_avx2();
    return usable && !g_force_scalar.load(std::memory_order_relaxed);
}

}  // namespace

bool avx2_available() { return avx2::compiled() && cpu_has_avx2(); }

void force_scalar(bool on) { g_force_scalar.store(on, std::memory_order_relaxed); }

bool using_avx2() { return route_avx2(); }

void sgemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
           int lda, const float* b, int ldb, float beta, float* c, int ldc) {
    if (route_avx2())
        avx2::sgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    else
        ref::gemm<float>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

#define FOBA_DISPATCH(name, refname, ...)          \
    if (route_avx2())                              \
        avx2::name(__VA_ARGS__);                   \
    else                                           \
        ref::refname<float>(__VA_ARGS__)

void sadd(const float* a, const float* b, float* y, int64_t n) {
    FOBA_DISPATCH(sadd, add, a, b, y, n);
}
void smul(const float* a, const float* b, float* y, int64_t n) {
    FOBA_DISPATCH(smul, mul, a, b, y, n);
}
void saxpy(float alpha, const float* x, float* y, int64_t n) {
    FOBA_DISPATCH(saxpy, axpy, alpha, x, y, n);
}
void smuladd(const float* a, const float* b, float* y, int64_t n) {
    FOBA_DISPATCH(smuladd, muladd, a, b, y, n);
}
void sscale(float* x, float alpha, int64_t n) {
    FOBA_DISPATCH(sscale, scale, x, alpha, n);
}
float ssum(const float* x, int64_t n) {
    return route_avx2() ? avx2::ssum(x, n) : ref::sum<float>(x, n);
}
float sdot(const float* a, const float* b, int64_t n) {
    return route_avx2() ? avx2::sdot(a, b, n) : ref::dot<float>(a, b, n);
}
void srelu_fwd(const float* x, float* y, int64_t n) {
    FOBA_DISPATCH(srelu_fwd, relu_fwd, x, y, n);
}
void srelu_bwd(const float* x, const float* gy, float* gx, int64_t n) {
    FOBA_DISPATCH(srelu_bwd, relu_bwd, x, gy, gx, n);
}
void ssigmoid_fwd(const float* x, float* y, int64_t n) {
    FOBA_DISPATCH(ssigmoid_fwd, sigmoid_fwd, x, y, n);
}
void ssigmoid_bwd(const float* y, const float* gy, float* gx, int64_t n) {
    FOBA_DISPATCH(ssigmoid_bwd, sigmoid_bwd, y, gy, gx, n);
}
void sexp(const float* x, float* y, int64_t n) {
    FOBA_DISPATCH(sexp, exp_fwd, x, y, n);
}

#undef FOBA_DISPATCH

void sscan_fwd(int L, int di, int ds, const float* u, const float* delta,
               const float* a, const float* b_seq, const float* c_seq,
               const float* d, float* h_all, float* y) {
    if (route_avx2())
        avx2::sscan_fwd(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, y);
    else
        ref::scan_fwd<float>(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, y);
}

void sscan_bwd(int L, int di, int ds, const float* u, const float* delta,
               const float* a, const float* b_seq, const float* c_seq,
               const float* d, const float* h_all, const float* gy, float* gu,
               float* gdelta, float* ga, float* gb_seq, float* gc_seq,
               float* gd) {
    if (route_avx2())
        avx2::sscan_bwd(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, gy, gu,
                        gdelta, ga, gb_seq, gc_seq, gd);
    else
        ref::scan_bwd<float>(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all,
                             gy, gu, gdelta, ga, gb_seq, gc_seq, gd);
}

void dgemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
           int lda, const double* b, int ldb, double beta, double* c, int ldc) {
    ref::gemm<double>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void dscan_fwd(int L, int di, int ds, const double* u, const double* delta,
               const double* a, const double* b_seq, const double* c_seq,
               const double* d, double* h_all, double* y) {
    ref::scan_fwd<double>(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, y);
}

void dscan_bwd(int L, int di, int ds, const double* u, const double* delta,
               const double* a, const double* b_seq, const double* c_seq,
               const double* d, const double* h_all, const double* gy,
               double* gu, double* gdelta, double* ga, double* gb_seq,
               double* gc_seq, double* gd) {
    ref::scan_bwd<double>(L, di, ds, u, delta, a, b_seq, c_seq, d, h_all, gy,
                          gu, gdelta, ga, gb_seq, gc_seq, gd);
}

}  // namespace foba::kern
