#include <cmath>
#include <vector>

#include "foba/kernels.hpp"

namespace foba::kern::ref {

template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
          int lda, const T* b, int ldb, T beta, T* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = 0;
            for (int p = 0; p < k; ++p) {
                T av = trans_a ? a[static_cast<int64_t>(p) * lda + i]
                               : a[static_cast<int64_t>(i) * lda + p];
                T bv = trans_b ? b[static_cast<int64_t>(j) * ldb + p]
                               : b[static_cast<int64_t>(p) * ldb + j];
                acc += av * bv;
            }
            T* dst = &c[static_cast<int64_t>(i) * ldc + j];
            *dst = alpha * acc + (beta == T(0) ? T(0) : beta * *dst);
        }
    }
}

template <typename T>
void add(const T* a, const T* b, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <typename T>
void mul(const T* a, const T* b, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

template <typename T>
void axpy(T alpha, const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void muladd(const T* a, const T* b, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

template <typename T>
void scale(T* x, T alpha, int64_t n) {
    for (int64_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <typename T>
T sum(const T* x, int64_t n) {
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

template <typename T>
T dot(const T* a, const T* b, int64_t n) {
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
void relu_fwd(const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_bwd(const T* x, const T* gy, T* gx, int64_t n) {
    for (int64_t i = 0; i < n; ++i)
        if (x[i] > T(0)) gx[i] += gy[i];
}

// The pre-activation is clamped so that the float result never rounds to an
// exact 0 or 1: downstream code relies on sigmoid outputs being strictly
// inside (0,1) (mask complements, BCE logs). 16 keeps float32 ~1e-7 away
// from the boundary, 36 does the same for float64.
template <typename T>
static inline T sigmoid_clamp() {
    return sizeof(T) == sizeof(float) ? T(16) : T(36);
}

template <typename T>
void sigmoid_fwd(const T* x, T* y, int64_t n) {
    const T lim = sigmoid_clamp<T>();
    for (int64_t i = 0; i < n; ++i) {
        T v = x[i];
        if (v > lim) v = lim;
        if (v < -lim) v = -lim;
        y[i] = T(1) / (T(1) + std::exp(-v));
    }
}

template <typename T>
void sigmoid_bwd(const T* y, const T* gy, T* gx, int64_t n) {
    for (int64_t i = 0; i < n; ++i) gx[i] += y[i] * (T(1) - y[i]) * gy[i];
}

template <typename T>
void exp_fwd(const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

template <typename T>
void scan_fwd(int L, int di, int ds, const T* u, const T* delta, const T* a,
              const T* b_seq, const T* c_seq, const T* d, T* h_all, T* y) {
    for (int t = 0; t < L; ++t) {
        const T* ut = u + static_cast<int64_t>(t) * di;
        const T* dt = delta + static_cast<int64_t>(t) * di;
        const T* bt = b_seq + static_cast<int64_t>(t) * ds;
        const T* ct = c_seq + static_cast<int64_t>(t) * ds;
        const T* hprev = t ? h_all + static_cast<int64_t>(t - 1) * di * ds : nullptr;
        T* ht = h_all + static_cast<int64_t>(t) * di * ds;
        T* yt = y + static_cast<int64_t>(t) * di;
        for (int i = 0; i < di; ++i) {
            const T* arow = a + static_cast<int64_t>(i) * ds;
            T* hrow = ht + static_cast<int64_t>(i) * ds;
            const T du = dt[i] * ut[i];
            T acc = 0;
            for (int n = 0; n < ds; ++n) {
                T abar = std::exp(dt[i] * arow[n]);
                T hp = hprev ? hprev[static_cast<int64_t>(i) * ds + n] : T(0);
                T h = abar * hp + du * bt[n];
                hrow[n] = h;
                acc += ct[n] * h;
            }
            yt[i] = acc + d[i] * ut[i];
        }
    }
}

template <typename T>
void scan_bwd(int L, int di, int ds, const T* u, const T* delta, const T* a,
              const T* b_seq, const T* c_seq, const T* d, const T* h_all,
              const T* gy, T* gu, T* gdelta, T* ga, T* gb_seq, T* gc_seq,
              T* gd) {
    // dh carried backwards across t, one row of ds per channel.
    std::vector<T> dh(static_cast<size_t>(di) * ds, T(0));
    for (int t = L - 1; t >= 0; --t) {
        const T* ut = u + static_cast<int64_t>(t) * di;
        const T* dt = delta + static_cast<int64_t>(t) * di;
        const T* bt = b_seq + static_cast<int64_t>(t) * ds;
        const T* ct = c_seq + static_cast<int64_t>(t) * ds;
        const T* ht = h_all + static_cast<int64_t>(t) * di * ds;
        const T* hprev = t ? h_all + static_cast<int64_t>(t - 1) * di * ds : nullptr;
        const T* gyt = gy + static_cast<int64_t>(t) * di;
        T* gut = gu + static_cast<int64_t>(t) * di;
        T* gdt = gdelta + static_cast<int64_t>(t) * di;
        T* gbt = gb_seq + static_cast<int64_t>(t) * ds;
        T* gct = gc_seq + static_cast<int64_t>(t) * ds;
        for (int i = 0; i < di; ++i) {
            const T* arow = a + static_cast<int64_t>(i) * ds;
            T* garow = ga + static_cast<int64_t>(i) * ds;
            T* dhrow = dh.data() + static_cast<int64_t>(i) * ds;
            const T* hrow = ht + static_cast<int64_t>(i) * ds;
            const T g = gyt[i];
            T gu_acc = g * d[i];
            T gdelta_acc = 0;
            gd[i] += g * ut[i];
            for (int n = 0; n < ds; ++n) {
                // dh gets this step's y-contribution on top of what flowed
                // back from t+1.
                T dhv = dhrow[n] + g * ct[n];
                gct[n] += g * hrow[n];
                T hp = hprev ? hprev[static_cast<int64_t>(i) * ds + n] : T(0);
                T abar = std::exp(dt[i] * arow[n]);
                gu_acc += dhv * dt[i] * bt[n];
                gbt[n] += dhv * dt[i] * ut[i];
                gdelta_acc += dhv * (abar * arow[n] * hp + bt[n] * ut[i]);
                garow[n] += dhv * abar * dt[i] * hp;
                // propagate to h_{t-1}
                dhrow[n] = dhv * abar;
            }
            gut[i] += gu_acc;
            gdt[i] += gdelta_acc;
        }
    }
}

#define FOBA_INSTANTIATE_REF(T)                                                   \
    template void gemm<T>(bool, bool, int, int, int, T, const T*, int, const T*,  \
                          int, T, T*, int);                                       \
    template void add<T>(const T*, const T*, T*, int64_t);                        \
    template void mul<T>(const T*, const T*, T*, int64_t);                        \
    template void axpy<T>(T, const T*, T*, int64_t);                              \
    template void muladd<T>(const T*, const T*, T*, int64_t);                     \
    template void scale<T>(T*, T, int64_t);                                       \
    template T sum<T>(const T*, int64_t);                                         \
    template T dot<T>(const T*, const T*, int64_t);                               \
    template void relu_fwd<T>(const T*, T*, int64_t);                             \
    template void relu_bwd<T>(const T*, const T*, T*, int64_t);                   \
    template void sigmoid_fwd<T>(const T*, T*, int64_t);                          \
    template void sigmoid_bwd<T>(const T*, const T*, T*, int64_t);                \
    template void exp_fwd<T>(const T*, T*, int64_t);                              \
    template void scan_fwd<T>(int, int, int, const T*, const T*, const T*,        \
                              const T*, const T*, const T*, T*, T*);              \
    template void scan_bwd<T>(int, int, int, const T*, const T*, const T*,        \
                              const T*, const T*, const T*, const T*, const T*,   \
                              T*, T*, T*, T*, T*, T*)

FOBA_INSTANTIATE_REF(float);
FOBA_INSTANTIATE_REF(double);

#undef FOBA_INSTANTIATE_REF

}  // namespace foba::kern::ref
