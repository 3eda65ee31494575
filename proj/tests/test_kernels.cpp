#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "foba/kernels.hpp"
#include "foba/rng.hpp"
#include "kernels/kernels_simd.hpp"

using namespace foba;

namespace {

std::vector<float> random_vec(Rng& rng, int64_t n, double lo = -2.0, double hi = 2.0) {
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

bool have_avx2 = kern::avx2_available();

}  // namespace

TEST_CASE("reference gemm against a literal triple loop oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        int m = static_cast<int>(rng.uniform_int(1, 17));
        int n = static_cast<int>(rng.uniform_int(1, 17));
        int k = static_cast<int>(rng.uniform_int(1, 17));
        std::vector<double> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n);
        for (auto& x : a) x = rng.uniform(-1, 1);
        for (auto& x : b) x = rng.uniform(-1, 1);
        std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
        kern::ref::gemm<double>(false, false, m, n, k, 1.0, a.data(), k, b.data(), n,
                                0.0, c.data(), n);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double want = 0;
                for (int p = 0; p < k; ++p) want += a[i * k + p] * b[p * n + j];
                CHECK(c[i * n + j] == doctest::Approx(want).epsilon(1e-13));
            }
    }
}

TEST_CASE("reference gemm transpose flags agree with explicit transposition") {
    Rng rng(12);
    int m = 7, n = 9, k = 5;
    std::vector<double> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n);
    for (auto& x : a) x = rng.uniform(-1, 1);
    for (auto& x : b) x = rng.uniform(-1, 1);
    std::vector<double> at(static_cast<size_t>(k) * m), bt(static_cast<size_t>(n) * k);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
    for (int p = 0; p < k; ++p)
        for (int j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];

    std::vector<double> c0(static_cast<size_t>(m) * n, 0.0), c1 = c0, c2 = c0, c3 = c0;
    kern::ref::gemm<double>(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, c0.data(), n);
    kern::ref::gemm<double>(true, false, m, n, k, 1.0, at.data(), m, b.data(), n, 0.0, c1.data(), n);
    kern::ref::gemm<double>(false, true, m, n, k, 1.0, a.data(), k, bt.data(), k, 0.0, c2.data(), n);
    kern::ref::gemm<double>(true, true, m, n, k, 1.0, at.data(), m, bt.data(), k, 0.0, c3.data(), n);
    for (size_t i = 0; i < c0.size(); ++i) {
        CHECK(c1[i] == doctest::Approx(c0[i]).epsilon(1e-14));
        CHECK(c2[i] == doctest::Approx(c0[i]).epsilon(1e-14));
        CHECK(c3[i] == doctest::Approx(c0[i]).epsilon(1e-14));
    }
}

TEST_CASE("avx2 gemm matches the scalar reference") {
    if (!have_avx2) return;
    Rng rng(13);
    for (int trial = 0; trial < 40; ++trial) {
        int m = static_cast<int>(rng.uniform_int(1, 40));
        int n = static_cast<int>(rng.uniform_int(1, 40));
        int k = static_cast<int>(rng.uniform_int(1, 64));
        bool ta = rng.bernoulli(0.5), tb = rng.bernoulli(0.5);
        auto a = random_vec(rng, static_cast<int64_t>(m) * k, -1, 1);
        auto b = random_vec(rng, static_cast<int64_t>(k) * n, -1, 1);
        auto c0 = random_vec(rng, static_cast<int64_t>(m) * n, -1, 1);
        auto c1 = c0;
        float beta = rng.bernoulli(0.5) ? 1.0f : 0.0f;
        int lda = ta ? m : k;
        int ldb = tb ? k : n;
        kern::ref::gemm<float>(ta, tb, m, n, k, 0.5f, a.data(), lda, b.data(), ldb,
                               beta, c0.data(), n);
        kern::avx2::sgemm(ta, tb, m, n, k, 0.5f, a.data(), lda, b.data(), ldb,
                          beta, c1.data(), n);
        // accumulation order differs (FMA, lane sums); tolerance scales with k
        CHECK(max_abs_diff(c0, c1) < 1e-5 * k);
    }
}

TEST_CASE("avx2 elementwise kernels match the scalar reference") {
    if (!have_avx2) return;
    Rng rng(14);
    for (int64_t n : {1, 7, 8, 9, 31, 257, 1000}) {
        auto a = random_vec(rng, n), b = random_vec(rng, n);
        std::vector<float> y0(static_cast<size_t>(n)), y1(static_cast<size_t>(n));

        kern::ref::add<float>(a.data(), b.data(), y0.data(), n);
        kern::avx2::sadd(a.data(), b.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) == 0.0);

        kern::ref::mul<float>(a.data(), b.data(), y0.data(), n);
        kern::avx2::smul(a.data(), b.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) == 0.0);

        y0 = b; y1 = b;
        kern::ref::axpy<float>(0.37f, a.data(), y0.data(), n);
        kern::avx2::saxpy(0.37f, a.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) < 1e-6);  // fma vs mul+add rounding, ~1 ulp at |x|≈4

        y0 = b; y1 = b;
        kern::ref::muladd<float>(a.data(), b.data(), y0.data(), n);
        kern::avx2::smuladd(a.data(), b.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) < 1e-6);

        kern::ref::relu_fwd<float>(a.data(), y0.data(), n);
        kern::avx2::srelu_fwd(a.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) == 0.0);

        std::fill(y0.begin(), y0.end(), 0.1f);
        std::fill(y1.begin(), y1.end(), 0.1f);
        kern::ref::relu_bwd<float>(a.data(), b.data(), y0.data(), n);
        kern::avx2::srelu_bwd(a.data(), b.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) == 0.0);

        kern::ref::sigmoid_fwd<float>(a.data(), y0.data(), n);
        kern::avx2::ssigmoid_fwd(a.data(), y1.data(), n);
        CHECK(max_abs_diff(y0, y1) < 2e-7);

        kern::ref::exp_fwd<float>(a.data(), y0.data(), n);
        kern::avx2::sexp(a.data(), y1.data(), n);
        for (int64_t i = 0; i < n; ++i)
            CHECK(std::abs(y0[i] - y1[i]) < 2e-7 * std::abs(y0[i]) + 1e-12);

        // reductions reorder the accumulation, so the bound scales with n
        CHECK(std::abs(kern::ref::sum<float>(a.data(), n) - kern::avx2::ssum(a.data(), n)) <
              1e-7 * static_cast<double>(n) + 1e-6);
        CHECK(std::abs(kern::ref::dot<float>(a.data(), b.data(), n) -
                       kern::avx2::sdot(a.data(), b.data(), n)) <
              4e-7 * static_cast<double>(n) + 1e-6);
    }
}

TEST_CASE("sigmoid output stays strictly inside (0,1) even for huge inputs") {
    std::vector<float> x = {-1e30f, -100.0f, -20.0f, 0.0f, 20.0f, 100.0f, 1e30f};
    std::vector<float> y(x.size());
    kern::ref::sigmoid_fwd<float>(x.data(), y.data(), static_cast<int64_t>(x.size()));
    for (float v : y) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    if (have_avx2) {
        kern::avx2::ssigmoid_fwd(x.data(), y.data(), static_cast<int64_t>(x.size()));
        for (float v : y) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }
    std::vector<double> xd(x.begin(), x.end()), yd(x.size());
    kern::ref::sigmoid_fwd<double>(xd.data(), yd.data(), static_cast<int64_t>(xd.size()));
    for (double v : yd) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

namespace {

// Naive transcription of the scan recurrence, kept deliberately simple:
// this is the oracle the production kernels are judged against.
template <typename T>
std::vector<T> naive_scan(int L, int di, int ds, const std::vector<T>& u,
                          const std::vector<T>& delta, const std::vector<T>& a,
                          const std::vector<T>& b, const std::vector<T>& c,
                          const std::vector<T>& d) {
    std::vector<T> h(static_cast<size_t>(di) * ds, T(0));
    std::vector<T> y(static_cast<size_t>(L) * di, T(0));
    for (int t = 0; t < L; ++t) {
        for (int i = 0; i < di; ++i) {
            T acc = 0;
            for (int n = 0; n < ds; ++n) {
                T abar = std::exp(delta[t * di + i] * a[i * ds + n]);
                T bbar = delta[t * di + i] * b[t * ds + n];
                h[i * ds + n] = abar * h[i * ds + n] + bbar * u[t * di + i];
                acc += c[t * ds + n] * h[i * ds + n];
            }
            y[t * di + i] = acc + d[i] * u[t * di + i];
        }
    }
    return y;
}

}  // namespace

TEST_CASE("scan kernels agree with the naive recurrence") {
    Rng rng(15);
    for (int trial = 0; trial < 10; ++trial) {
        int L = static_cast<int>(rng.uniform_int(1, 30));
        int di = static_cast<int>(rng.uniform_int(1, 12));
        int ds = static_cast<int>(rng.uniform_int(1, 16));
        std::vector<double> u(static_cast<size_t>(L) * di), delta = u,
                            a(static_cast<size_t>(di) * ds),
                            b(static_cast<size_t>(L) * ds), c = b, d(static_cast<size_t>(di));
        for (auto& x : u) x = rng.uniform(-1, 1);
        for (auto& x : delta) x = rng.uniform(0.001, 0.5);
        for (auto& x : a) x = rng.uniform(-2, -0.1);
        for (auto& x : b) x = rng.uniform(-1, 1);
        for (auto& x : c) x = rng.uniform(-1, 1);
        for (auto& x : d) x = rng.uniform(-1, 1);

        auto want = naive_scan<double>(L, di, ds, u, delta, a, b, c, d);
        std::vector<double> h(static_cast<size_t>(L) * di * ds), y(want.size());
        kern::ref::scan_fwd<double>(L, di, ds, u.data(), delta.data(), a.data(),
                                    b.data(), c.data(), d.data(), h.data(), y.data());
        for (size_t i = 0; i < y.size(); ++i)
            CHECK(std::abs(y[i] - want[i]) < 1e-12);
    }
}

TEST_CASE("avx2 scan matches the scalar reference") {
    if (!have_avx2) return;
    Rng rng(16);
    for (int trial = 0; trial < 8; ++trial) {
        int L = static_cast<int>(rng.uniform_int(1, 40));
        int di = static_cast<int>(rng.uniform_int(1, 20));
        int ds = (trial % 2) ? 8 : static_cast<int>(rng.uniform_int(1, 16));
        int64_t nu = static_cast<int64_t>(L) * di, ns = static_cast<int64_t>(L) * ds;
        auto u = random_vec(rng, nu);
        auto delta = random_vec(rng, nu, 0.001, 0.5);
        auto a = random_vec(rng, static_cast<int64_t>(di) * ds, -2.0, -0.1);
        auto b = random_vec(rng, ns);
        auto c = random_vec(rng, ns);
        auto d = random_vec(rng, di);
        auto gy = random_vec(rng, nu);

        std::vector<float> h0(static_cast<size_t>(L) * di * ds), h1 = h0;
        std::vector<float> y0(static_cast<size_t>(nu)), y1 = y0;
        kern::ref::scan_fwd<float>(L, di, ds, u.data(), delta.data(), a.data(),
                                   b.data(), c.data(), d.data(), h0.data(), y0.data());
        kern::avx2::sscan_fwd(L, di, ds, u.data(), delta.data(), a.data(),
                              b.data(), c.data(), d.data(), h1.data(), y1.data());
        CHECK(max_abs_diff(y0, y1) < 1e-4);

        std::vector<float> gu0(static_cast<size_t>(nu), 0), gdelta0 = gu0,
                           ga0(a.size(), 0), gb0(b.size(), 0), gc0(c.size(), 0),
                           gd0(d.size(), 0);
        auto gu1 = gu0, gdelta1 = gdelta0, ga1 = ga0, gb1 = gb0, gc1 = gc0, gd1 = gd0;
        kern::ref::scan_bwd<float>(L, di, ds, u.data(), delta.data(), a.data(),
                                   b.data(), c.data(), d.data(), h0.data(), gy.data(),
                                   gu0.data(), gdelta0.data(), ga0.data(), gb0.data(),
                                   gc0.data(), gd0.data());
        kern::avx2::sscan_bwd(L, di, ds, u.data(), delta.data(), a.data(), b.data(),
                              c.data(), d.data(), h1.data(), gy.data(), gu1.data(),
                              gdelta1.data(), ga1.data(), gb1.data(), gc1.data(),
                              gd1.data());
        CHECK(max_abs_diff(gu0, gu1) < 1e-3);
        CHECK(max_abs_diff(gdelta0, gdelta1) < 1e-3);
        CHECK(max_abs_diff(ga0, ga1) < 1e-3);
        CHECK(max_abs_diff(gb0, gb1) < 1e-3);
        CHECK(max_abs_diff(gc0, gc1) < 1e-3);
        CHECK(max_abs_diff(gd0, gd1) < 1e-3);
    }
}

TEST_CASE("dispatcher honours force_scalar") {
    if (!have_avx2) {
        CHECK(!kern::using_avx2());
        return;
    }
    CHECK(kern::using_avx2());
    kern::force_scalar(true);
    CHECK(!kern::using_avx2());
    kern::force_scalar(false);
    CHECK(kern::using_avx2());
}
