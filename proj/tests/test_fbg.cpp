#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "foba/errors.hpp"
#include "foba/fbg.hpp"
#include "foba/grad_check.hpp"
#include "foba/graph.hpp"
#include "foba/param.hpp"
#include "foba/rng.hpp"

using namespace foba;

namespace {

using Mat = std::vector<std::vector<double>>;

// ---- independent oracles ---------------------------------------------------

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                          const Tensor<double>* bias, int stride, int pad, int groups) {
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int cig = ci / groups, cog = co / groups;
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor<double> y({co, oh, ow});
    for (int oc = 0; oc < co; ++oc) {
        const int gi = oc / cog;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias ? (*bias)[oc] : 0.0;
                for (int ic = 0; ic < cig; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            acc += x[((gi * cig + ic) * static_cast<int64_t>(h) + iy) * wd + ix] *
                                   w[((oc * static_cast<int64_t>(cig) + ic) * kh + ky) * kw + kx];
                        }
                y[(oc * static_cast<int64_t>(oh) + oy) * ow + ox] = acc;
            }
    }
    return y;
}

// Per-pixel normalization across channels with the standard 1e-5 epsilon.
Tensor<double> naive_layer_norm(const Tensor<double>& x, const Tensor<double>& gamma,
                                const Tensor<double>& beta) {
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    Tensor<double> y(x.dims());
    for (int64_t p = 0; p < hw; ++p) {
        double mu = 0;
        for (int i = 0; i < c; ++i) mu += x[i * hw + p];
        mu /= c;
        double var = 0;
        for (int i = 0; i < c; ++i) {
            const double d = x[i * hw + p] - mu;
            var += d * d;
        }
        var /= c;
        const double istd = 1.0 / std::sqrt(var + 1e-5);
        for (int i = 0; i < c; ++i)
            y[i * hw + p] = gamma[i] * ((x[i * hw + p] - mu) * istd) + beta[i];
    }
    return y;
}

// Double-loop attention with row-wise mask scaling on Q and K.
Mat naive_attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<double>& m,
                    double alpha) {
    const size_t n = q.size(), d = q[0].size();
    Mat att(n, std::vector<double>(n));
    for (size_t r = 0; r < n; ++r) {
        double mx = -1e300;
        for (size_t c = 0; c < n; ++c) {
            double dot = 0;
            for (size_t i = 0; i < d; ++i) dot += q[r][i] * m[r] * k[c][i] * m[c];
            att[r][c] = dot / alpha;
            mx = std::max(mx, att[r][c]);
        }
        double s = 0;
        for (size_t c = 0; c < n; ++c) {
            att[r][c] = std::exp(att[r][c] - mx);
            s += att[r][c];
        }
        for (size_t c = 0; c < n; ++c) att[r][c] /= s;
    }
    Mat out(n, std::vector<double>(d, 0.0));
    for (size_t r = 0; r < n; ++r)
        for (size_t c = 0; c < n; ++c)
            for (size_t i = 0; i < d; ++i) out[r][i] += att[r][c] * v[c][i];
    return out;
}

// Sequential state recurrence, one explicit step at a time.
Mat naive_scan(const Mat& u, const Mat& delta, const Mat& a, const Mat& b, const Mat& c,
               const std::vector<double>& d) {
    const size_t L = u.size(), di = u[0].size(), ds = a[0].size();
    Mat y(L, std::vector<double>(di, 0.0));
    Mat h(di, std::vector<double>(ds, 0.0));
    for (size_t t = 0; t < L; ++t) {
        for (size_t i = 0; i < di; ++i) {
            double acc = 0;
            for (size_t n = 0; n < ds; ++n) {
                h[i][n] = std::exp(delta[t][i] * a[i][n]) * h[i][n] +
                          delta[t][i] * b[t][n] * u[t][i];
                acc += c[t][n] * h[i][n];
            }
            y[t][i] = acc + d[i] * u[t][i];
        }
    }
    return y;
}

Mat tokens_of(const Tensor<double>& chw) {
    const int c = chw.dim(0);
    const int64_t hw = static_cast<int64_t>(chw.dim(1)) * chw.dim(2);
    Mat t(static_cast<size_t>(hw), std::vector<double>(static_cast<size_t>(c)));
    for (int64_t p = 0; p < hw; ++p)
        for (int i = 0; i < c; ++i) t[static_cast<size_t>(p)][static_cast<size_t>(i)] = chw[i * hw + p];
    return t;
}

// Sequence orderings over an h x w grid for the four scan directions:
// entry p of the result is the row-major grid index visited at step p.
std::vector<int> scan_order(int h, int w, int dir) {
    std::vector<int> order;
    order.reserve(static_cast<size_t>(h) * w);
    if (dir < 2) {
        for (int p = 0; p < h * w; ++p) order.push_back(p);
    } else {
        for (int x = 0; x < w; ++x)
            for (int y = 0; y < h; ++y) order.push_back(y * w + x);
    }
    if (dir % 2 == 1) std::reverse(order.begin(), order.end());
    return order;
}

// Full four-direction oracle reading the module's parameters by name.
Tensor<double> naive_quad_scan(const Tensor<double>& x, ParamStore<double>& ps,
                               const std::string& prefix, int d_state, int dt_rank) {
    const int di = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor<double> sum({di, h, w});
    std::vector<Tensor<double>> outs;
    for (int dir = 0; dir < 4; ++dir) {
        const std::string p = prefix + ".dir" + std::to_string(dir) + ".";
        const auto& dt_w = ps.at(p + "dt_w").value;
        const auto& b_w = ps.at(p + "b_w").value;
        const auto& c_w = ps.at(p + "c_w").value;
        const auto& dtp_w = ps.at(p + "dtp.w").value;
        const auto& dtp_b = ps.at(p + "dtp.b").value;
        const auto& a_log = ps.at(p + "a_log").value;
        const auto& dsk = ps.at(p + "d").value;
        const auto order = scan_order(h, w, dir);
        const size_t L = order.size();
        Mat u(L, std::vector<double>(static_cast<size_t>(di)));
        for (size_t t = 0; t < L; ++t)
            for (int i = 0; i < di; ++i)
                u[t][static_cast<size_t>(i)] = x[i * hw + order[t]];
        Mat delta(L, std::vector<double>(static_cast<size_t>(di)));
        Mat b(L, std::vector<double>(static_cast<size_t>(d_state)));
        Mat c(L, std::vector<double>(static_cast<size_t>(d_state)));
        for (size_t t = 0; t < L; ++t) {
            std::vector<double> low(static_cast<size_t>(dt_rank), 0.0);
            for (int r = 0; r < dt_rank; ++r)
                for (int i = 0; i < di; ++i)
                    low[static_cast<size_t>(r)] += dt_w[r * di + i] * u[t][static_cast<size_t>(i)];
            for (int i = 0; i < di; ++i) {
                double acc = dtp_b[i];
                for (int r = 0; r < dt_rank; ++r)
                    acc += dtp_w[i * dt_rank + r] * low[static_cast<size_t>(r)];
                delta[t][static_cast<size_t>(i)] = std::log1p(std::exp(acc));
            }
            for (int n = 0; n < d_state; ++n) {
                double ab = 0, ac = 0;
                for (int i = 0; i < di; ++i) {
                    ab += b_w[n * di + i] * u[t][static_cast<size_t>(i)];
                    ac += c_w[n * di + i] * u[t][static_cast<size_t>(i)];
                }
                b[t][static_cast<size_t>(n)] = ab;
                c[t][static_cast<size_t>(n)] = ac;
            }
        }
        Mat a(static_cast<size_t>(di), std::vector<double>(static_cast<size_t>(d_state)));
        std::vector<double> dvec(static_cast<size_t>(di));
        for (int i = 0; i < di; ++i) {
            dvec[static_cast<size_t>(i)] = dsk[i];
            for (int n = 0; n < d_state; ++n)
                a[static_cast<size_t>(i)][static_cast<size_t>(n)] =
                    -std::exp(a_log[i * d_state + n]);
        }
        Mat y = naive_scan(u, delta, a, b, c, dvec);
        Tensor<double> out({di, h, w});
        for (size_t t = 0; t < L; ++t)
            for (int i = 0; i < di; ++i) out[i * hw + order[t]] = y[t][static_cast<size_t>(i)];
        outs.push_back(out);
    }
    for (int64_t i = 0; i < sum.numel(); ++i)
        sum[i] = (outs[0][i] + outs[1][i]) + (outs[2][i] + outs[3][i]);
    return sum;
}

// ---- fixtures --------------------------------------------------------------

Tensor<double> random_tensor(const std::vector<int>& dims, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
    Tensor<double> t(dims);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor<double> random_mask(int h, int w, Rng& rng) {
    Tensor<double> t({1, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(0.05, 0.95);
    return t;
}

void randomize_params(ParamStore<double>& ps, Rng& rng, double lo = -0.6, double hi = 0.6) {
    for (int64_t i = 0; i < ps.size(); ++i)
        for (int64_t j = 0; j < ps[i].value.numel(); ++j) ps[i].value[j] = rng.uniform(lo, hi);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.numel() == b.numel());
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("mask head") {
    SUBCASE("zero weights yield a perfectly undecided mask") {
        ParamStore<double> ps;
        Rng rng(1);
        MaskHead<double> head(ps, 8, rng, "mh");
        ps.zero_values_with_prefix("mh.");
        Graph<double> g(false);
        Rng irng(2);
        auto m = head.forward(g, g.input(random_tensor({8, 4, 4}, irng)));
        for (int64_t i = 0; i < g.val(m.m_c).numel(); ++i) {
            CHECK(g.val(m.m_c)[i] == 0.5);
            CHECK(g.val(m.m_uc)[i] == 0.5);
        }
    }
    SUBCASE("complement is exact for random features") {
        ParamStore<double> ps;
        Rng rng(3);
        MaskHead<double> head(ps, 8, rng, "mh");
        Graph<double> g(false);
        Rng irng(4);
        auto m = head.forward(g, g.input(random_tensor({8, 5, 7}, irng, -2.0, 2.0)));
        const auto& mc = g.val(m.m_c);
        const auto& muc = g.val(m.m_uc);
        for (int64_t i = 0; i < mc.numel(); ++i) {
            REQUIRE(muc[i] == 1.0 - mc[i]);
            CHECK(mc[i] > 0.0);
            CHECK(mc[i] < 1.0);
        }
    }
    SUBCASE("a strong positive bias saturates the mask") {
        ParamStore<double> ps;
        Rng rng(5);
        MaskHead<double> head(ps, 8, rng, "mh");
        ps.zero_values_with_prefix("mh.");
        ps.at("mh.b").value[0] = 10.0;
        Graph<double> g(false);
        Rng irng(6);
        auto m = head.forward(g, g.input(random_tensor({8, 4, 4}, irng)));
        for (int64_t i = 0; i < g.val(m.m_c).numel(); ++i) CHECK(g.val(m.m_c)[i] > 0.9999);
    }
    SUBCASE("wrong channel count is rejected") {
        ParamStore<double> ps;
        Rng rng(7);
        MaskHead<double> head(ps, 8, rng, "mh");
        Graph<double> g(false);
        CHECK_THROWS_AS(head.forward(g, g.input(Tensor<double>({4, 4, 4}))), ChannelMismatch);
    }
}

TEST_CASE("qkv projection") {
    SUBCASE("zero weights produce zero tokens") {
        ParamStore<double> ps;
        Rng rng(9);
        AttentionGuidedBlock<double> blk(ps, 8, 0, rng, "att");
        ps.zero_values_with_prefix("att.qkv.");
        Graph<double> g(false);
        Rng irng(10);
        auto t = blk.project_qkv(g, g.input(random_tensor({8, 3, 3}, irng)));
        for (auto v : {t.q, t.k, t.v})
            for (int64_t i = 0; i < g.val(v).numel(); ++i) CHECK(g.val(v)[i] == 0.0);
    }
    SUBCASE("a 128-channel 4x4 input flattens to three 16x128 token matrices") {
        ParamStore<double> ps;
        Rng rng(11);
        AttentionGuidedBlock<double> blk(ps, 128, 0, rng, "att");
        Graph<double> g(false);
        Rng irng(12);
        auto t = blk.project_qkv(g, g.input(random_tensor({128, 4, 4}, irng)));
        for (auto v : {t.q, t.k, t.v}) {
            CHECK(g.val(v).dim(0) == 16);
            CHECK(g.val(v).dim(1) == 128);
        }
    }
    SUBCASE("matches the per-pixel projection oracle") {
        ParamStore<double> ps;
        Rng rng(13);
        AttentionGuidedBlock<double> blk(ps, 6, 0, rng, "att");
        randomize_params(ps, rng);
        Rng irng(14);
        Tensor<double> f = random_tensor({6, 3, 3}, irng);
        Graph<double> g(false);
        auto t = blk.project_qkv(g, g.input(f));

        Tensor<double> n = naive_layer_norm(f, ps.at("att.ln1.gamma").value,
                                            ps.at("att.ln1.beta").value);
        Tensor<double> qkv = naive_conv(n, ps.at("att.qkv.pw").value, nullptr, 1, 0, 1);
        qkv = naive_conv(qkv, ps.at("att.qkv.dw").value, nullptr, 1, 1, 18);
        const int64_t hw = 9;
        double diff = 0;
        for (int part = 0; part < 3; ++part) {
            const auto& got = g.val(part == 0 ? t.q : part == 1 ? t.k : t.v);
            for (int64_t p = 0; p < hw; ++p)
                for (int i = 0; i < 6; ++i)
                    diff = std::max(diff, std::abs(got[p * 6 + i] -
                                                   qkv[(part * 6 + i) * hw + p]));
        }
        CHECK(diff < 1e-10);
    }
}

TEST_CASE("masked attention") {
    auto make_tokens = [](const Mat& m) {
        Tensor<double> t({static_cast<int>(m.size()), static_cast<int>(m[0].size())});
        for (size_t r = 0; r < m.size(); ++r)
            for (size_t c = 0; c < m[0].size(); ++c)
                t[static_cast<int64_t>(r * m[0].size() + c)] = m[r][c];
        return t;
    };
    SUBCASE("an all-ones mask reproduces unmasked attention") {
        Rng rng(15);
        Graph<double> g(false);
        Mat qm(6, std::vector<double>(4)), km = qm, vm = qm;
        for (auto* mp : {&qm, &km, &vm})
            for (auto& row : *mp)
                for (auto& x : row) x = rng.uniform(-1.0, 1.0);
        Tensor<double> ones({6});
        for (int i = 0; i < 6; ++i) ones[i] = 1.0;
        auto out = masked_attention(g, g.input(make_tokens(qm)), g.input(make_tokens(km)),
                                    g.input(make_tokens(vm)), g.input(ones),
                                    g.input([] { Tensor<double> a({1}); a[0] = 2.0; return a; }()));
        Mat want = naive_attention(qm, km, vm, std::vector<double>(6, 1.0), 2.0);
        double diff = 0;
        for (size_t r = 0; r < 6; ++r)
            for (size_t i = 0; i < 4; ++i)
                diff = std::max(diff, std::abs(g.val(out)[static_cast<int64_t>(r * 4 + i)] -
                                               want[r][i]));
        CHECK(diff < 1e-10);
    }
    SUBCASE("an all-zero mask collapses every row to the value mean") {
        Rng rng(17);
        Graph<double> g(false);
        Mat qm(5, std::vector<double>(3)), km = qm, vm = qm;
        for (auto* mp : {&qm, &km, &vm})
            for (auto& row : *mp)
                for (auto& x : row) x = rng.uniform(-2.0, 2.0);
        Tensor<double> zeros({5});
        auto out = masked_attention(g, g.input(make_tokens(qm)), g.input(make_tokens(km)),
                                    g.input(make_tokens(vm)), g.input(zeros),
                                    g.input([] { Tensor<double> a({1}); a[0] = 1.5; return a; }()));
        for (size_t i = 0; i < 3; ++i) {
            double mean = 0;
            for (size_t r = 0; r < 5; ++r) mean += vm[r][i];
            mean /= 5.0;
            for (size_t r = 0; r < 5; ++r)
                CHECK(std::abs(g.val(out)[static_cast<int64_t>(r * 3 + i)] - mean) < 1e-12);
        }
    }
    SUBCASE("hand-specified 2x2 grid with a half-dead mask matches the double loop") {
        Graph<double> g(false);
        Mat qm = {{1.0}, {-0.5}, {2.0}, {0.3}};
        Mat km = {{0.8}, {1.2}, {-0.7}, {0.4}};
        Mat vm = {{2.0}, {-1.0}, {0.5}, {3.0}};
        std::vector<double> m = {1.0, 1.0, 0.0, 0.0};
        Tensor<double> mt({4});
        for (int i = 0; i < 4; ++i) mt[i] = m[static_cast<size_t>(i)];
        auto out = masked_attention(g, g.input(make_tokens(qm)), g.input(make_tokens(km)),
                                    g.input(make_tokens(vm)), g.input(mt),
                                    g.input([] { Tensor<double> a({1}); a[0] = 1.0; return a; }()));
        Mat want = naive_attention(qm, km, vm, m, 1.0);
        for (size_t r = 0; r < 4; ++r)
            CHECK(std::abs(g.val(out)[static_cast<int64_t>(r)] - want[r][0]) < 1e-10);
    }
    SUBCASE("attention rows sum to one (identity values expose the matrix)") {
        Rng rng(19);
        Graph<double> g(false);
        Mat qm(4, std::vector<double>(4)), km = qm;
        for (auto* mp : {&qm, &km})
            for (auto& row : *mp)
                for (auto& x : row) x = rng.uniform(-1.5, 1.5);
        Tensor<double> eye({4, 4});
        for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
        Tensor<double> m({4});
        for (int i = 0; i < 4; ++i) m[i] = rng.uniform(0.0, 1.0);
        auto out = masked_attention(g, g.input(make_tokens(qm)), g.input(make_tokens(km)),
                                    g.input(eye), g.input(m),
                                    g.input([] { Tensor<double> a({1}); a[0] = 2.0; return a; }()));
        for (int r = 0; r < 4; ++r) {
            double s = 0;
            for (int c = 0; c < 4; ++c) {
                const double w = g.val(out)[r * 4 + c];
                CHECK(w >= 0.0);
                s += w;
            }
            CHECK(std::abs(s - 1.0) < 1e-10);
        }
    }
    SUBCASE("out-of-range masks and non-finite inputs are rejected") {
        Graph<double> g(false);
        Tensor<double> q({2, 2}), m({2}), alpha({1});
        alpha[0] = 1.0;
        m[0] = 1.5;
        CHECK_THROWS_AS(
            masked_attention(g, g.input(q), g.input(q), g.input(q), g.input(m), g.input(alpha)),
            MaskInconsistent);
        m[0] = 1.0;
        Tensor<double> bad({2, 2});
        bad[0] = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(masked_attention(g, g.input(bad), g.input(bad), g.input(q), g.input(m),
                                         g.input(alpha)),
                        NonFiniteAttention);
    }
}

TEST_CASE("attention-guided block") {
    SUBCASE("zeroed attention and feed-forward paths pass the feature through") {
        ParamStore<double> ps;
        Rng rng(21);
        AttentionGuidedBlock<double> blk(ps, 8, 0, rng, "att");
        ps.zero_values_with_prefix("att.qkv.");
        ps.zero_values_with_prefix("att.out.");
        ps.zero_values_with_prefix("att.ffn.");
        Graph<double> g(false);
        Rng irng(22);
        Tensor<double> f = random_tensor({8, 4, 4}, irng);
        auto y = blk.forward(g, g.input(f), g.input(random_mask(4, 4, irng)));
        for (int64_t i = 0; i < f.numel(); ++i) REQUIRE(g.val(y)[i] == f[i]);
    }
    SUBCASE("matches a fully naive recomputation") {
        ParamStore<double> ps;
        Rng rng(23);
        AttentionGuidedBlock<double> blk(ps, 6, 0, rng, "att");
        randomize_params(ps, rng, -0.4, 0.4);
        Rng irng(24);
        Tensor<double> f = random_tensor({6, 3, 3}, irng);
        Tensor<double> mask = random_mask(3, 3, irng);
        Graph<double> g(false);
        auto y = blk.forward(g, g.input(f), g.input(mask));

        Tensor<double> n = naive_layer_norm(f, ps.at("att.ln1.gamma").value,
                                            ps.at("att.ln1.beta").value);
        Tensor<double> qkv = naive_conv(n, ps.at("att.qkv.pw").value, nullptr, 1, 0, 1);
        qkv = naive_conv(qkv, ps.at("att.qkv.dw").value, nullptr, 1, 1, 18);
        const int64_t hw = 9;
        Mat qm(9, std::vector<double>(6)), km = qm, vm = qm;
        for (int64_t p = 0; p < hw; ++p)
            for (int i = 0; i < 6; ++i) {
                qm[static_cast<size_t>(p)][static_cast<size_t>(i)] = qkv[(0 * 6 + i) * hw + p];
                km[static_cast<size_t>(p)][static_cast<size_t>(i)] = qkv[(1 * 6 + i) * hw + p];
                vm[static_cast<size_t>(p)][static_cast<size_t>(i)] = qkv[(2 * 6 + i) * hw + p];
            }
        std::vector<double> mflat(9);
        for (int64_t p = 0; p < hw; ++p) mflat[static_cast<size_t>(p)] = mask[p];
        const double alpha = std::exp(ps.at("att.log_alpha").value[0]);
        Mat att = naive_attention(qm, km, vm, mflat, alpha);
        Tensor<double> att_chw({6, 3, 3});
        for (int64_t p = 0; p < hw; ++p)
            for (int i = 0; i < 6; ++i)
                att_chw[i * hw + p] = att[static_cast<size_t>(p)][static_cast<size_t>(i)];
        const Tensor<double> ob = ps.at("att.out.b").value;
        Tensor<double> proj = naive_conv(att_chw, ps.at("att.out.w").value, &ob, 1, 0, 1);
        Tensor<double> h({6, 3, 3});
        for (int64_t i = 0; i < h.numel(); ++i) h[i] = proj[i] + f[i];
        Tensor<double> n2 = naive_layer_norm(h, ps.at("att.ln2.gamma").value,
                                             ps.at("att.ln2.beta").value);
        const Tensor<double> b1 = ps.at("att.ffn.b1").value;
        Tensor<double> f1 = naive_conv(n2, ps.at("att.ffn.w1").value, &b1, 1, 0, 1);
        for (int64_t i = 0; i < f1.numel(); ++i) f1[i] = std::max(0.0, f1[i]);
        const Tensor<double> b2 = ps.at("att.ffn.b2").value;
        Tensor<double> f2 = naive_conv(f1, ps.at("att.ffn.w2").value, &b2, 1, 0, 1);
        Tensor<double> want({6, 3, 3});
        for (int64_t i = 0; i < want.numel(); ++i) want[i] = f2[i] + h[i];
        CHECK(max_abs_diff(g.val(y), want) < 1e-10);
    }
    SUBCASE("gradients agree with finite differences") {
        ParamStore<double> ps;
        Rng rng(25);
        AttentionGuidedBlock<double> blk(ps, 4, 8, rng, "att");
        Rng prng(26);
        ParamTensor<double>& fx = ps.create("fx", {4, 3, 3}, Init::custom, prng);
        for (int64_t i = 0; i < fx.value.numel(); ++i) fx.value[i] = prng.uniform(-1.0, 1.0);
        Tensor<double> mask = random_mask(3, 3, prng);
        Tensor<double> probe = random_tensor({4, 3, 3}, prng);
        auto fn = [&](bool with_grad) {
            Graph<double> g(with_grad);
            auto y = blk.forward(g, g.param(fx), g.input(mask));
            auto loss = g.sum_all(g.mul(y, g.input(probe)));
            if (with_grad) g.backward(loss);
            return g.val(loss)[0];
        };
        GradCheckReport rep = check_gradients(ps, fn, 1e-6, 6);
        INFO(rep.to_string());
        CHECK(rep.ok(1e-4));
    }
}

TEST_CASE("selective scan recurrence") {
    Rng rng(27);
    SUBCASE("single step closed form") {
        Graph<double> g(false);
        const int di = 3, ds = 2;
        Tensor<double> u({1, di}), delta({1, di}), a({di, ds}), b({1, ds}), c({1, ds}), d({di});
        for (int i = 0; i < di; ++i) {
            u[i] = rng.uniform(-1.0, 1.0);
            delta[i] = rng.uniform(0.1, 0.9);
            d[i] = rng.uniform(-1.0, 1.0);
            for (int n = 0; n < ds; ++n) a[i * ds + n] = rng.uniform(-2.0, -0.2);
        }
        for (int n = 0; n < ds; ++n) {
            b[n] = rng.uniform(-1.0, 1.0);
            c[n] = rng.uniform(-1.0, 1.0);
        }
        auto y = g.selective_scan(g.input(u), g.input(delta), g.input(a), g.input(b), g.input(c),
                                  g.input(d));
        for (int i = 0; i < di; ++i) {
            double acc = d[i] * u[i];
            for (int n = 0; n < ds; ++n) acc += c[n] * (delta[i] * b[n] * u[i]);
            CHECK(std::abs(g.val(y)[i] - acc) < 1e-12);
        }
    }
    SUBCASE("a hugely negative state matrix forgets instantly") {
        Graph<double> g(false);
        const int L = 5, di = 2, ds = 2;
        Tensor<double> u({L, di}), delta({L, di}), a({di, ds}), b({L, ds}), c({L, ds}), d({di});
        for (int64_t i = 0; i < u.numel(); ++i) {
            u[i] = rng.uniform(-1.0, 1.0);
            delta[i] = rng.uniform(0.5, 1.0);
        }
        for (int64_t i = 0; i < b.numel(); ++i) {
            b[i] = rng.uniform(-1.0, 1.0);
            c[i] = rng.uniform(-1.0, 1.0);
        }
        for (int64_t i = 0; i < a.numel(); ++i) a[i] = -1e5;
        for (int i = 0; i < di; ++i) d[i] = rng.uniform(-1.0, 1.0);
        auto y = g.selective_scan(g.input(u), g.input(delta), g.input(a), g.input(b), g.input(c),
                                  g.input(d));
        for (int t = 0; t < L; ++t)
            for (int i = 0; i < di; ++i) {
                double acc = d[i] * u[t * di + i];
                for (int n = 0; n < ds; ++n)
                    acc += c[t * ds + n] * (delta[t * di + i] * b[t * ds + n] * u[t * di + i]);
                CHECK(std::abs(g.val(y)[t * di + i] - acc) < 1e-12);
            }
    }
    SUBCASE("length-8 sequence matches the sequential oracle") {
        Graph<double> g(false);
        const int L = 8, di = 4, ds = 3;
        Mat um(L, std::vector<double>(di)), dm(L, std::vector<double>(di));
        Mat am(di, std::vector<double>(ds));
        Mat bm(L, std::vector<double>(ds)), cm(L, std::vector<double>(ds));
        std::vector<double> dv(di);
        Tensor<double> u({L, di}), delta({L, di}), a({di, ds}), b({L, ds}), c({L, ds}), d({di});
        for (int t = 0; t < L; ++t)
            for (int i = 0; i < di; ++i) {
                um[t][i] = u[t * di + i] = rng.uniform(-1.0, 1.0);
                dm[t][i] = delta[t * di + i] = rng.uniform(0.05, 0.95);
            }
        for (int i = 0; i < di; ++i) {
            dv[i] = d[i] = rng.uniform(-1.0, 1.0);
            for (int n = 0; n < ds; ++n) am[i][n] = a[i * ds + n] = rng.uniform(-2.0, -0.1);
        }
        for (int t = 0; t < L; ++t)
            for (int n = 0; n < ds; ++n) {
                bm[t][n] = b[t * ds + n] = rng.uniform(-1.0, 1.0);
                cm[t][n] = c[t * ds + n] = rng.uniform(-1.0, 1.0);
            }
        auto y = g.selective_scan(g.input(u), g.input(delta), g.input(a), g.input(b), g.input(c),
                                  g.input(d));
        Mat want = naive_scan(um, dm, am, bm, cm, dv);
        double diff = 0;
        for (int t = 0; t < L; ++t)
            for (int i = 0; i < di; ++i)
                diff = std::max(diff, std::abs(g.val(y)[t * di + i] - want[t][i]));
        CHECK(diff < 1e-10);
    }
}

TEST_CASE("four-direction grid scan") {
    SUBCASE("degenerate 1x1 grid sums four single-step scans") {
        ParamStore<double> ps;
        Rng rng(29);
        QuadScan2d<double> scan(ps, 4, 3, rng, "qs");
        randomize_params(ps, rng);
        Rng irng(30);
        Tensor<double> x = random_tensor({4, 1, 1}, irng);
        Graph<double> g(false);
        auto y = scan.forward(g, g.input(x));
        Tensor<double> want = naive_quad_scan(x, ps, "qs", 3, scan.dt_rank());
        CHECK(max_abs_diff(g.val(y), want) < 1e-12);
    }
    SUBCASE("4x4 grid matches the per-direction sequential oracle") {
        ParamStore<double> ps;
        Rng rng(31);
        QuadScan2d<double> scan(ps, 6, 3, rng, "qs");
        randomize_params(ps, rng);
        Rng irng(32);
        Tensor<double> x = random_tensor({6, 4, 4}, irng);
        Graph<double> g(false);
        auto y = scan.forward(g, g.input(x));
        Tensor<double> want = naive_quad_scan(x, ps, "qs", 3, scan.dt_rank());
        CHECK(max_abs_diff(g.val(y), want) < 1e-10);
    }
    SUBCASE("8x8 grid matches the sequential oracle") {
        ParamStore<double> ps;
        Rng rng(33);
        QuadScan2d<double> scan(ps, 4, 2, rng, "qs");
        randomize_params(ps, rng);
        Rng irng(34);
        Tensor<double> x = random_tensor({4, 8, 8}, irng);
        Graph<double> g(false);
        auto y = scan.forward(g, g.input(x));
        Tensor<double> want = naive_quad_scan(x, ps, "qs", 2, scan.dt_rank());
        CHECK(max_abs_diff(g.val(y), want) < 1e-10);
    }
    SUBCASE("flipping a single-row input while swapping direction parameters flips the output") {
        ParamStore<double> ps;
        Rng rng(35);
        QuadScan2d<double> sa(ps, 4, 2, rng, "a");
        QuadScan2d<double> sb(ps, 4, 2, rng, "b");
        randomize_params(ps, rng);
        // b gets a's parameters with the forward/reverse roles exchanged.
        const std::array<std::pair<int, int>, 4> swap = {{{0, 1}, {1, 0}, {2, 3}, {3, 2}}};
        for (const auto& [dst, src] : swap)
            for (const char* leaf : {"dt_w", "b_w", "c_w", "dtp.w", "dtp.b", "a_log", "d"}) {
                auto& to = ps.at("b.dir" + std::to_string(dst) + "." + leaf).value;
                const auto& from = ps.at("a.dir" + std::to_string(src) + "." + leaf).value;
                for (int64_t i = 0; i < to.numel(); ++i) to[i] = from[i];
            }
        Rng irng(36);
        const int w = 6;
        Tensor<double> x = random_tensor({4, 1, w}, irng);
        Tensor<double> xf({4, 1, w});
        for (int ch = 0; ch < 4; ++ch)
            for (int j = 0; j < w; ++j) xf[ch * w + j] = x[ch * w + (w - 1 - j)];
        Graph<double> g(false);
        auto ya = sa.forward(g, g.input(x));
        auto yb = sb.forward(g, g.input(xf));
        for (int ch = 0; ch < 4; ++ch)
            for (int j = 0; j < w; ++j)
                REQUIRE(g.val(yb)[ch * w + j] == g.val(ya)[ch * w + (w - 1 - j)]);
    }
}

TEST_CASE("state-space guided block") {
    SUBCASE("a zeroed output path passes the feature through") {
        ParamStore<double> ps;
        Rng rng(37);
        SsmGuidedBlock<double> blk(ps, 8, 4, 0, rng, "ssm");
        ps.zero_values_with_prefix("ssm.out.");
        ps.zero_values_with_prefix("ssm.ffn.");
        Graph<double> g(false);
        Rng irng(38);
        Tensor<double> f = random_tensor({8, 4, 4}, irng);
        auto y = blk.forward(g, g.input(f), g.input(random_mask(4, 4, irng)));
        for (int64_t i = 0; i < f.numel(); ++i) REQUIRE(g.val(y)[i] == f[i]);
    }
    SUBCASE("an all-zero mask with zero biases contributes nothing") {
        ParamStore<double> ps;
        Rng rng(39);
        SsmGuidedBlock<double> blk(ps, 8, 4, 0, rng, "ssm");
        // Keep every multiplicative weight random; kill the additive paths
        // that could leak a constant, plus the final refinement.
        for (const char* leaf : {"in.b", "dw.b", "gate.b", "out.b"})
            for (int64_t i = 0; i < ps.at(std::string("ssm.") + leaf).value.numel(); ++i)
                ps.at(std::string("ssm.") + leaf).value[i] = 0.0;
        for (int dir = 0; dir < 4; ++dir) {
            auto& dtb = ps.at("ssm.scan.dir" + std::to_string(dir) + ".dtp.b").value;
            for (int64_t i = 0; i < dtb.numel(); ++i) dtb[i] = 0.0;
        }
        ps.zero_values_with_prefix("ssm.ffn.");
        Graph<double> g(false);
        Rng irng(40);
        Tensor<double> f = random_tensor({8, 4, 4}, irng);
        Tensor<double> zero_mask({1, 4, 4});
        auto y = blk.forward(g, g.input(f), g.input(zero_mask));
        for (int64_t i = 0; i < f.numel(); ++i) REQUIRE(g.val(y)[i] == f[i]);
    }
    SUBCASE("gradients agree with finite differences") {
        ParamStore<double> ps;
        Rng rng(41);
        SsmGuidedBlock<double> blk(ps, 4, 2, 0, rng, "ssm");
        Rng prng(42);
        ParamTensor<double>& fx = ps.create("fx", {4, 3, 3}, Init::custom, prng);
        for (int64_t i = 0; i < fx.value.numel(); ++i) fx.value[i] = prng.uniform(-1.0, 1.0);
        Tensor<double> mask = random_mask(3, 3, prng);
        Tensor<double> probe = random_tensor({4, 3, 3}, prng);
        auto fn = [&](bool with_grad) {
            Graph<double> g(with_grad);
            auto y = blk.forward(g, g.param(fx), g.input(mask));
            auto loss = g.sum_all(g.mul(y, g.input(probe)));
            if (with_grad) g.backward(loss);
            return g.val(loss)[0];
        };
        // Step large enough to keep central-difference roundoff noise well
        // below the smallest state-matrix gradients.
        GradCheckReport rep = check_gradients(ps, fn, 1e-5, 4);
        INFO(rep.to_string());
        CHECK(rep.ok(1e-4));
    }
}

TEST_CASE("decode stage") {
    auto make_state = [](Graph<double>& g, const Tensor<double>& f_pre,
                         const Tensor<double>& m_c) {
        DecodeState<double> st;
        st.f_pre = g.input(f_pre);
        st.masks.m_c = g.input(m_c);
        st.masks.m_uc = g.complement_one(st.masks.m_c);
        return st;
    };
    SUBCASE("zeroed guided blocks degenerate to a predictable fusion") {
        ParamStore<double> ps;
        Rng rng(43);
        DecodeStageConfig sc;
        sc.in_channels = 12;
        sc.dim = 8;
        sc.variant = FbgVariant::attention;
        GuidedDecodeStage<double> stage(ps, sc, rng, "st");
        for (const char* sub : {"st.fg.qkv.", "st.fg.out.", "st.fg.ffn.", "st.bg.qkv.",
                                "st.bg.out.", "st.bg.ffn."})
            ps.zero_values_with_prefix(sub);
        ps.zero_values_with_prefix("st.head.");
        Rng irng(44);
        Tensor<double> f_out = random_tensor({12, 4, 4}, irng);
        Tensor<double> f_pre = random_tensor({8, 2, 2}, irng);
        Tensor<double> m_c = random_mask(2, 2, irng);

        Graph<double> g(false);
        auto st = make_state(g, f_pre, m_c);
        auto out = stage.forward(g, g.input(f_out), st);
        // Expected: conv3x3(2 * proj(f_out) + up(f_pre)), masks all 0.5.
        Graph<double> h(false);
        auto proj = h.conv2d(h.input(f_out), h.input(ps.at("st.proj.w").value),
                             h.input(ps.at("st.proj.b").value), ConvSpec{1, 0, 1});
        auto want = h.conv2d(
            h.add(h.add(proj, proj), h.upsample_bilinear(h.input(f_pre), 2)),
            h.input(ps.at("st.fuse.w").value), h.input(ps.at("st.fuse.b").value),
            ConvSpec{1, 1, 1});
        CHECK(max_abs_diff(g.val(out.f_pre), h.val(want)) < 1e-12);
        for (int64_t i = 0; i < g.val(out.masks.m_c).numel(); ++i)
            CHECK(g.val(out.masks.m_c)[i] == 0.5);
    }
    SUBCASE("resolution doubles when the state is one level coarser") {
        for (FbgVariant variant : {FbgVariant::attention, FbgVariant::ssm}) {
            ParamStore<double> ps;
            Rng rng(45);
            DecodeStageConfig sc;
            sc.in_channels = 6;
            sc.dim = 4;
            sc.ssm_state_dim = 2;
            sc.variant = variant;
            GuidedDecodeStage<double> stage(ps, sc, rng, "st");
            Rng irng(46);
            Graph<double> g(false);
            auto st = make_state(g, random_tensor({4, 4, 4}, irng), random_mask(4, 4, irng));
            auto out = stage.forward(g, g.input(random_tensor({6, 8, 8}, irng)), st);
            CHECK(g.val(out.f_pre).dim(1) == 8);
            CHECK(g.val(out.f_pre).dim(2) == 8);
            CHECK(g.val(out.masks.m_c).dim(1) == 8);
            // complement stays exact through upsampling and refresh
            const auto& mc = g.val(out.masks.m_c);
            const auto& muc = g.val(out.masks.m_uc);
            for (int64_t i = 0; i < mc.numel(); ++i) {
                REQUIRE(muc[i] == 1.0 - mc[i]);
                REQUIRE(mc[i] > 0.0);
                REQUIRE(mc[i] < 1.0);
            }
        }
    }
    SUBCASE("a finer state than the input is rejected") {
        ParamStore<double> ps;
        Rng rng(47);
        DecodeStageConfig sc;
        sc.in_channels = 6;
        sc.dim = 4;
        sc.ssm_state_dim = 2;
        GuidedDecodeStage<double> stage(ps, sc, rng, "st");
        Rng irng(48);
        Graph<double> g(false);
        auto st = make_state(g, random_tensor({4, 8, 8}, irng), random_mask(8, 8, irng));
        CHECK_THROWS_AS(stage.forward(g, g.input(random_tensor({6, 4, 4}, irng)), st),
                        ShapeMismatch);
    }
    SUBCASE("disabling the complement branch changes the output") {
        ParamStore<double> ps_on;
        Rng rng_on(49);
        DecodeStageConfig sc;
        sc.in_channels = 6;
        sc.dim = 4;
        sc.ssm_state_dim = 2;
        GuidedDecodeStage<double> with_bg(ps_on, sc, rng_on, "st");
        randomize_params(ps_on, rng_on);
        ParamStore<double> ps_off;
        Rng rng_off(49);
        sc.bg_branch = false;
        GuidedDecodeStage<double> without_bg(ps_off, sc, rng_off, "st");
        // share every weight the two variants have in common
        for (int64_t i = 0; i < ps_off.size(); ++i) {
            ParamTensor<double>* src = ps_on.find(ps_off[i].name);
            REQUIRE(src != nullptr);
            for (int64_t j = 0; j < ps_off[i].value.numel(); ++j)
                ps_off[i].value[j] = src->value[j];
        }
        Rng irng(50);
        Tensor<double> f_out = random_tensor({6, 4, 4}, irng);
        Tensor<double> f_pre = random_tensor({4, 2, 2}, irng);
        Tensor<double> m_c = random_mask(2, 2, irng);
        Graph<double> ga(false);
        auto oa = with_bg.forward(ga, ga.input(f_out), make_state(ga, f_pre, m_c));
        Graph<double> gb(false);
        auto ob = without_bg.forward(gb, gb.input(f_out), make_state(gb, f_pre, m_c));
        CHECK(max_abs_diff(ga.val(oa.f_pre), gb.val(ob.f_pre)) > 1e-6);
    }
    SUBCASE("gradients flow through a full step in both variants") {
        for (FbgVariant variant : {FbgVariant::attention, FbgVariant::ssm}) {
            ParamStore<double> ps;
            Rng rng(51);
            DecodeStageConfig sc;
            sc.in_channels = 6;
            sc.dim = 4;
            sc.ssm_state_dim = 2;
            sc.variant = variant;
            GuidedDecodeStage<double> stage(ps, sc, rng, "st");
            Rng prng(52);
            ParamTensor<double>& fo = ps.create("fo", {6, 4, 4}, Init::custom, prng);
            ParamTensor<double>& fp = ps.create("fp", {4, 2, 2}, Init::custom, prng);
            ParamTensor<double>& ml = ps.create("ml", {1, 2, 2}, Init::custom, prng);
            for (auto* p : {&fo, &fp, &ml})
                for (int64_t i = 0; i < p->value.numel(); ++i)
                    p->value[i] = prng.uniform(-1.0, 1.0);
            Tensor<double> probe = random_tensor({4, 4, 4}, prng);
            Tensor<double> mask_probe = random_tensor({1, 4, 4}, prng);
            auto fn = [&](bool with_grad) {
                Graph<double> g(with_grad);
                DecodeState<double> st;
                st.f_pre = g.param(fp);
                st.masks.m_c = g.sigmoid(g.param(ml));
                st.masks.m_uc = g.complement_one(st.masks.m_c);
                auto out = stage.forward(g, g.param(fo), st);
                auto loss = g.add(g.sum_all(g.mul(out.f_pre, g.input(probe))),
                                  g.sum_all(g.mul(out.masks.m_c, g.input(mask_probe))));
                if (with_grad) g.backward(loss);
                return g.val(loss)[0];
            };
            GradCheckReport rep = check_gradients(ps, fn, 1e-5, 3);
            INFO(rep.to_string());
            CHECK(rep.ok(1e-4));
        }
    }
}

TEST_CASE("full cascade") {
    FoBaConfig cfg;
    cfg.encoder_dims = {8, 8, 8, 8};
    cfg.gif_dims = {8, 8, 8, 8};
    cfg.fbg_dim = 8;
    cfg.ssm_state_dim = 2;
    Rng irng(54);
    std::array<Tensor<double>, 4> feats = {
        random_tensor({16, 16, 16}, irng), random_tensor({16, 8, 8}, irng),
        random_tensor({16, 4, 4}, irng), random_tensor({16, 2, 2}, irng)};

    for (FbgVariant variant : {FbgVariant::attention, FbgVariant::ssm}) {
        cfg.fbg_variant = variant;
        ParamStore<double> ps;
        Rng rng(53);
        GuidedDecoder<double> dec(ps, cfg, rng);

        auto run = [&](Graph<double>& g) {
            std::array<Graph<double>::V, 4> nodes;
            for (int i = 0; i < 4; ++i)
                nodes[static_cast<size_t>(i)] = g.input(feats[static_cast<size_t>(i)]);
            return dec.forward(g, nodes);
        };
        Graph<double> ga(false);
        auto ra = run(ga);
        REQUIRE(ra.masks.size() == 4);
        const std::array<int, 4> want_res = {2, 4, 8, 16};
        for (int i = 0; i < 4; ++i) {
            const auto& m = ga.val(ra.masks[static_cast<size_t>(i)].m_c);
            CHECK(m.dim(1) == want_res[static_cast<size_t>(i)]);
            CHECK(m.dim(2) == want_res[static_cast<size_t>(i)]);
            const auto& mu = ga.val(ra.masks[static_cast<size_t>(i)].m_uc);
            for (int64_t j = 0; j < m.numel(); ++j) REQUIRE(mu[j] == 1.0 - m[j]);
        }
        CHECK(ga.val(ra.final_state.f_pre).dim(0) == 8);
        CHECK(ga.val(ra.final_state.f_pre).dim(1) == 16);

        // determinism: a second independent evaluation is bit-identical
        Graph<double> gb(false);
        auto rb = run(gb);
        for (int i = 0; i < 4; ++i) {
            const auto& ma = ga.val(ra.masks[static_cast<size_t>(i)].m_c);
            const auto& mb = gb.val(rb.masks[static_cast<size_t>(i)].m_c);
            for (int64_t j = 0; j < ma.numel(); ++j) REQUIRE(ma[j] == mb[j]);
        }
        const auto& fa = ga.val(ra.final_state.f_pre);
        const auto& fb = gb.val(rb.final_state.f_pre);
        for (int64_t j = 0; j < fa.numel(); ++j) REQUIRE(fa[j] == fb[j]);
    }
}
