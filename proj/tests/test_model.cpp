#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "foba/errors.hpp"
#include "foba/gif.hpp"
#include "foba/grad_check.hpp"
#include "foba/graph.hpp"
#include "foba/model.hpp"
#include "foba/rng.hpp"

using namespace foba;

namespace {

template <typename T>
Tensor<T> random_image(int c, int h, int w, Rng& rng) {
    Tensor<T> t({c, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(0.0, 1.0));
    return t;
}

FoBaConfig tiny_config() {
    FoBaConfig cfg;
    cfg.n_classes = 2;
    cfg.encoder_dims = {4, 4, 4, 4};
    cfg.gif_dims = {4, 4, 4, 4};
    cfg.fbg_dim = 4;
    cfg.ssm_state_dim = 2;
    cfg.gn_groups = 2;
    cfg.bottleneck_ratio = 2;
    cfg.seed = 11;
    return cfg;
}

// Label maps recomputed pixel by pixel, straight from the decision rule.
void oracle_predict(const Tensor<double>& bcd, const Tensor<double>& scd1,
                    const Tensor<double>& scd2, bool gate, Tensor<uint8_t>& change,
                    Tensor<int32_t>& sem1, Tensor<int32_t>& sem2) {
    const int h = bcd.dim(1), w = bcd.dim(2);
    const int classes = scd1.dim(0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double c0 = bcd[static_cast<int64_t>(0) * h * w + y * w + x];
            const double c1 = bcd[static_cast<int64_t>(1) * h * w + y * w + x];
            const int ch = c1 > c0 ? 1 : 0;
            change[y * w + x] = static_cast<uint8_t>(ch);
            const Tensor<double>* heads[2] = {&scd1, &scd2};
            Tensor<int32_t>* maps[2] = {&sem1, &sem2};
            for (int k = 0; k < 2; ++k) {
                if (gate && ch == 0) {
                    (*maps[k])[y * w + x] = 0;
                    continue;
                }
                int best = gate ? 1 : 0;
                for (int c = best + 1; c < classes; ++c)
                    if ((*heads[k])[static_cast<int64_t>(c) * h * w + y * w + x] >
                        (*heads[k])[static_cast<int64_t>(best) * h * w + y * w + x])
                        best = c;
                (*maps[k])[y * w + x] = best;
            }
        }
}

}  // namespace

TEST_CASE("forward shape contract") {
    FoBaConfig cfg = FoBaConfig::desk();
    FoBaModel<float> model(cfg);
    Rng rng(21);
    Tensor<float> t1 = random_image<float>(3, 64, 64, rng);
    Tensor<float> t2 = random_image<float>(3, 64, 64, rng);
    Graph<float> g(false);
    auto out = model.forward(g, t1, t2);

    CHECK(g.val(out.bcd_logits).dims() == std::vector<int>{2, 64, 64});
    CHECK(g.val(out.scd1_logits).dims() == std::vector<int>{5, 64, 64});
    CHECK(g.val(out.scd2_logits).dims() == std::vector<int>{5, 64, 64});
    REQUIRE(out.stage_masks.size() == 4);
    const std::array<int, 4> res = {2, 4, 8, 16};
    for (size_t i = 0; i < 4; ++i) {
        const auto& m = g.val(out.stage_masks[i]);
        CHECK(m.dims() == std::vector<int>{1, res[i], res[i]});
        for (int64_t j = 0; j < m.numel(); ++j) {
            REQUIRE(m[j] > 0.0f);
            REQUIRE(m[j] < 1.0f);
        }
    }
    // everything stays finite for inputs in the unit interval
    for (auto v : {out.bcd_logits, out.scd1_logits, out.scd2_logits})
        CHECK(all_finite(g.val(v)));

    // swapping the dates only re-targets the semantic heads; shapes hold
    Graph<float> g2(false);
    auto swapped = model.forward(g2, t2, t1);
    CHECK(g2.val(swapped.bcd_logits).dims() == std::vector<int>{2, 64, 64});
    CHECK(g2.val(swapped.scd1_logits).dims() == std::vector<int>{5, 64, 64});

    Graph<float> g3(false);
    CHECK_THROWS_AS(model.forward(g3, t1, random_image<float>(3, 32, 32, rng)),
                    ShapeMismatch);
}

TEST_CASE("same seed, same bits") {
    FoBaConfig cfg = tiny_config();
    FoBaModel<double> a(cfg);
    FoBaModel<double> b(cfg);
    REQUIRE(a.count_params() == b.count_params());
    for (size_t i = 0; i < a.params().size(); ++i) {
        REQUIRE(a.params()[i].name == b.params()[i].name);
        for (int64_t j = 0; j < a.params()[i].value.numel(); ++j)
            REQUIRE(a.params()[i].value[j] == b.params()[i].value[j]);
    }
    Rng rng(31);
    Tensor<double> t1 = random_image<double>(3, 32, 32, rng);
    Tensor<double> t2 = random_image<double>(3, 32, 32, rng);
    Graph<double> ga(false), gb(false);
    auto oa = a.forward(ga, t1, t2);
    auto ob = b.forward(gb, t1, t2);
    for (int64_t j = 0; j < ga.val(oa.bcd_logits).numel(); ++j)
        REQUIRE(ga.val(oa.bcd_logits)[j] == gb.val(ob.bcd_logits)[j]);
    for (int64_t j = 0; j < ga.val(oa.scd1_logits).numel(); ++j)
        REQUIRE(ga.val(oa.scd1_logits)[j] == gb.val(ob.scd1_logits)[j]);

    FoBaConfig other = cfg;
    other.seed = 12;
    FoBaModel<double> c(other);
    bool any_diff = false;
    for (size_t i = 0; i < a.params().size() && !any_diff; ++i)
        for (int64_t j = 0; j < a.params()[i].value.numel(); ++j)
            if (a.params()[i].value[j] != c.params()[i].value[j]) {
                any_diff = true;
                break;
            }
    CHECK(any_diff);
}

TEST_CASE("disabled interaction equals plain concatenation") {
    FoBaConfig cfg = tiny_config();
    cfg.gif_enabled = {false, false, false, false};
    FoBaModel<double> model(cfg);
    // no gated-interaction weights exist in this configuration
    for (size_t i = 0; i < model.params().size(); ++i)
        CHECK(model.params()[i].name.rfind("gif.", 0) != 0);

    Rng rng(41);
    Tensor<double> t1 = random_image<double>(3, 32, 32, rng);
    Tensor<double> t2 = random_image<double>(3, 32, 32, rng);
    Graph<double> g(false);
    auto out = model.forward(g, t1, t2);

    // the same pipeline, composed by hand around the model's own weights
    Graph<double> h(false);
    auto e1 = model.encoder().encode(h, h.input(t1));
    auto e2 = model.encoder().encode(h, h.input(t2));
    std::array<Graph<double>::V, 4> fused;
    for (size_t s = 0; s < 4; ++s) fused[s] = fusion_bypass(h, e1[s], e2[s]);
    auto dec = model.decoder().forward(h, fused);
    auto head = [&](const char* name) {
        return h.upsample_bilinear(
            h.conv2d(dec.final_state.f_pre,
                     h.param(model.params().at(std::string(name) + ".w")),
                     h.param(model.params().at(std::string(name) + ".b")), ConvSpec{1, 0, 1}),
            4);
    };
    auto want_bcd = head("head.bcd");
    auto want_scd1 = head("head.scd1");
    auto want_scd2 = head("head.scd2");
    for (int64_t j = 0; j < g.val(out.bcd_logits).numel(); ++j)
        REQUIRE(g.val(out.bcd_logits)[j] == h.val(want_bcd)[j]);
    for (int64_t j = 0; j < g.val(out.scd1_logits).numel(); ++j) {
        REQUIRE(g.val(out.scd1_logits)[j] == h.val(want_scd1)[j]);
        REQUIRE(g.val(out.scd2_logits)[j] == h.val(want_scd2)[j]);
    }
}

TEST_CASE("label map extraction") {
    SUBCASE("no change anywhere silences both semantic maps") {
        Tensor<double> bcd({2, 2, 2});
        for (int p = 0; p < 4; ++p) {
            bcd[p] = 5.0;       // background logit wins everywhere
            bcd[4 + p] = -1.0;
        }
        Tensor<double> scd({4, 2, 2});
        for (int64_t i = 0; i < scd.numel(); ++i) scd[i] = 9.0;  // irrelevant
        auto pm = predict(bcd, scd, scd);
        for (int p = 0; p < 4; ++p) {
            CHECK(pm.change[p] == 0);
            CHECK(pm.sem1[p] == 0);
            CHECK(pm.sem2[p] == 0);
        }
    }
    SUBCASE("a changed pixel takes the best non-background class") {
        Tensor<double> bcd({2, 1, 2});
        bcd[0] = 0.0;
        bcd[1] = 1.0;  // pixel 1 unchanged (tie at pixel 0? no: set below)
        bcd[2] = 3.0;  // change logit for pixel 0
        bcd[3] = 1.0;  // tie at pixel 1 -> unchanged
        Tensor<double> scd1({4, 1, 2});
        // pixel 0: class 3 peaks; class 0 even higher but must be ignored
        scd1[0 * 2 + 0] = 50.0;
        scd1[1 * 2 + 0] = 0.1;
        scd1[2 * 2 + 0] = 0.2;
        scd1[3 * 2 + 0] = 4.0;
        Tensor<double> scd2({4, 1, 2});
        scd2[1 * 2 + 0] = 2.0;
        auto pm = predict(bcd, scd1, scd2);
        CHECK(pm.change[0] == 1);
        CHECK(pm.change[1] == 0);  // exact tie resolves to the first channel
        CHECK(pm.sem1[0] == 3);
        CHECK(pm.sem2[0] == 1);
        CHECK(pm.sem1[1] == 0);
        CHECK(pm.sem2[1] == 0);
    }
    SUBCASE("without gating the maps are the raw argmax") {
        Tensor<double> bcd({2, 1, 1});
        bcd[0] = 10.0;  // unchanged
        Tensor<double> scd1({3, 1, 1});
        scd1[0] = 1.0;
        scd1[1] = 5.0;
        scd1[2] = 2.0;
        Tensor<double> scd2({3, 1, 1});
        scd2[0] = 7.0;
        scd2[1] = 5.0;
        scd2[2] = 2.0;
        auto pm = predict(bcd, scd1, scd2, false);
        CHECK(pm.change[0] == 0);
        CHECK(pm.sem1[0] == 1);  // ungated: class 1 wins outright
        CHECK(pm.sem2[0] == 0);  // ungated: background may win
    }
    SUBCASE("random logits agree with the per-pixel loop exactly") {
        Rng rng(51);
        const int h = 5, w = 7, classes = 5;
        Tensor<double> bcd({2, h, w}), scd1({classes, h, w}), scd2({classes, h, w});
        for (int64_t i = 0; i < bcd.numel(); ++i) bcd[i] = rng.uniform(-3.0, 3.0);
        for (int64_t i = 0; i < scd1.numel(); ++i) scd1[i] = rng.uniform(-3.0, 3.0);
        for (int64_t i = 0; i < scd2.numel(); ++i) scd2[i] = rng.uniform(-3.0, 3.0);
        for (bool gate : {true, false}) {
            auto pm = predict(bcd, scd1, scd2, gate);
            Tensor<uint8_t> change({h, w});
            Tensor<int32_t> sem1({h, w}), sem2({h, w});
            oracle_predict(bcd, scd1, scd2, gate, change, sem1, sem2);
            for (int64_t p = 0; p < static_cast<int64_t>(h) * w; ++p) {
                REQUIRE(pm.change[p] == change[p]);
                REQUIRE(pm.sem1[p] == sem1[p]);
                REQUIRE(pm.sem2[p] == sem2[p]);
            }
            if (gate)
                for (int64_t p = 0; p < static_cast<int64_t>(h) * w; ++p)
                    if (pm.change[p] == 0) {
                        REQUIRE(pm.sem1[p] == 0);
                        REQUIRE(pm.sem2[p] == 0);
                    }
        }
        CHECK_THROWS_AS(predict(scd1, scd1, scd2), ShapeMismatch);
    }
}

TEST_CASE("parameter count matches independent bookkeeping") {
    // Helpers are plain arithmetic over layer shapes.
    auto conv = [](int64_t co, int64_t ci, int64_t k) { return co * ci * k * k + co; };
    auto conv_nobias = [](int64_t co, int64_t ci, int64_t k) { return co * ci * k * k; };
    auto norm = [](int64_t c) { return 2 * c; };

    SUBCASE("default configuration") {
        const std::array<int64_t, 4> dims = {32, 64, 128, 256};
        const int64_t D = 64, di = 2 * D, ds = 8, dtr = di / 16, hidden = 2 * D;

        int64_t encoder = conv(dims[0], 3, 4);  // patchify stem
        for (int64_t d : dims) encoder += conv(d, d, 3) + norm(d) + conv(d, d, 3);
        for (int s = 0; s < 3; ++s)
            encoder += conv(dims[static_cast<size_t>(s + 1)], dims[static_cast<size_t>(s)], 2);

        int64_t gif = 0;
        for (int64_t c : dims) {
            const int64_t r = 4;
            const int64_t block = conv_nobias(c / r, c, 1) + conv_nobias(c / r, 1, 3) +
                                  conv_nobias(c, c / r, 1) + norm(c);
            gif += 2 * 4 * block;  // two directions, four gated units each
        }

        const int64_t scan_dir = dtr * di + ds * di + ds * di  // per-step projections
                                 + di * dtr + di               // step-size expansion
                                 + di * ds + di;               // state matrix + skip
        const int64_t guided_block = norm(D) + conv(di, D, 1) + conv_nobias(di, 1, 3) + di +
                                     4 * scan_dir + norm(di) + conv(di, D, 1) + conv(D, di, 1) +
                                     norm(D) + conv(hidden, D, 1) + conv(D, hidden, 1);
        const int64_t mask_head = conv(1, D, 3);
        int64_t decoder = conv(D, 2 * dims[3], 1) + mask_head;  // seed + first mask
        for (int64_t in_ch : {2 * dims[2], 2 * dims[1], 2 * dims[0]})
            decoder += conv(D, in_ch, 1) + 2 * guided_block + conv(D, D, 3) + mask_head;

        const int64_t heads = conv(2, D, 1) + 2 * conv(5, D, 1);

        FoBaModel<double> model(FoBaConfig::desk());
        CHECK(model.count_params() == encoder + gif + decoder + heads);
    }

    SUBCASE("stripped-down configuration has a closed-form count") {
        FoBaConfig cfg;
        cfg.n_classes = 2;
        cfg.encoder_dims = {8, 8, 8, 8};
        cfg.gif_dims = {8, 8, 8, 8};
        cfg.fbg_dim = 8;
        cfg.gn_groups = 2;
        cfg.bottleneck_ratio = 2;
        cfg.gif_enabled = {false, false, false, false};
        cfg.fbg_enabled = {false, false, false};
        const int64_t encoder = conv(8, 3, 4) + 4 * (2 * conv(8, 8, 3) + norm(8)) +
                                3 * conv(8, 8, 2);
        const int64_t decoder = conv(8, 16, 1) + conv(1, 8, 3) +
                                3 * (conv(8, 16, 1) + conv(8, 8, 3) + conv(1, 8, 3));
        const int64_t heads = conv(2, 8, 1) + 2 * conv(3, 8, 1);
        FoBaModel<double> model(cfg);
        CHECK(model.count_params() == encoder + decoder + heads);
    }

    SUBCASE("a wider decoder strictly adds parameters") {
        FoBaConfig small = tiny_config();
        FoBaConfig wide = tiny_config();
        wide.fbg_dim *= 2;
        CHECK(FoBaModel<double>(wide).count_params() >
              FoBaModel<double>(small).count_params());
    }

    SUBCASE("freezing the encoder removes exactly its scalars") {
        FoBaConfig cfg = tiny_config();
        FoBaModel<double> model(cfg);
        const int64_t all = model.count_params();
        int64_t enc = 0;
        for (size_t i = 0; i < model.params().size(); ++i)
            if (model.params()[i].name.rfind("enc.", 0) == 0)
                enc += model.params()[i].value.numel();
        model.encoder().set_frozen(true);
        CHECK(model.count_params() == all - enc);
        model.encoder().set_frozen(false);
        CHECK(model.count_params() == all);
    }
}

TEST_CASE("end-to-end gradients") {
    FoBaConfig cfg = tiny_config();
    FoBaModel<double> model(cfg);
    Rng rng(61);
    Tensor<double> t1 = random_image<double>(3, 32, 32, rng);
    Tensor<double> t2 = random_image<double>(3, 32, 32, rng);
    std::vector<Tensor<double>> probes;
    probes.push_back(random_image<double>(2, 32, 32, rng));
    probes.push_back(random_image<double>(3, 32, 32, rng));
    probes.push_back(random_image<double>(3, 32, 32, rng));
    std::vector<Tensor<double>> mask_probes;
    for (int r : {1, 2, 4, 8}) mask_probes.push_back(random_image<double>(1, r, r, rng));

    auto fn = [&](bool with_grad) {
        Graph<double> g(with_grad);
        auto out = model.forward(g, t1, t2);
        auto loss = g.sum_all(g.mul(out.bcd_logits, g.input(probes[0])));
        loss = g.add(loss, g.sum_all(g.mul(out.scd1_logits, g.input(probes[1]))));
        loss = g.add(loss, g.sum_all(g.mul(out.scd2_logits, g.input(probes[2]))));
        for (size_t i = 0; i < 4; ++i)
            loss = g.add(loss, g.sum_all(g.mul(out.stage_masks[i], g.input(mask_probes[i]))));
        if (with_grad) g.backward(loss);
        return g.val(loss)[0];
    };
    // The absolute floor covers central-difference noise from activation-kink
    // crossings at this step size; everything louder must agree to 1e-3.
    // A genuinely wrong gradient cannot hide below the floor: any error on a
    // non-negligible gradient shows up as an absolute difference well above it.
    GradCheckReport rep = check_gradients(model.params(), fn, 1e-5, 2, 1e-5);
    INFO(rep.to_string());
    CHECK(rep.ok(1e-3));
}
