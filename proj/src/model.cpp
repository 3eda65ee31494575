#include "foba/model.hpp"

#include <string>
#include <utility>

#include "foba/errors.hpp"

namespace foba {

namespace {

template <typename T>
bool same_dims(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank()) return false;
    for (int i = 0; i < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) return false;
    return true;
}

}  // namespace

template <typename T>
PredictionMaps predict(const Tensor<T>& bcd_logits, const Tensor<T>& scd1_logits,
                       const Tensor<T>& scd2_logits, bool gate_by_change) {
    if (bcd_logits.rank() != 3 || bcd_logits.dim(0) != 2)
        throw ShapeMismatch("binary logits must be [2, H, W]");
    const int h = bcd_logits.dim(1), w = bcd_logits.dim(2);
    for (const Tensor<T>* s : {&scd1_logits, &scd2_logits}) {
        if (s->rank() != 3 || s->dim(0) < 2 || s->dim(1) != h || s->dim(2) != w)
            throw ShapeMismatch("semantic logits must be [N+1, H, W] on the same grid");
    }
    if (scd1_logits.dim(0) != scd2_logits.dim(0))
        throw ShapeMismatch("semantic heads disagree on class count");
    const int classes = scd1_logits.dim(0);
    const int64_t hw = static_cast<int64_t>(h) * w;

    PredictionMaps out;
    out.change = Tensor<uint8_t>({h, w});
    out.sem1 = Tensor<int32_t>({h, w});
    out.sem2 = Tensor<int32_t>({h, w});
    for (int64_t p = 0; p < hw; ++p) {
        const bool changed = bcd_logits[hw + p] > bcd_logits[p];
        out.change[p] = changed ? 1 : 0;
        const Tensor<T>* heads[2] = {&scd1_logits, &scd2_logits};
        Tensor<int32_t>* maps[2] = {&out.sem1, &out.sem2};
        for (int k = 0; k < 2; ++k) {
            if (gate_by_change && !changed) {
                (*maps[k])[p] = 0;
                continue;
            }
            const int first = gate_by_change ? 1 : 0;
            int best = first;
            T best_v = (*heads[k])[first * hw + p];
            for (int c = first + 1; c < classes; ++c) {
                const T v = (*heads[k])[c * hw + p];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            (*maps[k])[p] = best;
        }
    }
    return out;
}

template <typename T>
FoBaModel<T>::FoBaModel(const FoBaConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);

    EncoderConfig ec;
    ec.dims = cfg_.encoder_dims;
    ec.blocks_per_stage = cfg_.blocks_per_stage;
    ec.gn_groups = cfg_.gn_groups;
    encoder_ = std::make_unique<ConvEncoder<T>>(ps_, ec, rng, "enc");

    for (int s = 0; s < 4; ++s) {
        if (!cfg_.gif_enabled[static_cast<size_t>(s)]) continue;  // bypass: no weights
        fusion_[static_cast<size_t>(s)] = std::make_unique<GatedFusion<T>>(
            ps_, cfg_.encoder_dims[static_cast<size_t>(s)], cfg_.bottleneck_ratio,
            cfg_.gn_groups, rng, "gif.s" + std::to_string(s + 1));
    }

    decoder_ = std::make_unique<GuidedDecoder<T>>(ps_, cfg_, rng, "dec");

    const int classes = cfg_.n_classes + 1;
    const std::array<std::pair<const char*, int>, 3> heads = {
        {{"head.bcd", 2}, {"head.scd1", classes}, {"head.scd2", classes}}};
    for (size_t i = 0; i < heads.size(); ++i) {
        const auto& [name, ch] = heads[i];
        head_w_[i] = &ps_.create(std::string(name) + ".w", {ch, cfg_.fbg_dim, 1, 1},
                                 Init::kaiming_uniform, rng);
        head_b_[i] = &ps_.create(std::string(name) + ".b", {ch}, Init::zeros, rng);
    }
}

template <typename T>
FoBaOutput<T> FoBaModel<T>::forward(Graph<T>& g, const Tensor<T>& t1,
                                    const Tensor<T>& t2) const {
    if (!same_dims(t1, t2)) throw ShapeMismatch("the two dates must share one shape");

    const auto e1 = encoder_->encode(g, g.input(t1));
    const auto e2 = encoder_->encode(g, g.input(t2));

    std::array<V, 4> fused;
    for (int s = 0; s < 4; ++s) {
        const auto i = static_cast<size_t>(s);
        fused[i] = fusion_[i] ? fusion_[i]->forward(g, e1[i], e2[i])
                              : fusion_bypass(g, e1[i], e2[i]);
    }

    const auto dec = decoder_->forward(g, fused);
    const V f = dec.final_state.f_pre;

    auto head = [&](size_t i) {
        return g.conv2d(f, g.param(*head_w_[i]), g.param(*head_b_[i]), ConvSpec{1, 0, 1});
    };
    FoBaOutput<T> out;
    out.bcd_logits = g.upsample_bilinear(head(0), 4);
    out.scd1_logits = g.upsample_bilinear(head(1), 4);
    out.scd2_logits = g.upsample_bilinear(head(2), 4);
    out.stage_masks.reserve(dec.masks.size());
    out.stage_masks_uc.reserve(dec.masks.size());
    for (const auto& m : dec.masks) {
        out.stage_masks.push_back(m.m_c);
        out.stage_masks_uc.push_back(m.m_uc);
    }
    return out;
}

template struct FoBaOutput<float>;
template struct FoBaOutput<double>;
template class FoBaModel<float>;
template class FoBaModel<double>;
template PredictionMaps predict<float>(const Tensor<float>&, const Tensor<float>&,
                                       const Tensor<float>&, bool);
template PredictionMaps predict<double>(const Tensor<double>&, const Tensor<double>&,
                                        const Tensor<double>&, bool);

}  // namespace foba
