#include "foba/losses.hpp"

#include <string>

#include "foba/errors.hpp"

namespace foba {

Tensor<uint8_t> downsample_mask_max(const Tensor<uint8_t>& mask, int factor) {
    if (mask.rank() != 2) throw ShapeMismatch("downsample_mask_max expects [H,W]");
    if (factor < 1) throw ShapeMismatch("downsample_mask_max: factor must be >= 1");
    const int h = mask.dim(0), w = mask.dim(1);
    if (h % factor != 0 || w % factor != 0)
        throw ShapeMismatch("downsample_mask_max: factor " + std::to_string(factor) +
                            " does not divide " + std::to_string(h) + "x" + std::to_string(w));
    const int oh = h / factor, ow = w / factor;
    Tensor<uint8_t> out({oh, ow});
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            uint8_t any = 0;
            for (int dy = 0; dy < factor && !any; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    if (mask[(oy * factor + dy) * static_cast<int64_t>(w) + ox * factor + dx]) {
                        any = 1;
                        break;
                    }
            out[oy * static_cast<int64_t>(ow) + ox] = any;
        }
    return out;
}

Tensor<int32_t> mask_to_labels(const Tensor<uint8_t>& mask) {
    Tensor<int32_t> out(mask.dims());
    for (int64_t i = 0; i < mask.numel(); ++i) out[i] = mask[i] ? 1 : 0;
    return out;
}

Tensor<uint8_t> complement_mask(const Tensor<uint8_t>& mask) {
    Tensor<uint8_t> out(mask.dims());
    for (int64_t i = 0; i < mask.numel(); ++i) out[i] = mask[i] ? 0 : 1;
    return out;
}

template <typename T>
typename Graph<T>::V mask_supervision_loss(Graph<T>& g,
                                           const std::vector<typename Graph<T>::V>& stage_masks,
                                           const Tensor<uint8_t>& gt_change) {
    using V = typename Graph<T>::V;
    if (stage_masks.empty()) throw ShapeMismatch("mask_supervision_loss: no stage masks");
    if (gt_change.rank() != 2) throw ShapeMismatch("mask_supervision_loss expects gt [H,W]");
    const int gh = gt_change.dim(0), gw = gt_change.dim(1);
    V acc = Graph<T>::none;
    for (V m : stage_masks) {
        const Tensor<T>& mv = g.val(m);
        if (mv.rank() != 3 || mv.dim(0) != 1)
            throw ShapeMismatch("mask_supervision_loss: stage mask must be [1,h,w]");
        const int mh = mv.dim(1), mw = mv.dim(2);
        if (mh <= 0 || gh % mh != 0 || mw <= 0 || gw % mw != 0 || gh / mh != gw / mw)
            throw ShapeMismatch("mask_supervision_loss: stage " + std::to_string(mh) + "x" +
                                std::to_string(mw) + " incompatible with gt " +
                                std::to_string(gh) + "x" + std::to_string(gw));
        Tensor<uint8_t> target = downsample_mask_max(gt_change, gh / mh);
        V term = g.bce_mask_loss(m, target, T(1e-6));
        acc = (acc == Graph<T>::none) ? term : g.add(acc, term);
    }
    return g.scale(acc, T(1) / static_cast<T>(stage_masks.size()));
}

template <typename T>
typename Graph<T>::V semantic_consistency_loss(Graph<T>& g,
                                               typename Graph<T>::V scd1_logits,
                                               typename Graph<T>::V scd2_logits,
                                               const Tensor<uint8_t>& gt_change) {
    using V = typename Graph<T>::V;
    V p1 = g.softmax(scd1_logits, 0);
    V p2 = g.softmax(scd2_logits, 0);
    return g.masked_sqdiff_loss(p1, p2, complement_mask(gt_change));
}

template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const LossInputs<T>& in,
                        const BiTemporalSample& sample, const LossWeights& w,
                        bool consistency_enabled) {
    const Tensor<T>& bv = g.val(in.bcd_logits);
    if (bv.rank() != 3 || bv.dim(0) != 2)
        throw ShapeMismatch("total_loss: binary-change logits must be [2,H,W]");
    if (bv.dim(1) != sample.height() || bv.dim(2) != sample.width())
        throw ShapeMismatch("total_loss: logits resolution differs from sample");
    const Tensor<T>& s1 = g.val(in.scd1_logits);
    const Tensor<T>& s2 = g.val(in.scd2_logits);
    if (s1.dims() != s2.dims())
        throw ShapeMismatch("total_loss: the two semantic logit maps differ in shape");
    if (s1.rank() != 3 || s1.dim(1) != sample.height() || s1.dim(2) != sample.width())
        throw ShapeMismatch("total_loss: semantic logits resolution differs from sample");

    const Tensor<int32_t> change = mask_to_labels(sample.change_mask);

    LossTerms<T> out;
    out.l_bcd = g.ce_loss(in.bcd_logits, change);

    typename Graph<T>::V ce1 = g.ce_loss(in.scd1_logits, sample.sem_t1);
    typename Graph<T>::V ce2 = g.ce_loss(in.scd2_logits, sample.sem_t2);
    out.l_scd = g.scale(g.add(ce1, ce2), T(0.5));

    out.l_sample = g.lovasz_softmax_loss(g.softmax(in.bcd_logits, 0), change);

    out.l_f = mask_supervision_loss(g, in.stage_masks, sample.change_mask);

    if (consistency_enabled) {
        out.l_cons = semantic_consistency_loss(g, in.scd1_logits, in.scd2_logits,
                                               sample.change_mask);
    } else {
        Tensor<T> zero({1});
        out.l_cons = g.input(zero);
    }

    // Mirror weighted_total(): (w1*bcd + w2*(scd + cons)) + (w3*sample + w4*f).
    typename Graph<T>::V left =
        g.add(g.scale(out.l_bcd, static_cast<T>(w.lambda1)),
              g.scale(g.add(out.l_scd, out.l_cons), static_cast<T>(w.lambda2)));
    typename Graph<T>::V right = g.add(g.scale(out.l_sample, static_cast<T>(w.lambda3)),
                                       g.scale(out.l_f, static_cast<T>(w.lambda4)));
    out.total = g.add(left, right);
    return out;
}

double weighted_total(double l_bcd, double l_scd, double l_sample, double l_f,
                      double l_cons, const LossWeights& w) {
    return (w.lambda1 * l_bcd + w.lambda2 * (l_scd + l_cons)) +
           (w.lambda3 * l_sample + w.lambda4 * l_f);
}

template typename Graph<float>::V mask_supervision_loss<float>(
    Graph<float>&, const std::vector<typename Graph<float>::V>&, const Tensor<uint8_t>&);
template typename Graph<double>::V mask_supervision_loss<double>(
    Graph<double>&, const std::vector<typename Graph<double>::V>&, const Tensor<uint8_t>&);
template typename Graph<float>::V semantic_consistency_loss<float>(
    Graph<float>&, typename Graph<float>::V, typename Graph<float>::V, const Tensor<uint8_t>&);
template typename Graph<double>::V semantic_consistency_loss<double>(
    Graph<double>&, typename Graph<double>::V, typename Graph<double>::V,
    const Tensor<uint8_t>&);
template LossTerms<float> total_loss<float>(Graph<float>&, const LossInputs<float>&,
                                            const BiTemporalSample&, const LossWeights&, bool);
template LossTerms<double> total_loss<double>(Graph<double>&, const LossInputs<double>&,
                                              const BiTemporalSample&, const LossWeights&, bool);

}  // namespace foba
