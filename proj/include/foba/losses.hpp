#pragma once

// Training objective for the change-detection network: binary-change CE,
// two-date semantic CE, a Lovasz-softmax term on the binary output,
// per-stage mask supervision (BCE), and a semantic-consistency penalty on
// unchanged pixels.  All terms are composed inside a Graph so that the
// weighted total backpropagates through every component.

#include <vector>

#include "foba/core_types.hpp"
#include "foba/graph.hpp"
#include "foba/tensor.hpp"

namespace foba {

// Handles to the individual objective terms and their weighted combination.
// All six live in the same graph; calling backward(total) populates gradients
// for every contributing parameter.
template <typename T>
struct LossTerms {
    using V = typename Graph<T>::V;
    V l_bcd   = Graph<T>::none;  // CE, binary-change logits vs. change mask
    V l_scd   = Graph<T>::none;  // mean CE over the two semantic label maps
    V l_sample = Graph<T>::none; // Lovasz-softmax on binary-change softmax
    V l_f     = Graph<T>::none;  // stage-mask BCE, mean over stages
    V l_cons  = Graph<T>::none;  // unchanged-pixel MSE between date softmaxes
    V total   = Graph<T>::none;
};

// Network outputs the objective consumes, as graph handles.
template <typename T>
struct LossInputs {
    using V = typename Graph<T>::V;
    V bcd_logits  = Graph<T>::none;     // [2, H, W]
    V scd1_logits = Graph<T>::none;     // [N+1, H, W]
    V scd2_logits = Graph<T>::none;     // [N+1, H, W]
    std::vector<V> stage_masks;         // each [1, h, w] with H % h == 0
};

// Block-max downsampling of a binary mask: an output pixel is 1 when any
// pixel of the covered factor x factor block is 1.  Preserves thin
// structures that averaging would dilute.
Tensor<uint8_t> downsample_mask_max(const Tensor<uint8_t>& mask, int factor);

// Binary mask [H, W] -> int32 class labels {0, 1} for CE / Lovasz targets.
Tensor<int32_t> mask_to_labels(const Tensor<uint8_t>& mask);

// Complement of a binary mask: keep = 1 exactly where mask = 0.
Tensor<uint8_t> complement_mask(const Tensor<uint8_t>& mask);

// Mean over stages of the BCE between each predicted soft mask and the
// ground-truth change mask block-max-downsampled to that stage's resolution.
// Probabilities are clamped to [1e-6, 1 - 1e-6] inside the BCE.
template <typename T>
typename Graph<T>::V mask_supervision_loss(Graph<T>& g,
                                           const std::vector<typename Graph<T>::V>& stage_masks,
                                           const Tensor<uint8_t>& gt_change);

// Mean over ground-truth-unchanged pixels of the squared distance between
// the two dates' class-probability vectors (softmax over channel 0).
// Zero (with no gradient) when every pixel is changed.
template <typename T>
typename Graph<T>::V semantic_consistency_loss(Graph<T>& g,
                                               typename Graph<T>::V scd1_logits,
                                               typename Graph<T>::V scd2_logits,
                                               const Tensor<uint8_t>& gt_change);

// Full objective:
//   total = w1 * l_bcd + w2 * (l_scd + l_cons) + w3 * l_sample + w4 * l_f
// with l_scd the average of the two per-date CE terms and l_cons forced to a
// constant zero when consistency_enabled is false.
template <typename T>
LossTerms<T> total_loss(Graph<T>& g, const LossInputs<T>& in,
                        const BiTemporalSample& sample, const LossWeights& w,
                        bool consistency_enabled);

// Scalar recomposition of the weighted total from already-evaluated
// components; mirrors the in-graph combination bit for bit.
double weighted_total(double l_bcd, double l_scd, double l_sample, double l_f,
                      double l_cons, const LossWeights& w);

}  // namespace foba
