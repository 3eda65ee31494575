#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "foba/tensor.hpp"

namespace foba {

// One co-registered image pair with its semantic labels and change mask.
// Class 0 means "unchanged" in both label maps: a pixel is unchanged exactly
// when both maps carry 0 there, and the change mask is the complement of
// that.
struct BiTemporalSample {
    Tensor<float> image_t1;      // [C_img, H, W], values in [0,1]
    Tensor<float> image_t2;      // same shape
    Tensor<int32_t> sem_t1;      // [H, W], labels in {0..N}
    Tensor<int32_t> sem_t2;      // [H, W]
    Tensor<uint8_t> change_mask; // [H, W], {0,1}
    std::string id;

    int height() const { return sem_t1.dim(0); }
    int width() const { return sem_t1.dim(1); }
};

// Throws if any BiTemporalSample invariant fails; n_classes is the number of
// change classes N (labels live in {0..N}).
void validate_sample(const BiTemporalSample& s, int n_classes);

// A feature tensor with its downsample factor relative to the input image.
template <typename T>
struct FeatureMap {
    Tensor<T> data;  // [C, h, w]
    int scale = 1;   // h = H/scale, w = W/scale
};

// The encoder's 4-level output, scales 4/8/16/32 in order.
template <typename T>
struct FeaturePyramid {
    std::array<FeatureMap<T>, 4> stages;
};

// Foreground probability mask and its exact complement.
template <typename T>
struct MaskPair {
    Tensor<T> m_c;   // [1, h, w] in [0,1]
    Tensor<T> m_uc;  // 1 - m_c, same arithmetic, never re-derived

    void validate() const;
};

// Square pixel-count matrix over {0..N}: rows are predicted labels, columns
// are ground-truth labels. Both temporal directions of a sample accumulate
// into the same matrix.
class SCDConfusionMatrix {
public:
    explicit SCDConfusionMatrix(int n_classes);

    int n_classes() const { return n_; }
    int64_t at(int pred, int gt) const { return q_[static_cast<size_t>(pred) * n_ + gt]; }
    int64_t& at(int pred, int gt) { return q_[static_cast<size_t>(pred) * n_ + gt]; }
    int64_t total() const;

    // Adds count(pred == i && gt == j) for one label-map pair.
    void accumulate(const Tensor<int32_t>& pred, const Tensor<int32_t>& gt);
    // Additive merge for sharded accumulation.
    void merge(const SCDConfusionMatrix& other);

private:
    int n_;
    std::vector<int64_t> q_;
};

// Weights of the composite training objective:
// total = l1*bcd + l2*(scd + cons) + l3*sample + l4*feature.
struct LossWeights {
    double lambda1 = 1.0;
    double lambda2 = 0.75;
    double lambda3 = 0.5;
    double lambda4 = 0.5;
};

enum class FbgVariant { attention, ssm };

const char* to_string(FbgVariant v);
FbgVariant fbg_variant_from_string(const std::string& s);

// Full model configuration. The desk preset keeps every experiment runnable
// on one CPU core; the paper-scale preset mirrors the published widths.
struct FoBaConfig {
    int n_classes = 4;                                  // change classes N; labels {0..N}
    std::array<int, 4> encoder_dims = {32, 64, 128, 256};
    std::array<int, 4> gif_dims = {32, 64, 128, 256};   // per-stage GIF width, equals encoder dims
    int fbg_dim = 64;                                   // decoder working width
    FbgVariant fbg_variant = FbgVariant::ssm;
    std::array<bool, 4> gif_enabled = {true, true, true, true};   // stages S1..S4
    std::array<bool, 3> fbg_enabled = {true, true, true};          // decode stages D2..D4
    bool bg_branch_enabled = true;
    bool consistency_loss_enabled = true;
    LossWeights loss_weights;
    int ssm_state_dim = 8;
    int gn_groups = 8;
    int bottleneck_ratio = 4;
    int blocks_per_stage = 1;
    uint64_t seed = 1;

    static FoBaConfig desk();        // defaults above
    static FoBaConfig paper_scale(); // published channel widths

    void validate() const;  // throws ConfigError
};

}  // namespace foba
