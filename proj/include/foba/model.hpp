#pragma once

// Whole-network assembly: one weight-tied encoder runs both dates, each
// stage pair is fused by a gated interaction (or a plain concatenation when
// that stage's interaction is switched off), the fused pyramid drives the
// mask-guided decoder, and three 1x1 heads read the final decode state —
// binary change plus one semantic map per date.  Head logits are upsampled
// back to the input resolution.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "foba/core_types.hpp"
#include "foba/encoder.hpp"
#include "foba/fbg.hpp"
#include "foba/gif.hpp"
#include "foba/graph.hpp"
#include "foba/param.hpp"
#include "foba/rng.hpp"
#include "foba/tensor.hpp"

namespace foba {

// Graph handles produced by one forward evaluation.
template <typename T>
struct FoBaOutput {
    using V = typename Graph<T>::V;
    V bcd_logits;                // [2, H, W]
    V scd1_logits;               // [N+1, H, W]
    V scd2_logits;               // [N+1, H, W]
    std::vector<V> stage_masks;     // foreground masks, coarsest (1/32) to finest (1/4)
    std::vector<V> stage_masks_uc;  // matching background masks (1 - foreground)
};

struct PredictionMaps {
    Tensor<int32_t> sem1;    // [H, W], labels 0..N
    Tensor<int32_t> sem2;    // [H, W], labels 0..N
    Tensor<uint8_t> change;  // [H, W], 0 or 1
};

// change = per-pixel argmax of the binary logits.  Where change fires the
// semantic maps take the best class among 1..N; elsewhere they are 0.  With
// gating off both maps are the raw argmax over all N+1 channels.  Ties pick
// the lowest index.
template <typename T>
PredictionMaps predict(const Tensor<T>& bcd_logits, const Tensor<T>& scd1_logits,
                       const Tensor<T>& scd2_logits, bool gate_by_change = true);

template <typename T>
class FoBaModel {
public:
    using V = typename Graph<T>::V;

    // Builds every weight from cfg.seed; identical configs yield
    // bit-identical parameters.
    explicit FoBaModel(const FoBaConfig& cfg);

    // t1, t2: [in_channels, H, W] with H and W divisible by 32 and equal
    // shapes.  Throws ShapeMismatch otherwise.
    FoBaOutput<T> forward(Graph<T>& g, const Tensor<T>& t1, const Tensor<T>& t2) const;

    // Trainable scalars currently registered (frozen tensors excluded).
    int64_t count_params() const { return ps_.count_trainable(); }

    ParamStore<T>& params() { return ps_; }
    const ParamStore<T>& params() const { return ps_; }
    const FoBaConfig& config() const { return cfg_; }
    ConvEncoder<T>& encoder() { return *encoder_; }
    GuidedDecoder<T>& decoder() { return *decoder_; }

private:
    FoBaConfig cfg_;
    ParamStore<T> ps_;
    std::unique_ptr<ConvEncoder<T>> encoder_;
    std::array<std::unique_ptr<GatedFusion<T>>, 4> fusion_;  // null where disabled
    std::unique_ptr<GuidedDecoder<T>> decoder_;
    // Store entries never move, so the heads can be resolved once.
    std::array<ParamTensor<T>*, 3> head_w_ = {};
    std::array<ParamTensor<T>*, 3> head_b_ = {};
};

}  // namespace foba
