#pragma once

// Four-stage hierarchical image encoder: a 4x4 stride-4 patchify stem,
// residual conv units per stage, and 2x2 stride-2 downsampling between
// stages.  Emits features at 1/4, 1/8, 1/16 and 1/32 of the input
// resolution.  Weights live in a ParamStore and are shared by every
// encode() call, so running both dates through one encoder is exactly
// weight-tied.

#include <array>
#include <string>

#include "foba/graph.hpp"
#include "foba/param.hpp"
#include "foba/rng.hpp"

namespace foba {

struct EncoderConfig {
    std::array<int, 4> dims = {32, 64, 128, 256};  // channels per stage
    int blocks_per_stage = 1;
    int gn_groups = 8;
    int in_channels = 3;
};

// Any module that turns one image into a four-level feature pyramid can stand
// in for the built-in encoder (e.g. a pretrained backbone adapter).
template <typename T>
class PyramidEncoder {
public:
    virtual ~PyramidEncoder() = default;
    virtual std::array<typename Graph<T>::V, 4> encode(Graph<T>& g,
                                                       typename Graph<T>::V image) const = 0;
    virtual std::array<int, 4> stage_channels() const = 0;
};

template <typename T>
class ConvEncoder : public PyramidEncoder<T> {
public:
    // Creates all weights under `prefix` in the store.
    ConvEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng,
                std::string prefix = "enc");

    // image: [C_img, H, W] with H and W divisible by 32.
    std::array<typename Graph<T>::V, 4> encode(Graph<T>& g,
                                               typename Graph<T>::V image) const override;

    std::array<int, 4> stage_channels() const override { return cfg_.dims; }

    // Excludes (or re-includes) every encoder weight from optimization.
    void set_frozen(bool frozen);

    const std::string& prefix() const { return prefix_; }
    const EncoderConfig& config() const { return cfg_; }

private:
    ParamStore<T>* ps_;
    EncoderConfig cfg_;
    std::string prefix_;
};

}  // namespace foba
