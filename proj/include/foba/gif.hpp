#pragma once

// Gated cross-temporal feature interaction.  Each direction enhances one
// date's features, gates them with the other date's features via a Hadamard
// product, refines the product, and adds the original features back.  The
// bidirectional fusion concatenates both directions, doubling the channel
// count.  Every conv here is a bias-free bottleneck stack:
// pointwise down (C -> C/r), depthwise 3x3, pointwise up (C/r -> C),
// followed by GroupNorm over the full composition and a ReLU.

#include <string>

#include "foba/graph.hpp"
#include "foba/param.hpp"
#include "foba/rng.hpp"

namespace foba {

// One bottleneck unit: ReLU(GN(pw_up(dw3x3(pw_down(x))))).
template <typename T>
class GatedConvBlock {
public:
    GatedConvBlock(ParamStore<T>& ps, int channels, int reduction, int gn_groups, Rng& rng,
                   std::string prefix);
    typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V x) const;
    int channels() const { return channels_; }

private:
    ParamStore<T>* ps_;
    int channels_;
    int reduced_;
    int gn_groups_;
    std::string prefix_;
};

// One direction of the interaction:
//   F_e    = block_e2(block_e1(i1))
//   F_gate = block_gate(i2)
//   out    = block_out(F_e * F_gate) + i1
template <typename T>
class GatedDirection {
public:
    GatedDirection(ParamStore<T>& ps, int channels, int reduction, int gn_groups, Rng& rng,
                   std::string prefix);
    typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V i1,
                                 typename Graph<T>::V i2) const;
    int channels() const { return channels_; }

private:
    GatedConvBlock<T> e1_, e2_, gate_, out_;
    int channels_;
};

// Bidirectional fusion: concat[direction(i1, i2); direction(i2, i1)] with
// independent weights per direction.  Output has 2 * channels channels.
template <typename T>
class GatedFusion {
public:
    GatedFusion(ParamStore<T>& ps, int channels, int reduction, int gn_groups, Rng& rng,
                std::string prefix);
    typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V i1,
                                 typename Graph<T>::V i2) const;
    int out_channels() const { return 2 * fwd_.channels(); }

private:
    GatedDirection<T> fwd_, rev_;
};

// Parameter-free stand-in used when the interaction is disabled at a stage:
// plain channel concatenation, same output width as GatedFusion.
template <typename T>
typename Graph<T>::V fusion_bypass(Graph<T>& g, typename Graph<T>::V i1,
                                   typename Graph<T>::V i2);

}  // namespace foba
