#pragma once

// Mask-guided cascade decoding.  Each decode stage projects the fused
// bi-temporal feature to a common width, upsamples the carried state,
// runs two guided branches — one gated by the soft change mask, one by its
// complement — fuses everything with a 3x3 conv, and emits a refined mask
// pair for the next stage.  The guided branch comes in two flavours: masked
// token attention, and a gated four-direction selective-scan block.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "foba/core_types.hpp"
#include "foba/graph.hpp"
#include "foba/param.hpp"
#include "foba/rng.hpp"

namespace foba {

template <typename T>
struct MaskNodes {
    typename Graph<T>::V m_c = Graph<T>::none;   // soft change mask [1,h,w]
    typename Graph<T>::V m_uc = Graph<T>::none;  // exact complement
};

template <typename T>
struct DecodeState {
    typename Graph<T>::V f_pre = Graph<T>::none;  // carried feature [dim,h,w]
    MaskNodes<T> masks;                           // at the same resolution
};

// conv3x3 -> sigmoid soft mask; the complement is computed exactly.
template <typename T>
class MaskHead {
public:
    MaskHead(ParamStore<T>& ps, int in_channels, Rng& rng, std::string prefix);
    MaskNodes<T> forward(Graph<T>& g, typename Graph<T>::V f) const;
    int in_channels() const { return in_channels_; }

private:
    ParamStore<T>* ps_;
    int in_channels_;
    std::string prefix_;
};

// Soft-masked token attention: the mask scales Q and K row-wise, the scaled
// logits pass through a learnable positive temperature, and the rows of the
// resulting attention matrix always sum to one.
//   out = softmax((m.Q)(m.K)^T / alpha) V,   q,k,v: [hw, d], mask: [hw]
template <typename T>
typename Graph<T>::V masked_attention(Graph<T>& g, typename Graph<T>::V q,
                                      typename Graph<T>::V k, typename Graph<T>::V v,
                                      typename Graph<T>::V mask_flat,
                                      typename Graph<T>::V alpha);

// Branch interface: refine a feature map under a soft spatial mask.
template <typename T>
class MaskGuidedBlock {
public:
    virtual ~MaskGuidedBlock() = default;
    virtual typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V f,
                                         typename Graph<T>::V mask) const = 0;
};

// Attention flavour:
//   tokens    = depthwise3x3(pointwise(LN(f))) split into Q,K,V
//   attn_out  = out_proj(masked_attention(Q, K, V, mask, alpha))
//   h         = attn_out + f
//   out       = FFN(LN(h)) + h
template <typename T>
class AttentionGuidedBlock : public MaskGuidedBlock<T> {
public:
    AttentionGuidedBlock(ParamStore<T>& ps, int dim, int ffn_hidden, Rng& rng,
                         std::string prefix);
    typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V f,
                                 typename Graph<T>::V mask) const override;

    struct TokenTriple {
        typename Graph<T>::V q, k, v;  // each [hw, d]
    };
    // LN -> pointwise to 3d channels -> depthwise 3x3 -> split -> flatten.
    TokenTriple project_qkv(Graph<T>& g, typename Graph<T>::V f) const;
    // Positive temperature, exp-parameterized; initialized to sqrt(d).
    typename Graph<T>::V alpha_node(Graph<T>& g) const;
    int dim() const { return dim_; }

private:
    ParamStore<T>* ps_;
    int dim_;
    int ffn_hidden_;
    std::string prefix_;
};

// Four-direction selective scan over a 2-D grid: row-major, row-major
// reversed, column-major, column-major reversed, each with its own
// parameters; the four outputs are summed pairwise.
template <typename T>
class QuadScan2d {
public:
    QuadScan2d(ParamStore<T>& ps, int d_inner, int d_state, Rng& rng, std::string prefix);
    typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V x) const;  // [d_inner,h,w]
    int d_inner() const { return d_inner_; }
    int d_state() const { return d_state_; }
    int dt_rank() const { return dt_rank_; }

private:
    typename Graph<T>::V scan_direction(Graph<T>& g, typename Graph<T>::V x, int dir) const;
    ParamStore<T>* ps_;
    int d_inner_;
    int d_state_;
    int dt_rank_;
    std::string prefix_;
};

// State-space flavour:
//   masked = LN(f) * mask
//   b1     = LN(quad_scan(depthwise3x3(expand(masked))))
//   b2     = expand(masked)
//   core   = contract(b1 * b2)
//   h      = core + f
//   out    = FFN(LN(h)) + h
template <typename T>
class SsmGuidedBlock : public MaskGuidedBlock<T> {
public:
    SsmGuidedBlock(ParamStore<T>& ps, int dim, int d_state, int ffn_hidden, Rng& rng,
                   std::string prefix);
    typename Graph<T>::V forward(Graph<T>& g, typename Graph<T>::V f,
                                 typename Graph<T>::V mask) const override;
    const QuadScan2d<T>& scan() const { return *scan_; }
    int dim() const { return dim_; }

private:
    ParamStore<T>* ps_;
    int dim_;
    int d_inner_;
    int ffn_hidden_;
    std::string prefix_;
    std::unique_ptr<QuadScan2d<T>> scan_;
};

struct DecodeStageConfig {
    int in_channels = 0;   // width of the consumed fused feature
    int dim = 64;          // common decode width
    FbgVariant variant = FbgVariant::ssm;
    bool guided = true;      // false: skip both guided branches (ablation)
    bool bg_branch = true;   // false: drop the complement-guided branch
    int ssm_state_dim = 8;
    int ffn_hidden = 0;      // 0 -> 2 * dim
};

// One decode stage: project, upsample the carried state, run the guided
// branches, fuse with a 3x3 conv, refresh the mask pair.
template <typename T>
class GuidedDecodeStage {
public:
    GuidedDecodeStage(ParamStore<T>& ps, const DecodeStageConfig& cfg, Rng& rng,
                      std::string prefix);
    DecodeState<T> forward(Graph<T>& g, typename Graph<T>::V f_out,
                           const DecodeState<T>& state) const;
    const DecodeStageConfig& config() const { return cfg_; }

private:
    ParamStore<T>* ps_;
    DecodeStageConfig cfg_;
    std::string prefix_;
    std::unique_ptr<MaskGuidedBlock<T>> fg_;
    std::unique_ptr<MaskGuidedBlock<T>> bg_;
    std::unique_ptr<MaskHead<T>> head_;
};

// The full three-stage cascade.  The coarsest fused feature seeds the state
// (1x1 projection + initial mask head); the remaining stages consume the
// fused features from coarse to fine, doubling resolution each time.
template <typename T>
class GuidedDecoder {
public:
    GuidedDecoder(ParamStore<T>& ps, const FoBaConfig& cfg, Rng& rng,
                  std::string prefix = "dec");

    struct Result {
        DecodeState<T> final_state;          // at 1/4 scale
        std::vector<MaskNodes<T>> masks;     // coarse -> fine: 1/32 .. 1/4
    };
    // f_out: fused features for encoder stages 1..4 (fine -> coarse order),
    // each with 2 * gif_dims[s] channels.
    Result forward(Graph<T>& g, const std::array<typename Graph<T>::V, 4>& f_out) const;

private:
    ParamStore<T>* ps_;
    FoBaConfig cfg_;
    std::string prefix_;
    std::unique_ptr<MaskHead<T>> seed_head_;
    std::vector<std::unique_ptr<GuidedDecodeStage<T>>> stages_;
};

}  // namespace foba
