#include "foba/fbg.hpp"

#include <cmath>
#include <string>

#include "foba/errors.hpp"
#include "foba/tensor.hpp"

namespace foba {

namespace {

// Inverse of softplus: softplus(inv_softplus(y)) == y for y > 0.
double inv_softplus(double y) { return std::log(std::expm1(y)); }

int resolve_ffn_hidden(int requested, int dim) { return requested > 0 ? requested : 2 * dim; }

}  // namespace

// ---- MaskHead --------------------------------------------------------------

template <typename T>
MaskHead<T>::MaskHead(ParamStore<T>& ps, int in_channels, Rng& rng, std::string prefix)
    : ps_(&ps), in_channels_(in_channels), prefix_(std::move(prefix)) {
    ps.create(prefix_ + ".w", {1, in_channels_, 3, 3}, Init::kaiming_uniform, rng);
    ps.create(prefix_ + ".b", {1}, Init::zeros, rng);
}

template <typename T>
MaskNodes<T> MaskHead<T>::forward(Graph<T>& g, typename Graph<T>::V f) const {
    const Tensor<T>& fv = g.val(f);
    if (fv.rank() != 3 || fv.dim(0) != in_channels_)
        throw ChannelMismatch("mask head: expected " + std::to_string(in_channels_) +
                              " input channels");
    auto m_c = g.sigmoid(g.conv2d(f, g.param(ps_->at(prefix_ + ".w")),
                                  g.param(ps_->at(prefix_ + ".b")), ConvSpec{1, 1, 1}));
    MaskNodes<T> out;
    out.m_c = m_c;
    out.m_uc = g.complement_one(m_c);
    return out;
}

// ---- masked attention ------------------------------------------------------

template <typename T>
typename Graph<T>::V masked_attention(Graph<T>& g, typename Graph<T>::V q,
                                      typename Graph<T>::V k, typename Graph<T>::V v,
                                      typename Graph<T>::V mask_flat,
                                      typename Graph<T>::V alpha) {
    const Tensor<T>& qv = g.val(q);
    const Tensor<T>& mv = g.val(mask_flat);
    if (qv.rank() != 2) throw ShapeMismatch("masked attention: tokens must be [hw,d]");
    if (mv.numel() != qv.dim(0))
        throw ShapeMismatch("masked attention: mask length must match the token count");
    for (int64_t i = 0; i < mv.numel(); ++i)
        if (!(mv[i] >= T(0) && mv[i] <= T(1)))
            throw MaskInconsistent("masked attention: mask values must lie in [0,1]");

    auto qm = g.row_scale(q, mask_flat);
    auto km = g.row_scale(k, mask_flat);
    auto logits = g.div_by_scalar(g.matmul(qm, km, false, true), alpha);
    auto att = g.softmax(logits, 1);
    if (!all_finite(g.val(att)))
        throw NonFiniteAttention("masked attention: attention weights are not finite");
    auto out = g.matmul(att, v, false, false);
    if (!all_finite(g.val(out)))
        throw NonFiniteAttention("masked attention: output is not finite");
    return out;
}

// ---- attention-guided block ------------------------------------------------

template <typename T>
AttentionGuidedBlock<T>::AttentionGuidedBlock(ParamStore<T>& ps, int dim, int ffn_hidden,
                                              Rng& rng, std::string prefix)
    : ps_(&ps),
      dim_(dim),
      ffn_hidden_(resolve_ffn_hidden(ffn_hidden, dim)),
      prefix_(std::move(prefix)) {
    const std::string p = prefix_ + ".";
    ps.create(p + "ln1.gamma", {dim_}, Init::ones, rng);
    ps.create(p + "ln1.beta", {dim_}, Init::zeros, rng);
    ps.create(p + "qkv.pw", {3 * dim_, dim_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "qkv.dw", {3 * dim_, 1, 3, 3}, Init::kaiming_uniform, rng);
    ParamTensor<T>& la = ps.create(p + "log_alpha", {1}, Init::custom, rng);
    la.value[0] = static_cast<T>(0.5 * std::log(static_cast<double>(dim_)));
    ps.create(p + "out.w", {dim_, dim_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "out.b", {dim_}, Init::zeros, rng);
    ps.create(p + "ln2.gamma", {dim_}, Init::ones, rng);
    ps.create(p + "ln2.beta", {dim_}, Init::zeros, rng);
    ps.create(p + "ffn.w1", {ffn_hidden_, dim_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "ffn.b1", {ffn_hidden_}, Init::zeros, rng);
    ps.create(p + "ffn.w2", {dim_, ffn_hidden_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "ffn.b2", {dim_}, Init::zeros, rng);
}

template <typename T>
typename AttentionGuidedBlock<T>::TokenTriple AttentionGuidedBlock<T>::project_qkv(
    Graph<T>& g, typename Graph<T>::V f) const {
    const Tensor<T>& fv = g.val(f);
    if (fv.rank() != 3 || fv.dim(0) != dim_)
        throw ChannelMismatch("qkv projection: expected " + std::to_string(dim_) + " channels");
    auto& ps = *ps_;
    const std::string p = prefix_ + ".";
    const auto none = Graph<T>::none;
    auto n = g.layer_norm_chw(f, g.param(ps.at(p + "ln1.gamma")), g.param(ps.at(p + "ln1.beta")));
    auto qkv = g.conv2d(n, g.param(ps.at(p + "qkv.pw")), none, ConvSpec{1, 0, 1});
    qkv = g.conv2d(qkv, g.param(ps.at(p + "qkv.dw")), none, ConvSpec{1, 1, 3 * dim_});
    TokenTriple t;
    t.q = g.chw_to_tokens(g.slice_ch(qkv, 0, dim_));
    t.k = g.chw_to_tokens(g.slice_ch(qkv, dim_, 2 * dim_));
    t.v = g.chw_to_tokens(g.slice_ch(qkv, 2 * dim_, 3 * dim_));
    return t;
}

template <typename T>
typename Graph<T>::V AttentionGuidedBlock<T>::alpha_node(Graph<T>& g) const {
    return g.exp(g.param(ps_->at(prefix_ + ".log_alpha")));
}

template <typename T>
typename Graph<T>::V AttentionGuidedBlock<T>::forward(Graph<T>& g, typename Graph<T>::V f,
                                                      typename Graph<T>::V mask) const {
    const Tensor<T>& fv = g.val(f);
    const Tensor<T>& mv = g.val(mask);
    if (mv.rank() != 3 || mv.dim(0) != 1 || mv.dim(1) != fv.dim(1) || mv.dim(2) != fv.dim(2))
        throw ShapeMismatch("guided block: mask must be [1,h,w] at the feature resolution");
    auto& ps = *ps_;
    const std::string p = prefix_ + ".";
    const int64_t hw = static_cast<int64_t>(fv.dim(1)) * fv.dim(2);

    TokenTriple t = project_qkv(g, f);
    auto mflat = g.reshape(mask, {static_cast<int>(hw)});
    auto att = masked_attention(g, t.q, t.k, t.v, mflat, alpha_node(g));
    auto att_chw = g.tokens_to_chw(att, fv.dim(1), fv.dim(2));
    auto proj = g.conv2d(att_chw, g.param(ps.at(p + "out.w")), g.param(ps.at(p + "out.b")),
                         ConvSpec{1, 0, 1});
    auto h = g.add(proj, f);
    auto n2 = g.layer_norm_chw(h, g.param(ps.at(p + "ln2.gamma")), g.param(ps.at(p + "ln2.beta")));
    auto f1 = g.relu(g.conv2d(n2, g.param(ps.at(p + "ffn.w1")), g.param(ps.at(p + "ffn.b1")),
                              ConvSpec{1, 0, 1}));
    auto f2 = g.conv2d(f1, g.param(ps.at(p + "ffn.w2")), g.param(ps.at(p + "ffn.b2")),
                       ConvSpec{1, 0, 1});
    return g.add(f2, h);
}

// ---- four-direction selective scan -----------------------------------------

template <typename T>
QuadScan2d<T>::QuadScan2d(ParamStore<T>& ps, int d_inner, int d_state, Rng& rng,
                          std::string prefix)
    : ps_(&ps),
      d_inner_(d_inner),
      d_state_(d_state),
      dt_rank_((d_inner + 15) / 16),
      prefix_(std::move(prefix)) {
    for (int dir = 0; dir < 4; ++dir) {
        const std::string p = prefix_ + ".dir" + std::to_string(dir) + ".";
        ps.create(p + "dt_w", {dt_rank_, d_inner_, 1, 1}, Init::kaiming_uniform, rng);
        ps.create(p + "b_w", {d_state_, d_inner_, 1, 1}, Init::kaiming_uniform, rng);
        ps.create(p + "c_w", {d_state_, d_inner_, 1, 1}, Init::kaiming_uniform, rng);
        ps.create(p + "dtp.w", {d_inner_, dt_rank_, 1, 1}, Init::kaiming_uniform, rng);
        ParamTensor<T>& dtb = ps.create(p + "dtp.b", {d_inner_}, Init::custom, rng);
        for (int i = 0; i < d_inner_; ++i) {
            const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            dtb.value[i] = static_cast<T>(inv_softplus(dt));
        }
        ParamTensor<T>& alog = ps.create(p + "a_log", {d_inner_, d_state_}, Init::custom, rng);
        for (int i = 0; i < d_inner_; ++i)
            for (int n = 0; n < d_state_; ++n)
                alog.value[i * d_state_ + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
        ParamTensor<T>& dskip = ps.create(p + "d", {d_inner_}, Init::custom, rng);
        for (int i = 0; i < d_inner_; ++i) dskip.value[i] = T(1);
    }
}

template <typename T>
typename Graph<T>::V QuadScan2d<T>::scan_direction(Graph<T>& g, typename Graph<T>::V x,
                                                   int dir) const {
    const bool col_major = dir >= 2;
    const bool reversed = (dir & 1) != 0;
    const Tensor<T>& xv = g.val(x);
    const int h = xv.dim(1), w = xv.dim(2);
    const int l = h * w;
    auto& ps = *ps_;
    const std::string p = prefix_ + ".dir" + std::to_string(dir) + ".";
    const auto none = Graph<T>::none;

    auto base = col_major ? g.transpose_hw(x) : x;
    auto tok = g.chw_to_tokens(base);  // [L, d_inner]
    if (reversed) tok = g.flip_rows(tok);
    auto seq = g.tokens_to_chw(tok, l, 1);  // [d_inner, L, 1] for the 1x1 convs

    auto dt1 = g.conv2d(seq, g.param(ps.at(p + "dt_w")), none, ConvSpec{1, 0, 1});
    auto dt2 = g.conv2d(dt1, g.param(ps.at(p + "dtp.w")), g.param(ps.at(p + "dtp.b")),
                        ConvSpec{1, 0, 1});
    auto delta = g.chw_to_tokens(g.softplus(dt2));  // [L, d_inner], > 0
    auto b_seq = g.chw_to_tokens(g.conv2d(seq, g.param(ps.at(p + "b_w")), none, ConvSpec{1, 0, 1}));
    auto c_seq = g.chw_to_tokens(g.conv2d(seq, g.param(ps.at(p + "c_w")), none, ConvSpec{1, 0, 1}));
    auto a = g.neg(g.exp(g.param(ps.at(p + "a_log"))));  // negative spectrum

    auto y = g.selective_scan(tok, delta, a, b_seq, c_seq, g.param(ps.at(p + "d")));
    if (reversed) y = g.flip_rows(y);
    if (col_major) return g.transpose_hw(g.tokens_to_chw(y, w, h));
    return g.tokens_to_chw(y, h, w);
}

template <typename T>
typename Graph<T>::V QuadScan2d<T>::forward(Graph<T>& g, typename Graph<T>::V x) const {
    const Tensor<T>& xv = g.val(x);
    if (xv.rank() != 3 || xv.dim(0) != d_inner_)
        throw ChannelMismatch("quad scan: expected " + std::to_string(d_inner_) + " channels");
    auto y0 = scan_direction(g, x, 0);
    auto y1 = scan_direction(g, x, 1);
    auto y2 = scan_direction(g, x, 2);
    auto y3 = scan_direction(g, x, 3);
    return g.add(g.add(y0, y1), g.add(y2, y3));
}

// ---- state-space guided block ----------------------------------------------

template <typename T>
SsmGuidedBlock<T>::SsmGuidedBlock(ParamStore<T>& ps, int dim, int d_state, int ffn_hidden,
                                  Rng& rng, std::string prefix)
    : ps_(&ps),
      dim_(dim),
      d_inner_(2 * dim),
      ffn_hidden_(resolve_ffn_hidden(ffn_hidden, dim)),
      prefix_(std::move(prefix)) {
    const std::string p = prefix_ + ".";
    ps.create(p + "ln1.gamma", {dim_}, Init::ones, rng);
    ps.create(p + "ln1.beta", {dim_}, Init::zeros, rng);
    ps.create(p + "in.w", {d_inner_, dim_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "in.b", {d_inner_}, Init::zeros, rng);
    ps.create(p + "dw.w", {d_inner_, 1, 3, 3}, Init::kaiming_uniform, rng);
    ps.create(p + "dw.b", {d_inner_}, Init::zeros, rng);
    scan_ = std::make_unique<QuadScan2d<T>>(ps, d_inner_, d_state, rng, prefix_ + ".scan");
    ps.create(p + "lnm.gamma", {d_inner_}, Init::ones, rng);
    ps.create(p + "lnm.beta", {d_inner_}, Init::zeros, rng);
    ps.create(p + "gate.w", {d_inner_, dim_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "gate.b", {d_inner_}, Init::zeros, rng);
    ps.create(p + "out.w", {dim_, d_inner_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "out.b", {dim_}, Init::zeros, rng);
    ps.create(p + "ln2.gamma", {dim_}, Init::ones, rng);
    ps.create(p + "ln2.beta", {dim_}, Init::zeros, rng);
    ps.create(p + "ffn.w1", {ffn_hidden_, dim_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "ffn.b1", {ffn_hidden_}, Init::zeros, rng);
    ps.create(p + "ffn.w2", {dim_, ffn_hidden_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "ffn.b2", {dim_}, Init::zeros, rng);
}

template <typename T>
typename Graph<T>::V SsmGuidedBlock<T>::forward(Graph<T>& g, typename Graph<T>::V f,
                                                typename Graph<T>::V mask) const {
    const Tensor<T>& fv = g.val(f);
    if (fv.rank() != 3 || fv.dim(0) != dim_)
        throw ChannelMismatch("guided block: expected " + std::to_string(dim_) + " channels");
    const Tensor<T>& mv = g.val(mask);
    if (mv.rank() != 3 || mv.dim(0) != 1 || mv.dim(1) != fv.dim(1) || mv.dim(2) != fv.dim(2))
        throw ShapeMismatch("guided block: mask must be [1,h,w] at the feature resolution");
    auto& ps = *ps_;
    const std::string p = prefix_ + ".";

    auto n = g.layer_norm_chw(f, g.param(ps.at(p + "ln1.gamma")), g.param(ps.at(p + "ln1.beta")));
    auto masked = g.spatial_mul(n, mask);
    auto b1 = g.conv2d(masked, g.param(ps.at(p + "in.w")), g.param(ps.at(p + "in.b")),
                       ConvSpec{1, 0, 1});
    b1 = g.conv2d(b1, g.param(ps.at(p + "dw.w")), g.param(ps.at(p + "dw.b")),
                  ConvSpec{1, 1, d_inner_});
    b1 = scan_->forward(g, b1);
    b1 = g.layer_norm_chw(b1, g.param(ps.at(p + "lnm.gamma")), g.param(ps.at(p + "lnm.beta")));
    auto b2 = g.conv2d(masked, g.param(ps.at(p + "gate.w")), g.param(ps.at(p + "gate.b")),
                       ConvSpec{1, 0, 1});
    auto fused = g.mul(b1, b2);
    auto core = g.conv2d(fused, g.param(ps.at(p + "out.w")), g.param(ps.at(p + "out.b")),
                         ConvSpec{1, 0, 1});
    auto h = g.add(core, f);
    auto n2 = g.layer_norm_chw(h, g.param(ps.at(p + "ln2.gamma")), g.param(ps.at(p + "ln2.beta")));
    auto f1 = g.relu(g.conv2d(n2, g.param(ps.at(p + "ffn.w1")), g.param(ps.at(p + "ffn.b1")),
                              ConvSpec{1, 0, 1}));
    auto f2 = g.conv2d(f1, g.param(ps.at(p + "ffn.w2")), g.param(ps.at(p + "ffn.b2")),
                       ConvSpec{1, 0, 1});
    return g.add(f2, h);
}

// ---- decode stage ----------------------------------------------------------

template <typename T>
GuidedDecodeStage<T>::GuidedDecodeStage(ParamStore<T>& ps, const DecodeStageConfig& cfg,
                                        Rng& rng, std::string prefix)
    : ps_(&ps), cfg_(cfg), prefix_(std::move(prefix)) {
    if (cfg_.in_channels <= 0 || cfg_.dim <= 0)
        throw ConfigError("decode stage: widths must be positive");
    const std::string p = prefix_ + ".";
    ps.create(p + "proj.w", {cfg_.dim, cfg_.in_channels, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "proj.b", {cfg_.dim}, Init::zeros, rng);
    if (cfg_.guided) {
        if (cfg_.variant == FbgVariant::attention) {
            fg_ = std::make_unique<AttentionGuidedBlock<T>>(ps, cfg_.dim, cfg_.ffn_hidden, rng,
                                                            prefix_ + ".fg");
            if (cfg_.bg_branch)
                bg_ = std::make_unique<AttentionGuidedBlock<T>>(ps, cfg_.dim, cfg_.ffn_hidden,
                                                                rng, prefix_ + ".bg");
        } else {
            fg_ = std::make_unique<SsmGuidedBlock<T>>(ps, cfg_.dim, cfg_.ssm_state_dim,
                                                      cfg_.ffn_hidden, rng, prefix_ + ".fg");
            if (cfg_.bg_branch)
                bg_ = std::make_unique<SsmGuidedBlock<T>>(ps, cfg_.dim, cfg_.ssm_state_dim,
                                                          cfg_.ffn_hidden, rng, prefix_ + ".bg");
        }
    }
    ps.create(p + "fuse.w", {cfg_.dim, cfg_.dim, 3, 3}, Init::kaiming_uniform, rng);
    ps.create(p + "fuse.b", {cfg_.dim}, Init::zeros, rng);
    head_ = std::make_unique<MaskHead<T>>(ps, cfg_.dim, rng, prefix_ + ".head");
}

template <typename T>
DecodeState<T> GuidedDecodeStage<T>::forward(Graph<T>& g, typename Graph<T>::V f_out,
                                             const DecodeState<T>& state) const {
    const Tensor<T>& fv = g.val(f_out);
    if (fv.rank() != 3 || fv.dim(0) != cfg_.in_channels)
        throw ShapeMismatch("decode stage: expected fused feature with " +
                            std::to_string(cfg_.in_channels) + " channels");
    const Tensor<T>& pv = g.val(state.f_pre);
    const int fh = fv.dim(1), fw = fv.dim(2);
    const int ph = pv.dim(1), pw = pv.dim(2);
    if (ph > fh || pw > fw || fh % ph != 0 || fw % pw != 0 || fh / ph != fw / pw)
        throw ShapeMismatch("decode stage: carried state must sit on a coarser or equal grid");
    const int factor = fh / ph;

    auto& ps = *ps_;
    const std::string p = prefix_ + ".";
    auto f_proj = g.conv2d(f_out, g.param(ps.at(p + "proj.w")), g.param(ps.at(p + "proj.b")),
                           ConvSpec{1, 0, 1});
    auto pre_up = g.upsample_bilinear(state.f_pre, factor);
    auto mc_up = g.upsample_bilinear(state.masks.m_c, factor);
    auto muc_up = g.complement_one(mc_up);

    typename Graph<T>::V fused_in;
    if (cfg_.guided) {
        auto f_fg = fg_->forward(g, f_proj, mc_up);
        if (bg_) {
            auto f_bg = bg_->forward(g, f_proj, muc_up);
            fused_in = g.add(g.add(f_fg, f_bg), pre_up);
        } else {
            fused_in = g.add(f_fg, pre_up);
        }
    } else {
        fused_in = g.add(f_proj, pre_up);
    }
    auto f_new = g.conv2d(fused_in, g.param(ps.at(p + "fuse.w")), g.param(ps.at(p + "fuse.b")),
                          ConvSpec{1, 1, 1});
    DecodeState<T> out;
    out.f_pre = f_new;
    out.masks = head_->forward(g, f_new);
    return out;
}

// ---- full cascade ----------------------------------------------------------

template <typename T>
GuidedDecoder<T>::GuidedDecoder(ParamStore<T>& ps, const FoBaConfig& cfg, Rng& rng,
                                std::string prefix)
    : ps_(&ps), cfg_(cfg), prefix_(std::move(prefix)) {
    const std::string p = prefix_ + ".";
    ps.create(p + "seed.w", {cfg.fbg_dim, 2 * cfg.gif_dims[3], 1, 1}, Init::kaiming_uniform,
              rng);
    ps.create(p + "seed.b", {cfg.fbg_dim}, Init::zeros, rng);
    seed_head_ = std::make_unique<MaskHead<T>>(ps, cfg.fbg_dim, rng, prefix_ + ".seed_head");
    // Decode stages consume the fused features coarse-to-fine: encoder
    // stages 3, 2, 1.
    for (int d = 0; d < 3; ++d) {
        DecodeStageConfig sc;
        sc.in_channels = 2 * cfg.gif_dims[static_cast<size_t>(2 - d)];
        sc.dim = cfg.fbg_dim;
        sc.variant = cfg.fbg_variant;
        sc.guided = cfg.fbg_enabled[static_cast<size_t>(d)];
        sc.bg_branch = cfg.bg_branch_enabled;
        sc.ssm_state_dim = cfg.ssm_state_dim;
        stages_.push_back(std::make_unique<GuidedDecodeStage<T>>(
            ps, sc, rng, prefix_ + ".d" + std::to_string(d + 2)));
    }
}

template <typename T>
typename GuidedDecoder<T>::Result GuidedDecoder<T>::forward(
    Graph<T>& g, const std::array<typename Graph<T>::V, 4>& f_out) const {
    auto& ps = *ps_;
    const std::string p = prefix_ + ".";
    Result r;
    DecodeState<T> st;
    st.f_pre = g.conv2d(f_out[3], g.param(ps.at(p + "seed.w")), g.param(ps.at(p + "seed.b")),
                        ConvSpec{1, 0, 1});
    st.masks = seed_head_->forward(g, st.f_pre);
    r.masks.push_back(st.masks);
    for (int d = 0; d < 3; ++d) {
        st = stages_[static_cast<size_t>(d)]->forward(g, f_out[static_cast<size_t>(2 - d)], st);
        r.masks.push_back(st.masks);
    }
    r.final_state = st;
    return r;
}

// ---- instantiations --------------------------------------------------------

template class MaskHead<float>;
template class MaskHead<double>;
template typename Graph<float>::V masked_attention<float>(Graph<float>&, typename Graph<float>::V,
                                                          typename Graph<float>::V,
                                                          typename Graph<float>::V,
                                                          typename Graph<float>::V,
                                                          typename Graph<float>::V);
template typename Graph<double>::V masked_attention<double>(
    Graph<double>&, typename Graph<double>::V, typename Graph<double>::V,
    typename Graph<double>::V, typename Graph<double>::V, typename Graph<double>::V);
template class AttentionGuidedBlock<float>;
template class AttentionGuidedBlock<double>;
template class QuadScan2d<float>;
template class QuadScan2d<double>;
template class SsmGuidedBlock<float>;
template class SsmGuidedBlock<double>;
template class GuidedDecodeStage<float>;
template class GuidedDecodeStage<double>;
template class GuidedDecoder<float>;
template class GuidedDecoder<double>;

}  // namespace foba
