#include "foba/encoder.hpp"

#include <string>

#include "foba/errors.hpp"

namespace foba {

template <typename T>
ConvEncoder<T>::ConvEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng,
                            std::string prefix)
    : ps_(&ps), cfg_(cfg), prefix_(std::move(prefix)) {
    if (cfg_.blocks_per_stage < 1) throw ConfigError("encoder: blocks_per_stage must be >= 1");
    if (cfg_.in_channels < 1) throw ConfigError("encoder: in_channels must be >= 1");
    for (int s = 0; s < 4; ++s) {
        if (cfg_.dims[static_cast<size_t>(s)] <= 0)
            throw ConfigError("encoder: stage dims must be positive");
        if (cfg_.dims[static_cast<size_t>(s)] % cfg_.gn_groups != 0)
            throw GroupMismatch("encoder: gn_groups must divide every stage width");
    }

    const std::string p = prefix_ + ".";
    ps.create(p + "stem.w", {cfg_.dims[0], cfg_.in_channels, 4, 4}, Init::kaiming_uniform, rng);
    ps.create(p + "stem.b", {cfg_.dims[0]}, Init::zeros, rng);
    for (int s = 0; s < 4; ++s) {
        const int d = cfg_.dims[static_cast<size_t>(s)];
        const std::string sp = p + "s" + std::to_string(s) + ".";
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::string bp = sp + "b" + std::to_string(b) + ".";
            ps.create(bp + "c1.w", {d, d, 3, 3}, Init::kaiming_uniform, rng);
            ps.create(bp + "c1.b", {d}, Init::zeros, rng);
            ps.create(bp + "gn.gamma", {d}, Init::ones, rng);
            ps.create(bp + "gn.beta", {d}, Init::zeros, rng);
            ps.create(bp + "c2.w", {d, d, 3, 3}, Init::kaiming_uniform, rng);
            ps.create(bp + "c2.b", {d}, Init::zeros, rng);
        }
        if (s < 3) {
            ps.create(sp + "down.w",
                      {cfg_.dims[static_cast<size_t>(s) + 1], d, 2, 2}, Init::kaiming_uniform,
                      rng);
            ps.create(sp + "down.b", {cfg_.dims[static_cast<size_t>(s) + 1]}, Init::zeros, rng);
        }
    }
}

template <typename T>
std::array<typename Graph<T>::V, 4> ConvEncoder<T>::encode(Graph<T>& g,
                                                           typename Graph<T>::V image) const {
    using V = typename Graph<T>::V;
    const Tensor<T>& iv = g.val(image);
    if (iv.rank() != 3 || iv.dim(0) != cfg_.in_channels)
        throw ShapeMismatch("encoder: image must be [" + std::to_string(cfg_.in_channels) +
                            ",H,W]");
    if (iv.dim(1) % 32 != 0 || iv.dim(2) % 32 != 0)
        throw ShapeMismatch("encoder: H and W must be divisible by 32, got " +
                            std::to_string(iv.dim(1)) + "x" + std::to_string(iv.dim(2)));

    auto& ps = *ps_;
    const std::string p = prefix_ + ".";
    V x = g.conv2d(image, g.param(ps.at(p + "stem.w")), g.param(ps.at(p + "stem.b")),
                   ConvSpec{4, 0, 1});
    std::array<V, 4> out{};
    for (int s = 0; s < 4; ++s) {
        const std::string sp = p + "s" + std::to_string(s) + ".";
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::string bp = sp + "b" + std::to_string(b) + ".";
            V t = g.conv2d(x, g.param(ps.at(bp + "c1.w")), g.param(ps.at(bp + "c1.b")),
                           ConvSpec{1, 1, 1});
            t = g.group_norm(t, g.param(ps.at(bp + "gn.gamma")), g.param(ps.at(bp + "gn.beta")),
                             cfg_.gn_groups);
            t = g.relu(t);
            t = g.conv2d(t, g.param(ps.at(bp + "c2.w")), g.param(ps.at(bp + "c2.b")),
                         ConvSpec{1, 1, 1});
            x = g.add(x, t);
        }
        out[static_cast<size_t>(s)] = x;
        if (s < 3)
            x = g.conv2d(x, g.param(ps.at(sp + "down.w")), g.param(ps.at(sp + "down.b")),
                         ConvSpec{2, 0, 1});
    }
    return out;
}

template <typename T>
void ConvEncoder<T>::set_frozen(bool frozen) {
    ps_->set_trainable_with_prefix(prefix_ + ".", !frozen);
}

template class ConvEncoder<float>;
template class ConvEncoder<double>;

}  // namespace foba
