#include "foba/gif.hpp"

#include <string>

#include "foba/errors.hpp"

namespace foba {

template <typename T>
GatedConvBlock<T>::GatedConvBlock(ParamStore<T>& ps, int channels, int reduction, int gn_groups,
                                  Rng& rng, std::string prefix)
    : ps_(&ps),
      channels_(channels),
      reduced_(channels / reduction),
      gn_groups_(gn_groups),
      prefix_(std::move(prefix)) {
    if (reduction < 1 || channels % reduction != 0)
        throw ChannelMismatch("gated block: reduction must divide the channel count");
    if (gn_groups < 1 || channels % gn_groups != 0)
        throw GroupMismatch("gated block: gn_groups must divide the channel count");
    const std::string p = prefix_ + ".";
    ps.create(p + "down.w", {reduced_, channels_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "dw.w", {reduced_, 1, 3, 3}, Init::kaiming_uniform, rng);
    ps.create(p + "up.w", {channels_, reduced_, 1, 1}, Init::kaiming_uniform, rng);
    ps.create(p + "gn.gamma", {channels_}, Init::ones, rng);
    ps.create(p + "gn.beta", {channels_}, Init::zeros, rng);
}

template <typename T>
typename Graph<T>::V GatedConvBlock<T>::forward(Graph<T>& g, typename Graph<T>::V x) const {
    using V = typename Graph<T>::V;
    const Tensor<T>& xv = g.val(x);
    if (xv.rank() != 3 || xv.dim(0) != channels_)
        throw ChannelMismatch("gated block: expected " + std::to_string(channels_) +
                              " channels, got " + std::to_string(xv.rank() == 3 ? xv.dim(0) : -1));
    auto& ps = *ps_;
    const std::string p = prefix_ + ".";
    const V none = Graph<T>::none;
    V t = g.conv2d(x, g.param(ps.at(p + "down.w")), none, ConvSpec{1, 0, 1});
    t = g.conv2d(t, g.param(ps.at(p + "dw.w")), none, ConvSpec{1, 1, reduced_});
    t = g.conv2d(t, g.param(ps.at(p + "up.w")), none, ConvSpec{1, 0, 1});
    t = g.group_norm(t, g.param(ps.at(p + "gn.gamma")), g.param(ps.at(p + "gn.beta")),
                     gn_groups_);
    return g.relu(t);
}

template <typename T>
GatedDirection<T>::GatedDirection(ParamStore<T>& ps, int channels, int reduction, int gn_groups,
                                  Rng& rng, std::string prefix)
    : e1_(ps, channels, reduction, gn_groups, rng, prefix + ".e1"),
      e2_(ps, channels, reduction, gn_groups, rng, prefix + ".e2"),
      gate_(ps, channels, reduction, gn_groups, rng, prefix + ".gate"),
      out_(ps, channels, reduction, gn_groups, rng, prefix + ".out"),
      channels_(channels) {}

template <typename T>
typename Graph<T>::V GatedDirection<T>::forward(Graph<T>& g, typename Graph<T>::V i1,
                                                typename Graph<T>::V i2) const {
    using V = typename Graph<T>::V;
    if (g.val(i1).dims() != g.val(i2).dims())
        throw ShapeMismatch("gated direction: the two date features must share a shape");
    V f_e = e2_.forward(g, e1_.forward(g, i1));
    V f_gate = gate_.forward(g, i2);
    V fused = g.mul(f_e, f_gate);
    return g.add(out_.forward(g, fused), i1);
}

template <typename T>
GatedFusion<T>::GatedFusion(ParamStore<T>& ps, int channels, int reduction, int gn_groups,
                            Rng& rng, std::string prefix)
    : fwd_(ps, channels, reduction, gn_groups, rng, prefix + ".fwd"),
      rev_(ps, channels, reduction, gn_groups, rng, prefix + ".rev") {}

template <typename T>
typename Graph<T>::V GatedFusion<T>::forward(Graph<T>& g, typename Graph<T>::V i1,
                                             typename Graph<T>::V i2) const {
    return g.concat_ch(fwd_.forward(g, i1, i2), rev_.forward(g, i2, i1));
}

template <typename T>
typename Graph<T>::V fusion_bypass(Graph<T>& g, typename Graph<T>::V i1,
                                   typename Graph<T>::V i2) {
    if (g.val(i1).dims() != g.val(i2).dims())
        throw ShapeMismatch("fusion bypass: the two date features must share a shape");
    return g.concat_ch(i1, i2);
}

template class GatedConvBlock<float>;
template class GatedConvBlock<double>;
template class GatedDirection<float>;
template class GatedDirection<double>;
template class GatedFusion<float>;
template class GatedFusion<double>;
template typename Graph<float>::V fusion_bypass<float>(Graph<float>&, typename Graph<float>::V,
                                                       typename Graph<float>::V);
template typename Graph<double>::V fusion_bypass<double>(Graph<double>&,
                                                         typename Graph<double>::V,
                                                         typename Graph<double>::V);

}  // namespace foba
