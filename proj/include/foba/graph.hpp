#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "foba/param.hpp"
#include "foba/tensor.hpp"

namespace foba {

struct ConvSpec {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

// Reverse-mode autodiff over dense tensors. A Graph is built fresh for each
// forward pass (define-by-run); nodes are created in topological order, so
// backward() is a reverse sweep over the node vector. Parameters entered via
// param() are memoized: a weight used twice (siamese encoder) maps to one
// node and its gradient accumulates naturally.
//
// Instantiated for float (training) and double (gradient checks, oracles).
template <typename T>
class Graph {
public:
    using V = int;
    static constexpr V none = -1;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    V input(Tensor<T> v);
    V param(ParamTensor<T>& p);

    const Tensor<T>& val(V v) const { return nodes_[static_cast<size_t>(v)].v; }
    const Tensor<T>& grad(V v);
    bool needs_grad(V v) const { return nodes_[static_cast<size_t>(v)].ng; }
    size_t size() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1, sweeps the tape, then flushes gradients of
    // parameter leaves into their ParamTensor::grad buffers.
    void backward(V root);

    // ---- ops -------------------------------------------------------------
    V conv2d(V x, V w, V b, ConvSpec spec);
    V group_norm(V x, V gamma, V beta, int n_groups, T eps = T(1e-5));
    V layer_norm_chw(V x, V gamma, V beta, T eps = T(1e-5));
    V relu(V x);
    V sigmoid(V x);
    V softplus(V x);
    V exp(V x);
    V neg(V x);
    V add(V a, V b);
    V sub(V a, V b);
    V mul(V a, V b);
    V scale(V x, T alpha);
    V matmul(V a, V b, bool ta = false, bool tb = false);
    V div_by_scalar(V x, V s);  // s: [1] tensor, y = x / s
    V softmax(V x, int axis);
    V upsample_bilinear(V x, int factor);
    V max_pool(V x, int factor);
    V concat_ch(V a, V b);
    V slice_ch(V x, int from, int to);
    V chw_to_tokens(V x);                      // [C,h,w] -> [h·w, C]
    V tokens_to_chw(V x, int h, int w);        // [h·w, C] -> [C,h,w]
    V transpose_hw(V x);                       // [C,h,w] -> [C,w,h]
    V flip_rows(V x);                          // [L,d] with rows reversed
    V row_scale(V x, V m);                     // [L,d] ⊙ m (numel L)
    V spatial_mul(V x, V m);                   // [C,h,w] ⊙ m[1,h,w]
    V complement_one(V x);                     // 1 - x
    V selective_scan(V u, V delta, V a, V b, V c, V d);
    V sum_all(V x);
    V mean_all(V x);
    V reshape(V x, std::vector<int> dims);

    // ---- fused losses ----------------------------------------------------
    V ce_loss(V logits, const Tensor<int32_t>& target);
    V bce_mask_loss(V probs, const Tensor<uint8_t>& target, T clamp_eps);
    V lovasz_softmax_loss(V probs, const Tensor<int32_t>& target);
    V masked_sqdiff_loss(V p1, V p2, const Tensor<uint8_t>& keep);

private:
    struct Node {
        Tensor<T> v;
        Tensor<T> g;
        std::function<void()> back;
        bool ng = false;
        ParamTensor<T>* sink = nullptr;
    };

    // deque: references returned by val()/grad() stay valid while the graph
    // grows
    std::deque<Node> nodes_;
    std::unordered_map<const ParamTensor<T>*, V> param_cache_;
    bool grad_enabled_ = true;

    V make(Tensor<T> v, bool ng, std::function<void()> back);
    Tensor<T>& gbuf(V v);
    bool track(std::initializer_list<V> parents) const;
    void check_same_shape(V a, V b, const char* op) const;
};

}  // namespace foba
