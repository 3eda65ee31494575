#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "foba/rng.hpp"
#include "foba/tensor.hpp"

namespace foba {

enum class Init {
    zeros,
    ones,
    kaiming_uniform,
    custom,  // created zeroed, filled by the owning module
};

template <typename T>
struct ParamTensor {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = true;
    Init init_scheme = Init::zeros;
};

// Owns every learnable tensor of a model. Pointers stay stable (unique_ptr
// per entry) so graphs and the optimizer can hold them across steps;
// creation order is the canonical order for checkpoints.
template <typename T>
class ParamStore {
public:
    // fan_in < 0 means "infer as numel / dims[0]", which is right for both
    // conv [co,ci,kh,kw] and linear [out,in] weights.
    ParamTensor<T>& create(const std::string& name, std::vector<int> dims,
                           Init scheme, Rng& rng, int64_t fan_in = -1) {
        if (index_.count(name))
            throw Error("duplicate parameter name: " + name);
        auto p = std::make_unique<ParamTensor<T>>();
        p->name = name;
        p->value = Tensor<T>(dims);
        p->grad = Tensor<T>(std::move(dims));
        p->init_scheme = scheme;
        switch (scheme) {
            case Init::zeros:
            case Init::custom:
                break;
            case Init::ones:
                p->value.fill(T(1));
                break;
            case Init::kaiming_uniform: {
                int64_t fi = fan_in >= 0
                                 ? fan_in
                                 : (p->value.numel() / std::max(1, p->value.dim(0)));
                double bound = std::sqrt(6.0 / static_cast<double>(std::max<int64_t>(1, fi)));
                for (int64_t i = 0; i < p->value.numel(); ++i)
                    p->value[i] = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
        }
        index_[name] = items_.size();
        items_.push_back(std::move(p));
        return *items_.back();
    }

    ParamTensor<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second].get();
    }

    ParamTensor<T>& at(const std::string& name) {
        if (auto* p = find(name)) return *p;
        throw Error("unknown parameter: " + name);
    }

    size_t size() const { return items_.size(); }
    ParamTensor<T>& operator[](size_t i) { return *items_[i]; }
    const ParamTensor<T>& operator[](size_t i) const { return *items_[i]; }

    int64_t count_trainable() const {
        int64_t n = 0;
        for (const auto& p : items_)
            if (p->requires_grad) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : items_) p->grad.fill(T(0));
    }

    // Test hook: collapses a subtree of the model to its residual identity.
    void zero_values_with_prefix(const std::string& prefix) {
        for (auto& p : items_)
            if (p->name.rfind(prefix, 0) == 0) p->value.fill(T(0));
    }

    void set_trainable_with_prefix(const std::string& prefix, bool on) {
        for (auto& p : items_)
            if (p->name.rfind(prefix, 0) == 0) p->requires_grad = on;
    }

    bool all_grads_finite() const {
        for (const auto& p : items_)
            if (p->requires_grad && !all_finite(p->grad)) return false;
        return true;
    }

private:
    std::vector<std::unique_ptr<ParamTensor<T>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace foba
