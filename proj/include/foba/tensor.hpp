#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <vector>

#include "foba/errors.hpp"

namespace foba {

// Dense row-major tensor. Rank is dynamic but in practice everything in this
// codebase is rank 1..4: vectors [n], matrices [r,c], feature maps [c,h,w]
// and conv weights [co,ci,kh,kw].
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
        v_.assign(static_cast<size_t>(numel_of(dims_)), T(0));
    }

    Tensor(std::initializer_list<int> dims, std::vector<T> values)
        : dims_(dims), v_(std::move(values)) {
        if (static_cast<int64_t>(v_.size()) != numel_of(dims_))
            throw ShapeMismatch("tensor literal size does not match shape");
    }

    static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<int> dims, T value) {
        Tensor t(std::move(dims));
        std::fill(t.v_.begin(), t.v_.end(), value);
        return t;
    }

    static Tensor scalar(T value) {
        Tensor t({1});
        t.v_[0] = value;
        return t;
    }

    int rank() const { return static_cast<int>(dims_.size()); }

    int dim(int i) const { return dims_[static_cast<size_t>(i)]; }

    const std::vector<int>& dims() const { return dims_; }

    int64_t numel() const { return static_cast<int64_t>(v_.size()); }

    bool empty() const { return v_.empty(); }

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }

    std::vector<T>& vec() { return v_; }
    const std::vector<T>& vec() const { return v_; }

    T& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    // [r,c] accessor
    T& at(int r, int c) { return v_[static_cast<size_t>(r) * dims_[1] + c]; }
    const T& at(int r, int c) const { return v_[static_cast<size_t>(r) * dims_[1] + c]; }

    // [c,h,w] accessor
    T& at(int c, int y, int x) {
        return v_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
    }
    const T& at(int c, int y, int x) const {
        return v_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
    }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    void fill(T value) { std::fill(v_.begin(), v_.end(), value); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
        os << ']';
        return os.str();
    }

    static int64_t numel_of(const std::vector<int>& dims) {
        int64_t n = 1;
        for (int d : dims) {
            if (d < 0) throw ShapeMismatch("negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> dims_;
    std::vector<T> v_;
};

template <typename Dst, typename Src>
Tensor<Dst> tensor_cast(const Tensor<Src>& src) {
    Tensor<Dst> out(src.dims());
    for (int64_t i = 0; i < src.numel(); ++i) out[i] = static_cast<Dst>(src[i]);
    return out;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(static_cast<double>(t[i]))) return false;
    return true;
}

}  // namespace foba
