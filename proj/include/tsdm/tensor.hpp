#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace tsdm {

/// Dense row-major tensor of rank 1..3. Small fixed-rank container used for
/// model parameters, activations and gradients.
template <typename T>
struct Tensor {
    int rank = 0;
    std::array<int, 3> dims{0, 0, 0};
    std::vector<T> v;

    Tensor() = default;

    static Tensor d1(int a) { return Tensor(1, {a, 1, 1}); }
    static Tensor d2(int a, int b) { return Tensor(2, {a, b, 1}); }
    static Tensor d3(int a, int b, int c) { return Tensor(3, {a, b, c}); }

    std::size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator()(int i) { return v[static_cast<std::size_t>(i)]; }
    const T& operator()(int i) const { return v[static_cast<std::size_t>(i)]; }

    T& operator()(int i, int j) { return v[static_cast<std::size_t>(i) * dims[1] + j]; }
    const T& operator()(int i, int j) const { return v[static_cast<std::size_t>(i) * dims[1] + j]; }

    T& operator()(int i, int j, int k) {
        return v[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k];
    }
    const T& operator()(int i, int j, int k) const {
        return v[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k];
    }

    /// Pointer to row (i, j, :) of a rank-3 tensor.
    T* row(int i, int j) { return v.data() + (static_cast<std::size_t>(i) * dims[1] + j) * dims[2]; }
    const T* row(int i, int j) const {
        return v.data() + (static_cast<std::size_t>(i) * dims[1] + j) * dims[2];
    }

    bool same_shape(const Tensor& o) const { return rank == o.rank && dims == o.dims; }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.rank = rank;
        out.dims = dims;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

  private:
    Tensor(int r, std::array<int, 3> d) : rank(r), dims(d) {
        for (int i = 0; i < 3; ++i)
            if (d[i] < 0) throw std::invalid_argument("tensor: negative dimension");
        v.assign(static_cast<std::size_t>(d[0]) * d[1] * d[2], T(0));
    }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    Tensor<T> out = t;
    out.fill(T(0));
    return out;
}

}  // namespace tsdm
