#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "condseg/common.hpp"

namespace condseg {

// Every array in the project is rank-4 (batch, channel, height, width).
// Weights reuse the same layout: conv kernels are (Cout, Cin, kh, kw),
// biases (1, C, 1, 1), scalars (1, 1, 1, 1).
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    Shape() = default;
    Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

    std::size_t count() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.count(), fill) {}

    static Tensor zeros(Shape s) { return Tensor(s, T(0)); }
    static Tensor full(Shape s, T v) { return Tensor(s, v); }
    static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

    std::size_t size() const { return data.size(); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) *
                   shape.w +
               w;
    }
    T& at(int n, int c, int h, int w) { return data[index(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const {
        return data[index(n, c, h, w)];
    }

    // Contiguous (C,H,W) block of one sample.
    T* sample(int n) {
        return data.data() + static_cast<std::size_t>(n) * shape.c * shape.h *
                                 shape.w;
    }
    const T* sample(int n) const {
        return data.data() + static_cast<std::size_t>(n) * shape.c * shape.h *
                                 shape.w;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i)
            out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape == b.shape, "max_abs_diff: shape mismatch " +
                                    a.shape.str() + " vs " + b.shape.str());
    T m = T(0);
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && a.data == b.data;
}

inline void check_same_shape(const Shape& a, const Shape& b,
                             const char* what) {
    require(a == b, std::string(what) + ": shape mismatch " + a.str() +
                        " vs " + b.str());
}

}  // namespace condseg
