#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "pgc/common.hpp"

namespace pgc {

/// Dense rank-3 feature array, channels x height x width, row-major per channel.
template <typename T>
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int c, int h, int w, T fill = T(0))
        : channels(c), height(h), width(w),
          v(static_cast<std::size_t>(c) * h * w, fill) {
        require(c >= 1 && h >= 1 && w >= 1, "Tensor: dims must be >= 1");
    }

    T& at(int c, int i, int j) {
        return v[(static_cast<std::size_t>(c) * height + i) * width + j];
    }
    T at(int c, int i, int j) const {
        return v[(static_cast<std::size_t>(c) * height + i) * width + j];
    }

    std::size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

/// Dense 2-D scalar field (perspective maps, blur maps, density maps).
template <typename T>
struct Map {
    int height = 0;
    int width = 0;
    std::vector<T> v;

    Map() = default;
    Map(int h, int w, T fill = T(0))
        : height(h), width(w), v(static_cast<std::size_t>(h) * w, fill) {
        require(h >= 1 && w >= 1, "Map: dims must be >= 1");
    }

    T& at(int i, int j) { return v[static_cast<std::size_t>(i) * width + j]; }
    T at(int i, int j) const { return v[static_cast<std::size_t>(i) * width + j]; }

    std::size_t size() const { return v.size(); }
    bool same_shape(const Map& o) const {
        return height == o.height && width == o.width;
    }
};

template <typename T>
double rel_l2_error(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "rel_l2_error: shape mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < a.v.size(); ++k) {
        const double d = static_cast<double>(a.v[k]) - static_cast<double>(b.v[k]);
        num += d * d;
        den += static_cast<double>(b.v[k]) * static_cast<double>(b.v[k]);
    }
    if (den == 0.0) return std::sqrt(num);
    return std::sqrt(num / den);
}

template <typename T, typename U>
Tensor<T> tensor_cast(const Tensor<U>& x) {
    Tensor<T> y(x.channels, x.height, x.width);
    for (std::size_t k = 0; k < x.v.size(); ++k) y.v[k] = static_cast<T>(x.v[k]);
    return y;
}

template <typename T, typename U>
Map<T> map_cast(const Map<U>& x) {
    Map<T> y(x.height, x.width);
    for (std::size_t k = 0; k < x.v.size(); ++k) y.v[k] = static_cast<T>(x.v[k]);
    return y;
}

using Tensorf = Tensor<float>;
using Mapf = Map<float>;

}  // namespace pgc
