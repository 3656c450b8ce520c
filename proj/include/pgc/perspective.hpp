#pragma once

#include <algorithm>
#include <cmath>

#include "pgc/common.hpp"
#include "pgc/tensor.hpp"

namespace pgc {

/// Eq-1 sigmoid shape (alpha, beta) and Eq-2 affine hinge (a, p0).
template <typename T>
struct PerspectiveParams {
    T alpha = T(1);
    T beta = T(0);
    T a = T(1);   // paper init
    T p0 = T(0);  // paper init
};

template <typename T>
T stable_sigmoid(T z) {
    // saturate the exponent instead of overflowing
    if (z >= T(40)) return T(1);
    if (z <= T(-40)) return T(0);
    return T(1) / (T(1) + std::exp(-z));
}

/// p~ = 1 / (1 + exp(-alpha (p - beta))), elementwise; output in (0,1).
template <typename T>
Map<T> normalize_perspective(const Map<T>& p, const PerspectiveParams<T>& params) {
    Map<T> out(p.height, p.width);
    for (std::size_t k = 0; k < p.v.size(); ++k)
        out.v[k] = stable_sigmoid(params.alpha * (p.v[k] - params.beta));
    return out;
}

/// sigma = max(a (p~ - p0), 0), elementwise.
template <typename T>
Map<T> blur_from_perspective(const Map<T>& p_norm, const PerspectiveParams<T>& params) {
    Map<T> out(p_norm.height, p_norm.width);
    for (std::size_t k = 0; k < p_norm.v.size(); ++k)
        out.v[k] = std::max(params.a * (p_norm.v[k] - params.p0), T(0));
    return out;
}

/// Replace each row by its arithmetic mean (the whole-line postprocessing).
template <typename T>
Map<T> row_mean_collapse(const Map<T>& m) {
    Map<T> out(m.height, m.width);
    for (int i = 0; i < m.height; ++i) {
        double acc = 0.0;
        for (int j = 0; j < m.width; ++j) acc += m.at(i, j);
        const T mean = static_cast<T>(acc / m.width);
        for (int j = 0; j < m.width; ++j) out.at(i, j) = mean;
    }
    return out;
}

/// Synthetic ramp perspective: row i = base + slope*i + uniform noise.
template <typename T = float>
Map<T> synth_perspective(int h, int w, double base, double slope, double noise_amp,
                         std::uint64_t seed) {
    require(h >= 1 && w >= 1, "synth_perspective: dims must be >= 1");
    require(base > 0.0, "synth_perspective: base must be > 0");
    require(base + slope * (h - 1) > 0.0, "synth_perspective: ramp reaches nonpositive values");
    Rng rng(seed);
    Map<T> out(h, w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double val = base + slope * i + rng.uniform(-noise_amp, noise_amp);
            require(val > 0.0, "synth_perspective: noise drove a value nonpositive");
            out.at(i, j) = static_cast<T>(val);
        }
    }
    return out;
}

/// Area-average downsampling by an integer factor (perspective maps are smooth
/// fields; block averaging keeps them alias-free).
template <typename T>
Map<T> downsample_area(const Map<T>& m, int factor) {
    require(factor >= 1, "downsample_area: factor must be >= 1");
    require(m.height % factor == 0 && m.width % factor == 0,
            "downsample_area: dims must be divisible by factor");
    Map<T> out(m.height / factor, m.width / factor);
    for (int i = 0; i < out.height; ++i) {
        for (int j = 0; j < out.width; ++j) {
            double acc = 0.0;
            for (int di = 0; di < factor; ++di)
                for (int dj = 0; dj < factor; ++dj)
                    acc += m.at(i * factor + di, j * factor + dj);
            out.at(i, j) = static_cast<T>(acc / (factor * factor));
        }
    }
    return out;
}

/// Adjoint of downsample_area (each coarse gradient spreads as g / factor^2).
template <typename T>
Map<T> downsample_area_backward(const Map<T>& grad_out, int factor, int h, int w) {
    Map<T> g(h, w);
    const T scale = T(1) / T(factor * factor);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            g.at(i, j) = grad_out.at(i / factor, j / factor) * scale;
    return g;
}

/// Adjoint of row_mean_collapse.
template <typename T>
Map<T> row_mean_collapse_backward(const Map<T>& grad_out) {
    Map<T> g(grad_out.height, grad_out.width);
    for (int i = 0; i < grad_out.height; ++i) {
        double acc = 0.0;
        for (int j = 0; j < grad_out.width; ++j) acc += grad_out.at(i, j);
        const T val = static_cast<T>(acc / grad_out.width);
        for (int j = 0; j < grad_out.width; ++j) g.at(i, j) = val;
    }
    return g;
}

/// Concrete form of the paper's "normalize p to (0,1)" initialization:
/// beta = mean(p), alpha = 4 / (max - min).
template <typename T>
void init_perspective_params(PerspectiveParams<T>& params, const Map<T>& p) {
    double mn = p.v[0], mx = p.v[0], acc = 0.0;
    for (T x : p.v) {
        mn = std::min(mn, double(x));
        mx = std::max(mx, double(x));
        acc += x;
    }
    params.beta = static_cast<T>(acc / p.v.size());
    params.alpha = mx > mn ? static_cast<T>(4.0 / (mx - mn)) : T(1);
    params.a = T(1);
    params.p0 = T(0);
}

}  // namespace pgc
