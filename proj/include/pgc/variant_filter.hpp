#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/dictionary.hpp"
#include "pgc/kernel.hpp"
#include "pgc/tensor.hpp"

namespace pgc {

enum class PaddingMode { Replicate, Zero };

/// Spatially invariant same-size convolution. Tap-major traversal keeps the
/// inner loop contiguous; the per-pixel summation order is fixed (row-major
/// over kernel taps), so results are bit-deterministic.
template <typename T>
Tensor<T> conv2d_invariant(const Tensor<T>& x, const Kernel& k, PaddingMode padding) {
    const int r = k.size / 2;
    const int h = x.height, w = x.width;
    Tensor<T> out(x.channels, h, w, T(0));
    for (int c = 0; c < x.channels; ++c) {
        const T* xp = &x.v[static_cast<std::size_t>(c) * h * w];
        T* op = &out.v[static_cast<std::size_t>(c) * h * w];
        for (int di = 0; di < k.size; ++di) {
            for (int dj = 0; dj < k.size; ++dj) {
                const T kv = static_cast<T>(k.w[di * k.size + dj]);
                const int oi = di - r, oj = dj - r;
                for (int i = 0; i < h; ++i) {
                    int ii = i + oi;
                    if (padding == PaddingMode::Replicate) ii = std::clamp(ii, 0, h - 1);
                    else if (ii < 0 || ii >= h) continue;
                    const T* __restrict xrow = xp + static_cast<std::size_t>(ii) * w;
                    T* __restrict orow = op + static_cast<std::size_t>(i) * w;
                    const int j0 = std::clamp(-oj, 0, w), j1 = std::clamp(w - oj, j0, w);
                    for (int j = j0; j < j1; ++j) orow[j] += kv * xrow[j + oj];
                    if (padding == PaddingMode::Replicate) {
                        for (int j = 0; j < j0; ++j) orow[j] += kv * xrow[0];
                        for (int j = j1; j < w; ++j) orow[j] += kv * xrow[w - 1];
                    }
                }
            }
        }
    }
    return out;
}

/// Adjoint of conv2d_invariant with respect to its input (scatter form, which
/// is also correct for replicate padding).
template <typename T>
Tensor<T> conv2d_invariant_adjoint(const Tensor<T>& grad_out, const Kernel& k,
                                   PaddingMode padding) {
    const int r = k.size / 2;
    const int h = grad_out.height, w = grad_out.width;
    Tensor<double> acc(grad_out.channels, h, w);
    for (int c = 0; c < grad_out.channels; ++c) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                const double g = grad_out.at(c, i, j);
                for (int di = -r; di <= r; ++di) {
                    for (int dj = -r; dj <= r; ++dj) {
                        int ii = i + di, jj = j + dj;
                        if (padding == PaddingMode::Replicate) {
                            ii = std::clamp(ii, 0, h - 1);
                            jj = std::clamp(jj, 0, w - 1);
                        } else if (ii < 0 || ii >= h || jj < 0 || jj >= w) {
                            continue;
                        }
                        acc.at(c, ii, jj) += k.at(di + r, dj + r) * g;
                    }
                }
            }
        }
    }
    return tensor_cast<T>(acc);
}

/// Exact spatially variant Gaussian smoothing. Deliberately the literal
/// transliteration: the kernel is re-evaluated at every output site of every
/// channel. This path is the correctness oracle, not the fast one.
template <typename T>
Tensor<T> filter_exact(const Tensor<T>& x, const Map<T>& sigma, int k, NormalizationMode mode,
                       PaddingMode padding) {
    require(sigma.height == x.height && sigma.width == x.width,
            "filter_exact: sigma map shape mismatch");
    const int r = k / 2;
    const int h = x.height, w = x.width;
    Tensor<T> out(x.channels, h, w);
    for (int c = 0; c < x.channels; ++c) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                const Kernel g = gaussian_kernel(k, double(sigma.at(i, j)), mode);
                double acc = 0.0;
                for (int di = -r; di <= r; ++di) {
                    for (int dj = -r; dj <= r; ++dj) {
                        int ii = i + di, jj = j + dj;
                        if (padding == PaddingMode::Replicate) {
                            ii = std::clamp(ii, 0, h - 1);
                            jj = std::clamp(jj, 0, w - 1);
                        } else if (ii < 0 || ii >= h || jj < 0 || jj >= w) {
                            continue;
                        }
                        acc += g.at(di + r, dj + r) * double(x.at(c, ii, jj));
                    }
                }
                out.at(c, i, j) = static_cast<T>(acc);
            }
        }
    }
    return out;
}

/// Per-pixel projections of the local target Gaussian onto the eigen-basis,
/// plus the mask of Dirac pixels (sigma <= kSigmaDirac) that bypass the
/// dictionary entirely. In UnitSum mode the deficit map carries the mass the
/// truncated basis loses (1 - sum of the reconstructed kernel); the filter
/// routes it through a box kernel so constants stay exact fixed points.
template <typename T>
struct CoefficientMaps {
    int count = 0;  // C
    int height = 0, width = 0;
    std::vector<T> maps;              // C x H x W
    std::vector<T> deficit;           // H x W, UnitSum mode only (else empty)
    std::vector<std::uint8_t> dirac;  // H x W

    T at(int q, int i, int j) const {
        return maps[(static_cast<std::size_t>(q) * height + i) * width + j];
    }
    T& at(int q, int i, int j) {
        return maps[(static_cast<std::size_t>(q) * height + i) * width + j];
    }
    T deficit_at(int i, int j) const {
        return deficit[static_cast<std::size_t>(i) * width + j];
    }
};

template <typename T>
bool rows_constant(const Map<T>& m) {
    for (int i = 0; i < m.height; ++i)
        for (int j = 1; j < m.width; ++j)
            if (m.at(i, j) != m.at(i, 0)) return false;
    return true;
}

template <typename T>
CoefficientMaps<T> coefficient_maps(const Map<T>& sigma, const KernelDictionary& dict) {
    CoefficientMaps<T> cm;
    cm.count = dict.retained_count;
    cm.height = sigma.height;
    cm.width = sigma.width;
    cm.maps.assign(static_cast<std::size_t>(cm.count) * cm.height * cm.width, T(0));
    cm.dirac.assign(static_cast<std::size_t>(cm.height) * cm.width, 0);
    const bool unit_sum = dict.config.mode == NormalizationMode::UnitSum;
    if (unit_sum)
        cm.deficit.assign(static_cast<std::size_t>(cm.height) * cm.width, T(0));
    const std::vector<double> row_sums = eigen_row_sums(dict);

    auto fill_pixel = [&](int i, int j, const std::vector<double>& u, bool is_dirac) {
        cm.dirac[static_cast<std::size_t>(i) * cm.width + j] = is_dirac ? 1 : 0;
        if (is_dirac) return;
        for (int q = 0; q < cm.count; ++q) cm.at(q, i, j) = static_cast<T>(u[q]);
        if (unit_sum) {
            double mass = 0.0;
            for (int q = 0; q < cm.count; ++q) mass += u[q] * row_sums[q];
            cm.deficit[static_cast<std::size_t>(i) * cm.width + j] = static_cast<T>(1.0 - mass);
        }
    };

    if (rows_constant(sigma)) {
        // one projection per row, broadcast along it
        std::vector<double> u;
        for (int i = 0; i < cm.height; ++i) {
            const double s = double(sigma.at(i, 0));
            const bool is_dirac = s <= kSigmaDirac;
            if (!is_dirac) u = projection_coefficients(dict, s);
            for (int j = 0; j < cm.width; ++j) fill_pixel(i, j, u, is_dirac);
        }
    } else {
        for (int i = 0; i < cm.height; ++i) {
            for (int j = 0; j < cm.width; ++j) {
                const double s = double(sigma.at(i, j));
                const bool is_dirac = s <= kSigmaDirac;
                std::vector<double> u;
                if (!is_dirac) u = projection_coefficients(dict, s);
                fill_pixel(i, j, u, is_dirac);
            }
        }
    }
    return cm;
}

template <typename T>
Kernel eigen_kernel_of(const KernelDictionary& dict, int q) {
    Kernel k(dict.config.kernel_size);
    const float* e = dict.eigen_row(q);
    for (int t = 0; t < dict.kernel_area(); ++t) k.w[t] = double(e[t]);
    return k;
}

inline Kernel box_kernel(int k) {
    Kernel b(k);
    for (double& w : b.w) w = 1.0 / (k * k);
    return b;
}

/// Intermediates of the fast path kept for the backward pass.
template <typename T>
struct FilterApproxCache {
    CoefficientMaps<T> coeff;
    std::vector<Tensor<T>> eigen_convs;  // x * G_q for each retained q
    Tensor<T> box_conv;                  // x * box (UnitSum deficit route)
};

template <typename T>
Tensor<T> filter_approx_cached(const Tensor<T>& x, const Map<T>& sigma,
                               const KernelDictionary& dict, PaddingMode padding,
                               FilterApproxCache<T>* cache) {
    require(sigma.height == x.height && sigma.width == x.width,
            "filter_approx: sigma map shape mismatch");
    CoefficientMaps<T> cm = coefficient_maps(sigma, dict);
    const int h = x.height, w = x.width;
    Tensor<double> acc(x.channels, h, w);
    std::vector<Tensor<T>> eigen_convs;
    eigen_convs.reserve(dict.retained_count);
    for (int q = 0; q < dict.retained_count; ++q) {
        Kernel gq = eigen_kernel_of<T>(dict, q);
        Tensor<T> conv = conv2d_invariant(x, gq, padding);
        for (int c = 0; c < x.channels; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    acc.at(c, i, j) += double(cm.at(q, i, j)) * double(conv.at(c, i, j));
        if (cache) eigen_convs.push_back(std::move(conv));
    }
    Tensor<T> box_conv;
    if (!cm.deficit.empty()) {
        box_conv = conv2d_invariant(x, box_kernel(dict.config.kernel_size), padding);
        for (int c = 0; c < x.channels; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    acc.at(c, i, j) += double(cm.deficit_at(i, j)) * double(box_conv.at(c, i, j));
    }
    // Dirac pixels contribute the input unchanged.
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            if (!cm.dirac[static_cast<std::size_t>(i) * w + j]) continue;
            for (int c = 0; c < x.channels; ++c) acc.at(c, i, j) = double(x.at(c, i, j));
        }
    }
    if (cache) {
        cache->coeff = std::move(cm);
        cache->eigen_convs = std::move(eigen_convs);
        cache->box_conv = std::move(box_conv);
    }
    return tensor_cast<T>(acc);
}

/// Low-rank spatially variant smoothing: sum_q u_q o (x * G_q).
template <typename T>
Tensor<T> filter_approx(const Tensor<T>& x, const Map<T>& sigma, const KernelDictionary& dict,
                        PaddingMode padding) {
    return filter_approx_cached<T>(x, sigma, dict, padding, nullptr);
}

}  // namespace pgc
