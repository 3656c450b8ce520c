#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/perspective.hpp"
#include "pgc/tensor.hpp"

namespace pgc {

struct Dot {
    double x = 0.0;  // column, sub-pixel
    double y = 0.0;  // row, sub-pixel
};

using DotAnnotations = std::vector<Dot>;

struct RoiMask {
    int height = 0, width = 0;
    std::vector<std::uint8_t> v;

    RoiMask() = default;
    RoiMask(int h, int w, bool fill = true)
        : height(h), width(w), v(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}
    bool at(int i, int j) const { return v[static_cast<std::size_t>(i) * width + j] != 0; }
    void set(int i, int j, bool val) {
        v[static_cast<std::size_t>(i) * width + j] = val ? 1 : 0;
    }
};

/// Ground-truth density: one Gaussian (std sigma, default 0.5) per dot,
/// renormalized over its in-image support so the map sums to exactly |dots|.
template <typename T = float>
Map<T> make_density(const DotAnnotations& dots, int h, int w, double sigma = 0.5) {
    Map<T> out(h, w);
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
    for (const Dot& d : dots) {
        require(d.x >= 0.0 && d.x < double(w) && d.y >= 0.0 && d.y < double(h),
                "make_density: dot out of image bounds");
        const int ci = static_cast<int>(std::floor(d.y));
        const int cj = static_cast<int>(std::floor(d.x));
        const int i0 = std::max(0, ci - radius), i1 = std::min(h - 1, ci + radius);
        const int j0 = std::max(0, cj - radius), j1 = std::min(w - 1, cj + radius);
        double mass = 0.0;
        std::vector<double> weights;
        weights.reserve(static_cast<std::size_t>(i1 - i0 + 1) * (j1 - j0 + 1));
        for (int i = i0; i <= i1; ++i) {
            for (int j = j0; j <= j1; ++j) {
                const double dy = (i + 0.5) - (d.y + 0.5);
                const double dx = (j + 0.5) - (d.x + 0.5);
                const double e = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                weights.push_back(e);
                mass += e;
            }
        }
        std::size_t t = 0;
        for (int i = i0; i <= i1; ++i)
            for (int j = j0; j <= j1; ++j)
                out.at(i, j) += static_cast<T>(weights[t++] / mass);
    }
    return out;
}

template <typename T>
double count(const Map<T>& d, const std::optional<RoiMask>& roi = std::nullopt) {
    if (roi) {
        require(roi->height == d.height && roi->width == d.width, "count: roi shape mismatch");
        double acc = 0.0;
        for (int i = 0; i < d.height; ++i)
            for (int j = 0; j < d.width; ++j)
                if (roi->at(i, j)) acc += d.at(i, j);
        return acc;
    }
    double acc = 0.0;
    for (T x : d.v) acc += x;
    return acc;
}

/// MAE and MSE in the crowd-counting convention (MSE takes the root).
inline std::pair<double, double> mae_mse(const std::vector<double>& pred,
                                         const std::vector<double>& gt) {
    require(pred.size() == gt.size(), "mae_mse: length mismatch");
    require(!pred.empty(), "mae_mse: empty input");
    double abs_acc = 0.0, sq_acc = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        const double d = pred[k] - gt[k];
        abs_acc += std::abs(d);
        sq_acc += d * d;
    }
    const double n = double(pred.size());
    return {abs_acc / n, std::sqrt(sq_acc / n)};
}

/// Sum-pooling by an integer factor; total count is preserved exactly.
template <typename T>
Map<T> block_sum_downsample(const Map<T>& m, int factor) {
    require(factor >= 1, "block_sum_downsample: factor must be >= 1");
    require(m.height % factor == 0 && m.width % factor == 0,
            "block_sum_downsample: dims must be divisible by factor");
    Map<T> out(m.height / factor, m.width / factor);
    for (int i = 0; i < m.height; ++i)
        for (int j = 0; j < m.width; ++j)
            out.at(i / factor, j / factor) += m.at(i, j);
    return out;
}

/// Synthetic sample: image, dot annotations, ground-truth density and
/// perspective, optional ROI.
struct Scene {
    Tensorf image;           // 3 x H x W
    DotAnnotations dots;
    Mapf gt_density;         // H x W
    Mapf gt_perspective;     // H x W
    std::optional<RoiMask> roi;
    int requested_count = 0;
    int placed_count = 0;    // may be lower if packing was infeasible
};

/// Generates a scene with a vertical perspective ramp: heads are discs whose
/// radius follows radius = head_scale * p(row), denser toward the far
/// (small-perspective) rows. Deterministic given the seed.
inline Scene synth_scene(int h, int w, int count, std::uint64_t seed,
                         double head_scale = 1.0, double base = 0.5, double slope = 0.0,
                         double noise_amp = 0.0) {
    require(h >= 32 && w >= 32, "synth_scene: dims must be >= 32");
    require(count >= 0, "synth_scene: count must be >= 0");
    if (slope == 0.0) slope = 3.0 / double(h);  // default ramp spans base .. base+3

    Scene scene;
    scene.requested_count = count;
    scene.gt_perspective = synth_perspective<float>(h, w, base, slope, noise_amp, seed * 2 + 1);
    scene.image = Tensorf(3, h, w, 0.0f);

    Rng rng(seed);
    // Bias head rows toward the top (small perspective, far away, small heads):
    // row ~ h * u^1.5 keeps more mass at small row indices.
    int placed = 0;
    for (int n = 0; n < count; ++n) {
        bool ok = false;
        for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
            const double u = rng.uniform();
            const double row = std::pow(u, 1.5) * (h - 1);
            const double col = rng.uniform() * (w - 1);
            const int ri = static_cast<int>(row);
            const double p = scene.gt_perspective.at(std::clamp(ri, 0, h - 1), 0);
            const double radius = head_scale * p;
            if (radius >= std::min(h, w) / 2.0) continue;  // cannot fit, retry
            // render an anti-aliased disc, additive, channel-weighted
            const int i0 = std::max(0, int(std::floor(row - radius - 1)));
            const int i1 = std::min(h - 1, int(std::ceil(row + radius + 1)));
            const int j0 = std::max(0, int(std::floor(col - radius - 1)));
            const int j1 = std::min(w - 1, int(std::ceil(col + radius + 1)));
            for (int i = i0; i <= i1; ++i) {
                for (int j = j0; j <= j1; ++j) {
                    const double dy = i - row, dx = j - col;
                    const double dist = std::sqrt(dx * dx + dy * dy);
                    const double cov = std::clamp(radius - dist + 0.5, 0.0, 1.0);
                    if (cov <= 0.0) continue;
                    scene.image.at(0, i, j) += float(cov);
                    scene.image.at(1, i, j) += float(0.8 * cov);
                    scene.image.at(2, i, j) += float(0.6 * cov);
                }
            }
            scene.dots.push_back(Dot{col, row});
            ok = true;
        }
        if (ok) ++placed;
    }
    scene.placed_count = placed;
    scene.gt_density = make_density<float>(scene.dots, h, w);
    return scene;
}

}  // namespace pgc
