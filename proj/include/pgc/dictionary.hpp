#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/kernel.hpp"
#include "pgc/svd.hpp"

namespace pgc {

struct DictionaryConfig {
    int kernel_size = 7;           // K, odd
    double sigma_min = 0.25;       // c
    double sigma_max = 1.75;       // d
    double sigma_step = 0.05;      // s
    NormalizationMode mode = NormalizationMode::UnitSum;
    double energy_threshold = 0.999;

    void validate() const {
        require(kernel_size >= 1 && kernel_size % 2 == 1,
                "DictionaryConfig: kernel_size must be odd and >= 1");
        require(sigma_min > 0.0 && sigma_min <= sigma_max,
                "DictionaryConfig: need 0 < sigma_min <= sigma_max");
        require(sigma_step > 0.0, "DictionaryConfig: sigma_step must be > 0");
        require(energy_threshold > 0.0 && energy_threshold <= 1.0,
                "DictionaryConfig: energy_threshold must be in (0,1]");
    }
};

/// Sampled Gaussian candidates plus the retained orthonormal eigen-basis.
/// Built in 64-bit, stored in 32-bit; immutable after construction.
struct KernelDictionary {
    DictionaryConfig config;
    std::vector<double> sigma_grid;        // N sigmas, ascending
    std::vector<float> candidates;         // N x K^2, row-major
    std::vector<float> eigen_kernels;      // C x K^2, orthonormal rows
    std::vector<double> singular_values;   // min(N, K^2), descending
    int retained_count = 0;                // C
    double energy_ratio = 0.0;

    int grid_size() const { return static_cast<int>(sigma_grid.size()); }
    int kernel_area() const { return config.kernel_size * config.kernel_size; }

    const float* eigen_row(int q) const {
        return eigen_kernels.data() + static_cast<std::size_t>(q) * kernel_area();
    }
    const float* candidate_row(int i) const {
        return candidates.data() + static_cast<std::size_t>(i) * kernel_area();
    }
};

/// PCA explained-variance ratio of the top-C components (squared singular
/// values; this is the accounting under which the default family preserves
/// 99.9% with C = (K+1)/2).
inline double energy_preserved(const KernelDictionary& dict, int c) {
    const int n = static_cast<int>(dict.singular_values.size());
    require(c >= 1 && c <= n, "energy_preserved: C out of range");
    double top = 0.0, total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double s2 = dict.singular_values[i] * dict.singular_values[i];
        total += s2;
        if (i < c) top += s2;
    }
    return total > 0.0 ? top / total : 1.0;
}

inline KernelDictionary build_dictionary(const DictionaryConfig& cfg) {
    cfg.validate();
    KernelDictionary dict;
    dict.config = cfg;

    const int n_grid =
        static_cast<int>(std::floor((cfg.sigma_max - cfg.sigma_min) / cfg.sigma_step + 1e-9)) + 1;
    require(n_grid >= 1, "build_dictionary: degenerate sigma grid");
    for (int i = 0; i < n_grid; ++i)
        dict.sigma_grid.push_back(cfg.sigma_min + i * cfg.sigma_step);

    const int k = cfg.kernel_size;
    const int area = k * k;
    std::vector<double> rows(static_cast<std::size_t>(n_grid) * area);
    dict.candidates.resize(rows.size());
    for (int i = 0; i < n_grid; ++i) {
        const Kernel g = gaussian_kernel(k, dict.sigma_grid[i], cfg.mode);
        for (int t = 0; t < area; ++t) {
            rows[static_cast<std::size_t>(i) * area + t] = g.w[t];
            dict.candidates[static_cast<std::size_t>(i) * area + t] = static_cast<float>(g.w[t]);
        }
    }

    SvdResult svd = svd_small(rows, n_grid, area);
    dict.singular_values = svd.singular_values;

    // C starts at (K+1)/2 (the isotropy-motivated default) and grows only if
    // that many components fail the energy threshold.
    int c_retained = std::min((k + 1) / 2, svd.count);
    while (c_retained < svd.count && energy_preserved(dict, c_retained) < cfg.energy_threshold)
        ++c_retained;
    dict.retained_count = c_retained;
    dict.energy_ratio = energy_preserved(dict, c_retained);

    // Sign convention: largest-magnitude entry of each eigen-kernel positive.
    dict.eigen_kernels.resize(static_cast<std::size_t>(c_retained) * area);
    for (int q = 0; q < c_retained; ++q) {
        const double* v = svd.right_vectors.data() + static_cast<std::size_t>(q) * area;
        int arg = 0;
        for (int t = 1; t < area; ++t)
            if (std::abs(v[t]) > std::abs(v[arg])) arg = t;
        const double sign = v[arg] < 0.0 ? -1.0 : 1.0;
        for (int t = 0; t < area; ++t)
            dict.eigen_kernels[static_cast<std::size_t>(q) * area + t] =
                static_cast<float>(sign * v[t]);
    }
    return dict;
}

inline std::vector<double> eigen_row_sums(const KernelDictionary& dict) {
    const int area = dict.kernel_area();
    std::vector<double> sums(dict.retained_count, 0.0);
    for (int q = 0; q < dict.retained_count; ++q) {
        const float* e = dict.eigen_row(q);
        double acc = 0.0;
        for (int t = 0; t < area; ++t) acc += double(e[t]);
        sums[q] = acc;
    }
    return sums;
}

/// Projection coefficients <G_q, G_sigma> after clamping sigma into the grid
/// range. Callers handle the Dirac regime (sigma <= kSigmaDirac) themselves.
inline std::vector<double> projection_coefficients(const KernelDictionary& dict, double sigma) {
    require(sigma >= 0.0, "projection_coefficients: sigma must be nonnegative");
    const double s = std::clamp(sigma, dict.config.sigma_min, dict.config.sigma_max);
    const Kernel g = gaussian_kernel(dict.config.kernel_size, s, dict.config.mode);
    const int area = dict.kernel_area();
    std::vector<double> u(dict.retained_count, 0.0);
    for (int q = 0; q < dict.retained_count; ++q) {
        const float* e = dict.eigen_row(q);
        double acc = 0.0;
        for (int t = 0; t < area; ++t) acc += double(e[t]) * g.w[t];
        u[q] = acc;
    }
    return u;
}

/// d/dsigma of projection_coefficients; zero outside the open grid interval
/// (the clamp is flat there).
inline std::vector<double> projection_coefficients_dsigma(const KernelDictionary& dict,
                                                          double sigma) {
    std::vector<double> du(dict.retained_count, 0.0);
    if (sigma <= dict.config.sigma_min || sigma >= dict.config.sigma_max) return du;
    const Kernel dg = gaussian_kernel_dsigma(dict.config.kernel_size, sigma, dict.config.mode);
    const int area = dict.kernel_area();
    for (int q = 0; q < dict.retained_count; ++q) {
        const float* e = dict.eigen_row(q);
        double acc = 0.0;
        for (int t = 0; t < area; ++t) acc += double(e[t]) * dg.w[t];
        du[q] = acc;
    }
    return du;
}

/// Low-rank reconstruction sum_q <G_q, G_sigma> G_q.
inline Kernel reconstruct_kernel(const KernelDictionary& dict, double sigma) {
    const std::vector<double> u = projection_coefficients(dict, sigma);
    Kernel out(dict.config.kernel_size);
    const int area = dict.kernel_area();
    for (int q = 0; q < dict.retained_count; ++q) {
        const float* e = dict.eigen_row(q);
        for (int t = 0; t < area; ++t) out.w[t] += u[q] * double(e[t]);
    }
    return out;
}

}  // namespace pgc
