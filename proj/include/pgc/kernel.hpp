#pragma once

#include <cmath>
#include <vector>

#include "pgc/common.hpp"

namespace pgc {

enum class NormalizationMode {
    PaperEq4,  // literal 1/(sqrt(2*pi)*sigma) prefactor
    UnitSum    // rescaled so the KxK sum is exactly 1
};

constexpr double kSigmaDirac = 1e-6;  // sigma at or below this is the Dirac limit

/// Square KxK filter, center at (K/2, K/2). Weights kept in double; values are
/// rounded to float only at serialization boundaries.
struct Kernel {
    int size = 0;
    std::vector<double> w;

    Kernel() = default;
    explicit Kernel(int k) : size(k), w(static_cast<std::size_t>(k) * k, 0.0) {}

    double& at(int i, int j) { return w[static_cast<std::size_t>(i) * size + j]; }
    double at(int i, int j) const { return w[static_cast<std::size_t>(i) * size + j]; }
};

/// Sampled isotropic Gaussian. Sigma at or below kSigmaDirac yields the Dirac
/// kernel in both normalization modes.
inline Kernel gaussian_kernel(int k, double sigma, NormalizationMode mode) {
    require(k >= 1 && k % 2 == 1, "gaussian_kernel: K must be odd and >= 1");
    require(sigma >= 0.0, "gaussian_kernel: sigma must be nonnegative");
    Kernel g(k);
    const int r = k / 2;
    if (sigma <= kSigmaDirac) {
        g.at(r, r) = 1.0;
        return g;
    }
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const double r2 = double((i - r) * (i - r) + (j - r) * (j - r));
            const double e = std::exp(-r2 * inv2s2);
            g.at(i, j) = e;
            sum += e;
        }
    }
    if (mode == NormalizationMode::UnitSum) {
        for (double& x : g.w) x /= sum;
    } else {
        const double pref = 1.0 / (std::sqrt(2.0 * M_PI) * sigma);
        for (double& x : g.w) x *= pref;
    }
    return g;
}

/// d/dsigma of gaussian_kernel at the same (k, sigma, mode). Undefined in the
/// Dirac regime; callers gate on sigma > kSigmaDirac.
inline Kernel gaussian_kernel_dsigma(int k, double sigma, NormalizationMode mode) {
    require(k >= 1 && k % 2 == 1, "gaussian_kernel_dsigma: K must be odd");
    require(sigma > kSigmaDirac, "gaussian_kernel_dsigma: sigma too small");
    Kernel d(k);
    const int r = k / 2;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const double inv_s3 = 1.0 / (sigma * sigma * sigma);
    std::vector<double> e(static_cast<std::size_t>(k) * k);
    std::vector<double> de(e.size());  // d/dsigma of the raw exponentials
    double sum = 0.0, dsum = 0.0;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const double r2 = double((i - r) * (i - r) + (j - r) * (j - r));
            const std::size_t idx = static_cast<std::size_t>(i) * k + j;
            e[idx] = std::exp(-r2 * inv2s2);
            de[idx] = e[idx] * r2 * inv_s3;
            sum += e[idx];
            dsum += de[idx];
        }
    }
    if (mode == NormalizationMode::UnitSum) {
        // d/dsigma (e/sum) = de/sum - e*dsum/sum^2
        for (std::size_t idx = 0; idx < e.size(); ++idx)
            d.w[idx] = de[idx] / sum - e[idx] * dsum / (sum * sum);
    } else {
        const double pref = 1.0 / (std::sqrt(2.0 * M_PI) * sigma);
        for (std::size_t idx = 0; idx < e.size(); ++idx)
            d.w[idx] = pref * (de[idx] - e[idx] / sigma);
    }
    return d;
}

}  // namespace pgc
