#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/dictionary.hpp"
#include "pgc/tensor.hpp"
#include "pgc/variant_filter.hpp"

namespace pgc {

struct BenchReport {
    int channels = 0, height = 0, width = 0;
    DictionaryConfig dict_config;
    int reps = 0;
    std::uint64_t seed = 0;
    double exact_median_ms = 0.0, exact_min_ms = 0.0, exact_max_ms = 0.0;
    double approx_median_ms = 0.0, approx_min_ms = 0.0, approx_max_ms = 0.0;
    double speedup = 0.0;
    std::uint64_t input_checksum = 0;
    std::vector<double> exact_ms;   // per-rep timings
    std::vector<double> approx_ms;
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// FNV-1a over the float bit patterns
inline std::uint64_t checksum_floats(const std::vector<float>& v) {
    std::uint64_t h = 1469598103934665603ull;
    for (float f : v) {
        std::uint32_t bits;
        static_assert(sizeof(bits) == sizeof(f));
        std::memcpy(&bits, &f, sizeof(bits));
        for (int b = 0; b < 4; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace detail

/// Times the exact and low-rank filter paths on identical random inputs with
/// a row-constant sigma map spanning the dictionary's grid range.
inline BenchReport bench_filter(int channels, int height, int width,
                                const KernelDictionary& dict, int reps, std::uint64_t seed) {
    require(reps >= 3, "bench_filter: reps must be >= 3");
    require(channels >= 1 && height >= 1 && width >= 1, "bench_filter: dims must be >= 1");

    Rng rng(seed);
    Tensorf x(channels, height, width);
    for (float& v : x.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    Mapf sigma(height, width);
    for (int i = 0; i < height; ++i) {
        const double frac = height > 1 ? double(i) / (height - 1) : 0.0;
        const float s = static_cast<float>(dict.config.sigma_min +
                                           frac * (dict.config.sigma_max - dict.config.sigma_min));
        for (int j = 0; j < width; ++j) sigma.at(i, j) = s;
    }

    BenchReport rep;
    rep.channels = channels;
    rep.height = height;
    rep.width = width;
    rep.dict_config = dict.config;
    rep.reps = reps;
    rep.seed = seed;
    rep.input_checksum = detail::checksum_floats(x.v);

    using clock = std::chrono::steady_clock;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = clock::now();
        Tensorf ye = filter_exact(x, sigma, dict.config.kernel_size, dict.config.mode,
                                  PaddingMode::Replicate);
        const auto t1 = clock::now();
        Tensorf ya = filter_approx(x, sigma, dict, PaddingMode::Replicate);
        const auto t2 = clock::now();
        rep.exact_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        rep.approx_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
        // keep the results alive so the compiler cannot elide the work
        if (ye.v[0] == 12345.0f && ya.v[0] == 54321.0f) rep.reps = -1;
    }
    rep.exact_median_ms = detail::median_of(rep.exact_ms);
    rep.exact_min_ms = *std::min_element(rep.exact_ms.begin(), rep.exact_ms.end());
    rep.exact_max_ms = *std::max_element(rep.exact_ms.begin(), rep.exact_ms.end());
    rep.approx_median_ms = detail::median_of(rep.approx_ms);
    rep.approx_min_ms = *std::min_element(rep.approx_ms.begin(), rep.approx_ms.end());
    rep.approx_max_ms = *std::max_element(rep.approx_ms.begin(), rep.approx_ms.end());
    rep.speedup = rep.approx_median_ms > 0.0 ? rep.exact_median_ms / rep.approx_median_ms : 0.0;
    return rep;
}

}  // namespace pgc
