#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pgc/common.hpp"

namespace pgc {

/// Singular values (descending) and the matching right-singular vectors of a
/// dense row-major m x n matrix. Vector r lives at right_vectors[r*n .. r*n+n).
struct SvdResult {
    std::vector<double> singular_values;
    std::vector<double> right_vectors;
    int count = 0;  // min(m, n)
    int n = 0;
};

/// One-sided Jacobi SVD. Sized for the small candidate matrices this library
/// builds (tens of rows); everything in 64-bit.
inline SvdResult svd_small(const std::vector<double>& a, int m, int n) {
    require(m >= 1 && n >= 1, "svd_small: empty matrix");
    require(a.size() == static_cast<std::size_t>(m) * n, "svd_small: size mismatch");

    // Work on B = A^T (n x m): orthogonalizing B's columns yields A's right
    // singular vectors as the normalized columns.
    std::vector<double> b(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            b[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];

    auto col = [&](int c) { return b.data() + c; };  // stride m over rows of b
    auto dot = [&](int p, int q) {
        double s = 0.0;
        for (int r = 0; r < n; ++r)
            s += b[static_cast<std::size_t>(r) * m + p] * b[static_cast<std::size_t>(r) * m + q];
        return s;
    };
    (void)col;

    const double eps = 1e-15;
    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < m - 1; ++p) {
            for (int q = p + 1; q < m; ++q) {
                const double app = dot(p, p);
                const double aqq = dot(q, q);
                const double apq = dot(p, q);
                if (std::abs(apq) <= eps * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int r = 0; r < n; ++r) {
                    double& bp = b[static_cast<std::size_t>(r) * m + p];
                    double& bq = b[static_cast<std::size_t>(r) * m + q];
                    const double tmp = c * bp - s * bq;
                    bq = s * bp + c * bq;
                    bp = tmp;
                }
            }
        }
        if (!rotated) break;
    }

    const int k = std::min(m, n);
    std::vector<double> sigma(m);
    for (int c = 0; c < m; ++c) sigma[c] = std::sqrt(dot(c, c));

    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return sigma[x] > sigma[y]; });

    SvdResult out;
    out.count = k;
    out.n = n;
    out.singular_values.resize(k);
    out.right_vectors.assign(static_cast<std::size_t>(k) * n, 0.0);
    for (int r = 0; r < k; ++r) {
        const int c = order[r];
        out.singular_values[r] = sigma[c];
        if (sigma[c] > 0.0) {
            for (int i = 0; i < n; ++i)
                out.right_vectors[static_cast<std::size_t>(r) * n + i] =
                    b[static_cast<std::size_t>(i) * m + c] / sigma[c];
        }
    }
    return out;
}

}  // namespace pgc
