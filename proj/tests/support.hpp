#pragma once

// Shared fixtures for the test suites.

#include "kato/core.hpp"
#include "kato/mesh.hpp"
#include "kato/metric_space.hpp"

#include <cmath>
#include <random>

namespace kato::testing {

/// N equally spaced points on the unit circle with exact arc-length distances.
inline PointCloudSpace arc_circle_space(index_t n) {
    MatR d(n, n);
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < n; ++j) {
            const index_t k = std::abs(i - j);
            d(i, j) = static_cast<real>(std::min(k, n - k)) * (2.0 * pi / static_cast<real>(n));
        }
    return PointCloudSpace(VecR::Constant(n, 2.0 * pi / static_cast<real>(n)), d);
}

/// n x n grid in [0,1]^2 with Euclidean distances and equal masses.
inline PointCloudSpace grid_patch_space(index_t n) {
    const index_t N = n * n;
    MatR p(N, 2);
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < n; ++j) p.row(i * n + j) << static_cast<real>(i) / (n - 1), static_cast<real>(j) / (n - 1);
    MatR d(N, N);
    for (index_t a = 0; a < N; ++a)
        for (index_t b = 0; b < N; ++b) d(a, b) = (p.row(a) - p.row(b)).norm();
    return PointCloudSpace(VecR::Constant(N, 1.0 / static_cast<real>(N)), d);
}

inline VecC random_field(index_t n, std::mt19937_64& rng) {
    std::normal_distribution<real> g;
    VecC u(n);
    for (index_t i = 0; i < n; ++i) u[i] = cplx(g(rng), g(rng));
    return u;
}

inline VecR random_real_field(index_t n, std::mt19937_64& rng) {
    std::normal_distribution<real> g;
    VecR u(n);
    for (index_t i = 0; i < n; ++i) u[i] = g(rng);
    return u;
}

}  // namespace kato::testing
