#pragma once

// Finite metric measure spaces: open balls, volume growth and local doubling
// profiles, and the edge-graph geodesic surrogate on meshes.

#include "kato/core.hpp"
#include "kato/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <queue>
#include <random>
#include <vector>

namespace kato {

/// Point masses plus a dense distance matrix. Points are identified by their
/// row index in `distance`.
class PointCloudSpace {
public:
    PointCloudSpace() = default;

    PointCloudSpace(VecR masses, MatR distance) : masses_(std::move(masses)), dist_(std::move(distance)) {
        const index_t n = masses_.size();
        require(n > 0, ErrorKind::input, "space needs at least one point");
        require(dist_.rows() == n && dist_.cols() == n, ErrorKind::dimension,
                "distance matrix must be square with one row per mass");
        for (index_t i = 0; i < n; ++i) {
            require(masses_[i] > 0.0 && std::isfinite(masses_[i]), ErrorKind::input,
                    "mass of point " + std::to_string(i) + " must be positive");
            require(dist_(i, i) == 0.0, ErrorKind::input, "distance(x,x) must be zero");
            for (index_t j = i + 1; j < n; ++j) {
                require(dist_(i, j) == dist_(j, i), ErrorKind::input, "distance matrix must be symmetric");
                require(dist_(i, j) >= 0.0, ErrorKind::input, "distances must be nonnegative");
            }
        }
        total_ = masses_.sum();
    }

    index_t size() const noexcept { return masses_.size(); }
    const VecR& masses() const noexcept { return masses_; }
    const MatR& distances() const noexcept { return dist_; }
    real distance(index_t x, index_t y) const { return dist_(x, y); }
    real mass(index_t x) const { return masses_[x]; }
    real total_mass() const noexcept { return total_; }

    std::vector<index_t> point_ids() const {
        std::vector<index_t> ids(static_cast<size_t>(size()));
        std::iota(ids.begin(), ids.end(), index_t{0});
        return ids;
    }

    void check_id(index_t x) const {
        require(x >= 0 && x < size(), ErrorKind::input, "unknown point id " + std::to_string(x));
    }

    real diameter() const { return size() > 1 ? dist_.maxCoeff() : 0.0; }

    /// Largest nearest-neighbour distance; zero for a single point.
    real resolution() const {
        if (size() < 2) return 0.0;
        real worst = 0.0;
        for (index_t i = 0; i < size(); ++i) {
            real best = std::numeric_limits<real>::infinity();
            for (index_t j = 0; j < size(); ++j)
                if (j != i) best = std::min(best, dist_(i, j));
            worst = std::max(worst, best);
        }
        return worst;
    }

    /// Distance from x to a set (minimum over members); +inf for an empty set.
    real distance_to_set(index_t x, const std::vector<index_t>& set) const {
        real best = std::numeric_limits<real>::infinity();
        for (index_t y : set) best = std::min(best, dist_(x, y));
        return best;
    }

    real set_distance(const std::vector<index_t>& a, const std::vector<index_t>& b) const {
        real best = std::numeric_limits<real>::infinity();
        for (index_t x : a)
            for (index_t y : b) best = std::min(best, dist_(x, y));
        return best;
    }

    /// Maximum of d(x,y) - d(x,z) - d(z,y) over `samples` random triples
    /// (all triples when the space is small). Nonpositive for a metric.
    real triangle_violation(std::size_t samples, std::uint64_t seed) const {
        const index_t n = size();
        real worst = -std::numeric_limits<real>::infinity();
        if (n * n * n <= static_cast<index_t>(samples)) {
            for (index_t x = 0; x < n; ++x)
                for (index_t y = 0; y < n; ++y)
                    for (index_t z = 0; z < n; ++z) worst = std::max(worst, dist_(x, y) - dist_(x, z) - dist_(z, y));
            return worst;
        }
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<index_t> pick(0, n - 1);
        for (std::size_t s = 0; s < samples; ++s) {
            const index_t x = pick(rng), y = pick(rng), z = pick(rng);
            worst = std::max(worst, dist_(x, y) - dist_(x, z) - dist_(z, y));
        }
        return worst;
    }

    void write_distances_csv(std::ostream& out) const {
        out << "point_id,point_id,distance\n";
        out.precision(17);
        for (index_t i = 0; i < size(); ++i)
            for (index_t j = 0; j < size(); ++j) out << i << ',' << j << ',' << dist_(i, j) << '\n';
    }

    void write_masses_csv(std::ostream& out) const {
        out << "point_id,mass\n";
        out.precision(17);
        for (index_t i = 0; i < size(); ++i) out << i << ',' << masses_[i] << '\n';
    }

private:
    VecR masses_;
    MatR dist_;
    real total_ = 0.0;
};

/// V(x, r) with open balls.
inline real ball_measure(const PointCloudSpace& space, index_t x, real r) {
    space.check_id(x);
    require(r > 0.0, ErrorKind::input, "ball radius must be positive");
    real v = 0.0;
    const auto& d = space.distances();
    for (index_t y = 0; y < space.size(); ++y)
        if (d(x, y) < r) v += space.mass(y);
    return v;
}

struct GrowthSample {
    index_t x;
    real r;
    real alpha;
    real ratio;  ///< V(x, alpha r) / V(x, r)
};

struct GrowthProfile {
    real c = 1.0;
    real kappa = 0.0;
    real lambda = 0.0;
    bool passes = true;
    real worst_ratio = 0.0;  ///< max of V(x,ar) / (c a^k e^{l a r} V(x,r)) over samples
    std::vector<GrowthSample> samples;
};

struct DoublingProfile {
    real b = 0.0;
    real A_b = 1.0;
    bool passes = true;
    index_t witness_x = 0;
    real witness_r = 0.0;
};

/// Worst ratio of the (E_loc) inequality for the given constants over samples.
inline real growth_worst_ratio(const std::vector<GrowthSample>& samples, real c, real kappa, real lambda) {
    real worst = 0.0;
    for (const auto& s : samples) {
        const real bound = c * std::pow(s.alpha, kappa) * std::exp(lambda * s.alpha * s.r);
        worst = std::max(worst, s.ratio / bound);
    }
    return worst;
}

inline bool growth_holds(const std::vector<GrowthSample>& samples, real c, real kappa, real lambda) {
    return growth_worst_ratio(samples, c, kappa, lambda) <= 1.0 + 1e-12;
}

namespace growth_grid {
inline constexpr int c_steps = 160;         ///< c = 2^(j/4), j = 0..c_steps
inline constexpr real kappa_step = 0.05;
inline constexpr real kappa_max = 6.0;
inline constexpr real lambda_step = 0.05;
inline constexpr real lambda_max = 2.0;
}  // namespace growth_grid

/// Samples (x, r, alpha) with alpha >= 1 and r in [1.01 * resolution, diam / alpha),
/// each paired with a triple whose balls straddle the next attained distance, then searches c = 2^(j/4), lambda in steps of 0.05 up to 2 and kappa in steps
/// of 0.05 up to 6, returning the first passing triple in the order (c, lambda, kappa).
/// Ordering lambda before kappa keeps the exponential term from absorbing
/// polynomial growth on bounded spaces.
inline GrowthProfile fit_growth_profile(const PointCloudSpace& space, std::size_t sample_count, std::uint64_t seed) {
    GrowthProfile prof;
    const real diam = space.diameter();
    const real r_min = 1.01 * space.resolution();
    if (space.size() < 2 || diam <= r_min * 1.0001) {
        prof.worst_ratio = 1.0;
        return prof;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<index_t> pick(0, space.size() - 1);
    std::uniform_real_distribution<real> unit(0.0, 1.0);
    const real log_alpha_max = std::log(diam / r_min);
    prof.samples.reserve(sample_count);
    for (std::size_t s = 0; s < sample_count; ++s) {
        const index_t x = pick(rng);
        const real alpha = std::exp(unit(rng) * log_alpha_max);
        const real r_hi = diam / alpha;
        const real r = r_min * std::exp(unit(rng) * std::log(std::max(r_hi / r_min, 1.0)));
        const real v1 = ball_measure(space, x, r);
        const real v2 = ball_measure(space, x, alpha * r);
        prof.samples.push_back({x, r, alpha, v2 / v1});
        // Companion triple straddling the first attained distance >= r, with alpha -> 1.
        real next = std::numeric_limits<real>::infinity();
        for (index_t y = 0; y < space.size(); ++y) {
            const real d = space.distance(x, y);
            if (d >= r && d < next) next = d;
        }
        if (std::isfinite(next) && next * (1.0 + 1e-9) < diam) {
            const real rj = next * (1.0 - 1e-9), aj = (1.0 + 1e-9) / (1.0 - 1e-9);
            prof.samples.push_back({x, rj, aj, ball_measure(space, x, aj * rj) / ball_measure(space, x, rj)});
        }
    }
    using namespace growth_grid;
    // On a bounded space e^{lambda alpha r} is capped at e, so lambda cannot stand in for kappa.
    const int lambda_n = static_cast<int>(std::floor(std::min(lambda_max, 1.0 / diam) / lambda_step + 1e-9));
    for (int j = 0; j <= c_steps; ++j) {
        const real c = std::exp2(0.25 * j);
        for (int ll = 0; ll <= lambda_n; ++ll) {
            const real lambda = ll * lambda_step;
            real need = 0.0;
            for (const auto& smp : prof.samples) {
                const real excess = std::log(smp.ratio) - std::log(c) - lambda * smp.alpha * smp.r;
                if (excess <= 0.0) continue;
                const real la = std::log(smp.alpha);
                need = (la > 0.0) ? std::max(need, excess / la) : std::numeric_limits<real>::infinity();
            }
            if (!(need <= kappa_max)) continue;
            real kappa = std::max(0.0, std::ceil(need / kappa_step - 1e-9) * kappa_step);
            while (!growth_holds(prof.samples, c, kappa, lambda) && kappa <= kappa_max) kappa += kappa_step;
            if (kappa > kappa_max) continue;
            prof.c = c;
            prof.kappa = kappa;
            prof.lambda = lambda;
            prof.passes = true;
            prof.worst_ratio = growth_worst_ratio(prof.samples, c, kappa, lambda);
            return prof;
        }
    }
    prof.passes = false;
    prof.c = std::exp2(0.25 * c_steps);
    prof.kappa = kappa_max;
    prof.lambda = lambda_max;
    prof.worst_ratio = growth_worst_ratio(prof.samples, prof.c, prof.kappa, prof.lambda);
    return prof;
}

/// A_b as the largest V(x,2r)/V(x,r) over random x and r in [min(1.01 resolution, b/2), b].
inline DoublingProfile fit_doubling_profile(const PointCloudSpace& space, real b, std::size_t sample_count,
                                            std::uint64_t seed) {
    require(b > 0.0, ErrorKind::input, "doubling radius bound b must be positive");
    DoublingProfile prof;
    prof.b = b;
    if (space.size() < 2) return prof;
    const real r_min = std::min(1.01 * space.resolution(), 0.5 * b);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<index_t> pick(0, space.size() - 1);
    std::uniform_real_distribution<real> unit(0.0, 1.0);
    for (std::size_t s = 0; s < sample_count; ++s) {
        const index_t x = pick(rng);
        const real r = r_min * std::exp(unit(rng) * std::log(b / r_min));
        const real ratio = ball_measure(space, x, 2.0 * r) / ball_measure(space, x, r);
        if (ratio > prof.A_b) {
            prof.A_b = ratio;
            prof.witness_x = x;
            prof.witness_r = r;
        }
    }
    prof.passes = true;
    return prof;
}

/// Shortest-path metric over mesh edges weighted by ambient edge length,
/// with lumped vertex measures as masses.
inline PointCloudSpace graph_geodesics(const EmbeddedMesh& mesh) {
    require(mesh.is_edge_connected(), ErrorKind::disconnected, "mesh is not edge-connected");
    const index_t n = mesh.num_vertices();
    MatR dist = MatR::Constant(n, n, std::numeric_limits<real>::infinity());
    const auto& nb = mesh.vertex_neighbors();
    std::vector<std::vector<std::pair<index_t, real>>> adj(static_cast<size_t>(n));
    for (index_t v = 0; v < n; ++v)
        for (index_t w : nb[static_cast<size_t>(v)])
            adj[static_cast<size_t>(v)].push_back({w, (mesh.points().row(v) - mesh.points().row(w)).norm()});
    using Item = std::pair<real, index_t>;
    for (index_t src = 0; src < n; ++src) {
        std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
        auto row = dist.row(src);
        row(src) = 0.0;
        pq.push({0.0, src});
        while (!pq.empty()) {
            auto [d, v] = pq.top();
            pq.pop();
            if (d > row(v)) continue;
            for (auto [w, len] : adj[static_cast<size_t>(v)]) {
                if (d + len < row(w)) {
                    row(w) = d + len;
                    pq.push({row(w), w});
                }
            }
        }
    }
    // Dijkstra from both ends can differ in the last ulp; symmetrize exactly.
    MatR sym = dist.cwiseMin(dist.transpose());
    return PointCloudSpace(mesh.vertex_measure(), std::move(sym));
}

}  // namespace kato
