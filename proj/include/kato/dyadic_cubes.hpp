#pragma once

// Truncated dyadic cube hierarchies on finite metric measure spaces built from
// nested farthest-point nets, plus the averaging/maximal operators, Carleson
// norms and the cube-sum estimates that use them.

#include "kato/core.hpp"
#include "kato/metric_space.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

namespace kato {

struct Cube {
    int level = 0;
    index_t id = 0;
    std::vector<index_t> members;
    index_t center = 0;
    real side = 1.0;
    real measure = 0.0;
    index_t parent = -1;  ///< index of the containing cube one level up; -1 at level 0
};

struct DyadicStructure {
    real delta = 0.5;
    int depth = 0;
    std::vector<std::vector<Cube>> levels;
    /// cube_of[k][x] = index of the level-k cube containing point x.
    std::vector<std::vector<index_t>> cube_of;
    real a0 = 0.0;
    real a1 = 0.0;
    real eta = 1.0;
    real c_boundary = 1.0;
    real eta_r2 = 1.0;

    real side(int k) const { return std::pow(delta, k); }
    const Cube& cube(int k, index_t i) const { return levels[static_cast<size_t>(k)][static_cast<size_t>(i)]; }
    index_t num_cubes(int k) const { return static_cast<index_t>(levels[static_cast<size_t>(k)].size()); }
    /// a := max{1, a1 / delta}.
    real a() const { return std::max(1.0, a1 / delta); }
    real min_scale() const { return side(depth); }
};

namespace detail {

inline void finish_cube(Cube& q, const PointCloudSpace& space, real delta) {
    q.side = std::pow(delta, q.level);
    q.measure = 0.0;
    for (index_t x : q.members) q.measure += space.mass(x);
}

inline void rebuild_lookup(DyadicStructure& s, index_t npoints) {
    s.cube_of.assign(s.levels.size(), std::vector<index_t>(static_cast<size_t>(npoints), -1));
    for (size_t k = 0; k < s.levels.size(); ++k)
        for (size_t i = 0; i < s.levels[k].size(); ++i)
            for (index_t x : s.levels[k][i].members) s.cube_of[k][static_cast<size_t>(x)] = static_cast<index_t>(i);
}

}  // namespace detail

/// Structure from explicit member lists (for hand-built hierarchies).
/// Levels are given coarsest first; parents and constants are left for the checker.
inline DyadicStructure make_structure(const PointCloudSpace& space, real delta,
                                      const std::vector<std::vector<std::vector<index_t>>>& members,
                                      const std::vector<std::vector<index_t>>& centers) {
    require(delta > 0.0 && delta < 1.0, ErrorKind::input, "delta must lie in (0,1)");
    require(!members.empty() && members.size() == centers.size(), ErrorKind::input, "one center list per level");
    DyadicStructure s;
    s.delta = delta;
    s.depth = static_cast<int>(members.size()) - 1;
    s.levels.resize(members.size());
    for (size_t k = 0; k < members.size(); ++k) {
        require(members[k].size() == centers[k].size(), ErrorKind::input, "one center per cube");
        for (size_t i = 0; i < members[k].size(); ++i) {
            Cube q;
            q.level = static_cast<int>(k);
            q.id = static_cast<index_t>(i);
            q.members = members[k][i];
            std::sort(q.members.begin(), q.members.end());
            q.center = centers[k][i];
            detail::finish_cube(q, space, delta);
            s.levels[k].push_back(std::move(q));
        }
    }
    detail::rebuild_lookup(s, space.size());
    return s;
}

struct BoundaryFit {
    real eta = 1.0;
    real c = 1.0;
    real r2 = 1.0;
    int levels_used = 0;
    std::size_t cubes_used = 0;
    std::vector<real> s_values;
    std::vector<real> mean_ratio;  ///< mean over cubes of mu(shell_s) / mu(Q)
    std::vector<real> max_ratio;   ///< max over cubes of the same
};

/// Thin-boundary fit over s in {delta^2, delta, 1} on levels whose shells are
/// resolvable (delta^{k+2} >= largest nearest-neighbour distance). Cubes equal
/// to the whole space have no boundary and are skipped. eta is the least-squares
/// slope of log(mean shell fraction) against log s; c is the smallest constant
/// making mu(shell) <= c s^eta mu(Q) hold for every cube used.
inline BoundaryFit fit_thin_boundary(const DyadicStructure& s, const PointCloudSpace& space) {
    BoundaryFit fit;
    fit.s_values = {s.delta * s.delta, s.delta, 1.0};
    fit.mean_ratio.assign(3, 0.0);
    fit.max_ratio.assign(3, 0.0);
    std::vector<std::array<real, 3>> ratios;
    const real h = space.resolution();
    const index_t n = space.size();
    for (int k = 0; k <= s.depth; ++k) {
        if (s.side(k + 2) < h) continue;
        bool any = false;
        for (const Cube& q : s.levels[static_cast<size_t>(k)]) {
            if (static_cast<index_t>(q.members.size()) == n) continue;
            any = true;
            std::array<real, 3> shell{0.0, 0.0, 0.0};
            for (index_t x : q.members) {
                real d = std::numeric_limits<real>::infinity();
                for (index_t y = 0; y < n; ++y)
                    if (s.cube_of[static_cast<size_t>(k)][static_cast<size_t>(y)] != q.id) d = std::min(d, space.distance(x, y));
                for (size_t j = 0; j < 3; ++j)
                    if (d <= fit.s_values[j] * q.side) shell[j] += space.mass(x);
            }
            for (auto& v : shell) v /= q.measure;
            ratios.push_back(shell);
        }
        if (any) ++fit.levels_used;
    }
    fit.cubes_used = ratios.size();
    if (ratios.empty()) return fit;
    for (const auto& r : ratios)
        for (size_t j = 0; j < 3; ++j) {
            fit.mean_ratio[j] += r[j] / static_cast<real>(ratios.size());
            fit.max_ratio[j] = std::max(fit.max_ratio[j], r[j]);
        }
    std::vector<real> xs, ys;
    for (size_t j = 0; j < 3; ++j) {
        if (fit.mean_ratio[j] > 0.0) {
            xs.push_back(std::log(fit.s_values[j]));
            ys.push_back(std::log(fit.mean_ratio[j]));
        }
    }
    if (xs.size() >= 2) {
        const real mx = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<real>(xs.size());
        const real my = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<real>(ys.size());
        real sxx = 0, sxy = 0, syy = 0;
        for (size_t i = 0; i < xs.size(); ++i) {
            sxx += (xs[i] - mx) * (xs[i] - mx);
            sxy += (xs[i] - mx) * (ys[i] - my);
            syy += (ys[i] - my) * (ys[i] - my);
        }
        fit.eta = std::max(0.0, sxy / sxx);
        fit.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    }
    fit.c = 0.0;
    for (const auto& r : ratios)
        for (size_t j = 0; j < 3; ++j) fit.c = std::max(fit.c, r[j] / std::pow(fit.s_values[j], fit.eta));
    return fit;
}

/// Measured ball-sandwich constants: a0 from the nearest nonmember, a1 from the
/// farthest member, both relative to the cube side.
inline std::pair<real, real> measure_sandwich(const DyadicStructure& s, const PointCloudSpace& space) {
    real a0 = std::numeric_limits<real>::infinity(), a1 = 0.0;
    const index_t n = space.size();
    for (int k = 0; k <= s.depth; ++k) {
        for (const Cube& q : s.levels[static_cast<size_t>(k)]) {
            std::vector<char> in(static_cast<size_t>(n), 0);
            for (index_t x : q.members) in[static_cast<size_t>(x)] = 1;
            for (index_t y = 0; y < n; ++y) {
                const real d = space.distance(q.center, y) / q.side;
                if (in[static_cast<size_t>(y)]) a1 = std::max(a1, d);
                else a0 = std::min(a0, d);
            }
        }
    }
    // Open outer balls need a strict inequality for the farthest member.
    a1 = std::nextafter(a1, std::numeric_limits<real>::infinity());
    if (!std::isfinite(a0)) a0 = a1;
    return {a0, a1};
}

/// Nested greedy nets: level k adds farthest points until every point lies
/// within delta^k of the net. The finest level is the Voronoi partition of its
/// net; coarser cubes are unions of children, routed by majority vote against
/// the Voronoi partition of the coarser net.
inline DyadicStructure build_cubes(const PointCloudSpace& space, real delta, int depth, std::uint64_t seed) {
    require(delta > 0.0 && delta < 1.0, ErrorKind::input, "delta must lie in (0,1)");
    require(depth >= 0, ErrorKind::input, "depth must be nonnegative");
    const index_t n = space.size();
    require(n > 0, ErrorKind::input, "space is empty");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<index_t> pick(0, n - 1);
    std::vector<std::vector<index_t>> nets(static_cast<size_t>(depth + 1));
    std::vector<real> to_net(static_cast<size_t>(n), std::numeric_limits<real>::infinity());
    auto add_center = [&](std::vector<index_t>& net, index_t c) {
        net.push_back(c);
        for (index_t y = 0; y < n; ++y) to_net[static_cast<size_t>(y)] = std::min(to_net[static_cast<size_t>(y)], space.distance(c, y));
    };
    std::vector<index_t> current;
    add_center(current, pick(rng));
    for (int k = 0; k <= depth; ++k) {
        const real r = std::pow(delta, k);
        while (true) {
            const auto it = std::max_element(to_net.begin(), to_net.end());
            if (*it < r) break;
            add_center(current, static_cast<index_t>(it - to_net.begin()));
        }
        nets[static_cast<size_t>(k)] = current;
    }

    DyadicStructure s;
    s.delta = delta;
    s.depth = depth;
    s.levels.resize(static_cast<size_t>(depth + 1));

    // Voronoi labels per level: nearest center, ties to the earlier center.
    auto voronoi = [&](const std::vector<index_t>& net) {
        std::vector<index_t> label(static_cast<size_t>(n), 0);
        for (index_t x = 0; x < n; ++x) {
            size_t best = 0;
            for (size_t i = 1; i < net.size(); ++i)
                if (space.distance(x, net[i]) < space.distance(x, net[best])) best = i;
            label[static_cast<size_t>(x)] = static_cast<index_t>(best);
        }
        return label;
    };
    {
        const auto& net = nets[static_cast<size_t>(depth)];
        const auto label = voronoi(net);
        auto& cubes = s.levels[static_cast<size_t>(depth)];
        cubes.resize(net.size());
        for (size_t i = 0; i < net.size(); ++i) {
            cubes[i].level = depth;
            cubes[i].id = static_cast<index_t>(i);
            cubes[i].center = net[i];
        }
        for (index_t x = 0; x < n; ++x) cubes[static_cast<size_t>(label[static_cast<size_t>(x)])].members.push_back(x);
    }
    for (int k = depth - 1; k >= 0; --k) {
        const auto& net = nets[static_cast<size_t>(k)];
        const auto label = voronoi(net);
        auto& kids = s.levels[static_cast<size_t>(k + 1)];
        std::vector<Cube> cubes(net.size());
        for (size_t i = 0; i < net.size(); ++i) {
            cubes[i].level = k;
            cubes[i].id = static_cast<index_t>(i);
            cubes[i].center = net[i];
        }
        std::vector<real> load(net.size(), 0.0);
        // A child centred on a parent center stays with it; any other child joins
        // the parent whose Voronoi cell holds most of its mass.
        for (Cube& child : kids) {
            const auto self = std::find(net.begin(), net.end(), child.center);
            index_t best = -1;
            if (self != net.end()) {
                best = static_cast<index_t>(self - net.begin());
            } else {
                std::vector<std::pair<index_t, real>> votes;
                for (index_t x : child.members) {
                    const index_t l = label[static_cast<size_t>(x)];
                    auto it = std::find_if(votes.begin(), votes.end(), [&](const auto& v) { return v.first == l; });
                    if (it == votes.end()) votes.push_back({l, space.mass(x)});
                    else it->second += space.mass(x);
                }
                // Near-ties go to the closer center, then to the lighter parent so far.
                real best_mass = -1.0;
                auto near = [](real a, real b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); };
                for (const auto& [l, m] : votes) {
                    bool take = best < 0 || (m > best_mass && !near(m, best_mass));
                    if (!take && near(m, best_mass)) {
                        const real dl = space.distance(child.center, net[static_cast<size_t>(l)]);
                        const real db = space.distance(child.center, net[static_cast<size_t>(best)]);
                        take = (dl < db && !near(dl, db)) ||
                               (near(dl, db) && load[static_cast<size_t>(l)] < load[static_cast<size_t>(best)]);
                    }
                    if (take) {
                        best = l;
                        best_mass = m;
                    }
                }
            }
            child.parent = best;
            for (index_t x : child.members) load[static_cast<size_t>(best)] += space.mass(x);
            auto& dst = cubes[static_cast<size_t>(best)].members;
            dst.insert(dst.end(), child.members.begin(), child.members.end());
        }
        for (Cube& q : cubes) std::sort(q.members.begin(), q.members.end());
        s.levels[static_cast<size_t>(k)] = std::move(cubes);
    }
    for (auto& lvl : s.levels)
        for (Cube& q : lvl) detail::finish_cube(q, space, delta);
    detail::rebuild_lookup(s, n);

    std::tie(s.a0, s.a1) = measure_sandwich(s, space);
    const BoundaryFit fit = fit_thin_boundary(s, space);
    s.eta = fit.eta;
    s.c_boundary = fit.c;
    s.eta_r2 = fit.r2;
    return s;
}

struct CubePropertyReport {
    bool cover = true;         ///< (1): every point lies in some cube of each level
    bool disjoint = true;      ///< (2)
    bool nested = true;        ///< (3)
    bool unique_parent = true; ///< (4)
    real a0 = 0.0;             ///< (5)
    real a1 = 0.0;
    BoundaryFit boundary;      ///< (6)
    std::vector<std::string> failures;

    bool exact_properties() const { return cover && disjoint && nested && unique_parent; }
};

inline CubePropertyReport check_cube_properties(const DyadicStructure& s, const PointCloudSpace& space) {
    CubePropertyReport rep;
    const index_t n = space.size();
    const size_t L = s.levels.size();
    // Membership counts recomputed from the member lists.
    std::vector<std::vector<std::vector<index_t>>> owners(L, std::vector<std::vector<index_t>>(static_cast<size_t>(n)));
    for (size_t k = 0; k < L; ++k)
        for (const Cube& q : s.levels[k])
            for (index_t x : q.members) {
                if (x < 0 || x >= n) {
                    rep.cover = false;
                    rep.failures.push_back("cube (" + std::to_string(k) + "," + std::to_string(q.id) + ") has unknown point " + std::to_string(x));
                    continue;
                }
                owners[k][static_cast<size_t>(x)].push_back(q.id);
            }
    for (size_t k = 0; k < L; ++k) {
        for (index_t x = 0; x < n; ++x) {
            const auto& o = owners[k][static_cast<size_t>(x)];
            if (o.empty() && rep.cover) {
                rep.cover = false;
                rep.failures.push_back("(1) point " + std::to_string(x) + " uncovered at level " + std::to_string(k));
            }
            if (o.size() > 1 && rep.disjoint) {
                rep.disjoint = false;
                rep.failures.push_back("(2) cubes (" + std::to_string(k) + "," + std::to_string(o[0]) + ") and (" +
                                       std::to_string(k) + "," + std::to_string(o[1]) + ") overlap at point " + std::to_string(x));
            }
        }
    }
    for (size_t l = 1; l < L; ++l) {
        for (const Cube& q : s.levels[l]) {
            for (size_t k = 0; k < l; ++k) {
                std::vector<index_t> hit;
                for (index_t x : q.members) {
                    if (x < 0 || x >= n) continue;
                    for (index_t id : owners[k][static_cast<size_t>(x)]) hit.push_back(id);
                }
                std::sort(hit.begin(), hit.end());
                hit.erase(std::unique(hit.begin(), hit.end()), hit.end());
                if (hit.size() > 1 && rep.nested) {
                    rep.nested = false;
                    rep.failures.push_back("(3) cube (" + std::to_string(l) + "," + std::to_string(q.id) + ") straddles cubes (" +
                                           std::to_string(k) + "," + std::to_string(hit[0]) + ") and (" + std::to_string(k) +
                                           "," + std::to_string(hit[1]) + ")");
                }
                // A cube is contained in a coarser cube iff all of its points are; count the containers.
                index_t containers = 0;
                for (index_t id : hit) {
                    bool all = true;
                    for (index_t x : q.members) {
                        const auto& o = owners[k][static_cast<size_t>(x)];
                        all = all && std::find(o.begin(), o.end(), id) != o.end();
                    }
                    containers += all ? 1 : 0;
                }
                if (containers != 1 && rep.unique_parent) {
                    rep.unique_parent = false;
                    rep.failures.push_back("(4) cube (" + std::to_string(l) + "," + std::to_string(q.id) + ") has " +
                                           std::to_string(containers) + " containing cubes at level " + std::to_string(k));
                }
            }
        }
    }
    if (rep.cover && rep.disjoint) {
        std::tie(rep.a0, rep.a1) = measure_sandwich(s, space);
        DyadicStructure lookup = s;
        detail::rebuild_lookup(lookup, n);
        rep.boundary = fit_thin_boundary(lookup, space);
    }
    return rep;
}

/// Level k with delta^{k+1} < t <= delta^k.
inline int level_for_scale(const DyadicStructure& s, real t) {
    require(t > 0.0 && t <= 1.0, ErrorKind::input, "scale t must lie in (0,1]");
    require(t >= s.min_scale(), ErrorKind::input,
            "scale " + std::to_string(t) + " is below the minimum representable scale delta^depth = " +
                std::to_string(s.min_scale()));
    int k = 0;
    while (k < s.depth && std::pow(s.delta, k + 1) >= t) ++k;
    return k;
}

/// As level_for_scale, but scales below delta^depth map to the finest level.
inline int level_for_scale_clamped(const DyadicStructure& s, real t) {
    return t < s.min_scale() ? s.depth : level_for_scale(s, t);
}

inline const std::vector<Cube>& cubes_at_scale(const DyadicStructure& s, real t) {
    return s.levels[static_cast<size_t>(level_for_scale(s, t))];
}

/// Per-cube mu-weighted means at level k, one column per field component.
inline MatC cube_means(const DyadicStructure& s, const PointCloudSpace& space, int k, const MatC& u) {
    const auto& cubes = s.levels[static_cast<size_t>(k)];
    MatC means = MatC::Zero(static_cast<index_t>(cubes.size()), u.cols());
    for (size_t i = 0; i < cubes.size(); ++i) {
        for (index_t x : cubes[i].members) means.row(static_cast<index_t>(i)) += space.mass(x) * u.row(x);
        means.row(static_cast<index_t>(i)) /= cubes[i].measure;
    }
    return means;
}

/// A_t applied to a field with N components per point (rows = points).
inline MatC dyadic_average_level(const DyadicStructure& s, const PointCloudSpace& space, int k, const MatC& u) {
    require(u.rows() == space.size(), ErrorKind::dimension, "field must have one row per point");
    const MatC means = cube_means(s, space, k, u);
    MatC out(u.rows(), u.cols());
    for (index_t x = 0; x < u.rows(); ++x) out.row(x) = means.row(s.cube_of[static_cast<size_t>(k)][static_cast<size_t>(x)]);
    return out;
}

inline MatC dyadic_average(const DyadicStructure& s, const PointCloudSpace& space, real t, const MatC& u) {
    return dyadic_average_level(s, space, level_for_scale(s, t), u);
}

inline VecC dyadic_average(const DyadicStructure& s, const PointCloudSpace& space, real t, const VecC& u) {
    return dyadic_average(s, space, t, MatC(u));
}

inline real l2_norm(const PointCloudSpace& space, const VecC& u) {
    return std::sqrt((space.masses().array() * u.array().abs2()).sum());
}

struct MaximalResult {
    VecR value;
    real ratio = 0.0;  ///< ||M u|| / ||u||
};

/// M u(x) = max over levels of |A_{delta^k} u(x)|.
inline MaximalResult dyadic_maximal(const DyadicStructure& s, const PointCloudSpace& space, const VecC& u) {
    MaximalResult res;
    res.value = VecR::Zero(u.size());
    for (int k = 0; k <= s.depth; ++k) {
        const VecC a = dyadic_average_level(s, space, k, MatC(u)).col(0);
        res.value = res.value.cwiseMax(a.cwiseAbs());
    }
    const real nu = l2_norm(space, u);
    res.ratio = nu > 0 ? l2_norm(space, res.value.cast<cplx>()) / nu : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// Carleson measures
// ---------------------------------------------------------------------------

struct CarlesonAtom {
    index_t x;
    real t;
    real weight;
};

struct CarlesonSample {
    std::vector<CarlesonAtom> support;
    real t0 = 1.0;
};

inline void validate(const CarlesonSample& nu, const PointCloudSpace& space) {
    require(nu.t0 > 0.0 && nu.t0 <= 1.0, ErrorKind::input, "t0 must lie in (0,1]");
    for (const auto& a : nu.support) {
        space.check_id(a.x);
        require(a.weight >= 0.0, ErrorKind::input, "Carleson atom weights must be nonnegative");
        require(a.t > 0.0 && a.t <= nu.t0, ErrorKind::input,
                "Carleson atom scale " + std::to_string(a.t) + " outside (0, t0 = " + std::to_string(nu.t0) + "]");
    }
}

struct CarlesonNorm {
    real value = 0.0;
    int level = 0;
    index_t cube = -1;
};

/// sup over t in (0,t0] and Q in Delta_t of nu(Q x (0, l(Q)]) / mu(Q).
inline CarlesonNorm carleson_norm_detail(const DyadicStructure& s, const PointCloudSpace& space, const CarlesonSample& nu) {
    validate(nu, space);
    require(nu.t0 >= s.min_scale(), ErrorKind::input, "t0 below the structure resolution");
    CarlesonNorm best;
    const int k0 = level_for_scale(s, nu.t0);
    for (int k = k0; k <= s.depth; ++k) {
        const real side = s.side(k);
        std::vector<real> box(s.levels[static_cast<size_t>(k)].size(), 0.0);
        for (const auto& a : nu.support)
            if (a.t <= side) box[static_cast<size_t>(s.cube_of[static_cast<size_t>(k)][static_cast<size_t>(a.x)])] += a.weight;
        for (size_t i = 0; i < box.size(); ++i) {
            const real r = box[i] / s.levels[static_cast<size_t>(k)][i].measure;
            if (r > best.value) best = {r, k, static_cast<index_t>(i)};
        }
    }
    return best;
}

inline real carleson_norm(const DyadicStructure& s, const PointCloudSpace& space, const CarlesonSample& nu) {
    return carleson_norm_detail(s, space, nu).value;
}

/// Atoms (x, delta^j, mu(x)(delta^j - delta^{j+1})) for levels from t0 down to the
/// finest, whose level carries mu(x) delta^depth. Every box then has nu(C(Q)) = l(Q) mu(Q).
inline CarlesonSample calibration_measure(const DyadicStructure& s, const PointCloudSpace& space, real t0 = 1.0) {
    CarlesonSample nu;
    nu.t0 = t0;
    const int k0 = level_for_scale(s, t0);
    for (index_t x = 0; x < space.size(); ++x) {
        for (int j = k0; j < s.depth; ++j) nu.support.push_back({x, s.side(j), space.mass(x) * (s.side(j) - s.side(j + 1))});
        nu.support.push_back({x, s.side(s.depth), space.mass(x) * s.side(s.depth)});
    }
    return nu;
}

/// Random atoms at uniformly drawn points and log-uniform scales in [delta^depth, t0].
inline CarlesonSample random_carleson_measure(const DyadicStructure& s, const PointCloudSpace& space, std::size_t atoms,
                                              real t0, std::uint64_t seed) {
    CarlesonSample nu;
    nu.t0 = t0;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<index_t> pick(0, space.size() - 1);
    std::uniform_real_distribution<real> unit(0.0, 1.0);
    const real lo = std::min(s.min_scale(), t0);
    for (std::size_t i = 0; i < atoms; ++i)
        nu.support.push_back({pick(rng), lo * std::pow(t0 / lo, unit(rng)), unit(rng)});
    return nu;
}

/// Sum over atoms of w |A_t u(x)|^2.
inline real carleson_integral(const DyadicStructure& s, const PointCloudSpace& space, const CarlesonSample& nu, const VecC& u) {
    std::vector<MatC> means(static_cast<size_t>(s.depth + 1));
    real total = 0.0;
    for (const auto& a : nu.support) {
        const int k = level_for_scale_clamped(s, a.t);
        auto& m = means[static_cast<size_t>(k)];
        if (m.size() == 0) m = cube_means(s, space, k, MatC(u));
        total += a.weight * std::norm(m(s.cube_of[static_cast<size_t>(k)][static_cast<size_t>(a.x)], 0));
    }
    return total;
}

struct EmbeddingResult {
    real max_ratio = 0.0;
    real carleson_norm = 0.0;
    std::size_t trials_used = 0;
};

/// Empirical constant of the embedding  iint |A_t u|^2 dnu <= C ||nu||_C ||u||^2.
inline EmbeddingResult carleson_embedding_check(const DyadicStructure& s, const PointCloudSpace& space,
                                                const CarlesonSample& nu, const std::vector<VecC>& trials) {
    EmbeddingResult res;
    res.carleson_norm = carleson_norm(s, space, nu);
    for (const VecC& u : trials) {
        const real nu2 = std::pow(l2_norm(space, u), 2);
        if (nu2 == 0.0) continue;
        ++res.trials_used;
        if (res.carleson_norm == 0.0) continue;
        res.max_ratio = std::max(res.max_ratio, carleson_integral(s, space, nu, u) / (res.carleson_norm * nu2));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Cube-pair sums
// ---------------------------------------------------------------------------

/// rho(Q,R) for all pairs of cubes at level k (zero on the diagonal).
inline MatR cube_distances(const DyadicStructure& s, const PointCloudSpace& space, int k) {
    const index_t m = s.num_cubes(k);
    MatR d = MatR::Constant(m, m, std::numeric_limits<real>::infinity());
    const auto& own = s.cube_of[static_cast<size_t>(k)];
    for (index_t x = 0; x < space.size(); ++x)
        for (index_t y = 0; y < space.size(); ++y) {
            real& e = d(own[static_cast<size_t>(x)], own[static_cast<size_t>(y)]);
            e = std::min(e, space.distance(x, y));
        }
    for (index_t i = 0; i < m; ++i) d(i, i) = 0.0;
    return d;
}

struct CubeSumResult {
    real value = 0.0;
    bool precondition_warning = false;
};

/// sup_R sum_Q mu(Q)/mu(R) <t/rho(Q,R)>^M e^{-m rho(Q,R)/t} over Delta_t.
inline CubeSumResult cube_sum_check(const DyadicStructure& s, const PointCloudSpace& space, real t, real M_exp, real m_exp,
                                    const GrowthProfile* growth = nullptr) {
    CubeSumResult res;
    if (growth) res.precondition_warning = !(M_exp > growth->kappa && m_exp > growth->lambda * t);
    const int k = level_for_scale(s, t);
    const MatR d = cube_distances(s, space, k);
    const auto& cubes = s.levels[static_cast<size_t>(k)];
    for (size_t r = 0; r < cubes.size(); ++r) {
        real sum = 0.0;
        for (size_t q = 0; q < cubes.size(); ++q) {
            const real rho = d(static_cast<index_t>(q), static_cast<index_t>(r));
            sum += cubes[q].measure / cubes[r].measure * std::pow(ratio_bracket(t, rho), M_exp) * std::exp(-m_exp * rho / t);
        }
        res.value = std::max(res.value, sum);
    }
    return res;
}

/// max over Q,R in Delta_t of [mu(Q)/mu(R)] / [<t/rho>^{-kappa} e^{a lambda rho}].
inline real measure_ratio_check(const DyadicStructure& s, const PointCloudSpace& space, real t, const GrowthProfile& growth) {
    const int k = level_for_scale(s, t);
    const MatR d = cube_distances(s, space, k);
    const auto& cubes = s.levels[static_cast<size_t>(k)];
    const real a = s.a();
    real worst = 0.0;
    for (size_t q = 0; q < cubes.size(); ++q)
        for (size_t r = 0; r < cubes.size(); ++r) {
            const real rho = d(static_cast<index_t>(q), static_cast<index_t>(r));
            const real bound = std::pow(ratio_bracket(t, rho), -growth.kappa) * std::exp(a * growth.lambda * rho);
            worst = std::max(worst, cubes[q].measure / cubes[r].measure / bound);
        }
    return worst;
}

}  // namespace kato
