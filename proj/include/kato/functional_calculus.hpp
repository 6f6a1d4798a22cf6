#pragma once

// Functional calculus of Pi_B: quadrature grids, uniform resolvent bounds,
// sector resolvent bounds, quadratic estimates, holomorphic functions of Pi_B
// (eigendecomposition and contour quadrature), the square root of L, the
// principal part gamma_t and the diagnostic inequalities built from it.
//
// For f(z) = g(z^2) + z k(z^2), the block form of Pi_B gives
//   f(Pi_B) = [ g(L)      k(L) aT                          ]
//             [ S k(L)    g(0) I + S (g(L) - g(0)) L^{-1} aT ],
// so only g(L) and k(L) are computed.

#include "kato/core.hpp"
#include "kato/dirac_system.hpp"
#include "kato/dyadic_cubes.hpp"
#include "kato/linalg.hpp"
#include "kato/manifold.hpp"
#include "kato/metric_space.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace kato {

// ---------------------------------------------------------------------------
// Quadrature grids
// ---------------------------------------------------------------------------

/// Log-uniform nodes with trapezoid weights in d(log t).
struct QuadratureGrid {
    real t_min = 1e-4;
    real t_max = 1e4;
    int points_per_decade = 16;
    VecR nodes;
    VecR weights;
    real sigma_max = 0.0;  ///< ||Pi_B||
    real sigma_min = 0.0;  ///< 1 / ||(Pi_B restricted to its range)^{-1}||

    std::size_t size() const { return static_cast<std::size_t>(nodes.size()); }
};

inline QuadratureGrid make_grid(real t_min, real t_max, int points_per_decade) {
    require(t_min > 0 && t_max > t_min && std::isfinite(t_max), ErrorKind::input, "grid needs 0 < t_min < t_max");
    require(points_per_decade >= 1, ErrorKind::input, "points_per_decade must be positive");
    QuadratureGrid g;
    g.t_min = t_min;
    g.t_max = t_max;
    g.points_per_decade = points_per_decade;
    const real decades = std::log10(t_max / t_min);
    const index_t n = std::max<index_t>(2, static_cast<index_t>(std::ceil(decades * points_per_decade)) + 1);
    const real h = std::log(t_max / t_min) / real(n - 1);
    g.nodes.resize(n);
    g.weights = VecR::Constant(n, h);
    for (index_t i = 0; i < n; ++i) g.nodes[i] = t_min * std::exp(h * real(i));
    g.nodes[n - 1] = t_max;
    g.weights[0] = g.weights[n - 1] = h / 2;
    return g;
}

/// Same range with twice the density.
inline QuadratureGrid refine(const QuadratureGrid& g) {
    QuadratureGrid r = make_grid(g.t_min, g.t_max, 2 * g.points_per_decade);
    r.sigma_max = g.sigma_max;
    r.sigma_min = g.sigma_min;
    return r;
}

struct SpectralBounds {
    real sigma_max = 0.0;
    real sigma_min = 0.0;
};

inline SpectralBounds spectral_bounds(const FirstOrderSystem& sys) {
    SpectralBounds b;
    const MatC s = dense(sys.Sh);
    b.sigma_max = std::max(spectral_norm(s), spectral_norm(dense(sys.aTh)));
    if (b.sigma_max == 0.0) return b;
    Eigen::SelfAdjointEigenSolver<MatC> es(s.adjoint() * s, Eigen::EigenvaluesOnly);
    const real smin = std::sqrt(std::max(es.eigenvalues()(0), 0.0));
    const MatC linv = Eigen::PartialPivLU<MatC>(dense(sys.Lh)).solve(MatC::Identity(sys.V, sys.V));
    const real inv_norm = std::max(smin > 0 ? 1.0 / smin : std::numeric_limits<real>::infinity(),
                                   spectral_norm(MatC(s * linv)));
    b.sigma_min = 1.0 / inv_norm;
    return b;
}

/// t in [rel_min / sigma_max, rel_max / sigma_min].
inline QuadratureGrid default_grid(const FirstOrderSystem& sys, int points_per_decade = 16, real rel_min = 1e-4,
                                   real rel_max = 1e4) {
    const SpectralBounds b = spectral_bounds(sys);
    QuadratureGrid g = b.sigma_max > 0 ? make_grid(rel_min / b.sigma_max, rel_max / b.sigma_min, points_per_decade)
                                       : make_grid(rel_min, rel_max, points_per_decade);
    g.sigma_max = b.sigma_max;
    g.sigma_min = b.sigma_min;
    return g;
}

/// Relative error of the grid for  int_0^inf (t lambda / (1 + t^2 lambda^2))^2 dt/t = 1/2.
inline real scalar_quadrature_error(const QuadratureGrid& g, real lambda) {
    real sum = 0.0;
    for (index_t i = 0; i < g.nodes.size(); ++i) {
        const real x = g.nodes[i] * lambda;
        sum += g.weights[i] * std::pow(x / (1 + x * x), 2);
    }
    // int x/(1+x^2)^2 dx = x^2 / (2 (1 + x^2)).
    const real a = g.t_min * lambda, b = g.t_max * lambda;
    auto prim = [](real x) { const real y = x * x; return 0.5 * y / (1 + y); };
    const real tails = prim(a) + (0.5 - prim(b));
    return std::abs(sum + tails - 0.5) / 0.5;
}

// ---------------------------------------------------------------------------
// Uniform and sector bounds
// ---------------------------------------------------------------------------

struct UniformBounds {
    std::array<real, 4> sup{};
    std::array<real, 4> argmax_t{};
    real get(Family f) const { return sup[static_cast<size_t>(f)]; }
};

inline UniformBounds uniform_bound_scan(const FirstOrderSystem& sys, const QuadratureGrid& grid) {
    UniformBounds ub;
    for (index_t i = 0; i < grid.nodes.size(); ++i) {
        const real t = grid.nodes[i];
        const ResolventOperators ops(sys, t);
        for (Family f : all_families) {
            const real nrm = sys.size() <= 48
                                 ? spectral_norm(ops.dense_matrix(f))
                                 : lanczos_norm(sys.size(), [&](const VecC& x) { return ops.apply(f, x); },
                                                [&](const VecC& y) { return ops.apply_adjoint(f, y); });
            auto k = static_cast<size_t>(f);
            if (nrm > ub.sup[k]) ub.sup[k] = nrm, ub.argmax_t[k] = t;
        }
    }
    return ub;
}

/// Matrix-free (z - Pi_B)^{-1} with R_z = (z^2 - L)^{-1}:
///   [ z R_z     R_z aT                 ]
///   [ S R_z     z^{-1}(I + S R_z aT)   ].
class SectorResolvent {
public:
    SectorResolvent(const FirstOrderSystem& sys, cplx z) : sys_(&sys), z_(z) {
        require(z != cplx(0), ErrorKind::input, "resolvent point must be nonzero");
        const MatC a = z * z * MatC::Identity(sys.V, sys.V) - dense(sys.Lh);
        lu_.compute(a);
        lu_adj_.compute(a.adjoint());
    }
    VecC apply(const VecC& u) const {
        const index_t V = sys_->V, B = sys_->block2();
        const VecC y = lu_.solve(VecC(u.head(V) * z_ + sys_->aTh * u.tail(B)));
        VecC out(sys_->size());
        out.head(V) = y;
        // S R_z u0 + z^{-1}(v + S R_z aT v) = z^{-1}(v + S R_z (z u0 + aT v)).
        out.tail(B) = (u.tail(B) + kato::apply(sys_->Sh, y)) / z_;
        return out;
    }
    VecC apply_adjoint(const VecC& w) const {
        const index_t V = sys_->V, B = sys_->block2();
        const VecC y = lu_adj_.solve(VecC(w.head(V) + kato::apply(SpR(sys_->Sh.transpose()), VecC(w.tail(B))) / std::conj(z_)));
        VecC out(sys_->size());
        out.head(V) = std::conj(z_) * y;
        out.tail(B) = sys_->aTh.adjoint() * y + w.tail(B) / std::conj(z_);
        return out;
    }
    real norm() const {
        return lanczos_norm(sys_->size(), [&](const VecC& x) { return apply(x); },
                            [&](const VecC& y) { return apply_adjoint(y); });
    }

private:
    const FirstOrderSystem* sys_;
    cplx z_;
    Eigen::PartialPivLU<MatC> lu_, lu_adj_;
};

struct SectorBound {
    real value = 0.0;
    cplx worst_z = 0.0;
    std::size_t samples = 0;
};

/// max |z| ||(z - Pi_B)^{-1}|| over z on the rays arg z = +-(theta + eps), +-(pi - theta - eps).
inline SectorBound sector_resolvent_bound(const FirstOrderSystem& sys, real theta, std::size_t z_samples,
                                          const QuadratureGrid* grid = nullptr) {
    require(theta > sys.omega && theta < pi / 2, ErrorKind::input,
            "theta must lie in (omega, pi/2); measured omega = " + std::to_string(sys.omega));
    const real eps = 0.01 * (pi / 2 - theta);
    SpectralBounds b;
    if (grid) b = {grid->sigma_max, grid->sigma_min};
    else b = spectral_bounds(sys);
    const real lo = b.sigma_max > 0 ? 1e-2 * b.sigma_min : 1e-2, hi = b.sigma_max > 0 ? 1e2 * b.sigma_max : 1e2;
    const std::size_t per_ray = std::max<std::size_t>(1, (z_samples + 3) / 4);
    const std::array<real, 4> angles{theta + eps, -(theta + eps), pi - theta - eps, -(pi - theta - eps)};
    SectorBound res;
    for (real ang : angles)
        for (std::size_t j = 0; j < per_ray && res.samples < z_samples; ++j) {
            const real r = per_ray == 1 ? std::sqrt(lo * hi) : lo * std::pow(hi / lo, real(j) / real(per_ray - 1));
            const cplx z = std::polar(r, ang);
            const real val = r * SectorResolvent(sys, z).norm();
            ++res.samples;
            if (val > res.value) res.value = val, res.worst_z = z;
        }
    return res;
}

// ---------------------------------------------------------------------------
// Quadratic estimates
// ---------------------------------------------------------------------------

/// Range projection diag(I, S L^{-1} aT) in orthonormal coordinates, applied to columns
/// (S is injective unless it vanishes, so aT is onto the first block).
inline MatC project_to_range(const FirstOrderSystem& sys, const MatC& uh) {
    const index_t V = sys.V, B = sys.block2();
    MatC out = MatC::Zero(uh.rows(), uh.cols());
    if (sys.S.nonZeros() == 0) return out;
    out.topRows(V) = uh.topRows(V);
    const MatC at_v = sys.aTh * uh.bottomRows(B);
    out.bottomRows(B) = sys.Sh.cast<cplx>() * MatC(Eigen::PartialPivLU<MatC>(dense(sys.Lh)).solve(at_v));
    return out;
}

struct QuadraticValue {
    real value = 0.0;        ///< trapezoid sum over the nodes
    real tail_bound = 0.0;   ///< analytic bound on the two tails
};

/// int ||Q_t u||^2 dt/t for each column of `uh` (orthonormal coordinates).
inline std::vector<QuadraticValue> quadratic_functional_batch(const FirstOrderSystem& sys, const MatC& uh,
                                                              const QuadratureGrid& grid) {
    const index_t V = sys.V, B = sys.block2();
    std::vector<QuadraticValue> out(static_cast<size_t>(uh.cols()));
    if (uh.cols() == 0) return out;
    const MatC u0 = uh.topRows(V);
    const MatC atv = sys.aTh * uh.bottomRows(B);
    const SpC Sc = sys.Sh.cast<cplx>();
    for (index_t i = 0; i < grid.nodes.size(); ++i) {
        const real t = grid.nodes[i];
        Eigen::PartialPivLU<MatC> lu(MatC::Identity(V, V) + t * t * dense(sys.Lh));
        const MatC top = t * lu.solve(atv);
        const MatC bot = t * (Sc * MatC(lu.solve(u0)));
        for (index_t j = 0; j < uh.cols(); ++j)
            out[static_cast<size_t>(j)].value += grid.weights[i] * (top.col(j).squaredNorm() + bot.col(j).squaredNorm());
    }
    // Tails: ||Q_t u|| <= t sigma_max C_P ||u|| below t_min and
    // ||Q_t u|| <= (1 + C_P) ||P_R u|| / (t sigma_min) above t_max.
    if (grid.sigma_max > 0) {
        const real cp = std::max(ResolventOperators(sys, grid.t_min).norm(Family::P),
                                 ResolventOperators(sys, grid.t_max).norm(Family::P));
        const MatC pr = project_to_range(sys, uh);
        for (index_t j = 0; j < uh.cols(); ++j) {
            const real lower = 0.5 * std::pow(grid.t_min * grid.sigma_max * cp * uh.col(j).norm(), 2);
            const real upper = 0.5 * std::pow((1 + cp) * pr.col(j).norm() / (grid.t_max * grid.sigma_min), 2);
            out[static_cast<size_t>(j)].tail_bound = lower + upper;
        }
    }
    return out;
}

inline QuadraticValue quadratic_functional(const FirstOrderSystem& sys, const VecC& u, const QuadratureGrid& grid) {
    require(u.size() == sys.size(), ErrorKind::dimension, "field must live on the stacked space");
    const auto v = quadratic_functional_batch(sys, MatC(to_unitary(u, sys.weights)), grid).front();
    require(v.tail_bound <= 0.1 * v.value || v.value == 0.0, ErrorKind::numerical,
            "quadrature tails exceed 10% of the node sum; widen the grid");
    return v;
}

struct RatioScan {
    real min_ratio = 0.0;
    real max_ratio = 0.0;
    std::size_t trials = 0;
    bool vacuous = false;
};

inline RatioScan quadratic_ratio_scan(const FirstOrderSystem& sys, std::size_t trial_count, const QuadratureGrid& grid,
                                      std::uint64_t seed) {
    RatioScan rs;
    std::mt19937_64 rng(seed);
    MatC u = project_to_range(sys, detail::random_gaussian(sys.size(), static_cast<index_t>(trial_count), rng));
    std::vector<index_t> keep;
    for (index_t j = 0; j < u.cols(); ++j)
        if (u.col(j).norm() > 1e-12) keep.push_back(j);
    if (keep.empty()) {
        rs.vacuous = true;
        return rs;
    }
    MatC used(u.rows(), static_cast<index_t>(keep.size()));
    for (size_t j = 0; j < keep.size(); ++j) used.col(static_cast<index_t>(j)) = u.col(keep[j]);
    const auto vals = quadratic_functional_batch(sys, used, grid);
    rs.min_ratio = std::numeric_limits<real>::infinity();
    for (size_t j = 0; j < vals.size(); ++j) {
        const real r = vals[j].value / used.col(static_cast<index_t>(j)).squaredNorm();
        rs.min_ratio = std::min(rs.min_ratio, r);
        rs.max_ratio = std::max(rs.max_ratio, r);
    }
    rs.trials = vals.size();
    return rs;
}

// ---------------------------------------------------------------------------
// Holomorphic functional calculus
// ---------------------------------------------------------------------------

/// f(z) = even(z^2) + z odd(z^2) with f(0) = value_at_zero on the kernel.
struct HolomorphicFunction {
    std::string name;
    std::function<cplx(cplx)> even;
    std::function<cplx(cplx)> odd;
    cplx value_at_zero = 0.0;
    cplx operator()(cplx z) const {
        if (z == cplx(0)) return value_at_zero;
        return (even ? even(z * z) : cplx(0)) + z * (odd ? odd(z * z) : cplx(0));
    }
};

inline HolomorphicFunction sign_function() {
    return {"sign", nullptr, [](cplx w) { return 1.0 / std::sqrt(w); }, 0.0};
}

inline HolomorphicFunction sqrt_of_square_function() {
    return {"sqrt_of_square", [](cplx w) { return std::sqrt(w); }, nullptr, 0.0};
}

/// (1 + i s z)^{-1} = (1 + s^2 z^2)^{-1} - i s z (1 + s^2 z^2)^{-1}.
inline HolomorphicFunction resolvent_composite_function(real s = 1.0) {
    return {"resolvent_composite", [s](cplx w) { return 1.0 / (1.0 + s * s * w); },
            [s](cplx w) { return cplx(0, -s) / (1.0 + s * s * w); }, 1.0};
}

inline HolomorphicFunction custom_function(std::string name, std::function<cplx(cplx)> even,
                                           std::function<cplx(cplx)> odd, cplx value_at_zero) {
    return {std::move(name), std::move(even), std::move(odd), value_at_zero};
}

enum class CalculusMethod { automatic, eigendecomposition, contour_quadrature, both };

inline const char* to_string(CalculusMethod m) {
    switch (m) {
        case CalculusMethod::automatic: return "automatic";
        case CalculusMethod::eigendecomposition: return "eigendecomposition";
        case CalculusMethod::contour_quadrature: return "contour_quadrature";
        case CalculusMethod::both: return "both";
    }
    return "?";
}

struct CalculusResult {
    MatC operator_matrix;  ///< orthonormal coordinates
    CalculusMethod method = CalculusMethod::automatic;
    real cross_check = -1.0;      ///< relative difference of the two paths, -1 if only one ran
    real eigen_condition = 0.0;   ///< condition number of the eigenvector matrix of L
    real contour_tail = 0.0;
    std::string condition_notes;
};

/// Eigendecomposition of L in orthonormal coordinates.
struct LEigen {
    VecC values;
    MatC vectors;
    MatC inverse;
    real condition = 1.0;
    bool hermitian = false;
};

inline LEigen eigen_of(const MatC& L) {
    LEigen e;
    const real scale = std::max(L.cwiseAbs().maxCoeff(), 1e-300);
    if ((L - L.adjoint()).cwiseAbs().maxCoeff() <= 1e-13 * scale) {
        Eigen::SelfAdjointEigenSolver<MatC> es(hermitian_part(L));
        e.values = es.eigenvalues().cast<cplx>();
        e.vectors = es.eigenvectors();
        e.inverse = e.vectors.adjoint();
        e.hermitian = true;
        return e;
    }
    Eigen::ComplexEigenSolver<MatC> es(L);
    require(es.info() == Eigen::Success, ErrorKind::numerical, "eigensolver did not converge");
    e.values = es.eigenvalues();
    e.vectors = es.eigenvectors();
    const VecR sv = Eigen::JacobiSVD<MatC>(e.vectors).singularValues();
    e.condition = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<real>::infinity();
    e.inverse = Eigen::PartialPivLU<MatC>(e.vectors).solve(MatC::Identity(L.rows(), L.cols()));
    return e;
}

inline MatC apply_eigen(const LEigen& e, const std::function<cplx(cplx)>& g) {
    VecC gv(e.values.size());
    for (index_t i = 0; i < gv.size(); ++i) gv[i] = g(e.values[i]);
    return e.vectors * gv.asDiagonal() * e.inverse;
}

struct ContourOutput {
    MatC value;
    real tail = 0.0;
};

/// g(L) by trapezoid quadrature over the rays arg w = +-phi (log-spaced moduli),
/// applied to psi(w) = g(w) (w/c) / (1 + w/c)^3 with c = lo^{1/3} hi^{2/3} and undone
/// with (1 + L/c)^3 (L/c)^{-1}; c balances the amplification at both spectral ends.
/// g must grow slower than |w|^2 at infinity.
/// The spectrum of L must lie in |arg w| < phi and in [lo, hi] in modulus.
inline ContourOutput contour_function(const MatC& L, const std::function<cplx(cplx)>& g, real phi, real lo, real hi,
                                      int points_per_decade = 16) {
    const index_t V = L.rows();
    Eigen::ComplexSchur<MatC> schur(L);
    const MatC& T = schur.matrixT();
    const MatC& U = schur.matrixU();
    const MatC I = MatC::Identity(V, V);
    const real s0 = std::log(1e-9 * lo), s1 = std::log(1e9 * hi);
    const real h = std::log(10.0) / points_per_decade;
    const index_t n = static_cast<index_t>(std::ceil((s1 - s0) / h)) + 1;
    const real c = std::cbrt(lo * hi * hi);
    auto psi = [&](cplx w) { return g(w) * (w / c) / std::pow(1.0 + w / c, 3); };
    MatC acc = MatC::Zero(V, V);
    real first = 0.0, last = 0.0;
    for (index_t j = 0; j < n; ++j) {
        const real r = std::exp(s0 + h * real(j));
        for (int sgn : {-1, 1}) {
            const cplx dir = std::polar(1.0, sgn * phi);
            const cplx w = r * dir;
            const MatC res = (w * I - T).triangularView<Eigen::Upper>().solve(I);
            // Outward along arg = -phi, inward along arg = +phi.
            const cplx c = psi(w) * dir * r * h * real(-sgn) / cplx(0, 2 * pi);
            acc += c * res;
            const real mag = std::abs(c) * res.cwiseAbs().maxCoeff();
            if (j == 0) first = std::max(first, mag);
            if (j == n - 1) last = std::max(last, mag);
        }
    }
    const MatC ip = I + T / c;
    const MatC cube = ip * ip * ip;
    const MatC tinv = c * MatC(T.triangularView<Eigen::Upper>().solve(I));
    ContourOutput out;
    out.value = U * (cube * tinv * acc) * U.adjoint();
    const real scale = std::max(acc.cwiseAbs().maxCoeff(), 1e-300);
    out.tail = std::max(first, last) / scale;
    return out;
}

namespace detail {

inline MatC assemble_function_matrix(const FirstOrderSystem& sys, const MatC& gL, const MatC& kL, cplx g0,
                                     bool has_even, bool has_odd) {
    const index_t V = sys.V, B = sys.block2(), NH = sys.size();
    const MatC s = dense(sys.Sh), at = dense(sys.aTh);
    MatC out = MatC::Zero(NH, NH);
    out.bottomRightCorner(B, B) = g0 * MatC::Identity(B, B);
    if (has_even) {
        out.topLeftCorner(V, V) = gL;
        const MatC diff = gL - g0 * MatC::Identity(V, V);
        const MatC m = Eigen::PartialPivLU<MatC>(dense(sys.Lh)).solve(diff);
        out.bottomRightCorner(B, B) += s * (m * at);
    }
    if (has_odd) {
        out.topRightCorner(V, B) = kL * at;
        out.bottomLeftCorner(B, V) = s * kL;
    }
    return out;
}

}  // namespace detail

inline CalculusResult holomorphic_calculus(const FirstOrderSystem& sys, const HolomorphicFunction& f,
                                           CalculusMethod method = CalculusMethod::automatic) {
    CalculusResult res;
    const index_t V = sys.V;
    const MatC L = dense(sys.Lh);
    const bool has_even = static_cast<bool>(f.even), has_odd = static_cast<bool>(f.odd);
    const cplx g0 = f.value_at_zero;
    if (L.cwiseAbs().maxCoeff() == 0.0) {
        res.operator_matrix = f.value_at_zero * MatC::Identity(sys.size(), sys.size());
        res.method = method == CalculusMethod::contour_quadrature ? method : CalculusMethod::eigendecomposition;
        res.condition_notes = "Pi_B = 0";
        return res;
    }
    MatC eig_result, contour_result;
    bool eig_ok = false;
    LEigen e;
    if (method != CalculusMethod::contour_quadrature) {
        e = eigen_of(L);
        res.eigen_condition = e.condition;
        eig_ok = e.condition < 1e8;
        if (!eig_ok) {
            res.condition_notes = "eigenvector condition " + std::to_string(e.condition) + " >= 1e8; contour path used";
            if (method == CalculusMethod::eigendecomposition)
                throw Error(ErrorKind::numerical, "L is not diagonalizable to condition < 1e8 (" +
                                                      std::to_string(e.condition) + ")");
        }
    }
    if (eig_ok) {
        const MatC gL = has_even ? apply_eigen(e, f.even) : MatC::Zero(V, V);
        const MatC kL = has_odd ? apply_eigen(e, f.odd) : MatC::Zero(V, V);
        eig_result = detail::assemble_function_matrix(sys, gL, kL, g0, has_even, has_odd);
    }
    const bool want_contour = method == CalculusMethod::contour_quadrature || method == CalculusMethod::both || !eig_ok;
    if (want_contour) {
        const real mu = 0.5 * (sys.omega + pi / 2);
        real phi = std::min(2 * mu, pi - 1e-3);
        // Enclose the spectrum of L with some margin.
        const VecC ev = Eigen::ComplexEigenSolver<MatC>(L, false).eigenvalues();
        real max_arg = 0.0, lo = std::numeric_limits<real>::infinity(), hi = 0.0;
        for (index_t i = 0; i < ev.size(); ++i) {
            max_arg = std::max(max_arg, std::abs(std::arg(ev[i])));
            lo = std::min(lo, std::abs(ev[i]));
            hi = std::max(hi, std::abs(ev[i]));
        }
        if (max_arg >= phi) {
            phi = std::min(0.5 * (max_arg + pi), pi - 1e-3);
            res.condition_notes += (res.condition_notes.empty() ? "" : "; ") +
                                   std::string("contour widened to enclose the spectrum of L");
        }
        require(max_arg < phi, ErrorKind::numerical, "spectrum of L touches the negative axis; contour not representable");
        // Trapezoid error in log|w| decays like exp(-2 pi d / h), with d the angular
        // gap between the rays and the singularities on either side.
        const real gap = std::min(phi - max_arg, pi - phi);
        const int ppd = std::max(16, static_cast<int>(std::ceil(std::log(10.0) * 30.0 / (2 * pi * gap))));
        ContourOutput gL, kL;
        if (has_even) gL = contour_function(L, f.even, phi, lo, hi, ppd);
        if (has_odd) kL = contour_function(L, f.odd, phi, lo, hi, ppd);
        res.contour_tail = std::max(gL.tail, kL.tail);
        require(res.contour_tail <= 1e-8, ErrorKind::numerical, "contour tails exceed tolerance; widen the contour");
        contour_result = detail::assemble_function_matrix(sys, has_even ? gL.value : MatC::Zero(V, V),
                                                          has_odd ? kL.value : MatC::Zero(V, V), g0, has_even, has_odd);
    }
    if (eig_ok && want_contour) {
        res.cross_check = (eig_result - contour_result).cwiseAbs().maxCoeff() /
                          std::max(eig_result.cwiseAbs().maxCoeff(), 1e-300);
    }
    if (eig_ok && method != CalculusMethod::contour_quadrature) {
        res.operator_matrix = std::move(eig_result);
        res.method = CalculusMethod::eigendecomposition;
    } else {
        res.operator_matrix = std::move(contour_result);
        res.method = CalculusMethod::contour_quadrature;
    }
    if (method == CalculusMethod::both && eig_ok) res.method = CalculusMethod::both;
    return res;
}

// ---------------------------------------------------------------------------
// Square root of L
// ---------------------------------------------------------------------------

struct RatioStats {
    real min = 0, max = 0, median = 0;
    std::size_t count = 0;
};

inline RatioStats stats_of(std::vector<real> v) {
    RatioStats s;
    s.count = v.size();
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.min = v.front();
    s.max = v.back();
    s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    return s;
}

struct KatoOptions {
    CalculusMethod method = CalculusMethod::automatic;
    std::size_t random_trials = 50;
    std::size_t eigenvector_trials = 8;
    std::uint64_t seed = 1;
};

struct KatoResult {
    MatC sqrtL;  ///< orthonormal coordinates
    RatioStats ratios;
    std::vector<real> ratio_values;
    real square_residual = 0.0;  ///< ||sqrtL^2 - L|| / ||L||
    CalculusResult calculus;
};

/// r(u) = ||sqrt(L) u|| / ||u||_{W12} for a vertex field u (natural coordinates).
inline real kato_ratio(const EmbeddedMesh& mesh, const MatC& sqrtL, const VecC& u) {
    const VecC uh = to_unitary(u, mesh.vertex_measure());
    return (sqrtL * uh).norm() / sobolev_norm(mesh, u);
}

inline KatoResult kato_square_root(const EmbeddedMesh& mesh, const CoefficientField& coeffs, const KatoOptions& opt = {}) {
    const FirstOrderSystem sys = assemble_kato_system(mesh, coeffs);
    KatoResult out;
    out.calculus = holomorphic_calculus(sys, sqrt_of_square_function(), opt.method);
    out.sqrtL = out.calculus.operator_matrix.topLeftCorner(sys.V, sys.V);
    const MatC L = dense(sys.Lh);
    out.square_residual = (out.sqrtL * out.sqrtL - L).cwiseAbs().maxCoeff() / std::max(L.cwiseAbs().maxCoeff(), 1e-300);
    std::mt19937_64 rng(opt.seed);
    for (std::size_t i = 0; i < opt.random_trials; ++i) {
        const VecC u = detail::random_gaussian(sys.V, 1, rng);
        out.ratio_values.push_back(kato_ratio(mesh, out.sqrtL, u));
    }
    if (opt.eigenvector_trials > 0) {
        const LaplacianSpectrum spec = laplacian_spectrum(mesh);
        const index_t k = std::min<index_t>(static_cast<index_t>(opt.eigenvector_trials), spec.values.size());
        for (index_t j = 0; j < k; ++j)
            out.ratio_values.push_back(kato_ratio(mesh, out.sqrtL, VecC(spec.vectors.col(j).cast<cplx>())));
    }
    out.ratios = stats_of(out.ratio_values);
    return out;
}

// ---------------------------------------------------------------------------
// Principal part
// ---------------------------------------------------------------------------

/// Constant coordinate sections of H, one column per pointwise component.
inline MatC constant_sections(const FirstOrderSystem& sys) {
    MatC w = MatC::Zero(sys.size(), sys.N);
    w.col(0).head(sys.V).setOnes();
    w.col(1).segment(sys.V, sys.V).setOnes();
    for (index_t c = 0; c < sys.C; ++c)
        for (int al = 0; al < sys.n; ++al) w(2 * sys.V + c * sys.n + al, 2 + al) = 1.0;
    return w;
}

/// Apply a resolvent family member to natural-coordinate columns.
inline MatC apply_family(const ResolventOperators& ops, Family f, const MatC& u) {
    const FirstOrderSystem& sys = ops.system();
    MatC out(u.rows(), u.cols());
    for (index_t j = 0; j < u.cols(); ++j)
        out.col(j) = from_unitary(ops.apply(f, to_unitary(u.col(j), sys.weights)), sys.weights);
    return out;
}

struct PrincipalPart {
    real t = 0;
    int level = 0;
    std::vector<MatC> gamma;   ///< N x N matrix per point
    VecR density;              ///< |gamma_t(x)|^2 (Frobenius)
    VecR cube_average;         ///< mean of |gamma_t|^2 over each cube of Delta_t
    CarlesonSample carleson_density;
    real max_cube_average() const { return cube_average.size() ? cube_average.maxCoeff() : 0.0; }
};

inline PrincipalPart principal_part(const FirstOrderSystem& sys, const PointCloudSpace& space, const DyadicStructure& ds,
                                    real t, real dlog_t = 1.0) {
    require(space.size() == sys.V, ErrorKind::dimension, "space must be built from the mesh vertices");
    PrincipalPart pp;
    pp.t = t;
    pp.level = level_for_scale(ds, t);
    const ResolventOperators ops(sys, t);
    const MatC th = apply_family(ops, Family::Theta, constant_sections(sys));
    std::vector<MatC> cols;
    for (int b = 0; b < sys.N; ++b) cols.push_back(sys.evaluate(th.col(b)));
    pp.gamma.assign(static_cast<size_t>(sys.V), MatC::Zero(sys.N, sys.N));
    pp.density = VecR::Zero(sys.V);
    for (index_t x = 0; x < sys.V; ++x) {
        MatC& g = pp.gamma[static_cast<size_t>(x)];
        for (int b = 0; b < sys.N; ++b) g.col(b) = cols[static_cast<size_t>(b)].row(x).transpose();
        pp.density[x] = g.squaredNorm();
    }
    const auto& cubes = ds.levels[static_cast<size_t>(pp.level)];
    pp.cube_average = VecR::Zero(static_cast<index_t>(cubes.size()));
    for (size_t q = 0; q < cubes.size(); ++q) {
        real s = 0.0;
        for (index_t x : cubes[q].members) s += space.mass(x) * pp.density[x];
        pp.cube_average[static_cast<index_t>(q)] = s / cubes[q].measure;
    }
    pp.carleson_density.t0 = 1.0;
    for (index_t x = 0; x < sys.V; ++x)
        if (pp.density[x] > 0) pp.carleson_density.support.push_back({x, t, pp.density[x] * space.mass(x) * dlog_t});
    return pp;
}

/// gamma_t(x) applied to a pointwise field (rows = points, N columns).
inline MatC apply_gamma(const PrincipalPart& pp, const MatC& field) {
    MatC out(field.rows(), field.cols());
    for (index_t x = 0; x < field.rows(); ++x) out.row(x) = (pp.gamma[static_cast<size_t>(x)] * field.row(x).transpose()).transpose();
    return out;
}

inline real field_norm(const PointCloudSpace& space, const MatC& field) {
    return std::sqrt((space.masses().array() * field.rowwise().squaredNorm().array()).sum());
}

/// t0 = min{1, C_Theta / (4 a^3 lambda)}, with t0 = 1 when lambda = 0.
inline real diagnostic_t0(real c_theta, real a, real lambda) {
    if (lambda <= 0) return 1.0;
    return bracket_min1(c_theta / (4 * a * a * a * lambda));
}

/// Grid nodes inside [delta^depth, t0] where the averages A_t are defined.
inline std::vector<std::pair<real, real>> diagnostic_nodes(const QuadratureGrid& grid, const DyadicStructure& ds, real t0) {
    std::vector<std::pair<real, real>> out;
    for (index_t i = 0; i < grid.nodes.size(); ++i) {
        const real t = grid.nodes[i];
        if (t >= ds.min_scale() && t <= t0) out.emplace_back(t, grid.weights[i]);
    }
    return out;
}

struct GammaCarleson {
    real norm = 0.0;
    real t0 = 1.0;
    std::size_t nodes = 0;
    CarlesonSample measure;
};

/// Carleson norm of |gamma_t(x)|^2 dmu(x) dt/t over grid nodes in [delta^depth, t0].
inline GammaCarleson gamma_carleson_check(const FirstOrderSystem& sys, const PointCloudSpace& space,
                                          const DyadicStructure& ds, const QuadratureGrid& grid, real t0) {
    GammaCarleson gc;
    gc.t0 = t0;
    gc.measure.t0 = t0;
    for (const auto& [t, w] : diagnostic_nodes(grid, ds, t0)) {
        const PrincipalPart pp = principal_part(sys, space, ds, t, w);
        for (const auto& a : pp.carleson_density.support) gc.measure.support.push_back(a);
        ++gc.nodes;
    }
    gc.norm = carleson_norm(ds, space, gc.measure);
    return gc;
}

struct ReductionTerms {
    real principal = 0.0;   ///< int ||Theta_t P_t u - gamma_t A_t P_t u||^2 dt/t
    real remainder = 0.0;   ///< int ||gamma_t A_t (P_t - I) u||^2 dt/t
    real carleson = 0.0;    ///< iint |A_t u|^2 |gamma_t|^2 dmu dt/t
    real direct = 0.0;      ///< int ||Theta_t P_t u||^2 dt/t
    std::size_t nodes = 0;
};

/// The three-term split of int ||Theta_t P_t u||^2 dt/t for u in R(Gamma)
/// (u is projected first), each normalized by ||u||^2.
inline ReductionTerms reduction_split_diagnostics(const FirstOrderSystem& sys, const PointCloudSpace& space,
                                                  const DyadicStructure& ds, const VecC& u_in,
                                                  const QuadratureGrid& grid, real t0) {
    ReductionTerms rt;
    // P_{R(Gamma)} = diag(0, S L^{-1} aT).
    VecC uh = to_unitary(u_in, sys.weights);
    uh.head(sys.V).setZero();
    uh = project_to_range(sys, MatC(uh)).col(0);
    const real n2 = uh.squaredNorm();
    if (n2 == 0.0) return rt;
    const VecC u = from_unitary(uh, sys.weights);
    const MatC Eu = sys.evaluate(u);
    for (const auto& [t, w] : diagnostic_nodes(grid, ds, t0)) {
        const ResolventOperators ops(sys, t);
        const PrincipalPart pp = principal_part(sys, space, ds, t);
        const VecC pu = from_unitary(ops.apply(Family::P, uh), sys.weights);
        const VecC tpu = from_unitary(ops.apply(Family::Theta, to_unitary(pu, sys.weights)), sys.weights);
        const MatC E_tpu = sys.evaluate(tpu);
        const MatC E_pu = sys.evaluate(pu);
        const MatC at_pu = dyadic_average_level(ds, space, pp.level, E_pu);
        const MatC at_u = dyadic_average_level(ds, space, pp.level, Eu);
        const MatC at_diff = dyadic_average_level(ds, space, pp.level, MatC(E_pu - Eu));
        rt.principal += w * std::pow(field_norm(space, E_tpu - apply_gamma(pp, at_pu)), 2);
        rt.remainder += w * std::pow(field_norm(space, apply_gamma(pp, at_diff)), 2);
        rt.carleson += w * (space.masses().array() * pp.density.array() * at_u.rowwise().squaredNorm().array()).sum();
        rt.direct += w * std::pow(field_norm(space, E_tpu), 2);
        ++rt.nodes;
    }
    rt.principal /= n2;
    rt.remainder /= n2;
    rt.carleson /= n2;
    rt.direct /= n2;
    return rt;
}

// ---------------------------------------------------------------------------
// Weighted Poincare and interpolation inequalities
// ---------------------------------------------------------------------------

struct PoincareRatio {
    real ratio = 0.0;
    index_t worst_cube = -1;
    bool precondition_warning = false;
};

/// max over Q in Delta_t of
///   sum_x mu(x) |u(x) - u_Q|^2 <t/rho>^M e^{-m rho/t}
///   / t^2 sum_x mu(x) (|u|^2 + |grad u|^2) <t/rho>^{M-(kappa+3)} e^{-(m/a - lambda t) rho/t},
/// rho = rho(x, Q). |grad u|^2 at a vertex is the incident-cell mean.
inline PoincareRatio weighted_poincare_check(const EmbeddedMesh& mesh, const PointCloudSpace& space,
                                             const DyadicStructure& ds, real t, real M_exp, real m_exp, const VecC& u,
                                             const GrowthProfile& growth) {
    require(u.size() == mesh.num_vertices() && space.size() == mesh.num_vertices(), ErrorKind::dimension,
            "field and space must match the mesh vertices");
    PoincareRatio pr;
    const real a = ds.a();
    pr.precondition_warning = !(M_exp > growth.kappa + 3 && m_exp >= a * growth.lambda);
    const int k = level_for_scale(ds, t);
    const int m = mesh.intrinsic_dim();
    const VecC gu = gradient_operator(mesh).apply(u);
    VecR cell_g2(mesh.num_cells());
    for (index_t c = 0; c < mesh.num_cells(); ++c) cell_g2[c] = gu.segment(c * m, m).squaredNorm();
    const VecR vert_g2 = detail::incident_cell_average(mesh) * cell_g2;
    const auto& cubes = ds.levels[static_cast<size_t>(k)];
    for (size_t q = 0; q < cubes.size(); ++q) {
        const Cube& Q = cubes[q];
        cplx mean = 0.0;
        for (index_t x : Q.members) mean += space.mass(x) * u[x];
        mean /= Q.measure;
        real lhs = 0.0, rhs = 0.0;
        for (index_t x = 0; x < space.size(); ++x) {
            const real rho = space.distance_to_set(x, Q.members);
            const real br = ratio_bracket(t, rho);
            lhs += space.mass(x) * std::norm(u[x] - mean) * std::pow(br, M_exp) * std::exp(-m_exp * rho / t);
            rhs += space.mass(x) * (std::norm(u[x]) + vert_g2[x]) * std::pow(br, M_exp - (growth.kappa + 3)) *
                   std::exp(-(m_exp / a - growth.lambda * t) * rho / t);
        }
        rhs *= t * t;
        const real r = lhs == 0.0 ? 0.0 : lhs / rhs;
        if (r > pr.ratio) pr.ratio = r, pr.worst_cube = static_cast<index_t>(q);
    }
    return pr;
}

enum class Upsilon { Pi, Gamma, GammaStar };

inline VecC apply_upsilon(const FirstOrderSystem& sys, Upsilon y, const VecC& u) {
    switch (y) {
        case Upsilon::Pi: return sys.apply_pi_b(u);
        case Upsilon::Gamma: return sys.apply_gamma(u);
        case Upsilon::GammaStar: return sys.apply_gamma_b_adj(u);
    }
    return u;
}

struct InterpolationRatio {
    real ratio = 0.0;
    index_t worst_cube = -1;
    std::size_t skipped = 0;
};

/// max over Q in Delta_t of |mean_Q Yu|^2 / [ l(Q)^{-eta} (mean|u|^2)^{eta/2} (mean|Yu|^2)^{1-eta/2} + mean|u|^2 ],
/// with pointwise values from FirstOrderSystem::evaluate. Y = Pi stands for Pi_B
/// and Y = GammaStar for Gamma_B*.
inline InterpolationRatio interpolation_inequality_check(const FirstOrderSystem& sys, const PointCloudSpace& space,
                                                         const DyadicStructure& ds, const VecC& u, Upsilon y, real t) {
    InterpolationRatio ir;
    const int k = level_for_scale(ds, t);
    const MatC eu = sys.evaluate(u);
    const MatC ey = sys.evaluate(apply_upsilon(sys, y, u));
    const real eta = ds.eta;
    const auto& cubes = ds.levels[static_cast<size_t>(k)];
    for (size_t q = 0; q < cubes.size(); ++q) {
        const Cube& Q = cubes[q];
        VecC mean_y = VecC::Zero(sys.N);
        real mu2 = 0.0, my2 = 0.0;
        for (index_t x : Q.members) {
            mean_y += space.mass(x) * ey.row(x).transpose();
            mu2 += space.mass(x) * eu.row(x).squaredNorm();
            my2 += space.mass(x) * ey.row(x).squaredNorm();
        }
        mean_y /= Q.measure;
        mu2 /= Q.measure;
        my2 /= Q.measure;
        if (mu2 == 0.0 && my2 == 0.0) {
            ++ir.skipped;
            continue;
        }
        const real num = mean_y.squaredNorm();
        const real den = std::pow(Q.side, -eta) * std::pow(mu2, eta / 2) * std::pow(my2, 1 - eta / 2) + mu2;
        const real r = num == 0.0 ? 0.0 : num / den;
        if (r > ir.ratio) ir.ratio = r, ir.worst_cube = static_cast<index_t>(q);
    }
    return ir;
}

}  // namespace kato
