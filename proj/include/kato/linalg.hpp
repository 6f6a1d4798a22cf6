#pragma once

// Dense linear-algebra helpers: weighted-to-unitary conversion, spectral norms
// by Golub-Kahan-Lanczos, rank-revealing range and null bases, numerical range
// angles and principal angles.

#include "kato/core.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace kato {

inline constexpr real rank_tolerance = 1e-10;

inline MatC dense(const SpC& m) { return MatC(m); }
inline MatC dense(const SpR& m) { return MatR(m).cast<cplx>(); }

/// diag(sqrt(w_rows)) M diag(1/sqrt(w_cols)): the matrix of M between the
/// weighted spaces expressed in orthonormal coordinates.
inline MatC unitary(const MatC& m, const VecR& w_rows, const VecR& w_cols) {
    return w_rows.cwiseSqrt().cast<cplx>().asDiagonal() * m * w_cols.cwiseSqrt().cwiseInverse().cast<cplx>().asDiagonal();
}

inline SpC unitary(const SpC& m, const VecR& w_rows, const VecR& w_cols) {
    return SpC(w_rows.cwiseSqrt().cast<cplx>().asDiagonal() * m * w_cols.cwiseSqrt().cwiseInverse().cast<cplx>().asDiagonal());
}

inline VecC to_unitary(const VecC& u, const VecR& w) { return w.cwiseSqrt().cast<cplx>().cwiseProduct(u); }
inline VecC from_unitary(const VecC& u, const VecR& w) { return w.cwiseSqrt().cwiseInverse().cast<cplx>().cwiseProduct(u); }

/// Largest singular value. Small matrices use a full SVD; larger ones run
/// Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.
template <class Apply, class ApplyAdj>
real lanczos_norm(index_t cols, Apply&& apply, ApplyAdj&& apply_adj, int steps = 40, std::uint64_t seed = 17) {
    if (cols == 0) return 0.0;
    steps = static_cast<int>(std::min<index_t>(steps, cols));
    std::mt19937_64 rng(seed);
    std::normal_distribution<real> g;
    std::vector<VecC> V, U;
    VecC v(cols);
    for (index_t i = 0; i < cols; ++i) v[i] = cplx(g(rng), g(rng));
    v.normalize();
    std::vector<real> alpha, beta;
    VecC u_prev;
    real b = 0.0;
    for (int j = 0; j < steps; ++j) {
        V.push_back(v);
        VecC u = apply(v);
        if (j > 0) u -= b * u_prev;
        for (const auto& q : U) u -= q * q.dot(u);
        const real a = u.norm();
        alpha.push_back(a);
        if (a == 0.0) break;
        u /= a;
        U.push_back(u);
        VecC w = apply_adj(u) - a * v;
        for (const auto& q : V) w -= q * q.dot(w);
        b = w.norm();
        if (b <= 1e-14 * a) break;
        beta.push_back(b);
        v = w / b;
        u_prev = u;
    }
    const index_t k = static_cast<index_t>(alpha.size());
    MatR B = MatR::Zero(k, k);
    for (index_t i = 0; i < k; ++i) {
        B(i, i) = alpha[static_cast<size_t>(i)];
        if (i + 1 < k) B(i, i + 1) = beta[static_cast<size_t>(i)];
    }
    return Eigen::JacobiSVD<MatR>(B).singularValues()(0);
}

inline real spectral_norm(const MatC& m) {
    if (m.size() == 0) return 0.0;
    if (std::min(m.rows(), m.cols()) <= 48) return Eigen::JacobiSVD<MatC>(m).singularValues()(0);
    return lanczos_norm(m.cols(), [&](const VecC& x) { return VecC(m * x); },
                        [&](const VecC& y) { return VecC(m.adjoint() * y); });
}

/// Orthonormal basis of the column space; singular values below tol * sigma_max are dropped.
inline MatC range_basis(const MatC& m, real tol = rank_tolerance) {
    if (m.size() == 0) return MatC(m.rows(), 0);
    Eigen::BDCSVD<MatC> svd(m, Eigen::ComputeThinU);
    const VecR& s = svd.singularValues();
    index_t r = 0;
    while (r < s.size() && s[r] > tol * s[0]) ++r;
    return svd.matrixU().leftCols(r);
}

/// Orthonormal basis of the null space.
inline MatC null_basis(const MatC& m, real tol = rank_tolerance) {
    if (m.rows() == 0) return MatC::Identity(m.cols(), m.cols());
    Eigen::BDCSVD<MatC> svd(m, Eigen::ComputeFullV);
    const VecR& s = svd.singularValues();
    index_t r = 0;
    while (r < s.size() && s[0] > 0 && s[r] > tol * s[0]) ++r;
    return svd.matrixV().rightCols(m.cols() - r);
}

inline MatC hermitian_part(const MatC& t) { return (t + t.adjoint()) / 2.0; }

inline real min_hermitian_eigenvalue(const MatC& h) {
    if (h.rows() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<MatC> es(h, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

/// sup |arg <T x, x>| over the numerical range of T, assuming Re T >= 0.
/// Returns pi/2 when the numerical range leaves the closed right half-plane.
inline real numerical_range_angle(const MatC& t) {
    if (t.rows() == 0) return 0.0;
    auto inside = [&](real phi) {
        const cplx r = std::polar(1.0, pi / 2 - phi);
        return min_hermitian_eigenvalue(hermitian_part(r * t)) >= -1e-13 * std::max(1.0, t.norm()) &&
               min_hermitian_eigenvalue(hermitian_part(std::conj(r) * t)) >= -1e-13 * std::max(1.0, t.norm());
    };
    if (!inside(pi / 2)) return pi / 2;
    real lo = 0.0, hi = pi / 2;
    if (inside(0.0)) return 0.0;
    for (int it = 0; it < 48; ++it) {
        const real mid = 0.5 * (lo + hi);
        (inside(mid) ? hi : lo) = mid;
    }
    return hi;
}

/// Smallest principal angle between the spans of two orthonormal bases.
inline real min_principal_angle(const MatC& q1, const MatC& q2) {
    if (q1.cols() == 0 || q2.cols() == 0) return pi / 2;
    const MatC c = q1.adjoint() * q2;
    const real s = std::min(1.0, Eigen::JacobiSVD<MatC>(c).singularValues()(0));
    return std::acos(s);
}

/// Largest eigenvalue of the pencil (N, D) with D Hermitian positive definite.
struct PencilResult {
    real value = 0.0;
    VecC vector;
    bool regularized = false;
};

inline PencilResult max_pencil_eigenvalue(const MatC& num, const MatC& den) {
    PencilResult res;
    if (num.rows() == 0) return res;
    Eigen::SelfAdjointEigenSolver<MatC> ed(hermitian_part(den));
    VecR ev = ed.eigenvalues();
    const real floor = 1e-12 * std::max(ev.maxCoeff(), 1e-300);
    // Directions on which the denominator vanishes are dropped and flagged.
    std::vector<index_t> keep;
    for (index_t i = 0; i < ev.size(); ++i) {
        if (ev[i] > floor) keep.push_back(i);
        else res.regularized = true;
    }
    MatC basis(den.rows(), static_cast<index_t>(keep.size()));
    for (size_t j = 0; j < keep.size(); ++j)
        basis.col(static_cast<index_t>(j)) = ed.eigenvectors().col(keep[j]) / std::sqrt(ev[keep[j]]);
    const MatC reduced = hermitian_part(basis.adjoint() * num * basis);
    Eigen::SelfAdjointEigenSolver<MatC> en(reduced);
    const index_t top = reduced.rows() - 1;
    res.value = en.eigenvalues()(top);
    res.vector = basis * en.eigenvectors().col(top);
    return res;
}

}  // namespace kato
