#pragma once

// The first-order system {Gamma, B1, B2} on the stacked space
//   H = L2(vertices) (+) L2(vertices) (+) L2(cells; C^n),
// its accretive coefficients, the hypothesis checks, Hodge projections,
// resolvent families and off-diagonal decay scans.
//
// Block form. With S = [I; iota_* G] and T = S* A~,
//   Gamma = [0 0; S 0],  Gamma_B* = [0 aT; 0 0],  Pi_B = [0 aT; S 0],
// so Pi_B^2 = diag(L, S aT) with L = a T S and S (aT S) = (S aT) S. Every
// function of Pi_B is evaluated through the V x V matrix L.
//
// Dense operator matrices returned by this module are expressed in orthonormal
// coordinates u^ = W^{1/2} u; field arguments are in natural coordinates.

#include "kato/core.hpp"
#include "kato/dyadic_cubes.hpp"
#include "kato/linalg.hpp"
#include "kato/manifold.hpp"
#include "kato/mesh.hpp"
#include "kato/metric_space.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/QR>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace kato {

// ---------------------------------------------------------------------------
// Coefficients
// ---------------------------------------------------------------------------

/// Multiplication coefficients. A01, A10 rows and A11 are in the cell tangent frames.
struct CoefficientField {
    VecC a;
    VecC A00;
    MatC A01;  ///< cells x m
    MatC A10;  ///< cells x m
    std::vector<MatC> A11;
    real kappa1 = 1.0;
    real kappa2 = 1.0;
};

inline CoefficientField identity_coefficients(const EmbeddedMesh& mesh) {
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int m = mesh.intrinsic_dim();
    CoefficientField f;
    f.a = VecC::Ones(V);
    f.A00 = VecC::Ones(V);
    f.A01 = MatC::Zero(C, m);
    f.A10 = MatC::Zero(C, m);
    f.A11.assign(static_cast<size_t>(C), MatC::Identity(m, m));
    return f;
}

/// Constant multiples: a = alpha, A = beta * I.
inline CoefficientField scaled_identity_coefficients(const EmbeddedMesh& mesh, cplx alpha, cplx beta) {
    CoefficientField f = identity_coefficients(mesh);
    f.a.setConstant(alpha);
    f.A00.setConstant(beta);
    for (auto& b : f.A11) b *= beta;
    f.kappa1 = alpha.real();
    f.kappa2 = beta.real();
    return f;
}

inline void check_coefficient_sizes(const EmbeddedMesh& mesh, const CoefficientField& f) {
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int m = mesh.intrinsic_dim();
    require(f.a.size() == V && f.A00.size() == V, ErrorKind::input,
            "vertex coefficients must have one entry per vertex (" + std::to_string(V) + ")");
    require(f.A01.rows() == C && f.A01.cols() == m && f.A10.rows() == C && f.A10.cols() == m, ErrorKind::input,
            "cell coefficients A01/A10 must be cells x " + std::to_string(m));
    require(static_cast<index_t>(f.A11.size()) == C, ErrorKind::input, "A11 must have one block per cell");
    for (const auto& b : f.A11)
        require(b.rows() == m && b.cols() == m, ErrorKind::input, "A11 blocks must be m x m");
}

namespace detail {

/// (E u)_c = mean of u over the vertices of c.
inline SpR vertex_to_cell_average(const EmbeddedMesh& mesh) {
    const int k = mesh.intrinsic_dim() + 1;
    std::vector<TripletR> trip;
    for (index_t c = 0; c < mesh.num_cells(); ++c)
        for (int j = 0; j < k; ++j) trip.emplace_back(c, mesh.cells()(c, j), 1.0 / k);
    SpR e(mesh.num_cells(), mesh.num_vertices());
    e.setFromTriplets(trip.begin(), trip.end());
    return e;
}

/// E* = M_v^{-1} E^T M_c.
inline SpR cell_to_vertex_adjoint(const EmbeddedMesh& mesh) {
    const SpR e = vertex_to_cell_average(mesh);
    return SpR(mesh.vertex_measure().cwiseInverse().asDiagonal() * SpR(e.transpose()) * mesh.cell_measure().asDiagonal());
}

/// Measure-weighted mean of a cell field over the cells incident to each vertex.
inline SpR incident_cell_average(const EmbeddedMesh& mesh) {
    std::vector<TripletR> trip;
    for (index_t v = 0; v < mesh.num_vertices(); ++v) {
        real total = 0.0;
        for (index_t c : mesh.vertex_cells()[static_cast<size_t>(v)]) total += mesh.cell_measure()[c];
        for (index_t c : mesh.vertex_cells()[static_cast<size_t>(v)]) trip.emplace_back(v, c, mesh.cell_measure()[c] / total);
    }
    SpR p(mesh.num_vertices(), mesh.num_cells());
    p.setFromTriplets(trip.begin(), trip.end());
    return p;
}

inline cplx random_half_disc(std::mt19937_64& rng) {
    std::uniform_real_distribution<real> u(0.0, 1.0);
    const real r = std::sqrt(u(rng));
    const real th = pi * (u(rng) - 0.5);
    return std::polar(r, th);
}

inline MatC random_gaussian(index_t r, index_t c, std::mt19937_64& rng) {
    std::normal_distribution<real> g;
    MatC m(r, c);
    for (index_t i = 0; i < r; ++i)
        for (index_t j = 0; j < c; ++j) m(i, j) = cplx(g(rng), g(rng));
    return m;
}

}  // namespace detail

/// Measured accretivity of a coefficient field.
struct CoefficientCheck {
    real min_re_a = 0.0;       ///< min over vertices of Re a
    real form_minimum = 0.0;   ///< min Re J_A(u,u) / ||u||^2_{W12}
    real max_abs_a = 0.0;
    bool pass = false;
};

/// Smallest eigenvalue of Herm(S^ * A~^ S^) in the metric S^* S^ (= the W12 Gram).
inline real form_accretivity(const SpR& Sh, const SpC& Ah) {
    const MatC s = dense(Sh);
    const MatC num = hermitian_part(s.adjoint() * (Ah * s));
    const MatC den = s.adjoint() * s;
    Eigen::LLT<MatC> llt(den);
    require(llt.info() == Eigen::Success, ErrorKind::numerical, "W12 Gram matrix is not positive definite");
    const MatC linv = llt.matrixL().solve(MatC::Identity(den.rows(), den.cols()));
    return min_hermitian_eigenvalue(hermitian_part(linv * num * linv.adjoint()));
}

// ---------------------------------------------------------------------------
// The assembled system
// ---------------------------------------------------------------------------

struct FirstOrderSystem {
    index_t V = 0, C = 0;
    int n = 0, m = 0;
    int N = 0;  ///< pointwise block size 2 + n

    VecR Mv;       ///< vertex measure
    VecR w2;       ///< weights of the (u1, u~) block
    VecR weights;  ///< stacked weights

    VecC a;
    SpR S;       ///< [I; iota_* G], natural coordinates
    SpC Atilde;  ///< conjugated coefficient on the (u1, u~) block
    SpC aT;      ///< a S* A~
    SpC L;       ///< a S* A~ S

    SpR Sh;   ///< S in orthonormal coordinates
    SpC Ath;  ///< A~ in orthonormal coordinates
    SpC aTh;
    SpC Lh;

    SpR E;     ///< vertex -> cell average
    SpR Pavg;  ///< cell -> vertex incident average
    std::vector<index_t> owner;

    real kappa1 = 0, kappa2 = 0;
    real omega1 = 0, omega2 = 0, omega = 0;
    real b1_norm = 0, b2_norm = 0;
    real L_direct_residual = 0;

    index_t size() const { return 2 * V + n * C; }
    index_t block2() const { return V + n * C; }

    // Natural-coordinate sparse operators on H.
    SpC gamma() const { return embed(S.cast<cplx>(), V, 0); }
    SpC gamma_adj() const {
        const SpR st = Mv.cwiseInverse().asDiagonal() * SpR(S.transpose()) * w2.asDiagonal();
        return embed(st.cast<cplx>(), 0, V);
    }
    SpC gamma_b_adj() const { return embed(aT, 0, V); }
    SpC pi() const { return SpC(gamma() + gamma_adj()); }
    SpC pi_b() const { return SpC(gamma() + gamma_b_adj()); }
    SpC B1() const {
        SpC b(size(), size());
        std::vector<TripletC> t;
        for (index_t v = 0; v < V; ++v) t.emplace_back(v, v, a[v]);
        b.setFromTriplets(t.begin(), t.end());
        return b;
    }
    SpC B2() const { return embed(Atilde, V, V); }

    // Orthonormal-coordinate dense Pi_B.
    MatC pi_b_hat() const {
        MatC p = MatC::Zero(size(), size());
        p.block(0, V, V, block2()) = dense(aTh);
        p.block(V, 0, block2(), V) = dense(Sh);
        return p;
    }
    MatC pi_hat() const {
        MatC p = MatC::Zero(size(), size());
        const MatC s = dense(Sh);
        p.block(0, V, V, block2()) = s.adjoint();
        p.block(V, 0, block2(), V) = s;
        return p;
    }

    VecC apply_pi_b(const VecC& u) const {
        VecC out(size());
        out.head(V) = aT * u.tail(block2());
        out.tail(block2()) = kato::apply(S, VecC(u.head(V)));
        return out;
    }
    VecC apply_gamma(const VecC& u) const {
        VecC out = VecC::Zero(size());
        out.tail(block2()) = kato::apply(S, VecC(u.head(V)));
        return out;
    }
    VecC apply_gamma_adj(const VecC& u) const {
        VecC out = VecC::Zero(size());
        const VecC wv = w2.cast<cplx>().cwiseProduct(u.tail(block2()));
        out.head(V) = Mv.cwiseInverse().cast<cplx>().cwiseProduct(kato::apply(SpR(S.transpose()), wv));
        return out;
    }
    VecC apply_gamma_b_adj(const VecC& u) const {
        VecC out = VecC::Zero(size());
        out.head(V) = aT * u.tail(block2());
        return out;
    }

    real norm(const VecC& u) const { return weighted_norm(u, weights); }

    /// Pointwise values (u0(x), u1(x), incident-cell mean of u~ at x), V x N.
    MatC evaluate(const VecC& u) const {
        MatC out(V, N);
        out.col(0) = u.head(V);
        out.col(1) = u.segment(V, V);
        for (int al = 0; al < n; ++al) {
            VecC comp(C);
            for (index_t c = 0; c < C; ++c) comp[c] = u[2 * V + c * n + al];
            out.col(2 + al) = kato::apply(Pavg, comp);
        }
        return out;
    }

    /// Indices of H located in a vertex set (cells go with their owner).
    std::vector<index_t> located_in(const std::vector<char>& in_set) const {
        std::vector<index_t> idx;
        for (index_t v = 0; v < V; ++v)
            if (in_set[static_cast<size_t>(v)]) idx.push_back(v);
        for (index_t v = 0; v < V; ++v)
            if (in_set[static_cast<size_t>(v)]) idx.push_back(V + v);
        for (index_t c = 0; c < C; ++c)
            if (in_set[static_cast<size_t>(owner[static_cast<size_t>(c)])])
                for (int al = 0; al < n; ++al) idx.push_back(2 * V + c * n + al);
        return idx;
    }

private:
    SpC embed(const SpC& block, index_t row0, index_t col0) const {
        std::vector<TripletC> t;
        for (int k = 0; k < block.outerSize(); ++k)
            for (SpC::InnerIterator it(block, k); it; ++it) t.emplace_back(row0 + it.row(), col0 + it.col(), it.value());
        SpC out(size(), size());
        out.setFromTriplets(t.begin(), t.end());
        return out;
    }
};

/// The matrix of a{A00 u + E*(A01 G u) - div(A11 G u + A10 E u)} assembled from
/// frame gradients, without going through the ambient push-forward.
inline SpC direct_operator_matrix(const EmbeddedMesh& mesh, const CoefficientField& f) {
    check_coefficient_sizes(mesh, f);
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int m = mesh.intrinsic_dim();
    const DiscreteOperator g = gradient_operator(mesh);
    const SpC G = g.matrix.cast<cplx>();
    std::vector<TripletC> t11, t10, t01;
    for (index_t c = 0; c < C; ++c) {
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < m; ++j) t11.emplace_back(c * m + i, c * m + j, f.A11[static_cast<size_t>(c)](i, j));
            for (int k = 0; k <= m; ++k) t10.emplace_back(c * m + i, mesh.cells()(c, k), f.A10(c, i) / real(m + 1));
            t01.emplace_back(c, c * m + i, f.A01(c, i));
        }
    }
    SpC A11(C * m, C * m), A10E(C * m, V), A01(C, C * m);
    A11.setFromTriplets(t11.begin(), t11.end());
    A10E.setFromTriplets(t10.begin(), t10.end());
    A01.setFromTriplets(t01.begin(), t01.end());
    const SpC Es = detail::cell_to_vertex_adjoint(mesh).cast<cplx>();
    const SpC div = divergence_operator(mesh).matrix.cast<cplx>();
    SpC A00(V, V);
    {
        std::vector<TripletC> t;
        for (index_t v = 0; v < V; ++v) t.emplace_back(v, v, f.A00[v]);
        A00.setFromTriplets(t.begin(), t.end());
    }
    SpC inner = SpC(A00 + Es * (A01 * G) - div * SpC(A11 * G + A10E));
    return SpC(f.a.asDiagonal() * inner);
}

namespace detail {

/// A~ on the (u1, u~) block in natural coordinates.
inline SpC conjugated_coefficients(const EmbeddedMesh& mesh, const CoefficientField& f) {
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int m = mesh.intrinsic_dim(), n = mesh.ambient_dim();
    std::vector<TripletC> t;
    for (index_t v = 0; v < V; ++v) t.emplace_back(v, v, f.A00[v]);
    for (index_t c = 0; c < C; ++c) {
        const MatC F = mesh.tangent_frames()[static_cast<size_t>(c)].cast<cplx>();
        const MatC a11 = F * f.A11[static_cast<size_t>(c)] * F.transpose();
        const VecC a10 = F * f.A10.row(c).transpose();
        const VecC a01 = F * f.A01.row(c).transpose();
        const index_t base = V + c * n;
        for (int al = 0; al < n; ++al) {
            for (int be = 0; be < n; ++be)
                if (a11(al, be) != cplx(0)) t.emplace_back(base + al, base + be, a11(al, be));
            for (int j = 0; j <= m; ++j) {
                const index_t v = mesh.cells()(c, j);
                if (a10[al] != cplx(0)) t.emplace_back(base + al, v, a10[al] / real(m + 1));
                const real w = mesh.cell_measure()[c] / (real(m + 1) * mesh.vertex_measure()[v]);
                if (a01[al] != cplx(0)) t.emplace_back(v, base + al, w * a01[al]);
            }
        }
    }
    SpC out(V + n * C, V + n * C);
    out.setFromTriplets(t.begin(), t.end());
    return out;
}

/// Accretivity constants and angles of B1 on R(Gamma*) and B2 on R(Gamma).
inline void measure_angles(FirstOrderSystem& s) {
    s.kappa1 = std::numeric_limits<real>::infinity();
    s.omega1 = 0.0;
    for (index_t v = 0; v < s.V; ++v) {
        s.kappa1 = std::min(s.kappa1, s.a[v].real());
        s.omega1 = std::max(s.omega1, std::abs(std::arg(s.a[v])));
    }
    if (s.V == 0) s.kappa1 = 0.0;
    const MatC q = range_basis(dense(s.Sh));
    const MatC t = q.adjoint() * (s.Ath * q);
    s.kappa2 = min_hermitian_eigenvalue(hermitian_part(t));
    s.omega2 = numerical_range_angle(t);
    s.omega = 0.5 * (s.omega1 + s.omega2);
    s.b1_norm = s.a.cwiseAbs().maxCoeff();
    s.b2_norm = spectral_norm(dense(s.Ath));
}

}  // namespace detail

/// Builds the system from its blocks. `S` and `Atilde` act on (u1, u~) with the
/// given weights; mesh-derived locality data may be left empty.
inline FirstOrderSystem system_from_blocks(int n, int m, index_t cells, const VecR& Mv, const VecR& w2, const SpR& S,
                                           const SpC& Atilde, const VecC& a) {
    FirstOrderSystem s;
    s.V = Mv.size();
    s.C = cells;
    s.n = n;
    s.m = m;
    s.N = 2 + n;
    require(w2.size() == s.V + n * cells && S.rows() == w2.size() && S.cols() == s.V, ErrorKind::dimension,
            "block sizes do not match the stacked layout");
    require(Atilde.rows() == w2.size() && Atilde.cols() == w2.size() && a.size() == s.V, ErrorKind::dimension,
            "coefficient blocks do not match the stacked layout");
    s.Mv = Mv;
    s.w2 = w2;
    s.weights.resize(s.size());
    s.weights << Mv, w2;
    s.a = a;
    s.S = S;
    s.Atilde = Atilde;
    const SpC Sstar = (Mv.cwiseInverse().asDiagonal() * SpR(S.transpose()) * w2.asDiagonal()).cast<cplx>();
    s.aT = SpC(a.asDiagonal() * SpC(Sstar * Atilde));
    s.L = SpC(s.aT * S.cast<cplx>());
    s.Sh = SpR(w2.cwiseSqrt().asDiagonal() * S * Mv.cwiseSqrt().cwiseInverse().asDiagonal());
    s.Ath = unitary(Atilde, w2, w2);
    s.aTh = unitary(s.aT, Mv, w2);
    s.Lh = unitary(s.L, Mv, Mv);
    s.owner.resize(static_cast<size_t>(cells), 0);
    s.E = SpR(cells, s.V);
    s.Pavg = SpR(s.V, cells);
    detail::measure_angles(s);
    return s;
}

inline FirstOrderSystem assemble_kato_system(const EmbeddedMesh& mesh, const CoefficientField& f) {
    check_coefficient_sizes(mesh, f);
    const int n = mesh.ambient_dim(), m = mesh.intrinsic_dim();
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    std::vector<TripletR> ts;
    for (index_t v = 0; v < V; ++v) ts.emplace_back(v, v, 1.0);
    const SpR ig = ambient_gradient_operator(mesh).matrix;
    for (int k = 0; k < ig.outerSize(); ++k)
        for (SpR::InnerIterator it(ig, k); it; ++it) ts.emplace_back(V + it.row(), it.col(), it.value());
    SpR S(V + n * C, V);
    S.setFromTriplets(ts.begin(), ts.end());
    VecR w2(V + n * C);
    w2 << mesh.vertex_measure(), repeated_cell_weights(mesh, n);
    FirstOrderSystem s = system_from_blocks(n, m, C, mesh.vertex_measure(), w2, S,
                                            detail::conjugated_coefficients(mesh, f), f.a);
    s.E = detail::vertex_to_cell_average(mesh);
    s.Pavg = detail::incident_cell_average(mesh);
    s.owner = mesh.cell_owner();
    const SpC direct = direct_operator_matrix(mesh, f);
    const real scale = std::max(1.0, MatC(s.L).cwiseAbs().maxCoeff());
    s.L_direct_residual = MatC(s.L - direct).cwiseAbs().maxCoeff() / scale;
    return s;
}

inline CoefficientCheck verify_coefficients(const EmbeddedMesh& mesh, const CoefficientField& f) {
    check_coefficient_sizes(mesh, f);
    CoefficientCheck chk;
    chk.min_re_a = f.a.real().minCoeff();
    chk.max_abs_a = f.a.cwiseAbs().maxCoeff();
    const FirstOrderSystem s = assemble_kato_system(mesh, f);
    chk.form_minimum = form_accretivity(s.Sh, s.Ath);
    const real slack = 1e-10;
    chk.pass = chk.min_re_a >= f.kappa1 - slack && chk.form_minimum >= f.kappa2 - slack;
    return chk;
}

/// a = kappa1 + (bound - kappa1) z with z uniform in the right half disc; per cell
/// the (1+m) block of A - kappa2 I is H + K with H >= 0, K skew, each of norm at
/// most (bound - kappa2)/2. The 00 entry is moved to the vertices by the
/// transpose of the cell averaging, which can only increase Re J_A.
inline CoefficientField random_accretive_coefficients(const EmbeddedMesh& mesh, real kappa1, real kappa2, real bound,
                                                      std::uint64_t seed, int max_attempts = 50) {
    require(kappa1 > 0 && kappa2 > 0, ErrorKind::input, "accretivity constants must be positive");
    require(kappa1 <= bound && kappa2 <= bound, ErrorKind::input, "accretivity constants must not exceed the bound");
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int m = mesh.intrinsic_dim();
    const real r = bound - kappa2;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<real> unit(0.0, 1.0);
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        CoefficientField f = identity_coefficients(mesh);
        f.kappa1 = kappa1;
        f.kappa2 = kappa2;
        for (index_t v = 0; v < V; ++v) f.a[v] = kappa1 + (bound - kappa1) * detail::random_half_disc(rng);
        VecC lumped = VecC::Zero(V);
        for (index_t c = 0; c < C; ++c) {
            MatC P = MatC::Zero(m + 1, m + 1);
            if (r > 0) {
                const MatC g = detail::random_gaussian(m + 1, m + 1, rng);
                MatC h = g * g.adjoint();
                h *= 0.5 * r * unit(rng) / spectral_norm(h);
                const MatC k0 = detail::random_gaussian(m + 1, m + 1, rng);
                MatC k = (k0 - k0.adjoint()) / 2.0;
                k *= 0.5 * r * unit(rng) / spectral_norm(k);
                P = h + k;
            }
            const real share = mesh.cell_measure()[c] / real(m + 1);
            for (int j = 0; j <= m; ++j) lumped[mesh.cells()(c, j)] += share * P(0, 0);
            f.A01.row(c) = P.block(0, 1, 1, m);
            f.A10.row(c) = P.block(1, 0, m, 1).transpose();
            f.A11[static_cast<size_t>(c)] = kappa2 * MatC::Identity(m, m) + P.block(1, 1, m, m);
        }
        for (index_t v = 0; v < V; ++v) f.A00[v] = kappa2 + lumped[v] / mesh.vertex_measure()[v];
        if (r == 0 && kappa1 == bound) return f;
        if (verify_coefficients(mesh, f).pass) return f;
    }
    throw Error(ErrorKind::numerical, "rejection budget exhausted drawing accretive coefficients; use a smaller "
                                      "perturbation (bound closer to kappa)");
}

// ---------------------------------------------------------------------------
// Hypotheses
// ---------------------------------------------------------------------------

struct HypothesisEntry {
    std::string id;
    bool pass = false;
    real constant = 0.0;
    std::string witness;
    std::string notes;
};

struct HypothesisReport {
    std::vector<HypothesisEntry> entries;
    real h8_range_gamma_adj = 0.0;
    real h8_range_gamma = 0.0;

    bool all_pass() const {
        return std::all_of(entries.begin(), entries.end(), [](const HypothesisEntry& e) { return e.pass; });
    }
    const HypothesisEntry& get(const std::string& id) const {
        for (const auto& e : entries)
            if (e.id == id) return e;
        throw Error(ErrorKind::input, "no hypothesis entry " + id);
    }
};

namespace detail {

inline std::string cube_name(int k, index_t i) {
    return "cube (" + std::to_string(k) + "," + std::to_string(i) + ")";
}

inline real sparse_max_abs(const SpC& m) {
    real out = 0.0;
    for (int k = 0; k < m.outerSize(); ++k)
        for (SpC::InnerIterator it(m, k); it; ++it) out = std::max(out, std::abs(it.value()));
    return out;
}

/// W12 derivative on the (u1, u~) block: frame gradient of u1 and of the incident
/// average of each ambient component of u~. Rows are weighted by the cell measure.
inline SpR block2_derivative(const EmbeddedMesh& mesh, VecR* row_weights) {
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int m = mesh.intrinsic_dim(), n = mesh.ambient_dim();
    const SpR G = gradient_operator(mesh).matrix;
    const SpR GP = G * incident_cell_average(mesh);
    std::vector<TripletR> t;
    for (int k = 0; k < G.outerSize(); ++k)
        for (SpR::InnerIterator it(G, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    for (int al = 0; al < n; ++al)
        for (int k = 0; k < GP.outerSize(); ++k)
            for (SpR::InnerIterator it(GP, k); it; ++it)
                t.emplace_back((al + 1) * C * m + it.row(), V + it.col() * n + al, it.value());
    SpR d((n + 1) * C * m, V + n * C);
    d.setFromTriplets(t.begin(), t.end());
    const VecR wc = repeated_cell_weights(mesh, m);
    row_weights->resize((n + 1) * C * m);
    for (int b = 0; b <= n; ++b) row_weights->segment(b * C * m, C * m) = wc;
    return d;
}

}  // namespace detail

/// H6: pointwise ratio |[Gamma, eta]u| / (|grad eta| max_{v in c} |u_v|) over hat
/// bumps eta(x) = (1 - dist(x, Q)/l(Q))_+ attached to cubes.
inline HypothesisEntry check_commutator(const FirstOrderSystem& sys, const EmbeddedMesh& mesh,
                                        const PointCloudSpace& space, const DyadicStructure& ds, std::uint64_t seed) {
    HypothesisEntry e{"H6", false, 0.0, "", ""};
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int n = mesh.ambient_dim(), m = mesh.intrinsic_dim();
    const SpR IG = ambient_gradient_operator(mesh).matrix;
    std::mt19937_64 rng(seed);
    std::normal_distribution<real> g;
    std::vector<VecC> fields(3, VecC(V));
    for (auto& u : fields)
        for (index_t v = 0; v < V; ++v) u[v] = cplx(g(rng), g(rng));
    std::size_t used = 0;
    for (int k = 1; k <= std::min(ds.depth, 3); ++k) {
        for (index_t qi = 0; qi < ds.num_cubes(k) && qi < 16; ++qi) {
            const Cube& q = ds.cube(k, qi);
            VecR eta(V);
            for (index_t v = 0; v < V; ++v) eta[v] = std::max(0.0, 1.0 - space.distance_to_set(v, q.members) / q.side);
            const VecR geta = IG * eta;
            const VecR ceta = sys.E * eta;
            for (const auto& u : fields) {
                const VecC lhs = kato::apply(IG, VecC(eta.cast<cplx>().cwiseProduct(u)));
                const VecC gu = kato::apply(IG, u);
                for (index_t c = 0; c < C; ++c) {
                    const real ge = geta.segment(c * n, n).norm();
                    if (ge < 1e-12) continue;
                    real umax = 0.0;
                    for (int j = 0; j <= m; ++j) umax = std::max(umax, std::abs(u[mesh.cells()(c, j)]));
                    if (umax == 0.0) continue;
                    const real comm = (lhs.segment(c * n, n) - ceta[c] * gu.segment(c * n, n)).norm();
                    const real ratio = comm / (ge * umax);
                    if (ratio > e.constant) {
                        e.constant = ratio;
                        e.witness = detail::cube_name(k, qi) + ", cell " + std::to_string(c);
                    }
                }
            }
            ++used;
        }
    }
    e.pass = std::isfinite(e.constant);
    e.notes = std::to_string(used) + " bump profiles; constant depends on the bump family";
    return e;
}

/// H7: sup |integral over a cube of Gamma u| / (mu(Q)^{1/2} ||u||) for u supported
/// inside the cube, and the Gamma* analogue.
inline HypothesisEntry check_local_integrals(const EmbeddedMesh& mesh, const DyadicStructure& ds) {
    HypothesisEntry e{"H7", false, 0.0, "", ""};
    const index_t V = mesh.num_vertices(), C = mesh.num_cells();
    const int n = mesh.ambient_dim(), m = mesh.intrinsic_dim();
    const SpR IG = ambient_gradient_operator(mesh).matrix;
    const SpR IGt = SpR(IG.transpose());
    const VecR& Mv = mesh.vertex_measure();
    const VecR& Mc = mesh.cell_measure();
    real worst_gamma = 0.0, worst_adj = 0.0;
    for (int k = 0; k <= ds.depth; ++k) {
        for (index_t qi = 0; qi < ds.num_cubes(k); ++qi) {
            const Cube& q = ds.cube(k, qi);
            std::vector<char> inq(static_cast<size_t>(V), 0);
            for (index_t x : q.members) inq[static_cast<size_t>(x)] = 1;
            std::vector<char> cell_in(static_cast<size_t>(C), 0);
            for (index_t c = 0; c < C; ++c) {
                bool all = true;
                for (int j = 0; j <= m; ++j) all = all && inq[static_cast<size_t>(mesh.cells()(c, j))];
                cell_in[static_cast<size_t>(c)] = all;
            }
            std::vector<index_t> interior;
            for (index_t v : q.members) {
                bool all = true;
                for (index_t c : mesh.vertex_cells()[static_cast<size_t>(v)]) all = all && cell_in[static_cast<size_t>(c)];
                if (all) interior.push_back(v);
            }
            const real rootmu = std::sqrt(q.measure);
            if (!interior.empty()) {
                // Columns: unit vectors in orthonormal coordinates of u0 at interior vertices.
                MatR K = MatR::Zero(1 + n, static_cast<index_t>(interior.size()));
                for (size_t j = 0; j < interior.size(); ++j) {
                    const index_t v = interior[j];
                    const real sv = std::sqrt(Mv[v]);
                    K(0, static_cast<index_t>(j)) = Mv[v] / sv;
                    for (SpR::InnerIterator it(IGt, v); it; ++it) {
                        const index_t c = it.col() / n;
                        K(1 + it.col() % n, static_cast<index_t>(j)) += Mc[c] * it.value() / sv;
                    }
                }
                const real val = Eigen::JacobiSVD<MatR>(K).singularValues()(0) / rootmu;
                if (val > worst_gamma) {
                    worst_gamma = val;
                    if (val >= worst_adj) e.witness = "Gamma on " + detail::cube_name(k, qi);
                }
            }
            // Gamma*: u1 on the cube, u~ on cells inside it; the functional is
            // sum_{v in Q} M_v (S* (u1, u~))_v.
            real sq = 0.0;
            for (index_t v : q.members) sq += Mv[v];
            for (index_t c = 0; c < C; ++c) {
                if (!cell_in[static_cast<size_t>(c)]) continue;
                for (int al = 0; al < n; ++al) {
                    real col = 0.0;
                    for (int j = 0; j <= m; ++j) col += IG.coeff(c * n + al, mesh.cells()(c, j));
                    sq += Mc[c] * col * col;
                }
            }
            const real val = std::sqrt(sq) / rootmu;
            if (val > worst_adj) {
                worst_adj = val;
                if (val >= worst_gamma) e.witness = "Gamma* on " + detail::cube_name(k, qi);
            }
        }
    }
    e.constant = std::max(worst_gamma, worst_adj);
    e.pass = std::isfinite(e.constant);
    std::ostringstream os;
    os << "Gamma part " << worst_gamma << ", Gamma* part " << worst_adj
       << "; u supported on vertices whose incident cells lie in the cube";
    e.notes = os.str();
    return e;
}

/// H8 on R(Gamma*) and R(Gamma): sqrt of the top eigenvalue of ||u||^2_{W12} against
/// ||Pi u||^2 on each range. Both ranges lie in N(Pi)^perp.
inline HypothesisEntry check_coercivity(const FirstOrderSystem& sys, const EmbeddedMesh& mesh, real* c_adj,
                                        real* c_gamma) {
    HypothesisEntry e{"H8", false, 0.0, "", ""};
    const MatC s = dense(sys.Sh);
    const index_t V = sys.V;
    // R(Gamma*) = (u0, 0, 0); Pi u = (0, S u0).
    const SpR G = gradient_operator(mesh).matrix;
    const VecR wc = repeated_cell_weights(mesh, mesh.intrinsic_dim());
    const MatC gh = dense(SpR(wc.cwiseSqrt().asDiagonal() * G * sys.Mv.cwiseSqrt().cwiseInverse().asDiagonal()));
    const MatC num1 = MatC::Identity(V, V) + gh.adjoint() * gh;
    const MatC den1 = s.adjoint() * s;
    const PencilResult r1 = max_pencil_eigenvalue(num1, den1);
    // R(Gamma) = (0, S x); Pi u = (S* v, 0).
    const MatC q = range_basis(s);
    VecR rw;
    const SpR D = detail::block2_derivative(mesh, &rw);
    const SpR Dh = SpR(rw.cwiseSqrt().asDiagonal() * D * sys.w2.cwiseSqrt().cwiseInverse().asDiagonal());
    const MatC dq = Dh.cast<cplx>() * q;
    const MatC num2 = q.adjoint() * q + dq.adjoint() * dq;
    const MatC pq = s.adjoint() * q;
    const MatC den2 = pq.adjoint() * pq;
    const PencilResult r2 = max_pencil_eigenvalue(num2, den2);
    *c_adj = std::sqrt(std::max(0.0, r1.value));
    *c_gamma = std::sqrt(std::max(0.0, r2.value));
    e.constant = std::max(*c_adj, *c_gamma);
    e.witness = *c_gamma >= *c_adj ? "R(Gamma)" : "R(Gamma*)";
    std::ostringstream os;
    os << "R(Gamma*) constant " << *c_adj << ", R(Gamma) constant " << *c_gamma
       << "; evaluated on (R(Gamma) u R(Gamma*)) intersected with N(Pi)^perp";
    if (r1.regularized || r2.regularized) os << "; near-singular denominator directions dropped (regularized)";
    e.notes = os.str();
    e.pass = std::isfinite(e.constant) && e.constant > 0.0;
    return e;
}

inline HypothesisReport check_hypotheses(const FirstOrderSystem& sys, const EmbeddedMesh& mesh,
                                         const PointCloudSpace& space, const DyadicStructure& ds,
                                         std::uint64_t seed = 1) {
    require(mesh.num_vertices() == sys.V && mesh.num_cells() == sys.C, ErrorKind::dimension,
            "system was not assembled on this mesh");
    require(space.size() == sys.V, ErrorKind::dimension, "space must be built from the mesh vertices");
    HypothesisReport rep;
    {
        const real g2 = detail::sparse_max_abs(SpC(sys.gamma() * sys.gamma()));
        rep.entries.push_back({"H1", g2 == 0.0, g2, "", "Gamma^2 computed as a sparse product; closedness automatic"});
    }
    {
        std::ostringstream os;
        os << "kappa1 " << sys.kappa1 << ", kappa2 " << sys.kappa2 << ", omega1 " << sys.omega1 << ", omega2 "
           << sys.omega2;
        const bool ok = sys.kappa1 > 0 && sys.kappa2 > 0 && sys.omega < pi / 2;
        rep.entries.push_back({"H2", ok, sys.omega, "omega = (omega1 + omega2)/2", os.str()});
    }
    {
        const SpC g = sys.gamma(), ga = sys.gamma_adj(), b1 = sys.B1(), b2 = sys.B2();
        const real r1 = detail::sparse_max_abs(SpC(ga * SpC(b2 * SpC(b1 * ga))));
        const real r2 = detail::sparse_max_abs(SpC(g * SpC(b1 * SpC(b2 * g))));
        rep.entries.push_back({"H3", r1 == 0.0 && r2 == 0.0, std::max(r1, r2), "",
                               "Gamma* B2 B1 Gamma* and Gamma B1 B2 Gamma vanish by block sparsity"});
    }
    rep.entries.push_back({"H4", sys.N == 2 + sys.n, static_cast<real>(sys.N), "", "pointwise dimension 2 + n"});
    {
        // Every coupling in A~ joins a location with itself or a vertex with an incident cell.
        bool local = true;
        for (int k = 0; k < sys.Atilde.outerSize() && local; ++k)
            for (SpC::InnerIterator it(sys.Atilde, k); it; ++it) {
                const index_t r = it.row(), c = it.col();
                auto cell_of = [&](index_t i) { return i < sys.V ? index_t(-1) : (i - sys.V) / sys.n; };
                if (r < sys.V && c < sys.V) local = local && r == c;
                else if (r >= sys.V && c >= sys.V) local = local && cell_of(r) == cell_of(c);
                else {
                    const index_t v = r < sys.V ? r : c, cl = cell_of(r < sys.V ? c : r);
                    bool inc = false;
                    for (int j = 0; j <= sys.m; ++j) inc = inc || mesh.cells()(cl, j) == v;
                    local = local && inc;
                }
            }
        std::ostringstream os;
        os << "||B1|| " << sys.b1_norm << ", ||B2|| " << sys.b2_norm
           << "; cross terms couple a cell with its own vertices";
        rep.entries.push_back({"H5", local && std::isfinite(sys.b2_norm), std::max(sys.b1_norm, sys.b2_norm), "",
                               os.str()});
    }
    rep.entries.push_back(check_commutator(sys, mesh, space, ds, seed));
    rep.entries.push_back(check_local_integrals(mesh, ds));
    rep.entries.push_back(check_coercivity(sys, mesh, &rep.h8_range_gamma_adj, &rep.h8_range_gamma));
    return rep;
}

// ---------------------------------------------------------------------------
// Structural residuals
// ---------------------------------------------------------------------------

struct StructuralResiduals {
    real gamma_squared = 0;      ///< max |Gamma^2|
    real gamma_b_adj_squared = 0;
    real h3 = 0;
    real adjointness = 0;        ///< <Gamma u, v> - <u, Gamma* v> relative
    real pi_b_square_offdiag = 0;
    real L_direct = 0;
    real intertwining = 0;       ///< ||S L - (S aT) S|| relative
    real max() const {
        return std::max({gamma_squared, gamma_b_adj_squared, h3, adjointness, pi_b_square_offdiag, L_direct,
                         intertwining});
    }
};

inline StructuralResiduals structural_residuals(const FirstOrderSystem& sys, std::uint64_t seed = 3) {
    StructuralResiduals r;
    const SpC g = sys.gamma(), ga = sys.gamma_adj(), gb = sys.gamma_b_adj(), b1 = sys.B1(), b2 = sys.B2();
    r.gamma_squared = detail::sparse_max_abs(SpC(g * g));
    r.gamma_b_adj_squared = detail::sparse_max_abs(SpC(gb * gb));
    r.h3 = std::max(detail::sparse_max_abs(SpC(ga * SpC(b2 * SpC(b1 * ga)))),
                    detail::sparse_max_abs(SpC(g * SpC(b1 * SpC(b2 * g)))));
    std::mt19937_64 rng(seed);
    const VecC u = detail::random_gaussian(sys.size(), 1, rng), v = detail::random_gaussian(sys.size(), 1, rng);
    const cplx lhs = (sys.weights.cast<cplx>().cwiseProduct(v)).dot(sys.apply_gamma(u));
    const cplx rhs = (sys.weights.cast<cplx>().cwiseProduct(sys.apply_gamma_adj(v))).dot(u);
    r.adjointness = std::abs(lhs - rhs) / (sys.norm(u) * sys.norm(v));
    const SpC pb = sys.pi_b();
    const SpC sq = SpC(pb * pb);
    real off = 0.0, top = 0.0;
    for (int k = 0; k < sq.outerSize(); ++k)
        for (SpC::InnerIterator it(sq, k); it; ++it) {
            top = std::max(top, std::abs(it.value()));
            if ((it.row() < sys.V) != (it.col() < sys.V)) off = std::max(off, std::abs(it.value()));
        }
    r.pi_b_square_offdiag = off / std::max(top, 1e-300);
    r.L_direct = sys.L_direct_residual;
    const SpC Sc = sys.S.cast<cplx>();
    const SpC lhs2 = SpC(Sc * sys.L), rhs2 = SpC(SpC(Sc * sys.aT) * Sc);
    r.intertwining = detail::sparse_max_abs(SpC(lhs2 - rhs2)) / std::max(detail::sparse_max_abs(lhs2), 1e-300);
    return r;
}

/// (||Gamma u|| + ||Gamma_B* u||) / ||Pi_B u|| over random u.
struct GGBResult {
    real min_ratio = 0, max_ratio = 0;
};

inline GGBResult ggb_ratio(const FirstOrderSystem& sys, std::size_t trials, std::uint64_t seed) {
    GGBResult res{std::numeric_limits<real>::infinity(), 0.0};
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < trials; ++i) {
        const VecC u = detail::random_gaussian(sys.size(), 1, rng);
        const real d = sys.norm(sys.apply_pi_b(u));
        if (d == 0.0) continue;
        const real ratio = (sys.norm(sys.apply_gamma(u)) + sys.norm(sys.apply_gamma_b_adj(u))) / d;
        res.min_ratio = std::min(res.min_ratio, ratio);
        res.max_ratio = std::max(res.max_ratio, ratio);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Hodge decomposition
// ---------------------------------------------------------------------------

/// P_{R(Gamma_B*)} = diag(I, 0), P_{R(Gamma)} = diag(0, S L^{-1} aT) and
/// P_N = diag(0, I - S L^{-1} aT), all in orthonormal coordinates.
struct HodgeProjections {
    MatC kernel;
    MatC range_gamma_b_adj;
    MatC range_gamma;
    real sum_residual = 0;
    real product_residual = 0;
    real kernel_residual = 0;  ///< kernel(Pi_B) against kernel(Gamma_B*) and kernel(Gamma)
    real min_angle = 0;
    index_t kernel_dim = 0;
};

inline HodgeProjections hodge_projections(const FirstOrderSystem& sys) {
    const index_t V = sys.V, B = sys.block2(), NH = sys.size();
    const MatC s = dense(sys.Sh), at = dense(sys.aTh);
    Eigen::PartialPivLU<MatC> lu(dense(sys.Lh));
    const MatC M = s * lu.solve(at);
    HodgeProjections h;
    h.range_gamma_b_adj = MatC::Zero(NH, NH);
    h.range_gamma_b_adj.topLeftCorner(V, V).setIdentity();
    h.range_gamma = MatC::Zero(NH, NH);
    h.range_gamma.bottomRightCorner(B, B) = M;
    h.kernel = MatC::Zero(NH, NH);
    h.kernel.bottomRightCorner(B, B) = MatC::Identity(B, B) - M;
    const std::array<const MatC*, 3> p{&h.kernel, &h.range_gamma_b_adj, &h.range_gamma};
    auto residual_norm = [&](auto&& op) {
        return lanczos_norm(NH, op, [&](const VecC& y) { return VecC(op.adjoint(y)); });
    };
    struct Composite {
        const MatC *a, *b;
        bool subtract;
        VecC operator()(const VecC& x) const { return subtract ? VecC(*a * (*b * x) - *a * x) : VecC(*a * (*b * x)); }
        VecC adjoint(const VecC& y) const {
            const VecC ay = a->adjoint() * y;
            return subtract ? VecC(b->adjoint() * ay - ay) : VecC(b->adjoint() * ay);
        }
    };
    struct Sum {
        const std::array<const MatC*, 3>* p;
        VecC operator()(const VecC& x) const { return *(*p)[0] * x + *(*p)[1] * x + *(*p)[2] * x - x; }
        VecC adjoint(const VecC& y) const {
            return (*p)[0]->adjoint() * y + (*p)[1]->adjoint() * y + (*p)[2]->adjoint() * y - y;
        }
    };
    h.sum_residual = residual_norm(Sum{&p});
    for (size_t i = 0; i < 3; ++i)
        for (size_t j = 0; j < 3; ++j)
            h.product_residual = std::max(h.product_residual, residual_norm(Composite{p[i], p[j], i == j}));
    // Kernel of Pi_B from the blocks: (0, v) with aT v = 0; S is injective.
    // N(aT) is the orthogonal complement of R(aT*).
    const MatC row_space = range_basis(at.adjoint());
    Eigen::HouseholderQR<MatC> qr(row_space);
    const MatC q = qr.householderQ();
    const MatC kbasis = q.rightCols(B - row_space.cols());
    h.kernel_dim = kbasis.cols();
    if (kbasis.cols() > 0) {
        // Pi_B, Gamma and Gamma_B* see (0, v) only through aT v.
        const real r_pib = (at * kbasis).cwiseAbs().maxCoeff();
        // P_N fixes its range and the basis spans it.
        const real r_proj = (h.kernel.bottomRightCorner(B, B) * kbasis - kbasis).cwiseAbs().maxCoeff();
        h.kernel_residual = std::max(r_pib, r_proj);
    }
    const MatC range_s = range_basis(s);
    if (range_s.cols() + row_space.cols() + h.kernel_dim != NH) h.kernel_residual = std::max(h.kernel_residual, 1.0);
    // R(Gamma_B*) is the u0 block, orthogonal to the other two; only the angle
    // between R(Gamma) and N(Pi_B) inside the second block can degenerate.
    h.min_angle = min_principal_angle(range_s, kbasis);
    require(h.min_angle >= 1e-8, ErrorKind::numerical,
            "Hodge decomposition is ill-conditioned: minimal principal angle " + std::to_string(h.min_angle));
    return h;
}

// ---------------------------------------------------------------------------
// Resolvent families
// ---------------------------------------------------------------------------

enum class Family { R, P, Q, Theta };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::R: return "R";
        case Family::P: return "P";
        case Family::Q: return "Q";
        case Family::Theta: return "Theta";
    }
    return "?";
}

inline constexpr std::array<Family, 4> all_families{Family::R, Family::P, Family::Q, Family::Theta};

/// Matrix-free R_t, P_t, Q_t, Theta_t in orthonormal coordinates, with
/// X = (I + t^2 L)^{-1}:
///   P = diag(X, I - t^2 S X aT),  Q = t [0, X aT; S X, 0],
///   Theta = t [0, X aT; 0, 0],    R = P - i Q.
class ResolventOperators {
public:
    ResolventOperators(const FirstOrderSystem& sys, real t) : sys_(&sys), t_(t) {
        require(t != 0.0 && std::isfinite(t), ErrorKind::input, "resolvent parameter t must be nonzero");
        const index_t V = sys.V;
        const MatC L = dense(sys.Lh);
        const MatC A = MatC::Identity(V, V) + t * t * L;
        lu_.compute(A);
        lu_adj_.compute(A.adjoint());
        const real growth = lu_.rcond();
        require(growth > 1e-14, ErrorKind::numerical,
                "I + t^2 Pi_B^2 is numerically singular (measured omega = " + std::to_string(sys.omega) + ")");
    }

    real t() const { return t_; }
    const FirstOrderSystem& system() const { return *sys_; }

    VecC apply(Family f, const VecC& u) const {
        const index_t V = sys_->V, B = sys_->block2();
        const VecC u0 = u.head(V), v = u.tail(B);
        VecC out(sys_->size());
        switch (f) {
            case Family::P: return apply_p(u0, v);
            case Family::Q: {
                out.head(V) = t_ * lu_.solve(VecC(sys_->aTh * v));
                out.tail(B) = t_ * kato::apply(sys_->Sh, VecC(lu_.solve(u0)));
                return out;
            }
            case Family::Theta: {
                out.head(V) = t_ * lu_.solve(VecC(sys_->aTh * v));
                out.tail(B).setZero();
                return out;
            }
            case Family::R: {
                const VecC xu0 = lu_.solve(u0);
                const VecC xatv = lu_.solve(VecC(sys_->aTh * v));
                out.head(V) = xu0 - cplx(0, t_) * xatv;
                out.tail(B) = v - t_ * t_ * kato::apply(sys_->Sh, xatv) - cplx(0, t_) * kato::apply(sys_->Sh, xu0);
                return out;
            }
        }
        return out;
    }

    VecC apply_adjoint(Family f, const VecC& y) const {
        const index_t V = sys_->V, B = sys_->block2();
        const VecC y0 = y.head(V), w = y.tail(B);
        VecC out(sys_->size());
        const SpC& at = sys_->aTh;
        switch (f) {
            case Family::P: {
                out.head(V) = lu_adj_.solve(y0);
                const VecC sw = kato::apply(SpR(sys_->Sh.transpose()), w);
                out.tail(B) = w - t_ * t_ * (at.adjoint() * VecC(lu_adj_.solve(sw)));
                return out;
            }
            case Family::Q: {
                out.head(V) = t_ * lu_adj_.solve(kato::apply(SpR(sys_->Sh.transpose()), w));
                out.tail(B) = t_ * (at.adjoint() * VecC(lu_adj_.solve(y0)));
                return out;
            }
            case Family::Theta: {
                out.head(V).setZero();
                out.tail(B) = t_ * (at.adjoint() * VecC(lu_adj_.solve(y0)));
                return out;
            }
            case Family::R: return VecC(apply_adjoint(Family::P, y) + cplx(0, 1) * apply_adjoint(Family::Q, y));
        }
        return out;
    }

    /// Dense matrix of a family member.
    MatC dense_matrix(Family f) const {
        const index_t V = sys_->V, B = sys_->block2(), NH = sys_->size();
        const MatC s = dense(sys_->Sh);
        const MatC xat = lu_.solve(dense(sys_->aTh));
        const MatC x = lu_.solve(MatC::Identity(V, V));
        MatC out = MatC::Zero(NH, NH);
        auto fill_p = [&](MatC& m, cplx scale) {
            m.topLeftCorner(V, V) += scale * x;
            m.bottomRightCorner(B, B) += scale * (MatC::Identity(B, B) - t_ * t_ * s * xat);
        };
        auto fill_q = [&](MatC& m, cplx scale, bool lower) {
            m.topRightCorner(V, B) += scale * t_ * xat;
            if (lower) m.bottomLeftCorner(B, V) += scale * t_ * (s * x);
        };
        switch (f) {
            case Family::P: fill_p(out, 1.0); break;
            case Family::Q: fill_q(out, 1.0, true); break;
            case Family::Theta: fill_q(out, 1.0, false); break;
            case Family::R:
                fill_p(out, 1.0);
                fill_q(out, cplx(0, -1), true);
                break;
        }
        return out;
    }

    real norm(Family f) const {
        if (sys_->size() <= 400) return spectral_norm(dense_matrix(f));
        return lanczos_norm(sys_->size(), [&](const VecC& x) { return apply(f, x); },
                            [&](const VecC& y) { return apply_adjoint(f, y); });
    }

private:
    VecC apply_p(const VecC& u0, const VecC& v) const {
        VecC out(sys_->size());
        out.head(sys_->V) = lu_.solve(u0);
        out.tail(sys_->block2()) = v - t_ * t_ * kato::apply(sys_->Sh, VecC(lu_.solve(VecC(sys_->aTh * v))));
        return out;
    }

    const FirstOrderSystem* sys_;
    real t_;
    Eigen::PartialPivLU<MatC> lu_, lu_adj_;
};

struct ResolventFamily {
    real t = 0;
    MatC R, P, Q, Theta;
    const MatC& get(Family f) const {
        switch (f) {
            case Family::R: return R;
            case Family::P: return P;
            case Family::Q: return Q;
            case Family::Theta: return Theta;
        }
        return R;
    }
};

inline ResolventFamily resolvent_family(const FirstOrderSystem& sys, real t) {
    const ResolventOperators ops(sys, t);
    return {t, ops.dense_matrix(Family::R), ops.dense_matrix(Family::P), ops.dense_matrix(Family::Q),
            ops.dense_matrix(Family::Theta)};
}

/// (I + i t Pi_B)^{-1} by a dense solve on the full space, independent of the block formulas.
inline MatC resolvent_direct(const FirstOrderSystem& sys, real t) {
    const index_t NH = sys.size();
    const MatC a = MatC::Identity(NH, NH) + cplx(0, t) * sys.pi_b_hat();
    return Eigen::PartialPivLU<MatC>(a).solve(MatC::Identity(NH, NH));
}

// ---------------------------------------------------------------------------
// Off-diagonal decay
// ---------------------------------------------------------------------------

struct DecayFit {
    Family family = Family::R;
    real slope = 0, intercept = 0, r2 = 0;
    std::size_t points = 0;
    real c_theta() const { return -slope; }
    bool pass() const { return points >= 2 && slope < 0.0; }
};

struct DecaySample {
    Family family;
    real t;
    real rho;
    real norm;
    real full_norm;
};

struct OffDiagonalScan {
    std::array<DecayFit, 4> fits;
    std::vector<DecaySample> samples;
    std::size_t pairs = 0;
    real diagonal_max_ratio = 0;  ///< max ||1_E U 1_E|| / ||U||, never in the regression
    real noise_floor = 1e-10;     ///< samples below floor * ||U_t|| are excluded
    std::vector<std::string> notes;
    const DecayFit& fit(Family f) const { return fits[static_cast<size_t>(f)]; }
};

inline real masked_norm(const MatC& u, const std::vector<index_t>& rows, const std::vector<index_t>& cols) {
    MatC sub(static_cast<index_t>(rows.size()), static_cast<index_t>(cols.size()));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < cols.size(); ++j) sub(static_cast<index_t>(i), static_cast<index_t>(j)) = u(rows[i], cols[j]);
    return spectral_norm(sub);
}

inline void linear_fit(const std::vector<real>& x, const std::vector<real>& y, DecayFit& fit) {
    const size_t n = x.size();
    fit.points = n;
    if (n < 2) return;
    real mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
    mx /= real(n);
    my /= real(n);
    real sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0) return;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
}

/// Random disjoint unions of one or two cubes of a common level; for each t and
/// family, log ||1_E U_t 1_F|| is regressed on rho(E, F) / t.
inline OffDiagonalScan off_diagonal_scan(const FirstOrderSystem& sys, const PointCloudSpace& space,
                                         const DyadicStructure& ds, const std::vector<real>& t_list,
                                         std::size_t pair_count, std::uint64_t seed) {
    require(space.size() == sys.V, ErrorKind::dimension, "space must be built from the mesh vertices");
    for (real t : t_list) require(t > 0.0 && t <= 1.0, ErrorKind::input, "off-diagonal scales must lie in (0,1]");
    OffDiagonalScan scan;
    std::mt19937_64 rng(seed);
    std::vector<int> levels;
    for (int k = 1; k <= ds.depth; ++k)
        if (ds.num_cubes(k) >= 4) levels.push_back(k);
    require(!levels.empty(), ErrorKind::input, "no level has enough cubes to form disjoint pairs");
    struct Pair {
        std::vector<index_t> rows, cols;
        real rho;
    };
    std::vector<Pair> pairs;
    std::vector<char> inE(static_cast<size_t>(sys.V)), inF(static_cast<size_t>(sys.V));
    const std::size_t budget = 50 * std::max<std::size_t>(pair_count, 1);
    std::size_t attempts = 0;
    while (pairs.size() < pair_count && attempts++ < budget) {
        const int k = levels[std::uniform_int_distribution<size_t>(0, levels.size() - 1)(rng)];
        std::uniform_int_distribution<index_t> pick(0, ds.num_cubes(k) - 1);
        std::vector<index_t> e_pts, f_pts, e_cubes, f_cubes;
        const int ne = 1 + static_cast<int>(rng() % 2), nf = 1 + static_cast<int>(rng() % 2);
        for (int i = 0; i < ne; ++i) e_cubes.push_back(pick(rng));
        for (int i = 0; i < nf; ++i) f_cubes.push_back(pick(rng));
        bool overlap = false;
        for (index_t a : e_cubes)
            for (index_t b : f_cubes) overlap = overlap || a == b;
        if (overlap) continue;
        std::fill(inE.begin(), inE.end(), 0);
        std::fill(inF.begin(), inF.end(), 0);
        for (index_t c : e_cubes)
            for (index_t x : ds.cube(k, c).members) inE[static_cast<size_t>(x)] = 1, e_pts.push_back(x);
        for (index_t c : f_cubes)
            for (index_t x : ds.cube(k, c).members) inF[static_cast<size_t>(x)] = 1, f_pts.push_back(x);
        const real rho = space.set_distance(e_pts, f_pts);
        if (rho <= 0.0) continue;
        pairs.push_back({sys.located_in(inE), sys.located_in(inF), rho});
    }
    if (pairs.size() < pair_count)
        scan.notes.push_back("only " + std::to_string(pairs.size()) + " separated pairs found after resampling");
    scan.pairs = pairs.size();
    std::array<std::vector<real>, 4> xs, ys;
    for (real t : t_list) {
        const ResolventFamily fam = resolvent_family(sys, t);
        for (Family f : all_families) {
            const MatC& u = fam.get(f);
            const real full = spectral_norm(u);
            for (const Pair& p : pairs) {
                const real nrm = masked_norm(u, p.rows, p.cols);
                scan.samples.push_back({f, t, p.rho, nrm, full});
                if (full > 0 && nrm > scan.noise_floor * full) {
                    xs[static_cast<size_t>(f)].push_back(p.rho / t);
                    ys[static_cast<size_t>(f)].push_back(std::log(nrm));
                }
            }
            if (!pairs.empty() && full > 0) {
                const real d = masked_norm(u, pairs.front().rows, pairs.front().rows);
                scan.diagonal_max_ratio = std::max(scan.diagonal_max_ratio, d / full);
            }
        }
    }
    for (Family f : all_families) {
        DecayFit& fit = scan.fits[static_cast<size_t>(f)];
        fit.family = f;
        linear_fit(xs[static_cast<size_t>(f)], ys[static_cast<size_t>(f)], fit);
    }
    return scan;
}

}  // namespace kato
