#pragma once

// Discrete calculus on embedded meshes: per-cell gradients, the weighted
// adjoint divergence, the Laplacian, second fundamental form by local
// quadratic fitting, Sobolev norms and the local Poincare check.

#include "kato/core.hpp"
#include "kato/mesh.hpp"
#include "kato/metric_space.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace kato {

/// Sparse linear map between weighted L^2 spaces. Adjoints are always taken
/// with respect to the stored weights.
struct DiscreteOperator {
    SpR matrix;
    std::string domain_space;
    std::string codomain_space;
    VecR domain_weights;
    VecR codomain_weights;

    index_t rows() const { return matrix.rows(); }
    index_t cols() const { return matrix.cols(); }

    VecR apply(const VecR& u) const { return matrix * u; }
    VecC apply(const VecC& u) const {
        VecR re = matrix * u.real();
        VecR im = matrix * u.imag();
        return re.cast<cplx>() + cplx(0, 1) * im.cast<cplx>();
    }

    /// T* = W_dom^{-1} T^T W_cod.
    DiscreteOperator adjoint() const {
        SpR t = SpR(matrix.transpose());
        SpR out = domain_weights.cwiseInverse().asDiagonal() * t * codomain_weights.asDiagonal();
        return {out, codomain_space, domain_space, codomain_weights, domain_weights};
    }

    void write_csv(std::ostream& out) const {
        out << "row,col,re,im\n";
        out.precision(17);
        for (int k = 0; k < matrix.outerSize(); ++k)
            for (SpR::InnerIterator it(matrix, k); it; ++it) out << it.row() << ',' << it.col() << ',' << it.value() << ",0\n";
    }
};

inline VecC apply(const SpR& m, const VecC& u) {
    VecR re = m * u.real();
    VecR im = m * u.imag();
    return re.cast<cplx>() + cplx(0, 1) * im.cast<cplx>();
}

/// Cell measure repeated `k` times, matching the layout (cell, component).
inline VecR repeated_cell_weights(const EmbeddedMesh& mesh, int k) {
    VecR w(mesh.num_cells() * k);
    for (index_t c = 0; c < mesh.num_cells(); ++c) w.segment(c * k, k).setConstant(mesh.cell_measure()[c]);
    return w;
}

/// Gradient into the orthonormal cell frames: (m * cells) x vertices.
inline DiscreteOperator gradient_operator(const EmbeddedMesh& mesh) {
    const int m = mesh.intrinsic_dim();
    std::vector<TripletR> trip;
    trip.reserve(static_cast<size_t>(mesh.num_cells() * m * (m + 1)));
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        const MatR& g = mesh.cell_gradients()[static_cast<size_t>(c)];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j <= m; ++j) trip.emplace_back(c * m + i, mesh.cells()(c, j), g(i, j));
    }
    SpR mat(mesh.num_cells() * m, mesh.num_vertices());
    mat.setFromTriplets(trip.begin(), trip.end());
    return {mat, "scalar-fields", "tangent-fields", mesh.vertex_measure(), repeated_cell_weights(mesh, m)};
}

/// iota_* grad: the gradient pushed to ambient components, (n * cells) x vertices.
inline DiscreteOperator ambient_gradient_operator(const EmbeddedMesh& mesh) {
    const int m = mesh.intrinsic_dim(), n = mesh.ambient_dim();
    std::vector<TripletR> trip;
    trip.reserve(static_cast<size_t>(mesh.num_cells() * n * (m + 1)));
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        const MatR amb = mesh.tangent_frames()[static_cast<size_t>(c)] * mesh.cell_gradients()[static_cast<size_t>(c)];
        for (int a = 0; a < n; ++a)
            for (int j = 0; j <= m; ++j) trip.emplace_back(c * n + a, mesh.cells()(c, j), amb(a, j));
    }
    SpR mat(mesh.num_cells() * n, mesh.num_vertices());
    mat.setFromTriplets(trip.begin(), trip.end());
    return {mat, "scalar-fields", "ambient-fields", mesh.vertex_measure(), repeated_cell_weights(mesh, n)};
}

/// div := -grad*, acting on tangent fields in cell frames.
inline DiscreteOperator divergence_operator(const EmbeddedMesh& mesh) {
    DiscreteOperator d = gradient_operator(mesh).adjoint();
    d.matrix = -d.matrix;
    return d;
}

/// Delta = -div grad = M_v^{-1} G^T M_c G, positive semidefinite.
inline DiscreteOperator laplacian(const EmbeddedMesh& mesh) {
    const DiscreteOperator g = gradient_operator(mesh);
    const DiscreteOperator d = divergence_operator(mesh);
    SpR mat = -(d.matrix * g.matrix);
    return {mat, "scalar-fields", "scalar-fields", mesh.vertex_measure(), mesh.vertex_measure()};
}

/// Eigenpairs of Delta in the vertex-measure inner product, ascending.
/// Eigenvectors are orthonormal with respect to the vertex measure.
struct LaplacianSpectrum {
    VecR values;
    MatR vectors;
};

inline LaplacianSpectrum laplacian_spectrum(const EmbeddedMesh& mesh) {
    const DiscreteOperator g = gradient_operator(mesh);
    const VecR sv = mesh.vertex_measure().cwiseSqrt();
    const VecR sc = g.codomain_weights.cwiseSqrt();
    MatR gh = sc.asDiagonal() * MatR(g.matrix) * sv.cwiseInverse().asDiagonal();
    MatR sym = gh.transpose() * gh;
    Eigen::SelfAdjointEigenSolver<MatR> es(sym);
    require(es.info() == Eigen::Success, ErrorKind::numerical, "Laplacian eigensolver failed");
    return {es.eigenvalues(), sv.cwiseInverse().asDiagonal() * es.eigenvectors()};
}

/// Smallest eigenvalue above `floor_rel * largest`.
inline real first_nonzero_eigenvalue(const LaplacianSpectrum& s, real floor_rel = 1e-10) {
    const real top = std::max(s.values.maxCoeff(), 1e-300);
    for (index_t i = 0; i < s.values.size(); ++i)
        if (s.values[i] > floor_rel * top) return s.values[i];
    return 0.0;
}

// ---------------------------------------------------------------------------
// Second fundamental form
// ---------------------------------------------------------------------------

struct GeometryTensors {
    /// h[v][i*m + j] is the normal vector h_ij at vertex v (orthonormal fit coordinates).
    std::vector<std::vector<VecR>> h;
    VecR h_norm;
    real h_sup = 0.0;
    std::vector<VecR> mean_curvature;
    VecR mean_curvature_norm;
    real H_sup = 0.0;
    /// Max over vertices of |tangential part of h_ij| / |h_ij|.
    real normality_residual = 0.0;
    std::vector<bool> flagged;
};

inline GeometryTensors second_fundamental_form(const EmbeddedMesh& mesh) {
    const int m = mesh.intrinsic_dim(), n = mesh.ambient_dim();
    const index_t nv = mesh.num_vertices();
    const int nquad = m * (m + 1) / 2;
    GeometryTensors out;
    out.h.assign(static_cast<size_t>(nv), {});
    out.h_norm = VecR::Zero(nv);
    out.mean_curvature.assign(static_cast<size_t>(nv), VecR::Zero(n));
    out.mean_curvature_norm = VecR::Zero(nv);
    out.flagged.assign(static_cast<size_t>(nv), false);

    for (index_t v = 0; v < nv; ++v) {
        const auto& ring = mesh.vertex_neighbors()[static_cast<size_t>(v)];
        if (mesh.boundary_vertices()[static_cast<size_t>(v)] || static_cast<int>(ring.size()) < m + nquad) {
            out.flagged[static_cast<size_t>(v)] = true;
            out.h[static_cast<size_t>(v)].assign(static_cast<size_t>(m * m), VecR::Zero(n));
            continue;
        }
        // Vertex tangent plane: dominant eigenvectors of the area-weighted frame projectors.
        MatR proj = MatR::Zero(n, n);
        for (index_t c : mesh.vertex_cells()[static_cast<size_t>(v)]) {
            const MatR& f = mesh.tangent_frames()[static_cast<size_t>(c)];
            proj += mesh.cell_measure()[c] * f * f.transpose();
        }
        Eigen::SelfAdjointEigenSolver<MatR> es(proj);
        const MatR tangent = es.eigenvectors().rightCols(m);

        // Least-squares fit of p - p_v = L xi + 1/2 sum Q_ij xi_i xi_j.
        const index_t k = static_cast<index_t>(ring.size());
        MatR design(k, m + nquad);
        MatR rhs(k, n);
        const VecR pv = mesh.vertex(v);
        for (index_t r = 0; r < k; ++r) {
            const VecR d = mesh.vertex(ring[static_cast<size_t>(r)]) - pv;
            const VecR xi = tangent.transpose() * d;
            int col = 0;
            for (int i = 0; i < m; ++i) design(r, col++) = xi[i];
            for (int i = 0; i < m; ++i)
                for (int j = i; j < m; ++j) design(r, col++) = (i == j ? 0.5 : 1.0) * xi[i] * xi[j];
            rhs.row(r) = d.transpose();
        }
        Eigen::ColPivHouseholderQR<MatR> qr(design);
        if (qr.rank() < m + nquad) {
            out.flagged[static_cast<size_t>(v)] = true;
            out.h[static_cast<size_t>(v)].assign(static_cast<size_t>(m * m), VecR::Zero(n));
            continue;
        }
        const MatR coef = qr.solve(rhs);
        const MatR lin = coef.topRows(m).transpose();  // n x m, columns d iota / d xi_i
        std::vector<VecR> hess(static_cast<size_t>(m * m));
        {
            int row = m;
            for (int i = 0; i < m; ++i)
                for (int j = i; j < m; ++j) {
                    hess[static_cast<size_t>(i * m + j)] = coef.row(row).transpose();
                    hess[static_cast<size_t>(j * m + i)] = coef.row(row).transpose();
                    ++row;
                }
        }
        const MatR g = lin.transpose() * lin;
        const MatR ginv = g.inverse();
        Eigen::HouseholderQR<MatR> tq(lin);
        const MatR tb = tq.householderQ() * MatR::Identity(n, m);
        const MatR normal_proj = MatR::Identity(n, n) - tb * tb.transpose();
        auto& hv = out.h[static_cast<size_t>(v)];
        hv.resize(static_cast<size_t>(m * m));
        for (int ij = 0; ij < m * m; ++ij) {
            hv[static_cast<size_t>(ij)] = normal_proj * hess[static_cast<size_t>(ij)];
            const real full = hess[static_cast<size_t>(ij)].norm();
            const real tang = (tb.transpose() * hv[static_cast<size_t>(ij)]).norm();
            if (full > 0) out.normality_residual = std::max(out.normality_residual, tang / full);
        }
        real norm2 = 0.0;
        VecR H = VecR::Zero(n);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                H += ginv(i, j) * hv[static_cast<size_t>(i * m + j)];
                for (int a = 0; a < m; ++a)
                    for (int b = 0; b < m; ++b)
                        norm2 += ginv(i, a) * ginv(j, b) *
                                 hv[static_cast<size_t>(i * m + j)].dot(hv[static_cast<size_t>(a * m + b)]);
            }
        out.h_norm[v] = std::sqrt(std::max(norm2, 0.0));
        out.mean_curvature[static_cast<size_t>(v)] = H;
        out.mean_curvature_norm[v] = H.norm();
        out.h_sup = std::max(out.h_sup, out.h_norm[v]);
        out.H_sup = std::max(out.H_sup, out.mean_curvature_norm[v]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Norms and integrals
// ---------------------------------------------------------------------------

inline real weighted_norm(const VecC& u, const VecR& w) {
    return std::sqrt((w.array() * u.array().abs2()).sum());
}

inline real sobolev_norm(const EmbeddedMesh& mesh, const VecC& u) {
    require(u.size() == mesh.num_vertices(), ErrorKind::dimension, "field size must equal vertex count");
    const DiscreteOperator g = gradient_operator(mesh);
    const VecC gu = g.apply(u);
    const real a = weighted_norm(u, mesh.vertex_measure());
    const real b = weighted_norm(gu, g.codomain_weights);
    return std::sqrt(a * a + b * b);
}

/// The ambient vector  sum_c mu_c iota_* grad u  (integral of the pushed gradient).
inline VecC integral_pushed_gradient(const EmbeddedMesh& mesh, const VecC& u) {
    const int n = mesh.ambient_dim();
    const VecC gu = ambient_gradient_operator(mesh).apply(u);
    VecC total = VecC::Zero(n);
    for (index_t c = 0; c < mesh.num_cells(); ++c) total += mesh.cell_measure()[c] * gu.segment(c * n, n);
    return total;
}

// ---------------------------------------------------------------------------
// Local Poincare inequality
// ---------------------------------------------------------------------------

struct PoincareReport {
    real max_constant = 0.0;
    index_t worst_center = -1;
    real worst_radius = 0.0;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;
};

/// Empirical c in ||1_B (u - u_B)||^2 <= c r^2 (||1_B u||^2 + ||1_B grad u||^2) for one ball.
/// The gradient term uses cells whose vertices all lie in B. Returns a negative
/// value when the ball holds fewer than two interior vertices.
inline real local_poincare_constant(const EmbeddedMesh& mesh, const PointCloudSpace& space, const VecC& u,
                                    const VecC& grad_u, index_t center, real r) {
    const index_t nv = mesh.num_vertices();
    const int m = mesh.intrinsic_dim();
    std::vector<char> inside(static_cast<size_t>(nv), 0);
    index_t count = 0;
    real mass = 0.0;
    cplx mean = 0.0;
    for (index_t v = 0; v < nv; ++v) {
        if (space.distance(center, v) < r && !mesh.boundary_vertices()[static_cast<size_t>(v)]) {
            inside[static_cast<size_t>(v)] = 1;
            ++count;
            mass += mesh.vertex_measure()[v];
            mean += mesh.vertex_measure()[v] * u[v];
        }
    }
    if (count < 2) return -1.0;
    mean /= mass;
    real lhs = 0.0, l2 = 0.0, grad2 = 0.0;
    for (index_t v = 0; v < nv; ++v) {
        if (!inside[static_cast<size_t>(v)]) continue;
        lhs += mesh.vertex_measure()[v] * std::norm(u[v] - mean);
        l2 += mesh.vertex_measure()[v] * std::norm(u[v]);
    }
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        bool all_in = true;
        for (int i = 0; i <= m; ++i) all_in = all_in && inside[static_cast<size_t>(mesh.cells()(c, i))];
        if (all_in) grad2 += mesh.cell_measure()[c] * grad_u.segment(c * m, m).squaredNorm();
    }
    const real rhs = r * r * (l2 + grad2);
    if (lhs == 0.0) return 0.0;
    return rhs > 0.0 ? lhs / rhs : std::numeric_limits<real>::infinity();
}

/// Random balls with radius in [1.01 * resolution, 1] and random combinations of
/// the lowest nonconstant Laplacian eigenvectors.
inline PoincareReport check_local_poincare(const EmbeddedMesh& mesh, const PointCloudSpace& space,
                                           std::size_t trial_count, std::uint64_t seed) {
    require(space.size() == mesh.num_vertices(), ErrorKind::dimension, "space must be built from the mesh vertices");
    PoincareReport rep;
    const LaplacianSpectrum spec = laplacian_spectrum(mesh);
    const index_t nv = mesh.num_vertices();
    const index_t modes = std::min<index_t>(8, nv - 1);
    const DiscreteOperator g = gradient_operator(mesh);
    std::vector<index_t> centers;
    for (index_t v = 0; v < nv; ++v)
        if (!mesh.boundary_vertices()[static_cast<size_t>(v)]) centers.push_back(v);
    if (centers.empty() || modes < 1) return rep;
    std::mt19937_64 rng(seed);
    std::normal_distribution<real> gauss;
    std::uniform_int_distribution<size_t> pick(0, centers.size() - 1);
    std::uniform_real_distribution<real> unit(0.0, 1.0);
    const real r_min = std::min(1.01 * space.resolution(), 1.0);
    for (std::size_t trial = 0; trial < trial_count; ++trial) {
        VecC u = VecC::Zero(nv);
        for (index_t k = 1; k <= modes; ++k) u += cplx(gauss(rng), gauss(rng)) * spec.vectors.col(k).cast<cplx>();
        const VecC gu = g.apply(u);
        const index_t x = centers[pick(rng)];
        const real r = r_min * std::pow(1.0 / r_min, unit(rng));
        const real c = local_poincare_constant(mesh, space, u, gu, x, r);
        if (c < 0) {
            ++rep.skipped;
            continue;
        }
        ++rep.evaluated;
        if (c > rep.max_constant) {
            rep.max_constant = c;
            rep.worst_center = x;
            rep.worst_radius = r;
        }
    }
    return rep;
}

}  // namespace kato
