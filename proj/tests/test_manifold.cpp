#include <catch2/catch_amalgamated.hpp>

#include "kato/manifold.hpp"
#include "support.hpp"

#include <sstream>

using namespace kato;
using Catch::Approx;

namespace {

VecC circle_samples(const EmbeddedMesh& mesh, real (*f)(real)) {
    VecC u(mesh.num_vertices());
    for (index_t v = 0; v < mesh.num_vertices(); ++v) u[v] = f(std::atan2(mesh.points()(v, 1), mesh.points()(v, 0)));
    return u;
}

real sin_fn(real t) { return std::sin(t); }

}  // namespace

TEST_CASE("shape factory totals", "[manifold]") {
    CHECK(generate_mesh(shape::Circle{1.0, 4}).total_measure() == Approx(4.0 * std::sqrt(2.0)));
    const auto patch = generate_mesh(shape::FlatPatch{1.0, 1.0, 2, 2});
    CHECK(patch.num_cells() == 2);
    CHECK(patch.total_measure() == Approx(1.0));
    const auto sphere = generate_mesh(shape::Sphere{1.0, 2});
    CHECK(sphere.total_measure() == Approx(4.0 * pi).epsilon(0.05));
    CHECK(sphere.vertex_measure().sum() == Approx(sphere.total_measure()).epsilon(1e-13));
    CHECK(sphere.is_edge_connected());
    CHECK_FALSE(sphere.has_boundary());
    const auto helix = generate_mesh(shape::Helix{1.0, 0.5, 2.0, 50});
    CHECK(helix.has_boundary());
    CHECK_THROWS_AS(generate_mesh(shape::Circle{-1.0, 10}), Error);
    CHECK_THROWS_AS(generate_mesh(shape::Torus{1.0, 0.0, 8, 8}), Error);
}

TEST_CASE("cell geometry invariants", "[manifold]") {
    const auto mesh = generate_mesh(shape::Torus{2.0, 0.7, 12, 9});
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        const MatR& f = mesh.tangent_frames()[static_cast<size_t>(c)];
        CHECK((f.transpose() * f - MatR::Identity(2, 2)).norm() <= 1e-12);
        Eigen::SelfAdjointEigenSolver<MatR> es(mesh.cell_metric()[static_cast<size_t>(c)]);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
    // Every cell is owned by one of its vertices.
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        const index_t o = mesh.cell_owner()[static_cast<size_t>(c)];
        CHECK((o == mesh.cells()(c, 0) || o == mesh.cells()(c, 1) || o == mesh.cells()(c, 2)));
    }
}

TEST_CASE("degenerate cells are rejected by index", "[manifold]") {
    MatR p(3, 3);
    p << 0, 0, 0, 1, 0, 0, 2, 0, 0;
    CellIndex c(1, 3);
    c << 0, 1, 2;
    try {
        EmbeddedMesh m(p, c);
        FAIL("expected degenerate error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate);
        CHECK(std::string(e.what()).find("cell 0") != std::string::npos);
    }
}

TEST_CASE("OFF input and output", "[manifold]") {
    SECTION("minimal triangle") {
        std::istringstream in("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n");
        const auto m = load_off(in);
        CHECK(m.num_cells() == 1);
        CHECK(m.total_measure() == Approx(0.5));
    }
    SECTION("index out of range names the line") {
        std::istringstream in("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n");
        try {
            load_off(in);
            FAIL("expected parse error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::parse);
            CHECK(std::string(e.what()).find("line 6") != std::string::npos);
        }
    }
    SECTION("bad header") {
        std::istringstream in("PLY\n");
        CHECK_THROWS_AS(load_off(in), Error);
    }
    SECTION("coordinate count mismatch") {
        std::istringstream in("OFF\n3 1 0\n0 0\n1 0\n0 1\n3 0 1 2\n");
        try {
            load_off(in, 3);
            FAIL("expected dimension error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::dimension);
        }
    }
    SECTION("ambient dimension from the caller") {
        std::istringstream in("OFF\n2 1 0\n0 0 0 0\n1 1 1 1\n2 0 1\n");
        const auto m = load_off(in, 4);
        CHECK(m.ambient_dim() == 4);
        CHECK(m.total_measure() == Approx(2.0));
    }
    SECTION("round trip") {
        const auto a = generate_mesh(shape::Sphere{1.0, 2});
        std::stringstream buf;
        save_off(a, buf);
        const auto b = load_off(buf);
        CHECK(a.cells() == b.cells());
        CHECK((a.points() - b.points()).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("gradient operator", "[manifold]") {
    SECTION("constants have zero gradient") {
        const auto mesh = generate_mesh(shape::Sphere{1.0, 1});
        const auto g = gradient_operator(mesh);
        CHECK(g.apply(VecR(VecR::Ones(mesh.num_vertices()))).cwiseAbs().maxCoeff() <= 1e-12);
    }
    SECTION("linear functions on a flat patch") {
        const auto mesh = generate_mesh(shape::FlatPatch{2.0, 1.0, 7, 5});
        const VecR x = mesh.points().col(0);
        const VecR gx = gradient_operator(mesh).apply(x);
        const VecR ax = ambient_gradient_operator(mesh).apply(x);
        for (index_t c = 0; c < mesh.num_cells(); ++c) {
            CHECK(gx.segment(c * 2, 2).norm() == Approx(1.0).epsilon(1e-12));
            CHECK((ax.segment(c * 3, 3) - Eigen::Vector3d(1, 0, 0)).norm() <= 1e-12);
        }
        // The first triangle of each quad starts with an x-aligned edge.
        CHECK((gx.segment(0, 2) - Eigen::Vector2d(1, 0)).norm() <= 1e-12);
    }
    SECTION("Dirichlet energy of sin on the circle") {
        const auto mesh = generate_mesh(shape::Circle{1.0, 256});
        const auto g = gradient_operator(mesh);
        const VecC gu = g.apply(circle_samples(mesh, sin_fn));
        CHECK(weighted_norm(gu, g.codomain_weights) * weighted_norm(gu, g.codomain_weights) == Approx(pi).epsilon(0.01));
    }
    SECTION("push-forward preserves lengths") {
        const auto mesh = generate_mesh(shape::Torus{2.0, 0.5, 10, 8});
        std::mt19937_64 rng(1);
        const VecC u = testing::random_field(mesh.num_vertices(), rng);
        const VecC g = gradient_operator(mesh).apply(u);
        const VecC a = ambient_gradient_operator(mesh).apply(u);
        for (index_t c = 0; c < mesh.num_cells(); ++c)
            CHECK(std::abs(g.segment(c * 2, 2).norm() - a.segment(c * 3, 3).norm()) <= 1e-12 * (1 + g.segment(c * 2, 2).norm()));
    }
}

TEST_CASE("divergence is minus the weighted adjoint of the gradient", "[manifold]") {
    const auto mesh = generate_mesh(shape::Sphere{1.3, 2});
    const auto g = gradient_operator(mesh);
    const auto d = divergence_operator(mesh);
    std::mt19937_64 rng(3);
    real worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const VecC u = testing::random_field(mesh.num_vertices(), rng);
        const VecC X = testing::random_field(g.rows(), rng);
        const cplx lhs = (g.codomain_weights.cast<cplx>().asDiagonal() * X).dot(g.apply(u));
        const cplx rhs = -(mesh.vertex_measure().cast<cplx>().asDiagonal() * d.apply(X)).dot(u);
        const real scale = weighted_norm(g.apply(u), g.codomain_weights) * weighted_norm(X, g.codomain_weights);
        worst = std::max(worst, std::abs(lhs - rhs) / scale);
    }
    CHECK(worst <= 1e-12);
    CHECK(d.apply(VecC(VecC::Zero(g.rows()))).norm() == 0.0);
}

TEST_CASE("constant field on a flat torus is divergence free", "[manifold]") {
    const index_t n = 12, m = 9;
    const real w = 3.0, h = 2.0;
    const auto mesh = generate_mesh(shape::FlatTorus{w, h, n, m});
    VecR X(mesh.num_cells() * 2);
    real unit_norm = -1.0;
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        // Unwrapped first grid coordinate of the cell's vertices.
        Eigen::Vector3d uc;
        const index_t i0 = mesh.cells()(c, 0) / m;
        for (int k = 0; k < 3; ++k) {
            index_t i = mesh.cells()(c, k) / m;
            if (i - i0 > n / 2) i -= n;
            if (i0 - i > n / 2) i += n;
            uc[k] = w * static_cast<real>(i) / static_cast<real>(n);
        }
        X.segment(c * 2, 2) = mesh.cell_gradients()[static_cast<size_t>(c)] * uc;
        // Grid edges are chords, so the field is constant with norm (w/n) / chord.
        if (unit_norm < 0) unit_norm = X.segment(c * 2, 2).norm();
        CHECK(X.segment(c * 2, 2).norm() == Approx(unit_norm).epsilon(1e-12));
    }
    const VecR div = divergence_operator(mesh).apply(X);
    CHECK(div.cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("Laplacian structure and spectrum", "[manifold]") {
    SECTION("kernel, symmetry, positivity") {
        const auto mesh = generate_mesh(shape::Torus{2.0, 0.6, 10, 7});
        const auto L = laplacian(mesh);
        CHECK(L.apply(VecR(VecR::Ones(mesh.num_vertices()))).cwiseAbs().maxCoeff() <= 1e-10);
        std::mt19937_64 rng(5);
        const VecR& w = mesh.vertex_measure();
        real sym = 0.0, min_rq = 1.0;
        for (int k = 0; k < 20; ++k) {
            const VecR u = testing::random_real_field(mesh.num_vertices(), rng);
            const VecR v = testing::random_real_field(mesh.num_vertices(), rng);
            const real a = (w.asDiagonal() * L.apply(u)).dot(v), b = (w.asDiagonal() * u).dot(L.apply(v));
            const real nu = std::sqrt(u.dot(w.asDiagonal() * u)), nv = std::sqrt(v.dot(w.asDiagonal() * v));
            sym = std::max(sym, std::abs(a - b) / (nu * nv));
            min_rq = std::min(min_rq, (w.asDiagonal() * L.apply(u)).dot(u) / (nu * nu));
        }
        CHECK(sym <= 1e-12);
        CHECK(min_rq >= -1e-12);
        const auto spec = laplacian_spectrum(mesh);
        CHECK(std::abs(spec.values[0]) <= 1e-10);
        CHECK(spec.values[1] > 1e-6);
    }
    SECTION("circle spectrum") {
        const auto spec = laplacian_spectrum(generate_mesh(shape::Circle{1.0, 256}));
        CHECK(first_nonzero_eigenvalue(spec) == Approx(1.0).epsilon(0.005));
    }
    SECTION("sphere spectrum") {
        const auto spec = laplacian_spectrum(generate_mesh(shape::Sphere{1.0, 3}));
        CHECK(first_nonzero_eigenvalue(spec) == Approx(2.0).epsilon(0.03));
    }
}

TEST_CASE("second fundamental form", "[manifold]") {
    SECTION("flat patch") {
        const auto geo = second_fundamental_form(generate_mesh(shape::FlatPatch{1.0, 1.0, 8, 8}));
        CHECK(geo.h_sup <= 1e-8);
        CHECK(geo.flagged[0]);
        const auto tiny = second_fundamental_form(generate_mesh(shape::FlatPatch{1.0, 1.0, 2, 2}));
        CHECK(tiny.h_sup == 0.0);
    }
    SECTION("circle of radius 2") {
        const auto geo = second_fundamental_form(generate_mesh(shape::Circle{2.0, 512}));
        for (index_t v = 0; v < geo.h_norm.size(); ++v) CHECK(geo.h_norm[v] == Approx(0.5).epsilon(0.01));
        CHECK(geo.normality_residual <= 1e-6);
    }
    SECTION("unit sphere") {
        const auto geo = second_fundamental_form(generate_mesh(shape::Sphere{1.0, 3}));
        for (index_t v = 0; v < geo.h_norm.size(); ++v) {
            CHECK(geo.h_norm[v] * geo.h_norm[v] == Approx(2.0).epsilon(0.05));
            CHECK(geo.mean_curvature_norm[v] == Approx(2.0).epsilon(0.05));
        }
        CHECK(geo.normality_residual <= 1e-6);
    }
    SECTION("open helix flags its ends") {
        const auto geo = second_fundamental_form(generate_mesh(shape::Helix{1.0, 1.0, 2.0, 200}));
        CHECK(geo.flagged.front());
        CHECK(geo.flagged.back());
        // Helix curvature r / (r^2 + c^2) with c = pitch / 2pi.
        const real c = 1.0 / (2.0 * pi);
        CHECK(geo.h_norm[100] == Approx(1.0 / (1.0 + c * c)).epsilon(0.01));
    }
}

TEST_CASE("Sobolev norm", "[manifold]") {
    const auto mesh = generate_mesh(shape::Circle{1.0, 256});
    CHECK(sobolev_norm(mesh, VecC::Zero(256)) == 0.0);
    CHECK(sobolev_norm(mesh, VecC::Ones(256)) == Approx(std::sqrt(2.0 * pi)).epsilon(0.005));
    CHECK(sobolev_norm(mesh, circle_samples(mesh, sin_fn)) == Approx(std::sqrt(2.0 * pi)).epsilon(0.01));
    CHECK_THROWS_AS(sobolev_norm(mesh, VecC::Zero(3)), Error);
}

TEST_CASE("mean curvature bound on pushed gradients", "[manifold]") {
    SECTION("flat patch interior bump integrates to zero") {
        const auto mesh = generate_mesh(shape::FlatPatch{1.0, 1.0, 9, 9});
        VecC u = VecC::Zero(mesh.num_vertices());
        u[4 * 9 + 4] = 1.0;
        u[4 * 9 + 5] = 0.5;
        u[3 * 9 + 4] = cplx(0, 2);
        CHECK(integral_pushed_gradient(mesh, u).norm() <= 1e-10);
    }
    SECTION("sphere bumps obey the mean curvature bound") {
        const auto mesh = generate_mesh(shape::Sphere{1.0, 2});
        const auto geo = second_fundamental_form(mesh);
        const auto space = graph_geodesics(mesh);
        for (index_t centre : {index_t{0}, index_t{40}, index_t{100}}) {
            VecC u = VecC::Zero(mesh.num_vertices());
            real supp = 0.0;
            for (index_t v = 0; v < mesh.num_vertices(); ++v) {
                const real d = space.distance(centre, v);
                if (d < 0.6) {
                    u[v] = 0.6 - d;
                    supp += mesh.vertex_measure()[v];
                }
            }
            const real lhs = integral_pushed_gradient(mesh, u).norm();
            CHECK(lhs <= geo.H_sup * std::sqrt(supp) * weighted_norm(u, mesh.vertex_measure()));
        }
    }
}

TEST_CASE("local Poincare inequality", "[manifold]") {
    auto half_circle = [](index_t n) {
        const auto mesh = generate_mesh(shape::Circle{1.0, n});
        const auto space = graph_geodesics(mesh);
        const VecC u = circle_samples(mesh, sin_fn);
        const VecC gu = gradient_operator(mesh).apply(u);
        return local_poincare_constant(mesh, space, u, gu, 0, pi / 2.0);
    };
    const real c256 = half_circle(256), c512 = half_circle(512);
    // Continuum value: (pi/2) / ((pi/2)^2 * pi) = 2 / pi^2.
    CHECK(c256 == Approx(2.0 / (pi * pi)).epsilon(0.05));
    CHECK(std::abs(c512 - c256) <= 0.1 * c256);

    const auto mesh = generate_mesh(shape::Circle{1.0, 128});
    const auto space = graph_geodesics(mesh);
    const VecC ones = VecC::Ones(128);
    CHECK(local_poincare_constant(mesh, space, ones, gradient_operator(mesh).apply(ones), 3, 0.5) == 0.0);
    CHECK(local_poincare_constant(mesh, space, ones, gradient_operator(mesh).apply(ones), 3, 1e-3) < 0.0);

    const auto rep = check_local_poincare(mesh, space, 200, 17);
    CHECK(rep.evaluated > 100);
    CHECK(std::isfinite(rep.max_constant));
    CHECK(rep.max_constant > 0.0);
}

TEST_CASE("operator CSV export", "[manifold]") {
    const auto g = gradient_operator(generate_mesh(shape::Circle{1.0, 3}));
    std::ostringstream out;
    g.write_csv(out);
    const std::string text = out.str();
    CHECK(text.rfind("row,col,re,im\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 6);
}
