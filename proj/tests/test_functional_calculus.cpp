#include <catch2/catch_amalgamated.hpp>

#include "kato/functional_calculus.hpp"
#include "support.hpp"

using namespace kato;
using Catch::Approx;

namespace {

EmbeddedMesh circle(index_t n) { return generate_mesh(shape::Circle{1.0, n}); }

real max_abs(const MatC& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

/// The stacked layout of `mesh` with Pi_B = 0.
FirstOrderSystem zero_system(const EmbeddedMesh& mesh) {
    const auto ref = assemble_kato_system(mesh, identity_coefficients(mesh));
    SpR S(ref.block2(), ref.V);
    SpC A(ref.block2(), ref.block2());
    A.setIdentity();
    auto sys = system_from_blocks(ref.n, ref.m, ref.C, ref.Mv, ref.w2, S, A, VecC::Ones(ref.V));
    sys.Pavg = ref.Pavg;
    sys.E = ref.E;
    sys.owner = ref.owner;
    return sys;
}

/// Columns drawn at random and projected onto the range of Pi_B.
MatC range_samples(const FirstOrderSystem& sys, index_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return project_to_range(sys, detail::random_gaussian(sys.size(), k, rng));
}

}  // namespace

TEST_CASE("scalar quadrature oracle", "[functional_calculus]") {
    const auto g = make_grid(1e-4, 1e4, 16);
    CHECK(g.nodes.size() == 129);
    for (index_t i = 1; i < g.nodes.size(); ++i) CHECK(g.nodes[i] > g.nodes[i - 1]);
    for (real lam : {1e-3, 0.1, 1.0, 10.0, 1e3}) CHECK(scalar_quadrature_error(g, lam) <= 1e-3);
    CHECK(refine(g).nodes.size() == 257);
    CHECK_THROWS_AS(make_grid(1.0, 0.5, 16), Error);
}

TEST_CASE("resolvent family on the kernel and the spectrum", "[functional_calculus]") {
    const auto mesh = circle(32);
    const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
    SECTION("kernel is fixed") {
        const MatC pk = hodge_projections(sys).kernel;
        std::mt19937_64 rng(3);
        const VecC u = pk * testing::random_field(sys.size(), rng);
        REQUIRE(u.norm() > 0.1);
        const ResolventOperators ops(sys, 0.7);
        CHECK((ops.apply(Family::R, u) - u).norm() <= 1e-10 * u.norm());
        CHECK(ops.apply(Family::Q, u).norm() <= 1e-10 * u.norm());
    }
    SECTION("scalar oracle on eigenvectors of Pi") {
        Eigen::SelfAdjointEigenSolver<MatC> es(sys.pi_hat());
        for (index_t j : {index_t(0), sys.size() / 3, sys.size() - 1}) {
            const real lam = es.eigenvalues()[j];
            const VecC u = es.eigenvectors().col(j);
            for (real t : {0.01, 0.3, 2.0}) {
                const ResolventOperators ops(sys, t);
                CHECK(ops.apply(Family::Q, u).norm() == Approx(std::abs(t * lam) / (1 + t * t * lam * lam)).margin(1e-10));
            }
        }
    }
    SECTION("resolvent identity") {
        const auto pert = assemble_kato_system(mesh, random_accretive_coefficients(mesh, 0.5, 0.5, 2.0, 4));
        const MatC pb = pert.pi_b_hat();
        for (auto [t, s] : {std::pair{0.2, 0.9}, std::pair{-0.5, 1.7}}) {
            const MatC rt = resolvent_family(pert, t).R, rs = resolvent_family(pert, s).R;
            CHECK(max_abs(rt - rs - cplx(0, s - t) * rt * pb * rs) <= 1e-9);
        }
    }
}

TEST_CASE("uniform bounds", "[functional_calculus]") {
    const auto mesh = circle(32);
    SECTION("self-adjoint closed forms") {
        const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
        const auto ub = uniform_bound_scan(sys, default_grid(sys, 8));
        CHECK(ub.get(Family::P) == Approx(1.0).margin(0.01));
        CHECK(ub.get(Family::Q) == Approx(0.5).margin(0.01));
        CHECK(ub.get(Family::R) == Approx(1.0).margin(0.01));
        CHECK(ub.get(Family::R) <= 1.0 + 1e-9);
    }
    SECTION("Pi_B = 0") {
        const auto sys = zero_system(mesh);
        const ResolventOperators ops(sys, 0.4);
        const MatC I = MatC::Identity(sys.size(), sys.size());
        CHECK(max_abs(ops.dense_matrix(Family::R) - I) == 0.0);
        CHECK(max_abs(ops.dense_matrix(Family::P) - I) == 0.0);
        CHECK(max_abs(ops.dense_matrix(Family::Q)) == 0.0);
        CHECK(max_abs(ops.dense_matrix(Family::Theta)) == 0.0);
    }
    SECTION("perturbed draws stay bounded and refinement-stable") {
        const auto sys = assemble_kato_system(mesh, random_accretive_coefficients(mesh, 0.5, 0.5, 2.0, 9));
        const auto g = default_grid(sys, 8);
        const auto a = uniform_bound_scan(sys, g), b = uniform_bound_scan(sys, refine(g));
        for (Family f : all_families) {
            CHECK(std::isfinite(a.get(f)));
            CHECK(a.get(f) < 100);
            CHECK(std::abs(a.get(f) - b.get(f)) <= 0.05 * b.get(f));
        }
    }
}

TEST_CASE("sector resolvent bound", "[functional_calculus]") {
    const auto mesh = circle(32);
    SECTION("self-adjoint at pi/4") {
        const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
        const auto sb = sector_resolvent_bound(sys, pi / 4, 40);
        CHECK(sb.samples == 40);
        CHECK(sb.value <= std::sqrt(2.0) + 1e-8);
        CHECK(sb.value >= 1.0);
        // Far from the spectrum the bound tends to 1.
        CHECK(1e6 * SectorResolvent(sys, cplx(0, 1e6)).norm() == Approx(1.0).margin(1e-6));
    }
    SECTION("Pi_B = 0 gives exactly one") {
        const auto sys = zero_system(mesh);
        CHECK(sector_resolvent_bound(sys, pi / 4, 12).value == Approx(1.0).epsilon(1e-12));
    }
    SECTION("theta must exceed omega") {
        const auto sys = assemble_kato_system(mesh, random_accretive_coefficients(mesh, 0.5, 0.5, 2.0, 2));
        CHECK_THROWS_AS(sector_resolvent_bound(sys, 0.5 * sys.omega, 4), Error);
        CHECK(std::isfinite(sector_resolvent_bound(sys, 0.5 * (sys.omega + pi / 2), 20).value));
    }
}

TEST_CASE("quadratic functional", "[functional_calculus]") {
    const auto mesh = circle(64);
    const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
    const auto grid = default_grid(sys);
    SECTION("self-adjoint constant one half") {
        const MatC u = range_samples(sys, 5, 1);
        for (index_t j = 0; j < u.cols(); ++j) {
            const VecC un = from_unitary(u.col(j), sys.weights);
            const auto q = quadratic_functional(sys, un, grid);
            CHECK(q.value / u.col(j).squaredNorm() == Approx(0.5).margin(0.01));
            CHECK(q.tail_bound <= 0.01 * q.value);
            // Homogeneity.
            const auto q2 = quadratic_functional(sys, VecC(cplx(2, -1) * un), grid);
            CHECK(q2.value == Approx(5 * q.value).epsilon(1e-10));
        }
    }
    SECTION("kernel gives zero") {
        std::mt19937_64 rng(2);
        const VecC k = hodge_projections(sys).kernel * testing::random_field(sys.size(), rng);
        const auto vals = quadratic_functional_batch(sys, MatC(k), grid);
        CHECK(vals[0].value <= 1e-20 * k.squaredNorm());
    }
    SECTION("refinement changes the value by less than 0.5%") {
        const MatC u = range_samples(sys, 3, 4);
        const auto a = quadratic_functional_batch(sys, u, grid);
        const auto b = quadratic_functional_batch(sys, u, refine(grid));
        for (size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j].value - b[j].value) <= 0.005 * b[j].value);
    }
    SECTION("ratio scan") {
        const auto rs = quadratic_ratio_scan(sys, 6, grid, 5);
        CHECK(rs.trials == 6);
        CHECK(rs.min_ratio == Approx(0.5).margin(0.01));
        CHECK(rs.max_ratio == Approx(0.5).margin(0.01));
        const auto small = circle(64);
        const auto pert = assemble_kato_system(small, random_accretive_coefficients(small, 0.5, 0.5, 2.0, 1));
        const auto pr = quadratic_ratio_scan(pert, 6, default_grid(pert), 5);
        CHECK(pr.min_ratio > 0.05);
        CHECK(pr.max_ratio < 5.0);
    }
    SECTION("kernel components are projected away") {
        const MatC u = range_samples(sys, 1, 8);
        std::mt19937_64 rng(9);
        const VecC k = hodge_projections(sys).kernel * testing::random_field(sys.size(), rng);
        const MatC v = project_to_range(sys, MatC(u + k));
        CHECK((v - u).norm() <= 1e-10 * u.norm());
    }
    SECTION("zero range is flagged as vacuous") {
        const auto z = zero_system(circle(16));
        CHECK(quadratic_ratio_scan(z, 3, default_grid(z), 1).vacuous);
    }
}

TEST_CASE("holomorphic calculus", "[functional_calculus]") {
    const auto mesh = circle(32);
    const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
    const MatC pi_hat = sys.pi_hat();
    Eigen::SelfAdjointEigenSolver<MatC> es(pi_hat);
    SECTION("sign squared is the range projection") {
        const MatC sg = holomorphic_calculus(sys, sign_function()).operator_matrix;
        const MatC u = range_samples(sys, 4, 2);
        CHECK(max_abs(sg * sg * u - u) <= 1e-8);
        // The oracle: sign applied eigenvalue-wise.
        VecC sv(es.eigenvalues().size());
        for (index_t i = 0; i < sv.size(); ++i) {
            const real l = es.eigenvalues()[i];
            sv[i] = std::abs(l) < 1e-9 ? 0.0 : (l > 0 ? 1.0 : -1.0);
        }
        CHECK(max_abs(sg - es.eigenvectors() * sv.asDiagonal() * es.eigenvectors().adjoint()) <= 1e-8);
    }
    SECTION("sqrt of square is the absolute value") {
        const MatC ab = holomorphic_calculus(sys, sqrt_of_square_function()).operator_matrix;
        const MatC oracle = es.eigenvectors() * es.eigenvalues().cwiseAbs().cast<cplx>().asDiagonal() *
                            es.eigenvectors().adjoint();
        CHECK(max_abs(ab - oracle) <= 1e-10 * max_abs(oracle));
    }
    SECTION("resolvent composite matches R_1") {
        const MatC r = holomorphic_calculus(sys, resolvent_composite_function(1.0)).operator_matrix;
        CHECK(max_abs(r - resolvent_family(sys, 1.0).R) <= 1e-10);
    }
    SECTION("Pi_B = 0") {
        const auto z = zero_system(mesh);
        const MatC r = holomorphic_calculus(z, resolvent_composite_function(0.5)).operator_matrix;
        CHECK(max_abs(r - MatC::Identity(z.size(), z.size())) == 0.0);
        CHECK(max_abs(holomorphic_calculus(z, sign_function()).operator_matrix) == 0.0);
    }
    SECTION("eigen and contour paths agree on perturbed systems") {
        for (std::uint64_t seed : {1u, 5u}) {
            const auto pert = assemble_kato_system(mesh, random_accretive_coefficients(mesh, 0.5, 0.5, 2.0, seed));
            for (const auto& f : {sign_function(), sqrt_of_square_function(), resolvent_composite_function(0.7)}) {
                const auto res = holomorphic_calculus(pert, f, CalculusMethod::both);
                CHECK(res.method == CalculusMethod::both);
                CHECK(res.cross_check >= 0.0);
                CHECK(res.cross_check <= 1e-6);
            }
            // R_t of the perturbed system through the contour path alone.
            const auto rc = holomorphic_calculus(pert, resolvent_composite_function(0.7), CalculusMethod::contour_quadrature);
            CHECK(rc.method == CalculusMethod::contour_quadrature);
            CHECK(max_abs(rc.operator_matrix - resolvent_family(pert, 0.7).R) <= 1e-6);
        }
    }
    SECTION("sign times sqrt of square recovers Pi_B on its range") {
        const auto pert = assemble_kato_system(mesh, random_accretive_coefficients(mesh, 0.5, 0.5, 2.0, 3));
        const MatC sg = holomorphic_calculus(pert, sign_function()).operator_matrix;
        const MatC ab = holomorphic_calculus(pert, sqrt_of_square_function()).operator_matrix;
        const MatC u = range_samples(pert, 4, 6);
        const MatC pb = pert.pi_b_hat();
        CHECK(max_abs(sg * ab * u - pb * u) <= 1e-7 * max_abs(pb * u));
    }
    SECTION("custom even/odd pair") {
        // f(z) = z^2 + z, so f(Pi_B) = Pi_B^2 + Pi_B.
        const auto f = custom_function("poly", [](cplx w) { return w; }, [](cplx) { return cplx(1); }, 0.0);
        const MatC r = holomorphic_calculus(sys, f, CalculusMethod::eigendecomposition).operator_matrix;
        CHECK(max_abs(r - (pi_hat * pi_hat + pi_hat)) <= 1e-9 * max_abs(pi_hat * pi_hat));
    }
}

TEST_CASE("contour quadrature on a scalar", "[functional_calculus]") {
    // Orientation and accuracy of the ray quadrature for a 1x1 operator.
    for (real lam : {0.01, 1.0, 250.0}) {
        const MatC L = MatC::Constant(1, 1, lam);
        const auto out = contour_function(L, [](cplx w) { return std::sqrt(w); }, 0.75 * pi, lam, lam);
        CHECK(std::abs(out.value(0, 0) - std::sqrt(lam)) <= 1e-8 * std::sqrt(lam));
        CHECK(out.tail <= 1e-8);
    }
    const MatC L = (MatC(2, 2) << cplx(1, 0.5), 0.3, 0.0, cplx(4, -1)).finished();
    const auto out = contour_function(L, [](cplx w) { return 1.0 / (1.0 + w); }, 0.75 * pi, 1.0, 5.0);
    const MatC expect = (MatC::Identity(2, 2) + L).inverse();
    CHECK(max_abs(out.value - expect) <= 1e-8);
}

TEST_CASE("square root of L", "[functional_calculus]") {
    const auto mesh = circle(128);
    SECTION("unperturbed identity") {
        const auto kr = kato_square_root(mesh, identity_coefficients(mesh), {CalculusMethod::automatic, 20, 4, 1});
        CHECK(kr.square_residual <= 1e-8);
        for (real r : kr.ratio_values) CHECK(r == Approx(1.0).epsilon(1e-8));
        const VecC one = VecC::Ones(mesh.num_vertices());
        CHECK(kato_ratio(mesh, kr.sqrtL, one) == Approx(1.0).epsilon(1e-10));
    }
    SECTION("a = 2 scales the ratios by sqrt 2") {
        const auto kr = kato_square_root(mesh, scaled_identity_coefficients(mesh, 2.0, 1.0), {CalculusMethod::automatic, 10, 2, 1});
        CHECK(kr.ratios.min == Approx(std::sqrt(2.0)).epsilon(1e-6));
        CHECK(kr.ratios.max == Approx(std::sqrt(2.0)).epsilon(1e-6));
    }
    SECTION("perturbed draws stay in a bounded bracket") {
        const auto small = circle(64);
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const auto kr = kato_square_root(small, random_accretive_coefficients(small, 0.5, 0.5, 2.0, seed),
                                             {CalculusMethod::automatic, 20, 4, seed});
            CHECK(kr.square_residual <= 1e-8);
            CHECK(kr.ratios.min > 1.0 / 50);
            CHECK(kr.ratios.max < 50);
            CHECK(kr.ratios.min <= kr.ratios.median);
            CHECK(kr.ratios.median <= kr.ratios.max);
        }
    }
}

TEST_CASE("principal part", "[functional_calculus]") {
    const auto mesh = circle(128);
    const auto space = graph_geodesics(mesh);
    const auto ds = build_cubes(space, 0.5, 5, 1);
    const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
    SECTION("Pi_B = 0 gives zero") {
        const auto pp = principal_part(zero_system(mesh), space, ds, 0.25);
        CHECK(pp.density.maxCoeff() == 0.0);
        CHECK(pp.carleson_density.support.empty());
    }
    SECTION("gamma_t A_t is bounded by the per-cube constant") {
        const auto pp = principal_part(sys, space, ds, 0.25);
        CHECK(pp.level == level_for_scale(ds, 0.25));
        CHECK(std::isfinite(pp.max_cube_average()));
        // |gamma_t A_t u|^2 on a cube is |A_t u|^2 times the mean of |gamma_t|^2 at most.
        const real c = std::sqrt(pp.max_cube_average());
        std::mt19937_64 rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            const MatC u = detail::random_gaussian(sys.V, sys.N, rng);
            const MatC au = dyadic_average_level(ds, space, pp.level, u);
            CHECK(field_norm(space, apply_gamma(pp, au)) <= c * field_norm(space, u) * (1 + 1e-12));
        }
    }
    SECTION("Carleson norm of |gamma|^2 is finite and homogeneous") {
        const auto grid = default_grid(sys, 8);
        const auto gc = gamma_carleson_check(sys, space, ds, grid, 1.0);
        CHECK(gc.nodes > 0);
        CHECK(std::isfinite(gc.norm));
        CHECK(gc.norm > 0);
        auto scaled = gc.measure;
        for (auto& a : scaled.support) a.weight *= 3.0;
        CHECK(carleson_norm(ds, space, scaled) == Approx(3 * gc.norm).epsilon(1e-12));
        const auto z = gamma_carleson_check(zero_system(mesh), space, ds, grid, 1.0);
        CHECK(z.norm == 0.0);
    }
    SECTION("t0 convention") {
        CHECK(diagnostic_t0(1.0, 2.0, 0.0) == 1.0);
        CHECK(diagnostic_t0(1.0, 1.0, 1.0) == Approx(0.25));
        CHECK(diagnostic_t0(100.0, 1.0, 1.0) == 1.0);
    }
}

TEST_CASE("reduction split", "[functional_calculus]") {
    const auto mesh = circle(64);
    const auto space = graph_geodesics(mesh);
    const auto ds = build_cubes(space, 0.5, 4, 1);
    const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
    const auto grid = default_grid(sys, 8);
    SECTION("zero field") {
        const auto rt = reduction_split_diagnostics(sys, space, ds, VecC::Zero(sys.size()), grid, 1.0);
        CHECK(rt.principal == 0.0);
        CHECK(rt.remainder == 0.0);
        CHECK(rt.carleson == 0.0);
    }
    SECTION("three terms dominate the direct integral") {
        const LaplacianSpectrum spec = laplacian_spectrum(mesh);
        VecC u = VecC::Zero(sys.size());
        u.tail(sys.block2()) = kato::apply(sys.S, VecC(spec.vectors.col(1).cast<cplx>()));
        const auto rt = reduction_split_diagnostics(sys, space, ds, u, grid, 1.0);
        CHECK(rt.nodes > 0);
        CHECK(rt.direct <= 3 * (rt.principal + rt.remainder + rt.carleson) * (1 + 1e-12));
        CHECK(rt.principal <= 5.0);
        CHECK(rt.remainder <= 5.0);
        CHECK(rt.carleson <= 5.0);
    }
}

TEST_CASE("weighted Poincare and interpolation", "[functional_calculus]") {
    const auto mesh = circle(128);
    const auto space = graph_geodesics(mesh);
    const auto ds = build_cubes(space, 0.5, 5, 1);
    const auto growth = fit_growth_profile(space, 200, 1);
    const VecC one = VecC::Ones(mesh.num_vertices());
    VecC s(mesh.num_vertices());
    for (index_t v = 0; v < s.size(); ++v) s[v] = mesh.vertex(v)[1];
    SECTION("Poincare") {
        CHECK(weighted_poincare_check(mesh, space, ds, 0.25, 6.0, 1.0, one, growth).ratio == 0.0);
        const auto r = weighted_poincare_check(mesh, space, ds, 0.25, 6.0, 1.0, s, growth);
        CHECK(std::isfinite(r.ratio));
        CHECK(r.ratio > 0);
        const auto r2 = weighted_poincare_check(mesh, space, ds, 0.25, 6.0, 1.0, VecC(cplx(0, 3) * s), growth);
        CHECK(r2.ratio == Approx(r.ratio).epsilon(1e-10));
    }
    SECTION("interpolation") {
        const auto sys = assemble_kato_system(mesh, identity_coefficients(mesh));
        VecC u = VecC::Zero(sys.size());
        u.head(sys.V) = one;
        CHECK(interpolation_inequality_check(sys, space, ds, u, Upsilon::Gamma, 0.25).ratio <= 1.0 + 1e-12);
        std::mt19937_64 rng(5);
        const VecC w = testing::random_field(sys.size(), rng);
        for (Upsilon y : {Upsilon::Pi, Upsilon::Gamma, Upsilon::GammaStar}) {
            const auto a = interpolation_inequality_check(sys, space, ds, w, y, 0.25);
            const auto b = interpolation_inequality_check(sys, space, ds, VecC(cplx(-2, 1) * w), y, 0.25);
            CHECK(std::isfinite(a.ratio));
            CHECK(b.ratio == Approx(a.ratio).epsilon(1e-10));
        }
        // Yu = 0 everywhere contributes nothing.
        VecC ker = VecC::Zero(sys.size());
        ker.segment(sys.V, sys.V) = one;
        CHECK(interpolation_inequality_check(sys, space, ds, ker, Upsilon::Gamma, 0.25).ratio == 0.0);
    }
}
