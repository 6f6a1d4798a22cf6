#include <catch2/catch_amalgamated.hpp>

#include "kato/dyadic_cubes.hpp"
#include "kato/manifold.hpp"
#include "support.hpp"

using namespace kato;
using Catch::Approx;

namespace {

PointCloudSpace line_space(index_t n, real spacing) {
    MatR d(n, n);
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < n; ++j) d(i, j) = spacing * static_cast<real>(std::abs(i - j));
    return PointCloudSpace(VecR::Constant(n, spacing), d);
}

}  // namespace

TEST_CASE("one-point space has one cube per level", "[dyadic_cubes]") {
    PointCloudSpace s(VecR::Constant(1, 3.0), MatR::Zero(1, 1));
    const auto d = build_cubes(s, 0.5, 3, 1);
    for (int k = 0; k <= 3; ++k) {
        REQUIRE(d.num_cubes(k) == 1);
        CHECK(d.cube(k, 0).measure == 3.0);
        CHECK(d.cube(k, 0).members == std::vector<index_t>{0});
    }
    const auto rep = check_cube_properties(d, s);
    CHECK(rep.exact_properties());
    CHECK(rep.boundary.c == 1.0);
}

TEST_CASE("cube counts on the circle follow the side length", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(256);
    const auto d = build_cubes(s, 0.5, 6, 3);
    for (int k = 2; k <= 6; ++k) {
        const real expect = 2.0 * pi / (2.0 * std::pow(0.5, k));
        const real got = static_cast<real>(d.num_cubes(k));
        CHECK(got >= expect / 2.0);
        CHECK(got <= expect * 2.0);
    }
}

TEST_CASE("built structures satisfy the exact properties", "[dyadic_cubes]") {
    const auto circle = graph_geodesics(generate_mesh(shape::Circle{1.0, 512}));
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto d = build_cubes(circle, 0.5, 8, seed);
        const auto rep = check_cube_properties(d, circle);
        CHECK(rep.exact_properties());
        CHECK(rep.failures.empty());
        CHECK(rep.a0 > 0.0);
        CHECK(rep.a1 <= 1.0 / (1.0 - d.delta) + 1e-12);
        CHECK(rep.a1 / rep.a0 <= 8.0);
        CHECK(rep.boundary.eta >= 0.2);
        CHECK(rep.boundary.r2 >= 0.8);
    }
    const auto sphere = graph_geodesics(generate_mesh(shape::Sphere{1.0, 2}));
    const auto d = build_cubes(sphere, 0.6, 4, 1);
    const auto rep = check_cube_properties(d, sphere);
    CHECK(rep.exact_properties());
    CHECK(rep.boundary.cubes_used > 0);
}

TEST_CASE("ball sandwich holds with the measured constants", "[dyadic_cubes]") {
    const auto s = testing::grid_patch_space(12);
    const auto d = build_cubes(s, 0.5, 4, 9);
    for (int k = 0; k <= d.depth; ++k)
        for (const Cube& q : d.levels[static_cast<size_t>(k)])
            for (index_t y = 0; y < s.size(); ++y) {
                const bool in = std::binary_search(q.members.begin(), q.members.end(), y);
                const real r = s.distance(q.center, y);
                if (r < d.a0 * q.side) CHECK(in);
                if (in) CHECK(r < d.a1 * q.side);
            }
}

TEST_CASE("checker names the offending pair", "[dyadic_cubes]") {
    const auto s = line_space(4, 1.0);
    SECTION("nesting violation") {
        const auto d = make_structure(s, 0.5, {{{0, 1}, {2, 3}}, {{0}, {1, 2}, {3}}}, {{0, 2}, {0, 1, 3}});
        const auto rep = check_cube_properties(d, s);
        CHECK_FALSE(rep.nested);
        CHECK(rep.cover);
        CHECK(rep.disjoint);
        REQUIRE_FALSE(rep.failures.empty());
        CHECK(rep.failures.front().find("(1,1)") != std::string::npos);
        CHECK(rep.failures.front().find("(0,0)") != std::string::npos);
        CHECK(rep.failures.front().find("(0,1)") != std::string::npos);
    }
    SECTION("overlap and gap") {
        const auto d = make_structure(s, 0.5, {{{0, 1, 2}, {2}}}, {{0, 2}});
        const auto rep = check_cube_properties(d, s);
        CHECK_FALSE(rep.disjoint);
        CHECK_FALSE(rep.cover);
    }
}

TEST_CASE("scale lookup", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(64);
    const auto d = build_cubes(s, 0.5, 4, 1);
    CHECK(level_for_scale(d, 1.0) == 0);
    CHECK(level_for_scale(d, 0.5) == 1);
    CHECK(level_for_scale(d, 0.3) == 1);
    CHECK(level_for_scale(d, 0.0625) == 4);
    try {
        cubes_at_scale(d, 0.05);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::input);
        CHECK(std::string(e.what()).find("0.0625") != std::string::npos);
    }
    CHECK_THROWS_AS(cubes_at_scale(d, 1.5), Error);
}

TEST_CASE("dyadic averages are contractive projections", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(256);
    const auto d = build_cubes(s, 0.5, 6, 2);
    std::mt19937_64 rng(4);
    for (real t : {1.0, 0.4, 0.1, 0.02}) {
        const VecC u = testing::random_field(s.size(), rng);
        const VecC a = dyadic_average(d, s, t, u);
        const VecC aa = dyadic_average(d, s, t, a);
        CHECK((a - aa).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(l2_norm(s, a) <= l2_norm(s, u) * (1 + 1e-12));
        // Mean preservation on each cube.
        CHECK(std::abs((s.masses().cast<cplx>().array() * (a - u).array()).sum()) <= 1e-10);
    }
}

TEST_CASE("dyadic maximal function is bounded", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(256);
    const auto d = build_cubes(s, 0.5, 6, 2);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20; ++i) {
        const auto m = dyadic_maximal(d, s, testing::random_field(s.size(), rng));
        CHECK(m.ratio >= 1.0 - 1e-12);
        CHECK(m.ratio <= 4.0);
    }
    VecC spike = VecC::Zero(s.size());
    spike[10] = 1.0;
    CHECK(dyadic_maximal(d, s, spike).ratio <= 4.0);
}

TEST_CASE("Carleson norms", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(128);
    const auto d = build_cubes(s, 0.5, 5, 6);
    SECTION("single atom matches the smallest admissible cube") {
        const index_t x = 37;
        const real t = 0.2;
        CarlesonSample nu{{{x, t, 0.7}}, 1.0};
        real oracle = 0.0;
        for (int k = 0; k <= d.depth; ++k) {
            if (d.side(k) < t) continue;
            const Cube& q = d.cube(k, d.cube_of[static_cast<size_t>(k)][static_cast<size_t>(x)]);
            oracle = std::max(oracle, 0.7 / q.measure);
        }
        CHECK(carleson_norm(d, s, nu) == Approx(oracle).epsilon(1e-14));
    }
    SECTION("calibration measure has norm one") {
        const auto nu = calibration_measure(d, s);
        CHECK(carleson_norm(d, s, nu) == Approx(1.0).epsilon(1e-12));
    }
    SECTION("homogeneity") {
        auto nu = random_carleson_measure(d, s, 200, 1.0, 5);
        const real base = carleson_norm(d, s, nu);
        for (auto& a : nu.support) a.weight *= 3.5;
        CHECK(carleson_norm(d, s, nu) == Approx(3.5 * base).epsilon(1e-12));
    }
    SECTION("zero measure") {
        CarlesonSample nu;
        std::mt19937_64 rng(1);
        const auto res = carleson_embedding_check(d, s, nu, {testing::random_field(s.size(), rng)});
        CHECK(res.carleson_norm == 0.0);
        CHECK(res.max_ratio == 0.0);
    }
    SECTION("atoms above t0 are rejected") {
        CarlesonSample nu{{{0, 0.8, 1.0}}, 0.5};
        CHECK_THROWS_AS(carleson_norm(d, s, nu), Error);
    }
    SECTION("embedding ratio is bounded") {
        std::mt19937_64 rng(12);
        std::vector<VecC> trials;
        for (int i = 0; i < 30; ++i) trials.push_back(testing::random_field(s.size(), rng));
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const auto nu = random_carleson_measure(d, s, 300, 1.0, seed);
            const auto res = carleson_embedding_check(d, s, nu, trials);
            CHECK(res.trials_used == 30);
            CHECK(res.max_ratio > 0.0);
            CHECK(res.max_ratio <= 20.0);
        }
    }
}

TEST_CASE("two-cube sum has a closed form", "[dyadic_cubes]") {
    const real dist = 0.9;
    MatR dm(2, 2);
    dm << 0, dist, dist, 0;
    PointCloudSpace s(VecR::Constant(2, 1.0), dm);
    const auto d = make_structure(s, 0.5, {{{0, 1}}, {{0}, {1}}}, {{0}, {0, 1}});
    const real t = 0.5, M = 3.0, m = 1.5;
    const real oracle = 1.0 + std::pow(std::min(1.0, t / dist), M) * std::exp(-m * dist / t);
    CHECK(cube_sum_check(d, s, t, M, m).value == Approx(oracle).epsilon(1e-14));
    GrowthProfile g;
    g.kappa = 5.0;
    CHECK(cube_sum_check(d, s, t, M, m, &g).precondition_warning);
    g.kappa = 1.0;
    CHECK_FALSE(cube_sum_check(d, s, t, M, m, &g).precondition_warning);
}

TEST_CASE("cube sums are uniformly bounded across scales", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(256);
    const auto g = fit_growth_profile(s, 1000, 2);
    const auto d = build_cubes(s, 0.5, 6, 1);
    std::vector<real> vals;
    for (real t : {0.5, 0.25, 0.125, 0.0625}) {
        const auto r = cube_sum_check(d, s, t, g.kappa + 1.0, g.lambda * t + 1.0, &g);
        CHECK_FALSE(r.precondition_warning);
        vals.push_back(r.value);
    }
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    CHECK(*hi / *lo <= 2.0);
}

TEST_CASE("measure ratio bound is scale stable on the circle", "[dyadic_cubes]") {
    const auto s = testing::arc_circle_space(256);
    const auto g = fit_growth_profile(s, 1000, 2);
    const auto d = build_cubes(s, 0.5, 6, 1);
    std::vector<real> vals;
    for (real t : {0.5, 0.25, 0.125}) vals.push_back(measure_ratio_check(d, s, t, g));
    for (real v : vals) {
        CHECK(std::isfinite(v));
        CHECK(v == Approx(vals[0]).epsilon(0.2));
    }
}

TEST_CASE("cube construction is deterministic per seed", "[dyadic_cubes]") {
    const auto s = testing::grid_patch_space(10);
    const auto a = build_cubes(s, 0.5, 3, 77), b = build_cubes(s, 0.5, 3, 77);
    for (int k = 0; k <= 3; ++k) {
        REQUIRE(a.num_cubes(k) == b.num_cubes(k));
        for (index_t i = 0; i < a.num_cubes(k); ++i) CHECK(a.cube(k, i).members == b.cube(k, i).members);
    }
}
