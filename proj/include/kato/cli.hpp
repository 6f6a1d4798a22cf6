#pragma once

// Scenario configs, the check registry and the batch runner behind kato_forge.

#include "kato/core.hpp"
#include "kato/dirac_system.hpp"
#include "kato/dyadic_cubes.hpp"
#include "kato/functional_calculus.hpp"
#include "kato/manifold.hpp"
#include "kato/mesh.hpp"
#include "kato/metric_space.hpp"
#include "kato/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace kato::cli {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
    const char* env = std::getenv("KATO_FORGE_LOG");
    if (!env) return LogLevel::info;
    const std::string v(env);
    if (v == "error") return LogLevel::error;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::info;
}

inline void log(LogLevel lvl, const std::string& msg) {
    static std::mutex mu;
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    static const char* names[] = {"error", "info", "debug"};
    std::lock_guard<std::mutex> lock(mu);
    std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Scenario config
// ---------------------------------------------------------------------------

struct MeshConfig {
    std::optional<ShapeSpec> shape;
    std::string off_path;
    int ambient_dim = 3;
    json source;  ///< the config section as given
};

struct CoefficientConfig {
    enum class Mode { identity, random } mode = Mode::identity;
    real kappa1 = 0.5, kappa2 = 0.5, bound = 2.0;
    std::vector<std::uint64_t> seeds{1};
};

struct CubeConfig {
    real delta = 0.5;
    int depth = 5;
    std::uint64_t seed = 1;
};

struct GridConfig {
    real t_min_rel = 1e-4;
    real t_max_rel = 1e4;
    int points_per_decade = 16;
};

struct ScenarioConfig {
    std::string name = "scenario";
    MeshConfig mesh;
    CoefficientConfig coefficients;
    CubeConfig cubes;
    GridConfig grid;
    std::vector<std::string> checks;
    std::string output_dir = "kato_out";
    std::map<std::string, real> tolerances;
    std::uint64_t seed = 1;
    json source;
};

// ---------------------------------------------------------------------------
// Check registry
// ---------------------------------------------------------------------------

struct Context;

struct CheckOutcome {
    real value = 0.0;
    bool pass = false;
    json values = json::object();
    std::vector<std::string> notes;
    std::vector<std::string> artifacts;
};

struct CheckSpec {
    std::string id;
    std::string anchor;
    real tolerance;
    bool acceptance;  ///< one of the acceptance rows (false: diagnostic)
    std::string summary;
    std::function<CheckOutcome(const Context&, real)> run;
};

const std::vector<CheckSpec>& registry();

inline const CheckSpec* find_check(const std::string& id) {
    for (const auto& c : registry())
        if (c.id == id) return &c;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace detail {

inline void fail(const std::string& msg) { throw Error(ErrorKind::config, msg); }

inline void allow_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : keys) ok = ok || it.key() == k;
        if (!ok) fail(where + ": unknown key '" + it.key() + "'");
    }
}

inline real get_real(const json& j, const std::string& where, const char* key, real def, bool positive = true) {
    if (!j.contains(key)) return def;
    if (!j[key].is_number()) fail(where + "." + key + " must be a number");
    const real v = j[key].get<real>();
    if (!std::isfinite(v) || (positive && v <= 0)) fail(where + "." + key + " must be a positive number");
    return v;
}

inline std::int64_t get_int(const json& j, const std::string& where, const char* key, std::int64_t def,
                            std::int64_t min = 1) {
    if (!j.contains(key)) return def;
    if (!j[key].is_number_integer()) fail(where + "." + key + " must be an integer");
    const auto v = j[key].get<std::int64_t>();
    if (v < min) fail(where + "." + key + " must be at least " + std::to_string(min));
    return v;
}

inline std::int64_t need_int(const json& j, const std::string& where, const char* key, std::int64_t min = 1) {
    if (!j.contains(key)) fail(where + ": missing '" + key + "'");
    return get_int(j, where, key, 0, min);
}

inline real need_real(const json& j, const std::string& where, const char* key) {
    if (!j.contains(key)) fail(where + ": missing '" + key + "'");
    return get_real(j, where, key, 0.0);
}

inline MeshConfig parse_mesh(const json& j) {
    MeshConfig m;
    m.source = j;
    if (!j.is_object()) fail("mesh must be an object");
    if (j.contains("off")) {
        allow_keys(j, "mesh", {"off", "ambient_dim"});
        if (!j["off"].is_string()) fail("mesh.off must be a path string");
        m.off_path = j["off"].get<std::string>();
        m.ambient_dim = static_cast<int>(get_int(j, "mesh", "ambient_dim", 3, 2));
        return m;
    }
    if (!j.contains("shape") || !j["shape"].is_string()) fail("mesh needs 'shape' or 'off'");
    const std::string s = j["shape"].get<std::string>();
    if (s == "circle") {
        allow_keys(j, "mesh", {"shape", "radius", "points"});
        m.shape = shape::Circle{get_real(j, "mesh", "radius", 1.0), need_int(j, "mesh", "points", 3)};
    } else if (s == "sphere") {
        allow_keys(j, "mesh", {"shape", "radius", "refinement"});
        m.shape = shape::Sphere{get_real(j, "mesh", "radius", 1.0),
                                static_cast<int>(get_int(j, "mesh", "refinement", 2, 0))};
    } else if (s == "torus") {
        allow_keys(j, "mesh", {"shape", "major", "minor", "n", "m"});
        m.shape = shape::Torus{need_real(j, "mesh", "major"), need_real(j, "mesh", "minor"), need_int(j, "mesh", "n", 3),
                               need_int(j, "mesh", "m", 3)};
    } else if (s == "flat_patch") {
        allow_keys(j, "mesh", {"shape", "width", "height", "n", "m"});
        m.shape = shape::FlatPatch{get_real(j, "mesh", "width", 1.0), get_real(j, "mesh", "height", 1.0),
                                   need_int(j, "mesh", "n", 2), need_int(j, "mesh", "m", 2)};
    } else if (s == "flat_torus") {
        allow_keys(j, "mesh", {"shape", "width", "height", "n", "m"});
        m.shape = shape::FlatTorus{get_real(j, "mesh", "width", 1.0), get_real(j, "mesh", "height", 1.0),
                                   need_int(j, "mesh", "n", 3), need_int(j, "mesh", "m", 3)};
    } else if (s == "helix") {
        allow_keys(j, "mesh", {"shape", "radius", "pitch", "turns", "points"});
        m.shape = shape::Helix{get_real(j, "mesh", "radius", 1.0), get_real(j, "mesh", "pitch", 1.0),
                               get_real(j, "mesh", "turns", 1.0), need_int(j, "mesh", "points", 3)};
    } else {
        fail("mesh.shape '" + s + "' is not one of circle, sphere, torus, flat_patch, flat_torus, helix");
    }
    return m;
}

inline CoefficientConfig parse_coefficients(const json& j) {
    CoefficientConfig c;
    if (!j.is_object()) fail("coefficients must be an object");
    const std::string mode = j.value("mode", std::string("identity"));
    if (mode == "identity") {
        allow_keys(j, "coefficients", {"mode"});
        c.mode = CoefficientConfig::Mode::identity;
        return c;
    }
    if (mode != "random") fail("coefficients.mode must be 'identity' or 'random'");
    allow_keys(j, "coefficients", {"mode", "kappa1", "kappa2", "bound", "seeds"});
    c.mode = CoefficientConfig::Mode::random;
    c.kappa1 = get_real(j, "coefficients", "kappa1", 0.5);
    c.kappa2 = get_real(j, "coefficients", "kappa2", 0.5);
    c.bound = get_real(j, "coefficients", "bound", 2.0);
    if (j.contains("seeds")) {
        if (!j["seeds"].is_array() || j["seeds"].empty()) fail("coefficients.seeds must be a non-empty array");
        c.seeds.clear();
        for (const auto& s : j["seeds"]) {
            if (!s.is_number_integer() || s.get<std::int64_t>() < 0)
                fail("coefficients.seeds entries must be nonnegative integers");
            c.seeds.push_back(s.get<std::uint64_t>());
        }
    }
    return c;
}

}  // namespace detail

inline ScenarioConfig parse_config(const json& j) {
    using namespace detail;
    if (!j.is_object()) fail("config must be a JSON object");
    allow_keys(j, "config", {"name", "mesh", "coefficients", "cubes", "grid", "checks", "output_dir", "tolerances", "seed"});
    ScenarioConfig c;
    c.source = j;
    if (j.contains("name")) {
        if (!j["name"].is_string()) fail("name must be a string");
        c.name = j["name"].get<std::string>();
    }
    if (!j.contains("mesh")) fail("config: missing 'mesh'");
    c.mesh = parse_mesh(j["mesh"]);
    if (j.contains("coefficients")) c.coefficients = parse_coefficients(j["coefficients"]);
    if (j.contains("cubes")) {
        const json& q = j["cubes"];
        if (!q.is_object()) fail("cubes must be an object");
        allow_keys(q, "cubes", {"delta", "depth", "seed"});
        c.cubes.delta = get_real(q, "cubes", "delta", 0.5);
        if (c.cubes.delta >= 1.0) fail("cubes.delta must lie in (0,1)");
        c.cubes.depth = static_cast<int>(get_int(q, "cubes", "depth", 5, 0));
        c.cubes.seed = static_cast<std::uint64_t>(get_int(q, "cubes", "seed", 1, 0));
    }
    if (j.contains("grid")) {
        const json& g = j["grid"];
        if (!g.is_object()) fail("grid must be an object");
        allow_keys(g, "grid", {"t_min_rel", "t_max_rel", "points_per_decade"});
        c.grid.t_min_rel = get_real(g, "grid", "t_min_rel", 1e-4);
        c.grid.t_max_rel = get_real(g, "grid", "t_max_rel", 1e4);
        c.grid.points_per_decade = static_cast<int>(get_int(g, "grid", "points_per_decade", 16));
        if (c.grid.t_min_rel >= c.grid.t_max_rel) fail("grid.t_min_rel must be below grid.t_max_rel");
    }
    if (j.contains("checks")) {
        if (!j["checks"].is_array()) fail("checks must be an array of check ids");
        for (const auto& id : j["checks"]) {
            if (!id.is_string()) fail("checks entries must be strings");
            const std::string s = id.get<std::string>();
            if (!find_check(s)) fail("unknown check id '" + s + "'");
            c.checks.push_back(s);
        }
    } else {
        for (const auto& spec : registry()) c.checks.push_back(spec.id);
    }
    if (j.contains("output_dir")) {
        if (!j["output_dir"].is_string()) fail("output_dir must be a string");
        c.output_dir = j["output_dir"].get<std::string>();
    }
    if (j.contains("tolerances")) {
        if (!j["tolerances"].is_object()) fail("tolerances must be an object");
        for (auto it = j["tolerances"].begin(); it != j["tolerances"].end(); ++it) {
            if (!find_check(it.key())) fail("tolerances: unknown check id '" + it.key() + "'");
            if (!it.value().is_number() || !(it.value().get<real>() > 0) || !std::isfinite(it.value().get<real>()))
                fail("tolerances." + it.key() + " must be a positive number");
            c.tolerances[it.key()] = it.value().get<real>();
        }
    }
    c.seed = static_cast<std::uint64_t>(get_int(j, "config", "seed", 1, 0));
    return c;
}

inline ScenarioConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::config, "cannot read config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Scenario context
// ---------------------------------------------------------------------------

struct SystemEntry {
    std::string label;
    bool self_adjoint = false;
    CoefficientField coefficients;
    FirstOrderSystem system;
    QuadratureGrid grid;
};

/// Everything the checks share; built once before the checks run.
struct Context {
    ScenarioConfig config;
    std::filesystem::path out_dir;
    EmbeddedMesh mesh;
    PointCloudSpace space;
    DyadicStructure cubes;
    GrowthProfile growth;
    std::vector<SystemEntry> systems;
};

inline EmbeddedMesh build_mesh(const MeshConfig& m) {
    if (m.shape) return generate_mesh(*m.shape);
    return load_mesh(m.off_path, m.ambient_dim);
}

/// The shape with twice the resolution along each parameter; empty for OFF meshes
/// and for surfaces, where one refinement quadruples the dense work.
inline std::optional<ShapeSpec> refined_curve(const MeshConfig& m) {
    if (!m.shape) return std::nullopt;
    if (const auto* c = std::get_if<shape::Circle>(&*m.shape)) return shape::Circle{c->radius, 2 * c->points};
    if (const auto* h = std::get_if<shape::Helix>(&*m.shape)) return shape::Helix{h->radius, h->pitch, h->turns, 2 * h->points};
    return std::nullopt;
}

inline std::vector<SystemEntry> build_systems(const EmbeddedMesh& mesh, const CoefficientConfig& cc, const GridConfig& gc) {
    std::vector<SystemEntry> out;
    auto add = [&](std::string label, bool sa, CoefficientField f) {
        SystemEntry e;
        e.label = std::move(label);
        e.self_adjoint = sa;
        e.coefficients = std::move(f);
        e.system = assemble_kato_system(mesh, e.coefficients);
        e.grid = default_grid(e.system, gc.points_per_decade, gc.t_min_rel, gc.t_max_rel);
        out.push_back(std::move(e));
    };
    if (cc.mode == CoefficientConfig::Mode::identity) {
        add("identity", true, identity_coefficients(mesh));
    } else {
        for (auto s : cc.seeds)
            add("random seed " + std::to_string(s), false,
                random_accretive_coefficients(mesh, cc.kappa1, cc.kappa2, cc.bound, s));
    }
    return out;
}

inline Context build_context(const ScenarioConfig& cfg, const std::filesystem::path& out_dir, bool need_systems) {
    Context ctx;
    ctx.config = cfg;
    ctx.out_dir = out_dir;
    log(LogLevel::debug, "building mesh");
    ctx.mesh = build_mesh(cfg.mesh);
    log(LogLevel::debug, "building metric space and cubes");
    ctx.space = graph_geodesics(ctx.mesh);
    ctx.cubes = build_cubes(ctx.space, cfg.cubes.delta, cfg.cubes.depth, cfg.cubes.seed);
    ctx.growth = fit_growth_profile(ctx.space, 200, cfg.seed);
    if (need_systems) {
        log(LogLevel::debug, "assembling systems");
        ctx.systems = build_systems(ctx.mesh, cfg.coefficients, cfg.grid);
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// Shared computations
// ---------------------------------------------------------------------------

namespace detail {

inline json finite_or_null(real v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string write_artifact(const Context& ctx, const std::string& name, const std::string& contents) {
    report::write_atomic(ctx.out_dir / name, contents);
    return name;
}

inline std::string slug(const std::string& s) {
    std::string out;
    for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return out;
}

/// Smooth test fields: phi = second coordinate, psi = first coordinate.
inline VecC coordinate_field(const EmbeddedMesh& mesh, int axis) {
    VecC u(mesh.num_vertices());
    for (index_t v = 0; v < u.size(); ++v) u[v] = mesh.vertex(v)[axis];
    return u;
}

/// (phi, S psi) in the stacked space: smooth in every component.
inline VecC smooth_stacked_field(const EmbeddedMesh& mesh, const FirstOrderSystem& sys) {
    VecC u(sys.size());
    u.head(sys.V) = coordinate_field(mesh, std::min(1, mesh.ambient_dim() - 1));
    u.tail(sys.block2()) = kato::apply(sys.S, coordinate_field(mesh, 0));
    return u;
}

struct Diagnostics {
    real t0 = 1.0;
    real poincare = 0.0;
    real interpolation = 0.0;
    real gamma_bound = 0.0;
    real gamma_carleson = 0.0;
    ReductionTerms reduction;
    bool poincare_warning = false;

    std::map<std::string, real> values() const {
        return {{"weighted_poincare", poincare},          {"interpolation", interpolation},
                {"gamma_cube_bound", gamma_bound},        {"gamma_carleson", gamma_carleson},
                {"reduction_principal", reduction.principal}, {"reduction_remainder", reduction.remainder},
                {"reduction_carleson", reduction.carleson}};
    }
};

inline real fitted_t0(const FirstOrderSystem& sys, const PointCloudSpace& space, const DyadicStructure& ds,
                      const GrowthProfile& growth, std::uint64_t seed) {
    if (growth.lambda <= 0) return 1.0;
    const auto scan = off_diagonal_scan(sys, space, ds, {0.1, 0.2, 0.4}, 30, seed);
    return diagnostic_t0(scan.fit(Family::Theta).c_theta(), ds.a(), growth.lambda);
}

inline Diagnostics compute_diagnostics(const EmbeddedMesh& mesh, const PointCloudSpace& space, const DyadicStructure& ds,
                                       const GrowthProfile& growth, const FirstOrderSystem& sys,
                                       const QuadratureGrid& grid, std::uint64_t seed) {
    Diagnostics d;
    d.t0 = fitted_t0(sys, space, ds, growth, seed);
    const real t = std::clamp(0.25, ds.min_scale(), 1.0);
    const real M = std::max(6.0, growth.kappa + 4.0);
    const real m = std::max(1.0, ds.a() * growth.lambda);
    const auto pr = weighted_poincare_check(mesh, space, ds, t, M, m, coordinate_field(mesh, std::min(1, mesh.ambient_dim() - 1)), growth);
    d.poincare = pr.ratio;
    d.poincare_warning = pr.precondition_warning;
    const VecC u = smooth_stacked_field(mesh, sys);
    for (Upsilon y : {Upsilon::Pi, Upsilon::Gamma, Upsilon::GammaStar})
        d.interpolation = std::max(d.interpolation, interpolation_inequality_check(sys, space, ds, u, y, t).ratio);
    for (const auto& [tn, w] : diagnostic_nodes(grid, ds, d.t0)) {
        (void)w;
        d.gamma_bound = std::max(d.gamma_bound, principal_part(sys, space, ds, tn).max_cube_average());
    }
    d.gamma_carleson = gamma_carleson_check(sys, space, ds, grid, d.t0).norm;
    VecC g = VecC::Zero(sys.size());
    g.tail(sys.block2()) = kato::apply(sys.S, coordinate_field(mesh, 0));
    d.reduction = reduction_split_diagnostics(sys, space, ds, g, grid, d.t0);
    return d;
}

inline bool all_finite(const std::map<std::string, real>& m) {
    return std::all_of(m.begin(), m.end(), [](const auto& kv) { return std::isfinite(kv.second); });
}

struct Bracket {
    real lo = std::numeric_limits<real>::infinity();
    real hi = 0.0;
    std::vector<real> ratios;
    real max_square_residual = 0.0;
};

inline Bracket kato_bracket(const EmbeddedMesh& mesh, const CoefficientConfig& cc, std::uint64_t seed) {
    Bracket b;
    std::vector<CoefficientField> fields;
    if (cc.mode == CoefficientConfig::Mode::identity) fields.push_back(identity_coefficients(mesh));
    else
        for (auto s : cc.seeds) fields.push_back(random_accretive_coefficients(mesh, cc.kappa1, cc.kappa2, cc.bound, s));
    for (const auto& f : fields) {
        const auto kr = kato_square_root(mesh, f, {CalculusMethod::automatic, 50, 8, seed});
        b.lo = std::min(b.lo, kr.ratios.min);
        b.hi = std::max(b.hi, kr.ratios.max);
        b.max_square_residual = std::max(b.max_square_residual, kr.square_residual);
        b.ratios.insert(b.ratios.end(), kr.ratio_values.begin(), kr.ratio_values.end());
    }
    return b;
}

inline real relative_change(real a, real b) {
    const real s = std::max(std::abs(a), std::abs(b));
    return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

namespace checks {

using detail::finite_or_null;

inline CheckOutcome geometry(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto geo = second_fundamental_form(ctx.mesh);
    const auto spec = laplacian_spectrum(ctx.mesh);
    const real l1 = first_nonzero_eigenvalue(spec);
    const index_t nv = geo.h_norm.size();
    const real h_mean = geo.h_norm.sum() / real(nv);
    const real h2_mean = geo.h_norm.squaredNorm() / real(nv);
    const real H_mean = geo.mean_curvature_norm.sum() / real(nv);
    o.values = {{"h_sup", geo.h_sup}, {"H_sup", geo.H_sup}, {"h_mean", h_mean}, {"h_squared_mean", h2_mean},
                {"H_mean", H_mean}, {"lambda1", l1}};
    auto rel = [](real v, real ref) { return std::abs(v - ref) / std::abs(ref); };
    o.pass = std::isfinite(geo.h_sup) && std::isfinite(l1);
    real worst = 0.0;
    const auto& shp = ctx.config.mesh.shape;
    if (shp && std::holds_alternative<shape::Circle>(*shp)) {
        const real R = std::get<shape::Circle>(*shp).radius;
        worst = std::max({rel(h_mean, 1 / R), rel(geo.h_sup, 1 / R), rel(l1, 1 / (R * R))});
        o.notes.push_back("oracles: |h| = 1/R, lambda1 = 1/R^2");
    } else if (shp && std::holds_alternative<shape::Sphere>(*shp)) {
        const real R = std::get<shape::Sphere>(*shp).radius;
        worst = std::max({rel(h2_mean, 2 / (R * R)), rel(H_mean, 2 / R), rel(l1, 2 / (R * R))});
        o.notes.push_back("oracles: |h|^2 = 2/R^2, |H| = 2/R, lambda1 = 2/R^2");
    } else if (shp && (std::holds_alternative<shape::FlatPatch>(*shp) || std::holds_alternative<shape::FlatTorus>(*shp))) {
        worst = geo.h_sup <= 1e-8 ? 0.0 : std::numeric_limits<real>::infinity();
        o.notes.push_back("oracle: h = 0 (sup below 1e-8)");
    } else {
        o.notes.push_back("no closed-form oracle for this mesh; finiteness only");
    }
    o.value = worst;
    o.pass = o.pass && worst <= tol;
    return o;
}

inline CheckOutcome growth_profile(const Context& ctx, real) {
    CheckOutcome o;
    const auto& g = ctx.growth;
    o.values = {{"c", g.c}, {"kappa", g.kappa}, {"lambda", g.lambda}, {"worst_ratio", g.worst_ratio},
                {"samples", g.samples.size()}};
    o.value = g.kappa;
    o.pass = g.passes;
    return o;
}

inline CheckOutcome local_poincare(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto rep = check_local_poincare(ctx.mesh, ctx.space, 40, ctx.config.seed);
    o.values = {{"max_constant", finite_or_null(rep.max_constant)}, {"evaluated", rep.evaluated}, {"skipped", rep.skipped}};
    o.value = rep.max_constant;
    o.pass = std::isfinite(rep.max_constant) && rep.max_constant <= tol && rep.evaluated > 0;
    return o;
}

inline CheckOutcome christ_cubes(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto rep = check_cube_properties(ctx.cubes, ctx.space);
    const real ratio = rep.a0 > 0 ? rep.a1 / rep.a0 : std::numeric_limits<real>::infinity();
    o.values = {{"cover", rep.cover},          {"disjoint", rep.disjoint},   {"nested", rep.nested},
                {"unique_parent", rep.unique_parent}, {"a0", rep.a0},        {"a1", rep.a1},
                {"a1_over_a0", finite_or_null(ratio)}, {"eta", rep.boundary.eta}, {"eta_r2", rep.boundary.r2},
                {"boundary_c", rep.boundary.c}};
    for (const auto& f : rep.failures) o.notes.push_back(f);
    o.value = ratio;
    o.pass = rep.exact_properties() && ratio <= tol && rep.boundary.eta >= 0.2 && rep.boundary.r2 >= 0.8;
    return o;
}

inline CheckOutcome carleson_embedding(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto& ds = ctx.cubes;
    const auto& sp = ctx.space;
    std::vector<std::pair<std::string, CarlesonSample>> measures;
    measures.push_back({"zero", CarlesonSample{}});
    CarlesonSample single;
    single.support.push_back({0, ds.side(std::min(2, ds.depth)), sp.mass(0)});
    measures.push_back({"single_atom", single});
    measures.push_back({"calibration", calibration_measure(ds, sp)});
    measures.push_back({"random_a", random_carleson_measure(ds, sp, 200, 1.0, ctx.config.seed + 1)});
    measures.push_back({"random_b", random_carleson_measure(ds, sp, 500, 1.0, ctx.config.seed + 2)});
    std::mt19937_64 rng(ctx.config.seed);
    std::vector<VecC> trials;
    for (int i = 0; i < 100; ++i) trials.push_back(kato::detail::random_gaussian(sp.size(), 1, rng));
    real worst = 0.0;
    bool zero_ok = true;
    for (const auto& [name, nu] : measures) {
        const auto r = carleson_embedding_check(ds, sp, nu, trials);
        o.values[name] = {{"carleson_norm", r.carleson_norm}, {"max_ratio", r.max_ratio}};
        if (name == "zero") zero_ok = r.max_ratio == 0.0 && r.carleson_norm == 0.0;
        worst = std::max(worst, r.max_ratio);
    }
    o.value = worst;
    o.pass = zero_ok && worst <= tol;
    return o;
}

inline CheckOutcome structural(const Context& ctx, real tol) {
    CheckOutcome o;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        const auto r = structural_residuals(e.system, ctx.config.seed);
        const auto h = hodge_projections(e.system);
        const real hodge = std::max({h.sum_residual, h.product_residual, h.kernel_residual});
        o.values[e.label] = {{"gamma_squared", r.gamma_squared}, {"gamma_b_adj_squared", r.gamma_b_adj_squared},
                             {"h3", r.h3}, {"adjointness", r.adjointness}, {"intertwining", r.intertwining},
                             {"L_direct", r.L_direct}, {"hodge", hodge}};
        worst = std::max({worst, r.max(), hodge});
    }
    o.value = worst;
    o.pass = worst <= tol;
    return o;
}

inline CheckOutcome hypotheses(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        const auto rep = check_hypotheses(e.system, ctx.mesh, ctx.space, ctx.cubes, ctx.config.seed);
        json row;
        for (const auto& h : rep.entries) {
            row[h.id] = {{"pass", h.pass}, {"constant", finite_or_null(h.constant)}};
            if (!h.pass) o.notes.push_back(e.label + ": " + h.id + " failed: " + h.notes);
        }
        row["h8_range_gamma_adj"] = rep.h8_range_gamma_adj;
        row["omega"] = e.system.omega;
        o.values[e.label] = row;
        const real dev = std::abs(rep.h8_range_gamma_adj - 1.0);
        worst = std::max(worst, dev);
        o.pass = o.pass && rep.all_pass() && dev <= tol && e.system.omega < pi / 2;
    }
    o.value = worst;
    return o;
}

inline CheckOutcome hodge(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        const auto h = hodge_projections(e.system);
        const real r = std::max({h.sum_residual, h.product_residual, h.kernel_residual});
        const index_t want = e.system.n * e.system.C;
        o.values[e.label] = {{"residual", r}, {"min_angle", h.min_angle}, {"kernel_dim", h.kernel_dim},
                             {"expected_kernel_dim", want}};
        worst = std::max(worst, r);
        o.pass = o.pass && h.kernel_dim == want;
    }
    o.value = worst;
    o.pass = o.pass && worst <= tol;
    return o;
}

inline CheckOutcome ggb(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        const auto r = ggb_ratio(e.system, 50, ctx.config.seed);
        o.values[e.label] = {{"min_ratio", r.min_ratio}, {"max_ratio", r.max_ratio}};
        worst = std::max(worst, r.max_ratio);
        o.pass = o.pass && r.min_ratio >= 1.0 - 1e-12;
    }
    o.value = worst;
    o.pass = o.pass && worst <= tol;
    return o;
}

inline CheckOutcome off_diagonal(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = -std::numeric_limits<real>::infinity();
    report::Table table{{"system", "family", "t", "rho", "norm", "full_norm"}, {}};
    std::vector<report::Series> series;
    for (size_t s = 0; s < ctx.systems.size(); ++s) {
        const auto& e = ctx.systems[s];
        const auto scan = off_diagonal_scan(e.system, ctx.space, ctx.cubes, {0.1, 0.2, 0.4}, 30, ctx.config.seed);
        json row;
        for (Family f : all_families) {
            const auto& fit = scan.fit(f);
            row[to_string(f)] = {{"slope", fit.slope}, {"r2", fit.r2}, {"points", fit.points}};
            worst = std::max(worst, fit.slope);
            o.pass = o.pass && fit.slope <= -tol && fit.r2 >= 0.9;
        }
        row["pairs"] = scan.pairs;
        o.values[e.label] = row;
        for (const auto& smp : scan.samples) {
            table.rows.push_back({real(s), real(static_cast<int>(smp.family)), smp.t, smp.rho, smp.norm, smp.full_norm});
            if (s == 0 && smp.family == Family::R && smp.norm > 0) {
                if (series.empty()) series.push_back({"R, " + e.label, {}, {}});
                series[0].x.push_back(smp.rho / smp.t);
                series[0].y.push_back(smp.norm / smp.full_norm);
            }
        }
    }
    o.artifacts.push_back(detail::write_artifact(ctx, "off_diagonal.csv", table.csv()));
    o.artifacts.push_back(detail::write_artifact(
        ctx, "off_diagonal.svg",
        report::line_chart("Off-diagonal decay", "rho(E,F)/t", "||1_E R_t 1_F|| / ||R_t||", series, false, true, true)));
    o.value = worst;
    return o;
}

inline CheckOutcome uniform_bounds(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        const auto a = uniform_bound_scan(e.system, e.grid);
        const auto b = uniform_bound_scan(e.system, refine(e.grid));
        json row;
        for (Family f : all_families) {
            const real change = detail::relative_change(a.get(f), b.get(f));
            row[to_string(f)] = {{"sup", a.get(f)}, {"refined_sup", b.get(f)}, {"refinement_change", change}};
            o.pass = o.pass && std::isfinite(a.get(f)) && a.get(f) < 100 && change <= 0.05;
        }
        if (e.self_adjoint) {
            const real dev = std::max(std::abs(a.get(Family::P) - 1.0), std::abs(a.get(Family::Q) - 0.5));
            worst = std::max(worst, dev);
            o.pass = o.pass && dev <= tol;
        }
        const real theta = 0.5 * (e.system.omega + pi / 2);
        const auto sb = sector_resolvent_bound(e.system, theta, 50, &e.grid);
        row["sector"] = {{"theta", theta}, {"C_theta", finite_or_null(sb.value)}, {"samples", sb.samples}};
        o.pass = o.pass && std::isfinite(sb.value);
        o.values[e.label] = row;
    }
    o.value = worst;
    return o;
}

inline CheckOutcome quadratic_estimate(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = 0.0;
    report::Series curve{"||Q_t u||^2 / ||u||^2", {}, {}};
    for (size_t s = 0; s < ctx.systems.size(); ++s) {
        const auto& e = ctx.systems[s];
        std::mt19937_64 rng(ctx.config.seed);
        const MatC u = project_to_range(e.system, kato::detail::random_gaussian(e.system.size(), 10, rng));
        const auto vals = quadratic_functional_batch(e.system, u, e.grid);
        real lo = std::numeric_limits<real>::infinity(), hi = 0.0, tail = 0.0;
        for (size_t j = 0; j < vals.size(); ++j) {
            const real n2 = u.col(static_cast<index_t>(j)).squaredNorm();
            lo = std::min(lo, vals[j].value / n2);
            hi = std::max(hi, vals[j].value / n2);
            tail = std::max(tail, vals[j].tail_bound / vals[j].value);
        }
        o.values[e.label] = {{"min_ratio", lo}, {"max_ratio", hi}, {"max_tail_fraction", tail}};
        o.pass = o.pass && lo > 0 && std::isfinite(hi) && tail <= 0.1;
        if (e.self_adjoint) {
            const real dev = std::max(std::abs(lo - 0.5), std::abs(hi - 0.5)) / 0.5;
            worst = std::max(worst, dev);
            o.pass = o.pass && dev <= tol;
        } else {
            worst = std::max(worst, hi / lo);
        }
        if (s == 0) {
            const VecC u0 = u.col(0);
            for (index_t i = 0; i < e.grid.nodes.size(); ++i) {
                const ResolventOperators ops(e.system, e.grid.nodes[i]);
                curve.x.push_back(e.grid.nodes[i]);
                curve.y.push_back(ops.apply(Family::Q, u0).squaredNorm() / u0.squaredNorm());
            }
        }
    }
    report::Table t{{"t", "integrand"}, {}};
    for (size_t i = 0; i < curve.x.size(); ++i) t.rows.push_back({curve.x[i], curve.y[i]});
    o.artifacts.push_back(detail::write_artifact(ctx, "quadratic_integrand.csv", t.csv()));
    o.artifacts.push_back(detail::write_artifact(
        ctx, "quadratic_integrand.svg", report::line_chart("Quadratic-functional integrand", "t", "||Q_t u||^2/||u||^2", {curve}, true, false)));
    o.value = worst;
    if (ctx.systems.size() && !ctx.systems[0].self_adjoint) o.notes.push_back("value = max/min ratio (perturbed draws)");
    return o;
}

inline CheckOutcome calculus_crosscheck(const Context& ctx, real tol) {
    CheckOutcome o;
    o.pass = true;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        json row;
        for (const auto& f : {sign_function(), sqrt_of_square_function(), resolvent_composite_function(1.0)}) {
            const auto r = holomorphic_calculus(e.system, f, CalculusMethod::both);
            row[f.name] = {{"cross_check", r.cross_check}, {"method", to_string(r.method)},
                           {"eigen_condition", finite_or_null(r.eigen_condition)}};
            if (!r.condition_notes.empty()) o.notes.push_back(e.label + " " + f.name + ": " + r.condition_notes);
            if (r.cross_check < 0) o.pass = false;
            worst = std::max(worst, r.cross_check);
        }
        o.values[e.label] = row;
    }
    o.value = worst;
    o.pass = o.pass && worst <= tol;
    return o;
}

inline CheckOutcome sqrt_consistency(const Context& ctx, real tol) {
    CheckOutcome o;
    real worst = 0.0;
    for (const auto& e : ctx.systems) {
        const MatC ab = holomorphic_calculus(e.system, sqrt_of_square_function()).operator_matrix;
        const MatC sg = holomorphic_calculus(e.system, sign_function()).operator_matrix;
        const MatC L = dense(e.system.Lh);
        const MatC top = ab.topLeftCorner(e.system.V, e.system.V);
        const real sq = (top * top - L).cwiseAbs().maxCoeff() / L.cwiseAbs().maxCoeff();
        std::mt19937_64 rng(ctx.config.seed);
        const MatC u = project_to_range(e.system, kato::detail::random_gaussian(e.system.size(), 4, rng));
        const MatC pb = e.system.pi_b_hat() * u;
        const real hom = (sg * (ab * u) - pb).cwiseAbs().maxCoeff() / pb.cwiseAbs().maxCoeff();
        o.values[e.label] = {{"square_residual", sq}, {"sign_times_sqrt_residual", hom}};
        worst = std::max({worst, sq, hom});
    }
    o.value = worst;
    o.pass = worst <= tol;
    return o;
}

inline CheckOutcome kato_identity(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto kr = kato_square_root(ctx.mesh, identity_coefficients(ctx.mesh), {CalculusMethod::automatic, 0, 0, ctx.config.seed});
    std::mt19937_64 rng(ctx.config.seed);
    real worst = 0.0;
    const VecR Mv = ctx.mesh.vertex_measure();
    for (int i = 0; i < 20; ++i) {
        const VecC u = kato::detail::random_gaussian(ctx.mesh.num_vertices(), 1, rng);
        const real lhs = (kr.sqrtL * to_unitary(u, Mv)).squaredNorm();
        const real rhs = std::pow(sobolev_norm(ctx.mesh, u), 2);
        worst = std::max(worst, std::abs(lhs - rhs) / rhs);
    }
    o.values = {{"max_relative_error", worst}, {"trials", 20}, {"square_residual", kr.square_residual}};
    o.notes.push_back("evaluated with a = 1, A = I on the scenario mesh");
    o.value = worst;
    o.pass = worst <= tol;
    return o;
}

inline CheckOutcome kato_equivalence(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto& cc = ctx.config.coefficients;
    const auto b = detail::kato_bracket(ctx.mesh, cc, ctx.config.seed);
    const real C = std::max(b.hi, 1.0 / b.lo);
    o.values = {{"bracket_min", b.lo}, {"bracket_max", b.hi}, {"C", finite_or_null(C)}, {"ratios", b.ratios.size()},
                {"max_square_residual", b.max_square_residual}};
    o.value = C;
    o.pass = std::isfinite(C) && C < tol && b.max_square_residual <= 1e-8;
    if (const auto fine = refined_curve(ctx.config.mesh)) {
        const auto mesh2 = generate_mesh(*fine);
        const auto b2 = detail::kato_bracket(mesh2, cc, ctx.config.seed);
        const real change = std::max(detail::relative_change(b.lo, b2.lo), detail::relative_change(b.hi, b2.hi));
        o.values["refined_bracket_min"] = b2.lo;
        o.values["refined_bracket_max"] = b2.hi;
        o.values["refinement_change"] = change;
        o.pass = o.pass && change < 0.25;
    } else {
        o.notes.push_back("refinement stability evaluated for curves only");
    }
    o.artifacts.push_back(detail::write_artifact(ctx, "kato_ratios.svg",
                                                 report::histogram("Kato ratios ||sqrt(L)u|| / ||u||_W12", "ratio", b.ratios)));
    report::Table t{{"ratio"}, {}};
    for (real r : b.ratios) t.rows.push_back({r});
    o.artifacts.push_back(detail::write_artifact(ctx, "kato_ratios.csv", t.csv()));
    return o;
}

/// First system's diagnostics; shared by the five diagnostic checks.
inline const detail::Diagnostics& first_diagnostics(const Context& ctx) {
    static std::mutex mu;
    static std::map<const Context*, detail::Diagnostics> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(&ctx);
    if (it == cache.end()) {
        const auto& e = ctx.systems.front();
        it = cache.emplace(&ctx, detail::compute_diagnostics(ctx.mesh, ctx.space, ctx.cubes, ctx.growth, e.system, e.grid,
                                                             ctx.config.seed))
                 .first;
    }
    return it->second;
}

inline CheckOutcome weighted_poincare(const Context& ctx, real) {
    CheckOutcome o;
    const auto& d = first_diagnostics(ctx);
    o.values = {{"ratio", finite_or_null(d.poincare)}, {"t", 0.25}};
    if (d.poincare_warning) o.notes.push_back("exponent preconditions M > kappa+3, m >= a lambda not met");
    o.value = d.poincare;
    o.pass = std::isfinite(d.poincare);
    return o;
}

inline CheckOutcome interpolation(const Context& ctx, real) {
    CheckOutcome o;
    const auto& d = first_diagnostics(ctx);
    o.values = {{"max_ratio", finite_or_null(d.interpolation)}};
    o.value = d.interpolation;
    o.pass = std::isfinite(d.interpolation);
    return o;
}

inline CheckOutcome gamma_bound(const Context& ctx, real) {
    CheckOutcome o;
    const auto& e = ctx.systems.front();
    const auto& d = first_diagnostics(ctx);
    // ||gamma_t A_t u|| <= sqrt(max_Q mean |gamma_t|^2) ||u|| on random fields.
    real worst = 0.0;
    std::mt19937_64 rng(ctx.config.seed);
    const auto nodes = diagnostic_nodes(e.grid, ctx.cubes, d.t0);
    for (size_t i = 0; i < nodes.size(); i += std::max<size_t>(1, nodes.size() / 4)) {
        const auto pp = principal_part(e.system, ctx.space, ctx.cubes, nodes[i].first);
        const real c = std::sqrt(pp.max_cube_average());
        for (int k = 0; k < 20; ++k) {
            const MatC u = kato::detail::random_gaussian(e.system.V, e.system.N, rng);
            const MatC au = dyadic_average_level(ctx.cubes, ctx.space, pp.level, u);
            const real lhs = field_norm(ctx.space, apply_gamma(pp, au));
            const real rhs = c * field_norm(ctx.space, u);
            if (rhs > 0) worst = std::max(worst, lhs / rhs);
        }
    }
    o.values = {{"max_cube_average", d.gamma_bound}, {"t0", d.t0}, {"operator_ratio", worst}};
    o.value = d.gamma_bound;
    o.pass = std::isfinite(d.gamma_bound) && worst <= 1.0 + 1e-10;
    return o;
}

inline CheckOutcome gamma_carleson(const Context& ctx, real) {
    CheckOutcome o;
    const auto& d = first_diagnostics(ctx);
    o.values = {{"carleson_norm", finite_or_null(d.gamma_carleson)}, {"t0", d.t0}};
    o.value = d.gamma_carleson;
    o.pass = std::isfinite(d.gamma_carleson);
    return o;
}

inline CheckOutcome reduction_split(const Context& ctx, real) {
    CheckOutcome o;
    const auto& r = first_diagnostics(ctx).reduction;
    const real sum = r.principal + r.remainder + r.carleson;
    o.values = {{"principal", r.principal}, {"remainder", r.remainder}, {"carleson", r.carleson},
                {"direct", r.direct},       {"nodes", r.nodes}};
    o.value = sum;
    o.pass = std::isfinite(sum) && r.direct <= 3 * sum * (1 + 1e-12);
    return o;
}

inline CheckOutcome diagnostics_stability(const Context& ctx, real tol) {
    CheckOutcome o;
    const auto& d = first_diagnostics(ctx);
    const auto coarse = d.values();
    for (const auto& [k, v] : coarse) o.values["coarse"][k] = finite_or_null(v);
    o.pass = detail::all_finite(coarse);
    const auto fine_shape = refined_curve(ctx.config.mesh);
    if (!fine_shape) {
        o.notes.push_back("refinement stability evaluated for curves only");
        o.value = 0.0;
        return o;
    }
    if (ctx.config.coefficients.mode != CoefficientConfig::Mode::identity) {
        o.notes.push_back("random coefficients are redrawn per mesh; refinement stability evaluated for identity coefficients only");
        o.value = 0.0;
        return o;
    }
    const auto mesh2 = generate_mesh(*fine_shape);
    const auto space2 = graph_geodesics(mesh2);
    const auto cubes2 = build_cubes(space2, ctx.config.cubes.delta, ctx.config.cubes.depth, ctx.config.cubes.seed);
    const auto growth2 = fit_growth_profile(space2, 200, ctx.config.seed);
    const auto sys2 = build_systems(mesh2, ctx.config.coefficients, ctx.config.grid);
    const auto d2 = detail::compute_diagnostics(mesh2, space2, cubes2, growth2, sys2.front().system, sys2.front().grid,
                                                ctx.config.seed);
    const auto fine = d2.values();
    real worst = 0.0;
    for (const auto& [k, v] : fine) {
        o.values["refined"][k] = finite_or_null(v);
        const real ch = detail::relative_change(coarse.at(k), v);
        o.values["change"][k] = ch;
        worst = std::max(worst, ch);
    }
    o.value = worst;
    o.pass = o.pass && detail::all_finite(fine) && worst < tol;
    return o;
}

}  // namespace checks

inline const std::vector<CheckSpec>& registry() {
    static const std::vector<CheckSpec> reg = {
        {"geometry", "§3", 0.05, true, "second fundamental form and Laplacian spectrum against closed forms", checks::geometry},
        {"growth-profile", "(E_loc)", 1.0, false, "exponential volume growth constants", checks::growth_profile},
        {"local-poincare", "(P_loc)", 100.0, false, "local Poincare constant on random balls", checks::local_poincare},
        {"christ-cubes", "Prop 4.1", 8.0, true, "dyadic cube properties (1)-(6)", checks::christ_cubes},
        {"carleson-embedding", "Thm 4.3", 20.0, true, "Carleson embedding ratio over constructed measures", checks::carleson_embedding},
        {"structural", "Def 2.1, (H1)-(H3)", 1e-8, true, "nilpotency, adjointness and Hodge residuals", checks::structural},
        {"hypotheses", "(H1)-(H8)", 1e-6, true, "hypothesis suite and the H8 constant on R(Gamma*)", checks::hypotheses},
        {"hodge-decomposition", "Hodge decomposition", 1e-8, false, "Hodge projections and kernel dimension", checks::hodge},
        {"ggb", "eq. GGB", 10.0, false, "(||Gamma u|| + ||Gamma_B* u||) / ||Pi_B u||", checks::ggb},
        {"off-diagonal", "Prop 5.2", 0.5, true, "exponential off-diagonal decay of R, P, Q, Theta", checks::off_diagonal},
        {"uniform-bounds", "eq. UniformEstRQP, eq. KatoSw", 0.01, true, "uniform resolvent bounds and sector bound", checks::uniform_bounds},
        {"quadratic-estimate", "eq. unper.quad.est", 0.02, true, "quadratic functional against ||u||^2", checks::quadratic_estimate},
        {"calculus-crosscheck", "§2 Cauchy integral", 1e-6, false, "eigendecomposition against contour quadrature", checks::calculus_crosscheck},
        {"sqrt-consistency", "Cor. 2.5", 1e-7, false, "sqrt(L)^2 = L and sign * sqrt = Pi_B on the range", checks::sqrt_consistency},
        {"kato-identity", "Thm 1.1 (a=1, A=I)", 1e-8, true, "||sqrt(I+Delta)u||^2 = ||u||^2 + ||grad u||^2", checks::kato_identity},
        {"kato-equivalence", "Thm 1.1", 50.0, true, "Kato ratio bracket and its refinement stability", checks::kato_equivalence},
        {"weighted-poincare", "Lemma 5.4", 1.0, false, "weighted Poincare ratio", checks::weighted_poincare},
        {"interpolation", "Lemma 5.8", 1.0, false, "interpolation inequality ratio", checks::interpolation},
        {"gamma-bound", "eq. gamma.est", 1.0, false, "per-cube bound of |gamma_t|^2", checks::gamma_bound},
        {"gamma-carleson", "eq. Tb0", 1.0, false, "Carleson norm of |gamma_t|^2 dmu dt/t", checks::gamma_carleson},
        {"reduction-split", "eq. red.est.3parts", 1.0, false, "three-term split of the reduced estimate", checks::reduction_split},
        {"diagnostics-stability", "§5 diagnostics", 0.25, true, "diagnostics finite and stable under refinement", checks::diagnostics_stability},
    };
    return reg;
}

inline bool needs_systems(const std::vector<std::string>& ids) {
    static const std::set<std::string> mesh_only{"geometry", "growth-profile", "local-poincare", "christ-cubes",
                                                 "carleson-embedding", "kato-identity", "kato-equivalence"};
    return std::any_of(ids.begin(), ids.end(), [](const std::string& id) { return !mesh_only.count(id); });
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

inline std::string digest(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

struct RunOptions {
    std::string out_dir;          ///< overrides the config's output_dir when non-empty
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    std::vector<std::string> only;  ///< --check filter
};

struct RunResult {
    json report;
    bool pass = true;
    std::vector<std::string> failures;
};

inline RunResult run_scenario(ScenarioConfig cfg, const RunOptions& opt) {
    if (opt.seed) {
        cfg.seed = *opt.seed;
        cfg.source["seed"] = *opt.seed;
    }
    for (const auto& id : opt.only)
        if (!find_check(id)) throw Error(ErrorKind::config, "unknown check id '" + id + "'");
    std::vector<const CheckSpec*> selected;
    for (const auto& spec : registry()) {
        const bool in_cfg = std::find(cfg.checks.begin(), cfg.checks.end(), spec.id) != cfg.checks.end();
        const bool in_filter = opt.only.empty() || std::find(opt.only.begin(), opt.only.end(), spec.id) != opt.only.end();
        if (in_cfg && in_filter) selected.push_back(&spec);
    }
    const std::filesystem::path out_dir = opt.out_dir.empty() ? cfg.output_dir : opt.out_dir;
    std::filesystem::create_directories(out_dir);
    const std::string inputs = digest(cfg.source.dump());
    RunResult res;
    res.report["scenario"] = cfg.name;
    res.report["inputs_digest"] = inputs;
    res.report["checks"] = json::array();
    std::vector<json> rows(selected.size());
    if (!selected.empty()) {
        std::vector<std::string> ids;
        for (auto* s : selected) ids.push_back(s->id);
        const Context ctx = build_context(cfg, out_dir, needs_systems(ids));
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            for (size_t i = next++; i < selected.size(); i = next++) {
                const CheckSpec& spec = *selected[i];
                const real tol = cfg.tolerances.count(spec.id) ? cfg.tolerances.at(spec.id) : spec.tolerance;
                const auto t0 = std::chrono::steady_clock::now();
                CheckOutcome out;
                try {
                    out = spec.run(ctx, tol);
                } catch (const std::exception& e) {
                    out.pass = false;
                    out.value = std::numeric_limits<real>::quiet_NaN();
                    out.notes.push_back(std::string("error: ") + e.what());
                }
                const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
                json row;
                row["check_id"] = spec.id;
                row["paper_anchor"] = spec.anchor;
                row["inputs_digest"] = inputs;
                row["value"] = detail::finite_or_null(out.value);
                row["values"] = out.values;
                row["tolerance"] = tol;
                row["pass"] = out.pass;
                row["runtime_ms"] = ms;
                row["artifacts"] = out.artifacts;
                row["notes"] = out.notes;
                rows[i] = std::move(row);
                log(LogLevel::info, spec.id + ": " + (out.pass ? "PASS" : "FAIL") + " (" + std::to_string(ms) + " ms)");
            }
        };
        const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(selected.size())));
        std::vector<std::thread> pool;
        for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
        worker();
        for (auto& t : pool) t.join();
    }
    size_t passed = 0;
    for (auto& row : rows) {
        if (row["pass"].get<bool>()) ++passed;
        else res.failures.push_back(row["check_id"].get<std::string>());
        res.report["checks"].push_back(std::move(row));
    }
    res.pass = res.failures.empty();
    res.report["summary"] = {{"total", rows.size()}, {"passed", passed}, {"failed", rows.size() - passed}, {"pass", res.pass}};
    report::write_atomic(out_dir / "report.json", res.report.dump(2) + "\n");
    return res;
}

/// One line per check: id, anchor, default tolerance, kind.
inline std::string list_checks() {
    std::ostringstream os;
    for (const auto& c : registry())
        os << c.id << " → " << c.anchor << "  [tolerance " << c.tolerance << ", "
           << (c.acceptance ? "acceptance" : "diagnostic") << "]  " << c.summary << '\n';
    return os.str();
}

inline json mesh_info(const ScenarioConfig& cfg) {
    const auto mesh = build_mesh(cfg.mesh);
    const auto geo = second_fundamental_form(mesh);
    const auto space = graph_geodesics(mesh);
    const auto spec = laplacian_spectrum(mesh);
    const auto& bv = mesh.boundary_vertices();
    const auto boundary = std::count(bv.begin(), bv.end(), true);
    return {{"vertices", mesh.num_vertices()}, {"cells", mesh.num_cells()},     {"intrinsic_dim", mesh.intrinsic_dim()},
            {"ambient_dim", mesh.ambient_dim()}, {"boundary_vertices", boundary}, {"h_sup", geo.h_sup},
            {"H_sup", geo.H_sup},               {"lambda1", first_nonzero_eigenvalue(spec)},
            {"resolution", space.resolution()}, {"diameter", space.diameter()}};
}

inline json cube_info(const ScenarioConfig& cfg) {
    const auto mesh = build_mesh(cfg.mesh);
    const auto space = graph_geodesics(mesh);
    const auto ds = build_cubes(space, cfg.cubes.delta, cfg.cubes.depth, cfg.cubes.seed);
    const auto rep = check_cube_properties(ds, space);
    json levels = json::array();
    for (int k = 0; k <= ds.depth; ++k) levels.push_back(ds.num_cubes(k));
    return {{"delta", ds.delta},
            {"depth", ds.depth},
            {"cubes_per_level", levels},
            {"exact_properties", rep.exact_properties()},
            {"a0", rep.a0},
            {"a1", rep.a1},
            {"eta", rep.boundary.eta},
            {"eta_r2", rep.boundary.r2},
            {"failures", rep.failures}};
}

}  // namespace kato::cli
