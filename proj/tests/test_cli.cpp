#include "kato/cli.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace kato;
using kato::cli::json;
namespace fs = std::filesystem;

namespace {

std::string forge() {
    const char* bin = std::getenv("KATO_FORGE_BIN");
    return bin ? bin : "./kato_forge";
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("kato_cli_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = "KATO_FORGE_LOG=error " + forge() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    char buf[4096];
    while (size_t n = fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path write_config(const fs::path& dir, const json& j) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

json small_circle(const fs::path& out) {
    return {{"name", "small"},
            {"mesh", {{"shape", "circle"}, {"radius", 1.0}, {"points", 32}}},
            {"cubes", {{"delta", 0.5}, {"depth", 3}}},
            {"output_dir", out.string()},
            {"seed", 3}};
}

json strip_runtime(json report) {
    for (auto& row : report["checks"]) row.erase("runtime_ms");
    return report;
}

}  // namespace

TEST_CASE("list-checks names every check with its anchor") {
    const auto r = run("list-checks");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("kato-equivalence → Thm 1.1") != std::string::npos);
    CHECK(r.out.find("carleson-embedding → Thm 4.3") != std::string::npos);
    std::istringstream in(r.out);
    std::string line;
    int lines = 0, acceptance = 0, diagnostic = 0;
    while (std::getline(in, line)) {
        ++lines;
        acceptance += line.find(", acceptance]") != std::string::npos;
        diagnostic += line.find(", diagnostic]") != std::string::npos;
    }
    CHECK(acceptance == 11);
    CHECK(lines == acceptance + diagnostic);
    CHECK(static_cast<size_t>(lines) == cli::registry().size());
    for (const auto& c : cli::registry()) CHECK_FALSE(c.anchor.empty());
}

TEST_CASE("config validation") {
    const auto base = small_circle("unused");

    SECTION("defaults select every check") {
        const auto cfg = cli::parse_config(base);
        CHECK(cfg.checks.size() == cli::registry().size());
        CHECK(cfg.cubes.depth == 3);
        CHECK(cfg.grid.points_per_decade == 16);
    }
    SECTION("unknown check id is named") {
        auto j = base;
        j["checks"] = {"geometry", "no-such-check"};
        try {
            cli::parse_config(j);
            FAIL("expected a config error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::config);
            CHECK(std::string(e.what()).find("no-such-check") != std::string::npos);
        }
    }
    SECTION("malformed fields") {
        auto bad_key = base;
        bad_key["mesh"]["colour"] = "red";
        CHECK_THROWS_AS(cli::parse_config(bad_key), Error);
        auto bad_tol = base;
        bad_tol["tolerances"] = {{"geometry", -1.0}};
        CHECK_THROWS_AS(cli::parse_config(bad_tol), Error);
        auto bad_delta = base;
        bad_delta["cubes"]["delta"] = 1.5;
        CHECK_THROWS_AS(cli::parse_config(bad_delta), Error);
        auto bad_shape = base;
        bad_shape["mesh"]["shape"] = "klein_bottle";
        CHECK_THROWS_AS(cli::parse_config(bad_shape), Error);
        CHECK_THROWS_AS(cli::parse_config(json::array()), Error);
    }
    SECTION("random coefficients") {
        auto j = base;
        j["coefficients"] = {{"mode", "random"}, {"kappa1", 0.4}, {"seeds", {4, 5}}};
        const auto cfg = cli::parse_config(j);
        CHECK(cfg.coefficients.mode == cli::CoefficientConfig::Mode::random);
        CHECK(cfg.coefficients.seeds == std::vector<std::uint64_t>{4, 5});
        CHECK(cfg.coefficients.kappa1 == 0.4);
        CHECK(cfg.coefficients.kappa2 == 0.5);
    }
}

TEST_CASE("digest is FNV-1a") {
    CHECK(cli::digest("") == "cbf29ce484222325");
    CHECK(cli::digest("a") == "af63dc4c8601ec8c");
}

TEST_CASE("exit codes") {
    const auto dir = scratch("exit");

    SECTION("empty check list passes with an empty report") {
        auto j = small_circle(dir / "out");
        j["checks"] = json::array();
        const auto r = run("run --config " + write_config(dir, j).string());
        CHECK(r.code == 0);
        const auto rep = read_json(dir / "out" / "report.json");
        CHECK(rep["checks"].empty());
        CHECK(rep["summary"]["total"] == 0);
        CHECK(rep["summary"]["pass"] == true);
    }
    SECTION("unknown check id is a config error") {
        auto j = small_circle(dir / "out");
        j["checks"] = {"bogus-check"};
        const auto r = run("run --config " + write_config(dir, j).string());
        CHECK(r.code == 2);
        CHECK(r.out.find("bogus-check") != std::string::npos);
    }
    SECTION("unknown --check filter is a config error") {
        const auto r = run("run --config " + write_config(dir, small_circle(dir / "out")).string() + " --check bogus");
        CHECK(r.code == 2);
    }
    SECTION("usage errors") {
        CHECK(run("").code == 2);
        CHECK(run("run").code == 2);
        CHECK(run("frobnicate").code == 2);
        CHECK(run("run --config " + (dir / "missing.json").string()).code == 2);
    }
    SECTION("a failing check exits 1") {
        auto j = small_circle(dir / "out");
        j["checks"] = {"geometry"};
        j["tolerances"] = {{"geometry", 1e-14}};
        const auto r = run("run --config " + write_config(dir, j).string());
        CHECK(r.code == 1);
        const auto rep = read_json(dir / "out" / "report.json");
        CHECK(rep["checks"][0]["pass"] == false);
        CHECK(rep["checks"][0]["tolerance"] == 1e-14);
        CHECK(rep["summary"]["failed"] == 1);
    }
}

TEST_CASE("report rows, determinism and artifacts") {
    const auto dir = scratch("det");
    auto j = small_circle(dir / "a");
    j["checks"] = {"geometry", "christ-cubes", "structural", "off-diagonal", "quadratic-estimate", "kato-equivalence"};
    const auto cfg = write_config(dir, j).string();
    REQUIRE(run("run --config " + cfg).code == 0);
    REQUIRE(run("run --config " + cfg + " --out " + (dir / "b").string() + " --jobs 3").code == 0);
    const auto a = read_json(dir / "a" / "report.json");
    const auto b = read_json(dir / "b" / "report.json");
    CHECK(strip_runtime(a).dump() == strip_runtime(b).dump());

    REQUIRE(a["checks"].size() == 6);
    CHECK(a["summary"]["passed"] == 6);
    for (const auto& row : a["checks"]) {
        for (const char* key : {"check_id", "paper_anchor", "inputs_digest", "value", "values", "tolerance", "pass",
                                "runtime_ms", "artifacts", "notes"})
            CHECK(row.contains(key));
        CHECK(row["inputs_digest"] == a["inputs_digest"]);
        for (const auto& art : row["artifacts"]) CHECK(fs::exists(dir / "a" / art.get<std::string>()));
    }
    CHECK(a["checks"][0]["check_id"] == "geometry");
    CHECK(fs::exists(dir / "a" / "off_diagonal.svg"));
    CHECK(fs::exists(dir / "a" / "quadratic_integrand.csv"));
    CHECK(fs::exists(dir / "a" / "kato_ratios.svg"));

    SECTION("seed override changes the digest") {
        REQUIRE(run("run --config " + cfg + " --out " + (dir / "c").string() + " --seed 9 --check geometry").code == 0);
        const auto c = read_json(dir / "c" / "report.json");
        CHECK(c["inputs_digest"] != a["inputs_digest"]);
        CHECK(c["checks"].size() == 1);
    }
}

TEST_CASE("info subcommands") {
    const auto dir = scratch("info");
    const auto cfg = write_config(dir, small_circle(dir / "out")).string();
    const auto mesh = run("mesh-info --config " + cfg);
    REQUIRE(mesh.code == 0);
    const auto m = json::parse(mesh.out);
    CHECK(m["vertices"] == 32);
    CHECK(m["intrinsic_dim"] == 1);
    CHECK(m["boundary_vertices"] == 0);
    const auto cubes = run("cubes --config " + cfg);
    REQUIRE(cubes.code == 0);
    const auto c = json::parse(cubes.out);
    CHECK(c["exact_properties"] == true);
    CHECK(c["cubes_per_level"].size() == 4);
    CHECK(run("offdiag --config " + cfg + " --out " + (dir / "o").string()).code == 0);
    CHECK(read_json(dir / "o" / "report.json")["checks"][0]["check_id"] == "off-diagonal");
}

TEST_CASE("self-adjoint circle preset passes") {
    const auto dir = scratch("preset");
    const auto r = run("run --config " KATO_SOURCE_DIR "/configs/selfadjoint-circle.json --out " + dir.string() + " --jobs 2");
    INFO(r.out);
    CHECK(r.code == 0);
    const auto rep = read_json(dir / "report.json");
    CHECK(rep["summary"]["total"] == cli::registry().size());
    CHECK(rep["summary"]["pass"] == true);
}
