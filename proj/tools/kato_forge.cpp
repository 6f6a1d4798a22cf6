// kato_forge: runs verification scenarios and writes report.json plus artifacts.

#include "kato/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace kato;
using kato::cli::json;

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kato_forge: numerical checks for square roots of perturbed Dirac-type operators"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::vector<std::string> only;

    auto* run = app.add_subcommand("run", "run the checks listed in a scenario config");
    run->add_option("--config", config_path, "scenario JSON")->required();
    run->add_option("--out", out_dir, "output directory (overrides output_dir)");
    auto* seed_opt = run->add_option("--seed", seed, "override the scenario seed");
    run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    run->add_option("--check", only, "restrict to these check ids (repeatable)");

    app.add_subcommand("list-checks", "print the check registry");

    std::string info_config;
    auto* mesh_info = app.add_subcommand("mesh-info", "mesh statistics for a scenario");
    mesh_info->add_option("--config", info_config, "scenario JSON")->required();

    auto* cubes = app.add_subcommand("cubes", "dyadic cube statistics for a scenario");
    cubes->add_option("--config", info_config, "scenario JSON")->required();

    std::string single_config, single_out;
    auto* offdiag = app.add_subcommand("offdiag", "run the off-diagonal check alone");
    offdiag->add_option("--config", single_config, "scenario JSON")->required();
    offdiag->add_option("--out", single_out, "output directory");

    auto* kato_cmd = app.add_subcommand("kato", "run the Kato identity and equivalence checks");
    kato_cmd->add_option("--config", single_config, "scenario JSON")->required();
    kato_cmd->add_option("--out", single_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("list-checks")) {
            std::cout << cli::list_checks();
            return 0;
        }
        if (app.got_subcommand("mesh-info")) {
            print_json(cli::mesh_info(cli::load_config(info_config)));
            return 0;
        }
        if (app.got_subcommand("cubes")) {
            const json info = cli::cube_info(cli::load_config(info_config));
            print_json(info);
            return info["exact_properties"].get<bool>() ? 0 : 1;
        }
        cli::RunOptions opt;
        std::string path;
        if (app.got_subcommand("run")) {
            path = config_path;
            opt.out_dir = out_dir;
            if (*seed_opt) opt.seed = seed;
            opt.jobs = jobs;
            opt.only = only;
        } else {
            path = single_config;
            opt.out_dir = single_out;
            if (app.got_subcommand("offdiag")) opt.only = {"off-diagonal"};
            else opt.only = {"kato-identity", "kato-equivalence"};
        }
        const auto cfg = cli::load_config(path);
        const auto res = cli::run_scenario(cfg, opt);
        const auto& s = res.report["summary"];
        std::cout << cfg.name << ": " << s["passed"] << "/" << s["total"] << " checks passed\n";
        for (const auto& f : res.failures) std::cout << "  FAIL " << f << '\n';
        return res.pass ? 0 : 1;
    } catch (const Error& e) {
        cli::log(cli::LogLevel::error, e.what());
        return e.kind() == ErrorKind::config || e.kind() == ErrorKind::io || e.kind() == ErrorKind::parse ? 2 : 1;
    } catch (const std::exception& e) {
        cli::log(cli::LogLevel::error, e.what());
        return 1;
    }
}
