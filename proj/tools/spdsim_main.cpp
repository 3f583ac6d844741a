// spdsim command-line front end.
//
// Verbs:
//   run <scenario.json> [--out DIR] [--dry-run]
//   compare <dirA> <dirB> [--out DIR]
//   verify-bounds <run-dir>
//   gen-fleet --seed S --count N [--buses B] [--horizon T] [--dt H] [--out FILE]
//   validate <scenario.json>
//
// Output root defaults to $SPDSIM_OUT (or ./runs).  Exit codes: 0 success,
// 2 validation error, 3 infeasible instance, 4 non-convergence.

#include "spdsim/scenario.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitNonConvergence = 4;

std::string output_root() {
    if (const char* env = std::getenv("SPDSIM_OUT")) return env;
    return "runs";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distributed EV-charging valley-filling simulator with attack injection"};
    app.require_subcommand(1);

    std::string scenario_path, dir_a, dir_b, out_dir, fleet_out = "fleet.csv";
    bool dry_run = false;
    std::uint64_t gen_seed = 0;
    int gen_count = 0, gen_buses = 13, gen_T = 48;
    double gen_dt = 0.25;

    auto* run = app.add_subcommand("run", "Run a scenario and emit artifacts");
    run->add_option("scenario", scenario_path, "Scenario JSON file")->required();
    run->add_option("--out", out_dir, "Run output directory (default: <root>/<name>)");
    run->add_flag("--dry-run", dry_run, "Validate and assemble without solving");

    auto* cmp = app.add_subcommand("compare", "Compare two run directories");
    cmp->add_option("dirA", dir_a, "First run directory")->required();
    cmp->add_option("dirB", dir_b, "Second (reference) run directory")->required();
    cmp->add_option("--out", out_dir, "Where to write comparison.json/overlay.csv");

    auto* vb = app.add_subcommand("verify-bounds", "Re-derive deviation bounds for a run");
    vb->add_option("dir", dir_a, "Run directory containing scenario.json")->required();

    auto* gf = app.add_subcommand("gen-fleet", "Generate a seeded fleet CSV");
    gf->add_option("--seed", gen_seed, "RNG seed")->required();
    gf->add_option("--count", gen_count, "Number of EVs")->required();
    gf->add_option("--buses", gen_buses, "Bus count for placement");
    gf->add_option("--horizon", gen_T, "Horizon length used for feasibility margin");
    gf->add_option("--dt", gen_dt, "Slot length in hours");
    gf->add_option("--out", fleet_out, "Output CSV path");

    auto* val = app.add_subcommand("validate", "Validate a scenario file");
    val->add_option("scenario", scenario_path, "Scenario JSON file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            const spdsim::Scenario s = spdsim::load_scenario(scenario_path);
            if (dry_run) {
                spdsim::build_scenario(s);  // full assembly, no solve
                std::cout << "ok: scenario '" << s.name << "' validates and assembles\n";
                return kExitOk;
            }
            const auto dir = out_dir.empty()
                                 ? std::filesystem::path(output_root()) / s.name
                                 : std::filesystem::path(out_dir);
            const spdsim::RunOutcome outcome = spdsim::run_scenario(s, dir);
            std::cout << "run '" << s.name << "' -> " << dir.string()
                      << (outcome.converged ? " (converged)" : " (NOT converged)") << '\n';
            return outcome.converged ? kExitOk : kExitNonConvergence;
        }
        if (cmp->parsed()) {
            const auto rep = spdsim::compare_runs(dir_a, dir_b,
                                                  out_dir.empty() ? std::filesystem::path{}
                                                                  : std::filesystem::path(out_dir));
            std::cout << rep.to_json().dump(2) << '\n';
            return kExitOk;
        }
        if (vb->parsed()) {
            std::cout << spdsim::verify_bounds(dir_a).dump(2) << '\n';
            return kExitOk;
        }
        if (gf->parsed()) {
            const auto fleet = spdsim::generate_fleet(gen_seed, gen_count, gen_buses, gen_T, gen_dt);
            spdsim::save_fleet(fleet_out, fleet);
            std::cout << "wrote " << fleet.size() << " EVs to " << fleet_out << '\n';
            return kExitOk;
        }
        if (val->parsed()) {
            const spdsim::Scenario s = spdsim::load_scenario(scenario_path);
            spdsim::build_scenario(s);
            std::cout << "ok: scenario '" << s.name << "' validates\n";
            return kExitOk;
        }
    } catch (const spdsim::InfeasibleError& e) {
        std::cerr << "infeasible: " << e.what() << '\n';
        return kExitInfeasible;
    } catch (const spdsim::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    return kExitValidation;
}
