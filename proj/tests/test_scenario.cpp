#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "spdsim/scenario.hpp"

#include <fstream>
#include <sstream>

using namespace spdsim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json minimal_scenario() {
    return json{{"name", "t"},
                {"horizon", 4},
                {"dt_hours", 1.0},
                {"baseline_total", {1.0, 2.0, 2.0, 1.0}},
                {"fleet", {{"seed", 1}, {"count", 2}}}};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("schema validation rejects malformed scenarios") {
    json j = minimal_scenario();
    CHECK_NOTHROW(parse_scenario(j, "/tmp"));

    j = minimal_scenario();
    j.erase("name");
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["dt_hours"] = 0.0;
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["baseline_total"] = {1.0, 2.0};  // length != horizon
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["valley_window"] = {3, 1};
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);
    j["valley_window"] = {0, 99};
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["attacks"] = {{{"type", "not_a_thing"}, {"attacker", 0}}};
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["log_mode"] = "loud";
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["fleet"] = 17;  // neither path nor {seed, count}
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);

    j = minimal_scenario();
    j["spds"] = {{"tau_c", 0.0}};
    CHECK_THROWS_AS(parse_scenario(j, "/tmp"), ConfigError);
}

TEST_CASE("window defaults to the full horizon") {
    const Scenario s = parse_scenario(minimal_scenario(), "/tmp");
    CHECK(s.window_begin == 0);
    CHECK(s.window_end == 4);
}

TEST_CASE("all bundled scenarios load and build") {
    const std::string dir = SPDSIM_DATA_DIR;
    for (const char* name : {"toy3.json", "valley500.json", "batterydamage50.json",
                             "timetuning.json", "dual_smooth.json", "dual_timetuning.json"}) {
        CAPTURE(name);
        const Scenario s = load_scenario(dir + "/" + name);
        const BuiltScenario b = build_scenario(s);
        CHECK(b.prob.s >= 1);
        CHECK(b.prob.T == s.T);
        for (const auto& a : b.prob.agents) CHECK(a.set.nonempty());
    }
}

TEST_CASE("consistent equality-coupling rhs equals the weighted flat rates") {
    const Scenario s = load_scenario(std::string(SPDSIM_DATA_DIR) + "/toy3.json");
    const BuiltScenario b = build_scenario(s);
    REQUIRE(b.prob.coupling.has_value());
    double level = 0.0;
    for (int i = 0; i < b.prob.s; ++i) {
        const auto& set = b.prob.agents[i].set;
        level += b.prob.coupling->weights[i] * set.eq_rhs / set.eq_coeff.sum();
    }
    CHECK(b.prob.coupling->rhs[0] == doctest::Approx(level).epsilon(1e-12));
    CHECK((b.prob.coupling->rhs.array() == b.prob.coupling->rhs[0]).all());
    // the toy fleet's flat rate is 0.2, weights sum to 1.5 -> level 0.3
    CHECK(level == doctest::Approx(0.3).epsilon(1e-9));
}

TEST_CASE("run artifacts are byte-identical across reruns") {
    const Scenario s = load_scenario(std::string(SPDSIM_DATA_DIR) + "/toy3.json");
    const fs::path d1 = "/tmp/spdsim_test_run_a", d2 = "/tmp/spdsim_test_run_b";
    fs::remove_all(d1);
    fs::remove_all(d2);
    const RunOutcome o1 = run_scenario(s, d1);
    const RunOutcome o2 = run_scenario(s, d2);
    CHECK(o1.converged);
    CHECK(o2.converged);
    for (const char* f : {"trace.csv", "solution.csv", "totals.csv", "metrics.csv",
                          "metrics.json", "solution_attack_free.csv", "scenario.json",
                          "bounds.json", "manifest.json"}) {
        CAPTURE(f);
        CHECK(slurp(d1 / f) == slurp(d2 / f));
    }
}

TEST_CASE("manifest digests cover every sibling artifact") {
    const fs::path dir = "/tmp/spdsim_test_run_a";  // produced by the rerun test
    REQUIRE(fs::exists(dir / "manifest.json"));
    const json manifest = json::parse(slurp(dir / "manifest.json"));
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string f = entry.path().filename().string();
        if (f == "manifest.json") continue;
        CAPTURE(f);
        CHECK(manifest["files"].contains(f));
    }
}

TEST_CASE("self-comparison reports zero deviation") {
    const fs::path dir = "/tmp/spdsim_test_run_a";
    REQUIRE(fs::exists(dir / "solution.csv"));
    const CompareReport rep = compare_runs(dir, dir, "/tmp/spdsim_test_cmp");
    CHECK(rep.max_rel_mean_dev == 0.0);
    CHECK(rep.max_rel_l2_dev == 0.0);
    CHECK(fs::exists("/tmp/spdsim_test_cmp/comparison.json"));
    CHECK(fs::exists("/tmp/spdsim_test_cmp/overlay.csv"));
}

TEST_CASE("verify-bounds refreshes bounds.json from a run directory") {
    const fs::path dir = "/tmp/spdsim_test_run_a";
    REQUIRE(fs::exists(dir / "scenario.json"));
    fs::remove(dir / "bounds.json");
    const json bj = verify_bounds(dir);
    CHECK(fs::exists(dir / "bounds.json"));
    CHECK(bj.contains("B"));
    CHECK(bj["eq13_ok"].get<bool>());
    CHECK(bj["eq14_ok"].get<bool>());
    CHECK(bj["eq15_ok"].get<bool>());
}

TEST_CASE("verify-bounds rejects an attack-free run directory") {
    const Scenario s = load_scenario(std::string(SPDSIM_DATA_DIR) + "/valley500.json");
    REQUIRE(s.attacks.empty());
    const fs::path dir = "/tmp/spdsim_test_noattack";
    fs::create_directories(dir);
    std::ofstream(dir / "scenario.json") << s.raw.dump(2);
    CHECK_THROWS_AS(verify_bounds(dir), ConfigError);
}

TEST_CASE("scenario copy in a run directory is self-describing") {
    const fs::path dir = "/tmp/spdsim_test_run_a";
    const json sj = json::parse(slurp(dir / "scenario.json"));
    // fleet path was resolved to an absolute location at parse time
    CHECK(fs::path(sj["fleet"].get<std::string>()).is_absolute());
    const Scenario reparsed = parse_scenario(sj, dir);
    CHECK_NOTHROW(build_scenario(reparsed));
}
