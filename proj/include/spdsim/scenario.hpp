#pragma once

// Scenario ingestion and run orchestration: JSON scenario files -> assembled
// problems -> solver runs -> deterministic CSV/JSON artifacts with a digest
// manifest.  Everything here is plumbing around the core modules.

#include "spdsim/analysis.hpp"
#include "spdsim/attacks.hpp"
#include "spdsim/spds.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace spdsim {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- Scenario schema ------------------------------------------------------

struct FleetSource {
    std::string path;  // CSV path; empty when generated
    std::uint64_t seed = 0;
    int count = 0;
};

struct CouplingRequest {
    std::vector<double> weights;  // one per agent
    std::vector<double> rhs;      // empty => derive a consistent constant rhs
};

struct Scenario {
    std::string name;
    std::uint64_t seed = 0;
    int T = 0;
    double dt = 0.0;
    double delta = 0.0;
    std::string network_path;   // empty => no voltage coupling
    std::string baseline_path;  // required with a network
    FleetSource fleet;
    std::vector<double> baseline_total;  // no-network case; defaults to zeros
    int window_begin = 0, window_end = 0;  // 0-based [begin, end); 0,0 => full horizon
    SpdsConfig spds;
    std::vector<AttackSpec> attacks;
    std::optional<CouplingRequest> coupling;
    bool emit_bounds_set = false;
    bool emit_bounds = false;  // default: delta > 0 and attacks present
    LogMode log_mode = LogMode::Off;
    bool attack_free_reference = true;  // also run attack-free when attacked
    json raw;  // resolved copy persisted into the run directory
};

namespace detail {

[[noreturn]] inline void schema_error(const std::string& where, const std::string& what) {
    throw ConfigError("scenario: field '" + where + "': " + what);
}

template <typename T>
T require(const json& j, const std::string& key) {
    if (!j.contains(key)) schema_error(key, "missing");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        schema_error(key, e.what());
    }
}

inline GoalDescriptor parse_goal(const json& j) {
    GoalDescriptor g;
    const std::string kind = require<std::string>(j, "kind");
    if (kind == "smooth") {
        g.kind = GoalDescriptor::Kind::Smooth;
    } else if (kind == "time_tuning") {
        g.kind = GoalDescriptor::Kind::TimeTuning;
        g.theta = require<std::vector<int>>(j, "theta");
        g.m = j.value("m", 0.2);
        g.M = j.value("M", 1e5);
    } else {
        schema_error("goal.kind", "expected 'smooth' or 'time_tuning', got '" + kind + "'");
    }
    return g;
}

inline AttackSpec parse_attack(const json& j) {
    const std::string type = require<std::string>(j, "type");
    if (type == "smooth_charging") {
        SmoothChargingSpec a;
        a.attacker = require<int>(j, "attacker");
        a.omega = j.value("omega", 1.0);
        return a;
    }
    if (type == "time_tuning") {
        TimeTuningSpec a;
        a.attacker = require<int>(j, "attacker");
        a.omega = j.value("omega", 1.0);
        a.theta = require<std::vector<int>>(j, "theta");
        a.m = j.value("m", 0.2);
        a.M = j.value("M", 1e5);
        return a;
    }
    if (type == "battery_damage") {
        BatteryDamageSpec a;
        a.victims = require<std::vector<int>>(j, "victims");
        a.omega = j.value("omega", 1.0);
        a.t_f = j.value("t_f", 2);
        a.m = j.value("m", 0.2);
        a.M = j.value("M", 1e5);
        return a;
    }
    if (type == "stealthy") {
        StealthySpec a;
        a.eps_s = require<double>(j, "eps_s");
        if (!j.contains("inner")) schema_error("inner", "missing");
        a.inner = std::make_shared<AttackSpec>(parse_attack(j.at("inner")));
        return a;
    }
    if (type == "dual_full") {
        DualFullSpec a;
        a.attacker = require<int>(j, "attacker");
        a.omega = j.value("omega", 1.0);
        a.goal = j.contains("goal") ? parse_goal(j.at("goal")) : GoalDescriptor{};
        return a;
    }
    if (type == "dual_power_balance") {
        DualPowerBalanceSpec a;
        a.attacker = require<int>(j, "attacker");
        a.victims = require<std::vector<int>>(j, "victims");
        a.omega = j.value("omega", 1.0);
        a.eps_s = j.value("eps_s", std::numeric_limits<double>::infinity());
        a.goal = j.contains("goal") ? parse_goal(j.at("goal")) : GoalDescriptor{};
        return a;
    }
    schema_error("attacks[].type", "unknown attack type '" + type + "'");
}

inline json attack_to_json(const AttackSpec& spec);

inline json goal_to_json(const GoalDescriptor& g) {
    json j;
    j["kind"] = g.kind == GoalDescriptor::Kind::Smooth ? "smooth" : "time_tuning";
    if (g.kind == GoalDescriptor::Kind::TimeTuning) {
        j["theta"] = g.theta;
        j["m"] = g.m;
        j["M"] = g.M;
    }
    return j;
}

inline json attack_to_json(const AttackSpec& spec) {
    json j;
    std::visit(
        [&](const auto& a) {
            using A = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<A, SmoothChargingSpec>) {
                j = {{"type", "smooth_charging"}, {"attacker", a.attacker}, {"omega", a.omega}};
            } else if constexpr (std::is_same_v<A, TimeTuningSpec>) {
                j = {{"type", "time_tuning"}, {"attacker", a.attacker}, {"omega", a.omega},
                     {"theta", a.theta}, {"m", a.m}, {"M", a.M}};
            } else if constexpr (std::is_same_v<A, BatteryDamageSpec>) {
                j = {{"type", "battery_damage"}, {"victims", a.victims}, {"omega", a.omega},
                     {"t_f", a.t_f}, {"m", a.m}, {"M", a.M}};
            } else if constexpr (std::is_same_v<A, StealthySpec>) {
                j = {{"type", "stealthy"}, {"eps_s", a.eps_s}};
                if (a.inner) j["inner"] = attack_to_json(*a.inner);
            } else if constexpr (std::is_same_v<A, DualFullSpec>) {
                j = {{"type", "dual_full"}, {"attacker", a.attacker}, {"omega", a.omega},
                     {"goal", goal_to_json(a.goal)}};
            } else {
                j = {{"type", "dual_power_balance"}, {"attacker", a.attacker},
                     {"victims", a.victims}, {"omega", a.omega}, {"goal", goal_to_json(a.goal)}};
                if (std::isfinite(a.eps_s)) j["eps_s"] = a.eps_s;
            }
        },
        spec);
    return j;
}

}  // namespace detail

inline Scenario parse_scenario(const json& j, const fs::path& base_dir) {
    Scenario s;
    s.name = detail::require<std::string>(j, "name");
    s.seed = j.value("seed", std::uint64_t{0});
    s.T = detail::require<int>(j, "horizon");
    s.dt = detail::require<double>(j, "dt_hours");
    if (s.T < 1) detail::schema_error("horizon", "must be >= 1");
    if (s.dt <= 0.0) detail::schema_error("dt_hours", "must be positive");
    s.delta = j.value("delta", 0.0);
    if (s.delta < 0.0) detail::schema_error("delta", "must be nonnegative");

    auto resolve = [&](const std::string& p) {
        fs::path path(p);
        if (!path.is_absolute()) path = fs::absolute(base_dir / path);
        return path.lexically_normal().string();
    };
    if (j.contains("network")) {
        s.network_path = resolve(detail::require<std::string>(j, "network"));
        s.baseline_path = resolve(detail::require<std::string>(j, "baseline"));
    } else if (j.contains("baseline_total")) {
        s.baseline_total = detail::require<std::vector<double>>(j, "baseline_total");
        if (static_cast<int>(s.baseline_total.size()) != s.T)
            detail::schema_error("baseline_total", "length must equal horizon");
    }

    if (!j.contains("fleet")) detail::schema_error("fleet", "missing");
    const json& fj = j.at("fleet");
    if (fj.is_string()) {
        s.fleet.path = resolve(fj.get<std::string>());
    } else if (fj.is_object()) {
        s.fleet.seed = detail::require<std::uint64_t>(fj, "seed");
        s.fleet.count = detail::require<int>(fj, "count");
        if (s.fleet.count < 1) detail::schema_error("fleet.count", "must be >= 1");
    } else {
        detail::schema_error("fleet", "expected a CSV path or {seed, count}");
    }

    if (j.contains("valley_window")) {
        const auto w = detail::require<std::vector<int>>(j, "valley_window");
        if (w.size() != 2 || w[0] < 0 || w[1] > s.T || w[0] >= w[1])
            detail::schema_error("valley_window", "expected [begin, end) with 0 <= begin < end <= horizon");
        s.window_begin = w[0];
        s.window_end = w[1];
    } else {
        s.window_begin = 0;
        s.window_end = s.T;
    }

    if (j.contains("spds")) {
        const json& sj = j.at("spds");
        s.spds.tau_c = sj.value("tau_c", s.spds.tau_c);
        s.spds.tau_mu = sj.value("tau_mu", s.spds.tau_mu);
        s.spds.alpha0 = sj.value("alpha0", s.spds.alpha0);
        s.spds.alpha_decay = sj.value("alpha_decay", s.spds.alpha_decay);
        s.spds.beta0 = sj.value("beta0", s.spds.beta0);
        s.spds.beta_decay = sj.value("beta_decay", s.spds.beta_decay);
        s.spds.eps = sj.value("eps", s.spds.eps);
        s.spds.max_iter = sj.value("max_iter", s.spds.max_iter);
        s.spds.mu_max = sj.value("mu_max", s.spds.mu_max);
        s.spds.lambda_max = sj.value("lambda_max", s.spds.lambda_max);
        s.spds.validate();
    }

    if (j.contains("attacks"))
        for (const auto& aj : j.at("attacks")) s.attacks.push_back(detail::parse_attack(aj));

    if (j.contains("equality_coupling")) {
        const json& cj = j.at("equality_coupling");
        CouplingRequest req;
        req.weights = detail::require<std::vector<double>>(cj, "weights");
        if (cj.contains("rhs") && !cj.at("rhs").is_string())
            req.rhs = detail::require<std::vector<double>>(cj, "rhs");
        s.coupling = std::move(req);
    }

    if (j.contains("emit_bounds")) {
        s.emit_bounds_set = true;
        s.emit_bounds = detail::require<bool>(j, "emit_bounds");
    }
    const std::string lm = j.value("log_mode", std::string("off"));
    if (lm == "off") s.log_mode = LogMode::Off;
    else if (lm == "digests") s.log_mode = LogMode::Digests;
    else if (lm == "payloads") s.log_mode = LogMode::Payloads;
    else detail::schema_error("log_mode", "expected off|digests|payloads");
    s.attack_free_reference = j.value("attack_free_reference", true);

    // persist the resolved form so a run directory is self-describing
    s.raw = j;
    if (!s.network_path.empty()) {
        s.raw["network"] = s.network_path;
        s.raw["baseline"] = s.baseline_path;
    }
    if (!s.fleet.path.empty()) s.raw["fleet"] = s.fleet.path;
    return s;
}

inline Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("scenario: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("scenario: " + path + ": " + e.what());
    }
    return parse_scenario(j, fs::path(path).parent_path());
}

// ---- Assembly -------------------------------------------------------------

struct BuiltScenario {
    ValleyFillingProblem prob;
    std::vector<EvSpec> fleet;
    std::optional<DistributionNetwork> net;
    std::optional<InjectionModel> inj;
};

inline BuiltScenario build_scenario(const Scenario& s) {
    BuiltScenario b;
    if (!s.fleet.path.empty()) {
        b.fleet = load_fleet(s.fleet.path, s.dt);
    } else {
        int n_buses = 1;
        if (!s.network_path.empty()) n_buses = load_network(s.network_path).n;
        b.fleet = generate_fleet(s.fleet.seed, s.fleet.count, n_buses, s.T, s.dt);
    }
    if (b.fleet.empty()) throw ConfigError("scenario: empty fleet");

    if (!s.network_path.empty()) {
        b.net = load_network(s.network_path);
        BaselineProfile base = load_baseline(s.baseline_path, b.net->n);
        if (base.horizon() != s.T)
            throw ConfigError("scenario: baseline horizon " + std::to_string(base.horizon()) +
                              " does not match declared horizon " + std::to_string(s.T));
        b.inj = build_injection_model(*b.net, b.fleet, base);
        b.prob = assemble_problem(*b.net, *b.inj, b.fleet, base, s.delta);
    } else {
        ValleyFillingProblem prob;
        prob.n = 0;
        prob.s = static_cast<int>(b.fleet.size());
        prob.T = s.T;
        prob.delta = s.delta;
        prob.voltage_coupling = false;
        prob.P_b = Vec::Zero(s.T);
        for (int t = 0; t < s.T && t < static_cast<int>(s.baseline_total.size()); ++t)
            prob.P_b[t] = s.baseline_total[t];
        prob.D = Mat();
        prob.Ycal_b = Vec();
        for (const auto& ev : b.fleet) prob.agents.push_back({ev, make_feasible_set(ev, s.T)});
        b.prob = prob;
    }

    if (s.coupling) {
        if (static_cast<int>(s.coupling->weights.size()) != b.prob.s)
            throw ConfigError("scenario: equality_coupling.weights must list one weight per agent");
        EqualityCoupling c;
        c.weights = Vec(b.prob.s);
        for (int i = 0; i < b.prob.s; ++i) c.weights[i] = s.coupling->weights[i];
        if (!s.coupling->rhs.empty()) {
            if (static_cast<int>(s.coupling->rhs.size()) != s.T)
                throw ConfigError("scenario: equality_coupling.rhs must have horizon length");
            c.rhs = Vec(s.T);
            for (int t = 0; t < s.T; ++t) c.rhs[t] = s.coupling->rhs[t];
        } else {
            // consistent constant rhs: each agent charging at its flat feasible rate
            double level = 0.0;
            for (int i = 0; i < b.prob.s; ++i) {
                const auto& set = b.prob.agents[i].set;
                level += c.weights[i] * set.eq_rhs / (set.eq_coeff.sum());
            }
            c.rhs = Vec::Constant(s.T, level);
        }
        b.prob.coupling = std::move(c);
    }
    return b;
}

// ---- Artifact emission ----------------------------------------------------

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("run: cannot write " + p.string());
    out << text;
}

inline std::uint64_t file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

inline void write_solution_csv(const fs::path& p, const ValleyFillingProblem& prob, const Vec& C) {
    std::ostringstream out;
    out << "agent";
    for (int t = 0; t < prob.T; ++t) out << ",t" << t;
    out << '\n';
    for (int i = 0; i < prob.s; ++i) {
        out << i;
        const Vec c = prob.block(C, i);
        for (int t = 0; t < prob.T; ++t) out << ',' << fmt_double(c[t]);
        out << '\n';
    }
    write_text(p, out.str());
}

inline Mat read_solution_csv(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("compare: cannot open " + p.string());
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("compare: " + p.string() + " is empty");
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');  // agent id
        std::vector<double> row;
        while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ConfigError("compare: " + p.string() + " has no rows");
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size())
            throw ConfigError("compare: " + p.string() + ": ragged rows");
        for (std::size_t t = 0; t < rows[i].size(); ++t)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = rows[i][t];
    }
    return m;
}

inline void write_totals_csv(const fs::path& p, const ValleyFillingProblem& prob, const Vec& C,
                             const Vec* attack_free_C) {
    std::ostringstream out;
    out << "t,baseline_kw,total_kw";
    if (attack_free_C) out << ",attack_free_total_kw";
    out << '\n';
    const Vec total = prob.total_load(C);
    Vec total_free;
    if (attack_free_C) total_free = prob.total_load(*attack_free_C);
    for (int t = 0; t < prob.T; ++t) {
        out << t << ',' << fmt_double(prob.P_b[t]) << ',' << fmt_double(total[t]);
        if (attack_free_C) out << ',' << fmt_double(total_free[t]);
        out << '\n';
    }
    write_text(p, out.str());
}

inline void write_metrics_csv(const fs::path& p, const ScenarioMetrics& m) {
    std::ostringstream out;
    out << "metric,value\n";
    out << "converged," << (m.converged ? 1 : 0) << '\n';
    out << "valley_flatness," << fmt_double(m.valley_flatness) << '\n';
    out << "min_voltage_pu," << fmt_double(m.min_voltage_pu) << '\n';
    out << "oscillation_score," << fmt_double(m.oscillation_score) << '\n';
    out << "theta_energy_fraction," << fmt_double(m.theta_energy_fraction) << '\n';
    out << "attacker_flatness," << fmt_double(m.attacker_flatness) << '\n';
    out << "attack_l2_deviation," << fmt_double(m.attack_l2_deviation) << '\n';
    out << "attack_mean_deviation," << fmt_double(m.attack_mean_deviation) << '\n';
    write_text(p, out.str());
}

}  // namespace detail

struct RunOutcome {
    bool converged = false;
    ScenarioMetrics metrics;
    fs::path dir;
};

inline RunOutcome run_scenario(const Scenario& s, const fs::path& outdir) {
    fs::create_directories(outdir);
    BuiltScenario b = build_scenario(s);

    MessageBus bus(s.log_mode);
    std::optional<AttackEngine> engine;
    if (!s.attacks.empty()) engine.emplace(s.attacks, b.prob);

    SpdsResult result = spds_run(b.prob, s.spds, engine ? &*engine : nullptr, &bus);

    std::optional<SpdsResult> attack_free;
    if (!s.attacks.empty() && s.attack_free_reference)
        attack_free = spds_run(b.prob, s.spds);

    RunOutcome out;
    out.converged = result.converged;
    out.dir = outdir;
    out.metrics = scenario_metrics(result, b.prob, s.attacks, s.window_begin, s.window_end,
                                   attack_free ? &attack_free->C : nullptr);

    result.trace.export_csv((outdir / "trace.csv").string());
    detail::write_solution_csv(outdir / "solution.csv", b.prob, result.C);
    detail::write_totals_csv(outdir / "totals.csv", b.prob, result.C,
                             attack_free ? &attack_free->C : nullptr);
    if (attack_free)
        detail::write_solution_csv(outdir / "solution_attack_free.csv", b.prob, attack_free->C);
    detail::write_metrics_csv(outdir / "metrics.csv", out.metrics);
    {
        json mj = out.metrics.to_json();
        mj["iterations"] = result.iters;
        mj["final_residual"] = result.trace.residual.empty() ? 0.0 : result.trace.residual.back();
        detail::write_text(outdir / "metrics.json", mj.dump(2) + "\n");
    }
    bus.export_jsonl((outdir / "round_log.jsonl").string());
    detail::write_text(outdir / "scenario.json", s.raw.dump(2) + "\n");

    const bool want_bounds = s.emit_bounds_set ? s.emit_bounds : (s.delta > 0.0 && !s.attacks.empty());
    if (want_bounds && engine) {
        const auto goals = engine->goal_terms();
        const RefSolution ref_free = reference_solve(b.prob);
        const RefSolution ref_attacked = reference_solve(b.prob, goals);
        json bj;
        if (b.prob.strong_convexity_modulus() > 0.0) {
            const BoundsReport rep = bounds_report(b.prob, goals, engine->omega_lipschitz(),
                                                   ref_free.C, ref_attacked.C);
            bj = rep.to_json();
        } else {
            const WeakSharpReport rep = weak_sharp_check(b.prob, engine->omega_lipschitz(),
                                                         ref_free.C, ref_attacked.C, s.seed);
            bj = {{"mode", "weak_sharp"},
                  {"alpha_est", rep.alpha_est},
                  {"B", rep.B},
                  {"dist", rep.dist},
                  {"has_certificate", rep.has_certificate},
                  {"bound_ok", rep.bound_ok}};
        }
        bj["spds_deviation"] = attack_free ? (result.C - attack_free->C).norm() : 0.0;
        detail::write_text(outdir / "bounds.json", bj.dump(2) + "\n");
    }

    // manifest last: digests over every other artifact
    json manifest;
    manifest["scenario"] = s.name;
    manifest["seed"] = s.seed;
    manifest["converged"] = result.converged;
    json files = json::object();
    for (const auto& entry : fs::directory_iterator(outdir)) {
        const std::string fname = entry.path().filename().string();
        if (fname == "manifest.json") continue;
        files[fname] = digest_hex(detail::file_digest(entry.path()));
    }
    manifest["files"] = files;
    detail::write_text(outdir / "manifest.json", manifest.dump(2) + "\n");
    return out;
}

// ---- Comparison -----------------------------------------------------------

struct CompareReport {
    std::vector<double> rel_mean_dev;  // per agent, |mean_A - mean_B| / max|mean_B|
    std::vector<double> rel_l2_dev;    // per agent, ||a - b|| / max||b||
    double max_rel_mean_dev = 0.0;
    double max_rel_l2_dev = 0.0;

    json to_json() const {
        return {{"rel_mean_dev", rel_mean_dev},
                {"rel_l2_dev", rel_l2_dev},
                {"max_rel_mean_dev", max_rel_mean_dev},
                {"max_rel_l2_dev", max_rel_l2_dev}};
    }
};

inline CompareReport compare_runs(const fs::path& dir_a, const fs::path& dir_b,
                                  const fs::path& out_dir = {}) {
    const Mat A = detail::read_solution_csv(dir_a / "solution.csv");
    const Mat B = detail::read_solution_csv(dir_b / "solution.csv");
    if (A.rows() != B.rows() || A.cols() != B.cols())
        throw ConfigError("compare: runs have different problem dimensions (" +
                          std::to_string(A.rows()) + "x" + std::to_string(A.cols()) + " vs " +
                          std::to_string(B.rows()) + "x" + std::to_string(B.cols()) + ")");
    CompareReport rep;
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        const Vec a = A.row(i).transpose(), b = B.row(i).transpose();
        rep.rel_mean_dev.push_back(std::abs(a.mean() - b.mean()) / std::max(1e-12, std::abs(b.mean())));
        rep.rel_l2_dev.push_back((a - b).norm() / std::max(1e-12, b.norm()));
        rep.max_rel_mean_dev = std::max(rep.max_rel_mean_dev, rep.rel_mean_dev.back());
        rep.max_rel_l2_dev = std::max(rep.max_rel_l2_dev, rep.rel_l2_dev.back());
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        detail::write_text(out_dir / "comparison.json", rep.to_json().dump(2) + "\n");
        // total-load overlay from the two totals files
        std::ifstream ta(dir_a / "totals.csv"), tb(dir_b / "totals.csv");
        if (ta && tb) {
            std::ostringstream out;
            out << "t,total_a_kw,total_b_kw\n";
            std::string la, lb;
            std::getline(ta, la);
            std::getline(tb, lb);
            int t = 0;
            while (std::getline(ta, la) && std::getline(tb, lb)) {
                auto col = [](const std::string& line, int idx) {
                    std::stringstream ss(line);
                    std::string tok;
                    for (int k = 0; k <= idx; ++k) std::getline(ss, tok, ',');
                    return tok;
                };
                out << t++ << ',' << col(la, 2) << ',' << col(lb, 2) << '\n';
            }
            detail::write_text(out_dir / "overlay.csv", out.str());
        }
    }
    return rep;
}

// ---- Post-hoc bounds verification -----------------------------------------

// Re-derives both optimizers with the reference solver from the scenario copy
// stored in a run directory and writes/refreshes bounds.json there.
inline json verify_bounds(const fs::path& run_dir) {
    std::ifstream in(run_dir / "scenario.json");
    if (!in) throw ConfigError("verify-bounds: no scenario.json in " + run_dir.string());
    json sj;
    in >> sj;
    Scenario s = parse_scenario(sj, run_dir);
    if (s.attacks.empty()) throw ConfigError("verify-bounds: scenario has no attacks");
    BuiltScenario b = build_scenario(s);

    // run the attacked SPDS once so snapshot-based goals (power balance) exist
    MessageBus bus(LogMode::Off);
    AttackEngine engine(s.attacks, b.prob);
    spds_run(b.prob, s.spds, &engine, &bus);

    const auto goals = engine.goal_terms();
    const RefSolution ref_free = reference_solve(b.prob);
    const RefSolution ref_attacked = reference_solve(b.prob, goals);
    json bj;
    if (b.prob.strong_convexity_modulus() > 0.0) {
        bj = bounds_report(b.prob, goals, engine.omega_lipschitz(), ref_free.C, ref_attacked.C)
                 .to_json();
    } else {
        const WeakSharpReport rep =
            weak_sharp_check(b.prob, engine.omega_lipschitz(), ref_free.C, ref_attacked.C, s.seed);
        bj = {{"mode", "weak_sharp"},   {"alpha_est", rep.alpha_est},
              {"B", rep.B},             {"dist", rep.dist},
              {"has_certificate", rep.has_certificate}, {"bound_ok", rep.bound_ok}};
    }
    detail::write_text(run_dir / "bounds.json", bj.dump(2) + "\n");
    return bj;
}

}  // namespace spdsim
