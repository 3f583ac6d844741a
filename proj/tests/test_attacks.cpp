#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "spdsim/scenario.hpp"

using namespace spdsim;
using testing::flat_problem;

TEST_CASE("time-tuning matrix: patterns and rejection") {
    CHECK((time_tuning_matrix({1, 2, 3}, 0.2, 1e5, 3).diag - Vec::Constant(3, 0.2)).norm() == 0.0);
    const Vec d = time_tuning_matrix({2, 3}, 0.2, 1e5, 4).diag;
    CHECK(d[0] == 1e5);
    CHECK(d[1] == 0.2);
    CHECK(d[2] == 0.2);
    CHECK(d[3] == 1e5);
    CHECK_THROWS_AS(time_tuning_matrix({}, 0.2, 1e5, 4), ConfigError);
    CHECK_THROWS_AS(time_tuning_matrix({5}, 0.2, 1e5, 4), ConfigError);  // out of 1..T
    CHECK_THROWS_AS(time_tuning_matrix({1}, 2.0, 1.0, 4), ConfigError);  // m >= M
}

TEST_CASE("battery-damage matrix: 1-based multiples of t_f") {
    CHECK((battery_damage_matrix(1, 0.2, 1e5, 3).diag - Vec::Constant(3, 0.2)).norm() == 0.0);
    const Vec d = battery_damage_matrix(2, 0.2, 1e5, 4).diag;
    CHECK(d[0] == 1e5);
    CHECK(d[1] == 0.2);
    CHECK(d[2] == 1e5);
    CHECK(d[3] == 0.2);
    CHECK_THROWS_AS(battery_damage_matrix(0, 0.2, 1e5, 4), ConfigError);
}

TEST_CASE("primal injection: gradient formulas") {
    const auto prob = flat_problem(2, 4, 0.0);
    AttackEngine smooth({AttackSpec{SmoothChargingSpec{0, 1.0}}}, prob);
    CHECK(smooth.primal_perturbation(0, Vec::Zero(4), 1).norm() == 0.0);  // gradient at origin
    const Vec c = (Vec(4) << 0.1, 0.2, 0.3, 0.4).finished();
    CHECK((smooth.primal_perturbation(0, c, 1) - 2.0 * c).norm() <= 1e-15);
    CHECK(smooth.primal_perturbation(1, c, 1).norm() == 0.0);  // other agents untouched

    // uniform preference: injection 2 omega m^2 c
    TimeTuningSpec tt{0, 0.7, {1, 2, 3, 4}, 0.2, 1e5};
    AttackEngine uni({AttackSpec{tt}}, prob);
    CHECK((uni.primal_perturbation(0, c, 1) - 2.0 * 0.7 * 0.04 * c).norm() <= 1e-15);
}

TEST_CASE("attack spec validation") {
    const auto prob = flat_problem(2, 4, 0.0);
    CHECK_THROWS_AS(AttackEngine({AttackSpec{SmoothChargingSpec{0, -1.0}}}, prob), ConfigError);
    CHECK_THROWS_AS(AttackEngine({AttackSpec{SmoothChargingSpec{7, 1.0}}}, prob), ConfigError);
    StealthySpec nested;
    nested.inner = std::make_shared<AttackSpec>(DualFullSpec{0, 1.0, {}});
    CHECK_THROWS_AS(AttackEngine({AttackSpec{nested}}, prob), ConfigError);  // dual inner
}

TEST_CASE("stealth gate: limits and latching") {
    StealthGate inf_gate(std::numeric_limits<double>::infinity());
    CHECK(inf_gate.open_at(1));  // non-stealthy limit

    StealthGate closed(0.0);
    for (int k = 1; k <= 100; ++k) closed.observe(k, 1e-3);
    CHECK_FALSE(closed.latched());
    CHECK_FALSE(closed.open_at(101));

    StealthGate g(0.5);
    g.observe(1, 2.0);
    CHECK_FALSE(g.open_at(2));
    g.observe(2, 0.4);  // latches at round 2
    CHECK(g.activation_round() == 2);
    CHECK_FALSE(g.open_at(2));  // injection only after the activation round
    CHECK(g.open_at(3));
    g.observe(3, 9.0);  // one-way: later large residuals do not close it
    CHECK(g.open_at(4));
}

TEST_CASE("stealth replay: activation matches the recorded-residual prediction") {
    const auto prob = flat_problem(3, 8, 0.01);
    SpdsConfig cfg;
    cfg.eps = 1e-10;
    cfg.max_iter = 20000;
    const SpdsResult free_run = spds_run(prob, cfg);
    REQUIRE(free_run.converged);
    const auto& r = free_run.trace.residual;  // r[k-1] is round k's residual
    REQUIRE(r.size() >= 12);
    double min_prev = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= 10; ++k) min_prev = std::min(min_prev, r[k - 1]);
    REQUIRE(r[10] < min_prev);  // round 11 undercuts rounds 1..10
    const double eps_s = 0.5 * (r[10] + min_prev);

    StealthySpec spec;
    spec.inner = std::make_shared<AttackSpec>(SmoothChargingSpec{0, 1.0});
    spec.eps_s = eps_s;
    AttackEngine engine({AttackSpec{spec}}, prob);
    const SpdsResult res = spds_run(prob, cfg, &engine);

    // predicted activation round is 11: zero injection through round 11,
    // gate open (and injecting) from round 12 on
    for (int k = 1; k <= 11; ++k) {
        CHECK(res.trace.injection_norms[k - 1][0] == 0.0);
        CHECK(res.trace.gate_open[k - 1][0] == 0);
    }
    REQUIRE(res.trace.residual.size() >= 12);
    CHECK(res.trace.gate_open[11][0] == 1);
    CHECK(res.trace.injection_norms[11][0] > 0.0);
    // pre-activation rounds replay the attack-free residuals exactly
    for (int k = 1; k <= 11; ++k) CHECK(res.trace.residual[k - 1] == r[k - 1]);
}

TEST_CASE("goal convexity: gradient monotonicity on random pairs") {
    const auto prob = flat_problem(2, 5, 0.0);
    Rng rng(31);
    const Vec diag = rng.uniform_vec(5, 0.1, 3.0);
    AttackEngine engine({AttackSpec{TimeTuningSpec{0, 1.0, {2, 4}, 0.2, 10.0}}}, prob);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec x = rng.uniform_vec(5, 0.0, 1.0);
        const Vec y = rng.uniform_vec(5, 0.0, 1.0);
        const Vec gx = engine.primal_perturbation(0, x, 1);
        const Vec gy = engine.primal_perturbation(0, y, 1);
        CHECK((gx - gy).dot(x - y) >= -1e-12);
    }
}

TEST_CASE("Theorem 1 equivalence: injected SPDS matches reference solve of F + omega g") {
    const auto prob = flat_problem(3, 8, 0.01);
    SpdsConfig cfg;
    cfg.eps = 1e-10;
    cfg.max_iter = 50000;

    SUBCASE("smooth charging") {
        AttackEngine engine({AttackSpec{SmoothChargingSpec{0, 1.0}}}, prob);
        const SpdsResult res = spds_run(prob, cfg, &engine);
        REQUIRE(res.converged);
        const RefSolution ref = reference_solve(prob, engine.goal_terms(), 1e-10);
        CHECK((res.C - ref.C).norm() <= 1e-4 * std::max(1.0, ref.C.norm()));
    }
    SUBCASE("time tuning") {
        AttackEngine engine({AttackSpec{TimeTuningSpec{1, 1.0, {3, 4, 5}, 0.2, 50.0}}}, prob);
        const SpdsResult res = spds_run(prob, cfg, &engine);
        REQUIRE(res.converged);
        const RefSolution ref = reference_solve(prob, engine.goal_terms(), 1e-10);
        CHECK((res.C - ref.C).norm() <= 1e-4 * std::max(1.0, ref.C.norm()));
    }
    SUBCASE("battery damage") {
        AttackEngine engine({AttackSpec{BatteryDamageSpec{{2}, 1.0, 2, 0.2, 50.0}}}, prob);
        const SpdsResult res = spds_run(prob, cfg, &engine);
        REQUIRE(res.converged);
        const RefSolution ref = reference_solve(prob, engine.goal_terms(), 1e-10);
        CHECK((res.C - ref.C).norm() <= 1e-4 * std::max(1.0, ref.C.norm()));
    }
}

TEST_CASE("dual injection: zero-lambda branch and formula") {
    CHECK(dual_injection_full(Vec::Zero(3), 5.0, 2.0).norm() == 0.0);
    Vec e1 = Vec::Zero(3);
    e1[1] = 1.0;
    // g = 1, omega = 2, unit lambda -> Phi = 2 lambda
    CHECK((dual_injection_full(e1, 1.0, 2.0) - 2.0 * e1).norm() <= 1e-15);
    // lambda^T Phi = omega g independent of ||lambda||
    Rng rng(33);
    const Vec lam = rng.uniform_vec(4, -2.0, 2.0);
    const double g = 3.7, omega = 0.9;
    CHECK(lam.dot(dual_injection_full(lam, g, omega)) == doctest::Approx(omega * g).epsilon(1e-12));
}

TEST_CASE("dual injection gradient section equals omega grad g (finite differences)") {
    Rng rng(34);
    const Vec diag = rng.uniform_vec(5, 0.1, 2.0);
    const Vec c = rng.uniform_vec(5, 0.0, 1.0);
    const double omega = 1.4;
    // the engine injects gg = 2 omega diag^2 c into the attacker's grad slice;
    // this must be the gradient of omega * ||diag .* c||^2
    const Vec gg = 2.0 * omega * diag.cwiseProduct(diag).cwiseProduct(c);
    const double h = 1e-6;
    for (int t = 0; t < 5; ++t) {
        Vec cp = c, cm = c;
        cp[t] += h;
        cm[t] -= h;
        const double fd = omega *
                          (diag.cwiseProduct(cp).squaredNorm() - diag.cwiseProduct(cm).squaredNorm()) /
                          (2.0 * h);
        CHECK(std::abs(gg[t] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("dual-full requires an equality coupling") {
    const auto prob = flat_problem(2, 4, 0.01);  // no coupling
    AttackEngine engine({AttackSpec{DualFullSpec{0, 1.0, {}}}}, prob);
    MessageBus bus;
    BroadcastLayout bl{2, 4, 0, 0};
    OperatorIoLayout ol{2, 4, 0};
    CHECK_THROWS_AS(engine.install(bus, bl, ol), ConfigError);
}

TEST_CASE("Theorem 3 exactness on the bundled 3-EV toy") {
    const Scenario s = load_scenario(std::string(SPDSIM_DATA_DIR) + "/toy3.json");
    const BuiltScenario b = build_scenario(s);
    REQUIRE(b.prob.coupling.has_value());
    REQUIRE(std::holds_alternative<DualFullSpec>(s.attacks.at(0)));

    MessageBus bus;
    AttackEngine engine(s.attacks, b.prob);
    const SpdsResult dual = spds_run(b.prob, s.spds, &engine, &bus);
    REQUIRE(dual.converged);
    // the equivalent centralized under-attack problem
    const RefSolution ref = reference_solve(b.prob, engine.goal_terms(), 1e-10);
    const Vec da = b.prob.block(dual.C, 0), ra = b.prob.block(ref.C, 0);
    CHECK((da - ra).norm() <= 1e-3 * std::max(1.0, ra.norm()));
}

TEST_CASE("power balance: victims must share the attacker's bus; zero victims is a no-op") {
    auto prob = flat_problem(3, 6, 0.01);
    prob.agents[2].spec.bus = 2;  // move one EV to another bus
    DualPowerBalanceSpec bad;
    bad.attacker = 0;
    bad.victims = {2};
    CHECK_THROWS_AS(AttackEngine({AttackSpec{bad}}, prob), ConfigError);

    DualPowerBalanceSpec self;
    self.attacker = 0;
    self.victims = {0};
    CHECK_THROWS_AS(AttackEngine({AttackSpec{self}}, prob), ConfigError);

    DualPowerBalanceSpec none;
    none.attacker = 0;
    none.victims = {};
    SpdsConfig cfg;
    cfg.max_iter = 2000;
    AttackEngine engine({AttackSpec{none}}, prob);
    MessageBus bus(LogMode::Digests);
    const SpdsResult res = spds_run(prob, cfg, &engine, &bus);
    const SpdsResult plain = spds_run(prob, cfg);
    CHECK((res.C - plain.C).norm() == 0.0);
    for (const auto& rec : bus.log()) CHECK(rec.mutations.empty());
}

TEST_CASE("power balance: channel hygiene and victim-only perturbation") {
    const auto prob = flat_problem(3, 6, 0.01);  // all EVs on bus 1
    DualPowerBalanceSpec spec;
    spec.attacker = 0;
    spec.victims = {1, 2};
    spec.omega = 1.0;
    spec.eps_s = std::numeric_limits<double>::infinity();
    spec.goal.kind = GoalDescriptor::Kind::Smooth;

    SpdsConfig cfg;
    cfg.eps = 1e-9;
    cfg.max_iter = 50000;
    AttackEngine engine({AttackSpec{spec}}, prob);
    MessageBus bus(LogMode::Digests);
    const SpdsResult res = spds_run(prob, cfg, &engine, &bus);
    REQUIRE(res.converged);

    // the attacker's own channels carry unmodified data
    CHECK(bus.mutation_count(0, 0) == 0);
    CHECK(bus.mutation_count(0, 1) > 0);
    CHECK(bus.mutation_count(0, 2) > 0);
}

TEST_CASE("goal target profiles") {
    FeasibleSet set;
    set.T = 4;
    set.lower = Vec::Zero(4);
    set.upper = Vec::Ones(4);
    set.eq_coeff = Vec::Constant(4, 2.0);
    set.eq_rhs = 4.0;
    GoalDescriptor smooth;
    const Vec flat = goal_target_profile(smooth, set);
    CHECK((flat - Vec::Constant(4, 0.5)).norm() <= 1e-10);  // minimum-norm feasible point

    GoalDescriptor tt;
    tt.kind = GoalDescriptor::Kind::TimeTuning;
    tt.theta = {2, 3};
    const Vec greedy = goal_target_profile(tt, set);
    CHECK(greedy[1] == doctest::Approx(1.0));
    CHECK(greedy[2] == doctest::Approx(1.0));
    CHECK(greedy[0] + greedy[3] == doctest::Approx(0.0));
}

TEST_CASE("reshape lipschitz bound dominates gradients over the box") {
    Rng rng(35);
    const Vec diag = rng.uniform_vec(6, 0.1, 4.0);
    const double L = reshape_lipschitz(diag, 6);
    for (int trial = 0; trial < 50; ++trial) {
        const Vec c = rng.uniform_vec(6, 0.0, 1.0);
        const Vec g = 2.0 * diag.cwiseProduct(diag).cwiseProduct(c);
        CHECK(g.norm() <= L + 1e-12);
    }
}
