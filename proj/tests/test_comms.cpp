#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "spdsim/spds.hpp"

#include <filesystem>
#include <fstream>

using namespace spdsim;
using testing::flat_problem;
using testing::wired_problem;

TEST_CASE("no taps: delivery is bit-exact and logged with equal digests") {
    MessageBus bus(LogMode::Digests);
    Rng rng(1);
    const Vec payload = rng.uniform_vec(6, -1.0, 1.0);
    const Vec out = bus.deliver(MessageKind::PrimalReport, 1, 0, -1, {0, Direction::ToOperator}, payload);
    CHECK((out - payload).norm() == 0.0);
    REQUIRE(bus.log().size() == 1);
    CHECK(bus.log()[0].pre_digest == bus.log()[0].post_digest);
    CHECK(bus.log()[0].mutations.empty());
}

TEST_CASE("additive tap shifts the payload by exactly v") {
    MessageBus bus(LogMode::Digests);
    const Vec v = (Vec(3) << 0.5, -1.0, 2.0).finished();
    bus.register_tap({{2, Direction::FromOperator}, 9,
                      [v](int, const Vec& p) { return Vec(p + v); }});
    const Vec payload = (Vec(3) << 1.0, 1.0, 1.0).finished();
    const Vec seen = bus.deliver(MessageKind::DualBroadcast, 3, -1, 2, {2, Direction::FromOperator}, payload);
    CHECK((seen - payload - v).norm() == 0.0);
    // untapped channel unaffected
    const Vec other = bus.deliver(MessageKind::DualBroadcast, 3, -1, 1, {1, Direction::FromOperator}, payload);
    CHECK((other - payload).norm() == 0.0);
    // the mutation is attributed to the owner
    CHECK(bus.mutation_count(9, 2) == 1);
    CHECK(bus.mutation_count(9, 1) == 0);
}

TEST_CASE("register then remove leaves later rounds unaffected") {
    MessageBus bus(LogMode::Digests);
    auto h = bus.register_tap({{0, Direction::ToOperator}, 5,
                               [](int, const Vec& p) { return Vec(2.0 * p); }});
    bus.remove_tap(h);
    const Vec payload = Vec::Ones(4);
    const Vec out = bus.deliver(MessageKind::PrimalReport, 1, 0, -1, {0, Direction::ToOperator}, payload);
    CHECK((out - payload).norm() == 0.0);
    CHECK_FALSE(bus.has_tap({0, Direction::ToOperator}));
}

TEST_CASE("two taps by different attackers compose in registration order") {
    MessageBus bus(LogMode::Digests);
    bus.register_tap({{1, Direction::FromOperator}, 7,
                      [](int, const Vec& p) { return Vec(p.array() + 1.0); }});
    bus.register_tap({{1, Direction::FromOperator}, 8,
                      [](int, const Vec& p) { return Vec(2.0 * p); }});
    const Vec out = bus.deliver(MessageKind::DualBroadcast, 1, -1, 1, {1, Direction::FromOperator},
                                Vec::Zero(2));
    // (0 + 1) * 2 = 2; the reverse order would give 1
    CHECK(out[0] == 2.0);
    REQUIRE(bus.log().size() == 1);
    REQUIRE(bus.log()[0].mutations.size() == 2);
    CHECK(bus.log()[0].mutations[0].owner == 7);
    CHECK(bus.log()[0].mutations[1].owner == 8);
}

TEST_CASE("duplicate (attacker, channel) registration is rejected") {
    MessageBus bus;
    bus.register_tap({{1, Direction::ToOperator}, 7, [](int, const Vec& p) { return p; }});
    CHECK_THROWS_AS(
        bus.register_tap({{1, Direction::ToOperator}, 7, [](int, const Vec& p) { return p; }}),
        ConfigError);
    // same channel, different attacker is fine
    CHECK_NOTHROW(
        bus.register_tap({{1, Direction::ToOperator}, 8, [](int, const Vec& p) { return p; }}));
}

TEST_CASE("length-changing tap is a protocol violation") {
    MessageBus bus;
    bus.register_tap({{0, Direction::ToOperator}, 1,
                      [](int, const Vec& p) { return Vec(Vec::Zero(p.size() + 1)); }});
    CHECK_THROWS_AS(
        bus.deliver(MessageKind::PrimalReport, 1, 0, -1, {0, Direction::ToOperator}, Vec::Ones(2)),
        ProtocolError);
}

TEST_CASE("wiretap leaves payloads unchanged while recording a snapshot") {
    MessageBus bus(LogMode::Digests);
    Vec snapshot;
    bus.register_tap({{0, Direction::ToOperator}, 3,
                      [&snapshot](int, const Vec& p) {
                          snapshot = p;
                          return p;
                      }});
    const Vec payload = (Vec(2) << 0.25, 0.75).finished();
    const Vec out = bus.deliver(MessageKind::PrimalReport, 4, 0, -1, {0, Direction::ToOperator}, payload);
    CHECK((out - payload).norm() == 0.0);
    CHECK((snapshot - payload).norm() == 0.0);
    CHECK(bus.log()[0].pre_digest == bus.log()[0].post_digest);
    CHECK(bus.mutation_count(3, 0) == 0);  // identity transform is not a mutation
}

TEST_CASE("conservation of honesty: bus-mediated run equals direct run") {
    const auto prob = wired_problem(2, 3, 6);
    SpdsConfig cfg;
    cfg.max_iter = 60;
    const SpdsResult direct = spds_run(prob, cfg);
    MessageBus bus(LogMode::Digests);
    const SpdsResult mediated = spds_run(prob, cfg, nullptr, &bus);
    CHECK((direct.C - mediated.C).norm() == 0.0);
    CHECK((direct.mu - mediated.mu).norm() == 0.0);
    REQUIRE(direct.trace.residual.size() == mediated.trace.residual.size());
    for (std::size_t k = 0; k < direct.trace.residual.size(); ++k)
        CHECK(direct.trace.residual[k] == mediated.trace.residual[k]);
    // every logged delivery is honest
    for (const auto& rec : bus.log()) CHECK(rec.mutations.empty());
}

TEST_CASE("bus-mediated runs replay identically") {
    const auto prob = flat_problem(2, 5);
    SpdsConfig cfg;
    cfg.max_iter = 40;
    MessageBus bus_a(LogMode::Digests), bus_b(LogMode::Digests);
    spds_run(prob, cfg, nullptr, &bus_a);
    spds_run(prob, cfg, nullptr, &bus_b);
    REQUIRE(bus_a.log().size() == bus_b.log().size());
    for (std::size_t i = 0; i < bus_a.log().size(); ++i) {
        CHECK(bus_a.log()[i].pre_digest == bus_b.log()[i].pre_digest);
        CHECK(bus_a.log()[i].post_digest == bus_b.log()[i].post_digest);
        CHECK(bus_a.log()[i].round == bus_b.log()[i].round);
    }
}

TEST_CASE("round log export is valid JSONL with the documented fields") {
    MessageBus bus(LogMode::Payloads);
    bus.register_tap({{0, Direction::ToOperator}, 2,
                      [](int, const Vec& p) { return Vec(p.array() + 0.5); }});
    bus.deliver(MessageKind::PrimalReport, 1, 0, -1, {0, Direction::ToOperator}, Vec::Zero(2));
    const std::string path = "/tmp/spdsim_test_roundlog.jsonl";
    bus.export_jsonl(path);
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    const auto j = nlohmann::json::parse(line);
    CHECK(j["round"] == 1);
    CHECK(j["kind"] == "primal_report");
    CHECK(j.contains("pre_tap_digest"));
    CHECK(j.contains("post_tap_digest"));
    CHECK(j["mutations"][0]["owner"] == 2);
    CHECK(j["payload"].size() == 2);
    std::filesystem::remove(path);
}
