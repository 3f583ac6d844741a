#pragma once

// Shared builders for the unit tests: tiny feeders, fleets, and problems.

#include "spdsim/problem.hpp"
#include "spdsim/network.hpp"

#include <cmath>

namespace testing {

using namespace spdsim;

inline EvSpec make_ev(int id, int bus, double p_max, double cap = 50.0,
                      double soc_ini = 0.2, double soc_des = 0.6,
                      double eta = 0.9, double dt = 0.5) {
    EvSpec ev;
    ev.id = id;
    ev.bus = bus;
    ev.p_max = p_max;
    ev.eta = eta;
    ev.cap = cap;
    ev.soc_ini = soc_ini;
    ev.soc_des = soc_des;
    ev.dt = dt;
    return ev;
}

// Radial chain 0-1-...-n with identical segments.
inline DistributionNetwork chain_network(int n, double r_ohm = 0.04, double x_ohm = 0.02,
                                         double v_floor = 0.954, double v_base_kv = 4.16) {
    std::vector<Line> lines;
    for (int b = 0; b < n; ++b) lines.push_back({b, b + 1, r_ohm, x_ohm});
    return build_network(n, lines, 1.0, v_floor, v_base_kv);
}

inline BaselineProfile cosine_baseline(int n, int T, double level = 60.0, double amp = 30.0) {
    BaselineProfile base;
    base.p_base = Mat::Zero(n, T);
    for (int b = 0; b < n; ++b)
        for (int t = 0; t < T; ++t)
            base.p_base(b, t) = level + amp * std::cos(2.0 * M_PI * t / T);
    base.finalize();
    return base;
}

// A no-network multi-EV problem with a sinusoidal aggregate baseline.
inline ValleyFillingProblem flat_problem(int s, int T, double delta = 0.0,
                                         double p_scale = 1.0, double dt = 1.0) {
    ValleyFillingProblem prob;
    prob.n = 0;
    prob.s = s;
    prob.T = T;
    prob.delta = delta;
    prob.voltage_coupling = false;
    prob.P_b = Vec(T);
    for (int t = 0; t < T; ++t) prob.P_b[t] = p_scale * (2.0 + 0.5 * std::sin(2.0 * M_PI * t / T));
    prob.D = Mat();
    prob.Ycal_b = Vec();
    for (int i = 0; i < s; ++i) {
        const double pmax = p_scale * (1.0 - 0.15 * i);
        EvSpec ev = make_ev(i, 1, pmax, 100.0, 0.1, 0.1 + 0.2 * pmax * T / 100.0, 1.0, dt);
        prob.agents.push_back({ev, make_feasible_set(ev, T)});
    }
    return prob;
}

// A small voltage-coupled problem on an n-bus chain.
inline ValleyFillingProblem wired_problem(int n, int s, int T, double delta = 0.0,
                                          double load_level = 60.0) {
    const DistributionNetwork net = chain_network(n);
    std::vector<EvSpec> fleet;
    for (int i = 0; i < s; ++i) fleet.push_back(make_ev(i, 1 + (i % n), 6.0 + i));
    const BaselineProfile base = cosine_baseline(n, T, load_level, load_level / 2.0);
    const InjectionModel inj = build_injection_model(net, fleet, base);
    return assemble_problem(net, inj, fleet, base, delta);
}

}  // namespace testing
