#pragma once

// Per-EV charging physics and the local feasible set: a [0,1]^T box (with
// optional plug-in-window zero-fixing) intersected with the energy-delivery
// equality eta * dt * p_max * sum(c) = E_req.

#include "spdsim/common.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace spdsim {

struct EvSpec {
    int id = 0;
    int bus = 1;         // 1-based modeled bus index
    double p_max = 0.0;  // kW
    double eta = 1.0;    // charging efficiency, (0, 1]
    double cap = 0.0;    // battery capacity, kWh
    double soc_ini = 0.0;
    double soc_des = 0.0;
    double dt = 1.0;     // sampling interval, h

    void validate() const {
        if (p_max <= 0.0) throw ConfigError("EV " + std::to_string(id) + ": p_max must be positive");
        if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("EV " + std::to_string(id) + ": eta must be in (0,1]");
        if (dt <= 0.0) throw ConfigError("EV " + std::to_string(id) + ": dt must be positive");
        if (cap < 0.0) throw ConfigError("EV " + std::to_string(id) + ": capacity must be nonnegative");
        if (!(0.0 <= soc_ini && soc_ini <= soc_des && soc_des <= 1.0))
            throw ConfigError("EV " + std::to_string(id) + ": need 0 <= soc_ini <= soc_des <= 1");
    }
};

inline double energy_requirement(const EvSpec& spec) {
    spec.validate();
    return spec.cap * (spec.soc_des - spec.soc_ini);
}

struct FeasibleSet {
    int T = 0;
    Vec lower;     // usually 0
    Vec upper;     // usually 1; 0 on slots outside the plug-in window
    Vec eq_coeff;  // per-slot energy coefficient, eta * dt * p_max (kWh per unit rate)
    double eq_rhs = 0.0;  // E_req, kWh

    bool nonempty(double tol = 1e-9) const {
        const double hi = eq_coeff.dot(upper);
        const double lo = eq_coeff.dot(lower);
        return eq_rhs >= lo - tol && eq_rhs <= hi + tol;
    }
};

// The stacked-matrix energy row of the formulation collapses to the scalar row
// eta * dt * p_max * 1^T, sign-normalized so eq_rhs >= 0.
inline FeasibleSet make_feasible_set(const EvSpec& spec, int T,
                                     int window_begin = 0, int window_end = -1) {
    spec.validate();
    if (T < 1) throw ConfigError("feasible set: T must be >= 1");
    if (window_end < 0) window_end = T;
    FeasibleSet fs;
    fs.T = T;
    fs.lower = Vec::Zero(T);
    fs.upper = Vec::Ones(T);
    for (int t = 0; t < T; ++t)
        if (t < window_begin || t >= window_end) fs.upper[t] = 0.0;
    fs.eq_coeff = Vec::Constant(T, spec.eta * spec.dt * spec.p_max);
    fs.eq_rhs = energy_requirement(spec);
    if (!fs.nonempty())
        throw InfeasibleError("EV " + std::to_string(spec.id) +
                              ": energy requirement exceeds what the horizon can deliver");
    return fs;
}

// Euclidean projection onto {lower <= c <= upper, eq_coeff . c = eq_rhs}.
// Continuous-knapsack structure: c(nu) = clamp(x + nu * a) with the residual
// a . c(nu) - rhs piecewise linear and nondecreasing in nu; the exact root is
// found by binary search over the clamp breakpoints plus one interpolation.
inline Vec project_feasible(const Vec& x, const FeasibleSet& set) {
    if (x.size() != set.T) throw ConfigError("project_feasible: input has wrong length");
    if (!set.nonempty()) throw InfeasibleError("project_feasible: empty feasible set");
    const Vec& a = set.eq_coeff;
    auto clamp_at = [&](double nu) {
        Vec c(set.T);
        for (int t = 0; t < set.T; ++t)
            c[t] = std::clamp(x[t] + nu * a[t], set.lower[t], set.upper[t]);
        return c;
    };
    auto resid = [&](double nu) { return a.dot(clamp_at(nu)) - set.eq_rhs; };

    std::vector<double> bps;
    bps.reserve(2 * static_cast<std::size_t>(set.T));
    for (int t = 0; t < set.T; ++t) {
        if (a[t] <= 0.0) continue;
        bps.push_back((set.lower[t] - x[t]) / a[t]);
        bps.push_back((set.upper[t] - x[t]) / a[t]);
    }
    if (bps.empty()) return clamp_at(0.0);
    std::sort(bps.begin(), bps.end());

    double nu;
    if (resid(bps.front()) >= 0.0) {
        // residual is constant (= lower-energy deficit <= 0) left of the first
        // breakpoint, so the root sits exactly there
        nu = bps.front();
    } else if (resid(bps.back()) < 0.0) {
        nu = bps.back();  // rhs at the upper-energy cap (within nonempty() tol)
    } else {
        std::size_t lo = 0, hi = bps.size() - 1;  // resid(lo) < 0 <= resid(hi)
        while (hi - lo > 1) {
            const std::size_t mid = (lo + hi) / 2;
            if (resid(bps[mid]) < 0.0) lo = mid; else hi = mid;
        }
        const double ra = resid(bps[lo]), rb = resid(bps[hi]);
        nu = rb > ra ? bps[lo] + (0.0 - ra) * (bps[hi] - bps[lo]) / (rb - ra) : bps[hi];
    }
    return clamp_at(nu);
}

// ---- Fleet file I/O -------------------------------------------------------

inline std::vector<EvSpec> load_fleet(const std::string& path, double dt) {
    std::ifstream in(path);
    if (!in) throw ConfigError("fleet: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("fleet: " + path + " is empty");
    std::vector<EvSpec> fleet;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<std::string> cols;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
        if (cols.size() != 7)
            throw ConfigError("fleet: " + path + ": expected 7 columns, got " + std::to_string(cols.size()));
        EvSpec ev;
        ev.id = std::stoi(cols[0]);
        ev.bus = std::stoi(cols[1]);
        ev.p_max = std::stod(cols[2]);
        ev.eta = std::stod(cols[3]);
        ev.cap = std::stod(cols[4]);
        ev.soc_ini = std::stod(cols[5]);
        ev.soc_des = std::stod(cols[6]);
        ev.dt = dt;
        ev.validate();
        fleet.push_back(ev);
    }
    return fleet;
}

inline void save_fleet(const std::string& path, const std::vector<EvSpec>& fleet) {
    std::ofstream out(path);
    if (!out) throw ConfigError("fleet: cannot write " + path);
    out << "id,bus,p_max_kw,eta,cap_kwh,soc_ini,soc_des\n";
    for (const auto& ev : fleet)
        out << ev.id << ',' << ev.bus << ',' << fmt_double(ev.p_max) << ',' << fmt_double(ev.eta) << ','
            << fmt_double(ev.cap) << ',' << fmt_double(ev.soc_ini) << ',' << fmt_double(ev.soc_des) << '\n';
}

// Seeded fleet generator for the large scenarios.  Keeps every EV satisfiable
// on the given horizon with margin.
inline std::vector<EvSpec> generate_fleet(std::uint64_t seed, int count, int n_buses,
                                          int T, double dt) {
    Rng rng(seed);
    std::vector<EvSpec> fleet;
    fleet.reserve(count);
    for (int i = 0; i < count; ++i) {
        EvSpec ev;
        ev.id = i;
        ev.bus = rng.uniform_int(1, n_buses);
        ev.p_max = rng.uniform(3.3, 9.9);
        ev.eta = rng.uniform(0.85, 0.95);
        ev.cap = rng.uniform(24.0, 60.0);
        ev.soc_ini = rng.uniform(0.2, 0.5);
        ev.dt = dt;
        // desired SOC capped so E_req stays below ~40% of deliverable energy,
        // leaving headroom for attacks that concentrate charging in sub-windows
        const double deliverable = ev.eta * dt * ev.p_max * T;
        const double soc_max = std::min(1.0, ev.soc_ini + 0.4 * deliverable / ev.cap);
        ev.soc_des = rng.uniform(std::min(ev.soc_ini + 0.1, soc_max), soc_max);
        ev.validate();
        fleet.push_back(ev);
    }
    return fleet;
}

}  // namespace spdsim
