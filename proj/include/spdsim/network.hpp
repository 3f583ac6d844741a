#pragma once

// Linearized single-phase distribution feeder: maps bus power injections to
// squared nodal voltage magnitudes, V(t) = V0 - 2 R P(t) - 2 X Q(t).
//
// Bus 0 is the slack (feeder head) and is not part of the modeled n buses.
// R and X are path-impedance matrices built from the line list: entry (i, j)
// is the summed impedance of the lines shared by the slack->i and slack->j
// paths.  Internally R and X are scaled so that with P in kW the drop term
// 2 R P comes out directly in p.u.^2 of the declared voltage base.

#include "spdsim/common.hpp"
#include "spdsim/fleet.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace spdsim {

struct DistributionNetwork {
    int n = 0;          // modeled bus count (slack excluded)
    Mat R;              // n x n, p.u.^2 per kW
    Mat X;              // n x n, p.u.^2 per kvar
    double v0_sq = 1.0; // slack squared voltage magnitude, p.u.^2
    double v_floor = 0.0; // voltage magnitude lower bound, p.u.

    void validate() const {
        if (n < 1) throw ConfigError("network: n must be >= 1");
        if (R.rows() != n || R.cols() != n || X.rows() != n || X.cols() != n)
            throw ConfigError("network: R/X must be n x n");
        if (v0_sq <= 0.0) throw ConfigError("network: V0 must be positive");
        if (!(v_floor > 0.0 && v_floor < 1.0))
            throw ConfigError("network: v_floor must lie in (0, 1)");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (R(i, j) < 0.0 || X(i, j) < 0.0)
                    throw ConfigError("network: R/X entries must be nonnegative");
                if (std::abs(R(i, j) - R(j, i)) > 1e-15 || std::abs(X(i, j) - X(j, i)) > 1e-15)
                    throw ConfigError("network: R/X must be symmetric");
            }
    }
};

struct Line {
    int from = 0;
    int to = 0;
    double r_ohm = 0.0;
    double x_ohm = 0.0;
};

// Shared-path impedance construction.  Lines must form a tree rooted at the
// slack bus 0 over buses 0..n.
inline DistributionNetwork build_network(int n, const std::vector<Line>& lines,
                                         double v0_pu, double v_floor_pu,
                                         double v_base_kv) {
    if (n < 1) throw ConfigError("network: n must be >= 1");
    if (static_cast<int>(lines.size()) != n)
        throw ConfigError("network: a radial feeder over n buses needs exactly n lines");
    std::vector<int> parent(n + 1, -1);
    std::vector<double> r_up(n + 1, 0.0), x_up(n + 1, 0.0);
    for (const auto& ln : lines) {
        int a = ln.from, b = ln.to;
        if (a < 0 || a > n || b < 0 || b > n || a == b)
            throw ConfigError("network: line endpoints out of range");
        if (ln.r_ohm < 0.0 || ln.x_ohm < 0.0)
            throw ConfigError("network: line impedances must be nonnegative");
    }
    // Orient lines away from the slack by BFS.
    std::vector<std::vector<std::pair<int, const Line*>>> adj(n + 1);
    for (const auto& ln : lines) {
        adj[ln.from].push_back({ln.to, &ln});
        adj[ln.to].push_back({ln.from, &ln});
    }
    std::vector<int> order;
    std::vector<char> seen(n + 1, 0);
    order.push_back(0);
    seen[0] = 1;
    for (std::size_t q = 0; q < order.size(); ++q) {
        int u = order[q];
        for (auto [v, ln] : adj[u]) {
            if (seen[v]) continue;
            seen[v] = 1;
            parent[v] = u;
            r_up[v] = ln->r_ohm;
            x_up[v] = ln->x_ohm;
            order.push_back(v);
        }
    }
    for (int b = 0; b <= n; ++b)
        if (!seen[b]) throw ConfigError("network: bus " + std::to_string(b) + " unreachable from slack");

    // Path sets, then pairwise shared-path sums.
    std::vector<std::vector<int>> path(n + 1);  // buses on slack->b path, excluding slack
    for (int b = 1; b <= n; ++b) {
        for (int u = b; u != 0; u = parent[u]) path[b].push_back(u);
    }
    const double v_base_v = v_base_kv * 1e3;
    const double ohm_to_pu2_per_kw = 1e3 / (v_base_v * v_base_v);
    DistributionNetwork net;
    net.n = n;
    net.R = Mat::Zero(n, n);
    net.X = Mat::Zero(n, n);
    net.v0_sq = v0_pu * v0_pu;
    net.v_floor = v_floor_pu;
    std::vector<char> on_path(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        for (int u : path[i]) on_path[u] = 1;
        for (int j = 1; j <= n; ++j) {
            double r = 0.0, x = 0.0;
            for (int u : path[j])
                if (on_path[u]) {
                    r += r_up[u];
                    x += x_up[u];
                }
            net.R(i - 1, j - 1) = r * ohm_to_pu2_per_kw;
            net.X(i - 1, j - 1) = x * ohm_to_pu2_per_kw;
        }
        for (int u : path[i]) on_path[u] = 0;
    }
    net.validate();
    return net;
}

inline DistributionNetwork load_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("network: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("network: " + path + ": " + e.what());
    }
    for (const char* key : {"n", "lines", "v0_pu", "v_floor_pu"})
        if (!j.contains(key)) throw ConfigError("network: " + path + ": missing field '" + key + "'");
    std::vector<Line> lines;
    for (const auto& lj : j["lines"]) {
        Line ln;
        ln.from = lj.at("from").get<int>();
        ln.to = lj.at("to").get<int>();
        ln.r_ohm = lj.at("r_ohm").get<double>();
        ln.x_ohm = lj.at("x_ohm").get<double>();
        lines.push_back(ln);
    }
    const double v_base_kv = j.value("v_base_kv", 4.16);
    return build_network(j["n"].get<int>(), lines, j["v0_pu"].get<double>(),
                         j["v_floor_pu"].get<double>(), v_base_kv);
}

struct BaselineProfile {
    Mat p_base;  // n x T, kW
    Mat q_base;  // n x T, kvar
    Vec agg;     // length T, column sums of p_base

    int horizon() const { return static_cast<int>(p_base.cols()); }

    void finalize() {
        if (q_base.size() == 0) q_base = Mat::Zero(p_base.rows(), p_base.cols());
        if (q_base.rows() != p_base.rows() || q_base.cols() != p_base.cols())
            throw ConfigError("baseline: p/q dimension mismatch");
        if (!p_base.allFinite() || !q_base.allFinite())
            throw ConfigError("baseline: entries must be finite");
        agg = p_base.colwise().sum().transpose();
    }
};

// CSV with header `bus,t0,t1,...`; one row per modeled bus (1-based bus ids).
inline Mat load_bus_series(const std::string& path, int n) {
    std::ifstream in(path);
    if (!in) throw ConfigError("baseline: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("baseline: " + path + " is empty");
    int ncols = 0;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) ++ncols;
    }
    const int T = ncols - 1;
    if (T < 1) throw ConfigError("baseline: " + path + ": no time columns");
    Mat m = Mat::Zero(n, T);
    std::vector<char> filled(n, 0);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        const int bus = std::stoi(tok);
        if (bus < 1 || bus > n)
            throw ConfigError("baseline: " + path + ": bus " + tok + " out of range 1.." + std::to_string(n));
        for (int t = 0; t < T; ++t) {
            if (!std::getline(ss, tok, ','))
                throw ConfigError("baseline: " + path + ": short row for bus " + std::to_string(bus));
            m(bus - 1, t) = std::stod(tok);
        }
        filled[bus - 1] = 1;
    }
    for (int b = 0; b < n; ++b)
        if (!filled[b]) throw ConfigError("baseline: " + path + ": missing row for bus " + std::to_string(b + 1));
    return m;
}

inline BaselineProfile load_baseline(const std::string& p_path, int n,
                                     const std::string& q_path = "") {
    BaselineProfile base;
    base.p_base = load_bus_series(p_path, n);
    if (!q_path.empty()) base.q_base = load_bus_series(q_path, n);
    base.finalize();
    return base;
}

// Squared-voltage drop caused by the baseline load at time t:
//   V_b(t) = 2 R p_base(t) + 2 X q_base(t).
inline Vec baseline_voltage_drop(const DistributionNetwork& net, const BaselineProfile& base, int t) {
    if (base.p_base.rows() != net.n)
        throw ConfigError("baseline_voltage_drop: baseline has wrong bus count");
    if (t < 0 || t >= base.horizon())
        throw ConfigError("baseline_voltage_drop: time index out of range");
    Vec vb = 2.0 * net.R * base.p_base.col(t) + 2.0 * net.X * base.q_base.col(t);
    for (int b = 0; b < net.n; ++b)
        if (!(net.v0_sq - vb[b] > 0.0))
            throw InfeasibleError("baseline_voltage_drop: pre-charging voltage nonpositive at bus " +
                                  std::to_string(b + 1) + ", t=" + std::to_string(t));
    return vb;
}

struct InjectionModel {
    Mat G;     // n x s, 0/1 bus incidence
    Vec pbar;  // length s, diagonal of Pbar (kW)
    Mat D;     // n x s, -2 R G Pbar (p.u.^2 per unit rate)
    Vec y_d;   // length n*T, stacked V0 - V_b(t)
    int n = 0, s = 0, T = 0;

    Vec y_d_at(int t) const { return y_d.segment(static_cast<Eigen::Index>(t) * n, n); }
};

inline InjectionModel build_injection_model(const DistributionNetwork& net,
                                            const std::vector<EvSpec>& fleet,
                                            const BaselineProfile& base) {
    InjectionModel inj;
    inj.n = net.n;
    inj.s = static_cast<int>(fleet.size());
    inj.T = base.horizon();
    inj.G = Mat::Zero(inj.n, inj.s);
    inj.pbar = Vec::Zero(inj.s);
    for (int i = 0; i < inj.s; ++i) {
        const auto& ev = fleet[i];
        if (ev.bus < 1 || ev.bus > net.n)
            throw ConfigError("injection model: EV " + std::to_string(ev.id) + " assigned to nonexistent bus " +
                              std::to_string(ev.bus));
        inj.G(ev.bus - 1, i) = 1.0;
        inj.pbar[i] = ev.p_max;
    }
    inj.D = -2.0 * net.R * inj.G * inj.pbar.asDiagonal();
    inj.y_d = Vec::Zero(static_cast<Eigen::Index>(inj.n) * inj.T);
    for (int t = 0; t < inj.T; ++t) {
        const Vec vb = baseline_voltage_drop(net, base, t);
        inj.y_d.segment(static_cast<Eigen::Index>(t) * inj.n, inj.n) =
            Vec::Constant(inj.n, net.v0_sq) - vb;
    }
    return inj;
}

// y(t) = y_d(t) + D C(t); C(t) is the length-s vector of charging rates.
inline Vec nodal_voltages(const InjectionModel& inj, const Vec& C_t, int t) {
    if (C_t.size() != inj.s) throw ConfigError("nodal_voltages: C has wrong size");
    if (t < 0 || t >= inj.T) throw ConfigError("nodal_voltages: time index out of range");
    return inj.y_d_at(t) + inj.D * C_t;
}

}  // namespace spdsim
