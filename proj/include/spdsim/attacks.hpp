#pragma once

// Attack engine: primal gradient-injection vectors, stealth gating, and dual
// attacks (operator-side falsification and power-balance falsification via
// victim-channel taps).

#include "spdsim/comms.hpp"
#include "spdsim/problem.hpp"

#include <deque>
#include <limits>
#include <memory>
#include <set>

namespace spdsim {

// ---- Specs ----------------------------------------------------------------

struct GoalDescriptor {
    enum class Kind { Smooth, TimeTuning };
    Kind kind = Kind::Smooth;
    std::vector<int> theta;  // 1-based preferred slots, TimeTuning only
    double m = 0.2, M = 1e5;
};

struct SmoothChargingSpec {
    int attacker = 0;
    double omega = 1.0;
};

struct TimeTuningSpec {
    int attacker = 0;
    double omega = 1.0;
    std::vector<int> theta;  // 1-based
    double m = 0.2, M = 1e5;
};

struct BatteryDamageSpec {
    std::vector<int> victims;
    double omega = 1.0;
    int t_f = 2;
    double m = 0.2, M = 1e5;
};

struct DualFullSpec {
    int attacker = 0;
    double omega = 1.0;
    GoalDescriptor goal;
};

struct DualPowerBalanceSpec {
    int attacker = 0;
    std::vector<int> victims;  // must share the attacker's bus
    double omega = 1.0;
    double eps_s = std::numeric_limits<double>::infinity();
    GoalDescriptor goal;
};

struct StealthySpec;

using AttackSpec = std::variant<SmoothChargingSpec, TimeTuningSpec, BatteryDamageSpec,
                                StealthySpec, DualFullSpec, DualPowerBalanceSpec>;

struct StealthySpec {
    std::shared_ptr<AttackSpec> inner;  // must wrap a primal variant
    double eps_s = 0.0;
};

// ---- Reshape matrices -----------------------------------------------------

struct ReshapeMatrix {
    Vec diag;  // positive entries in {m, M}
};

inline ReshapeMatrix time_tuning_matrix(const std::vector<int>& theta, double m, double M, int T) {
    if (theta.empty()) throw ConfigError("time_tuning_matrix: preferred slot set must be nonempty");
    if (!(m > 0.0 && m < M)) throw ConfigError("time_tuning_matrix: need 0 < m < M");
    std::set<int> th(theta.begin(), theta.end());
    for (int t : th)
        if (t < 1 || t > T) throw ConfigError("time_tuning_matrix: slot index out of 1..T");
    ReshapeMatrix A;
    A.diag = Vec::Constant(T, M);
    for (int t : th) A.diag[t - 1] = m;
    return A;
}

// Small weights at 1-based slots that are multiples of t_f.
inline ReshapeMatrix battery_damage_matrix(int t_f, double m, double M, int T) {
    if (t_f < 1) throw ConfigError("battery_damage_matrix: t_f must be >= 1");
    if (!(m > 0.0 && m < M)) throw ConfigError("battery_damage_matrix: need 0 < m < M");
    ReshapeMatrix A;
    A.diag = Vec::Constant(T, M);
    for (int t = 1; t <= T; ++t)
        if (t % t_f == 0) A.diag[t - 1] = m;
    return A;
}

// Subgradient bound of g(c) = ||diag .* c||^2 over the unit box.
inline double reshape_lipschitz(const Vec& diag, int T) {
    const double a2 = diag.cwiseProduct(diag).maxCoeff();
    return 2.0 * a2 * std::sqrt(static_cast<double>(T));
}

// ---- Stealth gate ---------------------------------------------------------

// Latched one-way gate: stays closed until the observed residual proxy drops
// to eps_s at activation round l; injections are allowed only for rounds > l.
class StealthGate {
  public:
    explicit StealthGate(double eps_s) : eps_s_(eps_s) {
        // the non-stealthy limit: open from the first round
        if (std::isinf(eps_s)) activation_round_ = 0;
    }

    void observe(int round, double residual) {
        if (activation_round_ < 0 && residual <= eps_s_) activation_round_ = round;
    }
    bool open_at(int round) const { return activation_round_ >= 0 && round > activation_round_; }
    int activation_round() const { return activation_round_; }
    bool latched() const { return activation_round_ >= 0; }

  private:
    double eps_s_;
    int activation_round_ = -1;
};

inline bool stealth_filter(const StealthGate& gate, int round) { return gate.open_at(round); }

// ---- Operator-side falsification (Theorem-3 construction) -----------------

// Phi(C, lambda) = (omega / ||lambda||^2) g(C) lambda, zero at lambda = 0.
inline Vec dual_injection_full(const Vec& lambda, double g_value, double omega) {
    const double n2 = lambda.squaredNorm();
    if (n2 == 0.0) return Vec::Zero(lambda.size());
    return (omega * g_value / n2) * lambda;
}

// ---- Wire-protocol layouts ------------------------------------------------

// DualBroadcast payload: [grad stack (sT) | mu (nT) | lambda (cT) | residual].
struct BroadcastLayout {
    int s = 0, T = 0, mu_len = 0, lambda_len = 0;
    Eigen::Index grad_off(int agent) const { return static_cast<Eigen::Index>(agent) * T; }
    Eigen::Index mu_off() const { return static_cast<Eigen::Index>(s) * T; }
    Eigen::Index lambda_off() const { return mu_off() + mu_len; }
    Eigen::Index residual_off() const { return lambda_off() + lambda_len; }
    Eigen::Index size() const { return residual_off() + 1; }
};

// OperatorIO payload: [coupling residual (cT) | grad stack (sT) | lambda (cT) | C (sT)].
struct OperatorIoLayout {
    int s = 0, T = 0, lambda_len = 0;
    Eigen::Index resid_off() const { return 0; }
    Eigen::Index grad_off(int agent = 0) const { return lambda_len + static_cast<Eigen::Index>(agent) * T; }
    Eigen::Index lambda_off() const { return lambda_len + static_cast<Eigen::Index>(s) * T; }
    Eigen::Index c_off(int agent = 0) const { return lambda_off() + lambda_len + static_cast<Eigen::Index>(agent) * T; }
    Eigen::Index size() const { return 2 * static_cast<Eigen::Index>(s) * T + 2 * lambda_len; }
};

// ---- Attack engine --------------------------------------------------------

// Ideal attacker profile implied by a goal: flat (minimum-norm feasible) for
// smooth charging; greedy fill of the preferred slots for time tuning.
inline Vec goal_target_profile(const GoalDescriptor& goal, const FeasibleSet& set) {
    if (goal.kind == GoalDescriptor::Kind::Smooth)
        return project_feasible(Vec::Zero(set.T), set);
    Vec c = Vec::Zero(set.T);
    double remaining = set.eq_rhs;
    std::vector<int> order;
    std::set<int> th(goal.theta.begin(), goal.theta.end());
    for (int t : th) order.push_back(t - 1);
    for (int t = 0; t < set.T; ++t)
        if (!th.count(t + 1)) order.push_back(t);
    for (int idx : order) {
        if (remaining <= 0.0) break;
        const double cap = set.eq_coeff[idx] * set.upper[idx];
        const double take = std::min(remaining, cap);
        c[idx] = set.eq_coeff[idx] > 0.0 ? take / set.eq_coeff[idx] : 0.0;
        remaining -= take;
    }
    return c;
}

class AttackEngine {
  public:
    struct AttackState {
        std::string label;
        int owner = -1;
        double injection_norm = 0.0;      // current round
        const StealthGate* gate = nullptr;  // null when ungated
    };

    AttackEngine(std::vector<AttackSpec> specs, const ValleyFillingProblem& prob)
        : prob_(&prob) {
        for (auto& spec : specs) add_spec(spec, nullptr);
        own_profiles_.assign(prob.s, Vec());
    }

    // Wire dual attacks into the bus.  Must be called before the run starts.
    void install(MessageBus& bus, const BroadcastLayout& bl, const OperatorIoLayout& ol) {
        for (auto& pb : power_balance_) {
            for (std::size_t j = 0; j < pb.victims.size(); ++j) {
                const int v = pb.victims[j];
                auto* st = &pb;
                // wiretap: identity transform that records the victim's report
                bus.register_tap({{v, Direction::ToOperator}, pb.attacker,
                                  [st, j](int, const Vec& payload) {
                                      st->latest_victim[j] = payload;
                                      return payload;
                                  }});
                // injection: perturb the victim's gradient slice once the gate opens
                const std::size_t idx = pb.state_idx;
                bus.register_tap({{v, Direction::FromOperator}, pb.attacker,
                                  [this, st, v, bl, idx](int round, const Vec& payload) {
                                      if (!st->gate->open_at(round) || !st->snapshot_ready) return payload;
                                      Vec out = payload;
                                      Vec pert = st->victim_grad(v, prob_->T);
                                      out.segment(bl.grad_off(v), bl.T) += pert;
                                      states_[idx].injection_norm =
                                          std::hypot(states_[idx].injection_norm, pert.norm());
                                      return out;
                                  }});
            }
        }
        for (auto& df : dual_full_) {
            if (ol.lambda_len == 0)
                throw ConfigError("dual_full attack requires a problem with an equality coupling");
            const std::size_t idx = df.state_idx;
            auto* st = &df;
            bus.register_tap({{-1, Direction::OperatorIO}, df.attacker,
                              [this, st, ol, idx](int, const Vec& payload) {
                                  Vec out = payload;
                                  const Vec lambda = payload.segment(ol.lambda_off(), ol.lambda_len);
                                  const Vec c_att = payload.segment(ol.c_off(st->attacker), ol.T);
                                  const double g = st->diag.cwiseProduct(c_att).squaredNorm();
                                  const Vec phi = dual_injection_full(lambda, g, st->omega);
                                  out.segment(ol.resid_off(), ol.lambda_len) += phi;
                                  // grad_C(lambda^T Phi) = omega * grad g, attacker block only
                                  const Vec gg = 2.0 * st->omega *
                                                 st->diag.cwiseProduct(st->diag).cwiseProduct(c_att);
                                  out.segment(ol.grad_off(st->attacker), ol.T) += gg;
                                  states_[idx].injection_norm =
                                      std::hypot(phi.norm(), gg.norm());
                                  return out;
                              }});
        }
    }

    void begin_round(int round) {
        for (auto& st : states_) st.injection_norm = 0.0;
        round_ = round;
    }

    // Called after the round's residual is known: gates observe it (so the
    // activation round is exactly the round whose residual reaches eps_s, and
    // injections start the following round), then power-balance snapshots are
    // captured at the end of the activation round.
    void end_round(int round, double observed_residual) {
        for (auto& p : primal_)
            if (p.gate) p.gate->observe(round, observed_residual);
        for (auto& pb : power_balance_) pb.gate->observe(round, observed_residual);
        for (auto& pb : power_balance_) {
            if (pb.snapshot_ready || !pb.gate->latched() || round < pb.gate->activation_round()) continue;
            bool have_all = true;
            for (const auto& v : pb.latest_victim)
                if (v.size() == 0) have_all = false;
            if (!have_all || own_profiles_[pb.attacker].size() == 0) continue;
            // c_bar = estimated normalized net bus injection minus the target profile
            Vec cbar = own_profiles_[pb.attacker] - pb.target;
            for (std::size_t j = 0; j < pb.victims.size(); ++j)
                cbar += pb.coefs[static_cast<Eigen::Index>(j)] * pb.latest_victim[j];
            pb.cbar = cbar;
            pb.snapshot_ready = true;
        }
    }

    // The attacker knows its own current profile without tapping anything.
    void note_own_profile(int agent, const Vec& c) {
        if (agent >= 0 && agent < static_cast<int>(own_profiles_.size())) own_profiles_[agent] = c;
    }

    // Summed local gradient perturbation for agent i's primal update.
    Vec primal_perturbation(int i, const Vec& c_i, int round) {
        Vec pert = Vec::Zero(prob_->T);
        for (auto& p : primal_) {
            if (p.agent != i) continue;
            if (p.gate && !p.gate->open_at(round)) continue;
            const Vec add = 2.0 * p.omega * p.diag.cwiseProduct(p.diag).cwiseProduct(c_i);
            pert += add;
            states_[p.state_idx].injection_norm = std::hypot(states_[p.state_idx].injection_norm, add.norm());
        }
        return pert;
    }

    const std::vector<AttackState>& states() const { return states_; }
    std::size_t count() const { return states_.size(); }

    // Goal terms of the equivalent centralized under-attack problem; used by
    // the analysis module and the equivalence tests.  Power-balance goals need
    // a captured snapshot and are only included once one exists.
    std::vector<GoalTerm> goal_terms() const {
        std::vector<GoalTerm> out;
        for (const auto& p : primal_) out.push_back(DiagQuadGoal{p.agent, p.omega, p.diag});
        for (const auto& df : dual_full_) out.push_back(DiagQuadGoal{df.attacker, df.omega, df.diag});
        for (const auto& pb : power_balance_)
            if (pb.snapshot_ready)
                out.push_back(CrossQuadGoal{pb.victims, pb.coefs, pb.cbar, pb.omega});
        return out;
    }

    // (omega_i, L_{g_i}) pairs for the deviation-bound formula.
    std::vector<std::pair<double, double>> omega_lipschitz() const {
        std::vector<std::pair<double, double>> out;
        for (const auto& p : primal_)
            out.push_back({p.omega, reshape_lipschitz(p.diag, prob_->T)});
        for (const auto& df : dual_full_)
            out.push_back({df.omega, reshape_lipschitz(df.diag, prob_->T)});
        for (const auto& pb : power_balance_) {
            const double rmax = (pb.snapshot_ready ? pb.cbar.norm() : 0.0) +
                                pb.coefs.template lpNorm<1>() * std::sqrt(static_cast<double>(prob_->T));
            out.push_back({pb.omega, 2.0 * pb.coefs.norm() * rmax});
        }
        return out;
    }

  private:
    struct PrimalInjection {
        int agent = 0;
        double omega = 0.0;
        Vec diag;
        std::shared_ptr<StealthGate> gate;  // null when ungated
        std::size_t state_idx = 0;
    };
    struct PowerBalance {
        int attacker = 0;
        std::vector<int> victims;
        Vec coefs;   // pbar ratios pbar_victim / pbar_attacker
        Vec target;  // attacker's ideal profile
        double omega = 0.0;
        std::shared_ptr<StealthGate> gate;  // shared with the attacker's self-injection
        std::vector<Vec> latest_victim;
        Vec cbar;
        bool snapshot_ready = false;
        std::size_t state_idx = 0;

        explicit PowerBalance(std::shared_ptr<StealthGate> g) : gate(std::move(g)) {}

        Vec victim_grad(int victim, int T) const {
            // grad wrt c_victim of omega * || cbar - sum coefs_j c_j ||^2
            Vec r = cbar;
            for (std::size_t j = 0; j < victims.size(); ++j)
                r -= coefs[static_cast<Eigen::Index>(j)] * latest_victim[j];
            for (std::size_t j = 0; j < victims.size(); ++j)
                if (victims[j] == victim)
                    return Vec(-2.0 * omega * coefs[static_cast<Eigen::Index>(j)] * r);
            return Vec::Zero(T);
        }
    };
    struct DualFullRt {
        int attacker = 0;
        double omega = 0.0;
        Vec diag;
        std::size_t state_idx = 0;
    };

    void check_agent(int i, const char* what) const {
        if (i < 0 || i >= prob_->s)
            throw ConfigError(std::string(what) + ": agent index " + std::to_string(i) + " out of range");
    }

    Vec goal_diag(const GoalDescriptor& goal) const {
        if (goal.kind == GoalDescriptor::Kind::Smooth) return Vec::Ones(prob_->T);
        return time_tuning_matrix(goal.theta, goal.m, goal.M, prob_->T).diag;
    }

    void add_spec(const AttackSpec& spec, std::shared_ptr<StealthGate> gate) {
        std::visit(
            [&](const auto& a) { add_one(a, gate); },
            spec);
    }

    void add_one(const SmoothChargingSpec& a, std::shared_ptr<StealthGate> gate) {
        if (a.omega <= 0.0) throw ConfigError("smooth_charging: omega must be positive");
        check_agent(a.attacker, "smooth_charging");
        states_.push_back({"smooth_charging", a.attacker, 0.0, gate.get()});
        primal_.push_back({a.attacker, a.omega, Vec::Ones(prob_->T), gate, states_.size() - 1});
    }
    void add_one(const TimeTuningSpec& a, std::shared_ptr<StealthGate> gate) {
        if (a.omega <= 0.0) throw ConfigError("time_tuning: omega must be positive");
        check_agent(a.attacker, "time_tuning");
        states_.push_back({"time_tuning", a.attacker, 0.0, gate.get()});
        primal_.push_back({a.attacker, a.omega, time_tuning_matrix(a.theta, a.m, a.M, prob_->T).diag,
                           gate, states_.size() - 1});
    }
    void add_one(const BatteryDamageSpec& a, std::shared_ptr<StealthGate> gate) {
        if (a.omega <= 0.0) throw ConfigError("battery_damage: omega must be positive");
        const Vec diag = battery_damage_matrix(a.t_f, a.m, a.M, prob_->T).diag;
        for (int v : a.victims) {
            check_agent(v, "battery_damage");
            states_.push_back({"battery_damage", v, 0.0, gate.get()});
            primal_.push_back({v, a.omega, diag, gate, states_.size() - 1});
        }
    }
    void add_one(const StealthySpec& a, std::shared_ptr<StealthGate>) {
        if (!a.inner) throw ConfigError("stealthy: missing inner attack");
        if (std::holds_alternative<DualFullSpec>(*a.inner) ||
            std::holds_alternative<DualPowerBalanceSpec>(*a.inner) ||
            std::holds_alternative<StealthySpec>(*a.inner))
            throw ConfigError("stealthy: inner attack must be a primal variant");
        add_spec(*a.inner, std::make_shared<StealthGate>(a.eps_s));
    }
    void add_one(const DualFullSpec& a, std::shared_ptr<StealthGate>) {
        if (a.omega <= 0.0) throw ConfigError("dual_full: omega must be positive");
        check_agent(a.attacker, "dual_full");
        dual_full_.push_back({a.attacker, a.omega, goal_diag(a.goal), states_.size()});
        states_.push_back({"dual_full", a.attacker, 0.0, nullptr});
    }
    void add_one(const DualPowerBalanceSpec& a, std::shared_ptr<StealthGate>) {
        if (a.omega <= 0.0) throw ConfigError("dual_power_balance: omega must be positive");
        check_agent(a.attacker, "dual_power_balance");
        if (a.victims.empty()) {
            // zero-victim spec is a declared no-op
            states_.push_back({"dual_power_balance", a.attacker, 0.0, nullptr});
            return;
        }
        auto gate = std::make_shared<StealthGate>(a.eps_s);
        PowerBalance pb(gate);
        pb.attacker = a.attacker;
        pb.omega = a.omega;
        const int bus = prob_->agents[a.attacker].spec.bus;
        pb.coefs = Vec(static_cast<Eigen::Index>(a.victims.size()));
        for (std::size_t j = 0; j < a.victims.size(); ++j) {
            const int v = a.victims[j];
            check_agent(v, "dual_power_balance");
            if (v == a.attacker)
                throw ConfigError("dual_power_balance: attacker cannot be its own victim");
            if (prob_->agents[v].spec.bus != bus)
                throw ConfigError("dual_power_balance: victim " + std::to_string(v) +
                                  " is not on the attacker's bus");
            pb.coefs[static_cast<Eigen::Index>(j)] =
                prob_->agents[v].spec.p_max / prob_->agents[a.attacker].spec.p_max;
        }
        pb.victims = a.victims;
        pb.latest_victim.assign(a.victims.size(), Vec());
        pb.target = goal_target_profile(a.goal, prob_->agents[a.attacker].set);
        pb.state_idx = states_.size();
        states_.push_back({"dual_power_balance", a.attacker, 0.0, gate.get()});
        power_balance_.emplace_back(std::move(pb));
        // the attacker drives itself toward the goal locally; the victim-side
        // falsification masks the resulting aggregate change
        primal_.push_back({a.attacker, a.omega, goal_diag(a.goal), gate, states_.size() - 1});
    }

    const ValleyFillingProblem* prob_;
    std::vector<PrimalInjection> primal_;
    std::deque<PowerBalance> power_balance_;
    std::deque<DualFullRt> dual_full_;
    std::vector<AttackState> states_;
    std::vector<Vec> own_profiles_;
    int round_ = 0;
};

}  // namespace spdsim
