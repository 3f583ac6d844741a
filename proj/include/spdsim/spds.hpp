#pragma once

// Shrunken primal-dual subgradient solver.  One synchronized round:
//   collect primal reports -> operator computes gradients (through its I/O
//   channel) -> broadcast -> shrunken-projected agent updates -> shrunken
//   dual updates.  Attack perturbations enter either locally (primal attacks)
//   or through bus taps (dual attacks); the solver itself never edits data.

#include "spdsim/attacks.hpp"
#include "spdsim/comms.hpp"
#include "spdsim/problem.hpp"

#include <fstream>

namespace spdsim {

struct SpdsConfig {
    double tau_c = 0.99;
    double tau_mu = 0.99;
    double alpha0 = 0.0;       // 0 => 1 / (power-iteration Hessian norm estimate)
    double alpha_decay = 1e-3; // alpha_k = alpha0 / (1 + k * alpha_decay)
    double beta0 = 0.0;        // 0 => 0.1 * alpha0
    double beta_decay = 1e-3;
    double eps = 0.0;          // 0 => 1e-4 * sqrt(sT)
    int max_iter = 50000;
    double mu_max = 1e4;
    double lambda_max = 1e4;
    bool dual_change_criterion = false;  // additionally require small dual change
    double dual_eps = 0.0;

    void validate() const {
        if (!(tau_c > 0.0 && tau_c <= 1.0) || !(tau_mu > 0.0 && tau_mu <= 1.0))
            throw ConfigError("spds: shrinking parameters must lie in (0, 1]");
        if (alpha0 < 0.0 || beta0 < 0.0 || alpha_decay < 0.0 || beta_decay < 0.0)
            throw ConfigError("spds: step-size constants must be nonnegative");
        if (eps < 0.0 || max_iter < 1) throw ConfigError("spds: bad eps/max_iter");
        if (mu_max <= 0.0 || lambda_max <= 0.0) throw ConfigError("spds: dual caps must be positive");
    }
};

// Eq.-(11)-style update: project(tau*c - alpha*grad), unshrink, project again.
inline Vec primal_update(const Vec& c, const Vec& grad, const FeasibleSet& set,
                         double tau_c, double alpha) {
    const Vec inner = project_feasible(tau_c * c - alpha * grad, set);
    return project_feasible(inner / tau_c, set);
}

// Eq.-(12)-style update over the box [0, mu_max]^{nT}.
inline Vec dual_update(const Vec& mu, const Vec& dual_grad, double tau_mu, double beta,
                       double mu_max, double lo = 0.0) {
    auto clamp_box = [&](Vec v) {
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i], lo, mu_max);
        return v;
    };
    const Vec inner = clamp_box(tau_mu * mu + beta * dual_grad);
    return clamp_box(inner / tau_mu);
}

struct IterationTrace {
    std::vector<double> residual;
    std::vector<double> objective;
    std::vector<double> min_voltage_pu;  // NaN when no voltage coupling
    std::vector<std::string> attack_labels;
    std::vector<std::vector<double>> injection_norms;  // per iteration, per attack
    std::vector<std::vector<int>> gate_open;           // per iteration, per attack (-1 = ungated)
    bool mu_cap_saturated = false;

    int iters() const { return static_cast<int>(residual.size()); }

    void export_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ConfigError("trace: cannot write " + path);
        out << "iteration,residual,objective,min_voltage_pu";
        for (std::size_t a = 0; a < attack_labels.size(); ++a)
            out << ",inj_norm_" << a << ",gate_open_" << a;
        out << '\n';
        for (int k = 0; k < iters(); ++k) {
            out << (k + 1) << ',' << fmt_double(residual[k]) << ',' << fmt_double(objective[k])
                << ',' << fmt_double(min_voltage_pu[k]);
            for (std::size_t a = 0; a < attack_labels.size(); ++a)
                out << ',' << fmt_double(injection_norms[k][a]) << ',' << gate_open[k][a];
            out << '\n';
        }
    }
};

struct SpdsResult {
    Vec C;
    Vec mu;
    Vec lambda;
    bool converged = false;
    int iters = 0;
    IterationTrace trace;
};

inline SpdsResult spds_run(const ValleyFillingProblem& prob, SpdsConfig cfg,
                           AttackEngine* engine = nullptr, MessageBus* external_bus = nullptr) {
    cfg.validate();
    const int s = prob.s, T = prob.T;
    const bool has_v = prob.voltage_coupling;
    const bool has_eq = prob.coupling.has_value();
    const int mu_len = has_v ? prob.n * T : 0;
    const int lam_len = has_eq ? T : 0;

    MessageBus local_bus(LogMode::Off);
    MessageBus& bus = external_bus ? *external_bus : local_bus;

    BroadcastLayout bl{s, T, mu_len, lam_len};
    OperatorIoLayout ol{s, T, lam_len};
    if (engine) engine->install(bus, bl, ol);

    if (cfg.alpha0 == 0.0) cfg.alpha0 = 1.0 / std::max(1e-12, prob.hessian_norm_estimate());
    if (cfg.beta0 == 0.0) cfg.beta0 = 0.1 * cfg.alpha0;
    if (cfg.eps == 0.0) cfg.eps = 1e-4 * std::sqrt(static_cast<double>(prob.dim()));
    if (cfg.dual_eps == 0.0) cfg.dual_eps = cfg.eps;

    SpdsResult res;
    res.C = prob.project_blocks(Vec::Constant(prob.dim(), 0.5));
    res.mu = Vec::Zero(mu_len);
    res.lambda = Vec::Zero(lam_len);
    if (engine)
        for (const auto& st : engine->states()) res.trace.attack_labels.push_back(st.label);

    double residual_prev = std::numeric_limits<double>::infinity();

    for (int k = 1; k <= cfg.max_iter; ++k) {
        if (engine) engine->begin_round(k);

        // 1. agents report their current profiles
        Vec C_op(prob.dim());
        for (int i = 0; i < s; ++i) {
            const Vec c_i = prob.block(res.C, i);
            const ChannelKey ch{i, Direction::ToOperator};
            if (bus.log_mode() != LogMode::Off || bus.has_tap(ch))
                C_op.segment(static_cast<Eigen::Index>(i) * T, T) =
                    bus.deliver(MessageKind::PrimalReport, k, i, -1, ch, c_i);
            else
                C_op.segment(static_cast<Eigen::Index>(i) * T, T) = c_i;
        }

        // 2. operator computes the Lagrange gradients
        Vec grad_stack(prob.dim());
        for (int i = 0; i < s; ++i)
            grad_stack.segment(static_cast<Eigen::Index>(i) * T, T) =
                prob.lagrangian_grad_primal(C_op, res.mu, i, res.lambda);
        Vec eq_resid(lam_len);
        if (has_eq) {
            eq_resid = prob.coupling_residual(C_op);
            // operator I/O channel: DualFull taps falsify these two sections
            Vec io(ol.size());
            io.segment(ol.resid_off(), lam_len) = eq_resid;
            io.segment(ol.grad_off(0), prob.dim()) = grad_stack;
            io.segment(ol.lambda_off(), lam_len) = res.lambda;
            io.segment(ol.c_off(0), prob.dim()) = C_op;
            const ChannelKey ch{-1, Direction::OperatorIO};
            if (bus.log_mode() != LogMode::Off || bus.has_tap(ch))
                io = bus.deliver(MessageKind::OperatorInternal, k, -1, -1, ch, io);
            eq_resid = io.segment(ol.resid_off(), lam_len);
            grad_stack = io.segment(ol.grad_off(0), prob.dim());
        }

        // 3. broadcast, then shrunken-projected primal updates
        Vec payload(bl.size());
        payload.segment(0, prob.dim()) = grad_stack;
        if (mu_len > 0) payload.segment(bl.mu_off(), mu_len) = res.mu;
        if (lam_len > 0) payload.segment(bl.lambda_off(), lam_len) = res.lambda;
        payload[bl.residual_off()] = residual_prev;

        const double alpha = cfg.alpha0 / (1.0 + cfg.alpha_decay * (k - 1));
        const double beta = cfg.beta0 / (1.0 + cfg.beta_decay * (k - 1));
        Vec C_next(prob.dim());
        for (int i = 0; i < s; ++i) {
            const ChannelKey ch{i, Direction::FromOperator};
            Vec grad_i;
            if (bus.log_mode() != LogMode::Off || bus.has_tap(ch)) {
                const Vec seen = bus.deliver(MessageKind::DualBroadcast, k, -1, i, ch, payload);
                grad_i = seen.segment(bl.grad_off(i), T);
            } else {
                grad_i = payload.segment(bl.grad_off(i), T);
            }
            const Vec c_i = prob.block(res.C, i);
            if (engine) {
                engine->note_own_profile(i, c_i);
                grad_i += engine->primal_perturbation(i, c_i, k);
            }
            C_next.segment(static_cast<Eigen::Index>(i) * T, T) =
                primal_update(c_i, grad_i, prob.agents[i].set, cfg.tau_c, alpha);
        }

        // 4. shrunken dual updates
        double dual_change = 0.0;
        if (has_v) {
            const Vec mu_next = dual_update(res.mu, prob.lagrangian_grad_dual(C_op),
                                            cfg.tau_mu, beta, cfg.mu_max);
            dual_change += (mu_next - res.mu).squaredNorm();
            if (mu_next.maxCoeff() >= cfg.mu_max * (1.0 - 1e-12)) res.trace.mu_cap_saturated = true;
            res.mu = mu_next;
        }
        if (has_eq) {
            const Vec lam_next = dual_update(res.lambda, eq_resid, cfg.tau_mu, beta,
                                             cfg.lambda_max, -cfg.lambda_max);
            dual_change += (lam_next - res.lambda).squaredNorm();
            res.lambda = lam_next;
        }

        const double residual = (C_next - res.C).norm();
        res.C = C_next;
        res.iters = k;

        res.trace.residual.push_back(residual);
        res.trace.objective.push_back(prob.objective(res.C));
        if (has_v) {
            const Vec r = prob.voltage_residual(res.C);
            const double ymin = (Vec::Constant(r.size(), prob.vmin_sq) - r).minCoeff();
            res.trace.min_voltage_pu.push_back(ymin > 0.0 ? std::sqrt(ymin) : 0.0);
        } else {
            res.trace.min_voltage_pu.push_back(std::numeric_limits<double>::quiet_NaN());
        }
        if (engine) {
            std::vector<double> norms;
            std::vector<int> gates;
            for (const auto& st : engine->states()) {
                norms.push_back(st.injection_norm);
                gates.push_back(st.gate ? (st.gate->open_at(k) ? 1 : 0) : -1);
            }
            res.trace.injection_norms.push_back(std::move(norms));
            res.trace.gate_open.push_back(std::move(gates));
            engine->end_round(k, residual);
        } else {
            res.trace.injection_norms.emplace_back();
            res.trace.gate_open.emplace_back();
        }

        residual_prev = residual;
        if (residual <= cfg.eps &&
            (!cfg.dual_change_criterion || std::sqrt(dual_change) <= cfg.dual_eps)) {
            res.converged = true;
            break;
        }
    }
    return res;
}

}  // namespace spdsim
