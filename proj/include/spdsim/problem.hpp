#pragma once

// Valley-filling optimization assembly: objective, voltage coupling rows,
// optional explicit equality coupling, Lagrangian gradients, and an
// augmented-Lagrangian reference solver that is independent of the SPDS
// iteration and serves as the ground-truth oracle.
//
// Stacking conventions:
//   C  in R^{sT}: agent-major, c_i = C.segment(i*T, T)
//   mu in R^{nT}: time-major, mu_t = mu.segment(t*n, n)

#include "spdsim/common.hpp"
#include "spdsim/fleet.hpp"
#include "spdsim/network.hpp"

#include <optional>
#include <variant>

namespace spdsim {

struct AgentData {
    EvSpec spec;
    FeasibleSet set;
};

// Equality coupling R(C) = sum_i w_i c_i - rhs = 0 over the horizon.  The
// valley-filling instance of the formulation has no such row; it exists for
// the toy problems that exercise the operator-side dual manipulation.
struct EqualityCoupling {
    Vec weights;  // length s
    Vec rhs;      // length T
};

struct ValleyFillingProblem {
    std::vector<AgentData> agents;
    Vec P_b;       // length T, aggregated baseline load (kW)
    Mat D;         // n x s injection matrix (p.u.^2 per unit rate)
    Vec Ycal_b;    // length nT, v_floor^2 * V0 - y_d, time-major
    double delta = 0.0;  // Tikhonov regularizer coefficient
    double vmin_sq = 0.0;  // v_floor^2 * V0, the squared-voltage floor (p.u.^2)
    int n = 0, s = 0, T = 0;
    bool voltage_coupling = true;
    std::optional<EqualityCoupling> coupling;

    Eigen::Index dim() const { return static_cast<Eigen::Index>(s) * T; }
    Eigen::Index dual_dim() const { return voltage_coupling ? static_cast<Eigen::Index>(n) * T : 0; }

    Vec block(const Vec& C, int i) const { return C.segment(static_cast<Eigen::Index>(i) * T, T); }

    Vec total_load(const Vec& C) const {
        Vec total = P_b;
        for (int i = 0; i < s; ++i)
            total += agents[i].spec.p_max * C.segment(static_cast<Eigen::Index>(i) * T, T);
        return total;
    }

    double objective(const Vec& C) const {
        if (C.size() != dim()) throw ConfigError("objective: C has wrong size");
        double f = 0.5 * total_load(C).squaredNorm();
        if (delta > 0.0) f += 0.5 * delta * C.squaredNorm();
        return f;
    }

    // Voltage-row residual Ycal_b - sum_i Dcal_i c_i; feasible iff <= 0.
    Vec voltage_residual(const Vec& C) const {
        Vec r = Ycal_b;
        for (int t = 0; t < T; ++t) {
            Vec ct(s);
            for (int i = 0; i < s; ++i) ct[i] = C[static_cast<Eigen::Index>(i) * T + t];
            r.segment(static_cast<Eigen::Index>(t) * n, n) -= D * ct;
        }
        return r;
    }

    Vec coupling_residual(const Vec& C) const {
        if (!coupling) return Vec();
        Vec r = -coupling->rhs;
        for (int i = 0; i < s; ++i)
            r += coupling->weights[i] * C.segment(static_cast<Eigen::Index>(i) * T, T);
        return r;
    }

    // Nodal squared voltages from the stacked profile, time-major nT vector.
    Vec stacked_voltages(const Vec& C, const InjectionModel& inj) const {
        Vec y(static_cast<Eigen::Index>(n) * T);
        for (int t = 0; t < T; ++t) {
            Vec ct(s);
            for (int i = 0; i < s; ++i) ct[i] = C[static_cast<Eigen::Index>(i) * T + t];
            y.segment(static_cast<Eigen::Index>(t) * n, n) = nodal_voltages(inj, ct, t);
        }
        return y;
    }

    Vec grad_objective(const Vec& C) const {
        const Vec total = total_load(C);
        Vec g(dim());
        for (int i = 0; i < s; ++i)
            g.segment(static_cast<Eigen::Index>(i) * T, T) = agents[i].spec.p_max * total;
        if (delta > 0.0) g += delta * C;
        return g;
    }

    // Dcal_i^T mu, the voltage-coupling pullback into agent i's block.
    Vec dcal_transpose_mu(int i, const Vec& mu) const {
        Vec out(T);
        for (int t = 0; t < T; ++t)
            out[t] = D.col(i).dot(mu.segment(static_cast<Eigen::Index>(t) * n, n));
        return out;
    }

    // grad_{c_i} of the relaxed Lagrangian (mu on voltage rows, lambda on the
    // optional equality coupling).
    Vec lagrangian_grad_primal(const Vec& C, const Vec& mu, int i, const Vec& lambda = Vec()) const {
        Vec g = agents[i].spec.p_max * total_load(C);
        if (delta > 0.0) g += delta * block(C, i);
        if (voltage_coupling && mu.size() > 0) g -= dcal_transpose_mu(i, mu);
        if (coupling && lambda.size() > 0) g += coupling->weights[i] * lambda;
        return g;
    }

    // grad_mu of the Lagrangian: the voltage coupling residual.
    Vec lagrangian_grad_dual(const Vec& C) const { return voltage_residual(C); }

    double lagrangian(const Vec& C, const Vec& mu, const Vec& lambda = Vec()) const {
        double L = objective(C);
        if (voltage_coupling && mu.size() > 0) L += mu.dot(voltage_residual(C));
        if (coupling && lambda.size() > 0) L += lambda.dot(coupling_residual(C));
        return L;
    }

    // Power-iteration bound on the objective Hessian spectral norm.
    double hessian_norm_estimate(int iters = 60) const {
        Vec v = Vec::Ones(dim()).normalized();
        double lam = 0.0;
        for (int k = 0; k < iters; ++k) {
            Vec agg = Vec::Zero(T);
            for (int i = 0; i < s; ++i)
                agg += agents[i].spec.p_max * v.segment(static_cast<Eigen::Index>(i) * T, T);
            Vec hv(dim());
            for (int i = 0; i < s; ++i)
                hv.segment(static_cast<Eigen::Index>(i) * T, T) = agents[i].spec.p_max * agg;
            if (delta > 0.0) hv += delta * v;
            lam = hv.norm();
            if (lam <= 0.0) return delta;
            v = hv / lam;
        }
        return lam;
    }

    // Certified strong-convexity modulus: delta plus the smallest eigenvalue
    // of the load-aggregation Gram matrix (zero whenever s > 1).
    double strong_convexity_modulus() const {
        if (s == 1) return agents[0].spec.p_max * agents[0].spec.p_max + delta;
        return delta;  // M^T M is rank-deficient for s > 1
    }

    Vec project_blocks(const Vec& C) const {
        Vec out(dim());
        for (int i = 0; i < s; ++i)
            out.segment(static_cast<Eigen::Index>(i) * T, T) =
                project_feasible(block(C, i), agents[i].set);
        return out;
    }
};

inline ValleyFillingProblem assemble_problem(const DistributionNetwork& net,
                                             const InjectionModel& inj,
                                             const std::vector<EvSpec>& fleet,
                                             const BaselineProfile& base,
                                             double delta = 0.0) {
    ValleyFillingProblem prob;
    prob.n = net.n;
    prob.s = static_cast<int>(fleet.size());
    prob.T = base.horizon();
    prob.P_b = base.agg;
    prob.D = inj.D;
    prob.delta = delta;
    prob.vmin_sq = net.v_floor * net.v_floor * net.v0_sq;
    prob.Ycal_b = Vec::Constant(static_cast<Eigen::Index>(net.n) * prob.T, prob.vmin_sq) - inj.y_d;
    for (const auto& ev : fleet)
        prob.agents.push_back({ev, make_feasible_set(ev, prob.T)});
    return prob;
}

// ---- Attack goal terms ----------------------------------------------------

// omega * || diag .* c_agent ||^2
struct DiagQuadGoal {
    int agent = 0;
    double omega = 0.0;
    Vec diag;
};

// omega * || target - sum_j coefs[j] * c_victims[j] ||^2
struct CrossQuadGoal {
    std::vector<int> victims;
    Vec coefs;
    Vec target;
    double omega = 0.0;
};

using GoalTerm = std::variant<DiagQuadGoal, CrossQuadGoal>;

inline double goal_value(const GoalTerm& g, const ValleyFillingProblem& prob, const Vec& C) {
    if (const auto* d = std::get_if<DiagQuadGoal>(&g))
        return d->omega * (d->diag.cwiseProduct(prob.block(C, d->agent))).squaredNorm();
    const auto& x = std::get<CrossQuadGoal>(g);
    Vec r = x.target;
    for (std::size_t j = 0; j < x.victims.size(); ++j)
        r -= x.coefs[static_cast<Eigen::Index>(j)] * prob.block(C, x.victims[j]);
    return x.omega * r.squaredNorm();
}

inline void add_goal_grad(const GoalTerm& g, const ValleyFillingProblem& prob, const Vec& C, Vec& grad) {
    const int T = prob.T;
    if (const auto* d = std::get_if<DiagQuadGoal>(&g)) {
        grad.segment(static_cast<Eigen::Index>(d->agent) * T, T) +=
            2.0 * d->omega * d->diag.cwiseProduct(d->diag).cwiseProduct(prob.block(C, d->agent));
        return;
    }
    const auto& x = std::get<CrossQuadGoal>(g);
    Vec r = x.target;
    for (std::size_t j = 0; j < x.victims.size(); ++j)
        r -= x.coefs[static_cast<Eigen::Index>(j)] * prob.block(C, x.victims[j]);
    for (std::size_t j = 0; j < x.victims.size(); ++j)
        grad.segment(static_cast<Eigen::Index>(x.victims[j]) * T, T) -=
            2.0 * x.omega * x.coefs[static_cast<Eigen::Index>(j)] * r;
}

inline double goals_value(const std::vector<GoalTerm>& goals, const ValleyFillingProblem& prob, const Vec& C) {
    double v = 0.0;
    for (const auto& g : goals) v += goal_value(g, prob, C);
    return v;
}

inline Vec goals_grad(const std::vector<GoalTerm>& goals, const ValleyFillingProblem& prob, const Vec& C) {
    Vec grad = Vec::Zero(prob.dim());
    for (const auto& g : goals) add_goal_grad(g, prob, C, grad);
    return grad;
}

// Conservative Lipschitz bound for the goal Hessian contribution.
inline double goals_hessian_bound(const std::vector<GoalTerm>& goals) {
    double L = 0.0;
    for (const auto& g : goals) {
        if (const auto* d = std::get_if<DiagQuadGoal>(&g))
            L += 2.0 * d->omega * d->diag.cwiseAbs().maxCoeff() * d->diag.cwiseAbs().maxCoeff();
        else {
            const auto& x = std::get<CrossQuadGoal>(g);
            L += 2.0 * x.omega * x.coefs.squaredNorm();
        }
    }
    return L;
}

// ---- Reference solver -----------------------------------------------------

struct RefSolution {
    Vec C;
    Vec mu;      // voltage-row multipliers (empty if no voltage coupling)
    Vec lambda;  // equality-coupling multipliers (empty if none)
    bool converged = false;
    double stationarity = 0.0;   // projected-gradient fixed-point residual
    double feasibility = 0.0;    // max coupling violation
    int outer_iters = 0;
};

namespace detail {

// FISTA with adaptive restart on min f(C) over the product of per-agent sets.
template <typename GradFn>
inline Vec fista(const ValleyFillingProblem& prob, Vec C, GradFn&& grad, double L,
                 double tol, int max_iter) {
    Vec y = C, C_prev = C;
    double t_mom = 1.0;
    const double step = 1.0 / L;
    for (int k = 0; k < max_iter; ++k) {
        const Vec g = grad(y);
        Vec C_next = prob.project_blocks(y - step * g);
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t_mom * t_mom));
        Vec y_next = C_next + ((t_mom - 1.0) / t_next) * (C_next - C_prev);
        // restart on non-descent direction
        if ((y - C_next).dot(C_next - C_prev) > 0.0) {
            y_next = C_next;
            t_mom = 1.0;
        } else {
            t_mom = t_next;
        }
        const double change = (C_next - C_prev).norm();
        C_prev = C_next;
        y = y_next;
        if (change <= tol * std::max(1.0, C_next.norm()) && k > 2) {
            C = C_next;
            return C;
        }
        C = C_next;
    }
    return C;
}

}  // namespace detail

// Augmented-Lagrangian solve of  min F + sum(goals)  s.t.  per-agent sets,
// voltage rows <= 0, optional equality coupling = 0.  Independent of the SPDS
// code path.
inline RefSolution reference_solve(const ValleyFillingProblem& prob,
                                   const std::vector<GoalTerm>& goals = {},
                                   double tol = 1e-8, int max_outer = 60,
                                   int max_inner = 20000) {
    const Eigen::Index dim = prob.dim();
    RefSolution sol;
    sol.C = prob.project_blocks(Vec::Constant(dim, 0.5));
    const bool has_v = prob.voltage_coupling;
    const bool has_eq = prob.coupling.has_value();
    sol.mu = has_v ? Vec::Zero(prob.dual_dim()) : Vec();
    sol.lambda = has_eq ? Vec::Zero(prob.T) : Vec();

    // operator norms of the coupling maps, for the AL step bound
    double v_opnorm2 = 0.0;
    if (has_v) {
        // per time block the map C(t) -> -D C(t); its squared norm bounds the block
        Eigen::JacobiSVD<Mat> svd(prob.D);
        v_opnorm2 = svd.singularValues().size() ? svd.singularValues()[0] * svd.singularValues()[0] : 0.0;
    }
    double eq_opnorm2 = has_eq ? prob.coupling->weights.squaredNorm() : 0.0;

    double rho = 10.0;
    const double L0 = prob.hessian_norm_estimate() + goals_hessian_bound(goals);
    double prev_feas = std::numeric_limits<double>::infinity();

    for (int outer = 0; outer < max_outer; ++outer) {
        const double L = L0 + rho * (v_opnorm2 + eq_opnorm2) + 1e-12;
        auto grad = [&](const Vec& C) {
            Vec g = prob.grad_objective(C) + goals_grad(goals, prob, C);
            if (has_v) {
                const Vec r = prob.voltage_residual(C);
                const Vec mult = (sol.mu + rho * r).cwiseMax(0.0);
                // pull back mult through -Dcal
                for (int t = 0; t < prob.T; ++t) {
                    const Vec mt = mult.segment(static_cast<Eigen::Index>(t) * prob.n, prob.n);
                    const Vec col = -prob.D.transpose() * mt;  // length s
                    for (int i = 0; i < prob.s; ++i)
                        g[static_cast<Eigen::Index>(i) * prob.T + t] += col[i];
                }
            }
            if (has_eq) {
                const Vec r = prob.coupling_residual(C);
                const Vec mult = sol.lambda + rho * r;
                for (int i = 0; i < prob.s; ++i)
                    g.segment(static_cast<Eigen::Index>(i) * prob.T, prob.T) +=
                        prob.coupling->weights[i] * mult;
            }
            return g;
        };
        const double inner_tol = std::max(tol * 1e-2, 1e-14);
        sol.C = detail::fista(prob, sol.C, grad, L, inner_tol, max_inner);

        double feas = 0.0;
        if (has_v) {
            const Vec r = prob.voltage_residual(sol.C);
            sol.mu = (sol.mu + rho * r).cwiseMax(0.0);
            feas = std::max(feas, r.maxCoeff() > 0.0 ? r.maxCoeff() : 0.0);
        }
        if (has_eq) {
            const Vec r = prob.coupling_residual(sol.C);
            sol.lambda += rho * r;
            feas = std::max(feas, r.cwiseAbs().maxCoeff());
        }
        sol.outer_iters = outer + 1;

        // stationarity of the true Lagrangian at the current multipliers
        Vec gl = prob.grad_objective(sol.C) + goals_grad(goals, prob, sol.C);
        if (has_v)
            for (int t = 0; t < prob.T; ++t) {
                const Vec mt = sol.mu.segment(static_cast<Eigen::Index>(t) * prob.n, prob.n);
                const Vec col = -prob.D.transpose() * mt;
                for (int i = 0; i < prob.s; ++i)
                    gl[static_cast<Eigen::Index>(i) * prob.T + t] += col[i];
            }
        if (has_eq)
            for (int i = 0; i < prob.s; ++i)
                gl.segment(static_cast<Eigen::Index>(i) * prob.T, prob.T) +=
                    prob.coupling->weights[i] * sol.lambda;
        const double stat = (sol.C - prob.project_blocks(sol.C - gl)).norm();
        sol.stationarity = stat;
        sol.feasibility = feas;
        if (stat <= tol * std::max(1.0, sol.C.norm()) && feas <= tol) {
            sol.converged = true;
            break;
        }
        if (feas > 0.5 * prev_feas) rho = std::min(rho * 4.0, 1e10);
        prev_feas = feas;
    }
    if ((has_v || has_eq) && !sol.converged && sol.feasibility > 1e-4)
        throw InfeasibleError("reference_solve: could not attain coupling feasibility (residual " +
                              fmt_double(sol.feasibility) + ")");
    return sol;
}

}  // namespace spdsim
