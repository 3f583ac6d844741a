#pragma once

// Deviation-bound verification and scenario metrics: strong-convexity bound
// B/m, tangent-cone tightening, objective-gap chains, the weak-sharp fallback,
// and the flatness / voltage / oscillation / goal-attainment metrics.

#include "spdsim/attacks.hpp"
#include "spdsim/problem.hpp"
#include "spdsim/spds.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace spdsim {

// B / m with B = sqrt(sum_i omega_i * L_{g_i}^2), as the bound is written.
inline double deviation_bound(const std::vector<std::pair<double, double>>& omega_lg, double m_cert) {
    if (m_cert <= 0.0)
        throw ConfigError("deviation_bound: nonpositive strong-convexity modulus; use the weak-sharp path");
    double sum = 0.0;
    for (const auto& [omega, lg] : omega_lg) sum += omega * lg * lg;
    return std::sqrt(sum) / m_cert;
}

// ---- Tangent cone at a feasible point -------------------------------------

// Polyhedral description of the tangent cone: equality normals E (rows must
// satisfy E d = 0) and active-inequality normals A (rows must satisfy A d <= 0).
struct TangentCone {
    Mat E;
    Mat A;
};

// Active-set identification with tolerance tau_act; rows whose residual falls
// in (tau_act, ambiguity_band * tau_act] are ambiguous and included only in
// the "loose" cone.
struct ConeActivity {
    TangentCone strict;   // unambiguous active rows only
    TangentCone loose;    // active plus ambiguous rows
    int ambiguous_rows = 0;
};

inline ConeActivity tangent_cone_at(const ValleyFillingProblem& prob, const Vec& C,
                                    double tau_act = 1e-6, double ambiguity_band = 10.0) {
    const Eigen::Index dim = prob.dim();
    std::vector<Vec> eq_rows, act_rows, amb_rows;
    for (int i = 0; i < prob.s; ++i) {
        Vec row = Vec::Zero(dim);
        row.segment(static_cast<Eigen::Index>(i) * prob.T, prob.T) = prob.agents[i].set.eq_coeff;
        eq_rows.push_back(row);
        const auto& set = prob.agents[i].set;
        for (int t = 0; t < prob.T; ++t) {
            const Eigen::Index j = static_cast<Eigen::Index>(i) * prob.T + t;
            const double span = std::max(1.0, set.upper[t] - set.lower[t]);
            auto classify = [&](double resid, double sign) {
                Vec r = Vec::Zero(dim);
                r[j] = sign;  // outward normal: -e_j at the lower face, +e_j at the upper
                if (resid <= tau_act * span) act_rows.push_back(r);
                else if (resid <= ambiguity_band * tau_act * span) amb_rows.push_back(r);
            };
            classify(C[j] - set.lower[t], -1.0);
            classify(set.upper[t] - C[j], +1.0);
        }
    }
    if (prob.voltage_coupling) {
        const Vec resid = prob.voltage_residual(C);  // feasible iff <= 0
        const double scale = std::max(1.0, prob.Ycal_b.cwiseAbs().maxCoeff());
        for (int t = 0; t < prob.T; ++t)
            for (int b = 0; b < prob.n; ++b) {
                const double r = resid[static_cast<Eigen::Index>(t) * prob.n + b];
                if (r < -ambiguity_band * tau_act * scale) continue;
                Vec row = Vec::Zero(dim);
                for (int i = 0; i < prob.s; ++i) row[static_cast<Eigen::Index>(i) * prob.T + t] = -prob.D(b, i);
                if (r >= -tau_act * scale) act_rows.push_back(row);
                else amb_rows.push_back(row);
            }
    }
    if (prob.coupling) {
        for (int t = 0; t < prob.T; ++t) {
            Vec row = Vec::Zero(dim);
            for (int i = 0; i < prob.s; ++i)
                row[static_cast<Eigen::Index>(i) * prob.T + t] = prob.coupling->weights[i];
            eq_rows.push_back(row);
        }
    }
    auto to_mat = [dim](const std::vector<Vec>& rows) {
        Mat m(static_cast<Eigen::Index>(rows.size()), dim);
        for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[r];
        return m;
    };
    ConeActivity out;
    out.strict.E = to_mat(eq_rows);
    out.strict.A = to_mat(act_rows);
    std::vector<Vec> all = act_rows;
    all.insert(all.end(), amb_rows.begin(), amb_rows.end());
    out.loose.E = out.strict.E;
    out.loose.A = to_mat(all);
    out.ambiguous_rows = static_cast<int>(amb_rows.size());
    return out;
}

// Euclidean projection of sigma onto {d : E d = 0, A d <= 0} via projected
// gradient on the dual nonnegative least-squares problem.
inline Vec project_tangent_cone(const TangentCone& cone, const Vec& sigma,
                                int max_iter = 50000, double tol = 1e-12) {
    const Eigen::Index ne = cone.E.rows(), na = cone.A.rows();
    if (ne + na == 0) return sigma;
    Mat K(ne + na, sigma.size());
    if (ne > 0) K.topRows(ne) = cone.E;
    if (na > 0) K.bottomRows(na) = cone.A;
    // d = sigma - K^T z with z_i free for equality rows, >= 0 for inequalities
    double L = 0.0;
    {
        Vec v = Vec::Ones(ne + na).normalized();
        for (int it = 0; it < 80; ++it) {
            Vec w = K * (K.transpose() * v);
            L = w.norm();
            if (L <= 0.0) break;
            v = w / L;
        }
        L = std::max(L, 1e-12);
    }
    Vec z = Vec::Zero(ne + na);
    const double step = 1.0 / L;
    Vec d = sigma;
    for (int it = 0; it < max_iter; ++it) {
        d = sigma - K.transpose() * z;
        const Vec g = -(K * d);  // gradient of 1/2 ||sigma - K^T z||^2
        Vec z_next = z - step * g;
        for (Eigen::Index i = ne; i < ne + na; ++i) z_next[i] = std::max(0.0, z_next[i]);
        const double change = (z_next - z).norm();
        z = z_next;
        if (change <= tol * std::max(1.0, z.norm())) break;
    }
    return sigma - K.transpose() * z;
}

// ---- Bounds report --------------------------------------------------------

struct BoundsReport {
    double m_cert = 0.0;
    double B = 0.0;
    double tangent_proj = 0.0;        // worst-case (strict cone) projection norm
    double tangent_proj_loose = 0.0;  // with ambiguous rows included
    int ambiguous_rows = 0;
    double dev = 0.0;
    double obj_gap = 0.0;
    double L_F = 0.0;
    std::vector<double> per_agent_dev;
    std::vector<double> per_agent_cap;  // L_{g_i}/m for attacked blocks, NaN otherwise
    bool eq13_ok = false;   // dev <= tangent_proj/m <= B/m
    bool eq14_ok = false;   // 0 <= gap <= tangent_proj^2 / (2m)
    bool eq15_ok = false;   // gap <= (L_F/2) dev^2
    bool eq16_ok = false;   // per-attacked-block deviations
    double gap_tol = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["m_cert"] = m_cert;
        j["B"] = B;
        j["tangent_proj"] = tangent_proj;
        j["tangent_proj_loose"] = tangent_proj_loose;
        j["ambiguous_rows"] = ambiguous_rows;
        j["dev"] = dev;
        j["obj_gap"] = obj_gap;
        j["L_F"] = L_F;
        j["per_agent_dev"] = per_agent_dev;
        j["per_agent_cap"] = per_agent_cap;
        j["eq13_ok"] = eq13_ok;
        j["eq14_ok"] = eq14_ok;
        j["eq15_ok"] = eq15_ok;
        j["eq16_ok"] = eq16_ok;
        // The B formula mixes omega linearly with L^2 as printed; the squared
        // reading sqrt(sum (omega L)^2) is flagged here without being asserted.
        j["note_B_formula"] = "B = sqrt(sum omega_i * L_gi^2)";
        return j;
    }
};

inline BoundsReport bounds_report(const ValleyFillingProblem& prob,
                                  const std::vector<GoalTerm>& goals,
                                  const std::vector<std::pair<double, double>>& omega_lg,
                                  const Vec& C_star, const Vec& C_A_star,
                                  double tau_act = 1e-6) {
    BoundsReport rep;
    rep.m_cert = prob.strong_convexity_modulus();
    if (rep.m_cert <= 0.0)
        throw ConfigError("bounds_report: problem is not strongly convex; use weak_sharp_check");
    double sum = 0.0;
    for (const auto& [omega, lg] : omega_lg) sum += omega * lg * lg;
    rep.B = std::sqrt(sum);

    const Vec sigma = goals_grad(goals, prob, C_star);
    const ConeActivity cones = tangent_cone_at(prob, C_star, tau_act);
    rep.tangent_proj = project_tangent_cone(cones.strict, sigma).norm();
    rep.tangent_proj_loose = project_tangent_cone(cones.loose, sigma).norm();
    rep.ambiguous_rows = cones.ambiguous_rows;

    rep.dev = (C_A_star - C_star).norm();
    rep.obj_gap = prob.objective(C_A_star) - prob.objective(C_star);
    rep.L_F = prob.hessian_norm_estimate();
    rep.gap_tol = 1e-7 * std::max(1.0, prob.objective(C_star));

    rep.eq13_ok = rep.dev <= rep.tangent_proj / rep.m_cert + 1e-9 &&
                  rep.tangent_proj <= rep.B + 1e-9;
    rep.eq14_ok = rep.obj_gap >= -rep.gap_tol &&
                  rep.obj_gap <= rep.tangent_proj * rep.tangent_proj / (2.0 * rep.m_cert) + rep.gap_tol;
    rep.eq15_ok = rep.obj_gap <= 0.5 * rep.L_F * rep.dev * rep.dev + rep.gap_tol;

    // per-block deviations; the L_g/m cap applies to attacked blocks
    std::vector<double> caps(prob.s, std::numeric_limits<double>::quiet_NaN());
    for (const auto& g : goals) {
        if (const auto* d = std::get_if<DiagQuadGoal>(&g)) {
            const double lg = reshape_lipschitz(d->diag, prob.T);
            caps[d->agent] = std::isnan(caps[d->agent]) ? lg / rep.m_cert
                                                        : caps[d->agent] + lg / rep.m_cert;
        }
    }
    rep.eq16_ok = true;
    for (int i = 0; i < prob.s; ++i) {
        rep.per_agent_dev.push_back((prob.block(C_A_star, i) - prob.block(C_star, i)).norm());
        rep.per_agent_cap.push_back(caps[i]);
        if (!std::isnan(caps[i]) && rep.per_agent_dev.back() > caps[i] + 1e-9) rep.eq16_ok = false;
    }
    return rep;
}

// Negative-gap beyond tolerance marks an oracle failure, not a bound violation.
struct GapCheck {
    bool oracle_ok = true;
    bool eq14_ok = false;
    bool eq15_ok = false;
};

inline GapCheck objective_gap_check(const ValleyFillingProblem& prob, const Vec& C_star,
                                    const Vec& C_A_star, double tangent_proj, double L_F) {
    GapCheck c;
    const double gap = prob.objective(C_A_star) - prob.objective(C_star);
    const double tol = 1e-7 * std::max(1.0, prob.objective(C_star));
    const double m = prob.strong_convexity_modulus();
    c.oracle_ok = gap >= -tol;
    c.eq14_ok = c.oracle_ok && m > 0.0 && gap <= tangent_proj * tangent_proj / (2.0 * m) + tol;
    const double dev = (C_A_star - C_star).norm();
    c.eq15_ok = gap <= 0.5 * L_F * dev * dev + tol;
    return c;
}

// ---- Weak-sharp fallback (Lemma-1 regime) ---------------------------------

struct WeakSharpReport {
    double alpha_est = 0.0;  // empirical, not certified
    double B = 0.0;
    double dist = 0.0;
    bool has_certificate = false;
    bool bound_ok = false;
};

inline WeakSharpReport weak_sharp_check(const ValleyFillingProblem& prob,
                                        const std::vector<std::pair<double, double>>& omega_lg,
                                        const Vec& C_star, const Vec& C_A_star,
                                        std::uint64_t seed = 7, int samples = 200) {
    WeakSharpReport rep;
    double sum = 0.0;
    for (const auto& [omega, lg] : omega_lg) sum += omega * lg * lg;
    rep.B = std::sqrt(sum);
    const double f_star = prob.objective(C_star);
    Rng rng(seed);
    double alpha = std::numeric_limits<double>::infinity();
    for (int sdx = 0; sdx < samples; ++sdx) {
        const double radius = rng.uniform(0.01, 0.5);
        Vec x = C_star + radius * rng.uniform_vec(prob.dim(), -1.0, 1.0);
        x = prob.project_blocks(x);
        const double d = (x - C_star).norm();
        if (d < 1e-9) continue;
        alpha = std::min(alpha, (prob.objective(x) - f_star) / d);
    }
    rep.alpha_est = std::isfinite(alpha) ? std::max(alpha, 0.0) : 0.0;
    rep.dist = (C_A_star - C_star).norm();
    rep.has_certificate = rep.alpha_est > 1e-10;
    rep.bound_ok = rep.has_certificate && rep.dist <= rep.B / rep.alpha_est + 1e-9;
    return rep;
}

// ---- Scenario metrics -----------------------------------------------------

struct ScenarioMetrics {
    bool converged = false;
    double valley_flatness = 0.0;  // std/mean of total load in the valley window
    double min_voltage_pu = 0.0;
    double oscillation_score = 0.0;  // mean over battery-damage victims
    double theta_energy_fraction = 0.0;  // time-tuning attackers
    double attacker_flatness = 0.0;      // smooth-charging attackers, std/mean
    double attack_l2_deviation = 0.0;    // vs a supplied attack-free profile
    double attack_mean_deviation = 0.0;

    nlohmann::json to_json() const {
        return {{"converged", converged},
                {"valley_flatness", valley_flatness},
                {"min_voltage_pu", min_voltage_pu},
                {"oscillation_score", oscillation_score},
                {"theta_energy_fraction", theta_energy_fraction},
                {"attacker_flatness", attacker_flatness},
                {"attack_l2_deviation", attack_l2_deviation},
                {"attack_mean_deviation", attack_mean_deviation}};
    }
};

inline double flatness(const Vec& series) {
    const double mean = series.mean();
    if (mean == 0.0) return 0.0;
    const double var = (series.array() - mean).square().mean();
    return std::sqrt(var) / std::abs(mean);
}

// Fraction of slots matching the high/low pattern of period t_f (1-based
// multiples of t_f are the preferred, high-rate slots).
inline double oscillation_score(const Vec& c, int t_f) {
    const double thr = c.mean();
    int match = 0;
    for (int t = 1; t <= c.size(); ++t) {
        const bool preferred = (t % t_f == 0);
        const bool high = c[t - 1] > thr;
        if (high == preferred) ++match;
    }
    return static_cast<double>(match) / static_cast<double>(c.size());
}

inline double theta_energy_fraction(const Vec& c, const std::vector<int>& theta) {
    const double total = c.sum();
    if (total <= 0.0) return 0.0;
    double inside = 0.0;
    for (int t : theta)
        if (t >= 1 && t <= c.size()) inside += c[t - 1];
    return inside / total;
}

inline ScenarioMetrics scenario_metrics(const SpdsResult& result, const ValleyFillingProblem& prob,
                                        const std::vector<AttackSpec>& attacks,
                                        int window_begin, int window_end,
                                        const Vec* attack_free_C = nullptr) {
    ScenarioMetrics m;
    m.converged = result.converged;
    const Vec total = prob.total_load(result.C);
    window_begin = std::clamp(window_begin, 0, prob.T);
    window_end = std::clamp(window_end <= 0 ? prob.T : window_end, window_begin + 1, prob.T);
    m.valley_flatness = flatness(total.segment(window_begin, window_end - window_begin));
    m.min_voltage_pu = result.trace.min_voltage_pu.empty()
                           ? std::numeric_limits<double>::quiet_NaN()
                           : result.trace.min_voltage_pu.back();

    int osc_victims = 0, theta_attackers = 0, smooth_attackers = 0;
    for (const auto& spec : attacks) {
        if (const auto* bd = std::get_if<BatteryDamageSpec>(&spec)) {
            for (int v : bd->victims) {
                m.oscillation_score += oscillation_score(prob.block(result.C, v), bd->t_f);
                ++osc_victims;
            }
        } else if (const auto* tt = std::get_if<TimeTuningSpec>(&spec)) {
            m.theta_energy_fraction += theta_energy_fraction(prob.block(result.C, tt->attacker), tt->theta);
            ++theta_attackers;
        } else if (const auto* sc = std::get_if<SmoothChargingSpec>(&spec)) {
            m.attacker_flatness += flatness(prob.block(result.C, sc->attacker));
            ++smooth_attackers;
        } else if (const auto* st = std::get_if<StealthySpec>(&spec)) {
            if (st->inner) {
                ScenarioMetrics inner = scenario_metrics(result, prob, {*st->inner},
                                                         window_begin, window_end, nullptr);
                m.oscillation_score += inner.oscillation_score;
                m.theta_energy_fraction += inner.theta_energy_fraction;
                m.attacker_flatness += inner.attacker_flatness;
            }
        } else if (const auto* pb = std::get_if<DualPowerBalanceSpec>(&spec)) {
            if (pb->goal.kind == GoalDescriptor::Kind::Smooth) {
                m.attacker_flatness += flatness(prob.block(result.C, pb->attacker));
                ++smooth_attackers;
            } else {
                m.theta_energy_fraction +=
                    theta_energy_fraction(prob.block(result.C, pb->attacker), pb->goal.theta);
                ++theta_attackers;
            }
        } else if (const auto* df = std::get_if<DualFullSpec>(&spec)) {
            if (df->goal.kind == GoalDescriptor::Kind::Smooth) {
                m.attacker_flatness += flatness(prob.block(result.C, df->attacker));
                ++smooth_attackers;
            } else {
                m.theta_energy_fraction +=
                    theta_energy_fraction(prob.block(result.C, df->attacker), df->goal.theta);
                ++theta_attackers;
            }
        }
    }
    if (osc_victims > 0) m.oscillation_score /= osc_victims;
    if (theta_attackers > 0) m.theta_energy_fraction /= theta_attackers;
    if (smooth_attackers > 0) m.attacker_flatness /= smooth_attackers;

    if (attack_free_C != nullptr && attack_free_C->size() == result.C.size() && !attacks.empty()) {
        m.attack_l2_deviation = (result.C - *attack_free_C).norm() /
                                std::max(1e-12, attack_free_C->norm());
        m.attack_mean_deviation = std::abs(result.C.mean() - attack_free_C->mean()) /
                                  std::max(1e-12, std::abs(attack_free_C->mean()));
    }
    return m;
}

}  // namespace spdsim
