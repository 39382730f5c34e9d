#include "qbsdej/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace qbsdej {

namespace {

double linf(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

int factorial(int p) {
    int f = 1;
    for (int i = 2; i <= p; ++i) f *= i;
    return f;
}

// (e^(beta tau) - 1) / beta with the beta -> 0 limit tau.
double growth_factor(double beta, double tau) {
    if (beta == 0.0) return tau;
    return std::expm1(beta * tau) / beta;
}

// Per-node increments |Z_k|^2 h resp. sum_j U_k(x_j)^2 lambda_j h.
void quadratic_increments(const LatticeModel& model, const PredictableProcess& zu, std::size_t k,
                          std::vector<double>& z_inc, std::vector<double>& u_inc) {
    const double h = model.dt();
    const std::size_t d = zu.z_dim;
    const std::size_t m = zu.u_dim;
    const std::uint64_t n = model.level_size(k);
    z_inc.assign(n, 0.0);
    u_inc.assign(n, 0.0);
    for (std::uint64_t node = 0; node < n; ++node) {
        double zz = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double zi = zu.z[k][node * d + i];
            zz += zi * zi;
        }
        z_inc[node] = zz * h;
        double uu = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double uj = zu.u[k][node * m + j];
            uu += uj * uj * model.marks().marks[j].lambda;
        }
        u_inc[node] = uu * h;
    }
}

}  // namespace

NormReport compute_norms(const LatticeModel& model, const AdaptedProcess& y,
                         const PredictableProcess& zu) {
    NormReport rep;
    for (const auto& level : y.levels) rep.s_inf = std::max(rep.s_inf, linf(level));
    for (const auto& level : zu.u) rep.linf_nu = std::max(rep.linf_nu, linf(level));

    // Backward accumulation of the conditional remaining quadratic variation;
    // the BMO norms are the maxima of these value functions over all nodes.
    const std::size_t n_steps = model.steps();
    std::vector<double> vz(model.level_size(n_steps), 0.0);
    std::vector<double> vu(model.level_size(n_steps), 0.0);
    std::vector<double> z_inc, u_inc, next_vz, next_vu;
    for (std::size_t k = n_steps; k-- > 0;) {
        quadratic_increments(model, zu, k, z_inc, u_inc);
        next_vz.assign(model.level_size(k), 0.0);
        next_vu.assign(model.level_size(k), 0.0);
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            double ez = 0.0, eu = 0.0;
            for (std::uint32_t a = 0; a < model.branching(); ++a) {
                ez += model.scheme().prob[a] * vz[model.child(node, a)];
                eu += model.scheme().prob[a] * vu[model.child(node, a)];
            }
            next_vz[node] = z_inc[node] + ez;
            next_vu[node] = u_inc[node] + eu;
            rep.h2_bmo = std::max(rep.h2_bmo, next_vz[node]);
            rep.j2_bmo = std::max(rep.j2_bmo, next_vu[node]);
        }
        vz.swap(next_vz);
        vu.swap(next_vu);
    }
    rep.ball = rep.s_inf * rep.s_inf + rep.h2_bmo + rep.j2_bmo + rep.linf_nu * rep.linf_nu;
    return rep;
}

NormReport compute_norms(const LatticeModel& model, const SolutionTriple& triple) {
    return compute_norms(model, triple.y, triple.zu);
}

EnergyReport energy_check(const LatticeModel& model, const SolutionTriple& triple, int p) {
    if (p < 1 || p > 6) {
        throw PreconditionError("energy check: p must lie in [1, 6], got " + std::to_string(p));
    }
    EnergyReport rep;
    rep.p = p;

    // Pathwise running sums, pushed forward level by level.
    const std::size_t n_steps = model.steps();
    std::vector<double> sz(1, 0.0), su(1, 0.0), prob(1, 1.0);
    std::vector<double> z_inc, u_inc;
    for (std::size_t k = 0; k < n_steps; ++k) {
        quadratic_increments(model, triple.zu, k, z_inc, u_inc);
        std::vector<double> nsz(model.level_size(k + 1));
        std::vector<double> nsu(model.level_size(k + 1));
        std::vector<double> nprob(model.level_size(k + 1));
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            for (std::uint32_t a = 0; a < model.branching(); ++a) {
                const std::uint64_t c = model.child(node, a);
                nsz[c] = sz[node] + z_inc[node];
                nsu[c] = su[node] + u_inc[node];
                nprob[c] = prob[node] * model.scheme().prob[a];
            }
        }
        sz.swap(nsz);
        su.swap(nsu);
        prob.swap(nprob);
    }
    for (std::uint64_t leaf = 0; leaf < sz.size(); ++leaf) {
        rep.z_lhs += prob[leaf] * std::pow(sz[leaf], p);
        rep.u_lhs += prob[leaf] * std::pow(su[leaf], p);
    }
    const NormReport norms = compute_norms(model, triple);
    rep.z_rhs = 2.0 * factorial(p) * std::pow(4.0 * norms.h2_bmo, p);
    rep.u_rhs = 2.0 * factorial(p) * std::pow(4.0 * norms.j2_bmo, p);
    rep.pass = rep.z_lhs <= rep.z_rhs + 1e-12 && rep.u_lhs <= rep.u_rhs + 1e-12;
    return rep;
}

ComparisonVerdict comparison_test(const LatticeModel& model, const Generator& g1,
                                  std::span<const double> xi1, const Generator& g2,
                                  std::span<const double> xi2, ComparisonCase kind, double tol,
                                  Scheme scheme) {
    ComparisonVerdict verdict;
    for (std::size_t leaf = 0; leaf < xi1.size(); ++leaf) {
        if (xi1[leaf] > xi2[leaf] + tol) {
            verdict.precondition_ok = false;
            verdict.precondition_message = "terminal ordering violated at leaf " +
                                           std::to_string(leaf);
            break;
        }
    }
    const SolutionTriple s1 = solve_exact(model, g1, xi1, scheme);
    const SolutionTriple s2 = solve_exact(model, g2, xi2, scheme);

    if (verdict.precondition_ok) {
        for (std::size_t k = 0; k < model.steps() && verdict.precondition_ok; ++k) {
            for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
                const double y2 = s2.y.at(k, node);
                auto z2 = s2.zu.z_at(k, node);
                auto u2 = s2.zu.u_at(k, node);
                if (g1(k, node, y2, z2, u2) > g2(k, node, y2, z2, u2) + tol) {
                    verdict.precondition_ok = false;
                    verdict.precondition_message = "driver dominance violated at step " +
                                                   std::to_string(k) + ", node " +
                                                   std::to_string(node);
                    break;
                }
            }
        }
    }

    for (std::size_t k = 0; k <= model.steps(); ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            const double gap = s1.y.at(k, node) - s2.y.at(k, node);
            if (gap > tol) {
                verdict.violations.push_back({k, node, gap});
            }
        }
    }
    verdict.ordered = verdict.violations.empty();
    verdict.root_gap = s2.y.at(0, 0) - s1.y.at(0, 0);

    if (kind == ComparisonCase::Royer && std::abs(verdict.root_gap) <= tol) {
        verdict.equality_clause_checked = true;
        double max_diff = 0.0;
        for (std::size_t k = 0; k <= model.steps(); ++k) {
            for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
                max_diff = std::max(max_diff, std::abs(s1.y.at(k, node) - s2.y.at(k, node)));
            }
        }
        for (std::size_t k = 0; k < model.steps(); ++k) {
            for (std::size_t i = 0; i < s1.zu.z[k].size(); ++i) {
                max_diff = std::max(max_diff, std::abs(s1.zu.z[k][i] - s2.zu.z[k][i]));
            }
            for (std::size_t i = 0; i < s1.zu.u[k].size(); ++i) {
                max_diff = std::max(max_diff, std::abs(s1.zu.u[k][i] - s2.zu.u[k][i]));
            }
        }
        verdict.equality_clause_ok = max_diff <= 10.0 * tol;
    }
    return verdict;
}

StabilityReport stability_report(const LatticeModel& model, const Generator& g,
                                 std::span<const double> xi1, std::span<const double> xi2,
                                 Scheme scheme) {
    StabilityReport rep;
    for (std::size_t leaf = 0; leaf < xi1.size(); ++leaf) {
        rep.dxi_sup = std::max(rep.dxi_sup, std::abs(xi1[leaf] - xi2[leaf]));
    }
    const SolutionTriple s1 = solve_exact(model, g, xi1, scheme);
    const SolutionTriple s2 = solve_exact(model, g, xi2, scheme);
    const SolutionTriple diff = subtract(s1, s2);
    const NormReport dn = compute_norms(model, diff.y, diff.zu);
    rep.dy_sup = dn.s_inf;
    rep.du_linf = dn.linf_nu;
    rep.dz_bmo2 = dn.h2_bmo;
    rep.du_bmo2 = dn.j2_bmo;
    if (rep.dxi_sup > 0.0) {
        rep.ratio = (rep.dy_sup + rep.du_linf) / rep.dxi_sup;
        rep.bmo_ratio = (rep.dz_bmo2 + rep.du_bmo2) / rep.dxi_sup;
    }
    return rep;
}

PriorBoundReport prior_bound_check(const LatticeModel& model, const Generator& g,
                                   const SolutionTriple& triple, std::span<const double> terminal,
                                   double tol) {
    PriorBoundReport rep;
    for (std::size_t k = 0; k < model.steps(); ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            rep.m_const =
                std::max(rep.m_const, std::abs(g.at_zero(k, node)) + g.alpha_at(k, node));
        }
    }
    const double xi_sup = linf(terminal);
    const double beta = g.params.beta;
    const double gamma = g.params.gamma;
    const double pref = std::max(gamma, 1.0);
    const double t_end = model.grid().horizon;

    rep.worst_envelope_slack = std::numeric_limits<double>::infinity();
    rep.worst_envelope_slack_literal = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k <= model.steps(); ++k) {
        const double tau = t_end - model.grid().time(k);
        const double growth = growth_factor(beta, tau);
        const double bound = pref * rep.m_const * growth + pref * std::exp(beta * tau) * xi_sup;
        const double literal =
            gamma * rep.m_const * growth + gamma * std::exp(beta * tau) * xi_sup;
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            const double ay = std::abs(triple.y.at(k, node));
            rep.worst_envelope_slack = std::min(rep.worst_envelope_slack, bound - ay);
            rep.worst_envelope_slack_literal =
                std::min(rep.worst_envelope_slack_literal, literal - ay);
        }
    }
    rep.envelope_pass = rep.worst_envelope_slack >= -tol;

    const NormReport norms = compute_norms(model, triple);
    rep.u_linf = norms.linf_nu;
    rep.two_y_sup = 2.0 * norms.s_inf;
    rep.u_jump_bound_pass = rep.u_linf <= rep.two_y_sup + 1e-12;
    rep.h2_bmo = norms.h2_bmo;
    rep.j2_bmo = norms.j2_bmo;
    rep.bmo_constant = (norms.h2_bmo + norms.j2_bmo) / (1.0 + std::exp(4.0 * gamma * norms.s_inf));
    rep.pass = rep.envelope_pass && rep.u_jump_bound_pass && std::isfinite(norms.h2_bmo) &&
               std::isfinite(norms.j2_bmo);
    return rep;
}

}  // namespace qbsdej
