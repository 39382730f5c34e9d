#include "qbsdej/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>

#include "qbsdej/analysis.hpp"

namespace qbsdej {

namespace {

double linf(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double max_at_zero(const LatticeModel& model, const Generator& g) {
    double m = 0.0;
    for (std::size_t k = 0; k < model.steps(); ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            m = std::max(m, std::abs(g.at_zero(k, node)));
        }
    }
    return m;
}

// Worst pathwise value of the accumulated |g(0,0,0)| integral, h sum |g0|.
double at_zero_budget(const LatticeModel& model, const Generator& g) {
    const double h = model.dt();
    std::vector<double> acc(1, 0.0);
    for (std::size_t k = 0; k < model.steps(); ++k) {
        std::vector<double> next(model.level_size(k + 1));
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            const double v = acc[node] + h * std::abs(g.at_zero(k, node));
            for (std::uint32_t a = 0; a < model.branching(); ++a) {
                next[model.child(node, a)] = v;
            }
        }
        acc.swap(next);
    }
    double m = 0.0;
    for (double v : acc) m = std::max(m, v);
    return m;
}

// Root of f(y) = y - m - h g(y, z, u). f' >= 1 - h lipschitz_y > 0, so the
// root is unique; Newton with a derivative floor converges in a handful of
// steps (one step when g does not depend on y).
double implicit_step(const Generator& g, std::size_t k, std::uint64_t node, double m, double h,
                     std::span<const double> z, std::span<const double> u, double lipschitz_y,
                     double* defect_out) {
    double y = m;
    const double slope_floor = lipschitz_y * h < 1.0 ? 1.0 - lipschitz_y * h : 0.5;
    for (int it = 0; it < 100; ++it) {
        const double gv = g(k, node, y, z, u);
        const double f = y - m - h * gv;
        if (std::abs(f) <= 5e-15 * std::max(1.0, std::abs(y))) {
            if (defect_out != nullptr) *defect_out = f;
            return y;
        }
        double fp = 1.0;
        if (lipschitz_y > 0.0) {
            const double eps = 1e-7 * std::max(1.0, std::abs(y));
            const double gy = (g(k, node, y + eps, z, u) - g(k, node, y - eps, z, u)) / (2.0 * eps);
            fp = 1.0 - h * gy;
            if (!(fp >= slope_floor)) fp = slope_floor;
        }
        y -= f / fp;
        if (!std::isfinite(y)) {
            throw SolveError("implicit step diverged at step " + std::to_string(k) + ", node " +
                             std::to_string(node));
        }
    }
    throw SolveError("implicit step did not converge in 100 iterations at step " +
                     std::to_string(k) + ", node " + std::to_string(node));
}

// Shared backward induction. With `frozen`, the driver is evaluated at the
// frozen predictable part instead of the node's own projection.
SolutionTriple backward_solve(const LatticeModel& model, const Generator& g,
                              std::span<const double> terminal, Scheme scheme,
                              const ProbabilityWeights* weights,
                              const PredictableProcess* frozen) {
    const std::size_t n_steps = model.steps();
    if (terminal.size() != model.level_size(n_steps)) {
        throw ModelError("solve: terminal condition must have one value per leaf");
    }
    for (double v : terminal) {
        if (!std::isfinite(v)) throw PreconditionError("solve: terminal condition must be finite");
    }
    if (g.z_dim != model.brownian_dims() || g.u_dim != model.mark_count()) {
        throw ModelError("solve: generator dimensions do not match the model");
    }
    const double h = model.dt();
    if (scheme == Scheme::Implicit && !(h * g.params.lipschitz_y < 1.0)) {
        throw PreconditionError("solve: implicit scheme requires h * lipschitz_y < 1, got " +
                                std::to_string(h * g.params.lipschitz_y));
    }

    SolutionTriple out = SolutionTriple::zeros(model);
    out.y.levels[n_steps].assign(terminal.begin(), terminal.end());

    const BranchScheme& s = model.scheme();
    const std::uint32_t branching = s.branching();
    std::vector<double> centered(branching);

    for (std::size_t k = n_steps; k-- > 0;) {
        const std::vector<double>& next = out.y.levels[k + 1];
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            double mean_plain = 0.0;
            for (std::uint32_t a = 0; a < branching; ++a) {
                mean_plain += s.prob[a] * next[model.child(node, a)];
            }
            for (std::uint32_t a = 0; a < branching; ++a) {
                centered[a] = next[model.child(node, a)] - mean_plain;
            }
            auto z = out.zu.z_at(k, node);
            auto u = out.zu.u_at(k, node);
            std::span<double> resid{out.rep_residual.levels[k + 1].data() + node * branching,
                                    branching};
            detail::project_node(s, centered, z, u, resid);

            double mean_drive = mean_plain;
            if (weights != nullptr) {
                mean_drive = 0.0;
                for (std::uint32_t a = 0; a < branching; ++a) {
                    mean_drive += s.prob[a] * weights->branch[k][node * branching + a] *
                                  next[model.child(node, a)];
                }
            }

            std::span<const double> zf = z, uf = u;
            if (frozen != nullptr) {
                zf = frozen->z_at(k, node);
                uf = frozen->u_at(k, node);
            }
            double defect = 0.0;
            double yk;
            if (scheme == Scheme::Implicit) {
                yk = implicit_step(g, k, node, mean_drive, h, zf, uf, g.params.lipschitz_y,
                                   &defect);
            } else {
                yk = mean_drive + h * g(k, node, mean_drive, zf, uf);
            }
            out.y.levels[k][node] = yk;
            out.eq_residual[k][node] = defect;
        }
    }
    return out;
}

}  // namespace

SolutionTriple SolutionTriple::zeros(const LatticeModel& model) {
    SolutionTriple t;
    t.y = AdaptedProcess::zeros(model);
    t.zu = PredictableProcess::zeros(model);
    t.rep_residual.levels.resize(model.steps() + 1);
    t.rep_residual.levels[0].assign(1, 0.0);
    for (std::size_t k = 0; k < model.steps(); ++k) {
        t.rep_residual.levels[k + 1].assign(model.level_size(k + 1), 0.0);
    }
    t.eq_residual.resize(model.steps());
    for (std::size_t k = 0; k < model.steps(); ++k) {
        t.eq_residual[k].assign(model.level_size(k), 0.0);
    }
    return t;
}

void add_in_place(SolutionTriple& acc, const SolutionTriple& other) {
    for (std::size_t k = 0; k < acc.y.levels.size(); ++k) {
        for (std::size_t i = 0; i < acc.y.levels[k].size(); ++i) {
            acc.y.levels[k][i] += other.y.levels[k][i];
        }
        for (std::size_t i = 0; i < acc.rep_residual.levels[k].size(); ++i) {
            acc.rep_residual.levels[k][i] += other.rep_residual.levels[k][i];
        }
    }
    for (std::size_t k = 0; k < acc.zu.z.size(); ++k) {
        for (std::size_t i = 0; i < acc.zu.z[k].size(); ++i) acc.zu.z[k][i] += other.zu.z[k][i];
        for (std::size_t i = 0; i < acc.zu.u[k].size(); ++i) acc.zu.u[k][i] += other.zu.u[k][i];
        for (std::size_t i = 0; i < acc.eq_residual[k].size(); ++i) {
            acc.eq_residual[k][i] += other.eq_residual[k][i];
        }
    }
}

SolutionTriple subtract(const SolutionTriple& a, const SolutionTriple& b) {
    SolutionTriple out = a;
    for (std::size_t k = 0; k < out.y.levels.size(); ++k) {
        for (std::size_t i = 0; i < out.y.levels[k].size(); ++i) {
            out.y.levels[k][i] -= b.y.levels[k][i];
        }
        for (std::size_t i = 0; i < out.rep_residual.levels[k].size(); ++i) {
            out.rep_residual.levels[k][i] -= b.rep_residual.levels[k][i];
        }
    }
    for (std::size_t k = 0; k < out.zu.z.size(); ++k) {
        for (std::size_t i = 0; i < out.zu.z[k].size(); ++i) out.zu.z[k][i] -= b.zu.z[k][i];
        for (std::size_t i = 0; i < out.zu.u[k].size(); ++i) out.zu.u[k][i] -= b.zu.u[k][i];
        for (std::size_t i = 0; i < out.eq_residual[k].size(); ++i) {
            out.eq_residual[k][i] -= b.eq_residual[k][i];
        }
    }
    return out;
}

PicardConfig PicardConfig::from_params(const GeneratorParams& params, const TimeGrid& grid) {
    PicardConfig c;
    const double mu = params.local_lipschitz;
    const double clip = params.lipschitz_y;
    const double t = grid.horizon;
    c.eta = 2.0 * clip;
    if (mu > 0.0) {
        c.radius = 1.0 / (2.0 * std::sqrt(2670.0) * mu * std::exp(c.eta * t));
        c.xi_bound =
            1.0 / (2.0 * std::sqrt(15.0) * std::sqrt(2670.0) * mu * std::exp(1.5 * clip * t));
    } else {
        c.radius = std::numeric_limits<double>::infinity();
        c.xi_bound = std::numeric_limits<double>::infinity();
    }
    return c;
}

SolutionTriple solve_exact(const LatticeModel& model, const Generator& g,
                           std::span<const double> terminal, Scheme scheme,
                           const ProbabilityWeights* weights) {
    return backward_solve(model, g, terminal, scheme, weights, nullptr);
}

SolutionTriple picard_map(const LatticeModel& model, const Generator& g,
                          std::span<const double> terminal, const SolutionTriple& input,
                          Scheme scheme, const ProbabilityWeights* weights) {
    return backward_solve(model, g, terminal, scheme, weights, &input.zu);
}

PicardResult picard_solve(const LatticeModel& model, const Generator& g,
                          std::span<const double> terminal, const PicardConfig& config,
                          const ProbabilityWeights* weights) {
    PicardResult res;
    res.g0_warning = max_at_zero(model, g) > 1e-12;
    // Smallness test: the driver-at-zero budget counts against the terminal
    // bound, weighted by the configurable constant D.
    double budget = linf(terminal);
    if (res.g0_warning) budget += config.d_const * at_zero_budget(model, g);
    res.xi_warning = budget > config.xi_bound;

    SolutionTriple prev = SolutionTriple::zeros(model);
    double prev_dist = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t iter = 1; iter <= config.max_iters; ++iter) {
        SolutionTriple cur = picard_map(model, g, terminal, prev, config.scheme, weights);
        SolutionTriple diff = subtract(cur, prev);
        const NormReport dn = compute_norms(model, diff.y, diff.zu);
        const NormReport in = compute_norms(model, cur.y, cur.zu);
        const double dist = std::sqrt(dn.ball);
        const double ball = std::sqrt(in.ball);

        PicardTraceRow row;
        row.iter = iter;
        row.distance = dist;
        row.dy2 = dn.s_inf * dn.s_inf;
        row.dz2 = dn.h2_bmo;
        row.du2 = dn.j2_bmo;
        row.du_linf2 = dn.linf_nu * dn.linf_nu;
        row.iterate_ball = ball;
        res.trace.push_back(row);

        if (ball > config.radius * (1.0 + 1e-12)) res.stayed_in_ball = false;
        if (std::isfinite(prev_dist) && prev_dist > config.tol && dist > config.tol) {
            res.max_ratio = std::max(res.max_ratio, dist / prev_dist);
        }
        prev = std::move(cur);
        if (dist < config.tol) {
            res.converged = true;
            break;
        }
        prev_dist = dist;
    }
    if (!res.converged) {
        std::string msg = "picard iteration did not converge in " +
                          std::to_string(config.max_iters) + " iterations; distances:";
        const std::size_t tail = res.trace.size() > 5 ? res.trace.size() - 5 : 0;
        for (std::size_t i = tail; i < res.trace.size(); ++i) {
            msg += " " + std::to_string(res.trace[i].distance);
        }
        throw SolveError(msg);
    }
    res.triple = std::move(prev);
    return res;
}

ShiftedProblem shift_g0(const LatticeModel& model, const Generator& g,
                        std::span<const double> terminal) {
    const std::size_t n_steps = model.steps();
    const double h = model.dt();

    auto g0 = std::make_shared<std::vector<std::vector<double>>>(n_steps);
    for (std::size_t k = 0; k < n_steps; ++k) {
        (*g0)[k].resize(model.level_size(k));
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            (*g0)[k][node] = g.at_zero(k, node);
        }
    }

    ShiftedProblem out;
    out.offset = AdaptedProcess::zeros(model);
    for (std::size_t k = 0; k < n_steps; ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            const double next = out.offset.levels[k][node] + h * (*g0)[k][node];
            for (std::uint32_t a = 0; a < model.branching(); ++a) {
                out.offset.levels[k + 1][model.child(node, a)] = next;
            }
        }
    }
    out.terminal.assign(terminal.begin(), terminal.end());
    for (std::uint64_t leaf = 0; leaf < out.terminal.size(); ++leaf) {
        out.terminal[leaf] += out.offset.levels[n_steps][leaf];
    }

    out.driver = g;
    auto offset = std::make_shared<const AdaptedProcess>(out.offset);
    auto base = g.eval;
    out.driver.eval = [base, offset, g0](std::size_t step, std::uint64_t node, double y,
                                         std::span<const double> z, std::span<const double> u) {
        return base(step, node, y - offset->at(step, node), z, u) - (*g0)[step][node];
    };
    if (g.grad_z) {
        auto bz = g.grad_z;
        out.driver.grad_z = [bz, offset](std::size_t step, std::uint64_t node, double y,
                                         std::span<const double> z, std::span<const double> u,
                                         std::span<double> o) {
            bz(step, node, y - offset->at(step, node), z, u, o);
        };
    }
    if (g.grad_u) {
        auto bu = g.grad_u;
        out.driver.grad_u = [bu, offset](std::size_t step, std::uint64_t node, double y,
                                         std::span<const double> z, std::span<const double> u,
                                         std::span<double> o) {
            bu(step, node, y - offset->at(step, node), z, u, o);
        };
    }
    return out;
}

SolutionTriple apply_back_map(const ShiftedProblem& shifted, SolutionTriple solved) {
    for (std::size_t k = 0; k < solved.y.levels.size(); ++k) {
        for (std::size_t i = 0; i < solved.y.levels[k].size(); ++i) {
            solved.y.levels[k][i] -= shifted.offset.levels[k][i];
        }
    }
    return solved;
}

SplitPlan split_terminal(std::span<const double> terminal, double xi_bound) {
    SplitPlan plan;
    const double scale = linf(terminal);
    plan.n = 1;
    if (std::isfinite(xi_bound) && xi_bound > 0.0 && scale > xi_bound) {
        plan.n = static_cast<std::size_t>(std::ceil(scale / xi_bound));
    }
    plan.pieces.assign(plan.n, std::vector<double>(terminal.size()));
    if (plan.n == 1) {
        plan.pieces[0].assign(terminal.begin(), terminal.end());
        return plan;
    }
    const double inv = 1.0 / static_cast<double>(plan.n);
    for (std::size_t leaf = 0; leaf < terminal.size(); ++leaf) {
        const double q = terminal[leaf] * inv;
        double prefix = 0.0;
        for (std::size_t i = 0; i + 1 < plan.n; ++i) {
            plan.pieces[i][leaf] = q;
            prefix += q;
        }
        // The remainder is exact by Sterbenz (prefix lies in [xi/2, xi]), so
        // the left-to-right sum of the pieces reproduces xi bitwise.
        plan.pieces[plan.n - 1][leaf] = terminal[leaf] - prefix;
        double check = 0.0;
        for (std::size_t i = 0; i < plan.n; ++i) check += plan.pieces[i][leaf];
        if (check != terminal[leaf]) {
            plan.pieces[plan.n - 1][leaf] += terminal[leaf] - check;
        }
    }
    return plan;
}

GeneralResult solve_general(const LatticeModel& model, const Generator& g,
                            std::span<const double> terminal, const PicardConfig& config) {
    GeneralResult out;

    ShiftedProblem shifted;
    const Generator* work = &g;
    std::vector<double> xi_work(terminal.begin(), terminal.end());
    if (max_at_zero(model, g) > 1e-14) {
        shifted = shift_g0(model, g, terminal);
        work = &shifted.driver;
        xi_work = shifted.terminal;
        out.used_g0_shift = true;
    }

    SplitPlan plan = split_terminal(xi_work, config.xi_bound);
    out.n_pieces = plan.n;

    SolutionTriple accum = SolutionTriple::zeros(model);
    std::vector<double> grad_buf;
    for (std::size_t stage = 0; stage < plan.n; ++stage) {
        try {
            // First-order coefficients of the base driver along the
            // accumulated triple; the stage driver vanishes at the origin, so
            // these are its derivatives at zero.
            PredictableProcess drift = PredictableProcess::zeros(model);
            for (std::size_t k = 0; k < model.steps(); ++k) {
                for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
                    const double yb = accum.y.at(k, node);
                    auto zb = accum.zu.z_at(k, node);
                    auto ub = accum.zu.u_at(k, node);
                    auto phi = drift.z_at(k, node);
                    auto psi = drift.u_at(k, node);
                    if (work->grad_z) {
                        work->grad_z(k, node, yb, zb, ub, phi);
                    } else {
                        grad_buf = numeric_grad_z(*work, k, node, yb, zb, ub);
                        std::copy(grad_buf.begin(), grad_buf.end(), phi.begin());
                    }
                    if (work->grad_u) {
                        work->grad_u(k, node, yb, zb, ub, psi);
                    } else {
                        grad_buf = numeric_grad_u(*work, model.marks(), k, node, yb, zb, ub);
                        std::copy(grad_buf.begin(), grad_buf.end(), psi.begin());
                    }
                }
            }

            Generator stage_g =
                stage == 0 ? *work : shift_generator(model, *work, accum.y, accum.zu);
            ProbabilityWeights weights = doleans_exponential(model, drift);
            Generator reduced = girsanov_reduce(model, stage_g, drift);
            PicardResult pr = picard_solve(model, reduced, plan.pieces[stage], config, &weights);

            StageReport rep;
            rep.stage = stage + 1;
            rep.piece_linf = linf(plan.pieces[stage]);
            rep.picard_iters = pr.trace.size();
            rep.final_distance = pr.trace.empty() ? 0.0 : pr.trace.back().distance;
            rep.max_ratio = pr.max_ratio;
            double min_w = 1.0, max_psi = 0.0;
            for (std::size_t k = 0; k < model.steps(); ++k) {
                for (double w : weights.branch[k]) min_w = std::min(min_w, w);
                for (double p : drift.u[k]) max_psi = std::max(max_psi, std::abs(p));
            }
            rep.min_branch_weight = min_w;
            rep.max_abs_psi = max_psi;
            const NormReport nr = compute_norms(model, pr.triple.y, pr.triple.zu);
            rep.stage_y_sup = nr.s_inf;
            out.stages.push_back(rep);

            add_in_place(accum, pr.triple);
        } catch (const Error& e) {
            throw SolveError("splitting stage " + std::to_string(stage + 1) + " of " +
                             std::to_string(plan.n) + " failed: " + e.what());
        }
    }

    if (out.used_g0_shift) {
        accum = apply_back_map(shifted, accum);
    }
    ResidualReport audit = residual(model, g, accum, terminal);
    accum.eq_residual = audit.eq_defect;
    out.max_eq_residual = audit.max_eq_defect;
    out.max_rep_residual = audit.max_rep_defect;
    out.triple = std::move(accum);
    return out;
}

ResidualReport residual(const LatticeModel& model, const Generator& g,
                        const SolutionTriple& triple, std::span<const double> terminal,
                        const ProbabilityWeights* weights) {
    const std::size_t n_steps = model.steps();
    const double h = model.dt();
    const BranchScheme& s = model.scheme();
    const std::uint32_t branching = s.branching();

    ResidualReport rep;
    rep.eq_defect.resize(n_steps);
    for (std::uint64_t leaf = 0; leaf < terminal.size(); ++leaf) {
        rep.terminal_defect =
            std::max(rep.terminal_defect, std::abs(triple.y.levels[n_steps][leaf] - terminal[leaf]));
    }
    for (std::size_t k = 0; k < n_steps; ++k) {
        rep.eq_defect[k].assign(model.level_size(k), 0.0);
        const std::vector<double>& next = triple.y.levels[k + 1];
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            double mean_plain = 0.0;
            double mean_drive = 0.0;
            for (std::uint32_t a = 0; a < branching; ++a) {
                const double v = next[model.child(node, a)];
                mean_plain += s.prob[a] * v;
                double p = s.prob[a];
                if (weights != nullptr) p *= weights->branch[k][node * branching + a];
                mean_drive += p * v;
            }
            const double yk = triple.y.at(k, node);
            auto z = triple.zu.z_at(k, node);
            auto u = triple.zu.u_at(k, node);
            rep.eq_defect[k][node] = yk - mean_drive - h * g(k, node, yk, z, u);
            rep.max_eq_defect = std::max(rep.max_eq_defect, std::abs(rep.eq_defect[k][node]));

            for (std::uint32_t a = 0; a < branching; ++a) {
                double fit = mean_plain;
                for (std::size_t i = 0; i < s.brownian_dims; ++i) {
                    fit += z[i] * s.brownian_increment(a, i);
                }
                for (std::size_t j = 0; j < s.mark_count; ++j) {
                    fit += u[j] * s.compensated_jump(a, j);
                }
                fit += triple.rep_residual.levels[k + 1][node * branching + a];
                rep.max_rep_defect =
                    std::max(rep.max_rep_defect, std::abs(next[model.child(node, a)] - fit));
            }
        }
    }
    return rep;
}

}  // namespace qbsdej
