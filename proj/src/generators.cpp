#include "qbsdej/generators.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace qbsdej {

namespace {

constexpr std::size_t kMaxDims = 32;
constexpr std::array<double, kMaxDims> kZeros{};

void check_dims(std::size_t z_dim, std::size_t u_dim) {
    if (z_dim > kMaxDims || u_dim > kMaxDims) {
        throw ConfigError("generator: dimension exceeds the supported maximum of 32");
    }
}

// Fenchel dual of v -> (e^(gamma v) - 1 - gamma v) / gamma at slope c:
// the smallest constant making c v <= penalty(v) + constant for all v.
// Infinite for c <= -1 (the penalty grows only linearly as v -> -inf).
double envelope_dual(double gamma, double c) {
    if (c <= -1.0) return std::numeric_limits<double>::infinity();
    return ((1.0 + c) * std::log1p(c) - c) / gamma;
}

}  // namespace

double expm1m(double x) {
    if (std::abs(x) >= 0.5) {
        return std::expm1(x) - x;
    }
    // sum_{k>=2} x^k / k!, forward evaluation; converges in a few terms.
    double term = x * x / 2.0;
    double sum = term;
    for (int k = 3; k < 24; ++k) {
        term *= x / static_cast<double>(k);
        double next = sum + term;
        if (next == sum) break;
        sum = next;
    }
    return sum;
}

double exp_remainder(double eta, double x) {
    if (eta == 0.0) {
        throw PreconditionError("exp_remainder: eta must be nonzero");
    }
    return expm1m(eta * x) / eta;
}

double jump_penalty(const MarkSpace& marks, std::span<const double> u) {
    double acc = 0.0;
    for (std::size_t j = 0; j < marks.size(); ++j) {
        acc += marks.marks[j].lambda * expm1m(u[j]);
    }
    return acc;
}

double jump_penalty_scaled(const MarkSpace& marks, std::span<const double> u, double scale) {
    double acc = 0.0;
    for (std::size_t j = 0; j < marks.size(); ++j) {
        acc += marks.marks[j].lambda * expm1m(scale * u[j]);
    }
    return acc;
}

double nu_norm2(const MarkSpace& marks, std::span<const double> u) {
    double acc = 0.0;
    for (std::size_t j = 0; j < marks.size(); ++j) {
        acc += marks.marks[j].lambda * u[j] * u[j];
    }
    return acc;
}

void GeneratorParams::validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
        throw ConfigError("generator params: gamma must be finite and > 0");
    }
    if (!(delta > 0.0)) {
        throw ConfigError("generator params: delta must be > 0");
    }
    if (jump_slope_min < -1.0 + delta) {
        throw ConfigError("generator params: jump_slope_min must be >= -1 + delta");
    }
    if (jump_slope_max < 0.0) {
        throw ConfigError("generator params: jump_slope_max must be >= 0");
    }
    for (double v : {beta, lipschitz_y, local_lipschitz, theta, grad_z_bound, grad_u_bound}) {
        if (!std::isfinite(v) || v < 0.0) {
            throw ConfigError("generator params: structural constants must be finite and >= 0");
        }
    }
}

double Generator::at_zero(std::size_t step, std::uint64_t node) const {
    check_dims(z_dim, u_dim);
    return eval(step, node, 0.0, std::span<const double>(kZeros.data(), z_dim),
                std::span<const double>(kZeros.data(), u_dim));
}

double Generator::alpha_at(std::size_t step, std::uint64_t node) const {
    if (alpha) return alpha(step, node);
    return params.alpha_bound;
}

Generator make_entropic(std::size_t z_dim, const MarkSpace& marks, double gamma) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) {
        throw ConfigError("entropic generator: gamma must be finite and > 0");
    }
    check_dims(z_dim, marks.size());
    Generator g;
    g.z_dim = z_dim;
    g.u_dim = marks.size();
    g.params.beta = 0.0;
    g.params.gamma = gamma;
    g.params.lipschitz_y = 0.0;
    // Regional constant: valid on |u| up to ln 2 / gamma, far beyond the
    // small-terminal ball the fixed point lives in.
    g.params.local_lipschitz = gamma;
    g.params.alpha_bound = 0.0;
    g.params.theta = gamma;
    MarkSpace mk = marks;
    g.eval = [gamma, mk](std::size_t, std::uint64_t, double, std::span<const double> z,
                         std::span<const double> u) {
        double zz = 0.0;
        for (double zi : z) zz += zi * zi;
        return 0.5 * gamma * zz + jump_penalty_scaled(mk, u, gamma) / gamma;
    };
    g.grad_z = [gamma](std::size_t, std::uint64_t, double, std::span<const double> z,
                       std::span<const double>, std::span<double> out) {
        for (std::size_t i = 0; i < z.size(); ++i) out[i] = gamma * z[i];
    };
    g.grad_u = [gamma](std::size_t, std::uint64_t, double, std::span<const double>,
                       std::span<const double> u, std::span<double> out) {
        for (std::size_t j = 0; j < u.size(); ++j) out[j] = std::expm1(gamma * u[j]);
    };
    return g;
}

Generator make_linear(std::size_t z_dim, const MarkSpace& marks, double a, std::vector<double> b,
                      std::vector<double> c, double gamma) {
    check_dims(z_dim, marks.size());
    if (b.size() != z_dim) throw ConfigError("linear generator: b must have one entry per z dim");
    if (c.size() != marks.size()) {
        throw ConfigError("linear generator: c must have one entry per mark");
    }
    Generator g;
    g.z_dim = z_dim;
    g.u_dim = marks.size();
    g.params.beta = std::abs(a);
    g.params.gamma = gamma;
    g.params.lipschitz_y = std::abs(a);
    g.params.local_lipschitz = 0.0;
    double alpha = 0.0;
    for (double bi : b) alpha += bi * bi;
    alpha /= 2.0 * gamma;
    for (std::size_t j = 0; j < marks.size(); ++j) {
        alpha += marks.marks[j].lambda * envelope_dual(gamma, c[j]);
    }
    g.params.alpha_bound = alpha;
    MarkSpace mk = marks;
    g.eval = [a, b, c, mk](std::size_t, std::uint64_t, double y, std::span<const double> z,
                           std::span<const double> u) {
        double acc = a * y;
        for (std::size_t i = 0; i < z.size(); ++i) acc += b[i] * z[i];
        for (std::size_t j = 0; j < u.size(); ++j) acc += c[j] * mk.marks[j].lambda * u[j];
        return acc;
    };
    g.grad_z = [b](std::size_t, std::uint64_t, double, std::span<const double>,
                   std::span<const double>, std::span<double> out) {
        for (std::size_t i = 0; i < b.size(); ++i) out[i] = b[i];
    };
    g.grad_u = [c](std::size_t, std::uint64_t, double, std::span<const double>,
                   std::span<const double>, std::span<double> out) {
        for (std::size_t j = 0; j < c.size(); ++j) out[j] = c[j];
    };
    g.params.grad_z_bound = [&] {
        double n2 = 0.0;
        for (double bi : b) n2 += bi * bi;
        return std::sqrt(n2);
    }();
    return g;
}

Generator make_royer(std::size_t z_dim, const MarkSpace& marks, double a, std::vector<double> b,
                     double constant, std::vector<double> jump_slopes, double c1, double c2,
                     double gamma) {
    check_dims(z_dim, marks.size());
    if (jump_slopes.size() != marks.size()) {
        throw ConfigError("royer generator: one jump slope per mark required");
    }
    for (std::size_t j = 0; j < marks.size(); ++j) {
        const double cap = std::min(1.0, std::abs(marks.marks[j].x));
        if (jump_slopes[j] < c1 * cap - 1e-15 || jump_slopes[j] > c2 * cap + 1e-15) {
            throw ConfigError("royer generator: jump slope " + std::to_string(j) +
                              " outside the corridor [" + std::to_string(c1 * cap) + ", " +
                              std::to_string(c2 * cap) + "]");
        }
    }
    Generator g = make_linear(z_dim, marks, a, std::move(b), jump_slopes, gamma);
    auto base = g.eval;
    g.eval = [base, constant](std::size_t step, std::uint64_t node, double y,
                              std::span<const double> z, std::span<const double> u) {
        return base(step, node, y, z, u) + constant;
    };
    g.params.jump_slope_min = c1;
    g.params.jump_slope_max = c2;
    g.params.delta = std::max(g.params.delta, 1.0 + c1 > 0.0 ? std::min(1.0 + c1, 1e-6) : 1e-6);
    return g;
}

EnvelopeReport envelope_check(const Generator& g, const MarkSpace& marks,
                              std::span<const SamplePoint> grid, double tol) {
    EnvelopeReport rep;
    rep.worst_upper_slack = std::numeric_limits<double>::infinity();
    rep.worst_lower_slack = std::numeric_limits<double>::infinity();
    const double beta = g.params.beta;
    const double gamma = g.params.gamma;
    for (const SamplePoint& p : grid) {
        const double value = g(p.step, p.node, p.y, p.z, p.u) - g.at_zero(p.step, p.node);
        double zz = 0.0;
        for (double zi : p.z) zz += zi * zi;
        const double common = g.alpha_at(p.step, p.node) + beta * std::abs(p.y) + 0.5 * gamma * zz;
        const double upper = common + jump_penalty_scaled(marks, p.u, gamma) / gamma;
        const double lower = -common - jump_penalty_scaled(marks, p.u, -gamma) / gamma;
        const double up_slack = upper - value;
        const double lo_slack = value - lower;
        rep.worst_upper_slack = std::min(rep.worst_upper_slack, up_slack);
        rep.worst_lower_slack = std::min(rep.worst_lower_slack, lo_slack);
        if (up_slack < -tol || lo_slack < -tol) ++rep.violations;
    }
    if (grid.empty()) {
        rep.worst_upper_slack = 0.0;
        rep.worst_lower_slack = 0.0;
    }
    rep.pass = rep.worst_upper_slack >= -tol && rep.worst_lower_slack >= -tol;
    return rep;
}

std::vector<double> numeric_grad_z(const Generator& g, std::size_t step, std::uint64_t node,
                                   double y, std::span<const double> z, std::span<const double> u,
                                   double rel_step) {
    std::vector<double> out(z.size());
    std::vector<double> zz(z.begin(), z.end());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double eps = rel_step * std::max(1.0, std::abs(z[i]));
        const double saved = zz[i];
        zz[i] = saved + eps;
        const double up = g(step, node, y, zz, u);
        zz[i] = saved - eps;
        const double dn = g(step, node, y, zz, u);
        zz[i] = saved;
        out[i] = (up - dn) / (2.0 * eps);
    }
    return out;
}

std::vector<double> numeric_grad_u(const Generator& g, const MarkSpace& marks, std::size_t step,
                                   std::uint64_t node, double y, std::span<const double> z,
                                   std::span<const double> u, double rel_step) {
    std::vector<double> out(u.size());
    std::vector<double> uu(u.begin(), u.end());
    for (std::size_t j = 0; j < u.size(); ++j) {
        const double eps = rel_step * std::max(1.0, std::abs(u[j]));
        const double saved = uu[j];
        uu[j] = saved + eps;
        const double up = g(step, node, y, z, uu);
        uu[j] = saved - eps;
        const double dn = g(step, node, y, z, uu);
        uu[j] = saved;
        // Mark-function convention: gradient against the lambda-weighted
        // inner product, so divide the partial derivative by lambda_j.
        out[j] = (up - dn) / (2.0 * eps * marks.marks[j].lambda);
    }
    return out;
}

GradientReport gradient_check(const Generator& g, const MarkSpace& marks,
                              std::span<const SamplePoint> grid, double rel_step) {
    GradientReport rep;
    std::vector<double> buf;
    for (const SamplePoint& p : grid) {
        auto num_z = numeric_grad_z(g, p.step, p.node, p.y, p.z, p.u, rel_step);
        auto num_u = numeric_grad_u(g, marks, p.step, p.node, p.y, p.z, p.u, rel_step);
        std::vector<double> dz = num_z;
        std::vector<double> du = num_u;
        if (g.grad_z) {
            buf.assign(p.z.size(), 0.0);
            g.grad_z(p.step, p.node, p.y, p.z, p.u, buf);
            for (std::size_t i = 0; i < buf.size(); ++i) {
                rep.max_z_deviation = std::max(rep.max_z_deviation, std::abs(buf[i] - num_z[i]));
            }
            dz = buf;
        }
        if (g.grad_u) {
            buf.assign(p.u.size(), 0.0);
            g.grad_u(p.step, p.node, p.y, p.z, p.u, buf);
            for (std::size_t j = 0; j < buf.size(); ++j) {
                rep.max_u_deviation = std::max(rep.max_u_deviation, std::abs(buf[j] - num_u[j]));
            }
            du = buf;
        }
        double dz_norm = 0.0, z_norm = 0.0;
        for (std::size_t i = 0; i < dz.size(); ++i) {
            dz_norm += dz[i] * dz[i];
            z_norm += p.z[i] * p.z[i];
        }
        dz_norm = std::sqrt(dz_norm);
        z_norm = std::sqrt(z_norm);
        const double z_cap = g.params.grad_z_bound + g.params.theta * z_norm;
        if (dz_norm > z_cap + 1e-9) {
            ++rep.z_bound_violations;
            rep.worst_z_excess = std::max(rep.worst_z_excess, dz_norm - z_cap);
        }
        for (std::size_t j = 0; j < du.size(); ++j) {
            const double cap = std::min(1.0, std::abs(marks.marks[j].x));
            const double lo = g.params.jump_slope_min * cap;
            const double hi = g.params.jump_slope_max * cap;
            const double excess = std::max(lo - du[j], du[j] - hi);
            if (excess > 1e-9) {
                ++rep.u_bound_violations;
                rep.worst_u_excess = std::max(rep.worst_u_excess, excess);
            }
        }
    }
    return rep;
}

double predictable_bracket(const LatticeModel& model, std::span<const double> psi,
                           std::span<const double> u) {
    const BranchScheme& s = model.scheme();
    double acc = 0.0;
    for (std::size_t j = 0; j < s.mark_count; ++j) {
        acc += psi[j] * u[j] * s.jump_var[j] / s.h;
    }
    return acc;
}

Generator girsanov_reduce(const LatticeModel& model, const Generator& g,
                          const PredictableProcess& drift) {
    if (drift.z_dim != g.z_dim || drift.u_dim != g.u_dim) {
        throw ModelError("girsanov reduce: drift dimensions do not match the generator");
    }
    const double floor = -1.0 + g.params.delta;
    for (std::size_t k = 0; k < model.steps(); ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            auto psi = drift.u_at(k, node);
            for (std::size_t j = 0; j < psi.size(); ++j) {
                if (psi[j] < floor) {
                    throw MeasureError("girsanov reduce: psi below -1+delta at step " +
                                       std::to_string(k) + ", node " + std::to_string(node) +
                                       ", mark " + std::to_string(j));
                }
            }
        }
    }

    auto shared = std::make_shared<const PredictableProcess>(drift);
    // Pairing weights lambda_j (1 - lambda_j h) of the lattice bracket.
    std::vector<double> pair_weight(model.mark_count());
    for (std::size_t j = 0; j < model.mark_count(); ++j) {
        pair_weight[j] = model.scheme().jump_var[j] / model.scheme().h;
    }

    Generator out = g;
    auto base = g.eval;
    out.eval = [base, shared, pair_weight](std::size_t step, std::uint64_t node, double y,
                                           std::span<const double> z, std::span<const double> u) {
        double acc = base(step, node, y, z, u);
        auto phi = shared->z_at(step, node);
        auto psi = shared->u_at(step, node);
        for (std::size_t i = 0; i < z.size(); ++i) acc -= phi[i] * z[i];
        for (std::size_t j = 0; j < u.size(); ++j) acc -= psi[j] * u[j] * pair_weight[j];
        return acc;
    };
    if (g.grad_z) {
        auto base_gz = g.grad_z;
        out.grad_z = [base_gz, shared](std::size_t step, std::uint64_t node, double y,
                                       std::span<const double> z, std::span<const double> u,
                                       std::span<double> outv) {
            base_gz(step, node, y, z, u, outv);
            auto phi = shared->z_at(step, node);
            for (std::size_t i = 0; i < outv.size(); ++i) outv[i] -= phi[i];
        };
    }
    if (g.grad_u) {
        auto base_gu = g.grad_u;
        // d/du_j of the bracket is psi_j lambda_j (1 - lambda_j h); as a mark
        // function that is psi_j (1 - lambda_j h).
        std::vector<double> one_minus(model.mark_count());
        for (std::size_t j = 0; j < model.mark_count(); ++j) {
            one_minus[j] = 1.0 - model.scheme().jump_prob[j];
        }
        out.grad_u = [base_gu, shared, one_minus](std::size_t step, std::uint64_t node, double y,
                                                  std::span<const double> z,
                                                  std::span<const double> u,
                                                  std::span<double> outv) {
            base_gu(step, node, y, z, u, outv);
            auto psi = shared->u_at(step, node);
            for (std::size_t j = 0; j < outv.size(); ++j) outv[j] -= psi[j] * one_minus[j];
        };
    }
    return out;
}

Generator shift_generator(const LatticeModel& model, const Generator& g,
                          const AdaptedProcess& y_accum, const PredictableProcess& zu_accum) {
    check_dims(g.z_dim, g.u_dim);
    auto ybar = std::make_shared<const AdaptedProcess>(y_accum);
    auto zubar = std::make_shared<const PredictableProcess>(zu_accum);

    // Cache g along the accumulated triple so the shifted driver vanishes at
    // the origin bitwise.
    auto base_values = std::make_shared<std::vector<std::vector<double>>>(model.steps());
    for (std::size_t k = 0; k < model.steps(); ++k) {
        (*base_values)[k].resize(model.level_size(k));
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            (*base_values)[k][node] = g(k, node, y_accum.at(k, node), zu_accum.z_at(k, node),
                                        zu_accum.u_at(k, node));
        }
    }

    Generator out = g;
    auto base = g.eval;
    const std::size_t zd = g.z_dim, ud = g.u_dim;
    auto shifted_eval = [base, ybar, zubar, base_values, zd, ud](
                            std::size_t step, std::uint64_t node, double y,
                            std::span<const double> z, std::span<const double> u) {
        std::array<double, kMaxDims> zbuf{}, ubuf{};
        auto zb = zubar->z_at(step, node);
        auto ub = zubar->u_at(step, node);
        for (std::size_t i = 0; i < zd; ++i) zbuf[i] = zb[i] + z[i];
        for (std::size_t j = 0; j < ud; ++j) ubuf[j] = ub[j] + u[j];
        return base(step, node, ybar->at(step, node) + y,
                    std::span<const double>(zbuf.data(), zd),
                    std::span<const double>(ubuf.data(), ud)) -
               (*base_values)[step][node];
    };
    out.eval = shifted_eval;

    auto wrap_grad = [ybar, zubar, zd, ud](const Generator::GradFn& base_grad) -> Generator::GradFn {
        if (!base_grad) return nullptr;
        return [base_grad, ybar, zubar, zd, ud](std::size_t step, std::uint64_t node, double y,
                                                std::span<const double> z,
                                                std::span<const double> u, std::span<double> outv) {
            std::array<double, kMaxDims> zbuf{}, ubuf{};
            auto zb = zubar->z_at(step, node);
            auto ub = zubar->u_at(step, node);
            for (std::size_t i = 0; i < zd; ++i) zbuf[i] = zb[i] + z[i];
            for (std::size_t j = 0; j < ud; ++j) ubuf[j] = ub[j] + u[j];
            base_grad(step, node, ybar->at(step, node) + y,
                      std::span<const double>(zbuf.data(), zd),
                      std::span<const double>(ubuf.data(), ud), outv);
        };
    };
    out.grad_z = wrap_grad(g.grad_z);
    out.grad_u = wrap_grad(g.grad_u);

    // Inherited growth envelope: the accumulated terms move into a node
    // dependent alpha and the variable part fits scale 4 gamma, using
    // (a+b)^2 <= 2a^2 + 2b^2, the convexity splitting of the jump penalty
    // and the monotonicity of s -> j(s u)/s.
    const double beta = g.params.beta;
    const double gamma = g.params.gamma;
    const MarkSpace mk = model.marks();
    Generator::AlphaFn base_alpha_fn = g.alpha;
    const double base_alpha_const = g.params.alpha_bound;
    auto shifted_alpha = [ybar, zubar, mk, beta, gamma, base_alpha_fn, base_alpha_const](
                             std::size_t step, std::uint64_t node) {
        const double a0 = base_alpha_fn ? base_alpha_fn(step, node) : base_alpha_const;
        const double yb = std::abs(ybar->at(step, node));
        auto zb = zubar->z_at(step, node);
        auto ub = zubar->u_at(step, node);
        double zz = 0.0;
        for (double v : zb) zz += v * v;
        const double j1 = std::max(jump_penalty_scaled(mk, ub, gamma),
                                   jump_penalty_scaled(mk, ub, -gamma)) / gamma;
        const double j2 = std::max(jump_penalty_scaled(mk, ub, 2.0 * gamma),
                                   jump_penalty_scaled(mk, ub, -2.0 * gamma)) / (2.0 * gamma);
        return 2.0 * a0 + 2.0 * beta * yb + 3.0 * gamma * zz + j1 + j2;
    };
    out.alpha = shifted_alpha;
    out.params.gamma = 4.0 * gamma;
    double alpha_sup = 0.0;
    for (std::size_t k = 0; k < model.steps(); ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            alpha_sup = std::max(alpha_sup, shifted_alpha(k, node));
        }
    }
    out.params.alpha_bound = alpha_sup;
    return out;
}

}  // namespace qbsdej
