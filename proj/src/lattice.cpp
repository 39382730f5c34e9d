#include "qbsdej/lattice.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

namespace qbsdej {

namespace {

std::string node_label(std::size_t step, std::uint64_t node) {
    return "step " + std::to_string(step) + ", node " + std::to_string(node);
}

}  // namespace

BranchScheme BranchScheme::build(const TimeGrid& grid, const MarkSpace& marks, std::size_t d) {
    if (!(grid.horizon > 0.0) || !std::isfinite(grid.horizon)) {
        throw ModelError("time grid: horizon must be finite and > 0");
    }
    if (grid.steps < 1) {
        throw ModelError("time grid: need at least one step");
    }
    const double h = grid.dt();
    const std::size_t m = marks.size();
    if (d + m > 24) {
        throw ModelError("branch scheme: 2^(d+m) outcomes per step exceeds any sane budget");
    }
    for (std::size_t j = 0; j < m; ++j) {
        const Mark& mk = marks.marks[j];
        if (!(mk.lambda > 0.0) || !std::isfinite(mk.lambda)) {
            throw ModelError("mark " + std::to_string(j) + ": intensity must be finite and > 0");
        }
        if (mk.x == 0.0 || !std::isfinite(mk.x)) {
            throw ModelError("mark " + std::to_string(j) + ": location must be finite and nonzero");
        }
        for (std::size_t i = 0; i < j; ++i) {
            if (marks.marks[i].x == mk.x) {
                throw ModelError("mark " + std::to_string(j) + ": duplicate location " +
                                 std::to_string(mk.x));
            }
        }
        if (mk.lambda * h >= 1.0) {
            throw ModelError("mark " + std::to_string(j) + ": intensity-step violation, lambda*h = " +
                             std::to_string(mk.lambda * h) + " >= 1");
        }
    }

    BranchScheme s;
    s.brownian_dims = d;
    s.mark_count = m;
    s.h = h;
    s.sqrt_h = std::sqrt(h);
    s.jump_prob.resize(m);
    s.jump_var.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        const double p = marks.marks[j].lambda * h;
        s.jump_prob[j] = p;
        s.jump_var[j] = p * (1.0 - p);
    }
    const std::uint32_t branching = s.branching();
    s.prob.resize(branching);
    const double brownian_factor = std::pow(0.5, static_cast<double>(d));
    for (std::uint32_t a = 0; a < branching; ++a) {
        double p = brownian_factor;
        for (std::size_t j = 0; j < m; ++j) {
            p *= s.jump_flag(a, j) ? s.jump_prob[j] : 1.0 - s.jump_prob[j];
        }
        s.prob[a] = p;
    }
    return s;
}

LatticeModel LatticeModel::build(TimeGrid grid, MarkSpace marks, std::size_t brownian_dims,
                                 std::uint64_t budget) {
    LatticeModel model;
    model.scheme_ = BranchScheme::build(grid, marks, brownian_dims);
    model.grid_ = grid;
    model.marks_ = std::move(marks);

    const std::uint64_t branching = model.scheme_.branching();
    model.level_size_.resize(grid.steps + 1);
    std::uint64_t size = 1;
    std::uint64_t total = 0;
    for (std::size_t k = 0; k <= grid.steps; ++k) {
        model.level_size_[k] = size;
        if (total > std::numeric_limits<std::uint64_t>::max() - size) {
            throw ModelError("lattice: node count overflows 64 bits");
        }
        total += size;
        if (k < grid.steps) {
            if (size > std::numeric_limits<std::uint64_t>::max() / branching) {
                throw ModelError("lattice: node count overflows 64 bits");
            }
            size *= branching;
        }
    }
    model.total_nodes_ = total;
    if (total > budget / branching) {
        throw ModelError("lattice: memory budget exceeded, needs " +
                         std::to_string(branching) + " * " + std::to_string(total) +
                         " branch slots against a budget of " + std::to_string(budget));
    }
    return model;
}

AdaptedProcess AdaptedProcess::zeros(const LatticeModel& model) {
    AdaptedProcess p;
    p.levels.resize(model.steps() + 1);
    for (std::size_t k = 0; k <= model.steps(); ++k) {
        p.levels[k].assign(model.level_size(k), 0.0);
    }
    return p;
}

PredictableProcess PredictableProcess::zeros(const LatticeModel& model) {
    PredictableProcess p;
    p.z_dim = model.brownian_dims();
    p.u_dim = model.mark_count();
    p.z.resize(model.steps());
    p.u.resize(model.steps());
    for (std::size_t k = 0; k < model.steps(); ++k) {
        p.z[k].assign(model.level_size(k) * p.z_dim, 0.0);
        p.u[k].assign(model.level_size(k) * p.u_dim, 0.0);
    }
    return p;
}

double conditional_expectation(const LatticeModel& model, std::size_t step, std::uint64_t node,
                               std::span<const double> next_values,
                               const ProbabilityWeights* weights) {
    if (step >= model.steps()) {
        throw ModelError("conditional expectation: step " + std::to_string(step) +
                         " has no children");
    }
    if (next_values.size() != model.level_size(step + 1)) {
        throw ModelError("conditional expectation: missing child values at step " +
                         std::to_string(step + 1) + " (got " + std::to_string(next_values.size()) +
                         ", need " + std::to_string(model.level_size(step + 1)) + ")");
    }
    const BranchScheme& s = model.scheme();
    const std::uint32_t branching = s.branching();
    double acc = 0.0;
    for (std::uint32_t a = 0; a < branching; ++a) {
        double p = s.prob[a];
        if (weights != nullptr) p *= weights->branch[step][node * branching + a];
        acc += p * next_values[model.child(node, a)];
    }
    return acc;
}

void conditional_expectation_level(const LatticeModel& model, std::size_t step,
                                   std::span<const double> next_values, std::span<double> out,
                                   const ProbabilityWeights* weights) {
    if (out.size() != model.level_size(step)) {
        throw ModelError("conditional expectation: output span has wrong size at step " +
                         std::to_string(step));
    }
    for (std::uint64_t node = 0; node < model.level_size(step); ++node) {
        out[node] = conditional_expectation(model, step, node, next_values, weights);
    }
}

namespace detail {

void project_node(const BranchScheme& s, std::span<const double> centered,
                  std::span<double> z_out, std::span<double> u_out,
                  std::span<double> residual_out) {
    const std::uint32_t branching = s.branching();
    for (std::size_t i = 0; i < s.brownian_dims; ++i) {
        double acc = 0.0;
        for (std::uint32_t a = 0; a < branching; ++a) {
            acc += s.prob[a] * centered[a] * s.brownian_increment(a, i);
        }
        z_out[i] = acc / s.h;
    }
    for (std::size_t j = 0; j < s.mark_count; ++j) {
        double acc = 0.0;
        for (std::uint32_t a = 0; a < branching; ++a) {
            acc += s.prob[a] * centered[a] * s.compensated_jump(a, j);
        }
        u_out[j] = acc / s.jump_var[j];
    }
    if (!residual_out.empty()) {
        for (std::uint32_t a = 0; a < branching; ++a) {
            double fit = 0.0;
            for (std::size_t i = 0; i < s.brownian_dims; ++i) {
                fit += z_out[i] * s.brownian_increment(a, i);
            }
            for (std::size_t j = 0; j < s.mark_count; ++j) {
                fit += u_out[j] * s.compensated_jump(a, j);
            }
            residual_out[a] = centered[a] - fit;
        }
    }
}

}  // namespace detail

NodeProjection project_representation(const LatticeModel& model,
                                      std::span<const double> centered_children, double mean_tol) {
    const BranchScheme& s = model.scheme();
    if (centered_children.size() != s.branching()) {
        throw ModelError("projection: need exactly one value per branch");
    }
    double mean = 0.0;
    double scale = 1.0;
    for (std::uint32_t a = 0; a < s.branching(); ++a) {
        mean += s.prob[a] * centered_children[a];
        scale = std::max(scale, std::abs(centered_children[a]));
    }
    if (std::abs(mean) > mean_tol * scale) {
        throw PreconditionError("projection: input has nonzero conditional mean " +
                                std::to_string(mean));
    }
    NodeProjection out;
    out.z.resize(s.brownian_dims);
    out.u.resize(s.mark_count);
    out.residual.resize(s.branching());
    detail::project_node(s, centered_children, out.z, out.u, out.residual);
    return out;
}

ProbabilityWeights doleans_exponential(const LatticeModel& model,
                                       const PredictableProcess& integrand, double floor) {
    if (integrand.z_dim != model.brownian_dims() || integrand.u_dim != model.mark_count()) {
        throw ModelError("doleans exponential: integrand dimensions do not match the model");
    }
    const BranchScheme& s = model.scheme();
    const std::uint32_t branching = s.branching();

    ProbabilityWeights w;
    w.floor = floor;
    w.branch.resize(model.steps());
    w.density.resize(model.steps() + 1);
    w.density[0].assign(1, 1.0);

    for (std::size_t k = 0; k < model.steps(); ++k) {
        const std::uint64_t n_nodes = model.level_size(k);
        w.branch[k].assign(n_nodes * branching, 1.0);
        w.density[k + 1].assign(model.level_size(k + 1), 0.0);
        for (std::uint64_t node = 0; node < n_nodes; ++node) {
            auto phi = integrand.z_at(k, node);
            auto psi = integrand.u_at(k, node);
            double mean = 0.0;
            for (std::uint32_t a = 0; a < branching; ++a) {
                double inc = 1.0;
                for (std::size_t i = 0; i < s.brownian_dims; ++i) {
                    inc += phi[i] * s.brownian_increment(a, i);
                }
                for (std::size_t j = 0; j < s.mark_count; ++j) {
                    inc += psi[j] * s.compensated_jump(a, j);
                }
                if (!(inc > floor)) {
                    throw MeasureError("doleans exponential: branch weight " + std::to_string(inc) +
                                       " at or below the floor " + std::to_string(floor) + " at " +
                                       node_label(k, node));
                }
                w.branch[k][node * branching + a] = inc;
                mean += s.prob[a] * inc;
            }
            // Conditional mean is 1 up to rounding; pin it exactly.
            for (std::uint32_t a = 0; a < branching; ++a) {
                double& b = w.branch[k][node * branching + a];
                b /= mean;
                w.density[k + 1][model.child(node, a)] = w.density[k][node] * b;
            }
        }
    }
    return w;
}

void decode_state(const LatticeModel& model, std::size_t step, std::uint64_t node,
                  std::span<double> brownian_sums, std::span<int> jump_counts) {
    const BranchScheme& s = model.scheme();
    const std::size_t d = s.brownian_dims;
    const std::size_t m = s.mark_count;
    if (brownian_sums.size() != d || jump_counts.size() != m) {
        throw ModelError("decode_state: output spans have wrong dimensions");
    }
    for (std::size_t i = 0; i < d; ++i) brownian_sums[i] = 0.0;
    for (std::size_t j = 0; j < m; ++j) jump_counts[j] = 0;
    const std::uint32_t bits = static_cast<std::uint32_t>(d + m);
    const std::uint64_t mask = model.branching() - 1;
    for (std::size_t k = 0; k < step; ++k) {
        // Branch taken at step k is digit (step-1-k) of the node index.
        const auto branch =
            static_cast<std::uint32_t>((node >> (bits * (step - 1 - k))) & mask);
        for (std::size_t i = 0; i < d; ++i) brownian_sums[i] += s.brownian_increment(branch, i);
        for (std::size_t j = 0; j < m; ++j) jump_counts[j] += s.jump_flag(branch, j) ? 1 : 0;
    }
}

std::vector<double> make_terminal(const LatticeModel& model,
                                  const std::function<double(std::span<const double>,
                                                             std::span<const int>)>& f) {
    const std::size_t n = model.steps();
    std::vector<double> out(model.level_size(n));
    std::vector<double> sums(model.brownian_dims());
    std::vector<int> counts(model.mark_count());
    for (std::uint64_t leaf = 0; leaf < out.size(); ++leaf) {
        decode_state(model, n, leaf, sums, counts);
        out[leaf] = f(sums, counts);
    }
    return out;
}

}  // namespace qbsdej
