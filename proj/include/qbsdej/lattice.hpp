#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "qbsdej/errors.hpp"

namespace qbsdej {

/// Uniform time grid on [0, T] with N steps of length h = T/N.
struct TimeGrid {
    double horizon = 1.0;
    std::size_t steps = 1;

    double dt() const { return horizon / static_cast<double>(steps); }
    double time(std::size_t k) const { return dt() * static_cast<double>(k); }
};

/// One jump mark: its location x (nonzero) and its arrival rate lambda (> 0).
struct Mark {
    double x = 0.0;
    double lambda = 0.0;
};

/// Finite-activity deterministic jump structure: finitely many marks, each an
/// independent per-step Bernoulli with success probability lambda_j * h.
struct MarkSpace {
    std::vector<Mark> marks;

    std::size_t size() const { return marks.size(); }
    bool empty() const { return marks.empty(); }
};

/// The one-step branching shared by every node: 2^d Rademacher sign patterns
/// for the Brownian increments times 2^m jump/no-jump patterns for the marks.
/// Branch bit layout: bits [0, d) are Brownian up-flags, bits [d, d+m) are
/// jump indicators.
struct BranchScheme {
    std::size_t brownian_dims = 0;
    std::size_t mark_count = 0;
    double h = 0.0;
    double sqrt_h = 0.0;
    std::vector<double> jump_prob;  // lambda_j * h
    std::vector<double> jump_var;   // lambda_j * h * (1 - lambda_j * h)
    std::vector<double> prob;       // per-branch probability, size 2^(d+m)

    std::uint32_t branching() const { return static_cast<std::uint32_t>(1u << (brownian_dims + mark_count)); }
    bool up_flag(std::uint32_t branch, std::size_t dim) const { return (branch >> dim) & 1u; }
    bool jump_flag(std::uint32_t branch, std::size_t j) const { return (branch >> (brownian_dims + j)) & 1u; }
    /// Brownian increment of dimension `dim` on `branch`: +/- sqrt(h).
    double brownian_increment(std::uint32_t branch, std::size_t dim) const {
        return up_flag(branch, dim) ? sqrt_h : -sqrt_h;
    }
    /// Compensated jump increment of mark j on `branch`: 1{jump} - lambda_j h.
    double compensated_jump(std::uint32_t branch, std::size_t j) const {
        return (jump_flag(branch, j) ? 1.0 : 0.0) - jump_prob[j];
    }

    static BranchScheme build(const TimeGrid& grid, const MarkSpace& marks, std::size_t d);
};

/// Exact finite filtered model: a non-recombining product tree over the branch
/// scheme. Level k holds branching()^k nodes in a dense, level-ordered array;
/// the children of node n are n * branching() + a for branch a. Immutable
/// after construction; all observers are safe to call concurrently.
class LatticeModel {
public:
    static constexpr std::uint64_t kDefaultBudget = std::uint64_t{1} << 24;

    /// Validates the grid, marks and memory budget and builds the model.
    /// The budget bounds branching() * total_nodes().
    static LatticeModel build(TimeGrid grid, MarkSpace marks, std::size_t brownian_dims = 1,
                              std::uint64_t budget = kDefaultBudget);

    const TimeGrid& grid() const { return grid_; }
    const MarkSpace& marks() const { return marks_; }
    const BranchScheme& scheme() const { return scheme_; }
    std::size_t brownian_dims() const { return scheme_.brownian_dims; }
    std::size_t mark_count() const { return scheme_.mark_count; }
    std::size_t steps() const { return grid_.steps; }
    double dt() const { return scheme_.h; }
    std::uint32_t branching() const { return scheme_.branching(); }
    std::uint64_t level_size(std::size_t k) const { return level_size_[k]; }
    std::uint64_t total_nodes() const { return total_nodes_; }

    std::uint64_t child(std::uint64_t node, std::uint32_t branch) const {
        return node * branching() + branch;
    }
    std::uint64_t parent(std::uint64_t node) const { return node / branching(); }
    std::uint32_t branch_of(std::uint64_t node) const {
        return static_cast<std::uint32_t>(node % branching());
    }

private:
    TimeGrid grid_;
    MarkSpace marks_;
    BranchScheme scheme_;
    std::vector<std::uint64_t> level_size_;
    std::uint64_t total_nodes_ = 0;
};

/// Real-valued process defined at every node of every step (Y-type values).
struct AdaptedProcess {
    std::vector<std::vector<double>> levels;  // levels[k][node], k = 0..N

    static AdaptedProcess zeros(const LatticeModel& model);
    double& at(std::size_t k, std::uint64_t node) { return levels[k][node]; }
    double at(std::size_t k, std::uint64_t node) const { return levels[k][node]; }
    std::span<const double> level(std::size_t k) const { return levels[k]; }
};

/// Predictable pair (z, u): a d-vector and an m-vector per node of steps
/// 0..N-1, committed before the step's increment is revealed.
struct PredictableProcess {
    std::size_t z_dim = 0;
    std::size_t u_dim = 0;
    std::vector<std::vector<double>> z;  // z[k][node * z_dim + i]
    std::vector<std::vector<double>> u;  // u[k][node * u_dim + j]

    static PredictableProcess zeros(const LatticeModel& model);
    std::span<double> z_at(std::size_t k, std::uint64_t node) {
        return {z[k].data() + node * z_dim, z_dim};
    }
    std::span<const double> z_at(std::size_t k, std::uint64_t node) const {
        return {z[k].data() + node * z_dim, z_dim};
    }
    std::span<double> u_at(std::size_t k, std::uint64_t node) {
        return {u[k].data() + node * u_dim, u_dim};
    }
    std::span<const double> u_at(std::size_t k, std::uint64_t node) const {
        return {u[k].data() + node * u_dim, u_dim};
    }
};

/// Equivalent-measure description: one strictly positive weight per branch of
/// every node (conditional density ratio, conditional mean 1) together with
/// the cumulative node densities (a positive martingale on the tree).
struct ProbabilityWeights {
    std::vector<std::vector<double>> branch;   // [k][node * branching + a]
    std::vector<std::vector<double>> density;  // [k][node], k = 0..N, root = 1
    double floor = 1e-9;

    double branch_weight(const LatticeModel& model, std::size_t k, std::uint64_t node,
                         std::uint32_t a) const {
        return branch[k][node * model.branching() + a];
    }
};

/// Probability-weighted average of next-step values over the children of
/// `node` at step `step`; with `weights`, the average under the reweighted
/// measure. `next_values` must cover the whole level step+1.
double conditional_expectation(const LatticeModel& model, std::size_t step, std::uint64_t node,
                               std::span<const double> next_values,
                               const ProbabilityWeights* weights = nullptr);

/// Level-wise variant writing one value per node of `step` into `out`.
void conditional_expectation_level(const LatticeModel& model, std::size_t step,
                                   std::span<const double> next_values, std::span<double> out,
                                   const ProbabilityWeights* weights = nullptr);

/// Least-squares coordinates of a centered one-step payoff on the martingale
/// basis, plus the orthogonal remainder.
struct NodeProjection {
    std::vector<double> z;         // E[Xc dB_i] / h
    std::vector<double> u;         // E[Xc dM_j] / (lambda_j h (1 - lambda_j h))
    std::vector<double> residual;  // per branch, orthogonal to 1 and the basis
};

/// Projects centered child values (one per branch) onto the span of the
/// Brownian and compensated jump increments. The basis is uncorrelated, so
/// the normal equations are diagonal. Throws PreconditionError if the input
/// mean exceeds `mean_tol` in magnitude (relative to the value scale).
NodeProjection project_representation(const LatticeModel& model,
                                      std::span<const double> centered_children,
                                      double mean_tol = 1e-10);

/// Discrete stochastic exponential of the predictable integrand (phi, psi):
/// per-branch weight w = 1 + phi . dB + sum_j psi_j dM_j, normalized to
/// conditional mean 1. Every weight must stay above `floor`, the discrete
/// counterpart of jumps bounded below by -1 + delta; otherwise the change of
/// measure is rejected naming the node. Under the induced measure,
/// E[dB_i] = phi_i h and E[dM_j] = psi_j lambda_j h (1 - lambda_j h).
ProbabilityWeights doleans_exponential(const LatticeModel& model,
                                       const PredictableProcess& integrand, double floor = 1e-9);

/// Terminal condition from a closure of the terminal state: per leaf, the
/// per-dimension Brownian sums and per-mark jump counts along the path.
std::vector<double> make_terminal(const LatticeModel& model,
                                  const std::function<double(std::span<const double> brownian_sums,
                                                             std::span<const int> jump_counts)>& f);

/// Brownian sums and jump counts along the path to (step, node).
void decode_state(const LatticeModel& model, std::size_t step, std::uint64_t node,
                  std::span<double> brownian_sums, std::span<int> jump_counts);

namespace detail {
/// Diagonal least-squares kernel on one node's (already centered) child
/// values; fills z, u and the orthogonal remainder per branch.
void project_node(const BranchScheme& s, std::span<const double> centered,
                  std::span<double> z_out, std::span<double> u_out,
                  std::span<double> residual_out);
}  // namespace detail

}  // namespace qbsdej
