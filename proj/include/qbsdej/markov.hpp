#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "qbsdej/generators.hpp"
#include "qbsdej/lattice.hpp"
#include "qbsdej/solver.hpp"

namespace qbsdej {

/// Recombined form of the tree for state-measurable data: a node at level k
/// is the vector of per-dimension up-move counts and per-mark jump counts,
/// not the full outcome history. Every path node with the same counts sees
/// the same one-step transition, so when the terminal condition and the
/// driver depend on the path only through these counts, backward induction
/// over states produces exactly the values the full tree would. Level k has
/// (k+1)^(d+m) states against branching^k tree nodes, which is what makes
/// long horizons reachable.
struct StateModel {
    TimeGrid grid;
    MarkSpace marks;
    std::size_t brownian_dims = 1;
    BranchScheme scheme;

    static StateModel build(TimeGrid grid, MarkSpace marks, std::size_t brownian_dims = 1);

    std::size_t dims() const { return scheme.brownian_dims + scheme.mark_count; }
    std::uint64_t level_size(std::size_t k) const;
};

/// State index at level k in mixed radix k+1: component i is digit i.
std::uint64_t state_index(const StateModel& model, std::size_t k, std::span<const int> ups,
                          std::span<const int> jumps);

/// Terminal payoff as a function of the per-dimension Brownian sums and
/// per-mark jump counts (same closure shape as make_terminal on the tree).
using StateTerminalFn =
    std::function<double(std::span<const double> brownian_sums, std::span<const int> jump_counts)>;

struct MarkovSolution {
    std::vector<std::vector<double>> y;  // [k][state]
    std::vector<std::vector<double>> z;  // [k][state * d + i]
    std::vector<std::vector<double>> u;  // [k][state * m + j]

    double y0() const { return y[0][0]; }
};

/// Backward induction over states. The driver must not depend on the node
/// identity (it is evaluated with node = 0); this is exactly the class of
/// problems for which state recombination is lossless.
MarkovSolution solve_markov(const StateModel& model, const Generator& g,
                            const StateTerminalFn& terminal, Scheme scheme = Scheme::Implicit);

/// Exact closed-form reference (1/gamma) ln E[e^(gamma xi)] over the terminal
/// state distribution (product of binomial marginals).
double entropic_reference(const StateModel& model, double gamma, const StateTerminalFn& terminal);

/// Continuous-law reference for a clipped Gaussian terminal: the value
/// (1/gamma) ln E[e^(gamma clip(scale W, lo, hi))] with W normal of the given
/// variance, in closed form through the normal cdf. This is the limit object
/// the lattice values approach as the grid refines.
double entropic_clipped_gaussian_reference(double variance, double scale, double lo, double hi,
                                           double gamma);

}  // namespace qbsdej
