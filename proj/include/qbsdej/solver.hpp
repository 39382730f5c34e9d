#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qbsdej/generators.hpp"
#include "qbsdej/lattice.hpp"

namespace qbsdej {

enum class Scheme { Implicit, Explicit };

/// Candidate or solved (Y, Z, U) on a lattice, together with the two audit
/// trails: the projection remainder per child node and the defect of the
/// one-step backward relation per parent node.
struct SolutionTriple {
    AdaptedProcess y;
    PredictableProcess zu;
    AdaptedProcess rep_residual;                  // level k+1 holds step k's remainder
    std::vector<std::vector<double>> eq_residual; // [k][node], k = 0..N-1

    static SolutionTriple zeros(const LatticeModel& model);
};

void add_in_place(SolutionTriple& acc, const SolutionTriple& other);
SolutionTriple subtract(const SolutionTriple& a, const SolutionTriple& b);

/// Fixed-point iteration settings. `radius` and `xi_bound` are evaluated
/// from the generator constants:
///   eta      = 2 * lipschitz_y
///   radius   = 1 / (2 sqrt(2670) mu e^(eta T))
///   xi_bound = 1 / (2 sqrt(15) sqrt(2670) mu e^(1.5 lipschitz_y T))
/// Both are +inf when mu = 0 (globally Lipschitz drivers need no ball).
struct PicardConfig {
    std::size_t max_iters = 200;
    double tol = 1e-12;
    double eta = 0.0;
    double radius = 0.0;
    double xi_bound = 0.0;
    double d_const = 1.0;  // weight of the driver-at-zero budget in smallness tests
    Scheme scheme = Scheme::Implicit;

    static PicardConfig from_params(const GeneratorParams& params, const TimeGrid& grid);
};

/// Backward induction through the whole tree. At each node: conditional mean
/// of the next level, diagonal projection for (Z, U) and the remainder, then
/// the scalar step y = mean + h g(y, Z, U) (implicit; requires
/// h * lipschitz_y < 1) or y = mean + h g(mean, Z, U) (explicit). With
/// `weights`, the conditional mean is taken under the reweighted measure
/// while (Z, U) keep their projection meaning.
SolutionTriple solve_exact(const LatticeModel& model, const Generator& g,
                           std::span<const double> terminal, Scheme scheme = Scheme::Implicit,
                           const ProbabilityWeights* weights = nullptr);

/// One application of the fixed-point map: solves the backward equation with
/// the driver frozen at the input's (z, u); only the input's predictable part
/// is read, never its Y.
SolutionTriple picard_map(const LatticeModel& model, const Generator& g,
                          std::span<const double> terminal, const SolutionTriple& input,
                          Scheme scheme = Scheme::Implicit,
                          const ProbabilityWeights* weights = nullptr);

struct PicardTraceRow {
    std::size_t iter = 0;
    double distance = 0.0;      // ball norm of the difference to the previous iterate
    double dy2 = 0.0;           // squared sup-norm component of that difference
    double dz2 = 0.0;           // H2-BMO component
    double du2 = 0.0;           // J2-BMO component
    double du_linf2 = 0.0;      // squared L^inf(nu) component
    double iterate_ball = 0.0;  // ball norm of the iterate itself
};

struct PicardResult {
    SolutionTriple triple;
    std::vector<PicardTraceRow> trace;
    bool converged = false;
    bool stayed_in_ball = true;
    bool xi_warning = false;  // terminal above xi_bound; solve still attempted
    bool g0_warning = false;  // driver does not vanish at the origin
    double max_ratio = 0.0;   // worst successive-distance ratio before convergence
};

/// Iterates the fixed-point map from (0, 0, 0), recording the ball-norm
/// distance between successive iterates. Throws SolveError with the trace
/// summary if max_iters is exhausted.
PicardResult picard_solve(const LatticeModel& model, const Generator& g,
                          std::span<const double> terminal, const PicardConfig& config,
                          const ProbabilityWeights* weights = nullptr);

/// Transformed problem with the driver's value at the origin removed:
/// driver(y, z, u) = g(y - offset, z, u) - g(0,0,0), terminal = xi + offset_N,
/// where offset is the running pathwise sum h * sum_{l<k} g_l(0,0,0).
/// Solving the transformed problem and applying the back map solves (g, xi).
struct ShiftedProblem {
    Generator driver;
    std::vector<double> terminal;
    AdaptedProcess offset;
};
ShiftedProblem shift_g0(const LatticeModel& model, const Generator& g,
                        std::span<const double> terminal);
SolutionTriple apply_back_map(const ShiftedProblem& shifted, SolutionTriple solved);

/// Equal decomposition of the terminal condition into ceil(|xi|_inf/bound)
/// pieces. The pieces sum back to xi bitwise when added left to right.
struct SplitPlan {
    std::size_t n = 1;
    std::vector<std::vector<double>> pieces;
};
SplitPlan split_terminal(std::span<const double> terminal, double xi_bound);

struct StageReport {
    std::size_t stage = 0;
    double piece_linf = 0.0;
    std::size_t picard_iters = 0;
    double final_distance = 0.0;
    double max_ratio = 0.0;
    double min_branch_weight = 1.0;
    double max_abs_psi = 0.0;
    double stage_y_sup = 0.0;
};

struct GeneralResult {
    SolutionTriple triple;
    std::vector<StageReport> stages;
    std::size_t n_pieces = 1;
    bool used_g0_shift = false;
    double max_eq_residual = 0.0;
    double max_rep_residual = 0.0;
};

/// Existence route for terminal conditions of any size: removes the driver's
/// value at zero, splits the terminal into small pieces, and solves one stage
/// per piece. Each stage re-centers the driver around the accumulated triple,
/// strips its first-order (z, u) part by a measure change, and runs the
/// fixed-point solve under that measure. The summed triple solves the
/// original equation; stages telescope exactly. Stage failures raise
/// SolveError naming the stage.
GeneralResult solve_general(const LatticeModel& model, const Generator& g,
                            std::span<const double> terminal, const PicardConfig& config);

/// Recomputed defects of a candidate triple against (g, xi): per-node defect
/// of the one-step relation, the worst projection identity violation, and the
/// terminal mismatch. With `weights`, the one-step relation is audited under
/// the reweighted measure; the projection identity is measure-free.
struct ResidualReport {
    std::vector<std::vector<double>> eq_defect;
    double max_eq_defect = 0.0;
    double max_rep_defect = 0.0;
    double terminal_defect = 0.0;
};
ResidualReport residual(const LatticeModel& model, const Generator& g,
                        const SolutionTriple& triple, std::span<const double> terminal,
                        const ProbabilityWeights* weights = nullptr);

}  // namespace qbsdej
