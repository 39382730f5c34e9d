#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "qbsdej/errors.hpp"
#include "qbsdej/lattice.hpp"

namespace qbsdej {

/// Scaled exponential remainder (e^(eta x) - 1 - eta x) / eta, eta != 0.
/// Evaluated by series for small |eta x| so the doubling identity
/// h_{2 eta}(x) = (e^(eta x) - 1)^2 / (2 eta) + h_eta(x) holds to full
/// precision. Throws PreconditionError at eta = 0.
double exp_remainder(double eta, double x);

/// e^x - 1 - x without cancellation for small x.
double expm1m(double x);

/// Jump-exponential functional j(u) = sum_j lambda_j (e^(u_j) - 1 - u_j).
/// Nonnegative and convex; plays for u the role |z|^2 plays for z.
double jump_penalty(const MarkSpace& marks, std::span<const double> u);

/// j(scale * u) with the same stability guarantees.
double jump_penalty_scaled(const MarkSpace& marks, std::span<const double> u, double scale);

/// Weighted squared norm sum_j lambda_j u_j^2.
double nu_norm2(const MarkSpace& marks, std::span<const double> u);

/// Structural constants declared for a generator. The growth envelope uses
/// (beta, gamma, alpha_bound); the fixed-point machinery uses lipschitz_y and
/// local_lipschitz; the second-order bounds use theta, grad_z_bound,
/// grad_u_bound; the jump-slope corridor uses (jump_slope_min, jump_slope_max)
/// with jump_slope_min >= -1 + delta.
struct GeneratorParams {
    double beta = 0.0;
    double gamma = 1.0;
    double lipschitz_y = 0.0;
    double local_lipschitz = 1.0;
    double alpha_bound = 0.0;
    double theta = 0.0;
    double delta = 1e-6;
    double jump_slope_min = -1.0 + 1e-6;
    double jump_slope_max = 10.0;
    double grad_z_bound = 0.0;
    double grad_u_bound = 0.0;

    void validate() const;
};

/// Driver g(step, node, y, z, u). Pure value object: eval must be a pure
/// function of its arguments, so concurrent evaluation is safe. Analytic
/// gradients are optional; when absent, central finite differences are used.
/// grad_u returns the mark-function values D_u g(x_j), i.e. the gradient
/// against the weighted inner product <v, w> = sum_j v_j w_j lambda_j.
struct Generator {
    using EvalFn = std::function<double(std::size_t step, std::uint64_t node, double y,
                                        std::span<const double> z, std::span<const double> u)>;
    using GradFn = std::function<void(std::size_t step, std::uint64_t node, double y,
                                      std::span<const double> z, std::span<const double> u,
                                      std::span<double> out)>;
    using AlphaFn = std::function<double(std::size_t step, std::uint64_t node)>;

    std::size_t z_dim = 1;
    std::size_t u_dim = 0;
    GeneratorParams params;
    EvalFn eval;
    GradFn grad_z;  // optional
    GradFn grad_u;  // optional
    AlphaFn alpha;  // defaults to the constant alpha_bound

    double operator()(std::size_t step, std::uint64_t node, double y, std::span<const double> z,
                      std::span<const double> u) const {
        return eval(step, node, y, z, u);
    }
    /// g(step, node, 0, 0, 0).
    double at_zero(std::size_t step, std::uint64_t node) const;
    double alpha_at(std::size_t step, std::uint64_t node) const;
};

/// Canonical quadratic driver (gamma/2)|z|^2 + j(gamma u)/gamma. Vanishes on
/// (y, 0, 0), is jointly convex in (z, u), and the solved Y reproduces the
/// entropic risk measure.
Generator make_entropic(std::size_t z_dim, const MarkSpace& marks, double gamma);

/// g = a y + b . z + sum_j c_j lambda_j u_j. The envelope constants are
/// derived in closed form (Fenchel dual of the jump penalty per mark).
Generator make_linear(std::size_t z_dim, const MarkSpace& marks, double a,
                      std::vector<double> b, std::vector<double> c, double gamma = 1.0);

/// g = a y + b . z + constant + sum_j slope_j lambda_j u_j with the jump
/// slopes confined to the corridor [c1 (1 ^ |x_j|), c2 (1 ^ |x_j|)].
Generator make_royer(std::size_t z_dim, const MarkSpace& marks, double a, std::vector<double> b,
                     double constant, std::vector<double> jump_slopes, double c1, double c2,
                     double gamma = 1.0);

/// One evaluation point for the sampled checkers.
struct SamplePoint {
    std::size_t step = 0;
    std::uint64_t node = 0;
    double y = 0.0;
    std::vector<double> z;
    std::vector<double> u;
};

/// Worst signed slack of the two-sided quadratic growth envelope
///   -alpha - beta|y| - (gamma/2)|z|^2 - j(-gamma u)/gamma
///     <= g - g(0,0,0) <=
///   alpha + beta|y| + (gamma/2)|z|^2 + j(gamma u)/gamma
/// over the sample grid. Failures are reported, never thrown.
struct EnvelopeReport {
    double worst_upper_slack = 0.0;  // min over samples of (upper bound - g)
    double worst_lower_slack = 0.0;  // min over samples of (g - lower bound)
    std::size_t violations = 0;
    bool pass = true;
};
EnvelopeReport envelope_check(const Generator& g, const MarkSpace& marks,
                              std::span<const SamplePoint> grid, double tol = 1e-10);

std::vector<double> numeric_grad_z(const Generator& g, std::size_t step, std::uint64_t node,
                                   double y, std::span<const double> z, std::span<const double> u,
                                   double rel_step = 1e-5);
std::vector<double> numeric_grad_u(const Generator& g, const MarkSpace& marks, std::size_t step,
                                   std::uint64_t node, double y, std::span<const double> z,
                                   std::span<const double> u, double rel_step = 1e-5);

/// Validates analytic gradients against central differences and checks the
/// declared derivative bounds |D_z g| <= grad_z_bound + theta |z| and
/// c1 (1 ^ |x_j|) <= D_u g(x_j) <= c2 (1 ^ |x_j|).
struct GradientReport {
    double max_z_deviation = 0.0;
    double max_u_deviation = 0.0;
    std::size_t z_bound_violations = 0;
    std::size_t u_bound_violations = 0;
    double worst_z_excess = 0.0;
    double worst_u_excess = 0.0;
};
GradientReport gradient_check(const Generator& g, const MarkSpace& marks,
                              std::span<const SamplePoint> grid, double rel_step = 1e-5);

/// The pairing the lattice assigns to a predictable jump slope against u:
/// sum_j psi_j u_j lambda_j (1 - lambda_j h). This is the per-step predictable
/// covariation of the two compensated jump integrals divided by h; with it the
/// reduced-generator solve under the reweighted measure reproduces the
/// original solution node for node, not merely up to O(h).
double predictable_bracket(const LatticeModel& model, std::span<const double> psi,
                           std::span<const double> u);

/// Reduced driver g - phi . z - <psi, u>: removes the first-order (z, u) part
/// so that solving it under the doleans_exponential(phi, psi) measure is
/// equivalent to solving g under the base measure. Requires psi_j >= -1+delta
/// pointwise (delta from g.params); violations are rejected.
Generator girsanov_reduce(const LatticeModel& model, const Generator& g,
                          const PredictableProcess& drift);

/// Stage driver of the splitting construction: g'(y,z,u) =
/// g(Y.+y, Z.+z, U.+u) - g(Y., Z., U.) around an accumulated triple. Vanishes
/// at (0,0,0) by construction. The declared envelope constants are
/// transformed (gamma -> 4 gamma, node-dependent alpha absorbing the
/// accumulated terms) so the growth assumption is inherited.
Generator shift_generator(const LatticeModel& model, const Generator& g,
                          const AdaptedProcess& y_accum, const PredictableProcess& zu_accum);

}  // namespace qbsdej
