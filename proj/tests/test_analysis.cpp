#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "qbsdej/analysis.hpp"
#include "qbsdej/generators.hpp"
#include "qbsdej/lattice.hpp"
#include "qbsdej/rng.hpp"
#include "qbsdej/solver.hpp"

using namespace qbsdej;

namespace {

MarkSpace one_mark(double x, double lambda) {
    MarkSpace m;
    m.marks.push_back({x, lambda});
    return m;
}

Generator zero_generator(std::size_t d, const MarkSpace& marks) {
    return make_linear(d, marks, 0.0, std::vector<double>(d, 0.0),
                       std::vector<double>(marks.size(), 0.0));
}

std::vector<double> random_leaves(const LatticeModel& model, Rng& rng, double amp) {
    std::vector<double> xi(model.level_size(model.steps()));
    for (double& v : xi) v = rng.range(-amp, amp);
    return xi;
}

// Independent oracle for the remaining quadratic variation at a node: sum
// over all paths of the subtree rooted there.
double brute_force_remaining_qv(const LatticeModel& model, const PredictableProcess& zu,
                                std::size_t k0, std::uint64_t node0, bool brownian) {
    const double h = model.dt();
    double total = 0.0;
    struct Frame {
        std::size_t k;
        std::uint64_t node;
        double prob;
        double acc;
    };
    std::vector<Frame> stack = {{k0, node0, 1.0, 0.0}};
    while (!stack.empty()) {
        const Frame f = stack.back();
        stack.pop_back();
        if (f.k == model.steps()) {
            total += f.prob * f.acc;
            continue;
        }
        double inc = 0.0;
        if (brownian) {
            auto z = zu.z_at(f.k, f.node);
            for (double zi : z) inc += zi * zi;
        } else {
            auto u = zu.u_at(f.k, f.node);
            for (std::size_t j = 0; j < u.size(); ++j) {
                inc += u[j] * u[j] * model.marks().marks[j].lambda;
            }
        }
        inc *= h;
        for (std::uint32_t a = 0; a < model.branching(); ++a) {
            stack.push_back({f.k + 1, model.child(f.node, a), f.prob * model.scheme().prob[a],
                             f.acc + inc});
        }
    }
    return total;
}

}  // namespace

TEST_CASE("deterministic z gives the squared-norm times horizon at the root") {
    const MarkSpace none;
    const LatticeModel model = LatticeModel::build({1.0, 4}, none, 1);
    AdaptedProcess y = AdaptedProcess::zeros(model);
    PredictableProcess zu = PredictableProcess::zeros(model);
    const double c = 1.7;
    for (auto& level : zu.z) {
        for (double& v : level) v = c;
    }
    const NormReport rep = compute_norms(model, y, zu);
    CHECK(rep.h2_bmo == doctest::Approx(c * c).epsilon(1e-14));
    CHECK(rep.j2_bmo == 0.0);
    CHECK(rep.s_inf == 0.0);
    CHECK(rep.ball == doctest::Approx(c * c).epsilon(1e-14));
}

TEST_CASE("deterministic jump component gives lambda-weighted quadratic variation") {
    const MarkSpace m1 = one_mark(1.0, 1.0);
    const LatticeModel model = LatticeModel::build({1.0, 4}, m1, 1);
    AdaptedProcess y = AdaptedProcess::zeros(model);
    PredictableProcess zu = PredictableProcess::zeros(model);
    for (auto& level : zu.u) {
        for (double& v : level) v = 2.0;
    }
    const NormReport rep = compute_norms(model, y, zu);
    CHECK(rep.j2_bmo == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(rep.linf_nu == doctest::Approx(2.0));
    CHECK(rep.ball == doctest::Approx(4.0 + 4.0).epsilon(1e-14));
}

TEST_CASE("sup norm of a deterministic path") {
    const MarkSpace none;
    const LatticeModel model = LatticeModel::build({1.0, 3}, none, 1);
    AdaptedProcess y = AdaptedProcess::zeros(model);
    for (std::size_t k = 0; k <= 3; ++k) {
        for (double& v : y.levels[k]) v = -0.5 * static_cast<double>(k + 1);
    }
    const NormReport rep = compute_norms(model, y, PredictableProcess::zeros(model));
    CHECK(rep.s_inf == doctest::Approx(2.0));
}

TEST_CASE("bmo norms equal the brute-force subtree sums and dominate stopping rules") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 4}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(33);
    const std::vector<double> xi = random_leaves(model, rng, 0.5);
    const SolutionTriple s = solve_exact(model, g, xi);
    const NormReport rep = compute_norms(model, s);

    double max_z = 0.0, max_u = 0.0;
    for (std::size_t k = 0; k <= model.steps(); ++k) {
        for (std::uint64_t node = 0; node < model.level_size(k); ++node) {
            max_z = std::max(max_z, brute_force_remaining_qv(model, s.zu, k, node, true));
            max_u = std::max(max_u, brute_force_remaining_qv(model, s.zu, k, node, false));
        }
    }
    CHECK(rep.h2_bmo == doctest::Approx(max_z).epsilon(1e-12));
    CHECK(rep.j2_bmo == doctest::Approx(max_u).epsilon(1e-12));

    // Randomized stopping rules never beat the node maximum.
    for (int trial = 0; trial < 50; ++trial) {
        double rule_value = 0.0;
        // Walk the tree; stop at each node with probability 0.3, else at N.
        struct Frame {
            std::size_t k;
            std::uint64_t node;
        };
        std::vector<Frame> stack = {{0, 0}};
        while (!stack.empty()) {
            const Frame f = stack.back();
            stack.pop_back();
            if (f.k == model.steps() || rng.uniform01() < 0.3) {
                rule_value = std::max(rule_value,
                                      brute_force_remaining_qv(model, s.zu, f.k, f.node, true));
                continue;
            }
            for (std::uint32_t a = 0; a < model.branching(); ++a) {
                stack.push_back({f.k + 1, model.child(f.node, a)});
            }
        }
        CHECK(rule_value <= rep.h2_bmo + 1e-12);
    }
}

TEST_CASE("energy inequality: deterministic volatility") {
    const MarkSpace none;
    const LatticeModel model = LatticeModel::build({1.0, 4}, none, 1);
    const double c = 0.9;
    SolutionTriple s = SolutionTriple::zeros(model);
    for (auto& level : s.zu.z) {
        for (double& v : level) v = c;
    }
    const EnergyReport p1 = energy_check(model, s, 1);
    CHECK(p1.z_lhs == doctest::Approx(c * c).epsilon(1e-14));
    CHECK(p1.z_rhs == doctest::Approx(8.0 * c * c).epsilon(1e-14));
    CHECK(p1.pass);
    const EnergyReport p2 = energy_check(model, s, 2);
    CHECK(p2.z_lhs == doctest::Approx(std::pow(c, 4)).epsilon(1e-14));
    CHECK(p2.z_rhs == doctest::Approx(4.0 * std::pow(4.0 * c * c, 2)).epsilon(1e-14));
    CHECK(p2.pass);
}

TEST_CASE("energy inequality on a solved instance and the p cap") {
    const MarkSpace m1 = one_mark(1.0, 0.5);
    const LatticeModel model = LatticeModel::build({1.0, 4}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(35);
    const SolutionTriple s = solve_exact(model, g, random_leaves(model, rng, 0.4));
    for (int p = 1; p <= 3; ++p) CHECK(energy_check(model, s, p).pass);
    CHECK_THROWS_AS(energy_check(model, s, 7), PreconditionError);
    CHECK_THROWS_AS(energy_check(model, s, 0), PreconditionError);
}

TEST_CASE("comparison: identical problems are reflexively ordered with equal triples") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    std::vector<double> slopes = {0.3};
    const Generator g = make_royer(1, m1, -0.1, {0.2}, 0.0, slopes, -0.5, 1.0);
    Rng rng(37);
    const std::vector<double> xi = random_leaves(model, rng, 0.4);
    const ComparisonVerdict v = comparison_test(model, g, xi, g, xi, ComparisonCase::Royer);
    CHECK(v.precondition_ok);
    CHECK(v.ordered);
    CHECK(v.equality_clause_checked);
    CHECK(v.equality_clause_ok);
}

TEST_CASE("comparison: lower terminal gives strictly lower value everywhere") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(39);
    const std::vector<double> xi2 = random_leaves(model, rng, 0.3);
    std::vector<double> xi1 = xi2;
    for (double& v : xi1) v -= 0.1;
    const ComparisonVerdict v = comparison_test(model, g, xi1, g, xi2, ComparisonCase::Convex);
    CHECK(v.precondition_ok);
    CHECK(v.ordered);
    CHECK(v.root_gap > 0.05);

    // Swapped inputs: the terminal ordering precondition now fails and the
    // violation direction flips.
    const ComparisonVerdict sw = comparison_test(model, g, xi2, g, xi1, ComparisonCase::Convex);
    CHECK_FALSE(sw.precondition_ok);
    CHECK_FALSE(sw.violations.empty());
}

TEST_CASE("comparison: dominated royer driver with the same terminal") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    std::vector<double> slopes = {0.3};
    const Generator g2 = make_royer(1, m1, -0.1, {0.2}, 0.0, slopes, -0.5, 1.0);
    const Generator g1 = make_royer(1, m1, -0.1, {0.2}, -0.07, slopes, -0.5, 1.0);
    Rng rng(41);
    const std::vector<double> xi = random_leaves(model, rng, 0.4);
    const ComparisonVerdict v = comparison_test(model, g1, xi, g2, xi, ComparisonCase::Royer);
    CHECK(v.precondition_ok);
    CHECK(v.ordered);
    CHECK(v.root_gap > 0.0);
}

TEST_CASE("comparison: driver dominance precondition is reported, not a failure") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    std::vector<double> slopes = {0.3};
    const Generator g2 = make_royer(1, m1, -0.1, {0.2}, 0.0, slopes, -0.5, 1.0);
    const Generator g1 = make_royer(1, m1, -0.1, {0.2}, 0.05, slopes, -0.5, 1.0);
    Rng rng(43);
    const std::vector<double> xi = random_leaves(model, rng, 0.4);
    const ComparisonVerdict v = comparison_test(model, g1, xi, g2, xi, ComparisonCase::Royer);
    CHECK_FALSE(v.precondition_ok);
    CHECK(v.precondition_message.find("dominance") != std::string::npos);
}

TEST_CASE("stability: identical terminals give zero deltas") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(45);
    const std::vector<double> xi = random_leaves(model, rng, 0.3);
    const StabilityReport rep = stability_report(model, g, xi, xi);
    CHECK(rep.dxi_sup == 0.0);
    CHECK(rep.dy_sup == 0.0);
    CHECK(rep.du_linf == 0.0);
    CHECK(rep.dz_bmo2 == 0.0);
    CHECK(rep.du_bmo2 == 0.0);
    CHECK(rep.ratio == 0.0);
}

TEST_CASE("stability: constant shifts are exact for y-independent drivers") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 4}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(47);
    const std::vector<double> xi1 = random_leaves(model, rng, 0.3);
    std::vector<double> xi2 = xi1;
    for (double& v : xi2) v += 0.21;
    const StabilityReport rep = stability_report(model, g, xi1, xi2);
    CHECK(rep.dxi_sup == doctest::Approx(0.21));
    CHECK(rep.ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.dz_bmo2 < 1e-24);
    CHECK(rep.du_bmo2 < 1e-24);
}

TEST_CASE("stability deltas are symmetric in the terminal pair") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(49);
    const std::vector<double> xi1 = random_leaves(model, rng, 0.3);
    const std::vector<double> xi2 = random_leaves(model, rng, 0.3);
    const StabilityReport a = stability_report(model, g, xi1, xi2);
    const StabilityReport b = stability_report(model, g, xi2, xi1);
    CHECK(a.dxi_sup == doctest::Approx(b.dxi_sup));
    CHECK(a.dy_sup == doctest::Approx(b.dy_sup));
    CHECK(a.du_linf == doctest::Approx(b.du_linf));
    CHECK(a.dz_bmo2 == doctest::Approx(b.dz_bmo2));
    CHECK(a.du_bmo2 == doctest::Approx(b.du_bmo2));
    CHECK(a.ratio > 0.0);
    CHECK(std::isfinite(a.bmo_ratio));
}

TEST_CASE("a-priori envelope for the driver-free martingale") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    const Generator g = zero_generator(1, m1);
    Rng rng(51);
    const std::vector<double> xi = random_leaves(model, rng, 0.8);
    const SolutionTriple s = solve_exact(model, g, xi);
    const PriorBoundReport rep = prior_bound_check(model, g, s, xi);
    CHECK(rep.m_const == 0.0);
    CHECK(rep.envelope_pass);
    CHECK(rep.worst_envelope_slack >= 0.0);
    CHECK(rep.u_jump_bound_pass);
    CHECK(rep.pass);
}

TEST_CASE("a-priori envelope: the literal gamma prefactor can undercut, the guarded one cannot") {
    const MarkSpace none;
    const LatticeModel model = LatticeModel::build({1.0, 2}, none, 1);
    Generator g = make_entropic(1, none, 0.5);  // gamma < 1
    g.eval = [](std::size_t, std::uint64_t, double, std::span<const double>,
                std::span<const double>) { return 0.0; };
    const std::vector<double> xi(model.level_size(2), 1.0);
    const SolutionTriple s = solve_exact(model, g, xi);
    const PriorBoundReport rep = prior_bound_check(model, g, s, xi);
    CHECK(rep.envelope_pass);
    // gamma |xi| = 0.5 < |Y| = 1: the literal variant undercuts and is only logged.
    CHECK(rep.worst_envelope_slack_literal < 0.0);
    CHECK(rep.pass);
}

TEST_CASE("a-priori envelope: beta -> 0 limit agrees with small beta") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    Rng rng(53);
    const std::vector<double> xi = random_leaves(model, rng, 0.4);
    Generator g0 = make_entropic(1, m1, 1.0);
    g0.params.alpha_bound = 0.3;
    Generator g_eps = g0;
    g0.params.beta = 0.0;
    g_eps.params.beta = 1e-9;
    const SolutionTriple s = solve_exact(model, g0, xi);
    const PriorBoundReport a = prior_bound_check(model, g0, s, xi);
    const PriorBoundReport b = prior_bound_check(model, g_eps, s, xi);
    CHECK(a.worst_envelope_slack == doctest::Approx(b.worst_envelope_slack).epsilon(1e-7));
}

TEST_CASE("a-priori report on a solved entropic instance") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 6}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(55);
    const std::vector<double> xi = random_leaves(model, rng, 0.5);
    const SolutionTriple s = solve_exact(model, g, xi);
    const PriorBoundReport rep = prior_bound_check(model, g, s, xi);
    CHECK(rep.envelope_pass);
    CHECK(rep.u_jump_bound_pass);
    CHECK(std::isfinite(rep.bmo_constant));
    CHECK(rep.pass);
}

TEST_CASE("norm report ball is consistent with its components") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 4}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(57);
    const SolutionTriple s = solve_exact(model, g, random_leaves(model, rng, 0.4));
    const NormReport rep = compute_norms(model, s);
    const double expected =
        rep.s_inf * rep.s_inf + rep.h2_bmo + rep.j2_bmo + rep.linf_nu * rep.linf_nu;
    CHECK(std::abs(rep.ball - expected) < 1e-14 * std::max(1.0, expected));
}

TEST_CASE("stability deltas grow with the terminal gap") {
    const MarkSpace m1 = one_mark(1.0, 0.4);
    const LatticeModel model = LatticeModel::build({1.0, 3}, m1, 1);
    const Generator g = make_entropic(1, m1, 1.0);
    Rng rng(59);
    const std::vector<double> xi = random_leaves(model, rng, 0.3);
    std::vector<double> near = xi, far = xi;
    for (std::size_t i = 0; i < xi.size(); ++i) {
        const double bump = rng.uniform01() * 0.05;
        near[i] += bump;
        far[i] += 3.0 * bump;
    }
    const StabilityReport a = stability_report(model, g, xi, near);
    const StabilityReport b = stability_report(model, g, xi, far);
    CHECK(a.dxi_sup < b.dxi_sup);
    CHECK(a.dy_sup < b.dy_sup);
    CHECK(a.dz_bmo2 <= b.dz_bmo2 + 1e-18);
}
