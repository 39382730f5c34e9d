#include "qbsdej/markov.hpp"

#include <array>
#include <cmath>
#include <string>

namespace qbsdej {

namespace {

constexpr std::size_t kMaxDims = 32;

// Same scalar step as the tree solver: root of y = m + h g(y, z, u).
double implicit_state_step(const Generator& g, std::size_t k, double m, double h,
                           std::span<const double> z, std::span<const double> u,
                           double lipschitz_y) {
    double y = m;
    const double slope_floor = lipschitz_y * h < 1.0 ? 1.0 - lipschitz_y * h : 0.5;
    for (int it = 0; it < 100; ++it) {
        const double f = y - m - h * g(k, 0, y, z, u);
        if (std::abs(f) <= 5e-15 * std::max(1.0, std::abs(y))) return y;
        double fp = 1.0;
        if (lipschitz_y > 0.0) {
            const double eps = 1e-7 * std::max(1.0, std::abs(y));
            const double gy = (g(k, 0, y + eps, z, u) - g(k, 0, y - eps, z, u)) / (2.0 * eps);
            fp = 1.0 - h * gy;
            if (!(fp >= slope_floor)) fp = slope_floor;
        }
        y -= f / fp;
        if (!std::isfinite(y)) throw SolveError("state solve diverged at level " + std::to_string(k));
    }
    throw SolveError("state solve did not converge at level " + std::to_string(k));
}

// Binomial pmf over 0..n via the multiplicative recurrence.
std::vector<double> binomial_pmf(std::size_t n, double q) {
    std::vector<double> pmf(n + 1);
    pmf[0] = std::pow(1.0 - q, static_cast<double>(n));
    for (std::size_t c = 0; c + 1 <= n; ++c) {
        pmf[c + 1] = pmf[c] * static_cast<double>(n - c) / static_cast<double>(c + 1) * q /
                     (1.0 - q);
    }
    return pmf;
}

}  // namespace

StateModel StateModel::build(TimeGrid grid, MarkSpace marks, std::size_t brownian_dims) {
    StateModel m;
    m.scheme = BranchScheme::build(grid, marks, brownian_dims);
    m.grid = grid;
    m.marks = std::move(marks);
    m.brownian_dims = brownian_dims;
    return m;
}

std::uint64_t StateModel::level_size(std::size_t k) const {
    std::uint64_t size = 1;
    for (std::size_t i = 0; i < dims(); ++i) size *= static_cast<std::uint64_t>(k + 1);
    return size;
}

std::uint64_t state_index(const StateModel& model, std::size_t k, std::span<const int> ups,
                          std::span<const int> jumps) {
    const std::uint64_t radix = k + 1;
    std::uint64_t idx = 0;
    for (std::size_t j = model.scheme.mark_count; j-- > 0;) {
        idx = idx * radix + static_cast<std::uint64_t>(jumps[j]);
    }
    for (std::size_t i = model.scheme.brownian_dims; i-- > 0;) {
        idx = idx * radix + static_cast<std::uint64_t>(ups[i]);
    }
    return idx;
}

MarkovSolution solve_markov(const StateModel& model, const Generator& g,
                            const StateTerminalFn& terminal, Scheme scheme) {
    const BranchScheme& s = model.scheme;
    const std::size_t d = s.brownian_dims;
    const std::size_t m = s.mark_count;
    const std::size_t n_steps = model.grid.steps;
    const double h = s.h;
    if (g.z_dim != d || g.u_dim != m) {
        throw ModelError("state solve: generator dimensions do not match the model");
    }
    if (scheme == Scheme::Implicit && !(h * g.params.lipschitz_y < 1.0)) {
        throw PreconditionError("state solve: implicit scheme requires h * lipschitz_y < 1");
    }

    MarkovSolution sol;
    sol.y.resize(n_steps + 1);
    sol.z.resize(n_steps);
    sol.u.resize(n_steps);

    std::array<int, kMaxDims> comp{};
    std::array<double, kMaxDims> sums{};
    std::array<int, kMaxDims> counts{};

    auto decode = [&](std::size_t k, std::uint64_t idx) {
        const std::uint64_t radix = k + 1;
        for (std::size_t i = 0; i < d + m; ++i) {
            comp[i] = static_cast<int>(idx % radix);
            idx /= radix;
        }
    };

    // Terminal values per state.
    sol.y[n_steps].resize(model.level_size(n_steps));
    for (std::uint64_t idx = 0; idx < sol.y[n_steps].size(); ++idx) {
        decode(n_steps, idx);
        for (std::size_t i = 0; i < d; ++i) {
            sums[i] = (2.0 * comp[i] - static_cast<double>(n_steps)) * s.sqrt_h;
        }
        for (std::size_t j = 0; j < m; ++j) counts[j] = comp[d + j];
        sol.y[n_steps][idx] = terminal(std::span<const double>(sums.data(), d),
                                       std::span<const int>(counts.data(), m));
    }

    const std::uint32_t branching = s.branching();
    std::array<double, kMaxDims> zbuf{}, ubuf{};
    std::vector<double> child_vals(branching);
    for (std::size_t k = n_steps; k-- > 0;) {
        const std::uint64_t n_states = model.level_size(k);
        sol.y[k].assign(n_states, 0.0);
        sol.z[k].assign(n_states * d, 0.0);
        sol.u[k].assign(n_states * m, 0.0);
        const std::uint64_t child_radix = k + 2;
        for (std::uint64_t idx = 0; idx < n_states; ++idx) {
            decode(k, idx);
            double mean = 0.0;
            for (std::uint32_t a = 0; a < branching; ++a) {
                // Child state at level k+1 in radix k+2.
                std::uint64_t cidx = 0;
                for (std::size_t i = d + m; i-- > 0;) {
                    int c = comp[i];
                    if (i < d) {
                        c += s.up_flag(a, i) ? 1 : 0;
                    } else {
                        c += s.jump_flag(a, i - d) ? 1 : 0;
                    }
                    cidx = cidx * child_radix + static_cast<std::uint64_t>(c);
                }
                child_vals[a] = sol.y[k + 1][cidx];
                mean += s.prob[a] * child_vals[a];
            }
            for (std::size_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (std::uint32_t a = 0; a < branching; ++a) {
                    acc += s.prob[a] * (child_vals[a] - mean) * s.brownian_increment(a, i);
                }
                zbuf[i] = acc / h;
                sol.z[k][idx * d + i] = zbuf[i];
            }
            for (std::size_t j = 0; j < m; ++j) {
                double acc = 0.0;
                for (std::uint32_t a = 0; a < branching; ++a) {
                    acc += s.prob[a] * (child_vals[a] - mean) * s.compensated_jump(a, j);
                }
                ubuf[j] = acc / s.jump_var[j];
                sol.u[k][idx * m + j] = ubuf[j];
            }
            const std::span<const double> zs(zbuf.data(), d);
            const std::span<const double> us(ubuf.data(), m);
            sol.y[k][idx] = scheme == Scheme::Implicit
                                ? implicit_state_step(g, k, mean, h, zs, us, g.params.lipschitz_y)
                                : mean + h * g(k, 0, mean, zs, us);
        }
    }
    return sol;
}

double entropic_clipped_gaussian_reference(double variance, double scale, double lo, double hi,
                                           double gamma) {
    if (!(variance > 0.0) || scale == 0.0) {
        throw PreconditionError("clipped gaussian reference: need positive variance and scale");
    }
    if (!(lo < hi)) {
        throw PreconditionError("clipped gaussian reference: need lo < hi");
    }
    const double var = scale * scale * variance;
    const double sd = std::sqrt(var);
    const auto normal_cdf = [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); };
    double acc = 0.0;
    if (std::isfinite(lo)) acc += std::exp(gamma * lo) * normal_cdf(lo / sd);
    if (std::isfinite(hi)) acc += std::exp(gamma * hi) * (1.0 - normal_cdf(hi / sd));
    const double upper = std::isfinite(hi) ? normal_cdf((hi - gamma * var) / sd) : 1.0;
    const double lower = std::isfinite(lo) ? normal_cdf((lo - gamma * var) / sd) : 0.0;
    acc += std::exp(0.5 * gamma * gamma * var) * (upper - lower);
    return std::log(acc) / gamma;
}

double entropic_reference(const StateModel& model, double gamma, const StateTerminalFn& terminal) {
    const BranchScheme& s = model.scheme;
    const std::size_t d = s.brownian_dims;
    const std::size_t m = s.mark_count;
    const std::size_t n = model.grid.steps;

    std::vector<std::vector<double>> pmf(d + m);
    for (std::size_t i = 0; i < d; ++i) pmf[i] = binomial_pmf(n, 0.5);
    for (std::size_t j = 0; j < m; ++j) pmf[d + j] = binomial_pmf(n, s.jump_prob[j]);

    std::array<int, kMaxDims> comp{};
    std::array<double, kMaxDims> sums{};
    std::array<int, kMaxDims> counts{};
    double acc = 0.0;
    const std::uint64_t n_states = model.level_size(n);
    for (std::uint64_t idx = 0; idx < n_states; ++idx) {
        std::uint64_t rest = idx;
        double p = 1.0;
        for (std::size_t i = 0; i < d + m; ++i) {
            comp[i] = static_cast<int>(rest % (n + 1));
            rest /= (n + 1);
            p *= pmf[i][comp[i]];
        }
        for (std::size_t i = 0; i < d; ++i) {
            sums[i] = (2.0 * comp[i] - static_cast<double>(n)) * s.sqrt_h;
        }
        for (std::size_t j = 0; j < m; ++j) counts[j] = comp[d + j];
        const double xi = terminal(std::span<const double>(sums.data(), d),
                                   std::span<const int>(counts.data(), m));
        acc += p * std::exp(gamma * xi);
    }
    return std::log(acc) / gamma;
}

}  // namespace qbsdej
