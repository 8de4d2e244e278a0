#pragma once

// Exit moments G(eta) = E_eta exp(a tau) of the unstable Ornstein-Uhlenbeck
// process d eta = ((3/2)n + 1) eta dt + sigma dW leaving [-eta* + c, eta* + c],
// and the decay rate of the killed process.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tridiag.hpp"

namespace noisestab {

/// Growth rate (3/2)n + 1 of the rescaled angle near the explosive ray.
inline double ou_rate(int n) { return 1.5 * n + 1.0; }

struct OUSpec {
    double rate = 0.0;
    double sigma = 0.0;

    static OUSpec for_degree(int n, double sigma) {
        if (!(sigma > 0.0)) throw DomainError("OUSpec: sigma must be positive");
        return {ou_rate(n), sigma};
    }
};

/// Smallest power-of-two grid whose cells keep advection below diffusion
/// (cell Peclet number <= 1) on [-eta* - |c|, eta* + |c|] and whose spacing is
/// at most 0.002 sigma, which holds the grid-doubling change of G near 1e-7.
inline int recommended_grid_size(double eta_star, double sigma, int n, double c = 0.0) {
    const double half = eta_star + std::abs(c);
    const double need = std::max(2.0 * ou_rate(n) * half * half / (sigma * sigma),
                                 1000.0 * half / sigma);
    int size = 1024;
    while (size < need && size < (1 << 24)) size *= 2;
    return size;
}

namespace detail {

struct Quintic {
    double v, d1, d2;
};

/// Quintic Hermite interpolation on one cell of width h from value, first and
/// second derivative at both ends; t in [0, 1].
inline Quintic quintic_hermite(double t, double h, Quintic left, Quintic right) {
    const double t2 = t * t, t3 = t2 * t, t4 = t3 * t, t5 = t4 * t;
    const double h0 = 1 - 10 * t3 + 15 * t4 - 6 * t5;
    const double h1 = t - 6 * t3 + 8 * t4 - 3 * t5;
    const double h2 = 0.5 * (t2 - 3 * t3 + 3 * t4 - t5);
    const double h3 = 10 * t3 - 15 * t4 + 6 * t5;
    const double h4 = -4 * t3 + 7 * t4 - 3 * t5;
    const double h5 = 0.5 * (t3 - 2 * t4 + t5);

    const double d0 = -30 * t2 + 60 * t3 - 30 * t4;
    const double d1 = 1 - 18 * t2 + 32 * t3 - 15 * t4;
    const double d2 = 0.5 * (2 * t - 9 * t2 + 12 * t3 - 5 * t4);
    const double d3 = -d0;
    const double d4 = -12 * t2 + 28 * t3 - 15 * t4;
    const double d5 = 0.5 * (3 * t2 - 8 * t3 + 5 * t4);

    const double s0 = -60 * t + 180 * t2 - 120 * t3;
    const double s1 = -36 * t + 96 * t2 - 60 * t3;
    const double s2 = 0.5 * (2 - 18 * t + 36 * t2 - 20 * t3);
    const double s3 = -s0;
    const double s4 = -24 * t + 84 * t2 - 60 * t3;
    const double s5 = 0.5 * (6 * t - 24 * t2 + 20 * t3);

    const double a0 = left.v, a1 = h * left.d1, a2 = h * h * left.d2;
    const double b0 = right.v, b1 = h * right.d1, b2 = h * h * right.d2;
    return {a0 * h0 + a1 * h1 + a2 * h2 + b0 * h3 + b1 * h4 + b2 * h5,
            (a0 * d0 + a1 * d1 + a2 * d2 + b0 * d3 + b1 * d4 + b2 * d5) / h,
            (a0 * s0 + a1 * s1 + a2 * s2 + b0 * s3 + b1 * s4 + b2 * s5) / (h * h)};
}

} // namespace detail

/// G_{a,c} and G' on a uniform grid over [-eta* + c, eta* + c].
struct ExitMomentTable {
    double a = 0.0;
    double c = 0.0;
    double eta_star = 0.0;
    double sigma = 0.0;
    int n = 1;
    int grid_size = 0;  ///< number of cells; values has grid_size + 1 entries
    std::vector<double> values;
    std::vector<double> derivs;

    double lo() const { return -eta_star + c; }
    double hi() const { return eta_star + c; }
    double step() const { return 2.0 * eta_star / grid_size; }
    double eta(std::size_t i) const {
        return i + 1 == values.size() ? hi() : lo() + static_cast<double>(i) * step();
    }

    /// G'' read off the ODE (sigma^2/2) G'' + k eta G' + a G = 0.
    double second_derivative(double eta_value, double g, double dg) const {
        return -2.0 / (sigma * sigma) * (ou_rate(n) * eta_value * dg + a * g);
    }

    struct Sample {
        double g = 0.0;
        double dg = 0.0;
        double ddg = 0.0;
    };

    /// Quintic Hermite interpolation of G, G' and G''.
    Sample evaluate(double eta_value) const {
        const double span_tol = 1e-12 * eta_star;
        if (eta_value < lo() - span_tol || eta_value > hi() + span_tol)
            throw TableError("ExitMomentTable: eta outside the tabulated interval");
        eta_value = std::clamp(eta_value, lo(), hi());
        const double h = step();
        auto cell = static_cast<std::size_t>((eta_value - lo()) / h);
        cell = std::min<std::size_t>(cell, static_cast<std::size_t>(grid_size - 1));
        const double x0 = eta(cell);
        const double t = std::clamp((eta_value - x0) / h, 0.0, 1.0);
        auto node = [&](std::size_t i) {
            const double x = eta(i);
            return detail::Quintic{values[i], derivs[i], second_derivative(x, values[i], derivs[i])};
        };
        const auto q = detail::quintic_hermite(t, h, node(cell), node(cell + 1));
        return {q.v, q.d1, q.d2};
    }

    void write_csv(std::ostream& os) const {
        os.precision(17);
        os << "# a=" << a << ",c=" << c << ",eta_star=" << eta_star << ",sigma=" << sigma
           << ",n=" << n << ",grid_size=" << grid_size << "\n";
        os << "eta,G,Gprime\n";
        for (std::size_t i = 0; i < values.size(); ++i)
            os << eta(i) << "," << values[i] << "," << derivs[i] << "\n";
    }
};

namespace detail {

inline void check_exit_moment_args(double a, double c, double eta_star, double sigma, int n) {
    if (n < 1) throw DomainError("exit moments: n must be >= 1");
    if (!(sigma > 0.0)) throw DomainError("exit moments: sigma must be positive");
    if (!(a > 0.0 && a < ou_rate(n)))
        throw DomainError("exit moments: a must lie in (0, (3/2)n + 1)");
    if (!(eta_star > std::abs(c))) throw DomainError("exit moments: need eta_star > |c|");
}

/// G' at a boundary node from the neighbouring value, using G'' and G''' from
/// the ODE so that the one-sided difference stays third order.  h is the
/// signed offset to the neighbour.
inline double boundary_slope(double eta_b, double h, double g_neighbour, double a, double sigma,
                             int n) {
    const double k = ou_rate(n);
    const double s2 = sigma * sigma;
    // G'' = alpha G' + beta and G''' = gamma G' + eps at a node where G = 1.
    const double alpha = -2.0 * k * eta_b / s2;
    const double beta = -2.0 * a / s2;
    const double gamma = -2.0 / s2 * (k + a + k * eta_b * alpha);
    const double eps = -2.0 / s2 * (k * eta_b * beta);
    const double coeff = h + 0.5 * h * h * alpha + h * h * h * gamma / 6.0;
    return (g_neighbour - 1.0 - 0.5 * h * h * beta - h * h * h * eps / 6.0) / coeff;
}

} // namespace detail

/// Second-order centred finite-difference solve of
/// (sigma^2/2) G'' + ((3/2)n + 1) eta G' + a G = 0, G = 1 at both ends.
inline ExitMomentTable solve_bvp(double a, double c, double eta_star, double sigma, int n,
                                 int grid_size) {
    detail::check_exit_moment_args(a, c, eta_star, sigma, n);
    if (grid_size < 64) throw DomainError("solve_bvp: grid_size must be >= 64");

    ExitMomentTable t;
    t.a = a;
    t.c = c;
    t.eta_star = eta_star;
    t.sigma = sigma;
    t.n = n;
    t.grid_size = grid_size;

    const std::size_t interior = static_cast<std::size_t>(grid_size) - 1;
    const double h = t.step();
    const double k = ou_rate(n);
    const double diff = 0.5 * sigma * sigma / (h * h);

    Tridiagonal m(interior);
    std::vector<double> rhs(interior, 0.0);
    for (std::size_t row = 0; row < interior; ++row) {
        const double x = t.eta(row + 1);
        const double adv = k * x / (2.0 * h);
        m.lower[row] = diff - adv;
        m.diag[row] = -2.0 * diff + a;
        m.upper[row] = diff + adv;
    }
    rhs.front() -= m.lower.front();
    rhs.back() -= m.upper.back();
    m.lower.front() = 0.0;
    m.upper.back() = 0.0;

    std::vector<double> inner;
    try {
        inner = solve_tridiagonal(m, rhs);
    } catch (const SolveError& e) {
        throw SolveError(std::string("solve_bvp: ") + e.what());
    }

    t.values.assign(interior + 2, 1.0);
    std::copy(inner.begin(), inner.end(), t.values.begin() + 1);
    for (double v : t.values)
        if (!std::isfinite(v)) throw SolveError("solve_bvp: non-finite solution");

    t.derivs.assign(t.values.size(), 0.0);
    // Central difference minus its leading error (h^2/6) G''', with G'' and
    // G''' taken from the ODE, so the interpolant's second derivative stays
    // second order between nodes.
    const double s2 = sigma * sigma;
    for (std::size_t i = 1; i + 1 < t.values.size(); ++i) {
        const double x = t.eta(i);
        const double d0 = (t.values[i + 1] - t.values[i - 1]) / (2.0 * h);
        const double g2 = -2.0 / s2 * (k * x * d0 + a * t.values[i]);
        const double g3 = -2.0 / s2 * ((k + a) * d0 + k * x * g2);
        t.derivs[i] = d0 - h * h / 6.0 * g3;
    }
    t.derivs.front() = detail::boundary_slope(t.lo(), h, t.values[1], a, sigma, n);
    t.derivs.back() = detail::boundary_slope(t.hi(), -h, t.values[interior], a, sigma, n);
    return t;
}

/// Relative sup-norm change of G when the grid is doubled.
inline double richardson_change(double a, double c, double eta_star, double sigma, int n,
                                int grid_size) {
    const auto coarse = solve_bvp(a, c, eta_star, sigma, n, grid_size);
    const auto fine = solve_bvp(a, c, eta_star, sigma, n, 2 * grid_size);
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < coarse.values.size(); ++i) {
        diff = std::max(diff, std::abs(coarse.values[i] - fine.values[2 * i]));
        scale = std::max(scale, std::abs(fine.values[2 * i]));
    }
    return diff / scale;
}

/// Residual of the Weber form H'' - (v^2/4 + 1/2 - 2a/(sigma^2 beta)) H = 0,
/// H(v) = exp(v^2/4) G(v / sqrt(beta)), beta = (3n+2)/sigma^2, evaluated with a
/// fourth-order stencil on |eta - c| <= eta*/2 and reported in units of G
/// (multiplied back by exp(-v^2/4)).
inline double weber_beta(int n, double sigma) { return (3.0 * n + 2.0) / (sigma * sigma); }

inline double weber_residual(const ExitMomentTable& table) {
    const double beta = weber_beta(table.n, table.sigma);
    const double sb = std::sqrt(beta);
    const double hv = sb * table.step();
    const double shift = 0.5 - 2.0 * table.a / (table.sigma * table.sigma * beta);
    double worst = 0.0;
    const std::size_t m = table.values.size();
    for (std::size_t i = 2; i + 2 < m; ++i) {
        const double x = table.eta(i);
        if (std::abs(x - table.c) > 0.5 * table.eta_star) continue;
        const double v = sb * x;
        // exp(-v_i^2/4) H_j = G_j exp((v_j^2 - v_i^2)/4)
        auto scaled_h = [&](std::size_t j) {
            const double vj = sb * table.eta(j);
            return table.values[j] * std::exp(0.25 * (vj * vj - v * v));
        };
        const double d2 = (-scaled_h(i + 2) + 16.0 * scaled_h(i + 1) - 30.0 * table.values[i] +
                           16.0 * scaled_h(i - 1) - scaled_h(i - 2)) /
                          (12.0 * hv * hv);
        const double res = d2 - (0.25 * v * v + shift) * table.values[i];
        worst = std::max(worst, std::abs(res));
    }
    return worst;
}

struct MonteCarloEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
    std::size_t exited = 0;
    std::size_t censored = 0;
};

namespace detail {

/// Inverse Gaussian draw (Michael, Schucany and Haas).
template <class Gen>
double inverse_gaussian(double mean, double shape, Gen& gen) {
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> uniform;
    const double nu = normal(gen);
    const double y = nu * nu;
    const double x = mean + mean * mean * y / (2.0 * shape) -
                     mean / (2.0 * shape) * std::sqrt(4.0 * mean * shape * y + mean * mean * y * y);
    return uniform(gen) <= mean / (mean + x) ? x : mean * mean / x;
}

/// Time at which a Brownian bridge of volatility sigma over [0, h] first
/// reaches a level, given that it does; d0 is the start distance to the
/// level and d1 the distance of the end point to the level (on either side).
/// Time inversion turns the bridge into a Brownian motion with drift d1/h
/// hitting d0, whose hitting time U is inverse Gaussian; t = U h / (h + U).
template <class Gen>
double bridge_hit_time(double d0, double d1, double sigma, double h, Gen& gen) {
    if (d0 <= 0.0) return 0.0;
    const double shape = d0 * d0 / (sigma * sigma);
    double u;
    if (d1 > 0.0) {
        u = inverse_gaussian(d0 * h / d1, shape, gen);
    } else {
        std::normal_distribution<double> normal;
        const double z = normal(gen);
        u = shape / (z * z);
    }
    return u * h / (h + u);
}

} // namespace detail

/// Monte-Carlo estimate of E_eta0 exp(a tau_c) using the exact Gaussian
/// transition of the OU process.  A crossing between two inside points is
/// drawn with the Brownian-bridge probability exp(-2 d0 d1 / (sigma^2 dt));
/// every crossing time inside a step is drawn from the bridge hitting law.  Path i draws from substream (seed, i), and results
/// are reduced in path order, so the output does not depend on `workers`.
inline MonteCarloEstimate mc_exit_moment(double a, double c, double eta0, const OUSpec& ou,
                                         double eta_star, std::size_t n_paths, double dt,
                                         std::uint64_t seed, unsigned workers = 1,
                                         std::size_t max_steps = 1'000'000) {
    if (!(ou.sigma > 0.0) || !(ou.rate > 0.0)) throw DomainError("mc_exit_moment: bad OUSpec");
    if (!(a > 0.0 && a < ou.rate)) throw DomainError("mc_exit_moment: a must lie in (0, rate)");
    if (!(eta_star > std::abs(c))) throw DomainError("mc_exit_moment: need eta_star > |c|");
    if (!(dt > 0.0)) throw DomainError("mc_exit_moment: dt must be positive");
    const double lo = -eta_star + c, hi = eta_star + c;
    if (eta0 < lo || eta0 > hi) throw DomainError("mc_exit_moment: eta0 outside the interval");

    const double growth = std::exp(ou.rate * dt);
    const double spread = ou.sigma * std::sqrt((growth * growth - 1.0) / (2.0 * ou.rate));
    const double bridge = 0.5 * ou.sigma * ou.sigma * dt;

    // NaN marks a path that did not exit within max_steps.
    std::vector<double> sample(n_paths, 0.0);
    auto run = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < n_paths; i += stride) {
            if (eta0 <= lo || eta0 >= hi) {
                sample[i] = 1.0;
                continue;
            }
            auto gen = substream(seed, i);
            std::normal_distribution<double> normal;
            std::uniform_real_distribution<double> uniform;
            double x = eta0;
            double t = 0.0;
            double out = std::numeric_limits<double>::quiet_NaN();
            for (std::size_t s = 0; s < max_steps; ++s) {
                const double next = growth * x + spread * normal(gen);
                if (next <= lo || next >= hi) {
                    const double bound = next >= hi ? hi : lo;
                    out = std::exp(a * (t + detail::bridge_hit_time(std::abs(bound - x), std::abs(bound - next),
                                                                    ou.sigma, dt, gen)));
                    break;
                }
                // Crossing between two inside points, with the noise frozen
                // over the step.
                const double p_hi = std::exp(-(hi - x) * (hi - next) / bridge);
                const double p_lo = std::exp(-(x - lo) * (next - lo) / bridge);
                const double u = uniform(gen);
                if (u < p_hi + p_lo - p_hi * p_lo) {
                    const double bound = u < p_hi ? hi : lo;
                    out = std::exp(a * (t + detail::bridge_hit_time(std::abs(bound - x), std::abs(bound - next),
                                                                    ou.sigma, dt, gen)));
                    break;
                }
                x = next;
                t += dt;
            }
            sample[i] = out;
        }
    };
    workers = std::max(1u, workers);
    if (workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    }

    MonteCarloEstimate est;
    double sum = 0.0, sum_sq = 0.0;
    for (double v : sample) {
        if (std::isnan(v)) {
            ++est.censored;
            continue;
        }
        ++est.exited;
        sum += v;
        sum_sq += v * v;
    }
    if (est.exited < 100 && est.exited < n_paths)
        throw BudgetError("mc_exit_moment: fewer than 100 paths exited within the step cap");
    const double m = est.exited;
    est.estimate = sum / m;
    const double var = m > 1 ? std::max(0.0, (sum_sq - m * est.estimate * est.estimate) / (m - 1)) : 0.0;
    est.std_error = std::sqrt(var / m);
    return est;
}

/// Smallest eigenvalue of (Q f) = -(sigma^2/2) f'' + ((3n+2)/2)(eta f)' on
/// [-eta*, eta*] with f = 0 at both ends, by inverse power iteration.
inline double smallest_eigenvalue(double eta_star, double sigma, int n, int grid_size,
                                  int max_iter = 5000, double tol = 1e-12) {
    if (grid_size < 128) throw DomainError("smallest_eigenvalue: grid_size must be >= 128");
    if (!(eta_star > 0.0) || !(sigma > 0.0)) throw DomainError("smallest_eigenvalue: bad arguments");
    const std::size_t interior = static_cast<std::size_t>(grid_size) - 1;
    const double h = 2.0 * eta_star / grid_size;
    const double k = ou_rate(n);
    const double diff = 0.5 * sigma * sigma / (h * h);

    Tridiagonal q(interior);
    for (std::size_t row = 0; row < interior; ++row) {
        const double x = -eta_star + (row + 1) * h;
        q.diag[row] = 2.0 * diff;
        q.lower[row] = -diff - k * (x - h) / (2.0 * h);
        q.upper[row] = -diff + k * (x + h) / (2.0 * h);
    }
    q.lower.front() = 0.0;
    q.upper.back() = 0.0;
    const TridiagonalLU lu(q);

    std::vector<double> x(interior, 1.0);
    double lambda = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        auto y = lu.solve(x);
        double xy = 0.0, xx = 0.0, yy = 0.0;
        for (std::size_t i = 0; i < interior; ++i) {
            xy += x[i] * y[i];
            xx += x[i] * x[i];
            yy += y[i] * y[i];
        }
        const double next = xx / xy;
        const double norm = std::sqrt(yy);
        for (std::size_t i = 0; i < interior; ++i) x[i] = y[i] / norm;
        if (it > 0 && std::abs(next - lambda) <= tol * std::abs(next)) return next;
        lambda = next;
    }
    throw ConvergenceError("smallest_eigenvalue: inverse iteration did not converge");
}

} // namespace noisestab
