#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "noisestab/exitmoments.hpp"

using namespace noisestab;

namespace {

double sup_table(const ExitMomentTable& t) {
    double s = 0.0;
    for (double v : t.values) s = std::max(s, v);
    return s;
}

double boundary_rel_error(double a, double eta_star, int n) {
    const auto t = solve_bvp(a, 0.0, eta_star, 1.0, n, recommended_grid_size(eta_star, 1.0, n));
    const double pred = 2.0 * a / (3 * n + 2) / eta_star;
    return std::max(std::abs(t.derivs.back() / -pred - 1.0), std::abs(t.derivs.front() / pred - 1.0));
}

} // namespace

TEST(SolveBvp, ArgumentChecks) {
    EXPECT_THROW(solve_bvp(0.0, 0, 5, 1, 1, 256), DomainError);
    EXPECT_THROW(solve_bvp(2.5, 0, 5, 1, 1, 256), DomainError);
    EXPECT_THROW(solve_bvp(1.0, 0, 5, 0, 1, 256), DomainError);
    EXPECT_THROW(solve_bvp(1.0, 6, 5, 1, 1, 256), DomainError);
    EXPECT_THROW(solve_bvp(1.0, 0, 5, 1, 0, 256), DomainError);
    EXPECT_THROW(solve_bvp(1.0, 0, 5, 1, 1, 32), DomainError);
}

TEST(SolveBvp, VanishingExponentGivesOne) {
    const auto t = solve_bvp(1e-12, 0.0, 10.0, 1.0, 1, 4096);
    for (double v : t.values) EXPECT_NEAR(v, 1.0, 1e-8);
}

TEST(SolveBvp, SymmetricForZeroOffset) {
    const auto t = solve_bvp(1.2, 0.0, 10.0, 1.0, 2, 4096);
    const std::size_t m = t.values.size();
    for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(t.values[i], t.values[m - 1 - i], 1e-10);
}

TEST(SolveBvp, UnitBoundaryAndLowerBound) {
    for (double c : {0.0, 1.5}) {
        const auto t = solve_bvp(0.8, c, 6.0, 0.7, 1, 4096);
        EXPECT_EQ(t.values.front(), 1.0);
        EXPECT_EQ(t.values.back(), 1.0);
        for (double v : t.values) EXPECT_GE(v, 1.0);
        EXPECT_DOUBLE_EQ(t.eta(0), -6.0 + c);
        EXPECT_DOUBLE_EQ(t.eta(t.values.size() - 1), 6.0 + c);
    }
}

TEST(SolveBvp, BoundaryDerivativeAsymptotics) {
    for (int n : {1, 2}) {
        EXPECT_LT(boundary_rel_error(1.0, 50.0, n), 0.10);
        EXPECT_LT(boundary_rel_error(1.0, 200.0, n), 0.03);
        double prev = std::numeric_limits<double>::infinity();
        for (double es : {25.0, 50.0, 100.0, 200.0}) {
            const double scaled = es * boundary_rel_error(1.0, es, n) * 2.0 / (3 * n + 2);
            EXPECT_LT(scaled, prev) << "eta*=" << es;
            prev = scaled;
        }
    }
}

TEST(SolveBvp, BlowsUpTowardTheCap) {
    const double cap = ou_rate(1);
    const auto lo = solve_bvp(0.9 * cap, 0.0, 10.0, 1.0, 1, 8192);
    const auto hi = solve_bvp(0.99 * cap, 0.0, 10.0, 1.0, 1, 8192);
    EXPECT_GT(sup_table(hi), sup_table(lo));
}

TEST(SolveBvp, RecommendedGridIsConverged) {
    for (double es : {5.0, 25.0, 50.0}) {
        const int gs = recommended_grid_size(es, 1.0, 1);
        EXPECT_LT(richardson_change(1.0, 0.0, es, 1.0, 1, gs), 1e-6) << es;
    }
}

TEST(ExitMomentTable, EvaluateAndCsv) {
    const auto t = solve_bvp(1.0, 0.0, 4.0, 1.0, 1, 1024);
    const auto mid = t.evaluate(0.0);
    EXPECT_GT(mid.g, 1.0);
    EXPECT_NEAR(mid.dg, 0.0, 1e-9);
    EXPECT_NEAR(t.evaluate(4.0).g, 1.0, 1e-14);
    EXPECT_THROW(t.evaluate(4.1), TableError);
    // Interpolant agrees with the ODE.
    for (double e : {-3.3, -0.7, 1.9}) {
        const auto s = t.evaluate(e);
        EXPECT_NEAR(0.5 * s.ddg + 2.5 * e * s.dg + 1.0 * s.g, 0.0, 1e-4 * s.g);
    }
    std::ostringstream os;
    t.write_csv(os);
    EXPECT_NE(os.str().find("eta,G,Gprime"), std::string::npos);
    EXPECT_EQ(os.str().front(), '#');
}

TEST(WeberResidual, SmallAndSecondOrder) {
    EXPECT_DOUBLE_EQ(weber_beta(1, 1.0), 5.0);
    const double r4096 = weber_residual(solve_bvp(1.0, 0.0, 10.0, 1.0, 1, 4096));
    const double r2048 = weber_residual(solve_bvp(1.0, 0.0, 10.0, 1.0, 1, 2048));
    EXPECT_LT(r4096, 1e-4);
    EXPECT_NEAR(r2048 / r4096, 4.0, 0.4);
}

TEST(MonteCarlo, StartOnBoundaryIsExactlyOne) {
    const auto ou = OUSpec::for_degree(1, 1.0);
    for (double e0 : {-3.0, 3.0}) {
        const auto m = mc_exit_moment(1.0, 0.0, e0, ou, 3.0, 500, 1e-2, 1);
        EXPECT_EQ(m.estimate, 1.0);
        EXPECT_EQ(m.std_error, 0.0);
    }
}

TEST(MonteCarlo, MonotoneInExponent) {
    const auto ou = OUSpec::for_degree(1, 1.0);
    const auto lo = mc_exit_moment(0.5, 0.0, 0.3, ou, 3.0, 5000, 1e-2, 17);
    const auto hi = mc_exit_moment(1.0, 0.0, 0.3, ou, 3.0, 5000, 1e-2, 17);
    EXPECT_LE(lo.estimate, hi.estimate);
}

TEST(MonteCarlo, IndependentOfWorkerCount) {
    const auto ou = OUSpec::for_degree(2, 0.5);
    const auto a = mc_exit_moment(1.0, 0.2, 0.1, ou, 2.0, 3000, 1e-2, 5, 1);
    const auto b = mc_exit_moment(1.0, 0.2, 0.1, ou, 2.0, 3000, 1e-2, 5, 4);
    EXPECT_EQ(a.estimate, b.estimate);
    EXPECT_EQ(a.std_error, b.std_error);
}

TEST(MonteCarlo, AgreesWithBvpAtInteriorPoints) {
    const double a = 0.5, es = 3.0;
    const auto ou = OUSpec::for_degree(1, 1.0);
    const auto t = solve_bvp(a, 0.0, es, 1.0, 1, recommended_grid_size(es, 1.0, 1));
    for (int k = 1; k <= 11; ++k) {
        const double e0 = -es + 2 * es * k / 12.0;
        const auto m = mc_exit_moment(a, 0.0, e0, ou, es, 100000, 1e-2, 1000 + k);
        const double g = t.evaluate(e0).g;
        EXPECT_LT(std::abs(m.estimate - g), 3.0 * m.std_error) << e0;
        EXPECT_LT(std::abs(m.estimate / g - 1.0), 0.01) << e0;
    }
}

TEST(MonteCarlo, ArgumentChecks) {
    const auto ou = OUSpec::for_degree(1, 1.0);
    EXPECT_THROW(mc_exit_moment(3.0, 0, 0, ou, 3, 10, 1e-2, 1), DomainError);
    EXPECT_THROW(mc_exit_moment(1.0, 0, 4, ou, 3, 10, 1e-2, 1), DomainError);
    EXPECT_THROW(mc_exit_moment(1.0, 0, 0, ou, 3, 10, 0.0, 1), DomainError);
    EXPECT_THROW(mc_exit_moment(1.0, 0, 0, ou, 3, 200, 1e-2, 1, 1, 2), BudgetError);
}

TEST(Eigenvalue, LimitAndMonotonicity) {
    for (int n : {1, 2}) {
        const double limit = 0.5 * (3 * n + 2);
        const double l50 = smallest_eigenvalue(50.0, 1.0, n, recommended_grid_size(50.0, 1.0, n));
        EXPECT_NEAR(l50, limit, 0.05 * limit);
        const double l10 = smallest_eigenvalue(10.0, 1.0, n, recommended_grid_size(10.0, 1.0, n));
        const double l100 = smallest_eigenvalue(100.0, 1.0, n, recommended_grid_size(100.0, 1.0, n));
        // Both sit at the limit to solver precision; the larger strip must not be farther.
        EXPECT_LE(std::abs(l100 - limit), std::abs(l10 - limit) + 1e-9);
        // On narrow strips the decrease toward the limit is resolved.
        double prev = std::numeric_limits<double>::infinity();
        for (double es : {0.25, 0.5, 1.0, 2.0}) {
            const double l = smallest_eigenvalue(es, 1.0, n, 4096);
            EXPECT_GT(l, limit);
            EXPECT_LT(l, prev);
            prev = l;
        }
    }
    EXPECT_THROW(smallest_eigenvalue(10.0, 1.0, 1, 64), DomainError);
}

TEST(Eigenvalue, NarrowStripMatchesDiffusionScale) {
    // For eta* much smaller than sigma / sqrt(k) the drift is negligible and
    // lambda1 approaches the Dirichlet value (sigma^2/2)(pi / (2 eta*))^2.
    const double es = 0.02;
    const double l = smallest_eigenvalue(es, 1.0, 1, 4096);
    const double dirichlet = 0.5 * std::pow(std::numbers::pi / (2 * es), 2);
    EXPECT_NEAR(l / dirichlet, 1.0, 1e-3);
}
