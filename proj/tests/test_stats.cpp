#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "noisestab/exitmoments.hpp"
#include "noisestab/experiments.hpp"
#include "noisestab/stats.hpp"

using namespace noisestab;

namespace {

std::vector<double> pareto(double alpha, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> out(count);
    for (auto& x : out) x = std::pow(1.0 - u(gen), -1.0 / alpha);
    return out;
}

std::vector<double> shuffled(std::vector<double> v, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::shuffle(v.begin(), v.end(), gen);
    return v;
}

} // namespace

TEST(SpikeGaps, SawtoothGivesExactGaps) {
    // Teeth peak at 10 every 5 time units; the signal drops to 0 in between.
    SpikeDetector det(1.0, 7.8);
    const int teeth = 30;
    for (int i = 0; i <= teeth * 50; ++i) {
        const double t = 0.1 * i;
        const double phase = std::fmod(t, 5.0);
        det.observe(t, phase < 2.5 ? 4.0 * phase : 4.0 * (5.0 - phase));
    }
    const auto& rec = det.require();
    EXPECT_EQ(rec.spikes, static_cast<std::size_t>(teeth));
    ASSERT_EQ(rec.gap_samples.size(), static_cast<std::size_t>(teeth - 1));
    for (double g : rec.gap_samples) EXPECT_NEAR(g, 5.0, 1e-9);
    EXPECT_NEAR(rec.mean_gap(), 5.0, 1e-9);
}

TEST(SpikeGaps, CrossingWithoutReturnIsNotCounted) {
    SpikeDetector det(1.0, 8.0);
    for (double r : {9.0, 3.0, 9.0, 0.5, 9.0}) det.observe(0.0, r);
    EXPECT_EQ(det.record().spikes, 2u);
}

TEST(SpikeGaps, Preconditions) {
    EXPECT_THROW(SpikeDetector(5.0, 8.0), DomainError);
    EXPECT_THROW(SpikeDetector(0.0, 8.0), DomainError);
    SpikeDetector det(1.0, 8.0);
    det.observe(0.0, 9.0);
    EXPECT_THROW(det.require(), InsufficientData);
    EXPECT_THROW(det.record().mean_gap(), InsufficientData);
}

TEST(SpikeGaps, CrossingCountIsClockInvariant) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 2000.0;
    c.record_stride = 4;
    const auto tr = integrate_timechanged(spec, {1.0, 0.0}, c, 12);
    SpikeDetector plain(1.0, 4.0, ClockKind::Plain), tc(1.0, 4.0, ClockKind::TimeChanged);
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
        plain.observe(tr.physical_time[i], modulus(tr.states[i]));
        tc.observe(tr.times[i], modulus(tr.states[i]));
    }
    EXPECT_GT(plain.record().spikes, 20u);
    EXPECT_EQ(plain.record().spikes, tc.record().spikes);
    const auto a = spike_gaps(tr, 1.0, 4.0, ClockKind::Plain);
    EXPECT_EQ(a.gap_samples, plain.record().gap_samples);
    const auto plain_tr = integrate(spec, {}, c, 1);
    EXPECT_THROW(spike_gaps(plain_tr, 1.0, 6.0, ClockKind::TimeChanged), DomainError);
}

TEST(FitLogLog, ExactPowerLaw) {
    std::vector<double> x, y;
    for (int i = 1; i <= 10; ++i) {
        x.push_back(i);
        y.push_back(i * i);
    }
    const auto f = fit_loglog(x, y);
    EXPECT_NEAR(f.slope, 2.0, 1e-12);
    EXPECT_NEAR(f.intercept, 0.0, 1e-12);
    EXPECT_NEAR(f.residual, 0.0, 1e-12);
    EXPECT_EQ(f.points, 10u);
    EXPECT_EQ(fit_loglog(x, y, 3.0, 6.0).points, 4u);
}

TEST(FitLogLog, NoisyPowerLaw) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> noise(0.0, 0.01);
    std::vector<double> x, y;
    for (double v : log_grid(1.0, 100.0, 30)) {
        x.push_back(v);
        y.push_back(3.0 * std::pow(v, 1.5) * (1.0 + noise(gen)));
    }
    const auto f = fit_loglog(x, y);
    EXPECT_NEAR(f.slope, 1.5, 0.05);
    EXPECT_LT(f.residual, 0.02);
    EXPECT_GT(f.slope_se, 0.0);
}

TEST(FitLogLog, Errors) {
    const std::vector<double> one{2.0}, two{1.0, 2.0};
    EXPECT_THROW(fit_loglog(one, one), DomainError);
    EXPECT_THROW(fit_loglog(two, two), DomainError);
    const std::vector<double> x{1, 2, 3}, bad{1, -2, 3};
    EXPECT_THROW(fit_loglog(x, bad), DomainError);
    EXPECT_THROW(fit_loglog(x, two), DomainError);
    const std::vector<double> same{2, 2, 2};
    EXPECT_THROW(fit_loglog(same, x), DomainError);
}

TEST(TailSurvival, ParetoSlope) {
    for (double alpha : {1.0, 2.0}) {
        const auto s = pareto(alpha, 1000000, 9);
        const auto tf = tail_survival(s, log_grid(1.0, 1000.0, 40), 0.25);
        EXPECT_NEAR(tf.fit.slope, -alpha, 0.05) << alpha;
        for (std::size_t i = 1; i < tf.survival.size(); ++i) EXPECT_LE(tf.survival[i], tf.survival[i - 1]);
        for (std::size_t i = 0; i < tf.levels.size(); ++i)
            if (tf.levels[i] >= tf.window_lo && tf.levels[i] <= tf.window_hi) {
                EXPECT_GE(tf.exceedances[i], 50u);
            }
        std::ostringstream os;
        tf.write_csv(os);
        EXPECT_EQ(os.str().rfind("R,survival,exceedances,in_window\n", 0), 0u);
    }
}

TEST(TailSurvival, InsufficientAndMismatched) {
    const auto s = pareto(2.0, 100, 1);
    EXPECT_THROW(tail_survival(s, log_grid(1.0, 1000.0, 40), 0.25), InsufficientData);
    SurvivalCounter a(log_grid(1, 10, 5)), b(log_grid(1, 10, 6));
    EXPECT_THROW(a.merge(b), DomainError);
    EXPECT_THROW(SurvivalCounter(std::vector<double>{2.0, 1.0}), DomainError);
    EXPECT_THROW(tail_fit(SurvivalCounter(log_grid(1, 10, 5)), 1.0), InsufficientData);
}

TEST(SurvivalCounter, WeightedCountsMatchRepeatedAdds) {
    SurvivalCounter a(log_grid(1, 100, 10)), b(log_grid(1, 100, 10));
    a.add(5.0, 3);
    a.add(0.5, 2);
    for (int i = 0; i < 3; ++i) b.add(5.0);
    for (int i = 0; i < 2; ++i) b.add(0.5);
    EXPECT_EQ(a.exceedances(), b.exceedances());
    EXPECT_EQ(a.total(), 5u);
    EXPECT_EQ(a.exceedances().front(), 3u);
}

TEST(EmpiricalMoment, BoundedInputConverges) {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    std::vector<double> s(1 << 20);
    for (auto& x : s) x = u(gen);
    for (double g : {0.5, 1.0, 2.5, 6.0}) {
        const auto m = empirical_moment(s, g);
        EXPECT_EQ(m.verdict, MomentVerdict::Converged) << g;
        EXPECT_EQ(m.counts.front(), 1000u);
        EXPECT_EQ(m.counts[1], 2000u);
    }
}

TEST(EmpiricalMoment, VerdictRules) {
    EXPECT_EQ(MomentAccumulator::classify_series({1, 1.5, 2.25, 3.4, 5.1}), MomentVerdict::Diverging);
    EXPECT_EQ(MomentAccumulator::classify_series({1, 1.5, 1.2, 3.4, 5.1}), MomentVerdict::Inconclusive);
    EXPECT_EQ(MomentAccumulator::classify_series({1, 1, 1.05, 1.1, 1.15}), MomentVerdict::Converged);
    EXPECT_EQ(MomentAccumulator::classify_series({1, 2, 4}), MomentVerdict::Inconclusive);
    EXPECT_THROW(MomentAccumulator(0.0), DomainError);
    EXPECT_STREQ(to_string(MomentVerdict::Diverging), "Diverging");
}

TEST(EmpiricalMoment, GrowingInputDivergesAndLightTailConverges) {
    // The running mean of x_i = i doubles with every doubling of the count.
    std::vector<double> s(1 << 16);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(i + 1);
    EXPECT_EQ(empirical_moment(s, 1.0).verdict, MomentVerdict::Diverging);
    EXPECT_EQ(empirical_moment(pareto(4.0, 1 << 22, 6), 1.0).verdict, MomentVerdict::Converged);
}

TEST(BatchMeans, MeanAndStandardError) {
    std::mt19937_64 gen(2);
    std::normal_distribution<double> z(3.0, 2.0);
    std::vector<double> x(200000);
    for (auto& v : x) v = z(gen);
    const auto bm = batch_means(x);
    EXPECT_NEAR(bm.mean, 3.0, 0.02);
    EXPECT_NEAR(bm.std_error, 2.0 / std::sqrt(200000.0), 0.5 * 2.0 / std::sqrt(200000.0));
    EXPECT_THROW(batch_means(std::vector<double>(5, 1.0)), InsufficientData);
}

TEST(ExitTailRate, ExponentialSamples) {
    std::mt19937_64 gen(8);
    std::exponential_distribution<double> e(2.0);
    std::vector<double> tau(100000);
    for (auto& t : tau) t = e(gen);
    const auto f = exit_tail_rate(tau);
    EXPECT_NEAR(f.rate, 2.0, 0.1);
    EXPECT_EQ(f.points, 20u);
    EXPECT_THROW(exit_tail_rate(std::vector<double>(10, 1.0)), InsufficientData);
}

TEST(ExitTailRate, MatchesTheEigenvalue) {
    const SystemSpec spec(1, 1.0);
    ExitConfig ec;
    ec.eta_star = 50.0;
    ec.r_region = strip_radius(1, 50.0, 0.1);
    ec.start_radius = ec.r_region;
    ec.n_exits = 2000;
    ec.seed = 31;
    std::vector<double> tau;
    for (const auto& e : run_exits(spec, IntegratorConfig{}, ec)) tau.push_back(e.tau);
    const double lambda = smallest_eigenvalue(50.0, 1.0, 1, recommended_grid_size(50.0, 1.0, 1));
    EXPECT_NEAR(exit_tail_rate(tau).rate / lambda, 1.0, 0.15);
}

TEST(KtauTail, ParetoAndExitHeights) {
    EXPECT_NEAR(ktau_tail(pareto(1.0, 50000, 3)).fit.slope, -1.0, 0.05);
    EXPECT_THROW(ktau_tail(pareto(1.0, 50, 3)), InsufficientData);
    for (int n : {1, 2}) {
        const SystemSpec spec(n, 1.0);
        ExitConfig ec;
        ec.eta_star = 50.0;
        ec.r_region = strip_radius(n, 50.0, 0.1);
        ec.start_radius = ec.r_region;
        ec.n_exits = 12000;
        ec.seed = 40 + n;
        std::vector<double> k;
        for (const auto& e : run_exits(spec, IntegratorConfig{}, ec)) {
            if (!e.through_eta) continue;
            k.push_back(e.K);
            // Small-angle form of K: the relative gap is (n theta / sin(n theta))^{1/n} - 1 <= n theta^2 / 6 (1 + theta^2 n^2).
            const double approx = e.r / std::pow(n * std::abs(e.theta), 1.0 / n);
            const double th2 = e.theta * e.theta;
            EXPECT_LE(std::abs(e.K / approx - 1.0), n * th2 / 6.0 * (1.0 + n * n * th2) + 1e-14);
        }
        ASSERT_GE(k.size(), 10000u);
        EXPECT_NEAR(ktau_tail(k).fit.slope, -static_cast<double>(n), n == 1 ? 0.2 : 0.3) << n;
    }
}

TEST(KolmogorovSmirnov, CriticalValuesAndDecisions) {
    EXPECT_NEAR(kolmogorov_tail(1.3581), 0.05, 1e-3);
    EXPECT_NEAR(kolmogorov_tail(1.6276), 0.01, 1e-3);
    std::mt19937_64 gen(10);
    std::normal_distribution<double> z;
    std::vector<double> a(5000), b(5000), c(5000);
    for (auto& v : a) v = z(gen);
    for (auto& v : b) v = z(gen);
    for (auto& v : c) v = z(gen) + 0.2;
    EXPECT_EQ(ks_two_sample(a, a).statistic, 0.0);
    EXPECT_FALSE(ks_two_sample(a, b).rejected_1pct());
    const auto shifted = ks_two_sample(a, c);
    EXPECT_TRUE(shifted.rejected_1pct());
    EXPECT_LT(shifted.p_value, 0.01);
    EXPECT_THROW(ks_two_sample(a, std::vector<double>{}), InsufficientData);
}

TEST(Estimators, InvariantUnderShuffling) {
    const auto s = pareto(1.5, 200000, 12);
    const auto t = shuffled(s, 13);
    const auto levels = log_grid(1.0, 500.0, 30);
    EXPECT_EQ(tail_survival(s, levels, 0.25).survival, tail_survival(t, levels, 0.25).survival);
    EXPECT_EQ(tail_survival(s, levels, 0.25).fit.slope, tail_survival(t, levels, 0.25).fit.slope);
    EXPECT_EQ(ktau_tail(s).fit.slope, ktau_tail(t).fit.slope);
    EXPECT_EQ(exit_tail_rate(s).rate, exit_tail_rate(t).rate);
    const auto half = std::vector<double>(t.begin(), t.begin() + 1000);
    EXPECT_EQ(ks_two_sample(s, half).statistic, ks_two_sample(t, shuffled(half, 2)).statistic);
}
