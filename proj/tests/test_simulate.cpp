#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "noisestab/experiments.hpp"
#include "noisestab/simulate.hpp"

using namespace noisestab;

namespace {

IntegratorConfig deterministic(double r_cap, double t_max) {
    IntegratorConfig c;
    c.mode = IntegratorMode::DeterministicCartesian;
    c.r_cap = r_cap;
    c.t_max = t_max;
    c.dt_base = 1e-4;
    c.drift_cap_eps = 1e-3;
    return c;
}

double stddev(const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
}

} // namespace

TEST(Integrate, DeterministicBlowupTime) {
    for (int n : {1, 2, 3}) {
        for (double r0 : {1.0, 2.0}) {
            const SystemSpec spec(n, 0.0);
            const auto tr = integrate(spec, {r0, 0.0}, deterministic(1e6, 10.0), 1);
            const auto hit = tr.first(EventKind::CapHit);
            ASSERT_TRUE(hit.has_value()) << n;
            const double exact = 1.0 / (n * std::pow(r0, n));
            EXPECT_NEAR(*hit / exact, 1.0, 0.02) << n << " " << r0;
            const auto est = tr.first(EventKind::Blowup);
            ASSERT_TRUE(est.has_value());
            EXPECT_NEAR(*est / exact, 1.0, 0.02);
            EXPECT_GE(*est, *hit);
            EXPECT_EQ(tr.events.front().kind, EventKind::CapHit);
            EXPECT_EQ(tr.times.back(), *hit);
        }
    }
}

TEST(Integrate, DecayOnTheStableRay) {
    for (int n : {1, 2, 3}) {
        const SystemSpec spec(n, 0.0);
        const auto tr = integrate(spec, std::polar(1.0, pi / n), deterministic(1e6, 20.0), 1);
        EXPECT_TRUE(tr.events.empty());
        for (std::size_t i = 1; i < tr.states.size(); ++i)
            ASSERT_LT(modulus(tr.states[i]), modulus(tr.states[i - 1])) << n << " " << i;
        // r(t) = (1 + n t)^{-1/n}
        EXPECT_NEAR(modulus(tr.states.back()), std::pow(1.0 + n * 20.0, -1.0 / n), 1e-3);
    }
}

TEST(Integrate, TimesIncreaseAndNothingFollowsTheCap) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 5.0;
    c.r_cap = 5.0;
    c.record_stride = 7;
    const auto tr = integrate(spec, {3.0, 0.0}, c, 11);
    for (std::size_t i = 1; i < tr.times.size(); ++i) ASSERT_GT(tr.times[i], tr.times[i - 1]);
    if (auto hit = tr.first(EventKind::CapHit)) {
        EXPECT_EQ(tr.times.back(), *hit);
        EXPECT_GE(modulus(tr.states.back()), 5.0);
    }
    std::ostringstream os;
    tr.write_csv(os);
    EXPECT_EQ(os.str().rfind("t,re,im\n", 0), 0u);
}

TEST(Integrate, BitIdenticalReruns) {
    const SystemSpec spec(2, 1.0);
    IntegratorConfig c;
    c.t_max = 3.0;
    auto dump = [&](std::uint64_t seed) {
        std::ostringstream os;
        integrate(spec, {0.2, -0.1}, c, seed).write_csv(os);
        return os.str();
    };
    EXPECT_EQ(dump(9), dump(9));
    EXPECT_NE(dump(9), dump(10));
}

TEST(Integrate, RejectsNonFiniteInput) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    EXPECT_THROW(integrate(spec, {std::nan(""), 0.0}, c, 1), ConfigError);
    c.dt_base = -1.0;
    EXPECT_THROW(integrate(spec, {0.0, 0.0}, c, 1), ConfigError);
    c = {};
    c.r_cap = std::numeric_limits<double>::infinity();
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    EXPECT_THROW(c.validate_against(c.r_cap), ConfigError);
}

TEST(Integrate, AdaptiveStepBoundsDriftDisplacement) {
    const SystemSpec spec(2, 1.0);
    IntegratorConfig c;
    c.drift_cap_eps = 0.01;
    EulerMaruyama em(spec, c, 3, {1.0, 0.5});
    for (int i = 0; i < 200000 && em.r() < 1e5; ++i) {
        const double bound = c.drift_cap_eps * std::max(1.0, em.r());
        const double drift = modulus(spec.drift(em.z()));
        const double dt = em.step();
        ASSERT_LE(drift * dt, bound * (1 + 1e-12));
        ASSERT_LE(dt, c.dt_base);
    }
}

TEST(Integrate, NonExplosiveOverTheLongHorizon) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 15000.0;
    c.r_cap = 1e6;
    c.dt_base = 1e-2;
    int capped = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        const auto ev = simulate_path(spec, {}, c, substream_seed(77, seed), [](double, complex) { return true; });
        for (const auto& e : ev) capped += e.kind == EventKind::CapHit;
    }
    EXPECT_LE(capped, 1);
}

TEST(Integrate, WeakOrderOne) {
    // Mean of exp(-|z|^2) at t = 1 from a point on the stable side, at three
    // step sizes; successive differences shrink by about 2.
    const SystemSpec spec(1, 0.3);
    const std::size_t paths = 400000;
    std::vector<double> means;
    for (double dt : {0.1, 0.05, 0.025}) {
        IntegratorConfig c;
        c.dt_base = dt;
        c.drift_cap_eps = 100.0;
        c.t_max = 1.0;
        double sum = 0.0;
        for (std::size_t i = 0; i < paths; ++i) {
            EulerMaruyama em(spec, c, substream_seed(5, i), {-0.8, 0.1});
            while (em.t() < c.t_max) em.step(c.t_max);
            sum += std::exp(-std::norm(em.z()));
        }
        means.push_back(sum / paths);
    }
    const double d1 = means[0] - means[1], d2 = means[1] - means[2];
    EXPECT_NEAR(d1 / d2, 2.0, 0.6) << d1 << " " << d2;
}

TEST(TimeChanged, PhysicalClockIncreasesMoreSlowlyAboveOne) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 20.0;
    const auto tr = integrate_timechanged(spec, {3.0, 0.5}, c, 4);
    ASSERT_TRUE(tr.polar);
    ASSERT_EQ(tr.physical_time.size(), tr.times.size());
    for (std::size_t i = 1; i < tr.times.size(); ++i) {
        const double dphys = tr.physical_time[i] - tr.physical_time[i - 1];
        const double ds = tr.times[i] - tr.times[i - 1];
        ASSERT_GT(dphys, 0.0);
        ASSERT_GT(ds, 0.0);
        if (modulus(tr.states[i - 1]) > 1.0) {
            ASSERT_LT(dphys, ds);
        }
    }
    std::ostringstream os;
    tr.write_csv(os);
    EXPECT_EQ(os.str().rfind("t,r,theta,t_physical\n", 0), 0u);
}

TEST(TimeChanged, DeterministicRadiusGrowsExponentially) {
    for (int n : {1, 2}) {
        const SystemSpec spec(n, 0.0);
        IntegratorConfig c;
        c.t_max = 5.0;
        c.r_cap = 1e9;
        c.dt_base = 1e-4;
        const auto tr = integrate_timechanged(spec, {2.0, 0.0}, c, 1);
        for (std::size_t i = 0; i < tr.times.size(); i += 97) {
            const double r = modulus(tr.states[i]);
            EXPECT_NEAR(r / (2.0 * std::exp(tr.times[i])), 1.0, 1e-3) << n;
        }
        // The physical clock approaches the blow-up time 1/(n r0^n).
        EXPECT_NEAR(tr.physical_time.back(), (1.0 - std::exp(-n * 5.0)) / (n * std::pow(2.0, n)), 1e-3);
    }
}

TEST(TimeChanged, FloorReflectsAndIsRecorded) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 50.0;
    c.r_min = 0.2;
    const auto tr = integrate_timechanged(spec, {0.3, pi}, c, 2);
    EXPECT_TRUE(tr.has(EventKind::Floor));
    for (const auto& z : tr.states) EXPECT_GE(modulus(z), 0.2 - 1e-12);
    EXPECT_THROW(integrate_timechanged(spec, {0.0, 0.0}, c, 1), DomainError);
}

TEST(TimeChanged, ExitHeightsMatchThePlainClock) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig ic;
    ExitConfig ec;
    ec.eta_star = 50.0;
    ec.r_region = 2 * strip_radius(1, 50.0, 0.2);
    ec.start_radius = ec.r_region;
    ec.n_exits = 10000;
    ec.seed = 21;
    auto heights = [&](ClockKind clock) {
        ec.clock = clock;
        std::vector<double> k;
        for (const auto& e : run_exits(spec, ic, ec))
            if (e.through_eta) k.push_back(e.K);
        return k;
    };
    const auto plain = heights(ClockKind::Plain);
    const auto tc = heights(ClockKind::TimeChanged);
    ASSERT_GT(plain.size(), 9000u);
    ASSERT_GT(tc.size(), 9000u);
    const auto ks = ks_two_sample(plain, tc);
    EXPECT_FALSE(ks.rejected_1pct()) << ks.statistic << " vs " << ks.critical_1pct;
}

TEST(Ensemble, SingleTrajectoryMatchesDirectIntegration) {
    struct Last {
        std::vector<double> r;
        void observe(const Trajectory& t) { r.push_back(modulus(t.states.back())); }
        void merge(const Last& o) { r.insert(r.end(), o.r.begin(), o.r.end()); }
    };
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 2.0;
    const auto res = run_ensemble<Last>(spec, {}, c, 1, 99);
    ASSERT_EQ(res.completed, 1u);
    const auto direct = integrate(spec, {}, c, substream_seed(99, 0));
    EXPECT_EQ(res.merged.r.front(), modulus(direct.states.back()));
    EXPECT_THROW(run_ensemble<Last>(spec, {}, c, 0, 99), DomainError);
}

TEST(Ensemble, ErrorsAreCollectedNotThrown) {
    const auto res = parallel_ensemble<int>(
        5, 1, 2,
        [](std::size_t i, std::uint64_t) -> int {
            if (i == 3) throw std::runtime_error("bad index");
            return static_cast<int>(i);
        },
        [](int& acc, int v) { acc += v; });
    EXPECT_EQ(res.completed, 4u);
    EXPECT_EQ(res.merged, 0 + 1 + 2 + 4);
    ASSERT_EQ(res.errors.size(), 1u);
    EXPECT_EQ(res.errors.front().index, 3u);
}

TEST(Ensemble, IndependentOfWorkerCount) {
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    EnsembleConfig one{.n_traj = 16, .t_per_traj = 50.0, .seed = 3, .workers = 1};
    EnsembleConfig eight = one;
    eight.workers = 8;
    const auto levels = log_grid(0.5, 100.0, 20);
    StationaryConfig st;
    const auto a = run_stationary(spec, c, one, st, levels);
    const auto b = run_stationary(spec, c, eight, st, levels);
    EXPECT_EQ(a.samples, b.samples);
    EXPECT_EQ(a.plain.exceedances(), b.plain.exceedances());
    EXPECT_EQ(a.timechanged.exceedances(), b.timechanged.exceedances());
}

TEST(Ensemble, StandardErrorFollowsInverseSquareRoot) {
    // Spread of a tail-probability estimate over replicate ensembles of size
    // N and 4N.
    const SystemSpec spec(1, 1.0);
    IntegratorConfig c;
    c.t_max = 1.0;
    c.dt_base = 1e-2;
    auto estimate = [&](std::size_t n_traj, std::uint64_t seed) {
        struct Count {
            double hits = 0, total = 0;
            void observe(const Trajectory& t) {
                hits += modulus(t.states.back()) > 1.0;
                total += 1;
            }
            void merge(const Count& o) {
                hits += o.hits;
                total += o.total;
            }
        };
        c.record_stride = 1000000;
        const auto r = run_ensemble<Count>(spec, {}, c, n_traj, seed);
        return r.merged.hits / r.merged.total;
    };
    std::vector<double> small, large;
    for (std::uint64_t rep = 0; rep < 200; ++rep) {
        small.push_back(estimate(100, substream_seed(1, rep)));
        large.push_back(estimate(400, substream_seed(2, rep)));
    }
    EXPECT_NEAR(stddev(small) / stddev(large), 2.0, 0.6);
}

TEST(Rescaling, NoiseScalingLawHoldsAtFivePercent) {
    IntegratorConfig c;
    const auto res = run_rescaling(1, 2.0, 2.0, c, 20000, 8);
    EXPECT_EQ(res.reference.size(), 20000u);
    EXPECT_FALSE(res.ks.rejected_5pct()) << res.ks.statistic << " vs " << res.ks.critical_5pct;
    // Without the rescaling of |z| the two samples differ.
    std::vector<double> raw = res.rescaled;
    for (double& r : raw) r *= std::pow(2.0, 2.0 / 3.0);
    EXPECT_TRUE(ks_two_sample(res.reference, raw).rejected_1pct());
}
