#pragma once

// Monte-Carlo experiments built on the integrators and estimators: spike
// spacing, stationary tail and moments, exits from the strip around the
// explosive ray, and the noise-rescaling law.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "simulate.hpp"
#include "stats.hpp"

namespace noisestab {

struct EnsembleConfig {
    std::size_t n_traj = 1;
    double t_per_traj = 1000.0;
    std::uint64_t seed = 1;
    unsigned workers = 1;
};

// ---------------------------------------------------------------- spikes

struct SpikeLevel {
    double R = 0.0;
    std::size_t gaps = 0;
    double mean_gap = 0.0;
    double std_error = 0.0;
};

struct SpikeExperimentResult {
    double r_low = 0.0;
    std::vector<SpikeLevel> plain;
    std::vector<SpikeLevel> timechanged;
    LogLogFit fit_plain;
    LogLogFit fit_timechanged;
};

namespace detail {

/// Gap lists for each level on both clocks, one trajectory.
struct SpikeGaps {
    std::vector<std::vector<double>> plain, timechanged;

    void merge(const SpikeGaps& o) {
        if (plain.empty()) {
            *this = o;
            return;
        }
        for (std::size_t i = 0; i < plain.size(); ++i) {
            plain[i].insert(plain[i].end(), o.plain[i].begin(), o.plain[i].end());
            timechanged[i].insert(timechanged[i].end(), o.timechanged[i].begin(), o.timechanged[i].end());
        }
    }
};

inline SpikeLevel summarize_gaps(double R, const std::vector<double>& g) {
    SpikeLevel s;
    s.R = R;
    s.gaps = g.size();
    if (g.empty()) return s;
    s.mean_gap = std::accumulate(g.begin(), g.end(), 0.0) / g.size();
    double ss = 0.0;
    for (double x : g) ss += (x - s.mean_gap) * (x - s.mean_gap);
    s.std_error = g.size() > 1 ? std::sqrt(ss / (g.size() - 1) / g.size()) : 0.0;
    return s;
}

inline LogLogFit fit_spike_levels(const std::vector<SpikeLevel>& levels, std::size_t min_gaps) {
    std::vector<double> x, y;
    for (const auto& l : levels)
        if (l.gaps >= min_gaps && l.mean_gap > 0.0) {
            x.push_back(l.R);
            y.push_back(l.mean_gap);
        }
    if (x.size() < 3) throw InsufficientData("spike experiment: fewer than 3 levels with enough gaps");
    return fit_loglog(x, y);
}

} // namespace detail

/// Runs trajectories from the origin and records, for every level R, the
/// gaps T_{i+1} - T_i between up-crossings of R separated by returns below
/// r_low, on the plain clock and on the time-changed clock int r^n dt of the
/// same path.  Mean gaps are fitted against R in log-log.
inline SpikeExperimentResult run_spike_experiment(const SystemSpec& spec, const IntegratorConfig& integ,
                                                  const EnsembleConfig& ens, double r_low,
                                                  const std::vector<double>& levels, std::size_t min_gaps = 20) {
    for (double R : levels)
        if (!(r_low < 0.5 * R)) throw DomainError("spike experiment: every level must exceed 2 r_low");
    IntegratorConfig cfg = integ;
    cfg.t_max = ens.t_per_traj;
    cfg.validate();
    const int n = spec.n();
    auto res = parallel_ensemble<detail::SpikeGaps>(
        ens.n_traj, ens.seed, ens.workers,
        [&](std::size_t, std::uint64_t seed) {
            std::vector<SpikeDetector> plain, tc;
            for (double R : levels) {
                plain.emplace_back(r_low, R, ClockKind::Plain);
                tc.emplace_back(r_low, R, ClockKind::TimeChanged);
            }
            double s = 0.0, t_prev = 0.0, r_prev = 0.0;
            simulate_path(spec, complex{}, cfg, seed, [&](double t, complex z) {
                const double r = modulus(z);
                s += std::pow(r_prev, n) * (t - t_prev);
                t_prev = t;
                r_prev = r;
                for (std::size_t i = 0; i < plain.size(); ++i) {
                    plain[i].observe(t, r);
                    tc[i].observe(s, r);
                }
                return true;
            });
            detail::SpikeGaps g;
            for (std::size_t i = 0; i < plain.size(); ++i) {
                g.plain.push_back(plain[i].record().gap_samples);
                g.timechanged.push_back(tc[i].record().gap_samples);
            }
            return g;
        },
        [](detail::SpikeGaps& acc, const detail::SpikeGaps& g) { acc.merge(g); });
    if (!res.errors.empty()) throw Error("spike experiment: " + res.errors.front().message);

    SpikeExperimentResult out;
    out.r_low = r_low;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        out.plain.push_back(detail::summarize_gaps(levels[i], res.merged.plain[i]));
        out.timechanged.push_back(detail::summarize_gaps(levels[i], res.merged.timechanged[i]));
    }
    out.fit_plain = detail::fit_spike_levels(out.plain, min_gaps);
    out.fit_timechanged = detail::fit_spike_levels(out.timechanged, min_gaps);
    return out;
}

// ------------------------------------------------------------ stationary

struct StationaryConfig {
    double r_low = 2.0;           ///< return level that ends the burn-in
    std::size_t stride = 100;     ///< sample spacing in units of dt_base
    double burn_fraction = 0.1;
    bool keep_samples = true;
};

struct StationaryResult {
    SurvivalCounter plain;        ///< |z| sampled every `stride` steps
    SurvivalCounter timechanged;  ///< |z| sampled on the clock int r^n dt
    std::vector<double> samples;  ///< plain samples in trajectory order
    std::size_t trajectories = 0;
    std::size_t never_returned = 0;  ///< paths that never came back below r_low

    void merge(const StationaryResult& o) {
        if (trajectories == 0) {
            plain = o.plain;
            timechanged = o.timechanged;
        } else {
            plain.merge(o.plain);
            timechanged.merge(o.timechanged);
        }
        samples.insert(samples.end(), o.samples.begin(), o.samples.end());
        trajectories += o.trajectories;
        never_returned += o.never_returned;
    }
};

/// Stationary samples of |z|.  Each trajectory starts at the origin; samples
/// are kept after the later of burn_fraction t_max and the first return
/// below r_low.  Plain samples are taken every stride dt_base units of time
/// (steps shrink during spikes, so a step count would over-weight large
/// radii).  Time-changed samples are taken each time the clock int r^n dt
/// passes a multiple of stride dt_base, with multiplicity when a step passes
/// several.
inline StationaryResult run_stationary(const SystemSpec& spec, const IntegratorConfig& integ,
                                       const EnsembleConfig& ens, const StationaryConfig& st,
                                       const std::vector<double>& levels) {
    IntegratorConfig cfg = integ;
    cfg.t_max = ens.t_per_traj;
    cfg.validate();
    if (st.stride == 0) throw ConfigError("stationary: stride must be >= 1");
    const int n = spec.n();
    const double ds_sample = static_cast<double>(st.stride) * cfg.dt_base;
    const double t_burn = st.burn_fraction * cfg.t_max;
    auto res = parallel_ensemble<StationaryResult>(
        ens.n_traj, ens.seed, ens.workers,
        [&](std::size_t, std::uint64_t seed) {
            StationaryResult out;
            out.plain = SurvivalCounter(levels);
            out.timechanged = SurvivalCounter(levels);
            out.trajectories = 1;
            bool returned = false, sampling = false;  // first return below r_low, burn-in over
            double s = 0.0, t_prev = 0.0, r_prev = 0.0, t_next = 0.0;
            simulate_path(spec, complex{}, cfg, seed, [&](double t, complex z) {
                const double r = modulus(z);
                if (!sampling) {
                    returned = returned || r <= st.r_low;
                    sampling = returned && t >= t_burn;
                    t_next = t + ds_sample;
                    t_prev = t;
                    r_prev = r;
                    return true;
                }
                const double s_new = s + std::pow(r_prev, n) * (t - t_prev);
                const auto passes = static_cast<std::uint64_t>(std::floor(s_new / ds_sample) -
                                                               std::floor(s / ds_sample));
                if (passes > 0) out.timechanged.add(r, passes);
                s = s_new;
                t_prev = t;
                r_prev = r;
                if (t >= t_next) {
                    out.plain.add(r);
                    if (st.keep_samples) out.samples.push_back(r);
                    t_next += ds_sample;
                }
                return true;
            });
            if (!sampling) out.never_returned = 1;
            return out;
        },
        [](StationaryResult& acc, const StationaryResult& r) { acc.merge(r); });
    if (!res.errors.empty()) throw Error("stationary experiment: " + res.errors.front().message);
    return res.merged;
}

// ----------------------------------------------------------------- exits

struct ExitSample {
    double tau = 0.0;     ///< exit time on the clock of the run
    double r = 0.0;
    double theta = 0.0;   ///< principal-wedge angle at exit
    double K = 0.0;       ///< orbit parameter of the exit point, 0 if undefined
    bool through_eta = false;  ///< left through |eta| = eta* rather than r = r_region
};

struct ExitConfig {
    double eta_star = 50.0;
    double r_region = 0.0;     ///< inner radius of the strip
    double start_radius = 0.0; ///< start on the ray theta = 0 at this radius
    std::size_t n_exits = 1000;
    std::size_t max_steps = 10'000'000;
    ClockKind clock = ClockKind::TimeChanged;
    std::uint64_t seed = 1;
    unsigned workers = 1;
};

/// Radius at which the strip |eta| <= eta* has angular half-width `angle`.
inline double strip_radius(int n, double eta_star, double angle) {
    return std::pow(eta_star / angle, 2.0 / (n + 2));
}

/// Exits from the strip {r >= r_region, |theta| r^{(n+2)/2} <= eta*} around
/// the explosive ray theta = 0, starting at (start_radius, 0).  With
/// ClockKind::TimeChanged the time-changed polar dynamics is used and tau is
/// on its clock; otherwise the plain dynamics and plain time.
inline std::vector<ExitSample> run_exits(const SystemSpec& spec, const IntegratorConfig& integ,
                                         const ExitConfig& ec) {
    integ.validate();
    if (!(ec.r_region > 0.0) || ec.start_radius < ec.r_region)
        throw ConfigError("exits: need 0 < r_region <= start_radius");
    const int n = spec.n();
    const double k = 0.5 * (n + 2);
    auto classify_exit = [&](PolarPoint p, double tau) -> std::optional<ExitSample> {
        const double th = to_principal_wedge(p.theta, n).principal;
        const bool out_eta = std::abs(th) * std::pow(p.r, k) > ec.eta_star;
        const bool out_r = p.r < ec.r_region;
        if (!out_eta && !out_r) return std::nullopt;
        ExitSample e{tau, p.r, th, 0.0, out_eta};
        if (th != 0.0 && std::abs(th) < pi / n) e.K = orbit_K({p.r, th}, n);
        return e;
    };
    auto res = parallel_ensemble<std::vector<ExitSample>>(
        ec.n_exits, ec.seed, ec.workers,
        [&](std::size_t, std::uint64_t seed) {
            std::optional<ExitSample> hit;
            std::size_t steps = 0;
            if (ec.clock == ClockKind::TimeChanged) {
                TimeChangedStepper st(spec, integ, seed, {ec.start_radius, 0.0});
                while (!hit) {
                    st.step();
                    hit = classify_exit(st.state().p, st.state().s);
                    if (++steps > ec.max_steps) throw BudgetError("exits: step cap reached");
                }
            } else {
                EulerMaruyama em(spec, integ, seed, complex{ec.start_radius, 0.0});
                while (!hit) {
                    em.step();
                    hit = classify_exit(to_polar(em.z()), em.t());
                    if (++steps > ec.max_steps) throw BudgetError("exits: step cap reached");
                }
            }
            return std::vector<ExitSample>{*hit};
        },
        [](std::vector<ExitSample>& acc, const std::vector<ExitSample>& v) {
            acc.insert(acc.end(), v.begin(), v.end());
        });
    if (!res.errors.empty()) throw Error("exit experiment: " + res.errors.front().message);
    return res.merged;
}

// ------------------------------------------------------------- rescaling

struct RescalingResult {
    std::vector<double> reference;  ///< |z(t sigma^{l'})| with noise 1
    std::vector<double> rescaled;   ///< sigma^{-l} |z(t)| with noise sigma
    KsResult ks;
};

/// Noise-rescaling law of the monomial system: sigma^l z(t sigma^{l'}, 1)
/// has the law of z(t, sigma), l = 2/(n+2), l' = 2n/(n+2).  Compares
/// sigma^{-l} |z(t, sigma)| with |z(t sigma^{l'}, 1)| over independent paths
/// from the origin; the sigma run uses the matching step dt_base sigma^{-l'}.
inline RescalingResult run_rescaling(int n, double sigma, double t, const IntegratorConfig& integ,
                                     std::size_t samples, std::uint64_t seed, unsigned workers = 1) {
    const double l = 2.0 / (n + 2), lp = 2.0 * n / (n + 2);
    const SystemSpec ref_spec(n, 1.0), big_spec(n, sigma);
    auto endpoint = [&](const SystemSpec& spec, IntegratorConfig cfg, double t_end, std::uint64_t master) {
        cfg.t_max = t_end;
        return parallel_ensemble<std::vector<double>>(
                   samples, master, workers,
                   [&](std::size_t, std::uint64_t s) {
                       double r = 0.0;
                       simulate_path(spec, complex{}, cfg, s, [&](double, complex z) {
                           r = modulus(z);
                           return true;
                       });
                       return std::vector<double>{r};
                   },
                   [](std::vector<double>& acc, const std::vector<double>& v) {
                       acc.insert(acc.end(), v.begin(), v.end());
                   })
            .merged;
    };
    RescalingResult out;
    out.reference = endpoint(ref_spec, integ, t * std::pow(sigma, lp), substream_seed(seed, 1));
    IntegratorConfig big = integ;
    big.dt_base = integ.dt_base * std::pow(sigma, -lp);
    out.rescaled = endpoint(big_spec, big, t, substream_seed(seed, 2));
    for (double& r : out.rescaled) r *= std::pow(sigma, -l);
    out.ks = ks_two_sample(out.reference, out.rescaled);
    return out;
}

} // namespace noisestab
