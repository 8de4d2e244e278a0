#pragma once

// Adaptive Euler-Maruyama integration of dz = [z^{n+1} + F] dt + sigma dB in
// the plain clock and of its time change with generator L = r^{-n} (generator),
// plus seeded ensembles with an order-fixed merge.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace noisestab {

enum class IntegratorMode { Cartesian, TimeChangedPolar, DeterministicCartesian };

inline const char* to_string(IntegratorMode m) {
    switch (m) {
    case IntegratorMode::Cartesian: return "cartesian";
    case IntegratorMode::TimeChangedPolar: return "timechanged";
    case IntegratorMode::DeterministicCartesian: return "deterministic";
    }
    return "?";
}

struct IntegratorConfig {
    double dt_base = 1e-3;
    /// Bound on the drift displacement of one step, relative to max(1, |z|).
    double drift_cap_eps = 0.01;
    double r_cap = 1e6;
    double t_max = 10.0;
    IntegratorMode mode = IntegratorMode::Cartesian;
    /// Keep every k-th step in a stored trajectory; events are always kept.
    std::size_t record_stride = 1;
    /// Reflecting floor of the time-changed polar integrator.
    double r_min = 1e-3;

    void validate() const {
        auto finite_pos = [](double v) { return std::isfinite(v) && v > 0.0; };
        if (!finite_pos(dt_base)) throw ConfigError("integrator: dt_base must be positive");
        if (!finite_pos(drift_cap_eps)) throw ConfigError("integrator: drift_cap_eps must be positive");
        if (!finite_pos(r_cap)) throw ConfigError("integrator: r_cap must be positive");
        if (!finite_pos(t_max)) throw ConfigError("integrator: t_max must be positive");
        if (!finite_pos(r_min) || r_min >= r_cap) throw ConfigError("integrator: need 0 < r_min < r_cap");
        if (record_stride == 0) throw ConfigError("integrator: record_stride must be >= 1");
    }

    /// r_cap must leave room above the partition radius of an experiment.
    void validate_against(double r_star) const {
        validate();
        if (!(r_cap > 10.0 * r_star)) throw ConfigError("integrator: r_cap must exceed 10 r*");
    }
};

enum class EventKind { CapHit, Blowup, Floor, Stop };

inline const char* to_string(EventKind k) {
    switch (k) {
    case EventKind::CapHit: return "caphit";
    case EventKind::Blowup: return "blowup";
    case EventKind::Floor: return "floor";
    case EventKind::Stop: return "stop";
    }
    return "?";
}

struct Event {
    EventKind kind = EventKind::Stop;
    double t = 0.0;
    friend bool operator==(const Event&, const Event&) = default;
};

/// Stored path.  For time-changed runs `times` is the time-changed clock and
/// `physical_time` the matching time of the original dynamics.
struct Trajectory {
    bool polar = false;
    std::vector<double> times;
    std::vector<complex> states;
    std::vector<double> physical_time;
    std::vector<Event> events;

    bool has(EventKind k) const {
        return std::any_of(events.begin(), events.end(), [k](const Event& e) { return e.kind == k; });
    }
    std::optional<double> first(EventKind k) const {
        for (const auto& e : events)
            if (e.kind == k) return e.t;
        return std::nullopt;
    }

    void write_csv(std::ostream& os) const {
        os.precision(17);
        os << (polar ? "t,r,theta,t_physical\n" : "t,re,im\n");
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (polar) {
                const auto p = to_polar(states[i]);
                os << times[i] << "," << p.r << "," << p.theta << "," << physical_time[i] << "\n";
            } else {
                os << times[i] << "," << states[i].real() << "," << states[i].imag() << "\n";
            }
        }
        for (const auto& e : events) os << "# event," << to_string(e.kind) << "," << e.t << "\n";
    }

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Plain-clock Euler-Maruyama stepper.  Each step uses
/// dt = min(dt_base, eps max(1, |z|) / |drift|), so the drift moves the state
/// by at most a fraction eps of its size; the complex noise increment is
/// sigma sqrt(dt) (Z1 + i Z2).
class EulerMaruyama {
public:
    EulerMaruyama(const SystemSpec& spec, const IntegratorConfig& cfg, std::uint64_t seed, complex z0,
                  bool deterministic = false)
        : spec_(spec), cfg_(cfg), gen_(seed), z_(z0),
          sigma_(deterministic ? 0.0 : spec.sigma()) {}

    complex z() const { return z_; }
    double t() const { return t_; }
    double r() const { return modulus(z_); }

    /// Advances one step, never past `t_end`; returns the step taken.
    double step(double t_end = std::numeric_limits<double>::infinity()) {
        const complex b = spec_.drift(z_);
        const double bn = modulus(b);
        double dt = cfg_.dt_base;
        const double cap = cfg_.drift_cap_eps * std::max(1.0, modulus(z_));
        if (bn * dt > cap) dt = cap / bn;
        dt = std::min(dt, t_end - t_);
        z_ += b * dt;
        if (sigma_ > 0.0) {
            const double s = sigma_ * std::sqrt(dt);
            const double x = normal_(gen_), y = normal_(gen_);
            z_ += complex{s * x, s * y};
        }
        t_ += dt;
        return dt;
    }

private:
    const SystemSpec& spec_;
    IntegratorConfig cfg_;
    Xoshiro256pp gen_;
    std::normal_distribution<double> normal_;
    complex z_;
    double t_ = 0.0;
    double sigma_;
};

/// Runs the plain-clock dynamics to t_max, to |z| >= r_cap, or until the
/// observer returns false.  The observer sees (t, z) after every step.
template <class Observer>
std::vector<Event> simulate_path(const SystemSpec& spec, complex z0, const IntegratorConfig& cfg,
                                 std::uint64_t seed, Observer&& observe) {
    cfg.validate();
    if (!std::isfinite(z0.real()) || !std::isfinite(z0.imag()))
        throw ConfigError("simulate: initial condition must be finite");
    const bool det = cfg.mode == IntegratorMode::DeterministicCartesian;
    EulerMaruyama em(spec, cfg, seed, z0, det);
    std::vector<Event> events;
    while (em.t() < cfg.t_max) {
        em.step(cfg.t_max);
        const double r = em.r();
        if (!(r < cfg.r_cap)) {
            observe(em.t(), em.z());
            events.push_back({EventKind::CapHit, em.t()});
            if (det && spec.is_monomial() && std::isfinite(r))
                events.push_back({EventKind::Blowup, em.t() + 1.0 / (spec.n() * std::pow(r, spec.n()))});
            break;
        }
        if (!observe(em.t(), em.z())) {
            events.push_back({EventKind::Stop, em.t()});
            break;
        }
    }
    return events;
}

/// State of the time-changed polar dynamics.
struct TimeChangedState {
    double s = 0.0;       ///< time-changed clock
    double t_phys = 0.0;  ///< original clock
    PolarPoint p;
};

/// Euler-Maruyama for the time-changed diffusion in (r, theta):
///   dr     = r^{-n} (b_r + sigma^2 / (2r)) ds + sigma r^{-n/2} dW1
///   dtheta = r^{-n} b_theta ds              + sigma r^{-(n+2)/2} dW2
/// where (b_r, b_theta) is the polar drift.  The step keeps the drift
/// displacement of r below eps max(1, r), that of theta below eps, and the
/// noise variance of theta below eps.  The original clock advances by
/// r^{-n} ds.
class TimeChangedStepper {
public:
    TimeChangedStepper(const SystemSpec& spec, const IntegratorConfig& cfg, std::uint64_t seed,
                       PolarPoint p0)
        : spec_(spec), cfg_(cfg), gen_(seed) {
        state_.p = p0;
    }

    const TimeChangedState& state() const { return state_; }

    /// Advances one step, never past `s_end`; returns true when the floor reflected the radius.
    bool step(double s_end = std::numeric_limits<double>::infinity()) {
        const int n = spec_.n();
        const double sig = spec_.sigma();
        const double r = state_.p.r;
        const double rn = std::pow(r, n);
        const auto b = polar_drift(spec_, state_.p);
        const double mu_r = (b.dr + 0.5 * sig * sig / r) / rn;
        const double mu_t = b.dtheta / rn;
        const double eps = cfg_.drift_cap_eps;
        double ds = cfg_.dt_base;
        if (std::abs(mu_r) * ds > eps * std::max(1.0, r)) ds = eps * std::max(1.0, r) / std::abs(mu_r);
        if (std::abs(mu_t) * ds > eps) ds = eps / std::abs(mu_t);
        if (sig > 0.0) ds = std::min(ds, eps * rn * r * r / (sig * sig));
        ds = std::min(ds, s_end - state_.s);

        double r_new = r + mu_r * ds;
        double th_new = state_.p.theta + mu_t * ds;
        if (sig > 0.0) {
            const double sq = std::sqrt(ds);
            r_new += sig / std::sqrt(rn) * sq * normal_(gen_);
            th_new += sig / (std::sqrt(rn) * r) * sq * normal_(gen_);
        }
        bool floored = false;
        if (r_new < cfg_.r_min) {
            r_new = std::max(2.0 * cfg_.r_min - r_new, cfg_.r_min);
            floored = true;
        }
        state_.t_phys += ds / rn;
        state_.s += ds;
        state_.p = {r_new, wrap_angle(th_new)};
        return floored;
    }

private:
    const SystemSpec& spec_;
    IntegratorConfig cfg_;
    Xoshiro256pp gen_;
    std::normal_distribution<double> normal_;
    TimeChangedState state_;
};

/// Runs the time-changed dynamics to s = t_max, to r >= r_cap, or until the
/// observer returns false.  Reflections at r_min are recorded as events.
template <class Observer>
std::vector<Event> simulate_timechanged_path(const SystemSpec& spec, PolarPoint p0,
                                             const IntegratorConfig& cfg, std::uint64_t seed,
                                             Observer&& observe) {
    cfg.validate();
    if (!(p0.r > 0.0) || !std::isfinite(p0.r) || !std::isfinite(p0.theta))
        throw DomainError("integrate_timechanged: need a finite start with r > 0");
    TimeChangedStepper st(spec, cfg, seed, p0);
    std::vector<Event> events;
    while (st.state().s < cfg.t_max) {
        if (st.step(cfg.t_max)) events.push_back({EventKind::Floor, st.state().s});
        if (!(st.state().p.r < cfg.r_cap)) {
            observe(st.state());
            events.push_back({EventKind::CapHit, st.state().s});
            break;
        }
        if (!observe(st.state())) {
            events.push_back({EventKind::Stop, st.state().s});
            break;
        }
    }
    return events;
}

/// Integrates the time-changed polar dynamics and stores the path.
inline Trajectory integrate_timechanged(const SystemSpec& spec, PolarPoint p0, const IntegratorConfig& cfg,
                                        std::uint64_t seed) {
    Trajectory tr;
    tr.polar = true;
    tr.times.push_back(0.0);
    tr.states.push_back(to_cartesian(p0));
    tr.physical_time.push_back(0.0);
    std::size_t count = 0;
    bool last_recorded = true;
    TimeChangedState last;
    auto keep = [&](const TimeChangedState& s) {
        tr.times.push_back(s.s);
        tr.states.push_back(to_cartesian(s.p));
        tr.physical_time.push_back(s.t_phys);
    };
    tr.events = simulate_timechanged_path(spec, p0, cfg, seed, [&](const TimeChangedState& s) {
        last_recorded = ++count % cfg.record_stride == 0;
        if (last_recorded) keep(s);
        last = s;
        return true;
    });
    if (!last_recorded) keep(last);
    return tr;
}

/// Integrates the SDE and stores the path.  Identical (spec, z0, cfg, seed)
/// give a bit-identical trajectory.
inline Trajectory integrate(const SystemSpec& spec, complex z0, const IntegratorConfig& cfg,
                            std::uint64_t seed) {
    if (cfg.mode == IntegratorMode::TimeChangedPolar)
        return integrate_timechanged(spec, to_polar(z0), cfg, seed);
    Trajectory tr;
    tr.times.push_back(0.0);
    tr.states.push_back(z0);
    std::size_t count = 0;
    double last_t = 0.0;
    complex last_z = z0;
    bool last_recorded = true;
    tr.events = simulate_path(spec, z0, cfg, seed, [&](double t, complex z) {
        last_recorded = ++count % cfg.record_stride == 0;
        if (last_recorded) {
            tr.times.push_back(t);
            tr.states.push_back(z);
        }
        last_t = t;
        last_z = z;
        return true;
    });
    if (!last_recorded) {
        tr.times.push_back(last_t);
        tr.states.push_back(last_z);
    }
    return tr;
}

struct TrajectoryError {
    std::size_t index = 0;
    std::string message;
};

template <class T>
struct EnsembleResult {
    T merged{};
    std::size_t completed = 0;
    std::vector<TrajectoryError> errors;
};

/// Runs work(index, seed) for index = 0..count-1 on `workers` threads, with
/// seed = substream_seed(master_seed, index), and merges the results in index
/// order with merge(acc, item).  Exceptions become per-index errors.  The
/// output is independent of the worker count.
template <class T, class Work, class Merge>
EnsembleResult<T> parallel_ensemble(std::size_t count, std::uint64_t master_seed, unsigned workers,
                                    Work&& work, Merge&& merge) {
    std::vector<std::optional<T>> items(count);
    std::vector<std::string> failures(count);
    auto run = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < count; i += stride) {
            try {
                items[i].emplace(work(i, substream_seed(master_seed, i)));
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    workers = std::max(1u, workers);
    if (workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    }
    EnsembleResult<T> out;
    for (std::size_t i = 0; i < count; ++i) {
        if (items[i]) {
            merge(out.merged, *items[i]);
            ++out.completed;
        } else {
            out.errors.push_back({i, failures[i]});
        }
    }
    return out;
}

/// Integrates n_traj trajectories from z0, trajectory i with substream i of
/// master_seed, feeds each to a fresh Sink and merges the sinks in index
/// order.  Sink must provide observe(const Trajectory&) and merge(const Sink&).
template <class Sink>
EnsembleResult<Sink> run_ensemble(const SystemSpec& spec, complex z0, const IntegratorConfig& cfg,
                                  std::size_t n_traj, std::uint64_t master_seed, unsigned workers = 1) {
    if (n_traj == 0) throw DomainError("run_ensemble: n_traj must be >= 1");
    cfg.validate();
    return parallel_ensemble<Sink>(
        n_traj, master_seed, workers,
        [&](std::size_t, std::uint64_t seed) {
            Sink s{};
            s.observe(integrate(spec, z0, cfg, seed));
            return s;
        },
        [](Sink& acc, const Sink& item) { acc.merge(item); });
}

} // namespace noisestab
