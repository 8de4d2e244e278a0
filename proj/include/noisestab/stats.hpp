#pragma once

// Estimators for the measurable predictions: inter-spike gaps, log-log power
// law fits, stationary tail and moments, exit-time decay rate, spike-height
// tail, and the two-sample Kolmogorov-Smirnov test.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "simulate.hpp"

namespace noisestab {

enum class ClockKind { Plain, TimeChanged };

inline const char* to_string(ClockKind c) { return c == ClockKind::Plain ? "plain" : "timechanged"; }

struct SpikeRecord {
    double r_low = 0.0;
    double R = 0.0;
    ClockKind clock = ClockKind::Plain;
    std::vector<double> gap_samples;  ///< T_{i+1} - T_i
    std::size_t spikes = 0;           ///< number of T_i seen

    double mean_gap() const {
        if (gap_samples.empty()) throw InsufficientData("SpikeRecord: no gaps");
        return std::accumulate(gap_samples.begin(), gap_samples.end(), 0.0) / gap_samples.size();
    }
};

/// Online detector of the stopping times T_i = inf{t >= S_{i-1} : r >= R} and
/// S_i = inf{t >= T_i : r <= r_low}; records T_{i+1} - T_i.
class SpikeDetector {
public:
    SpikeDetector(double r_low, double R, ClockKind clock = ClockKind::Plain) {
        if (!(r_low > 0.0) || !(r_low < 0.5 * R))
            throw DomainError("spike_gaps: need 0 < r_low < R/2");
        rec_.r_low = r_low;
        rec_.R = R;
        rec_.clock = clock;
    }

    void observe(double t, double r) {
        if (!armed_) {
            if (r <= rec_.r_low) armed_ = true;
            return;
        }
        if (r >= rec_.R) {
            if (last_T_) rec_.gap_samples.push_back(t - *last_T_);
            last_T_ = t;
            ++rec_.spikes;
            armed_ = false;
        }
    }

    /// Forget the previous T so a new independent path can be appended.
    void reset_path(bool start_armed = true) {
        last_T_.reset();
        armed_ = start_armed;
    }

    const SpikeRecord& record() const { return rec_; }

    /// Record with at least `min_gaps` gaps, or InsufficientData.
    const SpikeRecord& require(std::size_t min_gaps = 20) const {
        if (rec_.gap_samples.size() < min_gaps)
            throw InsufficientData("spike_gaps: " + std::to_string(rec_.gap_samples.size()) +
                                   " gaps at R=" + std::to_string(rec_.R) + ", need " +
                                   std::to_string(min_gaps));
        return rec_;
    }

private:
    SpikeRecord rec_;
    bool armed_ = true;  ///< S_0 = 0: the first up-crossing counts
    std::optional<double> last_T_;
};

/// Inter-spike gaps along a stored trajectory.  A time-changed trajectory
/// can be read on either clock; a plain one only on the plain clock (feed a
/// SpikeDetector with the accumulated clock instead).
inline SpikeRecord spike_gaps(const Trajectory& tr, double r_low, double R, ClockKind clock = ClockKind::Plain,
                              std::size_t min_gaps = 20) {
    if (!tr.polar && clock == ClockKind::TimeChanged)
        throw DomainError("spike_gaps: a plain trajectory carries no time-changed clock");
    SpikeDetector det(r_low, R, clock);
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
        const double t = tr.polar && clock == ClockKind::Plain ? tr.physical_time[i] : tr.times[i];
        det.observe(t, modulus(tr.states[i]));
    }
    return det.require(min_gaps);
}

struct LogLogFit {
    double slope = 0.0;
    double intercept = 0.0;
    double residual = 0.0;  ///< RMS of log-space errors
    double slope_se = 0.0;  ///< OLS standard error of the slope
    std::size_t points = 0;
};

/// Ordinary least squares of log y on log x over points with x in [x_lo, x_hi].
inline LogLogFit fit_loglog(std::span<const double> x, std::span<const double> y,
                            double x_lo = 0.0, double x_hi = std::numeric_limits<double>::infinity()) {
    if (x.size() != y.size()) throw DomainError("fit_loglog: size mismatch");
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DomainError("fit_loglog: coordinates must be positive");
        if (x[i] < x_lo || x[i] > x_hi) continue;
        lx.push_back(std::log(x[i]));
        ly.push_back(std::log(y[i]));
    }
    if (lx.size() < 3) throw DomainError("fit_loglog: need at least 3 points in the window");
    const double m = lx.size();
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / m;
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / m;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (!(sxx > 0.0)) throw DomainError("fit_loglog: x values must not all coincide");
    LogLogFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double ss = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        const double e = ly[i] - (f.intercept + f.slope * lx[i]);
        ss += e * e;
    }
    f.residual = std::sqrt(ss / m);
    f.slope_se = std::sqrt(ss / (m - 2.0) / sxx);
    f.points = lx.size();
    return f;
}

inline std::vector<double> log_grid(double lo, double hi, int count) {
    if (!(lo > 0.0 && hi > lo) || count < 2) throw DomainError("log_grid: need 0 < lo < hi, count >= 2");
    std::vector<double> out(count);
    for (int i = 0; i < count; ++i) out[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1));
    return out;
}

/// Streaming exceedance counts P(X >= R) on a fixed increasing grid of levels.
class SurvivalCounter {
public:
    SurvivalCounter() = default;
    explicit SurvivalCounter(std::vector<double> levels) : levels_(std::move(levels)), counts_(levels_.size(), 0) {
        if (!std::is_sorted(levels_.begin(), levels_.end()))
            throw DomainError("SurvivalCounter: levels must be increasing");
    }

    void add(double x, std::uint64_t weight = 1) {
        total_ += weight;
        const auto it = std::upper_bound(levels_.begin(), levels_.end(), x);
        const std::size_t k = static_cast<std::size_t>(it - levels_.begin());
        if (k > 0) counts_[k - 1] += weight;
    }

    void merge(const SurvivalCounter& o) {
        if (o.levels_ != levels_) throw DomainError("SurvivalCounter: level grids differ");
        total_ += o.total_;
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    }

    const std::vector<double>& levels() const { return levels_; }
    std::uint64_t total() const { return total_; }

    /// Number of samples >= levels[i].
    std::vector<std::uint64_t> exceedances() const {
        std::vector<std::uint64_t> out(counts_.size(), 0);
        std::uint64_t acc = 0;
        for (std::size_t i = counts_.size(); i-- > 0;) {
            acc += counts_[i];
            out[i] = acc;
        }
        return out;
    }

private:
    std::vector<double> levels_;
    std::vector<std::uint64_t> counts_;  ///< samples in [levels[i], levels[i+1])
    std::uint64_t total_ = 0;
};

struct TailFit {
    std::vector<double> levels;
    std::vector<double> survival;
    std::vector<std::uint64_t> exceedances;
    std::uint64_t samples = 0;
    double window_lo = 0.0;
    double window_hi = 0.0;
    LogLogFit fit;

    void write_csv(std::ostream& os) const {
        os.precision(17);
        os << "R,survival,exceedances,in_window\n";
        for (std::size_t i = 0; i < levels.size(); ++i)
            os << levels[i] << "," << survival[i] << "," << exceedances[i] << ","
               << (levels[i] >= window_lo && levels[i] <= window_hi && survival[i] > 0 ? 1 : 0) << "\n";
    }
};

/// Fits log P(X >= R) against log R over the levels with at least
/// `min_exceedances` samples above them and R >= floor.
inline TailFit tail_fit(const SurvivalCounter& counter, double floor, std::uint64_t min_exceedances = 50) {
    TailFit tf;
    tf.levels = counter.levels();
    tf.exceedances = counter.exceedances();
    tf.samples = counter.total();
    if (tf.samples == 0) throw InsufficientData("tail fit: no samples");
    tf.survival.resize(tf.levels.size());
    std::vector<double> x, y;
    for (std::size_t i = 0; i < tf.levels.size(); ++i) {
        tf.survival[i] = static_cast<double>(tf.exceedances[i]) / static_cast<double>(tf.samples);
        if (i > 0 && tf.survival[i] > tf.survival[i - 1])
            throw Error("tail fit: survival increased along the level grid");
        if (tf.levels[i] >= floor && tf.exceedances[i] >= min_exceedances) {
            x.push_back(tf.levels[i]);
            y.push_back(tf.survival[i]);
        }
    }
    if (x.size() < 3)
        throw InsufficientData("tail fit: fewer than 3 levels with " + std::to_string(min_exceedances) +
                               " exceedances");
    tf.window_lo = x.front();
    tf.window_hi = x.back();
    tf.fit = fit_loglog(x, y);
    return tf;
}

/// Survival of stationary samples of |z| on the level grid, fitted over
/// levels R >= 4 r_low with at least 50 exceedances.
inline TailFit tail_survival(std::span<const double> samples, const std::vector<double>& levels, double r_low) {
    SurvivalCounter c(levels);
    for (double s : samples) c.add(s);
    return tail_fit(c, 4.0 * r_low);
}

enum class MomentVerdict { Converged, Diverging, Inconclusive };

inline const char* to_string(MomentVerdict v) {
    switch (v) {
    case MomentVerdict::Converged: return "Converged";
    case MomentVerdict::Diverging: return "Diverging";
    case MomentVerdict::Inconclusive: return "Inconclusive";
    }
    return "?";
}

struct MomentSeries {
    double gamma = 0.0;
    std::vector<std::uint64_t> counts;  ///< sample counts, doubling
    std::vector<double> means;          ///< running mean of |z|^gamma at each count
    MomentVerdict verdict = MomentVerdict::Inconclusive;
};

/// Streaming running mean of x^gamma recorded at counts first, 2 first, 4 first, ...
class MomentAccumulator {
public:
    MomentAccumulator(double gamma, std::uint64_t first = 1000) : gamma_(gamma), next_(first) {
        if (!(gamma > 0.0)) throw DomainError("empirical_moment: gamma must be positive");
        if (first == 0) throw DomainError("empirical_moment: first checkpoint must be positive");
    }

    void add(double x) {
        sum_ += std::pow(x, gamma_);
        if (++count_ == next_) {
            series_.counts.push_back(count_);
            series_.means.push_back(sum_ / static_cast<double>(count_));
            next_ *= 2;
        }
    }

    /// Series with the verdict: Converged when each of the last three
    /// doublings moves the mean by less than 10%; Diverging when each of them
    /// raises it by more than 25%; Inconclusive otherwise or with fewer than
    /// four checkpoints.
    MomentSeries finish() const {
        MomentSeries s = series_;
        s.gamma = gamma_;
        s.verdict = classify_series(s.means);
        return s;
    }

    static MomentVerdict classify_series(const std::vector<double>& m) {
        if (m.size() < 4) return MomentVerdict::Inconclusive;
        bool converged = true, diverging = true;
        for (std::size_t i = m.size() - 3; i < m.size(); ++i) {
            const double ratio = m[i] / m[i - 1];
            converged = converged && std::abs(ratio - 1.0) < 0.10;
            diverging = diverging && ratio > 1.25;
        }
        if (converged) return MomentVerdict::Converged;
        if (diverging) return MomentVerdict::Diverging;
        return MomentVerdict::Inconclusive;
    }

private:
    double gamma_;
    std::uint64_t next_;
    std::uint64_t count_ = 0;
    double sum_ = 0.0;
    MomentSeries series_;
};

inline MomentSeries empirical_moment(std::span<const double> samples, double gamma, std::uint64_t first = 1000) {
    MomentAccumulator acc(gamma, first);
    for (double s : samples) acc.add(s);
    return acc.finish();
}

/// Mean and standard error from contiguous batch means.
struct BatchMeans {
    double mean = 0.0;
    double std_error = 0.0;
};

inline BatchMeans batch_means(std::span<const double> x, std::size_t batches = 20) {
    if (batches < 2 || x.size() < batches) throw InsufficientData("batch_means: too few samples");
    const std::size_t len = x.size() / batches;
    std::vector<double> means(batches);
    for (std::size_t b = 0; b < batches; ++b)
        means[b] = std::accumulate(x.begin() + b * len, x.begin() + (b + 1) * len, 0.0) / len;
    const double mu = std::accumulate(means.begin(), means.end(), 0.0) / batches;
    double ss = 0.0;
    for (double m : means) ss += (m - mu) * (m - mu);
    return {mu, std::sqrt(ss / (batches - 1) / batches)};
}

struct ExpRateFit {
    double rate = 0.0;
    double intercept = 0.0;
    double residual = 0.0;
    double window_lo = 0.0;
    double window_hi = 0.0;
    std::size_t points = 0;
};

/// Exponential decay rate of the empirical survival of exit times on its
/// upper tail: least squares of log P(tau > t) on t over 20 levels from the
/// median to the level with 50 samples above it.
inline ExpRateFit exit_tail_rate(std::span<const double> tau, std::size_t min_samples = 1000) {
    if (tau.size() < min_samples)
        throw InsufficientData("exit_tail_rate: " + std::to_string(tau.size()) + " samples, need " +
                               std::to_string(min_samples));
    std::vector<double> s(tau.begin(), tau.end());
    std::sort(s.begin(), s.end());
    const std::size_t N = s.size();
    const double lo = s[N / 2];
    const double hi = s[N - 50];
    if (!(hi > lo)) throw InsufficientData("exit_tail_rate: degenerate upper tail");
    constexpr int levels = 20;
    std::vector<double> t(levels), ls(levels);
    for (int i = 0; i < levels; ++i) {
        t[i] = lo + (hi - lo) * i / (levels - 1);
        const auto above = static_cast<double>(s.end() - std::upper_bound(s.begin(), s.end(), t[i]));
        ls[i] = std::log(above / N);
    }
    const double mt = std::accumulate(t.begin(), t.end(), 0.0) / levels;
    const double my = std::accumulate(ls.begin(), ls.end(), 0.0) / levels;
    double sxx = 0.0, sxy = 0.0;
    for (int i = 0; i < levels; ++i) {
        sxx += (t[i] - mt) * (t[i] - mt);
        sxy += (t[i] - mt) * (ls[i] - my);
    }
    ExpRateFit f;
    const double slope = sxy / sxx;
    f.rate = -slope;
    f.intercept = my - slope * mt;
    double ss = 0.0;
    for (int i = 0; i < levels; ++i) {
        const double e = ls[i] - (f.intercept + slope * t[i]);
        ss += e * e;
    }
    f.residual = std::sqrt(ss / levels);
    f.window_lo = lo;
    f.window_hi = hi;
    f.points = levels;
    return f;
}

/// Survival of the spike-height parameter K at exit, fitted over levels from
/// the sample median up to the last level with 50 exceedances.
inline TailFit ktau_tail(std::span<const double> k_samples, std::size_t min_samples = 10000, int levels = 30) {
    if (k_samples.size() < min_samples)
        throw InsufficientData("ktau_tail: " + std::to_string(k_samples.size()) + " samples, need " +
                               std::to_string(min_samples));
    std::vector<double> s(k_samples.begin(), k_samples.end());
    std::sort(s.begin(), s.end());
    const double lo = s[s.size() / 2];
    const double hi = s[s.size() - 50];
    if (!(hi > lo)) throw InsufficientData("ktau_tail: degenerate upper tail");
    SurvivalCounter c(log_grid(lo, hi, levels));
    for (double k : s) c.add(k);
    return tail_fit(c, lo);
}

struct KsResult {
    double statistic = 0.0;
    double critical_1pct = 0.0;
    double critical_5pct = 0.0;
    double p_value = 0.0;
    bool rejected_1pct() const { return statistic > critical_1pct; }
    bool rejected_5pct() const { return statistic > critical_5pct; }
};

/// Asymptotic Kolmogorov distribution tail Q(lambda) = 2 sum (-1)^{j-1} e^{-2 j^2 lambda^2}.
inline double kolmogorov_tail(double lambda) {
    if (lambda < 0.2) return 1.0;
    double sum = 0.0;
    for (int j = 1; j <= 100; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        sum += (j % 2 ? 1.0 : -1.0) * term;
        if (term < 1e-16) break;
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// Two-sample Kolmogorov-Smirnov test.
inline KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw InsufficientData("ks_two_sample: empty sample");
    std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const double n = x.size(), m = y.size();
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < x.size() && j < y.size()) {
        const double v = std::min(x[i], y[j]);
        while (i < x.size() && x[i] == v) ++i;
        while (j < y.size() && y[j] == v) ++j;
        d = std::max(d, std::abs(i / n - j / m));
    }
    KsResult r;
    r.statistic = d;
    const double scale = std::sqrt((n + m) / (n * m));
    r.critical_1pct = 1.6276 * scale;
    r.critical_5pct = 1.3581 * scale;
    const double en = std::sqrt(n * m / (n + m));
    r.p_value = kolmogorov_tail((en + 0.12 + 0.11 / en) * d);
    return r;
}

} // namespace noisestab
