#pragma once

// The planar SDE dz = [z^{n+1} + F(z, conj z)] dt + sigma dB in polar form:
// system description, generators, asymptotic operators and the radial
// partition of the far field.

#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <utility>

#include "errors.hpp"

namespace noisestab {

using complex = std::complex<double>;

inline constexpr double pi = std::numbers::pi;

/// Exponent pair (j, k) of the monomial z^j conj(z)^k.
struct Monomial {
    int j = 0;
    int k = 0;
    friend auto operator<=>(const Monomial&, const Monomial&) = default;
};

/// Product without the NaN/infinity recovery of operator*, which dominates
/// the cost of drift evaluation.
inline complex cmul(complex a, complex b) {
    return {a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real()};
}

inline complex ipow(complex z, int e) {
    complex out{1.0, 0.0};
    for (int i = 0; i < e; ++i) out = cmul(out, z);
    return out;
}

/// |z| without the overflow guard of std::abs; exact enough for |z| < 1e150.
inline double modulus(complex z) { return std::sqrt(z.real() * z.real() + z.imag() * z.imag()); }

/// The drift z^{n+1} + F(z, conj z) with F of total degree at most n, plus
/// the additive noise intensity.  The leading coefficient is normalized to 1.
class SystemSpec {
public:
    using CoeffMap = std::map<Monomial, complex>;

    SystemSpec(int n, double sigma, CoeffMap coeffs = {})
        : n_(n), sigma_(sigma), coeffs_(std::move(coeffs)) {
        if (n_ < 1) throw DomainError("SystemSpec: n must be >= 1");
        if (!std::isfinite(sigma_) || sigma_ < 0.0)
            throw DomainError("SystemSpec: sigma must be finite and >= 0");
        bool constant = true;
        int max_degree = 0;
        for (auto it = coeffs_.begin(); it != coeffs_.end();) {
            const auto [m, c] = *it;
            if (m.j < 0 || m.k < 0) throw DomainError("SystemSpec: negative monomial exponent");
            if (m.j + m.k > n_)
                throw DomainError("SystemSpec: monomial z^" + std::to_string(m.j) + " zbar^" +
                                  std::to_string(m.k) + " exceeds degree n");
            if (!std::isfinite(c.real()) || !std::isfinite(c.imag()))
                throw DomainError("SystemSpec: non-finite coefficient");
            if (c == complex{}) {
                it = coeffs_.erase(it);
                continue;
            }
            if (m.j + m.k > 0) constant = false;
            max_degree = std::max(max_degree, m.j + m.k);
            ++it;
        }
        lower_order_ok_ = constant || max_degree <= n_ / 2 - 1;
    }

    static SystemSpec monomial(int n, double sigma) { return SystemSpec(n, sigma); }

    int n() const { return n_; }
    double sigma() const { return sigma_; }
    const CoeffMap& coeffs() const { return coeffs_; }
    bool is_monomial() const { return coeffs_.empty(); }

    /// True when F is constant or every monomial has degree <= floor(n/2) - 1,
    /// the regime in which the far-field construction ignores F.
    bool lower_order_negligible() const { return lower_order_ok_; }

    complex lower_order(complex z) const {
        complex acc{};
        const complex zb = std::conj(z);
        for (const auto& [m, c] : coeffs_) acc += cmul(c, cmul(ipow(z, m.j), ipow(zb, m.k)));
        return acc;
    }

    complex drift(complex z) const { return ipow(z, n_ + 1) + lower_order(z); }

    SystemSpec with_sigma(double sigma) const { return SystemSpec(n_, sigma, coeffs_); }

    friend bool operator==(const SystemSpec&, const SystemSpec&) = default;

private:
    int n_;
    double sigma_;
    CoeffMap coeffs_;
    bool lower_order_ok_ = true;
};

struct PolarPoint {
    double r = 0.0;
    double theta = 0.0;
};

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double theta) {
    double t = std::remainder(theta, 2.0 * pi);
    if (t <= -pi) t += 2.0 * pi;
    return t;
}

inline PolarPoint to_polar(complex z) {
    const double r = std::abs(z);
    if (r == 0.0) return {0.0, 0.0};
    double theta = std::atan2(z.imag(), z.real());
    if (theta <= -pi) theta = pi;
    return {r, theta};
}

inline complex to_cartesian(PolarPoint p) { return std::polar(p.r, p.theta); }

struct PolarDrift {
    double dr = 0.0;
    double dtheta = 0.0;
};

/// Deterministic drift of (r, theta): dr = Re[b e^{-i theta}], dtheta = Im[b e^{-i theta}] / r.
inline PolarDrift polar_drift(const SystemSpec& spec, PolarPoint p) {
    if (!(p.r > 0.0)) throw DomainError("polar_drift: r must be positive");
    const complex rot = cmul(spec.drift(to_cartesian(p)), std::polar(1.0, -p.theta));
    return {rot.real(), rot.imag() / p.r};
}

/// Value and partial derivatives of a scalar field in polar coordinates at one point.
struct Jet {
    double value = 0.0;
    double dr = 0.0;
    double dtheta = 0.0;
    double drr = 0.0;
    double dthetatheta = 0.0;
};

enum class Clock { Plain, TimeChanged };

/// Generator of the diffusion applied to a field given by its jet.
///
/// The Laplacian is written in full, (sigma^2/2)(f_rr + f_r / r + f_thth / r^2);
/// the f_r / r part is the Ito correction of the radial coordinate and is
/// part of the lower-order radial coefficient.  With Clock::TimeChanged the
/// result is divided by r^n.
inline double apply_generator(const SystemSpec& spec, const Jet& f, PolarPoint p,
                              Clock clock = Clock::Plain) {
    if (!(p.r > 0.0)) throw DomainError("apply_generator: r must be positive");
    const auto b = polar_drift(spec, p);
    const double s2 = spec.sigma() * spec.sigma();
    const double out = b.dr * f.dr + b.dtheta * f.dtheta +
                       0.5 * s2 * (f.drr + f.dr / p.r + f.dthetatheta / (p.r * p.r));
    if (clock == Clock::TimeChanged) return out / std::pow(p.r, spec.n());
    return out;
}

/// Dominant-balance simplifications of the time-changed generator.
enum class AsymptoticOp { T1, T2, A };

inline double apply_asymptotic(AsymptoticOp op, const Jet& f, PolarPoint p, const SystemSpec& spec) {
    if (!(p.r > 0.0)) throw DomainError("apply_asymptotic: r must be positive");
    const int n = spec.n();
    switch (op) {
    case AsymptoticOp::T1:
        return p.r * std::cos(n * p.theta) * f.dr + std::sin(n * p.theta) * f.dtheta;
    case AsymptoticOp::T2:
        return p.r * f.dr + n * p.theta * f.dtheta;
    case AsymptoticOp::A: {
        const double s2 = spec.sigma() * spec.sigma();
        return p.r * f.dr + n * p.theta * f.dtheta +
               0.5 * s2 / std::pow(p.r, n + 2) * f.dthetatheta;
    }
    }
    return 0.0;
}

/// Rescaled angle eta = theta r^{(n+2)/2} used near the explosive ray.
inline double eta_of(PolarPoint p, int n) { return p.theta * std::pow(p.r, 0.5 * (n + 2)); }

/// Angles and radius that define S0..S3 in the principal wedge |theta| <= pi/n.
struct PartitionParams {
    double theta0 = 0.0;
    double theta1 = 0.0;
    double eta_star = 0.0;
    double r_star = 0.0;

    /// Throws DomainError unless the parameters describe a good partition for degree n.
    void validate(int n) const {
        if (!(theta0 > pi / (2.0 * n) && theta0 < pi / n))
            throw DomainError("PartitionParams: theta0 must lie in (pi/(2n), pi/n)");
        if (!(theta1 > 0.0 && theta1 < theta0))
            throw DomainError("PartitionParams: theta1 must lie in (0, theta0)");
        if (!(eta_star > 0.0)) throw DomainError("PartitionParams: eta_star must be positive");
        if (!(r_star > 0.0)) throw DomainError("PartitionParams: r_star must be positive");
        if (!(eta_star * std::pow(r_star, -0.5 * (n + 2)) < theta1))
            throw DomainError("PartitionParams: r_star too small, S3 would reach past theta1");
    }
};

enum class RegionKind { Ball = 0, S0 = 1, S1 = 2, S2 = 3, S3 = 4 };

inline const char* to_string(RegionKind k) {
    switch (k) {
    case RegionKind::Ball: return "Ball";
    case RegionKind::S0: return "S0";
    case RegionKind::S1: return "S1";
    case RegionKind::S2: return "S2";
    case RegionKind::S3: return "S3";
    }
    return "?";
}

struct RegionId {
    RegionKind kind = RegionKind::Ball;
    int wedge_index = 0;
    friend bool operator==(const RegionId&, const RegionId&) = default;
};

/// Angle measured inside the wedge that contains theta, together with the wedge index k
/// such that theta = principal + 2 pi k / n.  |principal| <= pi/n.
struct WedgeAngle {
    double principal = 0.0;
    int wedge_index = 0;
};

inline WedgeAngle to_principal_wedge(double theta, int n) {
    const double width = 2.0 * pi / n;
    const double k = std::round(theta / width);
    double principal = theta - k * width;
    int idx = static_cast<int>(k) % n;
    if (idx < 0) idx += n;
    return {principal, idx};
}

/// Region label of a point.  Ties on an interface go to the smaller kind
/// (S0 < S1 < S2 < S3).
inline RegionId classify(const PartitionParams& params, PolarPoint p, int n) {
    const auto w = to_principal_wedge(p.theta, n);
    if (p.r < params.r_star) return {RegionKind::Ball, w.wedge_index};
    const double a = std::abs(w.principal);
    if (a >= params.theta0) return {RegionKind::S0, w.wedge_index};
    if (a >= params.theta1) return {RegionKind::S1, w.wedge_index};
    if (a * std::pow(p.r, 0.5 * (n + 2)) >= params.eta_star) return {RegionKind::S2, w.wedge_index};
    return {RegionKind::S3, w.wedge_index};
}

/// Maximal radius K of the deterministic monomial orbit through p:
/// r = K |sin(n theta)|^{1/n}.
inline double orbit_K(PolarPoint p, int n) {
    const double a = std::abs(p.theta);
    if (a == 0.0 || a >= pi / n) throw DomainError("orbit_K: need 0 < |theta| < pi/n");
    return p.r / std::pow(std::abs(std::sin(n * p.theta)), 1.0 / n);
}

/// Blow-up time of r' = r^{n+1} from r0 along an explosive ray.
inline double blowup_time_monomial(double r0, int n) { return 1.0 / (n * std::pow(r0, n)); }

} // namespace noisestab
