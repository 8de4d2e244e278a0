#pragma once

// Piecewise Lyapunov function for the noise-stabilized system: local pieces
// psi0..psi3 on the regions S0..S3 of the principal wedge, their natural
// extension Psi with a radial cutoff, interface flux jumps, and a numerical
// certificate of the drift inequality  L Psi <= -m Phi + b  on an annulus.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"
#include "exitmoments.hpp"
#include "model.hpp"
#include "quadrature.hpp"

namespace noisestab {

/// Optional replacements for the values derive_params would choose.
struct ParamOverrides {
    std::optional<double> q;
    std::optional<double> theta0;
    std::optional<double> theta1;
    std::optional<double> eta_star;
    std::optional<double> r_star;
    std::optional<double> h1;
    std::optional<double> h2;
    std::optional<double> h3;
    std::optional<double> delta;
};

struct LyapunovParams {
    int n = 1;
    double gamma = 0.0;
    double p = 0.0;
    double q = 0.0;
    double p2 = 0.0;
    double p3 = 0.0;
    double delta = 0.0;
    double h1 = 0.0;
    double h2 = 0.0;
    double h3 = 0.0;
    PartitionParams partition;

    /// Upper bound on h1 that keeps the S0/S1 flux jump negative.
    double h1_cap() const {
        return p * std::pow(partition.theta0, q) * std::abs(std::cos(n * partition.theta0));
    }

    /// Every structural invariant that fails, as readable messages.
    std::vector<std::string> invariant_violations() const {
        std::vector<std::string> out;
        const double cap = ou_rate(n);
        if (!(p > 0.0 && p < n)) out.emplace_back("p must lie in (0, n)");
        if (!(q > p / n && q < 1.0)) out.emplace_back("q must lie in (p/n, 1)");
        if (std::abs(p2 - p * (3.0 * n + 2.0) / (2.0 * n)) > 1e-12 * (1.0 + p2))
            out.emplace_back("p2 must equal p(3n+2)/(2n)");
        if (std::abs(p3 - (p + q * (n + 2) / 2.0)) > 1e-12 * (1.0 + p3))
            out.emplace_back("p3 must equal p + q(n+2)/2");
        if (!(p2 < p3 && p3 < cap)) out.emplace_back("need p2 < p3 < (3/2)n + 1");
        if (!(h1 > 0.0 && h1 < h1_cap())) out.emplace_back("h1 must lie in (0, p theta0^q |cos(n theta0)|)");
        if (!(h2 > 0.0 && h2 < h1)) out.emplace_back("h2 must lie in (0, h1)");
        if (!(h3 > 0.0)) out.emplace_back("h3 must be positive");
        if (!(delta > 0.0 && delta <= n / p3)) out.emplace_back("delta must lie in (0, n/p3]");
        try {
            partition.validate(n);
        } catch (const DomainError& e) {
            out.emplace_back(e.what());
        }
        return out;
    }

    void validate() const {
        const auto v = invariant_violations();
        if (!v.empty()) throw DomainError("LyapunovParams: " + v.front());
    }

    void write(std::ostream& os) const {
        os.precision(17);
        os << "n=" << n << "\ngamma=" << gamma << "\np=" << p << "\nq=" << q << "\np2=" << p2
           << "\np3=" << p3 << "\ndelta=" << delta << "\nh1=" << h1 << "\nh2=" << h2
           << "\nh3=" << h3 << "\ntheta0=" << partition.theta0 << "\ntheta1=" << partition.theta1
           << "\neta_star=" << partition.eta_star << "\nr_star=" << partition.r_star << "\n";
    }
};

/// Smallest radius with eta* r^{-(n+2)/2} < theta1, doubled once for room.
inline double minimal_r_star(int n, double theta1, double eta_star) {
    return 2.0 * std::pow(eta_star / theta1, 2.0 / (n + 2));
}

/// Closed-form part of the parameter choice: exponents, h1, h2, delta, and
/// the starting point of the search for theta1, eta*, h3 and r*.
inline LyapunovParams base_params(int n, double gamma, const ParamOverrides& o = {}) {
    if (n < 1) throw DomainError("base_params: n must be >= 1");
    if (!(gamma > n && gamma < 2.0 * n)) throw DomainError("base_params: gamma must lie in (n, 2n)");
    LyapunovParams lp;
    lp.n = n;
    lp.gamma = gamma;
    lp.p = gamma - n;
    lp.q = o.q.value_or(0.5 * (lp.p / n + 1.0));
    lp.p2 = lp.p * (3.0 * n + 2.0) / (2.0 * n);
    lp.p3 = lp.p + lp.q * (n + 2) / 2.0;
    lp.partition.theta0 = o.theta0.value_or(0.75 * pi / n);
    lp.h1 = o.h1.value_or(0.5 * lp.h1_cap());
    lp.h2 = o.h2.value_or(0.5 * lp.h1);
    lp.h3 = o.h3.value_or(lp.h2);
    lp.delta = o.delta.value_or(n / (2.0 * lp.p3));
    lp.partition.theta1 = o.theta1.value_or(pi / (4.0 * n));
    lp.partition.eta_star = o.eta_star.value_or(8.0);
    lp.partition.r_star =
        o.r_star.value_or(minimal_r_star(n, lp.partition.theta1, lp.partition.eta_star));
    return lp;
}

/// One local piece evaluated at a point.
struct PsiValue {
    double value = 0.0;
    RegionId region;
    std::optional<Jet> jet;  ///< partials, present when requested at interior points
};

/// Exit-moment tables G_{p2} and G_{p3} on [-eta*, eta*] used by psi3.
struct ExitTables {
    ExitMomentTable g_p2;
    ExitMomentTable g_p3;

    static std::shared_ptr<const ExitTables> build(const LyapunovParams& lp, double sigma,
                                                   int grid_size = 0) {
        const double es = lp.partition.eta_star;
        if (grid_size <= 0) grid_size = recommended_grid_size(es, sigma, lp.n);
        auto t = std::make_shared<ExitTables>();
        t->g_p2 = solve_bvp(lp.p2, 0.0, es, sigma, lp.n, grid_size);
        t->g_p3 = solve_bvp(lp.p3, 0.0, es, sigma, lp.n, grid_size);
        return t;
    }
};

/// Quintic smoothstep in log2(r / r*): 0 for r <= r*, 1 for r >= 2 r*.
struct RadialCutoff {
    double r_star = 1.0;

    struct Value {
        double v, d1, d2;
    };

    Value operator()(double r) const {
        const double ln2 = std::log(2.0);
        const double u = std::log(r / r_star) / ln2;
        if (u <= 0.0) return {0.0, 0.0, 0.0};
        if (u >= 1.0) return {1.0, 0.0, 0.0};
        const double s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
        const double su = 30.0 * u * u * (1.0 - u) * (1.0 - u);
        const double suu = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
        return {s, su / (r * ln2), (suu / (ln2 * ln2) - su / ln2) / (r * r)};
    }
};

/// The piecewise Lyapunov function.  Pieces are even in theta and are
/// evaluated after rotating the angle into the principal wedge.
class LyapunovFunction {
public:
    LyapunovFunction(const LyapunovParams& lp, double sigma,
                     std::shared_ptr<const ExitTables> tables = nullptr)
        : lp_(lp), sigma_(sigma), tables_(std::move(tables)) {
        if (!(sigma_ > 0.0)) throw DomainError("LyapunovFunction: sigma must be positive");
        lp_.partition.validate(lp_.n);
        if (!(lp_.h1 > 0.0 && lp_.h2 > 0.0 && lp_.h3 > 0.0))
            throw DomainError("LyapunovFunction: h1, h2, h3 must be positive");
        if (!(lp_.q > lp_.p / lp_.n && lp_.q < 1.0))
            throw DomainError("LyapunovFunction: q must lie in (p/n, 1)");
        if (!tables_) tables_ = ExitTables::build(lp_, sigma_);
        if (tables_->g_p2.eta_star != lp_.partition.eta_star ||
            tables_->g_p3.eta_star != lp_.partition.eta_star)
            throw TableError("LyapunovFunction: tables do not span [-eta*, eta*]");

        const double th1 = lp_.partition.theta1;
        const double pn = lp_.p / lp_.n;
        const double qnp = lp_.q * lp_.n - lp_.p;
        d_ = lp_.h2 / qnp;
        c_ = std::pow(th1, pn) * g1(th1) - lp_.h2 * std::pow(th1, pn - lp_.q) / qnp;
        c3_ = lp_.h3 / lp_.p3;
        c1_ = c3_ + d_ / std::pow(lp_.partition.eta_star, lp_.q);
        c2_ = c_ / std::pow(lp_.partition.eta_star, pn);
    }

    const LyapunovParams& params() const { return lp_; }
    double sigma() const { return sigma_; }
    const ExitTables& tables() const { return *tables_; }
    std::shared_ptr<const ExitTables> shared_tables() const { return tables_; }

    /// Coefficients of psi2 = C r^p |theta|^{-p/n} + D r^p |theta|^{-q}.
    double C() const { return c_; }
    double D() const { return d_; }
    /// Coefficients of psi3 = c1 r^p3 G_p3 + c2 r^p2 G_p2 - c3 r^p3.
    double c1() const { return c1_; }
    double c2() const { return c2_; }
    double c3() const { return c3_; }

    double half_width() const { return 0.5 * (lp_.n + 2); }

    /// Closed-region membership in the principal wedge (radius only enters
    /// through eta for S2 and S3).
    bool in_closed(RegionKind kind, PolarPoint p) const {
        const auto& pp = lp_.partition;
        const double a = std::abs(to_principal_wedge(p.theta, lp_.n).principal);
        const double slack = 1e-12;
        switch (kind) {
        case RegionKind::Ball: return p.r < pp.r_star;
        case RegionKind::S0: return a >= pp.theta0 * (1 - slack);
        case RegionKind::S1: return a >= pp.theta1 * (1 - slack) && a <= pp.theta0 * (1 + slack);
        case RegionKind::S2:
            return a <= pp.theta1 * (1 + slack) &&
                   a * std::pow(p.r, half_width()) >= pp.eta_star * (1 - slack);
        case RegionKind::S3: return a * std::pow(p.r, half_width()) <= pp.eta_star * (1 + slack);
        }
        return false;
    }

    PsiValue psi0(PolarPoint p, bool with_jet = true) const {
        const auto w = require(RegionKind::S0, p, "psi0");
        const double P = lp_.p;
        PsiValue out{std::pow(p.r, P), {RegionKind::S0, w.wedge_index}, std::nullopt};
        if (with_jet)
            out.jet = Jet{out.value, P * std::pow(p.r, P - 1), 0.0, P * (P - 1) * std::pow(p.r, P - 2), 0.0};
        return out;
    }

    PsiValue psi1(PolarPoint p, bool with_jet = true) const {
        const auto w = require(RegionKind::S1, p, "psi1");
        const double a = std::min(std::abs(w.principal), lp_.partition.theta0);
        const double s = w.principal < 0 ? -1.0 : 1.0;
        const double P = lp_.p;
        const double rp = std::pow(p.r, P);
        const double g = g1(a);
        PsiValue out{rp * g, {RegionKind::S1, w.wedge_index}, std::nullopt};
        if (with_jet) {
            const int n = lp_.n;
            const double sn = std::sin(n * a), cn = std::cos(n * a);
            const double hq = lp_.h1 * std::pow(a, -lp_.q);
            const double dg = -(P * cn * g + hq) / sn;
            const double ddg = P * n * g - ((P + n) * cn * dg - lp_.q * hq / a) / sn;
            out.jet = Jet{out.value, P * rp / p.r * g, s * rp * dg, P * (P - 1) * rp / (p.r * p.r) * g,
                          rp * ddg};
        }
        return out;
    }

    PsiValue psi2(PolarPoint p, bool with_jet = true) const {
        const auto w = require(RegionKind::S2, p, "psi2");
        const double a = std::abs(w.principal);
        if (a == 0.0) throw DomainError("psi2: theta must be nonzero");
        const double s = w.principal < 0 ? -1.0 : 1.0;
        const double P = lp_.p, pn = P / lp_.n, q = lp_.q;
        const double rp = std::pow(p.r, P);
        const double tc = c_ * std::pow(a, -pn), td = d_ * std::pow(a, -q);
        PsiValue out{rp * (tc + td), {RegionKind::S2, w.wedge_index}, std::nullopt};
        if (with_jet) {
            const double dth = -(pn * tc + q * td) / a;
            const double dthth = (pn * (pn + 1) * tc + q * (q + 1) * td) / (a * a);
            out.jet = Jet{out.value, P * out.value / p.r, s * rp * dth,
                          P * (P - 1) * out.value / (p.r * p.r), rp * dthth};
        }
        return out;
    }

    PsiValue psi3(PolarPoint p, bool with_jet = true) const {
        const auto w = require(RegionKind::S3, p, "psi3");
        const double k = half_width();
        const double rk = std::pow(p.r, k);
        const double eta = w.principal * rk;
        if (std::abs(eta) > lp_.partition.eta_star * (1 + 1e-12))
            throw TableError("psi3: |eta| exceeds eta*");
        const auto g3 = tables_->g_p3.evaluate(eta);
        const auto g2 = tables_->g_p2.evaluate(eta);
        const double rp3 = std::pow(p.r, lp_.p3), rp2 = std::pow(p.r, lp_.p2);
        PsiValue out{c1_ * rp3 * g3.g + c2_ * rp2 * g2.g - c3_ * rp3,
                     {RegionKind::S3, w.wedge_index},
                     std::nullopt};
        if (with_jet) {
            Jet j{out.value, 0, 0, 0, 0};
            auto add_term = [&](double coef, double P, double rP, const ExitMomentTable::Sample& g) {
                const double r = p.r;
                const double kg = k * eta * g.dg;
                j.dr += coef * rP / r * (P * g.g + kg);
                j.drr += coef * rP / (r * r) *
                         ((P - 1) * (P * g.g + kg) + P * kg + k * kg + k * k * eta * eta * g.ddg);
                j.dtheta += coef * rP * rk * g.dg;
                j.dthetatheta += coef * rP * rk * rk * g.ddg;
            };
            add_term(c1_, lp_.p3, rp3, g3);
            add_term(c2_, lp_.p2, rp2, g2);
            const ExitMomentTable::Sample unit{1.0, 0.0, 0.0};
            add_term(-c3_, lp_.p3, rp3, unit);
            out.jet = j;
        }
        return out;
    }

    /// The local piece that owns the point (ties to the lower kind), without cutoff.
    PsiValue piece(PolarPoint p, bool with_jet = true) const {
        auto id = classify(lp_.partition, p, lp_.n);
        switch (id.kind) {
        case RegionKind::S0: return psi0(p, with_jet);
        case RegionKind::S1: return psi1(p, with_jet);
        case RegionKind::S2: return psi2(p, with_jet);
        case RegionKind::S3: return psi3(p, with_jet);
        case RegionKind::Ball: break;
        }
        throw RegionError("piece: point lies in the ball");
    }

    /// Natural extension: zero on the ball, cutoff times the owning piece on
    /// region interiors, average of the adjacent pieces on an interface.
    PsiValue psi(PolarPoint p, bool with_jet = true) const {
        const auto w = to_principal_wedge(p.theta, lp_.n);
        if (p.r < lp_.partition.r_star) {
            PsiValue out{0.0, {RegionKind::Ball, w.wedge_index}, std::nullopt};
            if (with_jet) out.jet = Jet{};
            return out;
        }
        const auto cut = RadialCutoff{lp_.partition.r_star}(p.r);
        const auto id = classify(lp_.partition, p, lp_.n);
        if (auto other = interface_partner(p, id.kind)) {
            const PolarPoint q{p.r, w.principal};
            const double v = 0.5 * (value_of(id.kind, q) + value_of(*other, q));
            return {cut.v * v, id, std::nullopt};
        }
        auto local = piece(p, with_jet);
        PsiValue out{cut.v * local.value, id, std::nullopt};
        if (with_jet) {
            const Jet& f = *local.jet;
            out.jet = Jet{out.value, cut.d1 * f.value + cut.v * f.dr, cut.v * f.dtheta,
                          cut.d2 * f.value + 2.0 * cut.d1 * f.dr + cut.v * f.drr, cut.v * f.dthetatheta};
        }
        return out;
    }

    /// Generator applied to Psi at a point off the interfaces.
    double generator(const SystemSpec& spec, PolarPoint p, Clock clock = Clock::Plain) const {
        auto v = psi(p, true);
        if (!v.jet) throw RegionError("generator: point lies on an interface");
        return apply_generator(spec, *v.jet, p, clock);
    }

    /// g(theta) = psi1(1, theta) for 0 < theta <= theta0.
    double g1(double a) const {
        const int n = lp_.n;
        const double pn = lp_.p / n, q = lp_.q, th0 = lp_.partition.theta0;
        const double integral = a >= th0 ? 0.0
                                         : adaptive_simpson(
                                               [&](double x) {
                                                   return std::pow(std::sin(n * x), pn - 1.0) *
                                                          std::pow(x, -q);
                                               },
                                               a, th0, 1e-10);
        return std::pow(std::sin(n * a), -pn) * (std::pow(std::sin(n * th0), pn) + lp_.h1 * integral);
    }

private:
    WedgeAngle require(RegionKind kind, PolarPoint p, const char* who) const {
        if (!(p.r > 0.0)) throw DomainError(std::string(who) + ": r must be positive");
        if (!in_closed(kind, p))
            throw RegionError(std::string(who) + ": point outside " + to_string(kind));
        return to_principal_wedge(p.theta, lp_.n);
    }

    double value_of(RegionKind kind, PolarPoint p) const {
        switch (kind) {
        case RegionKind::S0: return psi0(p, false).value;
        case RegionKind::S1: return psi1(p, false).value;
        case RegionKind::S2: return psi2(p, false).value;
        case RegionKind::S3: return psi3(p, false).value;
        case RegionKind::Ball: break;
        }
        return 0.0;
    }

    /// The other region on an interface the point sits exactly on, if any.
    std::optional<RegionKind> interface_partner(PolarPoint p, RegionKind kind) const {
        const auto& pp = lp_.partition;
        const double a = std::abs(to_principal_wedge(p.theta, lp_.n).principal);
        if (kind == RegionKind::S0 && a == pp.theta0) return RegionKind::S1;
        if (kind == RegionKind::S1 && a == pp.theta1) return RegionKind::S2;
        if (kind == RegionKind::S2 && a * std::pow(p.r, half_width()) == pp.eta_star)
            return RegionKind::S3;
        return std::nullopt;
    }

    LyapunovParams lp_;
    double sigma_;
    std::shared_ptr<const ExitTables> tables_;
    double c_ = 0.0, d_ = 0.0, c1_ = 0.0, c2_ = 0.0, c3_ = 0.0;
};

enum class Interface { Theta0Plus, Theta0Minus, Theta1Plus, Theta1Minus, EtaPlus, EtaMinus, WedgeEdge };

inline const char* to_string(Interface b) {
    switch (b) {
    case Interface::Theta0Plus: return "theta0+";
    case Interface::Theta0Minus: return "theta0-";
    case Interface::Theta1Plus: return "theta1+";
    case Interface::Theta1Minus: return "theta1-";
    case Interface::EtaPlus: return "eta+";
    case Interface::EtaMinus: return "eta-";
    case Interface::WedgeEdge: return "wedge";
    }
    return "?";
}

inline constexpr Interface all_interfaces[] = {Interface::Theta0Plus, Interface::Theta0Minus,
                                               Interface::Theta1Plus, Interface::Theta1Minus,
                                               Interface::EtaPlus,    Interface::EtaMinus,
                                               Interface::WedgeEdge};

/// Jump of the one-sided theta-derivative of Psi across an interface:
/// derivative from the side of larger theta minus the side of smaller theta.
inline std::vector<double> check_flux(const LyapunovFunction& fn, Interface boundary,
                                      const std::vector<double>& r_samples) {
    const auto& lp = fn.params();
    const auto& pp = lp.partition;
    std::vector<double> jumps;
    jumps.reserve(r_samples.size());
    for (double r : r_samples) {
        if (r < pp.r_star) throw DomainError("check_flux: radius below r*");
        const double cut = RadialCutoff{pp.r_star}(r).v;
        const double eta_angle = pp.eta_star * std::pow(r, -fn.half_width());
        auto dth = [&](RegionKind kind, double theta) {
            const PolarPoint pt{r, theta};
            switch (kind) {
            case RegionKind::S0: return fn.psi0(pt).jet->dtheta;
            case RegionKind::S1: return fn.psi1(pt).jet->dtheta;
            case RegionKind::S2: return fn.psi2(pt).jet->dtheta;
            case RegionKind::S3: return fn.psi3(pt).jet->dtheta;
            case RegionKind::Ball: break;
            }
            return 0.0;
        };
        double jump = 0.0;
        switch (boundary) {
        case Interface::Theta0Plus:
            jump = dth(RegionKind::S0, pp.theta0) - dth(RegionKind::S1, pp.theta0);
            break;
        case Interface::Theta0Minus:
            jump = dth(RegionKind::S1, -pp.theta0) - dth(RegionKind::S0, -pp.theta0);
            break;
        case Interface::Theta1Plus:
            jump = dth(RegionKind::S1, pp.theta1) - dth(RegionKind::S2, pp.theta1);
            break;
        case Interface::Theta1Minus:
            jump = dth(RegionKind::S2, -pp.theta1) - dth(RegionKind::S1, -pp.theta1);
            break;
        case Interface::EtaPlus:
            jump = dth(RegionKind::S2, eta_angle) - dth(RegionKind::S3, eta_angle);
            break;
        case Interface::EtaMinus:
            jump = dth(RegionKind::S3, -eta_angle) - dth(RegionKind::S2, -eta_angle);
            break;
        case Interface::WedgeEdge: {
            // Across theta = pi/n the neighbouring wedge starts at -pi/n.
            const double edge = pi / lp.n;
            jump = dth(RegionKind::S0, -edge) - dth(RegionKind::S0, edge);
            break;
        }
        }
        jumps.push_back(cut * jump);
    }
    return jumps;
}

/// Largest flux jump over every interface at the given radii.
inline double max_flux_jump(const LyapunovFunction& fn, const std::vector<double>& r_samples) {
    double worst = -std::numeric_limits<double>::infinity();
    for (auto b : all_interfaces)
        for (double j : check_flux(fn, b, r_samples)) worst = std::max(worst, j);
    return worst;
}

enum class PhiKind { PowerGamma, PsiOnePlusDelta };

inline const char* to_string(PhiKind k) {
    return k == PhiKind::PowerGamma ? "power" : "psidelta";
}

struct GridSpec {
    int n_radii = 200;
    int strata_per_region = 40;  ///< split evenly between theta > 0 and theta < 0
    double r_max_factor = 100.0;
    int fd_every = 100;          ///< finite-difference cross-check on every k-th point
    unsigned workers = 1;
};

inline std::vector<double> log_radii(double r_lo, double r_hi, int count) {
    std::vector<double> out(count);
    for (int i = 0; i < count; ++i)
        out[i] = i + 1 == count ? r_hi
                                : r_lo * std::pow(r_hi / r_lo, static_cast<double>(i) / (count - 1));
    return out;
}

struct Violation {
    double r = 0.0;
    double theta = 0.0;
    double lhs = 0.0;  ///< L Psi
    double rhs = 0.0;  ///< -m Phi + b
};

struct Certificate {
    LyapunovParams params;
    double sigma = 0.0;
    PhiKind phi = PhiKind::PowerGamma;
    double r_min = 0.0;
    double r_max = 0.0;
    double m = 0.0;
    double b = 0.0;
    std::map<RegionKind, double> worst_margin;  ///< min of -L Psi / Phi where the cutoff is 1
    std::vector<Violation> violations;
    std::size_t points = 0;
    std::size_t fd_checked = 0;
    double fd_max_error = 0.0;
    double max_flux_jump = 0.0;
    double envelope_c = 0.0;     ///< min Psi / r^p where the cutoff is 1
    double envelope_d = 0.0;     ///< max Psi / r^{p + n/2 + 1} where the cutoff is 1
    bool envelope_ok = false;

    static constexpr double fd_tolerance = 1e-4;

    bool ok() const {
        return m > 0.0 && violations.empty() && fd_max_error <= fd_tolerance && max_flux_jump <= 0.0 &&
               envelope_ok;
    }

    void write(std::ostream& os) const {
        os.precision(17);
        os << "status=" << (ok() ? "ok" : "failed") << "\n";
        params.write(os);
        os << "sigma=" << sigma << "\nphi=" << to_string(phi) << "\nr_min=" << r_min
           << "\nr_max=" << r_max << "\nm=" << m << "\nb=" << b << "\n";
        for (const auto& [k, v] : worst_margin) os << "worst_margin." << to_string(k) << "=" << v << "\n";
        os << "points=" << points << "\nfd_checked=" << fd_checked << "\nfd_max_error=" << fd_max_error
           << "\nmax_flux_jump=" << max_flux_jump << "\nenvelope_c=" << envelope_c
           << "\nenvelope_d=" << envelope_d << "\nenvelope_ok=" << (envelope_ok ? 1 : 0)
           << "\nviolations=" << violations.size() << "\n";
        if (!violations.empty()) {
            os << "# r,theta,lhs,rhs\n";
            for (const auto& v : violations) os << v.r << "," << v.theta << "," << v.lhs << "," << v.rhs << "\n";
        }
    }
};

namespace detail {

struct GridPoint {
    double r, theta;
    RegionKind kind;
};

/// Stratified angles per region at radius r, principal wedge.
inline void strata_at(const LyapunovFunction& fn, double r, int per_region,
                      std::vector<GridPoint>& out) {
    const auto& pp = fn.params().partition;
    const double edge = pi / fn.params().n;
    const double eta_angle = pp.eta_star * std::pow(r, -fn.half_width());
    const std::pair<double, double> spans[] = {
        {pp.theta0, edge}, {pp.theta1, pp.theta0}, {eta_angle, pp.theta1}, {0.0, eta_angle}};
    const RegionKind kinds[] = {RegionKind::S0, RegionKind::S1, RegionKind::S2, RegionKind::S3};
    const int half = std::max(1, per_region / 2);
    for (int reg = 0; reg < 4; ++reg) {
        const auto [lo, hi] = spans[reg];
        if (!(hi > lo)) continue;
        for (int i = 0; i < half; ++i) {
            const double a = lo + (hi - lo) * (i + 0.5) / half;
            out.push_back({r, a, kinds[reg]});
            out.push_back({r, -a, kinds[reg]});
        }
    }
}

/// Generator of Psi from central differences of Psi values.
inline double generator_fd(const LyapunovFunction& fn, const SystemSpec& spec,
                                              PolarPoint p, double h_theta) {
    auto f = [&](double r, double th) { return fn.psi({r, th}, false).value; };
    const double hr = 1e-4 * p.r;
    const double f0 = f(p.r, p.theta);
    const double frp = f(p.r + hr, p.theta), frm = f(p.r - hr, p.theta);
    const double ftp = f(p.r, p.theta + h_theta), ftm = f(p.r, p.theta - h_theta);
    const Jet j{f0, (frp - frm) / (2 * hr), (ftp - ftm) / (2 * h_theta), (frp - 2 * f0 + frm) / (hr * hr),
                (ftp - 2 * f0 + ftm) / (h_theta * h_theta)};
    return apply_generator(spec, j, p);
}

/// Sum of the magnitudes of the generator's terms, the scale for comparing
/// two evaluations of it.
inline double generator_scale(const SystemSpec& spec, const Jet& j, PolarPoint p) {
    const auto b = polar_drift(spec, p);
    const double s2 = spec.sigma() * spec.sigma();
    return std::abs(b.dr * j.dr) + std::abs(b.dtheta * j.dtheta) +
           0.5 * s2 * (std::abs(j.drr) + std::abs(j.dr) / p.r + std::abs(j.dthetatheta) / (p.r * p.r));
}

} // namespace detail

/// Evaluates L Psi on a log-spaced annulus [r*, r_max_factor r*] with
/// stratified angles and returns the best constants m, b for
/// L Psi <= -m Phi + b there.  m is the infimum of -L Psi / Phi where the
/// cutoff equals 1 (r >= 2 r*); b absorbs the cutoff layer.  Points where the
/// cutoff equals 1 and L Psi >= 0 are violations.
inline Certificate verify_drift(const SystemSpec& spec, const LyapunovFunction& fn,
                                const GridSpec& grid = {}, PhiKind phi = PhiKind::PowerGamma) {
    const auto& lp = fn.params();
    if (spec.n() != lp.n) throw DomainError("verify_drift: degree mismatch");
    if (spec.sigma() != fn.sigma()) throw DomainError("verify_drift: sigma mismatch with tables");
    const auto& pp = lp.partition;
    Certificate cert;
    cert.params = lp;
    cert.sigma = spec.sigma();
    cert.phi = phi;
    cert.r_min = pp.r_star;
    cert.r_max = grid.r_max_factor * pp.r_star;

    const auto radii = log_radii(pp.r_star, cert.r_max, grid.n_radii);
    std::vector<detail::GridPoint> pts;
    for (double r : radii) detail::strata_at(fn, r, grid.strata_per_region, pts);
    if (!spec.is_monomial()) {
        const std::size_t base = pts.size();
        for (int k = 1; k < lp.n; ++k)
            for (std::size_t i = 0; i < base; ++i)
                pts.push_back({pts[i].r, wrap_angle(pts[i].theta + 2 * pi * k / lp.n), pts[i].kind});
    }
    cert.points = pts.size();

    struct Eval {
        double lpsi = 0.0, phi = 0.0, psi = 0.0, fd_err = -1.0;
    };
    std::vector<Eval> evals(pts.size());
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < pts.size(); i += stride) {
            const PolarPoint p{pts[i].r, pts[i].theta};
            const auto v = fn.psi(p, true);
            Eval e;
            e.psi = v.value;
            e.lpsi = apply_generator(spec, *v.jet, p);
            e.phi = phi == PhiKind::PowerGamma ? std::pow(p.r, lp.gamma) : std::pow(v.value, 1.0 + lp.delta);
            if (grid.fd_every > 0 && i % grid.fd_every == 0) {
                const double scale = detail::generator_scale(spec, *v.jet, p);
                if (scale > 0.0) {
                    // Angular step well inside the stratum that holds the point.
                    const double width = pts[i].kind == RegionKind::S3
                                             ? pp.eta_star * std::pow(p.r, -fn.half_width())
                                             : pts[i].kind == RegionKind::S2 ? pp.theta1 : pp.theta0;
                    const double h = 1e-4 * width / grid.strata_per_region;
                    e.fd_err = std::abs(detail::generator_fd(fn, spec, p, h) - e.lpsi) / scale;
                }
            }
            evals[i] = e;
        }
    };
    const unsigned workers = std::max(1u, grid.workers);
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    }

    const double far = 2.0 * pp.r_star;
    double m = std::numeric_limits<double>::infinity();
    double c_env = std::numeric_limits<double>::infinity();
    double d_near = 0.0, d_far = 0.0;
    const double env_exp = lp.p + 0.5 * lp.n + 1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto& e = evals[i];
        if (e.fd_err >= 0.0) {
            ++cert.fd_checked;
            cert.fd_max_error = std::max(cert.fd_max_error, e.fd_err);
        }
        if (pts[i].r < far) continue;
        const double ratio = -e.lpsi / e.phi;
        m = std::min(m, ratio);
        auto [it, fresh] = cert.worst_margin.try_emplace(pts[i].kind, ratio);
        if (!fresh) it->second = std::min(it->second, ratio);
        if (e.lpsi >= 0.0) cert.violations.push_back({pts[i].r, pts[i].theta, e.lpsi, 0.0});
        c_env = std::min(c_env, e.psi / std::pow(pts[i].r, lp.p));
        double& d_slot = pts[i].r <= 10.0 * pp.r_star ? d_near : d_far;
        d_slot = std::max(d_slot, e.psi / std::pow(pts[i].r, env_exp));
    }
    cert.m = std::max(0.0, m);
    double b = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        b = std::max(b, evals[i].lpsi + cert.m * evals[i].phi);
    cert.b = b;
    for (auto& v : cert.violations) v.rhs = -cert.m * std::pow(v.r, lp.gamma) + b;
    std::sort(cert.violations.begin(), cert.violations.end(),
              [](const Violation& x, const Violation& y) {
                  return std::tie(x.r, x.theta) < std::tie(y.r, y.theta);
              });
    cert.envelope_c = c_env;
    cert.envelope_d = std::max(d_near, d_far);
    cert.envelope_ok = c_env > 0.0 && d_far <= d_near * (1.0 + 1e-9);
    cert.max_flux_jump = max_flux_jump(fn, log_radii(pp.r_star, cert.r_max, 25));
    return cert;
}

struct SearchLimits {
    int theta1_halvings = 6;
    int eta_doublings = 5;
    int h3_halvings = 10;
    int r_doublings = 5;
};

struct SearchResult {
    std::optional<LyapunovParams> params;
    std::vector<std::string> trace;
};

/// Deterministic search for theta1, eta*, h3 and r*: theta1 halved from
/// pi/(4n), eta* doubled from 8, h3 halved from h2, r* doubled from
/// 2 (eta*/theta1)^{2/(n+2)}.  A candidate must pass the flux check, then
/// verify_drift with both choices of Phi; the first success wins.
inline SearchResult search_params(const SystemSpec& spec, double gamma, const ParamOverrides& o = {},
                                  const SearchLimits& limits = {}, const GridSpec& grid = {}) {
    SearchResult res;
    const int n = spec.n();
    auto base = base_params(n, gamma, o);
    const auto fixed = base.invariant_violations();
    for (const auto& msg : fixed)
        if (msg.find("partition") == std::string::npos && msg.find("PartitionParams") == std::string::npos)
            throw DomainError("derive_params: " + msg);

    auto steps = [](const std::optional<double>& v, int count) { return v ? 1 : count + 1; };
    double theta1 = base.partition.theta1;
    for (int i1 = 0; i1 < steps(o.theta1, limits.theta1_halvings); ++i1, theta1 *= 0.5) {
        double eta_star = base.partition.eta_star;
        for (int i2 = 0; i2 < steps(o.eta_star, limits.eta_doublings); ++i2, eta_star *= 2.0) {
            LyapunovParams lp = base;
            lp.partition.theta1 = theta1;
            lp.partition.eta_star = eta_star;
            auto tables = ExitTables::build(lp, spec.sigma());
            double h3 = base.h3;
            for (int i3 = 0; i3 < steps(o.h3, limits.h3_halvings); ++i3, h3 *= 0.5) {
                double r_star = o.r_star.value_or(minimal_r_star(n, theta1, eta_star));
                for (int i4 = 0; i4 < steps(o.r_star, limits.r_doublings); ++i4, r_star *= 2.0) {
                    lp.h3 = h3;
                    lp.partition.r_star = r_star;
                    std::ostringstream line;
                    line.precision(6);
                    line << "theta1=" << theta1 << " eta_star=" << eta_star << " h3=" << h3
                         << " r_star=" << r_star << ": ";
                    if (!lp.invariant_violations().empty()) {
                        res.trace.push_back(line.str() + lp.invariant_violations().front());
                        continue;
                    }
                    const LyapunovFunction fn(lp, spec.sigma(), tables);
                    const double flux = max_flux_jump(fn, log_radii(r_star, grid.r_max_factor * r_star, 25));
                    if (flux > 0.0) {
                        line << "flux jump " << flux;
                        res.trace.push_back(line.str());
                        continue;
                    }
                    bool good = true;
                    for (auto phi : {PhiKind::PowerGamma, PhiKind::PsiOnePlusDelta}) {
                        const auto cert = verify_drift(spec, fn, grid, phi);
                        if (!cert.ok()) {
                            line << to_string(phi) << " certificate failed (m=" << cert.m
                                 << ", violations=" << cert.violations.size()
                                 << ", fd=" << cert.fd_max_error << ")";
                            good = false;
                            break;
                        }
                    }
                    if (!good) {
                        res.trace.push_back(line.str());
                        continue;
                    }
                    res.trace.push_back(line.str() + "accepted");
                    res.params = lp;
                    return res;
                }
            }
        }
    }
    return res;
}

/// Admissible parameters for degree n and exponent gamma, or ConvergenceError
/// carrying the search trace.
inline LyapunovParams derive_params(const SystemSpec& spec, double gamma, const ParamOverrides& o = {},
                                    const SearchLimits& limits = {}, const GridSpec& grid = {}) {
    auto res = search_params(spec, gamma, o, limits, grid);
    if (res.params) return *res.params;
    std::string msg = "derive_params: no admissible parameters within search bounds";
    for (const auto& line : res.trace) msg += "\n  " + line;
    throw ConvergenceError(msg);
}

} // namespace noisestab
