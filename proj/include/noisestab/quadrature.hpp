#pragma once

#include <cmath>

#include "errors.hpp"

namespace noisestab {

namespace detail {

template <class F>
double simpson_step(const F& f, double a, double b, double fa, double fm, double fb, double whole,
                    double tol, int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    if (std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
    if (depth <= 0 || !std::isfinite(delta))
        throw QuadratureError("adaptive_simpson: tolerance not reached");
    return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

} // namespace detail

/// Adaptive Simpson quadrature of a smooth integrand on [a, b] to relative
/// tolerance `rel_tol` of a coarse estimate of the integral.
template <class F>
double adaptive_simpson(const F& f, double a, double b, double rel_tol = 1e-10,
                        int max_depth = 40) {
    if (a == b) return 0.0;
    // Coarse 17-point composite estimate fixes the absolute target.
    constexpr int pieces = 16;
    const double h = (b - a) / pieces;
    double coarse = 0.0;
    for (int i = 0; i <= pieces; ++i) {
        const double w = (i == 0 || i == pieces) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        coarse += w * f(a + i * h);
    }
    coarse *= h / 3.0;
    if (!std::isfinite(coarse)) throw QuadratureError("adaptive_simpson: non-finite integrand");
    const double tol = rel_tol * std::max(std::abs(coarse), 1e-300);

    double total = 0.0;
    for (int i = 0; i < pieces; ++i) {
        const double lo = a + i * h, hi = i + 1 == pieces ? b : a + (i + 1) * h;
        const double flo = f(lo), fmid = f(0.5 * (lo + hi)), fhi = f(hi);
        const double whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
        total += detail::simpson_step(f, lo, hi, flo, fmid, fhi, whole, tol / pieces, max_depth);
    }
    return total;
}

} // namespace noisestab
