#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "errors.hpp"

namespace noisestab {

/// Tridiagonal system with sub-diagonal `lower` (lower[0] unused), diagonal
/// `diag` and super-diagonal `upper` (upper[n-1] unused).
struct Tridiagonal {
    std::vector<double> lower;
    std::vector<double> diag;
    std::vector<double> upper;

    explicit Tridiagonal(std::size_t n = 0) : lower(n, 0.0), diag(n, 0.0), upper(n, 0.0) {}
    std::size_t size() const { return diag.size(); }
};

/// Gaussian elimination with partial pivoting, same scheme as LAPACK dgtsv.
/// The systems built here lose diagonal dominance where advection beats
/// diffusion on a cell, so plain Thomas elimination is not used.
class TridiagonalLU {
public:
    explicit TridiagonalLU(const Tridiagonal& m) { factor(m); }

    std::vector<double> solve(std::span<const double> rhs) const {
        const std::size_t n = d_.size();
        std::vector<double> x(rhs.begin(), rhs.end());
        for (std::size_t i = 0; i + 1 < n; ++i) {
            if (swapped_[i]) std::swap(x[i], x[i + 1]);
            x[i + 1] -= l_[i] * x[i];
        }
        x[n - 1] /= d_[n - 1];
        if (n >= 2) x[n - 2] = (x[n - 2] - du_[n - 2] * x[n - 1]) / d_[n - 2];
        for (std::size_t k = n >= 2 ? n - 2 : 0; k-- > 0;)
            x[k] = (x[k] - du_[k] * x[k + 1] - du2_[k] * x[k + 2]) / d_[k];
        return x;
    }

private:
    void factor(const Tridiagonal& m) {
        const std::size_t n = m.size();
        if (n == 0) throw SolveError("tridiagonal: empty system");
        d_ = m.diag;
        du_.assign(n, 0.0);
        for (std::size_t i = 0; i + 1 < n; ++i) du_[i] = m.upper[i];
        du2_.assign(n, 0.0);
        l_.assign(n, 0.0);
        swapped_.assign(n, false);
        std::vector<double> dl(n, 0.0);
        for (std::size_t i = 0; i + 1 < n; ++i) dl[i] = m.lower[i + 1];

        for (std::size_t i = 0; i + 1 < n; ++i) {
            if (std::abs(d_[i]) >= std::abs(dl[i])) {
                if (d_[i] == 0.0) throw SolveError("tridiagonal: singular matrix");
                const double f = dl[i] / d_[i];
                l_[i] = f;
                d_[i + 1] -= f * du_[i];
                du2_[i] = 0.0;
            } else {
                const double f = d_[i] / dl[i];
                d_[i] = dl[i];
                l_[i] = f;
                const double tmp = du_[i];
                du_[i] = d_[i + 1];
                d_[i + 1] = tmp - f * d_[i + 1];
                if (i + 2 < n) {
                    du2_[i] = du_[i + 1];
                    du_[i + 1] = -f * du2_[i];
                }
                swapped_[i] = true;
            }
        }
        for (double v : d_)
            if (v == 0.0 || !std::isfinite(v)) throw SolveError("tridiagonal: singular matrix");
    }

    std::vector<double> d_, du_, du2_, l_;
    std::vector<bool> swapped_;
};

inline std::vector<double> solve_tridiagonal(const Tridiagonal& m, std::span<const double> rhs) {
    return TridiagonalLU(m).solve(rhs);
}

} // namespace noisestab
