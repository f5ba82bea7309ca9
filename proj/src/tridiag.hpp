#pragma once

// Internal numerics for the Sturm-Liouville discretization: symmetric
// tridiagonal eigenpairs by Sturm bisection + inverse iteration, and
// natural cubic splines on uniform grids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qsd/rng.hpp"

namespace qsd::detail {

// number of eigenvalues of T strictly below x (LDL^T sign count)
inline int sturm_count(std::span<const double> diag, std::span<const double> off, double x) {
    const std::size_t n = diag.size();
    int count = 0;
    double q = diag[0] - x;
    if (q < 0) ++count;
    for (std::size_t i = 1; i < n; ++i) {
        const double e = off[i - 1];
        double denom = q;
        if (std::abs(denom) < 1e-300) denom = (denom < 0 ? -1e-300 : 1e-300);
        q = diag[i] - x - e * e / denom;
        if (q < 0) ++count;
    }
    return count;
}

// k-th smallest eigenvalue (0-based) by bisection
inline double bisect_eigenvalue(std::span<const double> diag, std::span<const double> off,
                                int k, double lo, double hi) {
    for (int it = 0; it < 200 && hi - lo > 1e-14 * (std::abs(lo) + std::abs(hi)) + 1e-14; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (sturm_count(diag, off, mid) <= k) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

// Solve (T - sigma I) w = b with partial pivoting; overwrites b with w.
// Returns false if the factorization degenerates.
inline bool shifted_solve(std::span<const double> diag, std::span<const double> off,
                          double sigma, std::span<double> b) {
    const std::size_t n = diag.size();
    std::vector<double> d(n), u1(n, 0.0), u2(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i] = diag[i] - sigma;
    for (std::size_t i = 0; i + 1 < n; ++i) u1[i] = off[i];

    // elimination with row swaps; fill-in appears on the second superdiagonal
    for (std::size_t i = 0; i + 1 < n; ++i) {
        double sub = off[i]; // T(i+1, i)
        if (std::abs(sub) > std::abs(d[i])) {
            std::swap(d[i], sub);
            std::swap(u1[i], d[i + 1]);
            if (i + 2 < n) { u2[i] = u1[i + 1]; u1[i + 1] = 0.0; }
            std::swap(b[i], b[i + 1]);
        }
        if (d[i] == 0.0) d[i] = 1e-300;
        const double m = sub / d[i];
        d[i + 1] -= m * u1[i];
        if (i + 2 < n) u1[i + 1] -= m * u2[i];
        b[i + 1] -= m * b[i];
    }
    if (d[n - 1] == 0.0) d[n - 1] = 1e-300;
    // back substitution
    b[n - 1] /= d[n - 1];
    if (n >= 2) b[n - 2] = (b[n - 2] - u1[n - 2] * b[n - 1]) / d[n - 2];
    for (std::size_t ii = n; ii >= 3; --ii) {
        const std::size_t i = ii - 3;
        b[i] = (b[i] - u1[i] * b[i + 1] - u2[i] * b[i + 2]) / d[i];
    }
    return true;
}

// inverse iteration at the computed eigenvalue; returns a unit-2-norm vector
inline std::vector<double> inverse_iteration(std::span<const double> diag,
                                             std::span<const double> off, double lambda,
                                             std::uint64_t tag) {
    const std::size_t n = diag.size();
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = (static_cast<double>(mix64(tag * 1315423911ull + i) >> 11) * 0x1.0p-53) - 0.5;
    for (int iter = 0; iter < 4; ++iter) {
        shifted_solve(diag, off, lambda, w);
        double amax = 0.0;
        for (double v : w) amax = std::max(amax, std::abs(v));
        if (!(amax > 0.0) || !std::isfinite(amax))
            throw std::runtime_error("inverse iteration failed to converge");
        for (double& v : w) v /= amax;
        double scale = 0.0;
        for (double v : w) scale += v * v;
        scale = std::sqrt(scale);
        for (double& v : w) v /= scale;
    }
    // residual check against non-convergence
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double t = (diag[i] - lambda) * w[i];
        if (i > 0) t += off[i - 1] * w[i - 1];
        if (i + 1 < n) t += off[i] * w[i + 1];
        res += t * t;
    }
    const double tol = 1e-6 * (std::abs(lambda) + 1.0);
    if (std::sqrt(res) > tol) throw std::runtime_error("eigensolve residual too large");
    return w;
}

// Natural cubic spline on the uniform grid x_j = j*dx, j = 0..n-1 (n >= 3).
// Computes second derivatives in-place style; evaluation helpers below.
inline std::vector<double> spline_second_derivs(std::span<const double> y, double dx) {
    const std::size_t n = y.size();
    std::vector<double> d2(n, 0.0);
    if (n < 3) return d2;
    std::vector<double> c(n, 0.0), rhs(n, 0.0);
    // interior equations: (1/6)d2[j-1] + (2/3)d2[j] + (1/6)d2[j+1] = (y[j+1]-2y[j]+y[j-1])/dx^2
    std::vector<double> diag(n - 2, 2.0 / 3.0), sub(n - 2, 1.0 / 6.0);
    for (std::size_t j = 1; j + 1 < n; ++j)
        rhs[j - 1] = (y[j + 1] - 2.0 * y[j] + y[j - 1]) / (dx * dx);
    // Thomas (diagonally dominant)
    for (std::size_t j = 1; j < n - 2; ++j) {
        const double m = sub[j] / diag[j - 1];
        diag[j] -= m * sub[j - 1];
        rhs[j] -= m * rhs[j - 1];
    }
    if (n >= 3) {
        d2[n - 2] = rhs[n - 3] / diag[n - 3];
        for (std::size_t jj = n - 3; jj >= 1; --jj)
            d2[jj] = (rhs[jj - 1] - sub[jj - 1] * d2[jj + 1]) / diag[jj - 1];
    }
    return d2;
}

inline double spline_eval(std::span<const double> y, std::span<const double> d2, double dx,
                          double x) {
    const std::size_t n = y.size();
    double u = x / dx;
    std::size_t j = (u <= 0.0) ? 0 : static_cast<std::size_t>(u);
    if (j >= n - 1) j = n - 2;
    const double a = (static_cast<double>(j + 1) - u);
    const double b = (u - static_cast<double>(j));
    return a * y[j] + b * y[j + 1] +
           ((a * a * a - a) * d2[j] + (b * b * b - b) * d2[j + 1]) * dx * dx / 6.0;
}

inline double spline_deriv(std::span<const double> y, std::span<const double> d2, double dx,
                           double x) {
    const std::size_t n = y.size();
    double u = x / dx;
    std::size_t j = (u <= 0.0) ? 0 : static_cast<std::size_t>(u);
    if (j >= n - 1) j = n - 2;
    const double a = (static_cast<double>(j + 1) - u);
    const double b = (u - static_cast<double>(j));
    return (y[j + 1] - y[j]) / dx +
           (-(3.0 * a * a - 1.0) * d2[j] + (3.0 * b * b - 1.0) * d2[j + 1]) * dx / 6.0;
}

} // namespace qsd::detail
