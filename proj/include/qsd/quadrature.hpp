#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace qsd {

// 8-point Gauss-Legendre rule on [-1,1]
inline constexpr std::array<double, 8> kGl8Nodes = {
    -0.9602898564975363, -0.7966664774136267, -0.5255324099163290, -0.1834346424956498,
     0.1834346424956498,  0.5255324099163290,  0.7966664774136267,  0.9602898564975363};
inline constexpr std::array<double, 8> kGl8Weights = {
    0.1012285362903763, 0.2223810344533745, 0.3137066458778873, 0.3626837833783620,
    0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};

// Cell edges on [0,L], graded toward both endpoints with the given power.
// power > 1 concentrates cells near the boundary where eigenfunctions vanish.
inline std::vector<double> graded_breakpoints(double length, int cells, double power = 2.0) {
    std::vector<double> edges(static_cast<std::size_t>(cells) + 1);
    const int half = cells / 2;
    for (int j = 0; j <= half; ++j) {
        const double u = static_cast<double>(j) / half;
        edges[static_cast<std::size_t>(j)] = 0.5 * length * std::pow(u, power);
    }
    for (int j = 0; j <= half; ++j) {
        edges[static_cast<std::size_t>(cells - j)] = length - edges[static_cast<std::size_t>(j)];
    }
    edges[static_cast<std::size_t>(cells)] = length;
    return edges;
}

struct QuadResult {
    double value = 0.0;
    double error = 0.0; // Richardson-style estimate from cell halving
};

// Composite GL8 over the given cell edges, with an error estimate obtained
// by comparing against the same rule on halved cells.
template <class F>
QuadResult integrate_cells(F&& f, const std::vector<double>& edges) {
    auto rule = [&](double a, double b) {
        const double mid = 0.5 * (a + b);
        const double hw = 0.5 * (b - a);
        double s = 0.0;
        for (std::size_t k = 0; k < kGl8Nodes.size(); ++k)
            s += kGl8Weights[k] * f(mid + hw * kGl8Nodes[k]);
        return s * hw;
    };
    double coarse = 0.0, fine = 0.0;
    for (std::size_t j = 0; j + 1 < edges.size(); ++j) {
        const double a = edges[j], b = edges[j + 1];
        coarse += rule(a, b);
        const double m = 0.5 * (a + b);
        fine += rule(a, m) + rule(m, b);
    }
    return {fine, std::abs(fine - coarse)};
}

template <class F>
QuadResult integrate_graded(F&& f, double length, int cells = 128, double power = 2.0) {
    return integrate_cells(std::forward<F>(f), graded_breakpoints(length, cells, power));
}

// Adaptive Simpson, used where the integrand has isolated kinks
// (quantile integrals for p = 1 costs, CDF work).
namespace detail {
template <class F>
double simpson_rec(F& f, double a, double fa, double b, double fb, double m, double fm,
                   double whole, double tol, int depth) {
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    if (depth <= 0 || std::abs(delta) <= 15.0 * tol)
        return left + right + delta / 15.0;
    return simpson_rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
           simpson_rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}
} // namespace detail

template <class F>
double integrate_adaptive(F&& f, double a, double b, double tol = 1e-12, int max_depth = 40) {
    if (a == b) return 0.0;
    const double m = 0.5 * (a + b);
    const double fa = f(a), fb = f(b), fm = f(m);
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    return detail::simpson_rec(f, a, fa, b, fb, m, fm, whole, tol, max_depth);
}

} // namespace qsd
