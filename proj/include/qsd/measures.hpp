#pragma once

#include <span>
#include <vector>

#include "qsd/diffusion.hpp"
#include "qsd/spectral.hpp"

namespace qsd {

// Weighted atom cloud on the closed domain.
struct EmpiricalMeasure {
    int dim = 1;
    std::vector<double> points;  // n × dim
    std::vector<double> weights; // n, nonnegative

    std::size_t size() const { return weights.size(); }
    std::span<const double> point(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    double total_mass() const;
};

// Occupation measure of the path on [0, t]: atoms at the recorded grid
// positions with trapezoid weights normalized to unit mass.
EmpiricalMeasure path_to_empirical(const PathSample& path, double t);

// N equally weighted atoms at times (i-1)t/N, the grid companion of the
// lower-bound diagnostic.
EmpiricalMeasure grid_measure(const PathSample& path, double t, long n_atoms);

// Path averages of the mode ratios φ_m/φ₀ over [0, t]; values[0] is the
// diagnostic 0-th entry and equals 1.
struct SpectralCoefficients {
    double t = 0.0;
    std::vector<double> values;
    int modes() const { return static_cast<int>(values.size()); }
};

SpectralCoefficients psi_coefficients(const PathSample& path, const EigenSystem& sys, double t,
                                      int modes);

// μ₀-density of the semigroup-smoothed occupation measure:
//   ρ = 1 + Σ_{m≥1} e^{-(λ_m-λ₀)r} ψ_m (φ_m/φ₀),
// optionally blended with the constant 1 by a convex regularization weight.
class SmoothedDensity {
public:
    SmoothedDensity(const EigenSystem& sys, const SpectralCoefficients& coeffs, double r,
                    double regularization = 0.0);

    double operator()(std::span<const double> x) const;
    double smoothing() const { return r_; }
    double regularization() const { return reg_; }
    const std::vector<double>& damped_coeffs() const { return damped_; } // index m ≥ 1 at [m]

private:
    friend SmoothedDensity regularize_density(const SmoothedDensity&, double);
    const EigenSystem* sys_;
    std::vector<double> damped_;
    double r_ = 0.0;
    double reg_ = 0.0;
};

SmoothedDensity smoothed_density(const EigenSystem& sys, const SpectralCoefficients& coeffs,
                                 double r);
// convex combination (1-r)ρ + r; strictly positive whenever ρ ≥ 0
SmoothedDensity regularize_density(const SmoothedDensity& rho, double r);

struct TailBounded {
    double value = 0.0;
    double tail_bound = 0.0;
};

// Σ_{m≥1} e^{-2(λ_m-λ₀)r} ψ_m² / (λ_m-λ₀), the weighted negative-Sobolev
// functional; the tail field bounds the truncation of its expectation.
TailBounded hminus1_functional(const SpectralCoefficients& coeffs, const EigenSystem& sys,
                               double r);

// Logarithmic mean (a-b)/(log a - log b) with the stable series near the
// diagonal and M(a,a) = a.
double logarithmic_mean(double a, double b);

// Quadrature of |∇L₀⁻¹(ρ-1)|² / M(ρ,1) against μ₀ with the spectral gradient;
// rho must be the strictly positive (regularized) density.
double amb_upper_bound(const SmoothedDensity& rho, const SpectralCoefficients& coeffs,
                       const EigenSystem& sys, double r);

} // namespace qsd
