#include "qsd/measures.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qsd {

namespace {
struct Kahan {
    double sum = 0.0, comp = 0.0;
    void add(double v) {
        const double y = v - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};
} // namespace

double EmpiricalMeasure::total_mass() const {
    Kahan k;
    for (double w : weights) k.add(w);
    return k.sum;
}

EmpiricalMeasure path_to_empirical(const PathSample& path, double t) {
    const long nt = std::llround(t / path.dt);
    if (static_cast<long>(path.count()) < nt + 1)
        throw std::invalid_argument("path was killed before the requested horizon");
    EmpiricalMeasure m;
    m.dim = path.dim;
    const std::size_t n = static_cast<std::size_t>(nt) + 1;
    m.points.assign(path.positions.begin(),
                    path.positions.begin() + static_cast<std::ptrdiff_t>(n * path.dim));
    m.weights.assign(n, 0.0);
    if (nt == 0) {
        m.weights[0] = 1.0;
        return m;
    }
    Kahan total;
    for (std::size_t j = 0; j < n; ++j) {
        const double w = (j == 0 || j + 1 == n) ? 0.5 : 1.0;
        m.weights[j] = w;
        total.add(w);
    }
    for (auto& w : m.weights) w /= total.sum;
    return m;
}

EmpiricalMeasure grid_measure(const PathSample& path, double t, long n_atoms) {
    if (n_atoms < 1) throw std::invalid_argument("grid measure needs at least one atom");
    const long nt = std::llround(t / path.dt);
    if (static_cast<long>(path.count()) < nt + 1)
        throw std::invalid_argument("path shorter than the requested horizon");
    EmpiricalMeasure m;
    m.dim = path.dim;
    m.weights.assign(static_cast<std::size_t>(n_atoms), 1.0 / static_cast<double>(n_atoms));
    m.points.reserve(static_cast<std::size_t>(n_atoms) * path.dim);
    for (long i = 1; i <= n_atoms; ++i) {
        const double s = static_cast<double>(i - 1) * t / static_cast<double>(n_atoms);
        long j = std::llround(s / path.dt);
        j = std::clamp<long>(j, 0, nt);
        const auto p = path.at(static_cast<std::size_t>(j));
        m.points.insert(m.points.end(), p.begin(), p.end());
    }
    return m;
}

SpectralCoefficients psi_coefficients(const PathSample& path, const EigenSystem& sys, double t,
                                      int modes) {
    const long nt = std::llround(t / path.dt);
    if (static_cast<long>(path.count()) < nt + 1)
        throw std::invalid_argument("path was killed before the requested horizon");
    if (modes > sys.mode_count()) modes = sys.mode_count();
    SpectralCoefficients c;
    c.t = t;
    std::vector<Kahan> acc(static_cast<std::size_t>(modes));
    std::vector<double> row(static_cast<std::size_t>(modes));
    Kahan wsum;
    for (long j = 0; j <= nt; ++j) {
        const double w = (nt == 0) ? 1.0 : ((j == 0 || j == nt) ? 0.5 : 1.0);
        sys.hat_all(path.at(static_cast<std::size_t>(j)),
                    std::span<double>(row.data(), row.size()));
        for (int m = 0; m < modes; ++m) acc[static_cast<std::size_t>(m)].add(w * row[static_cast<std::size_t>(m)]);
        wsum.add(w);
    }
    c.values.resize(static_cast<std::size_t>(modes));
    for (int m = 0; m < modes; ++m)
        c.values[static_cast<std::size_t>(m)] = acc[static_cast<std::size_t>(m)].sum / wsum.sum;
    return c;
}

SmoothedDensity::SmoothedDensity(const EigenSystem& sys, const SpectralCoefficients& coeffs,
                                 double r, double regularization)
    : sys_(&sys), r_(r), reg_(regularization) {
    if (!(r > 0.0) && sys.dim() > 1)
        throw std::invalid_argument("smoothing time must be positive");
    damped_.assign(static_cast<std::size_t>(coeffs.modes()), 0.0);
    for (int m = 1; m < coeffs.modes(); ++m)
        damped_[static_cast<std::size_t>(m)] =
            std::exp(-sys.gap(m) * r) * coeffs.values[static_cast<std::size_t>(m)];
}

double SmoothedDensity::operator()(std::span<const double> x) const {
    thread_local std::vector<double> row;
    row.resize(damped_.size());
    std::span<double> rs{row.data(), std::min<std::size_t>(row.size(),
                                                           static_cast<std::size_t>(sys_->mode_count()))};
    sys_->hat_all(x, rs);
    double v = 1.0;
    for (std::size_t m = 1; m < damped_.size(); ++m) v += damped_[m] * row[m];
    return (1.0 - reg_) * v + reg_;
}

SmoothedDensity smoothed_density(const EigenSystem& sys, const SpectralCoefficients& coeffs,
                                 double r) {
    if (!(r > 0.0)) throw std::invalid_argument("smoothing time must be positive");
    return SmoothedDensity(sys, coeffs, r, 0.0);
}

SmoothedDensity regularize_density(const SmoothedDensity& rho, double r) {
    if (!(r > 0.0) || r > 1.0)
        throw std::invalid_argument("regularization weight must be in (0,1]");
    SmoothedDensity out = rho;
    // (1-r)((1-reg)ρ_raw + reg) + r blends toward 1 with weight 1-(1-r)(1-reg)
    out.reg_ = 1.0 - (1.0 - r) * (1.0 - rho.reg_);
    return out;
}

TailBounded hminus1_functional(const SpectralCoefficients& coeffs, const EigenSystem& sys,
                               double r) {
    if (r < 0.0) throw std::invalid_argument("smoothing time must be nonnegative");
    TailBounded out;
    Kahan sum;
    for (int m = 1; m < coeffs.modes(); ++m) {
        const double g = sys.gap(m);
        const double psi = coeffs.values[static_cast<std::size_t>(m)];
        sum.add(std::exp(-2.0 * g * r) * psi * psi / g);
    }
    out.value = sum.sum;
    // truncation of the expected functional: Σ_{m≥M} 2 e^{-2 gap r} / gap²
    const int m_count = sys.mode_count();
    const double ex = 2.0 / sys.dim();
    double c_gap = std::numeric_limits<double>::infinity();
    for (int m = std::max(1, m_count / 2); m < m_count; ++m)
        c_gap = std::min(c_gap, sys.gap(m) / std::pow(static_cast<double>(m), ex));
    double tail = 0.0;
    for (long m = coeffs.modes(); m < coeffs.modes() + 4000000; ++m) {
        const double g = c_gap * std::pow(static_cast<double>(m), ex);
        const double term = 2.0 * std::exp(-2.0 * g * r) / (g * g);
        tail += term;
        if (term < 1e-16 * (tail + 1e-300)) break;
    }
    out.tail_bound = tail;
    return out;
}

double logarithmic_mean(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0)) return 0.0;
    const double u = std::log(a / b);
    if (std::abs(u) < 1e-6) return a / (1.0 + 0.5 * u + u * u / 12.0);
    return (a - b) / u;
}

double amb_upper_bound(const SmoothedDensity& rho, const SpectralCoefficients& coeffs,
                       const EigenSystem& sys, double r) {
    const int d = sys.dim();
    const int modes = coeffs.modes();
    // damped spectral coefficients of L₀⁻¹(ρ-1): -e^{-gap r} ψ_m / gap
    std::vector<double> cg(static_cast<std::size_t>(modes), 0.0);
    for (int m = 1; m < modes; ++m)
        cg[static_cast<std::size_t>(m)] = -std::exp(-sys.gap(m) * r) *
                                          coeffs.values[static_cast<std::size_t>(m)] / sys.gap(m);

    std::vector<double> grad_m(static_cast<std::size_t>(d));
    Kahan total;
    const int n_pts = sys.eval_grid_size();
    for (int p = 0; p < n_pts; ++p) {
        const auto x = sys.eval_grid_point(p);
        const double rv = rho(x);
        if (!(rv > 0.0))
            throw std::runtime_error("regularized density non-positive at a quadrature node");
        double g2 = 0.0;
        if (d == 1) {
            double g = 0.0;
            for (int m = 1; m < modes; ++m) {
                double gm[1];
                sys.grad_hat(m, x, gm);
                g += cg[static_cast<std::size_t>(m)] * gm[0];
            }
            g2 = g * g;
        } else {
            std::vector<double> gsum(static_cast<std::size_t>(d), 0.0);
            for (int m = 1; m < modes; ++m) {
                sys.grad_hat(m, x, grad_m);
                for (int f = 0; f < d; ++f)
                    gsum[static_cast<std::size_t>(f)] +=
                        cg[static_cast<std::size_t>(m)] * grad_m[static_cast<std::size_t>(f)];
            }
            for (int f = 0; f < d; ++f)
                g2 += gsum[static_cast<std::size_t>(f)] * gsum[static_cast<std::size_t>(f)];
        }
        total.add(sys.eval_grid_weight0(p) * g2 / logarithmic_mean(rv, 1.0));
    }
    return total.sum;
}

} // namespace qsd
