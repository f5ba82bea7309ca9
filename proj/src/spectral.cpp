#include "qsd/spectral.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>
#include <queue>
#include <unordered_set>

#include "qsd/quadrature.hpp"
#include "tridiag.hpp"

namespace qsd {

using std::numbers::pi;
using std::numbers::sqrt2;

const unsigned kHaltonBases[8] = {2, 3, 5, 7, 11, 13, 17, 19};

double radical_inverse(unsigned base, std::uint64_t index) {
    double inv = 1.0 / base, f = inv, r = 0.0;
    std::uint64_t i = index + 1; // skip the 0 point
    while (i > 0) {
        r += f * static_cast<double>(i % base);
        i /= base;
        f *= inv;
    }
    return r;
}

// ---------------------------------------------------------------------------
// 1-D factor modes: closed form for constant potential, FD splines otherwise.
// ---------------------------------------------------------------------------

struct EigenSystem::Modes1D {
    bool closed_form = true;
    double length = 1.0;
    Potential pot;
    double mu_shift = 0.0;
    int count = 0;
    std::vector<double> lambda;

    // FD data (count rows of n+2 node values, endpoints included)
    int n = 0;
    double dx = 0.0;
    std::vector<double> phi_vals, phi_d2;
    std::vector<double> ratio_vals, ratio_d2;

    std::vector<double> mu_phi;  // ∫ φ_k dμ_f
    std::vector<double> mu0_phi; // ∫ φ_k φ₀² dμ_f
    std::vector<double> sup;
    std::vector<double> resid;
    double phi0_sup = 0.0;

    // ground factor CDF on a uniform grid
    std::vector<double> cdf;
    double cdf_dx = 0.0;

    std::span<const double> row(const std::vector<double>& a, int k) const {
        return {a.data() + static_cast<std::size_t>(k) * (n + 2),
                static_cast<std::size_t>(n + 2)};
    }

    double theta(double x) const { return pi * x / length; }

    double phi(int k, double x) const {
        if (closed_form) return sqrt2 * std::sin((k + 1) * theta(x));
        return detail::spline_eval(row(phi_vals, k), row(phi_d2, k), dx, x);
    }

    double dphi(int k, double x) const {
        if (closed_form) return sqrt2 * (k + 1) * (pi / length) * std::cos((k + 1) * theta(x));
        return detail::spline_deriv(row(phi_vals, k), row(phi_d2, k), dx, x);
    }

    double hat(int k, double x) const {
        if (!closed_form)
            return detail::spline_eval(row(ratio_vals, k), row(ratio_d2, k), dx, x);
        const double th = theta(x);
        const double s = std::sin(th);
        if (std::abs(s) > 1e-7) return std::sin((k + 1) * th) / s;
        const double a = static_cast<double>(k + 1) * (k + 1) - 1.0;
        if (th < pi / 2) return (k + 1) * (1.0 - a * th * th / 6.0);
        const double tp = pi - th;
        const double sign = (k % 2 == 0) ? 1.0 : -1.0;
        return sign * (k + 1) * (1.0 - a * tp * tp / 6.0);
    }

    double dhat(int k, double x) const {
        if (!closed_form)
            return detail::spline_deriv(row(ratio_vals, k), row(ratio_d2, k), dx, x);
        const double th = theta(x);
        const double s = std::sin(th);
        const double a = static_cast<double>(k + 1) * (k + 1) - 1.0;
        if (std::abs(s) > 1e-7) {
            const double c = std::cos(th);
            return (pi / length) *
                   ((k + 1) * std::cos((k + 1) * th) * s - std::sin((k + 1) * th) * c) / (s * s);
        }
        if (th < pi / 2) return -(pi / length) * (k + 1) * a * th / 3.0;
        const double tp = pi - th;
        const double sign = (k % 2 == 0) ? 1.0 : -1.0;
        return sign * (pi / length) * (k + 1) * a * tp / 3.0;
    }

    // hat_0..hat_{kmax-1} at one point (Chebyshev recurrence in closed form)
    void hat_row(double x, std::span<double> out, int kmax) const {
        if (closed_form) {
            const double c = std::cos(theta(x));
            double um2 = 1.0, um1 = 2.0 * c;
            if (kmax > 0) out[0] = um2;
            if (kmax > 1) out[1] = um1;
            for (int k = 2; k < kmax; ++k) {
                const double u = 2.0 * c * um1 - um2;
                out[static_cast<std::size_t>(k)] = u;
                um2 = um1;
                um1 = u;
            }
            return;
        }
        for (int k = 0; k < kmax; ++k) out[static_cast<std::size_t>(k)] = hat(k, x);
    }

    void dhat_row(double x, std::span<double> out, int kmax) const {
        if (closed_form) {
            const double th = theta(x);
            const double c = std::cos(th);
            const double cp = -std::sin(th) * pi / length;
            double um2 = 1.0, um1 = 2.0 * c;
            double dm2 = 0.0, dm1 = 2.0 * cp;
            if (kmax > 0) out[0] = dm2;
            if (kmax > 1) out[1] = dm1;
            for (int k = 2; k < kmax; ++k) {
                const double u = 2.0 * c * um1 - um2;
                const double dk = 2.0 * cp * um1 + 2.0 * c * dm1 - dm2;
                out[static_cast<std::size_t>(k)] = dk;
                um2 = um1; um1 = u;
                dm2 = dm1; dm1 = dk;
            }
            return;
        }
        for (int k = 0; k < kmax; ++k) out[static_cast<std::size_t>(k)] = dhat(k, x);
    }

    void phi_row(double x, std::span<double> out, int kmax) const {
        if (closed_form) {
            const double th = theta(x);
            const double c = std::cos(th);
            double sm1 = 0.0, s0 = std::sin(th);
            for (int k = 0; k < kmax; ++k) {
                out[static_cast<std::size_t>(k)] = sqrt2 * s0;
                const double s1 = 2.0 * c * s0 - sm1;
                sm1 = s0;
                s0 = s1;
            }
            return;
        }
        for (int k = 0; k < kmax; ++k) out[static_cast<std::size_t>(k)] = phi(k, x);
    }

    double log_phi0_d(double x) const {
        if (closed_form) {
            const double th = theta(x);
            const double s = std::max(std::sin(th), 1e-300);
            return (pi / length) * std::cos(th) / s;
        }
        const double v = phi(0, x);
        return dphi(0, x) / ((v > 0) ? std::max(v, 1e-300) : std::min(v, -1e-300));
    }

    double log_phi0_dd(double x) const {
        if (closed_form) {
            const double s = std::max(std::sin(theta(x)), 1e-300);
            return -(pi / length) * (pi / length) / (s * s);
        }
        // (log u)'' = u''/u − (u'/u)²; u'' from the spline's second derivative
        const double u = phi(0, x);
        const double du = dphi(0, x);
        const double uu = ((u > 0) ? std::max(u, 1e-300) : std::min(u, -1e-300));
        const auto y = row(phi_vals, 0);
        const auto d2 = row(phi_d2, 0);
        double t = x / dx;
        std::size_t j = (t <= 0.0) ? 0 : static_cast<std::size_t>(t);
        if (j >= y.size() - 1) j = y.size() - 2;
        const double a = (static_cast<double>(j + 1) - t), b = t - static_cast<double>(j);
        const double ddu = a * d2[j] + b * d2[j + 1];
        return ddu / uu - (du / uu) * (du / uu);
    }

    double ground_density(double x) const {
        const double p0 = phi(0, x);
        return p0 * p0 * std::exp(pot.value(x, length) + mu_shift);
    }

    double cdf_eval(double x) const {
        if (closed_form) {
            const double th = theta(x);
            return th / pi - std::sin(2.0 * th) / (2.0 * pi);
        }
        if (x <= 0.0) return 0.0;
        if (x >= length) return 1.0;
        const double t = x / cdf_dx;
        std::size_t j = static_cast<std::size_t>(t);
        if (j >= cdf.size() - 1) j = cdf.size() - 2;
        const double frac = t - static_cast<double>(j);
        return cdf[j] + frac * (cdf[j + 1] - cdf[j]);
    }

    double quantile(double u) const {
        u = std::clamp(u, 0.0, 1.0);
        double lo = 0.0, hi = length;
        for (int it = 0; it < 60; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (cdf_eval(mid) < u) lo = mid;
            else hi = mid;
        }
        return 0.5 * (lo + hi);
    }

    void build_closed(double len, int k_count) {
        closed_form = true;
        length = len;
        pot = Potential{};
        mu_shift = -std::log(len);
        count = k_count;
        lambda.resize(static_cast<std::size_t>(count));
        mu_phi.resize(static_cast<std::size_t>(count));
        mu0_phi.resize(static_cast<std::size_t>(count));
        sup.assign(static_cast<std::size_t>(count), sqrt2);
        resid.assign(static_cast<std::size_t>(count), 0.0);
        phi0_sup = sqrt2;
        for (int k = 0; k < count; ++k) {
            lambda[static_cast<std::size_t>(k)] = pi * pi * (k + 1.0) * (k + 1.0) / (len * len);
            mu_phi[static_cast<std::size_t>(k)] =
                (k % 2 == 0) ? 2.0 * sqrt2 / ((k + 1) * pi) : 0.0;
            const auto q = integrate_graded(
                [&](double x) { return phi(k, x) * phi(0, x) * phi(0, x) / len; }, len, 128);
            mu0_phi[static_cast<std::size_t>(k)] = q.value;
        }
    }

    void build_fd(double len, const Potential& v, int k_count, int grid_n) {
        closed_form = false;
        length = len;
        pot = v;
        count = k_count;
        n = grid_n;
        dx = len / (n + 1);

        std::vector<double> ev(static_cast<std::size_t>(n));      // e^{V} at nodes
        std::vector<double> evh(static_cast<std::size_t>(n) + 1); // e^{V} at half nodes
        for (int i = 0; i < n; ++i) {
            const double val = v.value((i + 1) * dx, len);
            if (!std::isfinite(val)) throw std::invalid_argument("potential not finite on the interval");
            ev[static_cast<std::size_t>(i)] = std::exp(val);
        }
        for (int i = 0; i <= n; ++i)
            evh[static_cast<std::size_t>(i)] = std::exp(v.value((i + 0.5) * dx, len));

        // normalizing shift so e^{V+shift} dx has unit mass
        const auto mass =
            integrate_graded([&](double x) { return std::exp(v.value(x, len)); }, len, 256);
        mu_shift = -std::log(mass.value);

        std::vector<double> diag(static_cast<std::size_t>(n)), off(static_cast<std::size_t>(n) - 1);
        for (int i = 0; i < n; ++i)
            diag[static_cast<std::size_t>(i)] =
                (evh[static_cast<std::size_t>(i)] + evh[static_cast<std::size_t>(i) + 1]) /
                (dx * dx * ev[static_cast<std::size_t>(i)]);
        for (int i = 0; i + 1 < n; ++i)
            off[static_cast<std::size_t>(i)] =
                -evh[static_cast<std::size_t>(i) + 1] /
                (dx * dx * std::sqrt(ev[static_cast<std::size_t>(i)] * ev[static_cast<std::size_t>(i) + 1]));

        double lo = diag[0], hi = diag[0];
        for (int i = 0; i < n; ++i) {
            double r = 0.0;
            if (i > 0) r += std::abs(off[static_cast<std::size_t>(i) - 1]);
            if (i + 1 < n) r += std::abs(off[static_cast<std::size_t>(i)]);
            lo = std::min(lo, diag[static_cast<std::size_t>(i)] - r);
            hi = std::max(hi, diag[static_cast<std::size_t>(i)] + r);
        }

        lambda.resize(static_cast<std::size_t>(count));
        phi_vals.assign(static_cast<std::size_t>(count) * (n + 2), 0.0);
        phi_d2.assign(static_cast<std::size_t>(count) * (n + 2), 0.0);
        ratio_vals.assign(static_cast<std::size_t>(count) * (n + 2), 0.0);
        ratio_d2.assign(static_cast<std::size_t>(count) * (n + 2), 0.0);
        mu_phi.resize(static_cast<std::size_t>(count));
        mu0_phi.resize(static_cast<std::size_t>(count));
        sup.resize(static_cast<std::size_t>(count));
        resid.resize(static_cast<std::size_t>(count));

        for (int k = 0; k < count; ++k) {
            const double lam = detail::bisect_eigenvalue(diag, off, k, lo, hi);
            lambda[static_cast<std::size_t>(k)] = lam;
            auto w = detail::inverse_iteration(diag, off, lam, static_cast<std::uint64_t>(k) + 1);
            // u = D^{-1/2} w, with the sign fixed by a positive first lobe
            if (w[0] < 0.0)
                for (double& val : w) val = -val;
            double* y = phi_vals.data() + static_cast<std::size_t>(k) * (n + 2);
            for (int i = 0; i < n; ++i)
                y[i + 1] = w[static_cast<std::size_t>(i)] / std::sqrt(ev[static_cast<std::size_t>(i)]);
            auto yrow = std::span<double>(y, static_cast<std::size_t>(n + 2));
            auto d2 = detail::spline_second_derivs(yrow, dx);
            std::copy(d2.begin(), d2.end(), phi_d2.begin() + static_cast<std::size_t>(k) * (n + 2));

            // L²(μ) normalization through quadrature of the spline
            const auto nrm = integrate_graded(
                [&](double x) {
                    const double val = detail::spline_eval(yrow, d2, dx, x);
                    return val * val * std::exp(v.value(x, len) + mu_shift);
                },
                len, 256);
            const double scale = 1.0 / std::sqrt(nrm.value);
            for (int i = 0; i < n + 2; ++i) y[i] *= scale;
            for (auto& val : d2) val *= scale;
            std::copy(d2.begin(), d2.end(), phi_d2.begin() + static_cast<std::size_t>(k) * (n + 2));

            const auto check = integrate_graded(
                [&](double x) {
                    const double val = detail::spline_eval(yrow, d2, dx, x);
                    return val * val * std::exp(v.value(x, len) + mu_shift);
                },
                len, 256);
            resid[static_cast<std::size_t>(k)] = std::abs(check.value - 1.0);

            const auto m1 = integrate_graded(
                [&](double x) {
                    return detail::spline_eval(yrow, d2, dx, x) *
                           std::exp(v.value(x, len) + mu_shift);
                },
                len, 256);
            mu_phi[static_cast<std::size_t>(k)] = m1.value;

            double s = 0.0;
            for (int i = 0; i < n + 2; ++i) s = std::max(s, std::abs(y[i]));
            sup[static_cast<std::size_t>(k)] = s;
        }
        phi0_sup = sup[0];

        // mode ratios φ_k/φ₀ as splines; endpoint values from derivative ratios
        const double* y0 = phi_vals.data();
        for (int k = 0; k < count; ++k) {
            const double* y = phi_vals.data() + static_cast<std::size_t>(k) * (n + 2);
            double* r = ratio_vals.data() + static_cast<std::size_t>(k) * (n + 2);
            for (int i = 1; i <= n; ++i) {
                const double denom = (std::abs(y0[i]) > 1e-14) ? y0[i] : 1e-14;
                r[i] = y[i] / denom;
            }
            r[0] = dphi(k, 0.0) / dphi(0, 0.0);
            r[n + 1] = dphi(k, len) / dphi(0, len);
            auto rrow = std::span<double>(r, static_cast<std::size_t>(n + 2));
            auto rd2 = detail::spline_second_derivs(rrow, dx);
            std::copy(rd2.begin(), rd2.end(),
                      ratio_d2.begin() + static_cast<std::size_t>(k) * (n + 2));
        }

        for (int k = 0; k < count; ++k) {
            const auto q = integrate_graded(
                [&](double x) {
                    const double p0 = phi(0, x);
                    return phi(k, x) * p0 * p0 * std::exp(v.value(x, len) + mu_shift);
                },
                len, 256);
            mu0_phi[static_cast<std::size_t>(k)] = q.value;
        }

        build_cdf_table();
    }

    void build_cdf_table() {
        if (closed_form) return;
        const int cells = 4096;
        cdf.assign(static_cast<std::size_t>(cells) + 1, 0.0);
        cdf_dx = length / cells;
        for (int j = 0; j < cells; ++j) {
            const double a = j * cdf_dx, b = (j + 1) * cdf_dx;
            double s = 0.0;
            for (std::size_t q = 0; q < kGl8Nodes.size(); ++q) {
                const double x = 0.5 * (a + b) + 0.5 * (b - a) * kGl8Nodes[q];
                s += kGl8Weights[q] * ground_density(x);
            }
            cdf[static_cast<std::size_t>(j) + 1] =
                cdf[static_cast<std::size_t>(j)] + s * 0.5 * (b - a);
        }
        const double total = cdf.back();
        for (auto& vcd : cdf) vcd /= total;
    }
};

// ---------------------------------------------------------------------------
// EigenSystem
// ---------------------------------------------------------------------------

EigenSystem::EigenSystem() = default;
EigenSystem::~EigenSystem() = default;

EigenSystem::EigenSystem(EigenSystem&& other) noexcept
    : domain_(std::move(other.domain_)),
      factors_(std::move(other.factors_)),
      lambda_(std::move(other.lambda_)),
      multi_index_(std::move(other.multi_index_)),
      mu_phi_(std::move(other.mu_phi_)),
      sup_norm_(std::move(other.sup_norm_)),
      hat_sup_(std::move(other.hat_sup_)),
      norm_resid_(std::move(other.norm_resid_)),
      fd_grid_points_(other.fd_grid_points_),
      eval_pts_(std::move(other.eval_pts_)),
      eval_w0_(std::move(other.eval_w0_)),
      eval_wmu_(std::move(other.eval_wmu_)),
      coarse_pts_(std::move(other.coarse_pts_)),
      coarse_w0_(std::move(other.coarse_w0_)) {
    ground_.sys_ = this;
}

EigenSystem::EigenSystem(const EigenSystem& other)
    : domain_(other.domain_),
      lambda_(other.lambda_),
      multi_index_(other.multi_index_),
      mu_phi_(other.mu_phi_),
      sup_norm_(other.sup_norm_),
      hat_sup_(other.hat_sup_),
      norm_resid_(other.norm_resid_),
      fd_grid_points_(other.fd_grid_points_),
      eval_pts_(other.eval_pts_),
      eval_w0_(other.eval_w0_),
      eval_wmu_(other.eval_wmu_),
      coarse_pts_(other.coarse_pts_),
      coarse_w0_(other.coarse_w0_) {
    factors_.reserve(other.factors_.size());
    for (const auto& f : other.factors_) factors_.push_back(std::make_unique<Modes1D>(*f));
    ground_.sys_ = this;
}

EigenSystem EigenSystem::closed_form_interval(double length, int modes) {
    if (!(length > 0.0)) throw std::invalid_argument("interval length must be positive");
    if (modes < 1) throw std::invalid_argument("need at least one mode");
    EigenSystem sys;
    sys.domain_ = Domain::interval(length, Potential{});
    auto f = std::make_unique<Modes1D>();
    f->build_closed(length, modes);
    sys.factors_.push_back(std::move(f));
    sys.lambda_ = sys.factors_[0]->lambda;
    for (int m = 0; m < modes; ++m) {
        sys.multi_index_.push_back({m});
        sys.mu_phi_.push_back(sys.factors_[0]->mu_phi[static_cast<std::size_t>(m)]);
        sys.sup_norm_.push_back(sqrt2);
        sys.norm_resid_.push_back(0.0);
    }
    sys.finalize();
    return sys;
}

EigenSystem EigenSystem::sturm_liouville_fd(double length, const Potential& v, int modes,
                                            int grid_points) {
    if (!(length > 0.0)) throw std::invalid_argument("interval length must be positive");
    if (modes < 1) throw std::invalid_argument("need at least one mode");
    if (grid_points < 4 * modes)
        throw std::invalid_argument("grid resolution insufficient: need n >= 4M");
    EigenSystem sys;
    sys.domain_ = Domain::interval(length, v);
    sys.fd_grid_points_ = grid_points;
    auto f = std::make_unique<Modes1D>();
    f->build_fd(length, v, modes, grid_points);
    sys.factors_.push_back(std::move(f));
    sys.lambda_ = sys.factors_[0]->lambda;
    for (int m = 0; m < modes; ++m) {
        sys.multi_index_.push_back({m});
        sys.mu_phi_.push_back(sys.factors_[0]->mu_phi[static_cast<std::size_t>(m)]);
        sys.sup_norm_.push_back(sys.factors_[0]->sup[static_cast<std::size_t>(m)]);
        sys.norm_resid_.push_back(sys.factors_[0]->resid[static_cast<std::size_t>(m)]);
    }
    sys.finalize();
    return sys;
}

EigenSystem EigenSystem::solve_interval(double length, const Potential& v, int modes,
                                        int grid_points) {
    if (v.is_constant()) return closed_form_interval(length, modes);
    return sturm_liouville_fd(length, v, modes, grid_points);
}

namespace {
struct BoxItem {
    double lam;
    std::array<std::uint8_t, 8> idx;
};
struct BoxItemGreater {
    bool operator()(const BoxItem& a, const BoxItem& b) const { return a.lam > b.lam; }
};
std::uint64_t pack_idx(const std::array<std::uint8_t, 8>& idx) {
    std::uint64_t key = 0;
    std::memcpy(&key, idx.data(), 8);
    return key;
}
} // namespace

EigenSystem EigenSystem::tensorize_box(const std::vector<EigenSystem>& factors, int modes) {
    if (factors.empty() || factors.size() > 8)
        throw std::invalid_argument("box needs 1..8 factors");
    if (modes < 1) throw std::invalid_argument("need at least one mode");
    std::vector<double> lengths;
    for (const auto& f : factors) {
        if (!f.domain().is_interval())
            throw std::invalid_argument("box factors must be 1-D systems");
        if (!f.domain().factor(0).potential.is_constant())
            throw std::invalid_argument("box factors must have constant potential");
        lengths.push_back(f.domain().factor(0).length);
    }
    if (factors.size() == 1) return closed_form_interval(lengths[0], modes);

    const int d = static_cast<int>(lengths.size());
    auto factor_lambda = [&](int f, int k) {
        return pi * pi * (k + 1.0) * (k + 1.0) / (lengths[static_cast<std::size_t>(f)] *
                                                  lengths[static_cast<std::size_t>(f)]);
    };

    // best-first enumeration of the smallest eigenvalue sums
    std::priority_queue<BoxItem, std::vector<BoxItem>, BoxItemGreater> heap;
    std::unordered_set<std::uint64_t> seen;
    BoxItem first{};
    first.lam = 0.0;
    for (int f = 0; f < d; ++f) first.lam += factor_lambda(f, 0);
    heap.push(first);
    seen.insert(pack_idx(first.idx));

    std::vector<BoxItem> selected;
    while (!heap.empty()) {
        if (static_cast<int>(selected.size()) >= modes &&
            heap.top().lam > selected.back().lam * (1.0 + 1e-12))
            break;
        BoxItem cur = heap.top();
        heap.pop();
        selected.push_back(cur);
        for (int f = 0; f < d; ++f) {
            BoxItem nxt = cur;
            if (nxt.idx[static_cast<std::size_t>(f)] == 255) continue;
            nxt.idx[static_cast<std::size_t>(f)]++;
            const auto key = pack_idx(nxt.idx);
            if (seen.count(key)) continue;
            seen.insert(key);
            nxt.lam = cur.lam -
                      factor_lambda(f, cur.idx[static_cast<std::size_t>(f)]) +
                      factor_lambda(f, nxt.idx[static_cast<std::size_t>(f)]);
            heap.push(nxt);
        }
    }
    std::sort(selected.begin(), selected.end(), [&](const BoxItem& a, const BoxItem& b) {
        if (a.lam != b.lam) return a.lam < b.lam;
        for (int f = 0; f < d; ++f) {
            if (a.idx[static_cast<std::size_t>(f)] != b.idx[static_cast<std::size_t>(f)])
                return a.idx[static_cast<std::size_t>(f)] < b.idx[static_cast<std::size_t>(f)];
        }
        return false;
    });
    selected.resize(static_cast<std::size_t>(modes));

    std::vector<int> kmax(static_cast<std::size_t>(d), 0);
    for (const auto& it : selected)
        for (int f = 0; f < d; ++f)
            kmax[static_cast<std::size_t>(f)] =
                std::max(kmax[static_cast<std::size_t>(f)],
                         static_cast<int>(it.idx[static_cast<std::size_t>(f)]) + 1);

    EigenSystem sys;
    sys.domain_ = Domain::box(lengths);
    for (int f = 0; f < d; ++f) {
        auto mf = std::make_unique<Modes1D>();
        mf->build_closed(lengths[static_cast<std::size_t>(f)], kmax[static_cast<std::size_t>(f)]);
        sys.factors_.push_back(std::move(mf));
    }
    for (const auto& it : selected) {
        sys.lambda_.push_back(it.lam);
        std::vector<int> mi(static_cast<std::size_t>(d));
        double mp = 1.0, sn = 1.0;
        for (int f = 0; f < d; ++f) {
            const int k = it.idx[static_cast<std::size_t>(f)];
            mi[static_cast<std::size_t>(f)] = k;
            mp *= sys.factors_[static_cast<std::size_t>(f)]->mu_phi[static_cast<std::size_t>(k)];
            sn *= sqrt2;
        }
        sys.multi_index_.push_back(std::move(mi));
        sys.mu_phi_.push_back(mp);
        sys.sup_norm_.push_back(sn);
        sys.norm_resid_.push_back(0.0);
    }
    sys.finalize();
    return sys;
}

EigenSystem EigenSystem::for_domain(const Domain& dom, int modes, int grid_points) {
    if (dom.is_interval()) {
        const auto& f = dom.factor(0);
        if (f.potential.is_constant()) return closed_form_interval(f.length, modes);
        const int n = (grid_points > 0) ? grid_points : std::max(2048, 4 * modes);
        return sturm_liouville_fd(f.length, f.potential, modes, n);
    }
    std::vector<EigenSystem> factors;
    for (int i = 0; i < dom.dim(); ++i)
        factors.push_back(closed_form_interval(dom.factor(i).length, 1));
    return tensorize_box(factors, modes);
}

void EigenSystem::finalize() {
    ground_.sys_ = this;
    const int d = dim();
    const int m_count = mode_count();

    auto tensor_grid = [&](int cells_per_axis, std::vector<double>& pts,
                           std::vector<double>& w0, std::vector<double>* wmu) {
        std::vector<std::vector<double>> axis_nodes(static_cast<std::size_t>(d));
        std::vector<std::vector<double>> axis_w(static_cast<std::size_t>(d));
        for (int f = 0; f < d; ++f) {
            const auto& fac = *factors_[static_cast<std::size_t>(f)];
            const auto edges = graded_breakpoints(fac.length, cells_per_axis, 2.0);
            for (std::size_t c = 0; c + 1 < edges.size(); ++c) {
                const double mid = 0.5 * (edges[c] + edges[c + 1]);
                const double hw = 0.5 * (edges[c + 1] - edges[c]);
                for (std::size_t q = 0; q < kGl8Nodes.size(); ++q) {
                    const double x = mid + hw * kGl8Nodes[q];
                    axis_nodes[static_cast<std::size_t>(f)].push_back(x);
                    axis_w[static_cast<std::size_t>(f)].push_back(
                        kGl8Weights[q] * hw *
                        std::exp(fac.pot.value(x, fac.length) + fac.mu_shift));
                }
            }
        }
        std::size_t total = 1;
        for (int f = 0; f < d; ++f) total *= axis_nodes[static_cast<std::size_t>(f)].size();
        pts.resize(total * static_cast<std::size_t>(d));
        w0.resize(total);
        if (wmu) wmu->resize(total);
        std::vector<std::size_t> ix(static_cast<std::size_t>(d), 0);
        std::vector<double> x(static_cast<std::size_t>(d));
        for (std::size_t p = 0; p < total; ++p) {
            double wm = 1.0;
            for (int f = 0; f < d; ++f) {
                x[static_cast<std::size_t>(f)] =
                    axis_nodes[static_cast<std::size_t>(f)][ix[static_cast<std::size_t>(f)]];
                wm *= axis_w[static_cast<std::size_t>(f)][ix[static_cast<std::size_t>(f)]];
            }
            std::copy(x.begin(), x.end(), pts.begin() + static_cast<std::ptrdiff_t>(p) * d);
            const double p0 = phi0(x);
            w0[p] = wm * p0 * p0;
            if (wmu) (*wmu)[p] = wm;
            for (int f = d - 1; f >= 0; --f) {
                if (++ix[static_cast<std::size_t>(f)] <
                    axis_nodes[static_cast<std::size_t>(f)].size())
                    break;
                ix[static_cast<std::size_t>(f)] = 0;
            }
        }
    };

    if (d == 1) {
        tensor_grid(256, eval_pts_, eval_w0_, &eval_wmu_);
        tensor_grid(128, coarse_pts_, coarse_w0_, nullptr);
    } else if (d == 2) {
        tensor_grid(16, eval_pts_, eval_w0_, &eval_wmu_);
        tensor_grid(8, coarse_pts_, coarse_w0_, nullptr);
    } else {
        // μ₀ Monte Carlo nodes from Halton points through the factor quantiles
        const std::size_t n_mc = 32768;
        eval_pts_.resize(n_mc * static_cast<std::size_t>(d));
        eval_w0_.assign(n_mc, 1.0 / static_cast<double>(n_mc));
        for (std::size_t p = 0; p < n_mc; ++p) {
            for (int f = 0; f < d; ++f) {
                const double u = radical_inverse(kHaltonBases[f], p);
                eval_pts_[p * static_cast<std::size_t>(d) + static_cast<std::size_t>(f)] =
                    factors_[static_cast<std::size_t>(f)]->quantile(u);
            }
        }
        const std::size_t n_half = n_mc / 2;
        coarse_pts_.assign(eval_pts_.begin(),
                           eval_pts_.begin() + static_cast<std::ptrdiff_t>(n_half * d));
        coarse_w0_.assign(n_half, 1.0 / static_cast<double>(n_half));
    }

    // sup of the mode ratios over the evaluation grid (exact at the boundary
    // for closed-form factors, where |φ_k/φ₀| peaks at k+1)
    hat_sup_.assign(static_cast<std::size_t>(m_count), 0.0);
    bool all_closed = true;
    for (const auto& f : factors_) all_closed = all_closed && f->closed_form;
    if (all_closed) {
        for (int m = 0; m < m_count; ++m) {
            double s = 1.0;
            for (int f = 0; f < d; ++f)
                s *= multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)] + 1.0;
            hat_sup_[static_cast<std::size_t>(m)] = s;
        }
    } else {
        std::vector<double> row(static_cast<std::size_t>(m_count));
        const std::size_t npts = eval_w0_.size();
        for (std::size_t p = 0; p < npts; ++p) {
            hat_all(eval_grid_point(static_cast<int>(p)), row);
            for (int m = 0; m < m_count; ++m)
                hat_sup_[static_cast<std::size_t>(m)] =
                    std::max(hat_sup_[static_cast<std::size_t>(m)],
                             std::abs(row[static_cast<std::size_t>(m)]));
        }
        // endpoints carry the ratio extrema
        for (int m = 0; m < m_count; ++m) {
            const auto& f = *factors_[0];
            const int k = multi_index_[static_cast<std::size_t>(m)][0];
            hat_sup_[static_cast<std::size_t>(m)] =
                std::max({hat_sup_[static_cast<std::size_t>(m)], std::abs(f.hat(k, 0.0)),
                          std::abs(f.hat(k, f.length))});
        }
    }
}

std::span<const double> EigenSystem::eval_grid_point(int i) const {
    const int d = dim();
    return {eval_pts_.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d),
            static_cast<std::size_t>(d)};
}

double EigenSystem::phi(int m, std::span<const double> x) const {
    double v = 1.0;
    for (int f = 0; f < dim(); ++f)
        v *= factors_[static_cast<std::size_t>(f)]->phi(
            multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)],
            x[static_cast<std::size_t>(f)]);
    return v;
}

void EigenSystem::grad_phi(int m, std::span<const double> x, std::span<double> out) const {
    const int d = dim();
    for (int g = 0; g < d; ++g) {
        double v = 1.0;
        for (int f = 0; f < d; ++f) {
            const int k = multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)];
            const auto& fac = *factors_[static_cast<std::size_t>(f)];
            v *= (f == g) ? fac.dphi(k, x[static_cast<std::size_t>(f)])
                          : fac.phi(k, x[static_cast<std::size_t>(f)]);
        }
        out[static_cast<std::size_t>(g)] = v;
    }
}

double EigenSystem::hat(int m, std::span<const double> x) const {
    double v = 1.0;
    for (int f = 0; f < dim(); ++f)
        v *= factors_[static_cast<std::size_t>(f)]->hat(
            multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)],
            x[static_cast<std::size_t>(f)]);
    return v;
}

void EigenSystem::grad_hat(int m, std::span<const double> x, std::span<double> out) const {
    const int d = dim();
    for (int g = 0; g < d; ++g) {
        double v = 1.0;
        for (int f = 0; f < d; ++f) {
            const int k = multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)];
            const auto& fac = *factors_[static_cast<std::size_t>(f)];
            v *= (f == g) ? fac.dhat(k, x[static_cast<std::size_t>(f)])
                          : fac.hat(k, x[static_cast<std::size_t>(f)]);
        }
        out[static_cast<std::size_t>(g)] = v;
    }
}

namespace {
thread_local std::vector<double> t_factor_rows;
} // namespace

void EigenSystem::phi_all(std::span<const double> x, std::span<double> out) const {
    const int d = dim();
    const int m_count = std::min(mode_count(), static_cast<int>(out.size()));
    if (d == 1) {
        factors_[0]->phi_row(x[0], out, m_count);
        return;
    }
    std::size_t need = 0;
    for (int f = 0; f < d; ++f) need += static_cast<std::size_t>(factors_[static_cast<std::size_t>(f)]->count);
    t_factor_rows.resize(need);
    std::size_t offset = 0;
    std::vector<std::size_t> starts(static_cast<std::size_t>(d));
    for (int f = 0; f < d; ++f) {
        starts[static_cast<std::size_t>(f)] = offset;
        const auto& fac = *factors_[static_cast<std::size_t>(f)];
        fac.phi_row(x[static_cast<std::size_t>(f)],
                    std::span<double>(t_factor_rows.data() + offset,
                                      static_cast<std::size_t>(fac.count)),
                    fac.count);
        offset += static_cast<std::size_t>(fac.count);
    }
    for (int m = 0; m < m_count; ++m) {
        double v = 1.0;
        for (int f = 0; f < d; ++f)
            v *= t_factor_rows[starts[static_cast<std::size_t>(f)] +
                               static_cast<std::size_t>(
                                   multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)])];
        out[static_cast<std::size_t>(m)] = v;
    }
}

void EigenSystem::hat_all(std::span<const double> x, std::span<double> out) const {
    const int d = dim();
    const int m_count = std::min(mode_count(), static_cast<int>(out.size()));
    if (d == 1) {
        factors_[0]->hat_row(x[0], out, m_count);
        return;
    }
    std::size_t need = 0;
    for (int f = 0; f < d; ++f) need += static_cast<std::size_t>(factors_[static_cast<std::size_t>(f)]->count);
    t_factor_rows.resize(need);
    std::size_t offset = 0;
    std::vector<std::size_t> starts(static_cast<std::size_t>(d));
    for (int f = 0; f < d; ++f) {
        starts[static_cast<std::size_t>(f)] = offset;
        const auto& fac = *factors_[static_cast<std::size_t>(f)];
        fac.hat_row(x[static_cast<std::size_t>(f)],
                    std::span<double>(t_factor_rows.data() + offset,
                                      static_cast<std::size_t>(fac.count)),
                    fac.count);
        offset += static_cast<std::size_t>(fac.count);
    }
    for (int m = 0; m < m_count; ++m) {
        double v = 1.0;
        for (int f = 0; f < d; ++f)
            v *= t_factor_rows[starts[static_cast<std::size_t>(f)] +
                               static_cast<std::size_t>(
                                   multi_index_[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)])];
        out[static_cast<std::size_t>(m)] = v;
    }
}

void EigenSystem::grad_log_phi0(std::span<const double> x, std::span<double> out) const {
    for (int f = 0; f < dim(); ++f)
        out[static_cast<std::size_t>(f)] =
            factors_[static_cast<std::size_t>(f)]->log_phi0_d(x[static_cast<std::size_t>(f)]);
}

void EigenSystem::hess_diag_v_2logphi0(std::span<const double> x, std::span<double> out) const {
    for (int f = 0; f < dim(); ++f) {
        const auto& fac = *factors_[static_cast<std::size_t>(f)];
        const double xi = x[static_cast<std::size_t>(f)];
        out[static_cast<std::size_t>(f)] =
            fac.pot.second_deriv(xi, fac.length) + 2.0 * fac.log_phi0_dd(xi);
    }
}

double EigenSystem::integrate_mu0(const std::function<double(std::span<const double>)>& f,
                                  double* error) const {
    const int d = dim();
    double fine = 0.0, comp = 0.0;
    for (std::size_t p = 0; p < eval_w0_.size(); ++p) {
        const double v =
            eval_w0_[p] * f({eval_pts_.data() + p * static_cast<std::size_t>(d),
                             static_cast<std::size_t>(d)});
        const double y = v - comp;
        const double s = fine + y;
        comp = (s - fine) - y;
        fine = s;
    }
    if (error) {
        double coarse = 0.0;
        for (std::size_t p = 0; p < coarse_w0_.size(); ++p)
            coarse += coarse_w0_[p] * f({coarse_pts_.data() + p * static_cast<std::size_t>(d),
                                         static_cast<std::size_t>(d)});
        *error = std::abs(fine - coarse);
    }
    return fine;
}

double EigenSystem::heat_tail_bound(double t, int from_mode) const {
    if (!(t > 0.0)) return std::numeric_limits<double>::infinity();
    const int m_count = mode_count();
    double alpha_sup = 0.0;
    for (int m = 1; m < m_count; ++m)
        alpha_sup = std::max(alpha_sup, sup_norm_[static_cast<std::size_t>(m)] /
                                            std::sqrt(static_cast<double>(m)));
    double c_gap = std::numeric_limits<double>::infinity();
    const double ex = 2.0 / dim();
    for (int m = std::max(1, m_count / 2); m < m_count; ++m)
        c_gap = std::min(c_gap, gap(m) / std::pow(static_cast<double>(m), ex));
    const double lam0 = lambda_[0];
    double sum = 0.0;
    for (long m = from_mode; m < from_mode + 4000000; ++m) {
        const double term = alpha_sup * alpha_sup * static_cast<double>(m) *
                            std::exp(-(lam0 + c_gap * std::pow(static_cast<double>(m), ex)) * t);
        sum += term;
        if (term < 1e-18 * (sum + 1e-300)) return sum;
    }
    return std::numeric_limits<double>::infinity();
}

double EigenSystem::heat_kernel(double t, std::span<const double> x, std::span<const double> y,
                                double* tail_bound, double tol) const {
    thread_local std::vector<double> fx, fy;
    const int m_count = mode_count();
    fx.resize(static_cast<std::size_t>(m_count));
    fy.resize(static_cast<std::size_t>(m_count));
    phi_all(x, fx);
    phi_all(y, fy);
    double sum = 0.0;
    for (int m = m_count - 1; m >= 0; --m)
        sum += std::exp(-lambda_[static_cast<std::size_t>(m)] * t) *
               fx[static_cast<std::size_t>(m)] * fy[static_cast<std::size_t>(m)];
    const double tb = heat_tail_bound(t, m_count);
    if (tail_bound) *tail_bound = tb;
    if (tb > tol)
        throw std::runtime_error("heat kernel truncation bound exceeds requested tolerance");
    return sum;
}

double EigenSystem::h_heat_kernel(double t, std::span<const double> x, std::span<const double> y,
                                  double* tail_bound) const {
    thread_local std::vector<double> fx, fy;
    const int m_count = mode_count();
    fx.resize(static_cast<std::size_t>(m_count));
    fy.resize(static_cast<std::size_t>(m_count));
    hat_all(x, fx);
    hat_all(y, fy);
    double sum = 0.0;
    for (int m = m_count - 1; m >= 0; --m)
        sum += std::exp(-gap(m) * t) * fx[static_cast<std::size_t>(m)] *
               fy[static_cast<std::size_t>(m)];
    if (tail_bound) {
        const double ex = 2.0 / dim();
        const double pw = (dim() + 2.0) / (2.0 * dim());
        double alpha = 0.0;
        for (int m = 1; m < m_count; ++m)
            alpha = std::max(alpha, hat_sup_[static_cast<std::size_t>(m)] /
                                        std::pow(static_cast<double>(m), pw));
        double c_gap = std::numeric_limits<double>::infinity();
        for (int m = std::max(1, m_count / 2); m < m_count; ++m)
            c_gap = std::min(c_gap, gap(m) / std::pow(static_cast<double>(m), ex));
        double sum_tail = 0.0;
        bool converged = false;
        for (long m = m_count; m < m_count + 4000000; ++m) {
            const double term = alpha * alpha * std::pow(static_cast<double>(m), 2.0 * pw) *
                                std::exp(-c_gap * std::pow(static_cast<double>(m), ex) * t);
            sum_tail += term;
            if (term < 1e-18 * (sum_tail + 1e-300)) { converged = true; break; }
        }
        *tail_bound = converged ? sum_tail : std::numeric_limits<double>::infinity();
    }
    return sum;
}

double EigenSystem::survival(const InitialMeasure& nu, double t) const {
    double sum = 0.0;
    for (int m = mode_count() - 1; m >= 0; --m)
        sum += std::exp(-lambda_[static_cast<std::size_t>(m)] * t) * mu_phi_[static_cast<std::size_t>(m)] *
               nu.pair_phi(*this, m);
    return sum;
}

double EigenSystem::h_apply(const std::function<double(std::span<const double>)>& f, double t,
                            std::span<const double> x, double* quad_error) const {
    const int d = dim();
    const int m_count = mode_count();
    std::vector<double> cf(static_cast<std::size_t>(m_count), 0.0);
    std::vector<double> cc(static_cast<std::size_t>(m_count), 0.0);
    std::vector<double> row(static_cast<std::size_t>(m_count));
    for (std::size_t p = 0; p < eval_w0_.size(); ++p) {
        const std::span<const double> xp{eval_pts_.data() + p * static_cast<std::size_t>(d),
                                         static_cast<std::size_t>(d)};
        hat_all(xp, row);
        const double fv = f(xp) * eval_w0_[p];
        for (int m = 0; m < m_count; ++m)
            cf[static_cast<std::size_t>(m)] += fv * row[static_cast<std::size_t>(m)];
    }
    for (std::size_t p = 0; p < coarse_w0_.size(); ++p) {
        const std::span<const double> xp{coarse_pts_.data() + p * static_cast<std::size_t>(d),
                                         static_cast<std::size_t>(d)};
        hat_all(xp, row);
        const double fv = f(xp) * coarse_w0_[p];
        for (int m = 0; m < m_count; ++m)
            cc[static_cast<std::size_t>(m)] += fv * row[static_cast<std::size_t>(m)];
    }
    hat_all(x, row);
    double val = 0.0, err = 0.0;
    for (int m = 0; m < m_count; ++m) {
        const double damp = std::exp(-gap(m) * t);
        val += cf[static_cast<std::size_t>(m)] * damp * row[static_cast<std::size_t>(m)];
        err += std::abs(cf[static_cast<std::size_t>(m)] - cc[static_cast<std::size_t>(m)]) * damp *
               std::abs(row[static_cast<std::size_t>(m)]);
    }
    if (quad_error) *quad_error = err;
    return val;
}

LimitConstant EigenSystem::limit_constant() const {
    if (mode_count() < 2) throw std::invalid_argument("limit constant needs at least 2 modes");
    LimitConstant out;
    const int d = dim();
    out.divergent = (d >= 4);
    double sum = 0.0, comp = 0.0;
    for (int m = 1; m < mode_count(); ++m) {
        const double g = gap(m);
        const double term = 2.0 / (g * g);
        const double y = term - comp;
        const double s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    out.partial_sum = sum;
    const double ex = 2.0 / d;
    double alpha = 0.0;
    for (int m = std::max(1, mode_count() / 2); m < mode_count(); ++m)
        alpha = std::max(alpha, std::pow(static_cast<double>(m), ex) / gap(m));
    out.alpha0 = alpha;
    if (!out.divergent) {
        // ∫_{M-1}^∞ s^{-4/d} ds, finite exactly when d ≤ 3
        const double mm = mode_count() - 1.0;
        out.tail_bound = 2.0 * alpha * alpha * std::pow(mm, 1.0 - 4.0 / d) / (4.0 / d - 1.0);
    } else {
        out.tail_bound = std::numeric_limits<double>::infinity();
    }
    return out;
}

nlohmann::json EigenSystem::to_json() const {
    nlohmann::json j;
    j["domain"] = domain_.to_json();
    j["M"] = mode_count();
    j["grid_points"] = fd_grid_points_;
    j["eigenvalues"] = lambda_;
    j["normalization_residuals"] = norm_resid_;
    return j;
}

EigenSystem EigenSystem::from_json(const nlohmann::json& j) {
    const Domain dom = Domain::from_json(j.at("domain"));
    const int modes = j.at("M").get<int>();
    const int grid = j.at("grid_points").get<int>();
    EigenSystem sys = for_domain(dom, modes, grid);
    const auto stored = j.at("eigenvalues").get<std::vector<double>>();
    if (static_cast<int>(stored.size()) != sys.mode_count())
        throw std::runtime_error("eigen-system import: mode count mismatch");
    for (int m = 0; m < sys.mode_count(); ++m) {
        const double a = stored[static_cast<std::size_t>(m)], b = sys.eigenvalue(m);
        if (std::abs(a - b) > 1e-9 * (std::abs(a) + 1.0))
            throw std::runtime_error("eigen-system import: eigenvalue mismatch");
    }
    return sys;
}

// ---------------------------------------------------------------------------
// GroundMeasure / InitialMeasure
// ---------------------------------------------------------------------------

double GroundMeasure::density(std::span<const double> x) const {
    double v = 1.0;
    for (int f = 0; f < sys_->dim(); ++f)
        v *= sys_->factors_[static_cast<std::size_t>(f)]->ground_density(
            x[static_cast<std::size_t>(f)]);
    return v;
}

double GroundMeasure::factor_cdf(int i, double xi) const {
    return sys_->factors_[static_cast<std::size_t>(i)]->cdf_eval(xi);
}

double GroundMeasure::factor_quantile(int i, double u) const {
    return sys_->factors_[static_cast<std::size_t>(i)]->quantile(u);
}

void GroundMeasure::sample(Philox& rng, std::span<double> out) const {
    for (int f = 0; f < sys_->dim(); ++f)
        out[static_cast<std::size_t>(f)] =
            sys_->factors_[static_cast<std::size_t>(f)]->quantile(rng.uniform());
}

double GroundMeasure::total_mass() const {
    double v = 1.0;
    for (int f = 0; f < sys_->dim(); ++f) {
        const auto& fac = *sys_->factors_[static_cast<std::size_t>(f)];
        const auto q = integrate_graded([&](double x) { return fac.ground_density(x); },
                                        fac.length, 256);
        v *= q.value;
    }
    return v;
}

double InitialMeasure::pair_phi(const EigenSystem& sys, int m) const {
    switch (kind) {
        case Kind::dirac:
            return sys.phi(m, point);
        case Kind::ground: {
            double v = 1.0;
            for (int f = 0; f < sys.dim(); ++f)
                v *= sys.factors_[static_cast<std::size_t>(f)]->mu0_phi[static_cast<std::size_t>(
                    sys.multi_index(m)[static_cast<std::size_t>(f)])];
            return v;
        }
        case Kind::ground_tilted: {
            // ν = φ₀μ₀ / μ₀(φ₀): per-factor quadratures
            double num = 1.0, den = 1.0;
            for (int f = 0; f < sys.dim(); ++f) {
                const auto& fac = *sys.factors_[static_cast<std::size_t>(f)];
                const int k = sys.multi_index(m)[static_cast<std::size_t>(f)];
                const auto qn = integrate_graded(
                    [&](double x) {
                        const double p0 = fac.phi(0, x);
                        return fac.phi(k, x) * p0 * p0 * p0 *
                               std::exp(fac.pot.value(x, fac.length) + fac.mu_shift);
                    },
                    fac.length, 128);
                const auto qd = integrate_graded(
                    [&](double x) {
                        const double p0 = fac.phi(0, x);
                        return p0 * p0 * p0 *
                               std::exp(fac.pot.value(x, fac.length) + fac.mu_shift);
                    },
                    fac.length, 128);
                num *= qn.value;
                den *= qd.value;
            }
            return num / den;
        }
    }
    return 0.0;
}

double EigenSystem::phi0_sup() const {
    double sup = 1.0;
    for (const auto& f : factors_) sup *= f->phi0_sup;
    return sup;
}

namespace {
void sample_ground_pow(const EigenSystem& sys, Philox& rng, std::span<double> out, int power) {
    if (power == 0) {
        sys.ground().sample(rng, out);
        return;
    }
    // rejection against μ₀ with acceptance ∝ (φ₀/sup φ₀)^power
    const double sup = sys.phi0_sup();
    for (int attempt = 0; attempt < 100000; ++attempt) {
        sys.ground().sample(rng, out);
        const double ratio = sys.phi0(out) / sup;
        double acc = 1.0;
        for (int p = 0; p < power; ++p) acc *= ratio;
        if (rng.uniform() < acc) return;
    }
    throw std::runtime_error("tilted sampler failed to accept");
}
} // namespace

void InitialMeasure::sample(const EigenSystem& sys, Philox& rng, std::span<double> out) const {
    switch (kind) {
        case Kind::dirac:
            std::copy(point.begin(), point.end(), out.begin());
            return;
        case Kind::ground:
            sample_ground_pow(sys, rng, out, 0);
            return;
        case Kind::ground_tilted:
            sample_ground_pow(sys, rng, out, 1);
            return;
    }
}

void InitialMeasure::sample_tilted(const EigenSystem& sys, Philox& rng,
                                   std::span<double> out) const {
    switch (kind) {
        case Kind::dirac:
            std::copy(point.begin(), point.end(), out.begin());
            return;
        case Kind::ground:
            sample_ground_pow(sys, rng, out, 1);
            return;
        case Kind::ground_tilted:
            sample_ground_pow(sys, rng, out, 2);
            return;
    }
}

nlohmann::json InitialMeasure::to_json() const {
    nlohmann::json j;
    switch (kind) {
        case Kind::dirac: j["kind"] = "dirac"; j["point"] = point; break;
        case Kind::ground: j["kind"] = "ground"; break;
        case Kind::ground_tilted: j["kind"] = "ground_tilted"; break;
    }
    return j;
}

InitialMeasure InitialMeasure::from_json(const nlohmann::json& j) {
    const std::string k = j.at("kind").get<std::string>();
    if (k == "dirac") return dirac(j.at("point").get<std::vector<double>>());
    if (k == "ground") return ground();
    if (k == "ground_tilted") return ground_tilted();
    throw std::invalid_argument("unknown initial measure kind: " + k);
}

} // namespace qsd
