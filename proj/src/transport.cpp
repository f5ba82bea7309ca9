#include "qsd/transport.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "qsd/quadrature.hpp"

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

double sq_dist(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double d = x[k] - y[k];
        s += d * d;
    }
    return s;
}
} // namespace

DiscreteMeasure DiscreteMeasure::from_empirical(const EmpiricalMeasure& m) {
    DiscreteMeasure d;
    d.dim = m.dim;
    d.points = m.points;
    d.weights = m.weights;
    return d;
}

void DiscreteMeasure::validate() const {
    Kahan k;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("discrete measure has a negative weight");
        k.add(w);
    }
    if (std::abs(k.sum - 1.0) > 1e-12)
        throw std::invalid_argument("discrete measure mass differs from 1 beyond 1e-12");
}

// ---------------------------------------------------------------------------
// 1-D quantile coupling
// ---------------------------------------------------------------------------

OtResult w2_1d_exact(const DiscreteMeasure& a, const DiscreteMeasure& b, int p) {
    if (a.dim != 1 || b.dim != 1) throw std::invalid_argument("w2_1d_exact needs 1-D measures");
    if (p != 1 && p != 2) throw std::invalid_argument("order must be 1 or 2");
    std::vector<std::size_t> ia(a.size()), ib(b.size());
    std::iota(ia.begin(), ia.end(), 0u);
    std::iota(ib.begin(), ib.end(), 0u);
    std::sort(ia.begin(), ia.end(),
              [&](std::size_t i, std::size_t j) { return a.points[i] < a.points[j]; });
    std::sort(ib.begin(), ib.end(),
              [&](std::size_t i, std::size_t j) { return b.points[i] < b.points[j]; });

    OtResult r;
    r.method = "quantile_1d";
    Kahan cost;
    std::size_t i = 0, j = 0;
    double cum = 0.0;
    double ca = a.weights[ia[0]], cb = b.weights[ib[0]];
    while (i < ia.size() && j < ib.size()) {
        const double next = std::min(ca, cb);
        const double seg = next - cum;
        if (seg > 0.0) {
            const double diff = std::abs(a.points[ia[i]] - b.points[ib[j]]);
            cost.add(seg * ((p == 2) ? diff * diff : diff));
        }
        cum = next;
        const bool adv_a = (ca == next);
        const bool adv_b = (cb == next);
        if (adv_a) {
            ++i;
            if (i < ia.size()) ca += a.weights[ia[i]];
        }
        if (adv_b) {
            ++j;
            if (j < ib.size()) cb += b.weights[ib[j]];
        }
    }
    r.cost = cost.sum;
    return r;
}

namespace {
// invert a smooth CDF with a bracketed Newton iteration
double invert_cdf(const SmoothCdf& f, double target, double lo, double hi, double init) {
    double y = std::clamp(init, lo, hi);
    for (int it = 0; it < 100; ++it) {
        const double e = f.cdf(y) - target;
        if (e > 0.0) hi = y;
        else lo = y;
        if (std::abs(e) < 1e-15 || hi - lo < 1e-15 * (1.0 + std::abs(y))) break;
        const double dens = f.density(y);
        double step = (dens > 1e-30) ? -e / dens : 0.0;
        double ynew = y + step;
        if (!(ynew > lo) || !(ynew < hi)) ynew = 0.5 * (lo + hi);
        y = ynew;
    }
    return y;
}
} // namespace

OtResult w2_1d_exact_vs_cdf(const DiscreteMeasure& a, const SmoothCdf& f, int p) {
    if (a.dim != 1) throw std::invalid_argument("w2_1d_exact_vs_cdf needs a 1-D measure");
    if (p != 1 && p != 2) throw std::invalid_argument("order must be 1 or 2");
    std::vector<std::size_t> ia(a.size());
    std::iota(ia.begin(), ia.end(), 0u);
    std::sort(ia.begin(), ia.end(),
              [&](std::size_t i, std::size_t j) { return a.points[i] < a.points[j]; });

    OtResult r;
    r.method = "quantile_vs_cdf";
    Kahan cost;
    double cum = 0.0;
    double y_prev = f.lo;
    for (std::size_t k = 0; k < ia.size(); ++k) {
        const double w = a.weights[ia[k]];
        if (w <= 0.0) continue;
        const double x = a.points[ia[k]];
        cum += w;
        double y_next;
        if (k + 1 == ia.size() || cum >= 1.0 - 1e-14) y_next = f.hi;
        else y_next = invert_cdf(f, cum, y_prev, f.hi, y_prev + w / std::max(f.density(y_prev), 1e-6));
        auto piece = [&](double u0, double u1) {
            if (u1 <= u0) return;
            if (f.seg_int2 && p == 2) {
                cost.add(f.seg_int2(x, u0, u1));
                return;
            }
            auto integrand = [&](double y) {
                const double d = std::abs(x - y);
                return ((p == 2) ? d * d : d) * f.density(y);
            };
            cost.add(integrate_adaptive(integrand, u0, u1, 1e-14, 24));
        };
        if (x > y_prev && x < y_next && p == 1) {
            piece(y_prev, x);
            piece(x, y_next);
        } else {
            piece(y_prev, y_next);
        }
        y_prev = y_next;
    }
    r.cost = cost.sum;
    return r;
}

// ---------------------------------------------------------------------------
// exact discrete OT by successive shortest paths with potentials
// ---------------------------------------------------------------------------

OtResult exact_discrete_ot(const DiscreteMeasure& a, const DiscreteMeasure& b) {
    const std::size_t n = a.size(), m = b.size();
    if (n * m > 4000000) throw std::invalid_argument("transport instance exceeds the size cap");
    if (a.dim != b.dim) throw std::invalid_argument("dimension mismatch");
    const int d = a.dim;

    std::vector<double> cost_m(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            cost_m[i * m + j] = sq_dist(a.point(i), b.point(j));

    const std::size_t src = n + m, snk = n + m + 1, nv = n + m + 2;
    std::vector<double> flow(n * m, 0.0);
    std::vector<double> src_left(a.weights), snk_left(b.weights);
    std::vector<double> pot(nv, 0.0), dist(nv);
    std::vector<int> parent(nv);
    std::vector<char> done(nv);
    const double inf = std::numeric_limits<double>::infinity();

    OtResult r;
    r.method = "network_flow";
    double remaining = 1.0;
    const long max_aug = 40 * static_cast<long>(n + m) + 200;
    long aug = 0;
    while (remaining > 1e-14 && aug < max_aug) {
        ++aug;
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(done.begin(), done.end(), 0);
        std::fill(parent.begin(), parent.end(), -1);
        dist[src] = 0.0;
        for (;;) {
            std::size_t u = nv;
            double best = inf;
            for (std::size_t v = 0; v < nv; ++v)
                if (!done[v] && dist[v] < best) { best = dist[v]; u = v; }
            if (u == nv || u == snk) break;
            done[u] = 1;
            if (u == src) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (src_left[i] <= 0.0) continue;
                    const double rc = std::max(0.0, pot[src] - pot[i]);
                    if (dist[src] + rc < dist[i]) { dist[i] = dist[src] + rc; parent[i] = static_cast<int>(src); }
                }
            } else if (u < n) {
                for (std::size_t j = 0; j < m; ++j) {
                    const double rc = std::max(0.0, cost_m[u * m + j] + pot[u] - pot[n + j]);
                    if (dist[u] + rc < dist[n + j]) {
                        dist[n + j] = dist[u] + rc;
                        parent[n + j] = static_cast<int>(u);
                    }
                }
            } else {
                const std::size_t j = u - n;
                if (snk_left[j] > 0.0) {
                    const double rc = std::max(0.0, pot[u] - pot[snk]);
                    if (dist[u] + rc < dist[snk]) { dist[snk] = dist[u] + rc; parent[snk] = static_cast<int>(u); }
                }
                for (std::size_t i = 0; i < n; ++i) {
                    if (flow[i * m + j] <= 0.0) continue;
                    const double rc = std::max(0.0, -cost_m[i * m + j] + pot[u] - pot[i]);
                    if (dist[u] + rc < dist[i]) {
                        dist[i] = dist[u] + rc;
                        parent[i] = static_cast<int>(u);
                    }
                }
            }
        }
        if (!(dist[snk] < inf)) break;
        // cap at dist[snk]: unpopped nodes carry tentative estimates only
        for (std::size_t v = 0; v < nv; ++v) pot[v] += std::min(dist[v], dist[snk]);
        // bottleneck along src → … → snk
        double delta = remaining;
        for (std::size_t v = snk; v != src;) {
            const std::size_t pu = static_cast<std::size_t>(parent[v]);
            if (v == snk) delta = std::min(delta, snk_left[pu - n]);
            else if (pu == src) delta = std::min(delta, src_left[v]);
            else if (pu < n) { /* forward arc, unbounded */ }
            else delta = std::min(delta, flow[v * m + (pu - n)]);
            v = pu;
        }
        for (std::size_t v = snk; v != src;) {
            const std::size_t pu = static_cast<std::size_t>(parent[v]);
            if (v == snk) snk_left[pu - n] -= delta;
            else if (pu == src) src_left[v] -= delta;
            else if (pu < n) flow[pu * m + (v - n)] += delta;
            else flow[v * m + (pu - n)] -= delta;
            v = pu;
        }
        remaining -= delta;
    }
    r.iterations = static_cast<int>(aug);
    r.converged = remaining <= 1e-10;
    r.marginal_residual = remaining;
    Kahan total;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (flow[i * m + j] > 0.0) total.add(flow[i * m + j] * cost_m[i * m + j]);
    r.cost = total.sum;
    return r;
}

// ---------------------------------------------------------------------------
// entropic OT: scaling iterations with periodic log-absorption
// ---------------------------------------------------------------------------

namespace {
struct SinkhornCore {
    double cost = 0.0;
    int iterations = 0;
    double residual = 0.0;
    bool converged = false;
};

SinkhornCore sinkhorn_core(const DiscreteMeasure& a, const DiscreteMeasure& b, double eps,
                           int max_iters, double tol) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<double> fpot(n, 0.0), gpot(m, 0.0);
    std::vector<double> u(n, 1.0), v(m, 1.0);
    std::vector<double> kmat(n * m);
    std::vector<double> ku(m);

    auto rebuild = [&] {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                kmat[i * m + j] =
                    std::exp((fpot[i] + gpot[j] - sq_dist(a.point(i), b.point(j))) / eps);
    };
    rebuild();

    SinkhornCore out;
    int it = 0;
    for (; it < max_iters; ++it) {
        // u update: row marginals match a afterwards
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            const double* krow = kmat.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) s += krow[j] * v[j];
            u[i] = (s > 0.0) ? a.weights[i] / s : 0.0;
        }
        std::fill(ku.begin(), ku.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double ui = u[i];
            const double* krow = kmat.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) ku[j] += krow[j] * ui;
        }
        double vmax = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            v[j] = (ku[j] > 0.0) ? b.weights[j] / ku[j] : 0.0;
            vmax = std::max(vmax, v[j]);
        }
        double umax = 0.0;
        for (std::size_t i = 0; i < n; ++i) umax = std::max(umax, u[i]);

        if ((it + 1) % 10 == 0 || it + 1 == max_iters) {
            // column marginals are exact after the v update; check rows
            double res = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                const double* krow = kmat.data() + i * m;
                for (std::size_t j = 0; j < m; ++j) s += krow[j] * v[j];
                res += std::abs(u[i] * s - a.weights[i]);
            }
            out.residual = res;
            if (res < tol) {
                out.converged = true;
                ++it;
                break;
            }
        }
        if (umax > 1e100 || vmax > 1e100 || umax < 1e-100) {
            for (std::size_t i = 0; i < n; ++i)
                if (u[i] > 0.0) { fpot[i] += eps * std::log(u[i]); u[i] = 1.0; }
            for (std::size_t j = 0; j < m; ++j)
                if (v[j] > 0.0) { gpot[j] += eps * std::log(v[j]); v[j] = 1.0; }
            rebuild();
        }
    }
    out.iterations = it;
    Kahan total;
    for (std::size_t i = 0; i < n; ++i) {
        const double* krow = kmat.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const double pij = u[i] * krow[j] * v[j];
            if (pij > 0.0) total.add(pij * sq_dist(a.point(i), b.point(j)));
        }
    }
    out.cost = total.sum;
    return out;
}

double default_eps(const DiscreteMeasure& a, const DiscreteMeasure& b) {
    const int d = a.dim;
    double lo[8], hi[8];
    for (int k = 0; k < d; ++k) {
        lo[k] = std::numeric_limits<double>::infinity();
        hi[k] = -std::numeric_limits<double>::infinity();
    }
    auto scan = [&](const DiscreteMeasure& mm) {
        for (std::size_t i = 0; i < mm.size(); ++i) {
            const auto p = mm.point(i);
            for (int k = 0; k < d; ++k) {
                lo[k] = std::min(lo[k], p[static_cast<std::size_t>(k)]);
                hi[k] = std::max(hi[k], p[static_cast<std::size_t>(k)]);
            }
        }
    };
    scan(a);
    scan(b);
    double d2 = 0.0;
    for (int k = 0; k < d; ++k) d2 += (hi[k] - lo[k]) * (hi[k] - lo[k]);
    return 0.01 * std::max(d2, 1e-12);
}
} // namespace

OtResult sinkhorn_w2(const DiscreteMeasure& a, const DiscreteMeasure& b,
                     const SinkhornParams& params) {
    if (a.dim != b.dim) throw std::invalid_argument("dimension mismatch");
    const double eps = (params.eps > 0.0) ? params.eps : default_eps(a, b);
    OtResult r;
    r.method = "sinkhorn";
    r.debiased = params.debias;
    const auto ab = sinkhorn_core(a, b, eps, params.max_iters, params.tol);
    r.iterations = ab.iterations;
    r.marginal_residual = ab.residual;
    r.converged = ab.converged;
    if (!params.debias) {
        r.cost = ab.cost;
        return r;
    }
    const auto aa = sinkhorn_core(a, a, eps, params.max_iters, params.tol);
    const auto bb = sinkhorn_core(b, b, eps, params.max_iters, params.tol);
    r.converged = ab.converged && aa.converged && bb.converged;
    r.iterations = ab.iterations + aa.iterations + bb.iterations;
    r.cost = ab.cost - 0.5 * aa.cost - 0.5 * bb.cost;
    return r;
}

// ---------------------------------------------------------------------------
// distance to the ground measure
// ---------------------------------------------------------------------------

DiscreteMeasure ground_reference_cloud(const EigenSystem& sys, int n) {
    DiscreteMeasure ref;
    const int d = sys.dim();
    ref.dim = d;
    ref.weights.assign(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
    ref.points.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(d));
    for (int i = 0; i < n; ++i)
        for (int f = 0; f < d; ++f)
            ref.points[static_cast<std::size_t>(i) * d + static_cast<std::size_t>(f)] =
                sys.ground().factor_quantile(f, radical_inverse(kHaltonBases[f],
                                                                static_cast<std::uint64_t>(i)));
    return ref;
}

GroundReference make_ground_reference(const EigenSystem& sys, int n, double eps) {
    GroundReference ref;
    ref.cloud = ground_reference_cloud(sys, n);
    ref.eps = (eps > 0.0) ? eps : 0.01 * sys.domain().diameter2();
    return ref;
}

namespace {
SmoothCdf ground_factor_cdf(const EigenSystem& sys) {
    SmoothCdf f;
    const auto& fac = sys.domain().factor(0);
    const double len = fac.length;
    f.lo = 0.0;
    f.hi = len;
    f.cdf = [&sys](double x) { return sys.ground().factor_cdf(0, x); };
    f.density = [&sys, len](double x) {
        const double p[1] = {x};
        return sys.ground().density({p, 1});
    };
    if (fac.potential.is_constant()) {
        // closed-form segment integral of (x-y)² against 2 sin²(πy/L)/L dy
        const double k = 2.0 * std::numbers::pi / len;
        f.seg_int2 = [len, k](double x, double y0, double y1) {
            auto anti = [&](double y) {
                const double cy = x - y;
                const double s = std::sin(k * y), c = std::cos(k * y);
                const double poly = -cy * cy * cy / 3.0;
                const double osc = cy * cy * s / k - 2.0 * cy * c / (k * k) - 2.0 * s / (k * k * k);
                return (poly - osc) / len;
            };
            return anti(y1) - anti(y0);
        };
    }
    return f;
}
} // namespace

OtResult w2_against_ground_prepared(const EmpiricalMeasure& mu_t, const EigenSystem& sys,
                                    const GroundReference& ref, const std::string& method,
                                    const SinkhornParams& base) {
    const auto a = DiscreteMeasure::from_empirical(mu_t);
    if (sys.dim() == 1 && (method == "auto" || method == "quantile")) {
        auto r = w2_1d_exact_vs_cdf(a, ground_factor_cdf(sys), 2);
        r.ref_bias = 0.0;
        return r;
    }
    std::string chosen = method;
    if (chosen == "auto" || chosen == "quantile")
        chosen = (a.size() * ref.cloud.size() <= 200000) ? "lp" : "sinkhorn";
    if (chosen == "lp") return exact_discrete_ot(a, ref.cloud);

    SinkhornParams sp = base;
    sp.eps = ref.eps;
    sp.debias = true;
    OtResult r;
    r.method = "sinkhorn";
    r.debiased = true;
    const auto ab = sinkhorn_core(a, ref.cloud, sp.eps, sp.max_iters, sp.tol);
    const auto aa = sinkhorn_core(a, a, sp.eps, sp.max_iters, sp.tol);
    double bb_cost;
    bool bb_conv = true;
    if (ref.has_self) bb_cost = ref.self_cost;
    else {
        const auto bb = sinkhorn_core(ref.cloud, ref.cloud, sp.eps, sp.max_iters, sp.tol);
        bb_cost = bb.cost;
        bb_conv = bb.converged;
    }
    r.cost = ab.cost - 0.5 * aa.cost - 0.5 * bb_cost;
    r.iterations = ab.iterations + aa.iterations;
    r.marginal_residual = std::max(ab.residual, aa.residual);
    r.converged = ab.converged && aa.converged && bb_conv;
    return r;
}

OtResult w2_against_ground(const EmpiricalMeasure& mu_t, const EigenSystem& sys,
                           const W2AgainstGroundParams& params) {
    if (sys.dim() == 1 && (params.method == "auto" || params.method == "quantile")) {
        GroundReference dummy;
        return w2_against_ground_prepared(mu_t, sys, dummy, "quantile", params.sinkhorn);
    }
    GroundReference ref = make_ground_reference(sys, params.n_ref, params.sinkhorn.eps);
    OtResult r = w2_against_ground_prepared(mu_t, sys, ref, params.method, params.sinkhorn);
    if (params.report_ref_bias && sys.dim() >= 2) {
        GroundReference ref2 = make_ground_reference(sys, 2 * params.n_ref, params.sinkhorn.eps);
        const OtResult r2 =
            w2_against_ground_prepared(mu_t, sys, ref2, params.method, params.sinkhorn);
        r.ref_bias = std::abs(r.cost - r2.cost);
    }
    return r;
}

} // namespace qsd
