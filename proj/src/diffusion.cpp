#include "qsd/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "qsd/parallel.hpp"

namespace qsd {

namespace {

constexpr int kMaxDim = 8;

struct Kahan {
    double sum = 0.0, comp = 0.0;
    void add(double v) {
        const double y = v - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};

void base_drift(const EigenSystem& sys, std::span<const double> x, std::span<double> out) {
    for (int f = 0; f < sys.dim(); ++f) {
        const auto& fac = sys.domain().factor(f);
        out[static_cast<std::size_t>(f)] =
            fac.potential.deriv(x[static_cast<std::size_t>(f)], fac.length);
    }
}

// one killed Euler-Maruyama step with per-face bridge corrections;
// returns false if the path dies during the step, with the crossing
// fraction (in units of h) written to *frac when it exits outright
bool step_killed(const EigenSystem& sys, double h, Philox& rng, std::span<double> x,
                 double* frac) {
    const int d = sys.dim();
    double b[kMaxDim], y[kMaxDim];
    base_drift(sys, x, {b, static_cast<std::size_t>(d)});
    const double sigma = std::sqrt(2.0 * h);
    for (int f = 0; f < d; ++f)
        y[f] = x[static_cast<std::size_t>(f)] + b[f] * h + sigma * rng.normal();

    if (!sys.domain().interior({y, static_cast<std::size_t>(d)})) {
        double first = 1.0;
        for (int f = 0; f < d; ++f) {
            const double len = sys.domain().factor(f).length;
            const double x0 = x[static_cast<std::size_t>(f)];
            if (y[f] <= 0.0) first = std::min(first, x0 / (x0 - y[f]));
            else if (y[f] >= len) first = std::min(first, (len - x0) / (y[f] - x0));
        }
        if (frac) *frac = first;
        return false;
    }

    double log_surv = 0.0;
    const double cutoff = 40.0 * h; // a·b > 40h ⇒ crossing probability < 4e-18
    for (int f = 0; f < d; ++f) {
        const double len = sys.domain().factor(f).length;
        const double a0 = x[static_cast<std::size_t>(f)], b0 = y[f];
        const double aL = len - a0, bL = len - y[f];
        if (a0 * b0 < cutoff) log_surv += std::log1p(-bridge_crossing_probability(a0, b0, h));
        if (aL * bL < cutoff) log_surv += std::log1p(-bridge_crossing_probability(aL, bL, h));
    }
    if (log_surv < 0.0 && rng.uniform() >= std::exp(log_surv)) {
        if (frac) *frac = 0.5;
        return false;
    }
    for (int f = 0; f < d; ++f) x[static_cast<std::size_t>(f)] = y[f];
    return true;
}

// Conditioned-process advance over one interval of length h. Near the
// boundary (φ₀ below threshold) the interval is split into substeps
// recursively; proposals that exit are resampled. The hook sees every
// executed substep: hook(x_before, xi, h_sub, s_before).
template <class Hook>
void advance_h(const EigenSystem& sys, const SdeConfig& cfg, double thresh, Philox& rng,
               std::span<double> x, double h, int depth, double& s, PathSample& diag,
               Hook&& hook) {
    if (depth > cfg.max_halvings)
        throw ReplicaAbort("boundary-layer recursion exceeded the halving budget");
    const int d = sys.dim();
    // In the boundary layer, halve until the substep noise scale √(2h) is
    // small against the distance to the boundary; this terminates after
    // O(log) levels while keeping exits rare and the frozen drift accurate.
    if (depth < cfg.max_halvings && sys.phi0(x) < thresh) {
        const double dist = sys.domain().boundary_distance(x);
        if (2.0 * h > 0.25 * dist * dist) {
            ++diag.halvings;
            const double hs = h / cfg.substep_factor;
            for (int i = 0; i < cfg.substep_factor; ++i)
                advance_h(sys, cfg, thresh, rng, x, hs, depth + 1, s, diag, hook);
            return;
        }
    }
    double b[kMaxDim], y[kMaxDim], xi[kMaxDim];
    base_drift(sys, x, {b, static_cast<std::size_t>(d)});
    double g[kMaxDim];
    sys.grad_log_phi0(x, {g, static_cast<std::size_t>(d)});
    for (int f = 0; f < d; ++f) b[f] += 2.0 * g[f];
    const double sigma = std::sqrt(2.0 * h);
    for (int attempt = 0; attempt < 64; ++attempt) {
        for (int f = 0; f < d; ++f) {
            xi[f] = rng.normal();
            y[f] = x[static_cast<std::size_t>(f)] + b[f] * h + sigma * xi[f];
        }
        if (sys.domain().interior({y, static_cast<std::size_t>(d)})) {
            hook(std::span<const double>(x.data(), x.size()),
                 std::span<const double>(xi, static_cast<std::size_t>(d)), h, s);
            for (int f = 0; f < d; ++f) x[static_cast<std::size_t>(f)] = y[f];
            s += h;
            return;
        }
        ++diag.exit_resamples;
    }
    // persistent exits at this scale: fall back to substepping
    ++diag.halvings;
    const double hs = h / cfg.substep_factor;
    for (int i = 0; i < cfg.substep_factor; ++i)
        advance_h(sys, cfg, thresh, rng, x, hs, depth + 1, s, diag, hook);
}

struct StepPlan {
    long full_steps = 0;
    double remainder = 0.0;
};

StepPlan plan_steps(double horizon, double h) {
    StepPlan p;
    p.full_steps = static_cast<long>(std::floor(horizon / h + 1e-9));
    p.remainder = horizon - static_cast<double>(p.full_steps) * h;
    if (p.remainder < 1e-12 * std::max(1.0, horizon)) p.remainder = 0.0;
    return p;
}

} // namespace

nlohmann::json SdeConfig::to_json() const {
    return {{"step", step},
            {"substep_factor", substep_factor},
            {"phi0_threshold_rel", phi0_threshold_rel},
            {"max_halvings", max_halvings}};
}

SdeConfig SdeConfig::from_json(const nlohmann::json& j) {
    SdeConfig c;
    if (j.contains("step")) c.step = j.at("step").get<double>();
    if (j.contains("substep_factor")) c.substep_factor = j.at("substep_factor").get<int>();
    if (j.contains("phi0_threshold_rel"))
        c.phi0_threshold_rel = j.at("phi0_threshold_rel").get<double>();
    if (j.contains("max_halvings")) c.max_halvings = j.at("max_halvings").get<int>();
    if (!(c.step > 0.0) || c.substep_factor < 2)
        throw std::invalid_argument("sde config: need step > 0 and substep_factor >= 2");
    return c;
}

PathSample simulate_killed_path(const EigenSystem& sys, const InitialMeasure& nu, double horizon,
                                const SdeConfig& cfg, Philox& rng, double record_until) {
    const int d = sys.dim();
    const double h = cfg.step;
    PathSample p;
    p.dim = d;
    p.dt = h;
    double x[kMaxDim];
    nu.sample(sys, rng, {x, static_cast<std::size_t>(d)});
    p.positions.insert(p.positions.end(), x, x + d);
    if (!sys.domain().interior({x, static_cast<std::size_t>(d)})) {
        p.survived = false;
        p.tau = 0.0;
        p.final_position.assign(x, x + d);
        return p;
    }
    const auto plan = plan_steps(horizon, h);
    for (long k = 0; k < plan.full_steps; ++k) {
        double frac = 0.5;
        if (!step_killed(sys, h, rng, {x, static_cast<std::size_t>(d)}, &frac)) {
            p.survived = false;
            p.tau = static_cast<double>(k) * h + frac * h;
            break;
        }
        if (static_cast<double>(k + 1) * h <= record_until + 1e-12)
            p.positions.insert(p.positions.end(), x, x + d);
    }
    if (p.survived && plan.remainder > 0.0) {
        double frac = 0.5;
        if (!step_killed(sys, plan.remainder, rng, {x, static_cast<std::size_t>(d)}, &frac)) {
            p.survived = false;
            p.tau = static_cast<double>(plan.full_steps) * h + frac * plan.remainder;
        }
    }
    p.final_position.assign(x, x + d);
    return p;
}

PathSample simulate_h_path(const EigenSystem& sys, const InitialMeasure& nu0, double horizon,
                           const SdeConfig& cfg, Philox& rng, double record_until) {
    const int d = sys.dim();
    const double h = cfg.step;
    PathSample p;
    p.dim = d;
    p.dt = h;
    double xbuf[kMaxDim];
    std::span<double> x{xbuf, static_cast<std::size_t>(d)};
    nu0.sample(sys, rng, x);
    if (!sys.domain().interior(x))
        throw std::invalid_argument("h-process start must be interior");
    p.positions.insert(p.positions.end(), xbuf, xbuf + d);
    const double thresh = cfg.phi0_threshold_rel * sys.phi0_sup();
    const auto plan = plan_steps(horizon, h);
    double s = 0.0;
    auto no_hook = [](std::span<const double>, std::span<const double>, double, double) {};
    for (long k = 0; k < plan.full_steps; ++k) {
        advance_h(sys, cfg, thresh, rng, x, h, 0, s, p, no_hook);
        if (static_cast<double>(k + 1) * h <= record_until + 1e-12)
            p.positions.insert(p.positions.end(), xbuf, xbuf + d);
    }
    if (plan.remainder > 0.0)
        advance_h(sys, cfg, thresh, rng, x, plan.remainder, 0, s, p, no_hook);
    p.final_position.assign(xbuf, xbuf + d);
    return p;
}

// ---------------------------------------------------------------------------
// path functionals
// ---------------------------------------------------------------------------

PathFunctional PathFunctional::constant_one() {
    PathFunctional f;
    f.state_size = 0;
    f.accumulate = [](std::span<double>, std::span<const double>, double) {};
    f.finalize = [](std::span<const double>, std::span<const double>) { return 1.0; };
    return f;
}

PathFunctional PathFunctional::mode_average_squared(const EigenSystem& sys, int m) {
    PathFunctional f;
    f.state_size = 1;
    f.accumulate = [&sys, m](std::span<double> st, std::span<const double> x, double w) {
        st[0] += w * sys.hat(m, x);
    };
    f.finalize = [](std::span<const double> st, std::span<const double>) { return st[0] * st[0]; };
    return f;
}

PathFunctional PathFunctional::phi0_at_end(const EigenSystem& sys) {
    PathFunctional f;
    f.state_size = 0;
    f.accumulate = [](std::span<double>, std::span<const double>, double) {};
    f.finalize = [&sys](std::span<const double>, std::span<const double> x_t) {
        return sys.phi0(x_t);
    };
    return f;
}

namespace {

// trapezoid accumulation of a functional over the recorded grid of [0, t]
double run_functional(const PathFunctional& fn, const PathSample& path, double t,
                      std::vector<double>& state) {
    state.assign(static_cast<std::size_t>(fn.state_size), 0.0);
    const long nt = static_cast<long>(std::llround(t / path.dt));
    const double h = path.dt;
    for (long j = 0; j <= nt; ++j) {
        const double w = ((j == 0 || j == nt) ? 0.5 : 1.0) * h / t;
        fn.accumulate(state, path.at(static_cast<std::size_t>(j)), w);
    }
    return fn.finalize(state, path.at(static_cast<std::size_t>(nt)));
}

CondResult estimate_h_importance(const EigenSystem& sys, const InitialMeasure& nu,
                                 const PathFunctional& fn, double t, double horizon, long n,
                                 const SdeConfig& cfg, std::uint64_t seed, int threads) {
    std::vector<double> fvals(static_cast<std::size_t>(n), 0.0);
    std::vector<double> wvals(static_cast<std::size_t>(n), 0.0);
    std::vector<char> ok(static_cast<std::size_t>(n), 0);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        Philox rng(seed, i);
        try {
            InitialMeasure start = nu; // tilted draw below
            double x0[kMaxDim];
            nu.sample_tilted(sys, rng, {x0, static_cast<std::size_t>(sys.dim())});
            start = InitialMeasure::dirac(std::vector<double>(x0, x0 + sys.dim()));
            PathSample path = simulate_h_path(sys, start, horizon, cfg, rng, t);
            std::vector<double> state;
            fvals[i] = run_functional(fn, path, t, state);
            wvals[i] = 1.0 / sys.phi0(path.final_position);
            ok[i] = 1;
        } catch (const ReplicaAbort&) {
            ok[i] = 0;
        }
    });
    CondResult r;
    Kahan A, B, W2;
    long good = 0;
    for (long i = 0; i < n; ++i) {
        if (!ok[static_cast<std::size_t>(i)]) continue;
        ++good;
        A.add(wvals[static_cast<std::size_t>(i)] * fvals[static_cast<std::size_t>(i)]);
        B.add(wvals[static_cast<std::size_t>(i)]);
        W2.add(wvals[static_cast<std::size_t>(i)] * wvals[static_cast<std::size_t>(i)]);
    }
    r.failures = n - good;
    r.survivors = good;
    if (good == 0 || !(B.sum > 0.0)) {
        r.no_survivor_failure = true;
        return r;
    }
    const double ratio = A.sum / B.sum;
    Kahan V;
    for (long i = 0; i < n; ++i) {
        if (!ok[static_cast<std::size_t>(i)]) continue;
        const double dlt = wvals[static_cast<std::size_t>(i)] *
                           (fvals[static_cast<std::size_t>(i)] - ratio);
        V.add(dlt * dlt);
    }
    r.estimate = ratio;
    r.se = std::sqrt(V.sum) / B.sum;
    r.ess = B.sum * B.sum / W2.sum;
    r.low_ess_warning = r.ess < 10.0;
    return r;
}

CondResult estimate_rejection_plain(const EigenSystem& sys, const InitialMeasure& nu,
                                    const PathFunctional& fn, double t, double horizon, long n,
                                    const SdeConfig& cfg, std::uint64_t seed, int threads) {
    std::vector<double> fvals(static_cast<std::size_t>(n), 0.0);
    std::vector<char> alive(static_cast<std::size_t>(n), 0);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        Philox rng(seed, i);
        PathSample path = simulate_killed_path(sys, nu, horizon, cfg, rng, t);
        if (!path.survived) return;
        std::vector<double> state;
        fvals[i] = run_functional(fn, path, t, state);
        alive[i] = 1;
    });
    CondResult r;
    Kahan sum;
    long n_s = 0;
    for (long i = 0; i < n; ++i)
        if (alive[static_cast<std::size_t>(i)]) {
            ++n_s;
            sum.add(fvals[static_cast<std::size_t>(i)]);
        }
    r.survivors = n_s;
    if (n_s == 0) {
        r.no_survivor_failure = true;
        return r;
    }
    const double mean = sum.sum / static_cast<double>(n_s);
    Kahan var;
    for (long i = 0; i < n; ++i)
        if (alive[static_cast<std::size_t>(i)]) {
            const double dlt = fvals[static_cast<std::size_t>(i)] - mean;
            var.add(dlt * dlt);
        }
    r.estimate = mean;
    r.se = (n_s > 1) ? std::sqrt(var.sum / (static_cast<double>(n_s) * (n_s - 1.0))) : 0.0;
    return r;
}

// Stagewise selection-resampling: the population is pruned by killing and
// multinomially resampled back to size at each stage boundary, so the final
// population approximates the law conditioned on {T < τ} without weights.
struct SplitOutcome {
    bool died_out = false;
    double mean_f = 0.0;
    double log_prob = 0.0;
};

SplitOutcome splitting_group(const EigenSystem& sys, const InitialMeasure& nu,
                             const PathFunctional* fn, double t, double horizon, long pop,
                             const SdeConfig& cfg, std::uint64_t seed, std::uint64_t group) {
    const int d = sys.dim();
    const double h = cfg.step;
    const long steps_total = std::llround(horizon / h);
    const long nt = (fn != nullptr) ? std::llround(t / h) : -1;
    const double lam0 = sys.eigenvalue(0);
    long stage_steps = std::max<long>(1, std::llround(1.5 / (lam0 * h)));
    stage_steps = std::min(stage_steps, steps_total);

    const int ssize = (fn != nullptr) ? fn->state_size : 0;
    const int rec = d + ssize + d; // position | state | captured X_t
    std::vector<double> part(static_cast<std::size_t>(pop) * rec);
    std::vector<double> swap_buf;
    std::vector<char> alive(static_cast<std::size_t>(pop), 1);

    SplitOutcome out;
    {
        Philox rng(seed, (group << 40) | 0xFFFFFFFFull);
        for (long i = 0; i < pop; ++i) {
            double* p = part.data() + static_cast<std::size_t>(i) * rec;
            nu.sample(sys, rng, {p, static_cast<std::size_t>(d)});
            std::fill(p + d, p + rec, 0.0);
            if (!sys.domain().interior({p, static_cast<std::size_t>(d)})) alive[static_cast<std::size_t>(i)] = 0;
            else if (fn && nt >= 0)
                fn->accumulate({p + d, static_cast<std::size_t>(ssize)},
                               {p, static_cast<std::size_t>(d)}, 0.5 * h / t);
        }
    }

    long step_done = 0;
    std::uint64_t stage_id = 0;
    while (step_done < steps_total) {
        const long todo = std::min(stage_steps, steps_total - step_done);
        for (long i = 0; i < pop; ++i) {
            if (!alive[static_cast<std::size_t>(i)]) continue;
            double* p = part.data() + static_cast<std::size_t>(i) * rec;
            Philox rng(seed, (group << 40) | (stage_id << 24) | static_cast<std::uint64_t>(i));
            for (long k = 0; k < todo; ++k) {
                if (!step_killed(sys, h, rng, {p, static_cast<std::size_t>(d)}, nullptr)) {
                    alive[static_cast<std::size_t>(i)] = 0;
                    break;
                }
                const long gstep = step_done + k + 1;
                if (fn && gstep <= nt) {
                    const double w = ((gstep == nt) ? 0.5 : 1.0) * h / t;
                    fn->accumulate({p + d, static_cast<std::size_t>(ssize)},
                                   {p, static_cast<std::size_t>(d)}, w);
                    if (gstep == nt) std::copy(p, p + d, p + d + ssize);
                }
            }
        }
        step_done += todo;
        long n_surv = 0;
        for (long i = 0; i < pop; ++i)
            if (alive[static_cast<std::size_t>(i)]) ++n_surv;
        out.log_prob += std::log(static_cast<double>(n_surv) / static_cast<double>(pop));
        if (n_surv == 0) {
            out.died_out = true;
            return out;
        }
        if (step_done < steps_total) {
            // compact survivors, then multinomial resample back to pop
            swap_buf.resize(static_cast<std::size_t>(n_surv) * rec);
            long w = 0;
            for (long i = 0; i < pop; ++i)
                if (alive[static_cast<std::size_t>(i)]) {
                    std::copy(part.begin() + static_cast<std::ptrdiff_t>(i) * rec,
                              part.begin() + static_cast<std::ptrdiff_t>(i + 1) * rec,
                              swap_buf.begin() + static_cast<std::ptrdiff_t>(w) * rec);
                    ++w;
                }
            Philox rng(seed, (group << 40) | (stage_id << 24) | 0xFFFFFFull);
            for (long i = 0; i < pop; ++i) {
                const long pick = std::min<long>(n_surv - 1,
                    static_cast<long>(rng.uniform() * static_cast<double>(n_surv)));
                std::copy(swap_buf.begin() + static_cast<std::ptrdiff_t>(pick) * rec,
                          swap_buf.begin() + static_cast<std::ptrdiff_t>(pick + 1) * rec,
                          part.begin() + static_cast<std::ptrdiff_t>(i) * rec);
                alive[static_cast<std::size_t>(i)] = 1;
            }
        }
        ++stage_id;
    }

    if (fn) {
        Kahan sum;
        long n_fin = 0;
        for (long i = 0; i < pop; ++i) {
            if (!alive[static_cast<std::size_t>(i)]) continue;
            const double* p = part.data() + static_cast<std::size_t>(i) * rec;
            sum.add(fn->finalize({p + d, static_cast<std::size_t>(ssize)},
                                 {p + d + ssize, static_cast<std::size_t>(d)}));
            ++n_fin;
        }
        out.mean_f = sum.sum / static_cast<double>(n_fin);
    }
    return out;
}

CondResult estimate_rejection_splitting(const EigenSystem& sys, const InitialMeasure& nu,
                                        const PathFunctional& fn, double t, double horizon,
                                        long n, const SdeConfig& cfg, std::uint64_t seed,
                                        int threads) {
    const int groups = 10;
    const long pop = std::max<long>(2, n / groups);
    std::vector<SplitOutcome> outs(static_cast<std::size_t>(groups));
    parallel_for(static_cast<std::size_t>(groups), threads, [&](std::size_t g) {
        outs[g] = splitting_group(sys, nu, &fn, t, horizon, pop, cfg, seed,
                                  static_cast<std::uint64_t>(g));
    });
    CondResult r;
    r.used_splitting = true;
    std::vector<double> vals;
    for (const auto& o : outs)
        if (!o.died_out) vals.push_back(o.mean_f);
    r.survivors = static_cast<long>(vals.size()) * pop;
    r.failures = (groups - static_cast<long>(vals.size())) * pop;
    if (vals.empty()) {
        r.no_survivor_failure = true;
        return r;
    }
    Kahan sum;
    for (double v : vals) sum.add(v);
    const double mean = sum.sum / static_cast<double>(vals.size());
    Kahan var;
    for (double v : vals) var.add((v - mean) * (v - mean));
    r.estimate = mean;
    r.se = (vals.size() > 1)
               ? std::sqrt(var.sum / (static_cast<double>(vals.size()) * (vals.size() - 1.0)))
               : std::numeric_limits<double>::infinity();
    return r;
}

} // namespace

CondResult conditional_estimator(const EigenSystem& sys, const InitialMeasure& nu,
                                 const PathFunctional& fn, double t, double horizon,
                                 CondMethod method, long replicas, const SdeConfig& cfg,
                                 std::uint64_t seed, int threads) {
    if (!(t > 0.0) || horizon < t) throw std::invalid_argument("need 0 < t <= T");
    if (replicas < 1) throw std::invalid_argument("need at least one replica");
    if (method == CondMethod::h_importance)
        return estimate_h_importance(sys, nu, fn, t, horizon, replicas, cfg, seed, threads);
    // plain rejection only when survivors of {T < τ} are not exponentially rare
    const double expected = static_cast<double>(replicas) * sys.survival(nu, horizon);
    if (expected >= 25.0)
        return estimate_rejection_plain(sys, nu, fn, t, horizon, replicas, cfg, seed, threads);
    return estimate_rejection_splitting(sys, nu, fn, t, horizon, replicas, cfg, seed, threads);
}

SurvivalEstimate survival_mc(const EigenSystem& sys, const InitialMeasure& nu, double horizon,
                             const SdeConfig& cfg, long replicas, std::uint64_t seed,
                             int threads) {
    std::vector<char> alive(static_cast<std::size_t>(replicas), 0);
    parallel_for(static_cast<std::size_t>(replicas), threads, [&](std::size_t i) {
        Philox rng(seed, i);
        PathSample p = simulate_killed_path(sys, nu, horizon, cfg, rng, 0.0);
        alive[i] = p.survived ? 1 : 0;
    });
    long n_s = 0;
    for (char c : alive) n_s += c;
    SurvivalEstimate e;
    e.replicas = replicas;
    e.probability = static_cast<double>(n_s) / static_cast<double>(replicas);
    e.se = std::sqrt(e.probability * (1.0 - e.probability) / static_cast<double>(replicas));
    return e;
}

SurvivalEstimate survival_splitting(const EigenSystem& sys, const InitialMeasure& nu,
                                    double horizon, const SdeConfig& cfg, long population,
                                    int groups, std::uint64_t seed, int threads) {
    const long pop = std::max<long>(2, population / groups);
    std::vector<SplitOutcome> outs(static_cast<std::size_t>(groups));
    parallel_for(static_cast<std::size_t>(groups), threads, [&](std::size_t g) {
        outs[g] = splitting_group(sys, nu, nullptr, 0.0, horizon, pop, cfg, seed,
                                  static_cast<std::uint64_t>(g));
    });
    std::vector<double> probs;
    for (const auto& o : outs) probs.push_back(o.died_out ? 0.0 : std::exp(o.log_prob));
    Kahan sum;
    for (double v : probs) sum.add(v);
    SurvivalEstimate e;
    e.replicas = static_cast<long>(groups) * pop;
    e.probability = sum.sum / static_cast<double>(groups);
    Kahan var;
    for (double v : probs) var.add((v - e.probability) * (v - e.probability));
    e.se = (groups > 1) ? std::sqrt(var.sum / (static_cast<double>(groups) * (groups - 1.0)))
                        : std::numeric_limits<double>::infinity();
    return e;
}

GradientEstimate bismut_gradient(const EigenSystem& sys,
                                 const std::function<double(std::span<const double>)>& f,
                                 double t, std::span<const double> x, long replicas,
                                 const SdeConfig& cfg, std::uint64_t seed,
                                 const std::function<double(double)>& gamma_prime,
                                 int threads) {
    const int d = sys.dim();
    if (!sys.domain().interior(x)) throw std::invalid_argument("gradient point must be interior");
    auto gp = gamma_prime ? gamma_prime : [t](double) { return 1.0 / t; };
    const double thresh = cfg.phi0_threshold_rel * sys.phi0_sup();

    std::vector<double> contrib(static_cast<std::size_t>(replicas) * static_cast<std::size_t>(d),
                                0.0);
    std::vector<char> ok(static_cast<std::size_t>(replicas), 0);
    parallel_for(static_cast<std::size_t>(replicas), threads, [&](std::size_t i) {
        Philox rng(seed, i);
        double xb[kMaxDim], q[kMaxDim], integral[kMaxDim], hess[kMaxDim];
        std::copy(x.begin(), x.end(), xb);
        std::fill(q, q + d, 1.0);
        std::fill(integral, integral + d, 0.0);
        std::span<double> xs{xb, static_cast<std::size_t>(d)};
        PathSample diag;
        double s = 0.0;
        // Q is diagonal on product domains: the Bakry-Emery curvature of the
        // conditioned generator is -Hess(V + 2 log φ₀), a diagonal matrix here.
        auto hook = [&](std::span<const double> x_old, std::span<const double> xi, double hs,
                        double s0) {
            sys.hess_diag_v_2logphi0(x_old, {hess, static_cast<std::size_t>(d)});
            const double g = gp(s0);
            const double sqh = std::sqrt(hs);
            for (int k = 0; k < d; ++k) {
                integral[k] += g * q[k] * sqh * xi[static_cast<std::size_t>(k)];
                q[k] *= std::exp(hess[k] * hs);
            }
        };
        try {
            const auto plan = plan_steps(t, cfg.step);
            for (long k = 0; k < plan.full_steps; ++k)
                advance_h(sys, cfg, thresh, rng, xs, cfg.step, 0, s, diag, hook);
            if (plan.remainder > 0.0)
                advance_h(sys, cfg, thresh, rng, xs, plan.remainder, 0, s, diag, hook);
            const double fv = f(xs);
            for (int k = 0; k < d; ++k)
                contrib[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] =
                    fv * integral[k];
            ok[i] = 1;
        } catch (const ReplicaAbort&) {
            ok[i] = 0;
        }
    });

    GradientEstimate out;
    out.gradient.assign(static_cast<std::size_t>(d), 0.0);
    out.se.assign(static_cast<std::size_t>(d), 0.0);
    long good = 0;
    for (long i = 0; i < replicas; ++i)
        if (ok[static_cast<std::size_t>(i)]) ++good;
    if (good == 0) throw std::runtime_error("all gradient replicas aborted");
    for (int k = 0; k < d; ++k) {
        Kahan sum;
        for (long i = 0; i < replicas; ++i)
            if (ok[static_cast<std::size_t>(i)])
                sum.add(contrib[static_cast<std::size_t>(i) * static_cast<std::size_t>(d) +
                                static_cast<std::size_t>(k)]);
        const double mean = sum.sum / static_cast<double>(good);
        Kahan var;
        for (long i = 0; i < replicas; ++i)
            if (ok[static_cast<std::size_t>(i)]) {
                const double dv = contrib[static_cast<std::size_t>(i) * static_cast<std::size_t>(d) +
                                          static_cast<std::size_t>(k)] - mean;
                var.add(dv * dv);
            }
        out.gradient[static_cast<std::size_t>(k)] = mean;
        out.se[static_cast<std::size_t>(k)] =
            std::sqrt(var.sum / (static_cast<double>(good) * std::max<double>(good - 1.0, 1.0)));
    }
    return out;
}

} // namespace qsd
