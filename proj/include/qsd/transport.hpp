#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "qsd/measures.hpp"
#include "qsd/spectral.hpp"

namespace qsd {

struct DiscreteMeasure {
    int dim = 1;
    std::vector<double> points;  // n × dim
    std::vector<double> weights; // nonnegative, unit total mass

    std::size_t size() const { return weights.size(); }
    std::span<const double> point(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    static DiscreteMeasure from_empirical(const EmpiricalMeasure& m);
    void validate() const; // weights ≥ 0, total mass within 1e-12 of 1
};

struct OtResult {
    double cost = 0.0; // W_p^p (squared distance for p = 2)
    std::string method;
    int iterations = 0;
    double marginal_residual = 0.0;
    bool converged = true;
    bool debiased = false;
    double ref_bias = std::numeric_limits<double>::quiet_NaN();
};

// Exact 1-D cost through the quantile coupling, discrete vs discrete.
OtResult w2_1d_exact(const DiscreteMeasure& a, const DiscreteMeasure& b, int p = 2);

// Smooth 1-D distribution given by its CDF/density; seg_int2, when set, is
// the closed-form segment integral ∫ (x-y)² dF(y) used on the p = 2 path.
struct SmoothCdf {
    std::function<double(double)> cdf;
    std::function<double(double)> density;
    std::function<double(double, double, double)> seg_int2;
    double lo = 0.0, hi = 1.0;
};

// Exact 1-D cost of a discrete measure against a smooth CDF.
OtResult w2_1d_exact_vs_cdf(const DiscreteMeasure& a, const SmoothCdf& f, int p = 2);

// Exact squared-Euclidean optimal transport by min-cost flow on the dense
// bipartite graph (successive shortest paths with potentials).
OtResult exact_discrete_ot(const DiscreteMeasure& a, const DiscreteMeasure& b);

struct SinkhornParams {
    double eps = 0.0; // 0 → 0.01 · diam² of the point cloud
    int max_iters = 10000;
    double tol = 1e-8; // L¹ marginal residual
    bool debias = true;
};

// Entropic OT in the scaling form with periodic log-absorption; with
// debias the Sinkhorn divergence OT(a,b) − ½OT(a,a) − ½OT(b,b) is returned.
OtResult sinkhorn_w2(const DiscreteMeasure& a, const DiscreteMeasure& b,
                     const SinkhornParams& params);

// Deterministic low-discrepancy discretization of μ₀ (Halton points through
// the factor quantiles).
DiscreteMeasure ground_reference_cloud(const EigenSystem& sys, int n);

// Prepared reference for repeated distance evaluations against μ₀.
struct GroundReference {
    DiscreteMeasure cloud;
    double eps = 0.0;
    double self_cost = 0.0; // cached OT_ε(b,b) for debiasing
    bool has_self = false;
};

GroundReference make_ground_reference(const EigenSystem& sys, int n, double eps);

struct W2AgainstGroundParams {
    int n_ref = 1024;
    std::string method = "auto"; // auto | quantile | lp | sinkhorn
    SinkhornParams sinkhorn;
    bool report_ref_bias = true; // compare n_ref against 2·n_ref
};

// W₂(μ_t, μ₀)²: quantile method in d = 1, exact LP or debiased Sinkhorn
// against the reference cloud in d ≥ 2.
OtResult w2_against_ground(const EmpiricalMeasure& mu_t, const EigenSystem& sys,
                           const W2AgainstGroundParams& params);
// Same, with a prepared reference (self-transport cached by the caller).
OtResult w2_against_ground_prepared(const EmpiricalMeasure& mu_t, const EigenSystem& sys,
                                    const GroundReference& ref, const std::string& method,
                                    const SinkhornParams& base);

} // namespace qsd
