#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include <json.hpp>

#include "qsd/domain.hpp"
#include "qsd/rng.hpp"

namespace qsd {

class EigenSystem;

// Limit constant of the convergence theorem: partial sum of 2/(λ_m−λ₀)²
// plus a tail bound calibrated from the computed spectrum. Divergent for d ≥ 4.
struct LimitConstant {
    double partial_sum = 0.0;
    double tail_bound = 0.0;
    bool divergent = false;
    double alpha0 = 0.0; // calibrated Weyl constant used for the tail
};

// Initial distribution for the diffusion; supports the ν(φ_m) pairings the
// spectral survival formula needs and exact sampling.
struct InitialMeasure {
    enum class Kind {
        dirac,        // δ_x
        ground,       // μ₀ = φ₀²μ
        ground_tilted // ∝ φ₀ μ₀ (the φ₀-reweighted ground measure)
    };
    Kind kind = Kind::ground;
    std::vector<double> point;

    static InitialMeasure dirac(std::vector<double> x) { return {Kind::dirac, std::move(x)}; }
    static InitialMeasure ground() { return {Kind::ground, {}}; }
    static InitialMeasure ground_tilted() { return {Kind::ground_tilted, {}}; }

    double pair_phi(const EigenSystem& sys, int m) const; // ν(φ_m)
    void sample(const EigenSystem& sys, Philox& rng, std::span<double> out) const;
    // sample from the law ∝ φ₀ dν, the h-estimator's start distribution
    void sample_tilted(const EigenSystem& sys, Philox& rng, std::span<double> out) const;

    nlohmann::json to_json() const;
    static InitialMeasure from_json(const nlohmann::json& j);
};

// Ground-state measure μ₀ = φ₀²μ: factor CDFs, quantiles, exact sampling.
class GroundMeasure {
public:
    double density(std::span<const double> x) const; // w.r.t. Lebesgue
    double factor_cdf(int i, double xi) const;
    double factor_quantile(int i, double u) const;
    void sample(Philox& rng, std::span<double> out) const;
    double total_mass() const;

private:
    friend class EigenSystem;
    const EigenSystem* sys_ = nullptr;
};

// Dirichlet eigensystem of −L on a supported domain, with the ordered
// eigenpairs, evaluable eigenfunctions, the h-transform mode ratios
// φ_m/φ₀, quadrature grids and the spectral kernels built on top.
// Immutable after construction; safe to share across threads.
class EigenSystem {
public:
    // Closed form for constant potential, finite differences otherwise.
    static EigenSystem solve_interval(double length, const Potential& v, int modes,
                                      int grid_points);
    static EigenSystem closed_form_interval(double length, int modes);
    // Always solves the Sturm-Liouville discretization (used for convergence checks).
    static EigenSystem sturm_liouville_fd(double length, const Potential& v, int modes,
                                          int grid_points);
    static EigenSystem tensorize_box(const std::vector<EigenSystem>& factors, int modes);
    static EigenSystem for_domain(const Domain& dom, int modes, int grid_points = 0);

    const Domain& domain() const { return domain_; }
    int dim() const { return domain_.dim(); }
    int mode_count() const { return static_cast<int>(lambda_.size()); }
    double eigenvalue(int m) const { return lambda_[static_cast<std::size_t>(m)]; }
    double gap(int m) const { return lambda_[static_cast<std::size_t>(m)] - lambda_[0]; }
    const std::vector<int>& multi_index(int m) const {
        return multi_index_[static_cast<std::size_t>(m)];
    }

    // eigenfunction fields
    double phi(int m, std::span<const double> x) const;
    void grad_phi(int m, std::span<const double> x, std::span<double> out) const;
    double hat(int m, std::span<const double> x) const; // (φ_m/φ₀)(x)
    void grad_hat(int m, std::span<const double> x, std::span<double> out) const;
    void phi_all(std::span<const double> x, std::span<double> out) const;
    void hat_all(std::span<const double> x, std::span<double> out) const;
    double phi0(std::span<const double> x) const { return phi(0, x); }
    double phi0_sup() const;
    void grad_log_phi0(std::span<const double> x, std::span<double> out) const;
    // Hessian of V + 2 log φ₀ is diagonal on product domains
    void hess_diag_v_2logphi0(std::span<const double> x, std::span<double> out) const;

    double mu_phi(int m) const { return mu_phi_[static_cast<std::size_t>(m)]; }
    const GroundMeasure& ground() const { return ground_; }

    // quadrature of a field against μ₀ with a Richardson-style error estimate
    double integrate_mu0(const std::function<double(std::span<const double>)>& f,
                         double* error = nullptr) const;
    // fixed evaluation grid (graded 1-D / tensor 2-D / μ₀ Monte Carlo for d ≥ 3)
    int eval_grid_size() const { return static_cast<int>(eval_w0_.size()); }
    std::span<const double> eval_grid_point(int i) const;
    double eval_grid_weight0(int i) const { return eval_w0_[static_cast<std::size_t>(i)]; }

    // spectral kernels and semigroups
    double heat_kernel(double t, std::span<const double> x, std::span<const double> y,
                       double* tail_bound = nullptr,
                       double tol = std::numeric_limits<double>::infinity()) const;
    double h_heat_kernel(double t, std::span<const double> x, std::span<const double> y,
                         double* tail_bound = nullptr) const;
    double survival(const InitialMeasure& nu, double t) const;
    double h_apply(const std::function<double(std::span<const double>)>& f, double t,
                   std::span<const double> x, double* quad_error = nullptr) const;

    LimitConstant limit_constant() const;
    double heat_tail_bound(double t, int from_mode) const;

    // calibration diagnostics
    double sup_norm(int m) const { return sup_norm_[static_cast<std::size_t>(m)]; }
    double hat_sup(int m) const { return hat_sup_[static_cast<std::size_t>(m)]; }
    const std::vector<double>& normalization_residuals() const { return norm_resid_; }

    nlohmann::json to_json() const;
    static EigenSystem from_json(const nlohmann::json& j);

    EigenSystem(const EigenSystem&);
    EigenSystem& operator=(const EigenSystem&) = delete;
    EigenSystem(EigenSystem&&) noexcept;
    ~EigenSystem();

private:
    friend class GroundMeasure;
    friend struct InitialMeasure;
    EigenSystem();
    struct Modes1D;
    void finalize();

    Domain domain_;
    std::vector<std::unique_ptr<Modes1D>> factors_;
    std::vector<double> lambda_;
    std::vector<std::vector<int>> multi_index_;
    std::vector<double> mu_phi_;
    std::vector<double> sup_norm_;
    std::vector<double> hat_sup_;
    std::vector<double> norm_resid_;
    GroundMeasure ground_;
    int fd_grid_points_ = 0;

    // evaluation grid (fine) plus a coarser one for error estimates
    std::vector<double> eval_pts_; // flattened, dim-major per point
    std::vector<double> eval_w0_;  // μ₀ weights
    std::vector<double> eval_wmu_; // μ weights (d ≤ 2 only)
    std::vector<double> coarse_pts_;
    std::vector<double> coarse_w0_;
};

// Halton radical-inverse sequence, used for deterministic reference clouds.
double radical_inverse(unsigned base, std::uint64_t index);
extern const unsigned kHaltonBases[8];

} // namespace qsd
