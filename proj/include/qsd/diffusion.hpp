#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "qsd/rng.hpp"
#include "qsd/spectral.hpp"

namespace qsd {

// Euler-Maruyama configuration. The noise convention is dX = drift dt + √2 dB,
// i.e. each coordinate increment has variance 2h per step.
struct SdeConfig {
    double step = 1e-3;
    int substep_factor = 2;
    double phi0_threshold_rel = 0.05; // boundary layer trigger, relative to sup φ₀
    int max_halvings = 60;

    nlohmann::json to_json() const;
    static SdeConfig from_json(const nlohmann::json& j);
};

// One simulated trajectory on a uniform time grid. Positions are recorded up
// to the requested horizon (dim-major per grid point) while the path is alive.
struct PathSample {
    int dim = 1;
    double dt = 0.0;
    std::vector<double> positions;
    std::vector<double> final_position; // state at the simulation horizon
    bool survived = true;
    double tau = std::numeric_limits<double>::infinity();
    double weight = 1.0;
    std::uint64_t seed = 0;
    long halvings = 0;
    long exit_resamples = 0;

    std::size_t count() const {
        return positions.size() / static_cast<std::size_t>(dim);
    }
    std::span<const double> at(std::size_t i) const {
        return {positions.data() + i * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
};

// thrown when the boundary-layer recursion exceeds the halving budget
struct ReplicaAbort : std::runtime_error {
    explicit ReplicaAbort(const char* msg) : std::runtime_error(msg) {}
};

// Killed L-diffusion: Euler-Maruyama with per-face Brownian-bridge crossing
// corrections; exact for constant potentials by coordinate independence.
PathSample simulate_killed_path(const EigenSystem& sys, const InitialMeasure& nu, double horizon,
                                const SdeConfig& cfg, Philox& rng,
                                double record_until = std::numeric_limits<double>::infinity());

// Ground-state-conditioned diffusion (generator L + 2∇log φ₀): never exits;
// near the boundary steps are recursively halved and exiting proposals are
// resampled.
PathSample simulate_h_path(const EigenSystem& sys, const InitialMeasure& nu0, double horizon,
                           const SdeConfig& cfg, Philox& rng,
                           double record_until = std::numeric_limits<double>::infinity());

// Brownian-bridge crossing probability for one face given pre/post distances
// (variance rate 2, so the exponent is a·b/h).
inline double bridge_crossing_probability(double a, double b, double h) {
    return std::exp(-a * b / h);
}

// Streaming path functional over [0, t]: per-replica state is accumulated at
// grid nodes with trapezoid weights, then finalized with the state and X_t.
struct PathFunctional {
    int state_size = 0;
    std::function<void(std::span<double> state, std::span<const double> x, double w)> accumulate;
    std::function<double(std::span<const double> state, std::span<const double> x_t)> finalize;

    static PathFunctional constant_one();
    // ψ_m(t)² for one mode index m ≥ 1
    static PathFunctional mode_average_squared(const EigenSystem& sys, int m);
    // φ₀(X_t)
    static PathFunctional phi0_at_end(const EigenSystem& sys);
};

enum class CondMethod { rejection, h_importance };

struct CondResult {
    double estimate = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    double ess = 0.0;
    long survivors = 0;
    long failures = 0;
    bool no_survivor_failure = false;
    bool low_ess_warning = false;
    bool used_splitting = false;
};

// E[F(path on [0,t]) | T < τ]. Rejection averages survivors of {T < τ}
// (switching to stagewise selection-resampling when survivors would be
// exponentially rare); h-importance reweights conditioned paths by 1/φ₀(X_T).
CondResult conditional_estimator(const EigenSystem& sys, const InitialMeasure& nu,
                                 const PathFunctional& functional, double t, double horizon,
                                 CondMethod method, long replicas, const SdeConfig& cfg,
                                 std::uint64_t seed, int threads = 1);

struct SurvivalEstimate {
    double probability = 0.0;
    double se = 0.0;
    long replicas = 0;
};

// plain Monte-Carlo survival fraction P(T < τ)
SurvivalEstimate survival_mc(const EigenSystem& sys, const InitialMeasure& nu, double horizon,
                             const SdeConfig& cfg, long replicas, std::uint64_t seed,
                             int threads = 1);

// Stagewise splitting estimator of P(T < τ): product of per-stage surviving
// fractions with multinomial resampling, grouped for a nonparametric s.e.
SurvivalEstimate survival_splitting(const EigenSystem& sys, const InitialMeasure& nu,
                                    double horizon, const SdeConfig& cfg, long population,
                                    int groups, std::uint64_t seed, int threads = 1);

struct GradientEstimate {
    std::vector<double> gradient;
    std::vector<double> se;
};

// Derivative-free gradient of P_t⁰f at x via the damping factor Q driven by
// the Bakry-Emery curvature of the conditioned generator. gamma_prime is the
// derivative of the weight (default 1/t, i.e. γ(s) = s/t).
GradientEstimate bismut_gradient(const EigenSystem& sys,
                                 const std::function<double(std::span<const double>)>& f,
                                 double t, std::span<const double> x, long replicas,
                                 const SdeConfig& cfg, std::uint64_t seed,
                                 const std::function<double(double)>& gamma_prime = {},
                                 int threads = 1);

} // namespace qsd
