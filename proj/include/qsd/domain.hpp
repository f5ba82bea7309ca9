#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace qsd {

// Smooth scalar potential on an interval factor. The additive normalizing
// constant lives in Factor::mu_log_norm, not here; the generator only sees
// the derivatives.
struct Potential {
    enum class Kind { zero, cosine, quadratic };
    Kind kind = Kind::zero;
    double amplitude = 0.0;
    int frequency = 1;

    bool is_constant() const { return kind == Kind::zero || amplitude == 0.0; }
    double value(double x, double length) const;
    double deriv(double x, double length) const;
    double second_deriv(double x, double length) const;

    nlohmann::json to_json() const;
    static Potential from_json(const nlohmann::json& j);
};

struct Factor {
    double length = 1.0;
    Potential potential;
    double mu_log_norm = 0.0; // shift making e^{V+shift} dx a probability measure
};

// Flat product domain: a single interval with smooth potential, or a box of
// up to 8 zero-potential interval factors.
class Domain {
public:
    static Domain interval(double length, Potential v = {});
    static Domain box(const std::vector<double>& lengths);

    int dim() const { return static_cast<int>(factors_.size()); }
    bool is_interval() const { return factors_.size() == 1; }
    const Factor& factor(int i) const { return factors_.at(static_cast<std::size_t>(i)); }

    bool interior(std::span<const double> x, double margin = 0.0) const;
    double boundary_distance(std::span<const double> x) const;
    double diameter2() const;
    double mu_log_density(std::span<const double> x) const;

    nlohmann::json to_json() const;
    static Domain from_json(const nlohmann::json& j);

private:
    std::vector<Factor> factors_;
};

} // namespace qsd
