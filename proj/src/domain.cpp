#include "qsd/domain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "qsd/quadrature.hpp"

namespace qsd {

using std::numbers::pi;

double Potential::value(double x, double length) const {
    switch (kind) {
        case Kind::zero: return 0.0;
        case Kind::cosine: return amplitude * std::cos(2.0 * pi * frequency * x / length);
        case Kind::quadratic: {
            const double u = x / length - 0.5;
            return amplitude * u * u;
        }
    }
    return 0.0;
}

double Potential::deriv(double x, double length) const {
    switch (kind) {
        case Kind::zero: return 0.0;
        case Kind::cosine: {
            const double w = 2.0 * pi * frequency / length;
            return -amplitude * w * std::sin(w * x);
        }
        case Kind::quadratic: return 2.0 * amplitude * (x / length - 0.5) / length;
    }
    return 0.0;
}

double Potential::second_deriv(double x, double length) const {
    switch (kind) {
        case Kind::zero: return 0.0;
        case Kind::cosine: {
            const double w = 2.0 * pi * frequency / length;
            return -amplitude * w * w * std::cos(w * x);
        }
        case Kind::quadratic: return 2.0 * amplitude / (length * length);
    }
    return 0.0;
}

nlohmann::json Potential::to_json() const {
    const char* names[] = {"zero", "cosine", "quadratic"};
    nlohmann::json j;
    j["kind"] = names[static_cast<int>(kind)];
    if (kind != Kind::zero) {
        j["amplitude"] = amplitude;
        if (kind == Kind::cosine) j["frequency"] = frequency;
    }
    return j;
}

Potential Potential::from_json(const nlohmann::json& j) {
    Potential p;
    const std::string k = j.at("kind").get<std::string>();
    if (k == "zero") p.kind = Kind::zero;
    else if (k == "cosine") p.kind = Kind::cosine;
    else if (k == "quadratic") p.kind = Kind::quadratic;
    else throw std::invalid_argument("unknown potential kind: " + k);
    if (p.kind != Kind::zero) p.amplitude = j.at("amplitude").get<double>();
    if (p.kind == Kind::cosine && j.contains("frequency"))
        p.frequency = j.at("frequency").get<int>();
    return p;
}

namespace {
double normalizing_shift(double length, const Potential& v) {
    if (v.is_constant()) return -std::log(length);
    const auto mass = integrate_graded(
        [&](double x) { return std::exp(v.value(x, length)); }, length, 256, 2.0);
    return -std::log(mass.value);
}
} // namespace

Domain Domain::interval(double length, Potential v) {
    if (!(length > 0.0)) throw std::invalid_argument("interval length must be positive");
    Domain d;
    d.factors_.push_back({length, v, normalizing_shift(length, v)});
    return d;
}

Domain Domain::box(const std::vector<double>& lengths) {
    if (lengths.empty() || lengths.size() > 8)
        throw std::invalid_argument("box needs 1..8 factors");
    Domain d;
    for (double length : lengths) {
        if (!(length > 0.0)) throw std::invalid_argument("box factor length must be positive");
        d.factors_.push_back({length, Potential{}, -std::log(length)});
    }
    return d;
}

bool Domain::interior(std::span<const double> x, double margin) const {
    if (x.size() != factors_.size()) return false;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
        if (!(x[i] > margin) || !(x[i] < factors_[i].length - margin)) return false;
    }
    return true;
}

double Domain::boundary_distance(std::span<const double> x) const {
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < factors_.size(); ++i) {
        d = std::min(d, x[i]);
        d = std::min(d, factors_[i].length - x[i]);
    }
    return d;
}

double Domain::diameter2() const {
    double s = 0.0;
    for (const auto& f : factors_) s += f.length * f.length;
    return s;
}

double Domain::mu_log_density(std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t i = 0; i < factors_.size(); ++i)
        s += factors_[i].potential.value(x[i], factors_[i].length) + factors_[i].mu_log_norm;
    return s;
}

nlohmann::json Domain::to_json() const {
    nlohmann::json j;
    if (is_interval()) {
        j["kind"] = "interval";
        j["length"] = factors_[0].length;
        j["potential"] = factors_[0].potential.to_json();
    } else {
        j["kind"] = "box";
        std::vector<double> lengths;
        for (const auto& f : factors_) lengths.push_back(f.length);
        j["lengths"] = lengths;
    }
    return j;
}

Domain Domain::from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "interval") {
        Potential v;
        if (j.contains("potential")) v = Potential::from_json(j.at("potential"));
        return interval(j.at("length").get<double>(), v);
    }
    if (kind == "box") return box(j.at("lengths").get<std::vector<double>>());
    throw std::invalid_argument("unknown domain kind: " + kind);
}

} // namespace qsd
