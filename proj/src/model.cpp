#include "cstop/model.hpp"

#include "cstop/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace cstop {

namespace {

double norm(StateView x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

double distance(StateView a, StateView b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

double vector_distance(const Vector& a, const Vector& b) {
    return distance(StateView(a), StateView(b));
}

double matrix_distance(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return std::sqrt(s);
}

void check_range(const PathView& path, std::size_t index, const char* who) {
    if (index >= path.size()) {
        std::ostringstream msg;
        msg << who << ": index " << index << " beyond path of " << path.size() << " points";
        throw std::out_of_range(msg.str());
    }
}

} // namespace

double GrowthConstants::cost_floor_at(double radius) const {
    return cost_floor / std::pow(1.0 + std::max(radius, 0.0), cost_floor_decay);
}

double Preset::param(const std::string& key, double fallback) const {
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
}

double ProblemSpec::drift_at(double t, double x) const { return drift(t, StateView(&x, 1))[0]; }
double ProblemSpec::vol_at(double t, double x) const { return volatility(t, StateView(&x, 1))(0, 0); }
double ProblemSpec::running_at(double t, double x) const { return running_reward(t, StateView(&x, 1)); }
double ProblemSpec::stop_at(double t, double x) const { return stop_reward(t, StateView(&x, 1)); }
double ProblemSpec::cost_at(double t, double x) const { return cost_rate(t, StateView(&x, 1)); }

void require_scalar(const ProblemSpec& spec, const char* who) {
    if (!spec.is_scalar()) {
        std::ostringstream msg;
        msg << who << ": unsupported dimension (state " << spec.dim_state << ", noise " << spec.dim_noise
            << "); only scalar problems are supported";
        throw ValidationError(msg.str());
    }
}

void apply_dynamics_preset(ProblemSpec& spec, const Preset& preset) {
    const auto dim = static_cast<std::size_t>(preset.param("dim", 1.0));
    if (dim < 1) throw ValidationError("dynamics preset: dim must be >= 1");
    spec.dim_state = dim;
    spec.dim_noise = dim;

    const double sigma = preset.param("sigma", 1.0);
    if (preset.name == "bm") {
        const double mu = preset.param("mu", 0.0);
        spec.drift = [mu, dim](double, StateView) { return Vector(dim, mu); };
        spec.volatility = [sigma, dim](double, StateView) {
            Matrix m(dim, dim);
            for (std::size_t i = 0; i < dim; ++i) m(i, i) = sigma;
            return m;
        };
    } else if (preset.name == "ou") {
        const double theta = preset.param("theta", 1.0);
        const double mean = preset.param("mean", 0.0);
        spec.drift = [theta, mean](double, StateView x) {
            Vector out(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = theta * (mean - x[i]);
            return out;
        };
        spec.volatility = [sigma, dim](double, StateView) {
            Matrix m(dim, dim);
            for (std::size_t i = 0; i < dim; ++i) m(i, i) = sigma;
            return m;
        };
    } else if (preset.name == "gbm") {
        const double mu = preset.param("mu", 0.0);
        spec.drift = [mu](double, StateView x) {
            Vector out(x.begin(), x.end());
            for (double& v : out) v *= mu;
            return out;
        };
        spec.volatility = [sigma, dim](double, StateView x) {
            Matrix m(dim, dim);
            for (std::size_t i = 0; i < dim; ++i) m(i, i) = sigma * x[i];
            return m;
        };
    } else {
        throw ValidationError("unknown dynamics preset '" + preset.name + "' (expected bm, ou, gbm)");
    }
    spec.dynamics_preset = preset;
}

ScalarFn make_scalar_preset(const Preset& preset) {
    if (preset.name == "zero") {
        return [](double, StateView) { return 0.0; };
    }
    if (preset.name == "constant") {
        const double value = preset.param("value", 0.0);
        return [value](double, StateView) { return value; };
    }
    if (preset.name == "polynomial") {
        std::vector<double> coeffs;
        for (int k = 0; k <= 8; ++k) coeffs.push_back(preset.param("c" + std::to_string(k), 0.0));
        while (!coeffs.empty() && coeffs.back() == 0.0) coeffs.pop_back();
        const double lo = preset.param("cap_lo", -HUGE_VAL);
        const double hi = preset.param("cap_hi", HUGE_VAL);
        if (lo > hi) throw ValidationError("polynomial preset: cap_lo > cap_hi");
        return [coeffs, lo, hi](double, StateView x) {
            const double z = x[0];
            double acc = 0.0;
            for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * z + *it;
            return std::clamp(acc, lo, hi);
        };
    }
    if (preset.name == "moment") {
        const double a = preset.param("a", 0.0);
        const double q = preset.param("q", 1.0);
        const double b = preset.param("b", 1.0);
        if (q < 1.0) throw ValidationError("moment preset: q must be >= 1");
        return [a, q, b](double t, StateView) { return a * q * std::pow(std::max(t, 0.0), q - 1.0) + b; };
    }
    throw ValidationError("unknown function preset '" + preset.name +
                          "' (expected zero, constant, polynomial, moment)");
}

namespace {

ProblemSpec wald(const std::string& name, const Preset& stop, double horizon) {
    ProblemSpec spec;
    spec.name = name;
    apply_dynamics_preset(spec, Preset{"bm", {{"mu", 0.0}, {"sigma", 1.0}}});
    Preset zero{"zero", {}};
    Preset unit{"constant", {{"value", 1.0}}};
    spec.running_reward = make_scalar_preset(zero);
    spec.stop_reward = make_scalar_preset(stop);
    spec.cost_rate = make_scalar_preset(unit);
    spec.running_preset = zero;
    spec.stop_preset = stop;
    spec.cost_preset = unit;
    spec.horizon = horizon;
    spec.time_regular = true;
    spec.constants.exponent = 2.0;
    spec.constants.growth = 1.0;
    spec.constants.moment = 1.0;
    spec.constants.cost_floor = 1.0;
    spec.constants.lipschitz.drift = 0.0;
    spec.constants.lipschitz.volatility = 0.0;
    spec.constants.lipschitz.running_reward = 0.0;
    spec.constants.lipschitz.cost_rate = 0.0;
    return spec;
}

} // namespace

ProblemSpec wald_square(double horizon) {
    return wald("wald-sq", Preset{"polynomial", {{"c2", 1.0}}}, horizon);
}

ProblemSpec wald_linear(double horizon) {
    return wald("wald-lin", Preset{"polynomial", {{"c1", 1.0}}}, horizon);
}

double reward(const ProblemSpec& spec, const PathView& path, std::size_t tau) {
    check_range(path, tau, "reward");
    double running = 0.0;
    for (std::size_t k = 0; k < tau; ++k) running += spec.running_reward(path.time(k), path.at(k)) * path.dt;
    return running + spec.stop_reward(path.time(tau), path.at(tau));
}

double accumulated_cost(const ProblemSpec& spec, const PathView& path, std::size_t s) {
    check_range(path, s, "accumulated_cost");
    double cost = 0.0;
    for (std::size_t k = 0; k < s; ++k) cost += spec.cost_rate(path.time(k), path.at(k)) * path.dt;
    return cost;
}

double psi_bound(const ProblemSpec& spec, StateView x) {
    const auto& c = spec.constants;
    return 2.0 * c.growth * (2.0 + c.moment * (1.0 + std::pow(norm(x), c.exponent)));
}

double psi_bound(const ProblemSpec& spec, double x) { return psi_bound(spec, StateView(&x, 1)); }

std::vector<std::string> check_spec(const ProblemSpec& spec, const ValidationOptions& options) {
    std::vector<std::string> issues;
    auto report = [&issues](const std::string& what, double t, StateView x, double value) {
        std::ostringstream msg;
        msg << what << " at t=" << t << ", x=(";
        for (std::size_t i = 0; i < x.size(); ++i) msg << (i ? "," : "") << x[i];
        msg << "): " << value;
        issues.push_back(msg.str());
    };

    if (spec.dim_state == 0 || spec.dim_noise == 0) issues.emplace_back("dimensions must be positive");
    if (!spec.drift || !spec.volatility || !spec.running_reward || !spec.stop_reward || !spec.cost_rate) {
        issues.emplace_back("all coefficient functions must be set");
        return issues;
    }
    const auto& c = spec.constants;
    if (c.exponent < 1.0) issues.emplace_back("growth exponent p must be >= 1");
    if (c.growth < 1.0) issues.emplace_back("growth constant must be >= 1");
    if (c.moment <= 0.0) issues.emplace_back("moment constant must be positive");
    if (!(c.cost_floor > 0.0)) issues.emplace_back("cost floor must be positive");
    if (!(spec.horizon > 0.0) || !std::isfinite(spec.horizon)) issues.emplace_back("horizon must be positive and finite");
    if (!issues.empty()) return issues;

    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t l = spec.dim_state;

    // Uniform point in the ball of the given radius.
    auto sample_ball = [&](double radius) {
        Vector x(l);
        for (double& v : x) v = normal(rng);
        const double n = std::max(norm(x), 1e-300);
        const double r = radius * std::pow(unit(rng), 1.0 / static_cast<double>(l));
        for (double& v : x) v *= r / n;
        return x;
    };

    const Vector origin(l, 0.0);
    const double radii[] = {1.0, 2.0, options.radius};
    for (std::size_t s = 0; s < options.samples; ++s) {
        const double t = spec.horizon * unit(rng);
        for (double radius : radii) {
            const Vector x = sample_ball(radius);
            const double g = spec.cost_rate(t, x);
            if (!std::isfinite(g) || g <= 0.0) report("cost rate not strictly positive", t, x, g);
            else if (g < c.cost_floor_at(radius)) report("cost rate below declared floor for radius " + std::to_string(radius), t, x, g);
            const double pi = spec.stop_reward(t, x);
            const double f = spec.running_reward(t, x);
            if (!std::isfinite(pi) || !std::isfinite(f)) report("non-finite reward", t, x, pi);
        }
        const double pi0 = spec.stop_reward(t, origin);
        if (std::abs(pi0) > c.growth * (1.0 + 1e-12)) report("|stop reward at origin| exceeds growth constant", t, origin, pi0);

        const Vector x1 = sample_ball(options.radius);
        const Vector x2 = sample_ball(options.radius);
        const double dx = vector_distance(x1, x2);
        if (dx < 1e-9) continue;
        auto check_lip = [&](const std::optional<double>& bound, double quotient, const char* what) {
            if (bound && quotient > *bound * (1.0 + 1e-9) + 1e-12) report(std::string("Lipschitz quotient of ") + what + " exceeds declared bound", t, x1, quotient);
        };
        const auto& lip = c.lipschitz;
        check_lip(lip.drift, vector_distance(spec.drift(t, x1), spec.drift(t, x2)) / dx, "drift");
        check_lip(lip.volatility, matrix_distance(spec.volatility(t, x1), spec.volatility(t, x2)) / dx, "volatility");
        check_lip(lip.running_reward, std::abs(spec.running_reward(t, x1) - spec.running_reward(t, x2)) / dx, "running reward");
        check_lip(lip.cost_rate, std::abs(spec.cost_rate(t, x1) - spec.cost_rate(t, x2)) / dx, "cost rate");
        if (issues.size() > 16) break;
    }
    return issues;
}

void validate(const ProblemSpec& spec, const ValidationOptions& options) {
    const auto issues = check_spec(spec, options);
    if (issues.empty()) return;
    std::ostringstream msg;
    msg << "problem '" << spec.name << "' failed validation:";
    for (const auto& issue : issues) msg << "\n  - " << issue;
    throw ValidationError(msg.str());
}

} // namespace cstop
