#pragma once

// Problem data for optimal stopping under an expected-cost budget:
// state dynamics, running and stopping rewards, the cost rate, and the
// growth constants that bound them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cstop {

using Vector = std::vector<double>;

// Dense row-major matrix. Used for the diffusion coefficient (state x noise).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

using StateView = std::span<const double>;
using DriftFn = std::function<Vector(double t, StateView x)>;
using VolatilityFn = std::function<Matrix(double t, StateView x)>;
using ScalarFn = std::function<double(double t, StateView x)>;

// Declared Lipschitz bounds in x (sampled, not proven). Unset entries are not checked.
struct LipschitzBounds {
    std::optional<double> drift;
    std::optional<double> volatility;
    std::optional<double> running_reward;
    std::optional<double> cost_rate;
};

struct GrowthConstants {
    double exponent = 2.0;          // p >= 1
    double growth = 1.0;            // reward/cost growth constant, >= 1
    double moment = 1.0;            // C_p in the reward ceiling
    double cost_floor = 1.0;        // kappa(R) = cost_floor / (1 + R)^cost_floor_decay
    double cost_floor_decay = 0.0;
    LipschitzBounds lipschitz;

    [[nodiscard]] double cost_floor_at(double radius) const;
};

// A named function preset with its parameters, kept for provenance and export.
struct Preset {
    std::string name;
    std::map<std::string, double> params;

    [[nodiscard]] double param(const std::string& key, double fallback) const;
};

struct ProblemSpec {
    std::string name = "custom";
    std::size_t dim_state = 1;
    std::size_t dim_noise = 1;

    DriftFn drift;
    VolatilityFn volatility;
    ScalarFn running_reward;
    ScalarFn stop_reward;
    ScalarFn cost_rate;

    GrowthConstants constants;
    double horizon = 1.0;

    // Coefficients satisfy the extra time-regularity assumptions needed for
    // joint (t, x, y) continuity; enables the t-continuity property check.
    bool time_regular = false;

    // Presets the spec was built from, if any.
    std::optional<Preset> dynamics_preset;
    std::optional<Preset> running_preset;
    std::optional<Preset> stop_preset;
    std::optional<Preset> cost_preset;

    // Scalar conveniences for the one-dimensional solvers.
    [[nodiscard]] double drift_at(double t, double x) const;
    [[nodiscard]] double vol_at(double t, double x) const;
    [[nodiscard]] double running_at(double t, double x) const;
    [[nodiscard]] double stop_at(double t, double x) const;
    [[nodiscard]] double cost_at(double t, double x) const;

    [[nodiscard]] bool is_scalar() const { return dim_state == 1 && dim_noise == 1; }
};

// Throws ValidationError if the spec is not one-dimensional.
void require_scalar(const ProblemSpec& spec, const char* who);

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

// bm(mu, sigma), ou(theta, mean, sigma), gbm(mu, sigma); optional "dim" for
// vector state with diagonal noise.
void apply_dynamics_preset(ProblemSpec& spec, const Preset& preset);

// zero, constant(value), polynomial(c0..c8, cap_lo, cap_hi) in the first state
// coordinate, moment(a, q, b) = a*q*t^(q-1) + b.
ScalarFn make_scalar_preset(const Preset& preset);

// The two canonical driftless unit-volatility problems with unit cost rate.
ProblemSpec wald_square(double horizon = 1.0);
ProblemSpec wald_linear(double horizon = 1.0);

// ---------------------------------------------------------------------------
// Elementary functionals on discrete paths
// ---------------------------------------------------------------------------

// A sampled path X_{t0 + k dt}, k = 0..size()-1, stored row-major.
struct PathView {
    double t0 = 0.0;
    double dt = 0.0;
    std::size_t dim = 1;
    std::span<const double> states;

    [[nodiscard]] std::size_t size() const { return dim == 0 ? 0 : states.size() / dim; }
    [[nodiscard]] StateView at(std::size_t k) const { return states.subspan(k * dim, dim); }
    [[nodiscard]] double time(std::size_t k) const { return t0 + static_cast<double>(k) * dt; }
};

// Left-endpoint sum of f up to step tau plus the stopping reward at tau.
double reward(const ProblemSpec& spec, const PathView& path, std::size_t tau);

// Left-endpoint sum of the cost rate over the first s steps.
double accumulated_cost(const ProblemSpec& spec, const PathView& path, std::size_t s);

// Ceiling 2c(2 + C_p (1 + |x|^p)) on the absolute expected reward of any stopping rule.
double psi_bound(const ProblemSpec& spec, StateView x);
double psi_bound(const ProblemSpec& spec, double x);

// ---------------------------------------------------------------------------
// Sampled assumption checks
// ---------------------------------------------------------------------------

struct ValidationOptions {
    std::size_t samples = 256;
    double radius = 4.0;
    std::uint64_t seed = 7;
};

// Returns a list of human-readable violations; empty means the spec passed.
std::vector<std::string> check_spec(const ProblemSpec& spec, const ValidationOptions& options = {});

// Throws ValidationError listing the violations.
void validate(const ProblemSpec& spec, const ValidationOptions& options = {});

} // namespace cstop
