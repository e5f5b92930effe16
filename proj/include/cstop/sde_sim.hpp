#pragma once

// Euler-Maruyama simulation of the state, and rollouts of the joint
// (state, remaining budget) process under a feedback policy.

#include "cstop/model.hpp"

#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace cstop {

// Independent engine for path `stream` of a batch seeded with `seed`.
// Paths never share state, so serial and parallel runs agree bit for bit.
std::mt19937_64 path_engine(std::uint64_t seed, std::uint64_t stream);

struct PathBatch {
    double t0 = 0.0;
    Vector x0;
    double dt = 0.0;
    std::size_t n_steps = 0;
    std::size_t n_paths = 0;
    std::uint64_t seed = 0;
    std::size_t dim = 1;
    std::size_t noise_dim = 1;

    std::vector<double> values;     // [path][step][dim], n_steps + 1 points per path
    std::vector<double> increments; // [path][step][noise_dim], Brownian increments

    [[nodiscard]] PathView path(std::size_t i) const;
    [[nodiscard]] std::span<const double> increments_of(std::size_t i) const;
};

PathBatch simulate_state(const ProblemSpec& spec, double t, StateView x, double dt, std::size_t n_steps,
                         std::size_t n_paths, std::uint64_t seed);

// Feedback rule on (t, x, remaining budget y). Returns true to stop now;
// otherwise writes the budget volatility a (one entry per noise dimension).
class Policy {
public:
    virtual ~Policy() = default;
    virtual bool decide(double t, StateView x, double y, std::span<double> control, bool& extrapolated) const = 0;
};

class StopImmediately final : public Policy {
public:
    bool decide(double, StateView, double, std::span<double>, bool&) const override { return true; }
};

// Never stops voluntarily; applies a fixed control until the budget runs out.
class ConstantControl final : public Policy {
public:
    explicit ConstantControl(Vector control) : control_(std::move(control)) {}
    bool decide(double, StateView, double, std::span<double> control, bool&) const override;

private:
    Vector control_;
};

enum class StopReason { budget, policy, horizon };
const char* to_string(StopReason reason);

struct PathOutcome {
    static constexpr std::size_t no_hit = std::numeric_limits<std::size_t>::max();

    double reward = 0.0;
    double cost = 0.0;           // truncated at the budget crossing
    std::size_t stop_index = 0;  // index of the node where the reward is paid
    std::size_t hit_index = no_hit; // first index with Y <= 0
    double stop_time = 0.0;      // elapsed time to stopping (crossing-interpolated on budget hits)
    StopReason reason = StopReason::horizon;
    bool extrapolated = false;
};

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

MeanSe mean_se(std::span<const double> samples);

struct BatchSummary {
    std::size_t n_paths = 0;
    MeanSe reward;
    MeanSe cost;
    MeanSe stop_time;
    std::size_t budget_hits = 0;
    std::size_t policy_stops = 0;
    std::size_t horizon_stops = 0;
    std::size_t extrapolated_paths = 0;
};

enum class Noise {
    gaussian,   // Euler-Maruyama increments N(0, dt)
    rademacher  // +-sqrt(dt) with equal probability: the weak scheme matching the binomial lattice
};

struct RolloutOptions {
    Noise noise = Noise::gaussian;
    bool keep_traces = false; // store X, Y, a and cost per step (memory: O(paths * steps))
};

struct ControlledBatch {
    double t0 = 0.0;
    Vector x0;
    double y0 = 0.0;
    double dt = 0.0;
    std::size_t n_steps = 0;
    std::size_t n_paths = 0;
    std::uint64_t seed = 0;
    std::size_t noise_dim = 1;

    std::vector<PathOutcome> outcomes;

    // Present only with keep_traces. The state keeps evolving after stopping;
    // budget and cost are frozen at their stopped values.
    PathBatch state;
    std::vector<double> budget;  // [path][step], n_steps + 1 per path
    std::vector<double> cost;    // [path][step], running cost, n_steps + 1 per path
    std::vector<double> control; // [path][step][noise_dim]

    [[nodiscard]] BatchSummary summary() const;
};

// Rolls out Y_{k+1} = Y_k + a_k . dW_k - g(t_k, X_k) dt alongside the Euler state.
// A path stops at the first of: policy stop, Y <= 0 (reward paid at that node,
// cost truncated by linear interpolation to the crossing), or the last step.
ControlledBatch simulate_controlled(const ProblemSpec& spec, double t, StateView x, double y, const Policy& policy,
                                    double dt, std::size_t n_steps, std::size_t n_paths, std::uint64_t seed,
                                    const RolloutOptions& options = {});

struct MomentReport {
    double q = 1.0;
    double start_norm = 0.0;
    MeanSe sup_moment;            // E[sup_s |X_s|^q]
    double envelope_ratio = 0.0;  // sup_moment / (1 + |x0|^q)
    bool has_increment = false;
    MeanSe increment_moment;      // E[sup_{k <= window} |X_{tau+k} - X_tau|^q]
};

// Moments of a batch. If stop_indices is non-empty (one per path), also the
// oscillation moment over `window` steps after each stopping index.
MomentReport moment_check(const PathBatch& batch, double q, std::span<const std::size_t> stop_indices = {},
                          std::size_t window = 0);

struct EnvelopeFit {
    double constant = 0.0;     // smallest C with E[sup|X|^q] <= C (1 + |x|^q) at every start
    double min_ratio = 0.0;
    bool fits = false;         // every ratio finite and positive
};

EnvelopeFit fit_moment_envelope(std::span<const MomentReport> reports);

} // namespace cstop
