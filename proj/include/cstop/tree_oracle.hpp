#pragma once

// Exact constrained optimal stopping on a recombining binomial lattice.
//
// A randomized stopping rule is described by its occupation measure: the
// probability mass stop(k,j) stopped at node (k,j) and cont(k,j) passing
// through it. Expected reward and expected cost are linear in that measure,
// so the budgeted problem is a linear program. Its Lagrangian dual is a
// family of unconstrained Snell envelopes with the cost rate as a penalty.

#include "cstop/model.hpp"
#include "cstop/sde_sim.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cstop {

struct Tree {
    double t0 = 0.0;
    double x0 = 0.0;
    double dt = 0.0;
    std::size_t n_steps = 0;
    double sigma_eff = 1.0;

    // Per node, flattened with index(k, j) = k(k+1)/2 + j, j = 0..k counting up moves.
    std::vector<double> state;
    std::vector<double> stop_reward;
    std::vector<double> running;   // reward rate f
    std::vector<double> cost_rate; // g
    std::vector<double> p_up;

    [[nodiscard]] static constexpr std::size_t index(std::size_t k, std::size_t j) { return k * (k + 1) / 2 + j; }
    [[nodiscard]] std::size_t n_nodes() const { return index(n_steps + 1, 0); }
    [[nodiscard]] double time(std::size_t k) const { return t0 + static_cast<double>(k) * dt; }
    [[nodiscard]] double spacing() const;
};

struct TreeOptions {
    // Lattice volatility; defaults to |sigma(t, x)| at the root.
    std::optional<double> sigma_eff;
};

// Drift enters through the up-probability 1/2 + b sqrt(dt) / (2 sigma_eff), clamped to [0, 1].
Tree build_tree(const ProblemSpec& spec, double t, double x, std::size_t n_steps, double dt,
                const TreeOptions& options = {});

enum class ConstraintMode { inequality, equality };
const char* to_string(ConstraintMode mode);

struct OracleSolution {
    double value = 0.0;          // primal optimum (LP) or dual optimum (Lagrangian)
    double primal_value = 0.0;   // value of the returned stopping plan
    double multiplier = 0.0;     // lambda*
    double dual_value = 0.0;     // snell(lambda*) + lambda* y
    std::vector<double> stop_prob; // per node, in [0, 1]; 1 on the last level
    double achieved_cost = 0.0;
    ConstraintMode mode = ConstraintMode::inequality;
    std::string method;
    std::size_t iterations = 0;
};

// Exact reward and cost of a randomized stopping plan by forward propagation.
struct PlanEvaluation {
    double value = 0.0;
    double cost = 0.0;
    std::vector<double> reach; // probability of arriving at each node
};
PlanEvaluation evaluate_plan(const Tree& tree, const std::vector<double>& stop_prob);

// Largest expected cost any rule can incur (never stop before the last level).
double max_achievable_cost(const Tree& tree);

enum class LpMethod {
    automatic,  // simplex up to max_simplex_steps, structured above
    simplex,    // dense two-phase simplex on the occupation-measure LP
    structured  // two-policy mixture at the dual breakpoint, certified by the dual bound
};

struct LpOptions {
    LpMethod method = LpMethod::automatic;
    std::size_t max_simplex_steps = 24;
};

OracleSolution solve_lp(const Tree& tree, double y, ConstraintMode mode = ConstraintMode::inequality,
                        const LpOptions& options = {});

// Snell envelope of the penalized problem: stopping pays pi, each continued
// step pays (f - lambda g) dt. Returns the root value.
double snell(const Tree& tree, double lambda);

struct SnellPolicy {
    double root_value = 0.0;
    std::vector<double> stop_prob; // 0 or 1 per node
};
// Ties between stopping and continuing go to stopping when prefer_stop is set.
SnellPolicy snell_policy(const Tree& tree, double lambda, bool prefer_stop);

OracleSolution solve_lagrangian(const Tree& tree, double y, double tol_lambda = 1e-12,
                                ConstraintMode mode = ConstraintMode::inequality);

// Best non-randomized (path-dependent) stopping time by Pareto frontiers of
// (cost, value) per node. Limited to small lattices.
struct PureSolution {
    double value = 0.0;
    double cost = 0.0;
    std::size_t frontier_size = 0; // at the root
};
PureSolution solve_pure(const Tree& tree, double y, std::size_t max_steps = 10);

// Monte Carlo replay of a stopping plan on the lattice.
struct ReplaySummary {
    MeanSe reward;
    MeanSe cost;
};
ReplaySummary replay_plan(const Tree& tree, const std::vector<double>& stop_prob, std::size_t n_paths,
                          std::uint64_t seed);

} // namespace cstop
