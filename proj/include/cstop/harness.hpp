#pragma once

// Run configuration, cross-solver comparison, the structural property suite
// and the refinement ladder behind the `cstop` command line.

#include "cstop/dp_solver.hpp"
#include "cstop/hjb_fd.hpp"
#include "cstop/io.hpp"
#include "cstop/tree_oracle.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cstop {

struct StartPoint {
    double t = 0.0;
    double x = 0.0;
    double y = 0.5;
};

struct RunConfig {
    std::filesystem::path problem_path;
    std::shared_ptr<const ProblemSpec> spec;
    std::string method = "dp";          // dp or pde
    AugmentedGrid grid;
    DpOptions dp;
    SchemeParams pde;                   // pde.grid mirrors grid
    StartPoint start;
    std::size_t paths = 10000;          // rollouts for simulate and the check suite
    PolicyLookup lookup = PolicyLookup::upper_y;
    Noise noise = Noise::rademacher;    // rollout increments; rademacher matches the DP lattice
    std::size_t oracle_steps = 200;
    ConstraintMode oracle_mode = ConstraintMode::inequality;
    std::size_t probes = 100;           // property budget
    std::string refine_kind = "grid";
    std::size_t refine_levels = 3;
    std::uint64_t seed = 1;
    std::filesystem::path out_dir = "out";
};

// Reads the problem file and its optional grid/solver/start/simulate/oracle/
// checks/refine sections. The grid defaults to 100 steps over [0, T],
// x in [-4, 4] with 81 nodes and y in [0, 0.8] with 81 nodes.
RunConfig load_run_config(const std::filesystem::path& problem_path);
void validate_run_config(const RunConfig& config);

ValueSurface solve_surface(const RunConfig& config);

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

struct CompareOptions {
    std::optional<double> x_lo, x_hi; // restrict compared nodes
    std::optional<double> y_lo, y_hi;
    bool first_level_only = false;
};

struct DiffReport {
    std::size_t n_nodes = 0;
    double max_abs = 0.0;
    double mean_abs = 0.0;
    double range = 0.0;     // value range of the reference (coarser) surface over compared nodes
    double max_rel = 0.0;   // max_abs / range
    double mean_rel = 0.0;
    double worst_t = 0.0, worst_x = 0.0, worst_y = 0.0;
    double worst_a = 0.0, worst_b = 0.0;
};

// Nodes of the coarser surface inside both domains; the finer one is
// interpolated there. Throws ValidationError when the domains do not overlap.
DiffReport compare(const ValueSurface& a, const ValueSurface& b, const CompareOptions& options = {});
json to_json(const DiffReport& report);

// ---------------------------------------------------------------------------
// Property suite
// ---------------------------------------------------------------------------

struct PropertyResult {
    std::string name;
    bool passed = true;
    bool skipped = false;
    std::string detail;
    std::map<std::string, double> margins;
    std::map<std::string, double> witness; // set whenever the property fails
};

struct PropertyReport {
    std::vector<PropertyResult> results;

    [[nodiscard]] bool all_passed() const;
    [[nodiscard]] const PropertyResult* find(const std::string& name) const;
};
json to_json(const PropertyReport& report);

struct CheckOptions {
    std::size_t probes = 100;
    std::uint64_t seed = 1;
    std::size_t rollout_paths = 0;  // 0 skips the rollout audit
    StartPoint start;
    PolicyLookup lookup = PolicyLookup::upper_y;
    Noise noise = Noise::rademacher;
};

// Runs, in order: y_monotonicity, boundary, sandwich, continuity,
// positive_stopping, dpp_consistency, rollout. Checks that need the extracted
// policy apply to dynamic-programming surfaces only and are skipped otherwise.
PropertyReport check_properties(const ValueSurface& surface, const CheckOptions& options);

// ---------------------------------------------------------------------------
// Refinement ladder
// ---------------------------------------------------------------------------

struct RefineRow {
    std::string label;
    std::size_t n_t = 0, n_x = 0, n_y = 0;
    double horizon = 0.0;
    double a_max = 0.0;
    std::size_t m = 0;
    double value_at_start = 0.0;
    std::optional<double> diff_previous; // max abs difference to the previous row on common nodes
};

// kind: grid (dt/4, dx/2, dy/2 per level up to the configured grid),
// controls (m doubling, then A_max doubling), horizon (T doubling).
std::vector<RefineRow> refine(const RunConfig& config, const std::string& kind, std::size_t levels);
json to_json(const std::vector<RefineRow>& rows);
std::string refine_csv(const std::vector<RefineRow>& rows);

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int validation = 2;
inline constexpr int numerical = 3;
inline constexpr int property = 4;
}

// cstop {solve|oracle|simulate|check|compare|refine} --problem FILE --out DIR --seed N ...
int run(int argc, char** argv);

} // namespace cstop
