#pragma once

// Backward dynamic programming on the augmented (t, x, y) grid.
//
// The remaining budget y is carried as a state. Over one step the state moves
// to x +- sigma sqrt(dt) (plus drift) and the budget to y - g dt +- a sqrt(dt)
// with the same coin flip, so a controls how budget is shifted between the
// two outcomes. Admissible controls keep both branches nonnegative
// (|a| sqrt(dt) <= y - g dt); with less than g dt left the only choice is to
// stop. A branch whose budget reaches zero stops at the next node. A node may
// also discard budget and act as a lower node of its column, which keeps the
// computed surface exactly nondecreasing in y despite interpolation rounding.

#include "cstop/model.hpp"
#include "cstop/sde_sim.hpp"
#include "cstop/surface.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

namespace cstop {

// {0, +-a_max * i / m}, ordered by increasing |a| (positive first).
std::vector<double> make_control_set(double a_max, std::size_t m);

struct DpOptions {
    std::optional<double> a_max;  // unset: 4 * max|sigma V_xy| from a zero-control pilot solve
    double a_max_floor = 1.0;     // lower bound for the automatic choice
    std::size_t m = 8;
    double stencil_reach = 2.0;   // sigma sqrt(dt) may span at most this many x cells
};

// Throws ValidationError when sigma sqrt(dt) exceeds stencil_reach * dx.
void check_dp_stencil(const ProblemSpec& spec, const AugmentedGrid& grid, double stencil_reach);

ValueSurface solve_dpp(std::shared_ptr<const ProblemSpec> spec, const AugmentedGrid& grid,
                       const DpOptions& options = {});

// Unconstrained optimal stopping on the same x grid and interpolation, as [k][i].
std::vector<double> unconstrained_snell(const ProblemSpec& spec, const AugmentedGrid& grid);

enum class PolicyLookup {
    nearest,  // nearest (x, y) node
    upper_y   // nearest x node, next y node at or above y
};

class FeedbackPolicy final : public Policy {
public:
    AugmentedGrid grid;
    std::vector<std::uint8_t> stop;  // [k][i][j] for k < n_t; the last level always stops
    std::vector<double> control;     // maximizing a at each node
    std::vector<std::uint32_t> source; // y index whose decision the node uses (budget above it is discarded)
    std::vector<double> controls;    // the control set the surface was solved with
    PolicyLookup lookup = PolicyLookup::upper_y;
    std::shared_ptr<const ProblemSpec> spec; // caps controls at the budget left after the step's cost

    [[nodiscard]] std::size_t index(std::size_t k, std::size_t i, std::size_t j) const {
        return (k * grid.n_x + i) * grid.n_y + j;
    }

    bool decide(double t, StateView x, double y, std::span<double> a, bool& extrapolated) const override;
};

// Re-derives the maximizing decision at every node. Ties go to the smaller
// |a|, then to stopping.
FeedbackPolicy extract_policy(const ValueSurface& surface);

// Value of following `policy` from level k_from back to level k_start, using
// the stored surface at k_from as terminal data. Returns the slice at k_start.
std::vector<double> recompose(const ValueSurface& surface, const FeedbackPolicy& policy, std::size_t k_start,
                              std::size_t k_from);

struct ConsistencyProbe {
    std::size_t k = 0, i = 0, j = 0, k_mid = 0;
    double value = 0.0;       // V(t, x, y)
    double recomposed = 0.0;  // policy value up to the intermediate level plus V there
};

struct ConsistencyReport {
    std::size_t n_probes = 0;
    double max_discrepancy = 0.0;
    double mean_discrepancy = 0.0;
    double tolerance = 0.0;   // 2 x max(dt, dx^2, dy)
    bool passed = false;
    ConsistencyProbe worst;
};

ConsistencyReport dpp_consistency(const ValueSurface& surface, std::size_t n_probes, std::uint64_t seed);

// max(dt, dx^2, dy): the scheme's one-step truncation scale.
double one_step_tolerance(const AugmentedGrid& grid);

} // namespace cstop
