#pragma once

// Explicit monotone finite differences for the obstacle form of the
// budget-augmented HJB equation
//
//   max(pi - u, -u_t - 1/2 sigma^2 u_xx - b u_x + g u_y - H - f) = 0,
//   H = sup_{|a| <= A} { 1/2 a^2 u_yy + sigma a u_xy },   u(t, x, 0) = pi(t, x).
//
// For a fixed a the diffusion part is the second derivative along (sigma, a).
// The scheme takes a = k sigma dy / dx so that this direction joins grid nodes
// and uses the three-point difference along it, which is monotone for every k.

#include "cstop/model.hpp"
#include "cstop/surface.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cstop {

enum class XBoundary {
    clamp,     // ghost nodes copy the boundary value (zero slope)
    one_sided  // boundary columns use the one-sided second difference of the interior, no mixing
};
const char* to_string(XBoundary b);
XBoundary parse_x_boundary(const std::string& name);

struct SchemeParams {
    AugmentedGrid grid;                // output levels; the scheme substeps between them
    std::size_t substeps = 0;          // per grid step; 0 chooses the smallest stable count
    std::optional<double> a_max;       // unset: 4 * max|sigma u_xy| from a zero-control pilot, floored
    double a_max_floor = 1.0;
    double degeneracy_eps = 1e-8;      // |u_yy| at or below this counts as degenerate
    std::optional<double> clip_h;      // cap on |H| in the closed-form evaluation
    XBoundary x_boundary = XBoundary::clamp;
};

struct HamiltonianEval {
    double value = 0.0;
    double argmax = 0.0;
    bool degenerate = false;
    bool envelope_used = false; // u_yy > 0: the untruncated sup is infinite
    bool clipped = false;
};

// Closed-form sup over |a| <= a_max of 1/2 a^2 uyy + cross a.
HamiltonianEval hamiltonian(double uyy, double cross, double a_max, double degeneracy_eps = 1e-8,
                            std::optional<double> clip_h = std::nullopt);

// Explicit stability rate: the substep dt_pde must satisfy dt_pde * rate <= 1.
struct StabilityBound {
    double rate = 0.0;
    double worst_t = 0.0;
    double worst_x = 0.0;
    std::size_t min_substeps = 1;
};
StabilityBound stability_bound(const ProblemSpec& spec, const SchemeParams& params, double a_max);

// Smallest weight on any stencil value across the grid at the chosen substep;
// the update is monotone exactly when it is nonnegative.
struct MonotonicityAudit {
    double min_center_weight = 0.0;
    double min_weight = 0.0;
    std::size_t substeps = 0;
    bool monotone = false;
};
MonotonicityAudit coefficient_audit(const ProblemSpec& spec, const SchemeParams& params, double a_max,
                                    std::size_t substeps);

ValueSurface solve_hjb(std::shared_ptr<const ProblemSpec> spec, const SchemeParams& params);

struct HamiltonianStats {
    std::size_t nodes = 0;           // interior continuation nodes examined
    double envelope_fraction = 0.0;
    double degenerate_fraction = 0.0;
};
HamiltonianStats hamiltonian_statistics(const ValueSurface& surface, double degeneracy_eps = 1e-8);

struct ResidualReport {
    std::size_t n_probes = 0;
    std::size_t continuation_probes = 0;
    std::size_t stop_probes = 0;
    double max_residual = 0.0;       // |PDE residual| over continuation probes
    double mean_residual = 0.0;
    double p50 = 0.0, p90 = 0.0, p99 = 0.0;
    double max_stop_gap = 0.0;       // |u - pi| over stop probes
    double scale = 0.0;              // dt + dx^2 + dy^2
    double fitted_constant = 0.0;    // max_residual / scale
    double envelope_fraction = 0.0;
    std::size_t worst_k = 0, worst_i = 0, worst_j = 0;
};

// Discrete residual of the obstacle HJB at random interior nodes, using the
// surface's own differences. A node with u - pi <= stop_tol counts as stopped.
// Probes skip the fraction x_margin of the x range at each end, where the
// truncated domain distorts the surface.
ResidualReport residual_audit(const ValueSurface& surface, std::size_t n_probes, std::uint64_t seed,
                              double stop_tol = 1e-12, double degeneracy_eps = 1e-8, double x_margin = 0.25);

} // namespace cstop
