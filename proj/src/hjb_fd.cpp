#include "cstop/hjb_fd.hpp"

#include "cstop/errors.hpp"
#include "cstop/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace cstop {

const char* to_string(XBoundary b) {
    switch (b) {
    case XBoundary::clamp: return "clamp";
    case XBoundary::one_sided: return "one_sided";
    }
    return "clamp";
}

XBoundary parse_x_boundary(const std::string& name) {
    if (name == "clamp") return XBoundary::clamp;
    if (name == "one_sided") return XBoundary::one_sided;
    throw ValidationError("unknown x boundary '" + name + "' (expected clamp or one_sided)");
}

HamiltonianEval hamiltonian(double uyy, double cross, double a_max, double degeneracy_eps,
                            std::optional<double> clip_h) {
    if (!std::isfinite(uyy) || !std::isfinite(cross) || !(a_max >= 0.0)) {
        throw ValidationError("hamiltonian: non-finite input");
    }
    HamiltonianEval h;
    auto value_at = [&](double a) { return 0.5 * a * a * uyy + cross * a; };
    const double toward = cross > 0.0 ? a_max : (cross < 0.0 ? -a_max : 0.0);
    if (uyy < -degeneracy_eps) {
        const double vertex = -cross / uyy;
        h.argmax = std::abs(vertex) <= a_max ? vertex : std::copysign(a_max, vertex);
        h.value = value_at(h.argmax);
    } else if (uyy <= degeneracy_eps) {
        h.degenerate = true;
        h.argmax = toward;
        h.value = value_at(toward);
        if (h.value < 0.0) {
            h.argmax = 0.0;
            h.value = 0.0;
        }
    } else {
        h.envelope_used = true;
        h.argmax = cross < 0.0 ? -a_max : a_max;
        h.value = value_at(h.argmax);
    }
    if (clip_h && std::abs(h.value) > *clip_h) {
        h.value = std::copysign(*clip_h, h.value);
        h.clipped = true;
    }
    return h;
}

namespace {

// Number of grid-aligned directions available at |sigma|.
std::size_t direction_reach(double sigma, double a_max, const AugmentedGrid& grid) {
    const double s = std::abs(sigma);
    if (s == 0.0) return 0;
    const double k = std::floor(a_max * grid.dx() / (s * grid.dy()) * (1.0 + 1e-12));
    return static_cast<std::size_t>(std::min(k, static_cast<double>(grid.n_y)));
}

struct NodeCoeffs {
    double sigma = 0.0, drift = 0.0, running = 0.0, cost = 0.0, stop = 0.0;
};

NodeCoeffs node_coeffs(const ProblemSpec& spec, double t, double x) {
    NodeCoeffs c{spec.vol_at(t, x), spec.drift_at(t, x), spec.running_at(t, x), spec.cost_at(t, x),
                 spec.stop_at(t, x)};
    if (!std::isfinite(c.sigma) || !std::isfinite(c.drift) || !std::isfinite(c.running) || !std::isfinite(c.cost) ||
        !std::isfinite(c.stop)) {
        std::ostringstream msg;
        msg << "non-finite coefficient at t=" << t << ", x=" << x;
        throw NumericalError(msg.str());
    }
    return c;
}

double node_rate(const NodeCoeffs& c, double a_max, const AugmentedGrid& grid) {
    const double dx = grid.dx(), dy = grid.dy();
    double rate = c.sigma * c.sigma / (dx * dx) + std::abs(c.drift) / dx + std::abs(c.cost) / dy;
    if (direction_reach(c.sigma, a_max, grid) == 0) rate += a_max * a_max / (dy * dy);
    return rate;
}

// Stencil weights of one explicit substep at node (i, j) for a fixed direction.
struct Weights {
    double center = 0.0;
    double diffusion = 0.0;   // on each of the two directional neighbours
    double drift_up = 0.0;    // on (i+1, j)
    double drift_down = 0.0;  // on (i-1, j)
    double cost_side = 0.0;   // on (i, j-1) for g > 0, (i, j+1) otherwise
    double pure_y = 0.0;      // on (i, j+-1) for the a = A option without x mixing
};

Weights interior_weights(const NodeCoeffs& c, double dt, const AugmentedGrid& grid) {
    const double dx = grid.dx(), dy = grid.dy();
    Weights w;
    w.diffusion = 0.5 * c.sigma * c.sigma * dt / (dx * dx);
    w.drift_up = c.drift > 0.0 ? c.drift * dt / dx : 0.0;
    w.drift_down = c.drift < 0.0 ? -c.drift * dt / dx : 0.0;
    w.cost_side = std::abs(c.cost) * dt / dy;
    w.center = 1.0 - 2.0 * w.diffusion - w.drift_up - w.drift_down - w.cost_side;
    return w;
}

struct Sweep {
    const ProblemSpec& spec;
    const AugmentedGrid& grid;
    double a_max;
    XBoundary boundary;

    // One substep ending at time t: next -> cur.
    void step(double t, double dt, const double* next, double* cur) const {
        const std::size_t nx = grid.n_x, ny = grid.n_y;
        parallel_for(nx, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                const NodeCoeffs c = node_coeffs(spec, t, grid.x(i));
                const double* col = next + i * ny;
                double* out = cur + i * ny;
                out[0] = c.stop;
                const bool edge = i == 0 || i + 1 == nx;
                if (edge && boundary == XBoundary::one_sided) {
                    one_sided_column(c, i, dt, next, out);
                    continue;
                }
                const double* up = next + std::min(i + 1, nx - 1) * ny;
                const double* dn = next + (i == 0 ? 0 : i - 1) * ny;
                const Weights w = interior_weights(c, dt, grid);
                const std::size_t reach = direction_reach(c.sigma, a_max, grid);
                const double wy = reach == 0 ? 0.5 * a_max * a_max * dt / (grid.dy() * grid.dy()) : 0.0;
                for (std::size_t j = 1; j < ny; ++j) {
                    const std::size_t jg = c.cost >= 0.0 ? j - 1 : std::min(j + 1, ny - 1);
                    const double base = dt * c.running + w.drift_up * up[j] + w.drift_down * dn[j] +
                                        w.cost_side * col[jg];
                    double best = base + w.center * col[j] + w.diffusion * (up[j] + dn[j]);
                    const std::size_t kmax = std::min(j, reach);
                    for (std::size_t k = 1; k <= kmax; ++k) {
                        const std::size_t jp = std::min(j + k, ny - 1);
                        const double plus = base + w.center * col[j] + w.diffusion * (up[jp] + dn[j - k]);
                        const double minus = base + w.center * col[j] + w.diffusion * (up[j - k] + dn[jp]);
                        best = std::max(best, std::max(plus, minus));
                    }
                    if (wy > 0.0) {
                        const double with_a = base + (w.center - 2.0 * wy) * col[j] + w.diffusion * (up[j] + dn[j]) +
                                              wy * (col[std::min(j + 1, ny - 1)] + col[j - 1]);
                        best = std::max(best, with_a);
                    }
                    out[j] = std::max(c.stop, best);
                }
            }
        }, 4);
    }

    void one_sided_column(const NodeCoeffs& c, std::size_t i, double dt, const double* next, double* out) const {
        const std::size_t nx = grid.n_x, ny = grid.n_y;
        const double dx = grid.dx(), dy = grid.dy();
        const bool left = i == 0;
        const double* u0 = next + i * ny;
        const double* u1 = next + (left ? 1 : nx - 2) * ny;
        const double* u2 = next + (left ? 2 : nx - 3) * ny;
        const double sign = left ? 1.0 : -1.0; // orientation of u1 - u0 as a forward difference
        const double wd = 0.5 * c.sigma * c.sigma * dt / (dx * dx);
        const double wb = c.drift * dt / dx * sign;
        const double wg = c.cost * dt / dy;
        for (std::size_t j = 1; j < ny; ++j) {
            const double uy = c.cost >= 0.0 ? u0[j] - u0[j - 1] : u0[std::min(j + 1, ny - 1)] - u0[j];
            const double v = u0[j] + dt * c.running + wd * (u0[j] - 2.0 * u1[j] + u2[j]) + wb * (u1[j] - u0[j]) -
                             wg * uy;
            out[j] = std::max(c.stop, v);
        }
    }
};

void check_finite(const std::vector<double>& values, std::size_t begin, std::size_t count, std::size_t level) {
    for (std::size_t n = begin; n < begin + count; ++n) {
        if (!std::isfinite(values[n])) {
            std::ostringstream msg;
            msg << "solve_hjb: non-finite value at time level " << level;
            throw NumericalError(msg.str());
        }
    }
}

std::vector<double> march(const ProblemSpec& spec, const SchemeParams& params, double a_max, std::size_t substeps) {
    const AugmentedGrid& grid = params.grid;
    std::vector<double> values(grid.size());
    const std::size_t slice = grid.slice_size();
    const double t_end = grid.t_end();
    for (std::size_t i = 0; i < grid.n_x; ++i) {
        const double pi = spec.stop_at(t_end, grid.x(i));
        std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(grid.n_t * slice + i * grid.n_y), grid.n_y, pi);
    }
    const Sweep sweep{spec, grid, a_max, params.x_boundary};
    const double dt = grid.dt / static_cast<double>(substeps);
    std::vector<double> a(slice), b(slice);
    for (std::size_t k = grid.n_t; k-- > 0;) {
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>((k + 1) * slice), slice, a.begin());
        for (std::size_t s = substeps; s-- > 0;) {
            const double t = grid.t(k) + static_cast<double>(s) * dt;
            sweep.step(t, dt, a.data(), b.data());
            std::swap(a, b);
        }
        std::copy(a.begin(), a.end(), values.begin() + static_cast<std::ptrdiff_t>(k * slice));
        check_finite(values, k * slice, slice, k);
    }
    return values;
}

} // namespace

StabilityBound stability_bound(const ProblemSpec& spec, const SchemeParams& params, double a_max) {
    const AugmentedGrid& grid = params.grid;
    StabilityBound bound;
    for (std::size_t k = 0; k <= grid.n_t; ++k) {
        for (std::size_t i = 0; i < grid.n_x; ++i) {
            const double t = grid.t(k), x = grid.x(i);
            const double rate = node_rate(node_coeffs(spec, t, x), a_max, grid);
            if (rate > bound.rate) {
                bound.rate = rate;
                bound.worst_t = t;
                bound.worst_x = x;
            }
        }
    }
    bound.min_substeps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(bound.rate * grid.dt * (1.0 - 1e-12))));
    return bound;
}

MonotonicityAudit coefficient_audit(const ProblemSpec& spec, const SchemeParams& params, double a_max,
                                    std::size_t substeps) {
    const AugmentedGrid& grid = params.grid;
    if (substeps == 0) substeps = stability_bound(spec, params, a_max).min_substeps;
    const double dt = grid.dt / static_cast<double>(substeps);
    MonotonicityAudit audit;
    audit.substeps = substeps;
    audit.min_center_weight = 1.0;
    audit.min_weight = 1.0;
    const double dx = grid.dx(), dy = grid.dy();
    for (std::size_t k = 0; k <= grid.n_t; ++k) {
        for (std::size_t i = 0; i < grid.n_x; ++i) {
            const NodeCoeffs c = node_coeffs(spec, grid.t(k), grid.x(i));
            const bool edge = i == 0 || i + 1 == grid.n_x;
            if (edge && params.x_boundary == XBoundary::one_sided) {
                // Weight on the first interior node of the one-sided second difference.
                const double wd = 0.5 * c.sigma * c.sigma * dt / (dx * dx);
                const double wb = std::abs(c.drift) * dt / dx;
                audit.min_weight = std::min(audit.min_weight, -2.0 * wd - (c.drift * (i == 0 ? 1.0 : -1.0) < 0 ? wb : 0.0));
                audit.min_center_weight = std::min(audit.min_center_weight, 1.0 + wd - wb - std::abs(c.cost) * dt / dy);
                continue;
            }
            const Weights w = interior_weights(c, dt, grid);
            double center = w.center;
            if (direction_reach(c.sigma, a_max, grid) == 0) center -= a_max * a_max * dt / (dy * dy);
            audit.min_center_weight = std::min(audit.min_center_weight, center);
            audit.min_weight = std::min({audit.min_weight, center, w.diffusion, w.drift_up, w.drift_down, w.cost_side});
        }
    }
    audit.monotone = audit.min_weight >= 0.0 && audit.min_center_weight >= 0.0;
    return audit;
}

ValueSurface solve_hjb(std::shared_ptr<const ProblemSpec> spec, const SchemeParams& params) {
    if (!spec) throw ValidationError("solve_hjb: missing problem");
    require_scalar(*spec, "solve_hjb");
    validate_grid(params.grid);
    if (!(params.degeneracy_eps >= 0.0)) throw ValidationError("degeneracy_eps must be nonnegative");
    if (params.a_max && !(*params.a_max >= 0.0)) throw ValidationError("a_max must be nonnegative");
    const AugmentedGrid& grid = params.grid;

    ValueSurface surface;
    surface.grid = grid;
    surface.spec = spec;

    double a_max = 0.0;
    if (params.a_max) {
        a_max = *params.a_max;
    } else {
        const StabilityBound pilot_bound = stability_bound(*spec, params, 0.0);
        const std::vector<double> pilot = march(*spec, params, 0.0, pilot_bound.min_substeps);
        const double est = cross_scale(*spec, grid, pilot);
        surface.diagnostics["cross_scale_estimate"] = est;
        a_max = std::max(4.0 * est, params.a_max_floor);
    }

    const StabilityBound bound = stability_bound(*spec, params, a_max);
    std::size_t substeps = params.substeps;
    if (substeps == 0) {
        substeps = bound.min_substeps;
    } else {
        const double dt_pde = grid.dt / static_cast<double>(substeps);
        if (dt_pde * bound.rate > 1.0 + 1e-12) {
            std::ostringstream msg;
            msg << "explicit stability bound violated: dt_pde * rate = " << dt_pde * bound.rate
                << " > 1 (dt_pde = " << dt_pde << ", rate = " << bound.rate << " at t=" << bound.worst_t
                << ", x=" << bound.worst_x << "); need dt_pde <= " << 1.0 / bound.rate << ", i.e. at least "
                << bound.min_substeps << " substeps per grid step";
            throw ValidationError(msg.str());
        }
    }

    surface.values = march(*spec, params, a_max, substeps);
    surface.control_bound = a_max;
    surface.provenance.solver = "pde";
    surface.provenance.params = {
        {"t0", grid.t0}, {"dt", grid.dt}, {"n_t", static_cast<double>(grid.n_t)},
        {"x_min", grid.x_min}, {"x_max", grid.x_max}, {"n_x", static_cast<double>(grid.n_x)},
        {"y_max", grid.y_max}, {"n_y", static_cast<double>(grid.n_y)},
        {"a_max", a_max}, {"substeps", static_cast<double>(substeps)},
        {"degeneracy_eps", params.degeneracy_eps},
        {"x_boundary_one_sided", params.x_boundary == XBoundary::one_sided ? 1.0 : 0.0},
    };
    const MonotonicityAudit audit = coefficient_audit(*spec, params, a_max, substeps);
    surface.diagnostics["stability_rate"] = bound.rate;
    surface.diagnostics["min_stencil_weight"] = audit.min_weight;
    surface.diagnostics["monotone"] = audit.monotone ? 1.0 : 0.0;
    const HamiltonianStats stats = hamiltonian_statistics(surface, params.degeneracy_eps);
    surface.diagnostics["envelope_fraction"] = stats.envelope_fraction;
    surface.diagnostics["degenerate_fraction"] = stats.degenerate_fraction;
    return surface;
}

namespace {

struct LocalDerivatives {
    double ut, ux, uxx, uy, uyy, uxy;
};

LocalDerivatives derivatives(const ValueSurface& s, std::size_t k, std::size_t i, std::size_t j, double cost) {
    const AugmentedGrid& g = s.grid;
    const double dx = g.dx(), dy = g.dy();
    auto u = [&](std::size_t kk, std::size_t ii, std::size_t jj) { return s.at(kk, ii, jj); };
    LocalDerivatives d;
    d.ut = (u(k + 1, i, j) - u(k, i, j)) / g.dt;
    d.ux = (u(k, i + 1, j) - u(k, i - 1, j)) / (2.0 * dx);
    d.uxx = (u(k, i + 1, j) - 2.0 * u(k, i, j) + u(k, i - 1, j)) / (dx * dx);
    d.uy = cost >= 0.0 ? (u(k, i, j) - u(k, i, j - 1)) / dy : (u(k, i, j + 1) - u(k, i, j)) / dy;
    d.uyy = (u(k, i, j + 1) - 2.0 * u(k, i, j) + u(k, i, j - 1)) / (dy * dy);
    d.uxy = (u(k, i + 1, j + 1) - u(k, i + 1, j - 1) - u(k, i - 1, j + 1) + u(k, i - 1, j - 1)) / (4.0 * dx * dy);
    for (double v : {d.ut, d.ux, d.uxx, d.uy, d.uyy, d.uxy}) {
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "non-finite difference quotient at time level " << k << " (i=" << i << ", j=" << j << ")";
            throw NumericalError(msg.str());
        }
    }
    return d;
}

void require_interior(const ValueSurface& s, const char* who) {
    if (!s.spec) throw ValidationError(std::string(who) + ": surface carries no problem definition");
    if (s.grid.n_x < 3 || s.grid.n_y < 3) throw ValidationError(std::string(who) + ": grid has no interior nodes");
}

} // namespace

HamiltonianStats hamiltonian_statistics(const ValueSurface& surface, double degeneracy_eps) {
    require_interior(surface, "hamiltonian_statistics");
    const AugmentedGrid& g = surface.grid;
    HamiltonianStats stats;
    std::size_t envelope = 0, degenerate = 0;
    for (std::size_t k = 0; k < g.n_t; ++k) {
        const double t = g.t(k);
        for (std::size_t i = 1; i + 1 < g.n_x; ++i) {
            const double x = g.x(i);
            const double pi = surface.spec->stop_at(t, x);
            const double sigma = surface.spec->vol_at(t, x);
            const double cost = surface.spec->cost_at(t, x);
            for (std::size_t j = 1; j + 1 < g.n_y; ++j) {
                if (surface.at(k, i, j) <= pi) continue;
                const LocalDerivatives d = derivatives(surface, k, i, j, cost);
                const HamiltonianEval h = hamiltonian(d.uyy, sigma * d.uxy, surface.control_bound, degeneracy_eps);
                ++stats.nodes;
                envelope += h.envelope_used ? 1 : 0;
                degenerate += h.degenerate ? 1 : 0;
            }
        }
    }
    if (stats.nodes > 0) {
        stats.envelope_fraction = static_cast<double>(envelope) / static_cast<double>(stats.nodes);
        stats.degenerate_fraction = static_cast<double>(degenerate) / static_cast<double>(stats.nodes);
    }
    return stats;
}

ResidualReport residual_audit(const ValueSurface& surface, std::size_t n_probes, std::uint64_t seed, double stop_tol,
                              double degeneracy_eps, double x_margin) {
    if (!(x_margin >= 0.0 && x_margin < 0.5)) throw ValidationError("residual_audit: x_margin must lie in [0, 0.5)");
    require_interior(surface, "residual_audit");
    const AugmentedGrid& g = surface.grid;
    const ProblemSpec& spec = *surface.spec;
    ResidualReport report;
    report.n_probes = n_probes;
    report.scale = g.dt + g.dx() * g.dx() + g.dy() * g.dy();

    std::mt19937_64 rng(seed);
    auto pick = [&rng](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const auto skip = static_cast<std::size_t>(std::ceil(x_margin * static_cast<double>(g.n_x - 1) - 1e-9));
    const std::size_t i_lo = std::max<std::size_t>(1, skip);
    const std::size_t i_hi = g.n_x - 1 - i_lo;
    if (i_lo > i_hi) throw ValidationError("residual_audit: x_margin leaves no interior nodes");
    std::vector<double> residuals;
    std::size_t envelope = 0;
    for (std::size_t p = 0; p < n_probes; ++p) {
        const std::size_t k = pick(0, g.n_t - 1), i = pick(i_lo, i_hi), j = pick(1, g.n_y - 2);
        const double t = g.t(k), x = g.x(i);
        const NodeCoeffs c = node_coeffs(spec, t, x);
        const double u = surface.at(k, i, j);
        if (u - c.stop <= stop_tol) {
            ++report.stop_probes;
            report.max_stop_gap = std::max(report.max_stop_gap, std::abs(u - c.stop));
            continue;
        }
        const LocalDerivatives d = derivatives(surface, k, i, j, c.cost);
        const HamiltonianEval h = hamiltonian(d.uyy, c.sigma * d.uxy, surface.control_bound, degeneracy_eps);
        envelope += h.envelope_used ? 1 : 0;
        const double r = std::abs(-d.ut - 0.5 * c.sigma * c.sigma * d.uxx - c.drift * d.ux + c.cost * d.uy - h.value -
                                  c.running);
        if (residuals.empty() || r > report.max_residual) {
            report.worst_k = k;
            report.worst_i = i;
            report.worst_j = j;
        }
        report.max_residual = std::max(report.max_residual, r);
        residuals.push_back(r);
    }
    report.continuation_probes = residuals.size();
    if (!residuals.empty()) {
        double total = 0.0;
        for (double r : residuals) total += r;
        report.mean_residual = total / static_cast<double>(residuals.size());
        std::sort(residuals.begin(), residuals.end());
        auto quantile = [&](double q) {
            return residuals[static_cast<std::size_t>(q * static_cast<double>(residuals.size() - 1))];
        };
        report.p50 = quantile(0.5);
        report.p90 = quantile(0.9);
        report.p99 = quantile(0.99);
        report.envelope_fraction = static_cast<double>(envelope) / static_cast<double>(residuals.size());
    }
    report.fitted_constant = report.max_residual / report.scale;
    return report;
}

} // namespace cstop
