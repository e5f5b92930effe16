#include "cstop/dp_solver.hpp"

#include "cstop/errors.hpp"
#include "cstop/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace cstop {

namespace {

// Coefficients on one time level, evaluated at the x nodes.
struct LevelCoeffs {
    std::vector<double> drift, vol, running, cost, stop;
};

LevelCoeffs level_coeffs(const ProblemSpec& spec, const AugmentedGrid& grid, std::size_t k) {
    LevelCoeffs c;
    const std::size_t n = grid.n_x;
    c.drift.resize(n);
    c.vol.resize(n);
    c.running.resize(n);
    c.cost.resize(n);
    c.stop.resize(n);
    const double t = grid.t(k);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = grid.x(i);
        c.drift[i] = spec.drift_at(t, x);
        c.vol[i] = spec.vol_at(t, x);
        c.running[i] = spec.running_at(t, x);
        c.cost[i] = spec.cost_at(t, x);
        c.stop[i] = spec.stop_at(t, x);
        if (!std::isfinite(c.drift[i]) || !std::isfinite(c.vol[i]) || !std::isfinite(c.running[i]) ||
            !std::isfinite(c.cost[i]) || !std::isfinite(c.stop[i])) {
            std::ostringstream msg;
            msg << "non-finite coefficient at t=" << t << ", x=" << x;
            throw NumericalError(msg.str());
        }
    }
    return c;
}

struct Choice {
    double value = 0.0;
    bool stop = true;
    double control = 0.0;
};

// Budget left after paying for one step, or a negative value when the step
// cannot be paid for. Both branches y - g dt +- a sqrt(dt) must stay >= 0.
double step_room(double y, double cost, double dt) {
    const double room = y - cost * dt;
    return room >= -1e-12 * std::max(y, 1.0) ? std::max(room, 0.0) : -1.0;
}

bool admissible(double a, double sqrt_dt, double room) {
    return std::abs(a) * sqrt_dt <= room + 1e-12 * std::max(room, 1e-300);
}

struct SweepStats {
    std::size_t clamps = 0;   // nodes whose stencil left the x range
    std::size_t discards = 0; // nodes acting as a lower-budget node
    double max_discard_gap = 0.0;

    void merge(const SweepStats& o) {
        clamps += o.clamps;
        discards += o.discards;
        max_discard_gap = std::max(max_discard_gap, o.max_discard_gap);
    }
};

struct Stepper {
    const AugmentedGrid& grid;
    const std::vector<double>& controls;
    double sqrt_dt;

    // Best decision at (level with coefficients c, node i, j) given next slice.
    Choice choose(const LevelCoeffs& c, std::size_t i, std::size_t j, const double* next, std::size_t& clamps) const {
        Choice out;
        out.value = c.stop[i];
        if (j == 0) return out;
        const double x = grid.x(i);
        const double y = grid.y(j);
        const double dt = grid.dt;
        const double x_up = x + c.drift[i] * dt + c.vol[i] * sqrt_dt;
        const double x_dn = x + c.drift[i] * dt - c.vol[i] * sqrt_dt;
        const double y_mid = y - c.cost[i] * dt;
        const double room = step_room(y, c.cost[i], dt);
        if (room < 0.0) return out;
        double best = -std::numeric_limits<double>::infinity();
        double best_a = 0.0;
        bool clamped = false;
        for (double a : controls) {
            if (!admissible(a, sqrt_dt, room)) continue;
            const double shift = a * sqrt_dt;
            const CellWeights up = locate(grid, x_up, std::max(y_mid + shift, 0.0));
            const CellWeights dn = locate(grid, x_dn, std::max(y_mid - shift, 0.0));
            clamped = clamped || up.clamped_x || dn.clamped_x;
            const double v = c.running[i] * dt + 0.5 * (interpolate_slice(grid, next, up) + interpolate_slice(grid, next, dn));
            if (v > best) {
                best = v;
                best_a = a;
            }
        }
        if (clamped) ++clamps;
        if (best > out.value) {
            out.value = best;
            out.stop = false;
            out.control = best_a;
        }
        return out;
    }

    // Decisions down one y column. A node may also act as any node below it
    // in the same column, discarding the budget in between; `source` records
    // the node whose decision is used.
    void column(const LevelCoeffs& c, std::size_t i, const double* next, Choice* out, std::uint32_t* source,
                SweepStats& stats) const {
        std::size_t best = 0;
        for (std::size_t j = 0; j < grid.n_y; ++j) {
            out[j] = choose(c, i, j, next, stats.clamps);
            source[j] = static_cast<std::uint32_t>(j);
            if (j > 0 && out[j].value < out[best].value) {
                stats.max_discard_gap = std::max(stats.max_discard_gap, out[best].value - out[j].value);
                ++stats.discards;
                out[j] = out[best];
                source[j] = static_cast<std::uint32_t>(best);
            } else {
                best = j;
            }
        }
    }

    // Value of a fixed decision.
    double follow(const LevelCoeffs& c, std::size_t i, std::size_t j, const double* next, bool stop, double a) const {
        if (j == 0 || stop) return c.stop[i];
        const double x = grid.x(i);
        const double y = grid.y(j);
        const double dt = grid.dt;
        const double y_mid = y - c.cost[i] * dt;
        const double shift = a * sqrt_dt;
        const CellWeights up = locate(grid, x + c.drift[i] * dt + c.vol[i] * sqrt_dt, std::max(y_mid + shift, 0.0));
        const CellWeights dn = locate(grid, x + c.drift[i] * dt - c.vol[i] * sqrt_dt, std::max(y_mid - shift, 0.0));
        return c.running[i] * dt + 0.5 * (interpolate_slice(grid, next, up) + interpolate_slice(grid, next, dn));
    }
};

void fill_terminal(const ProblemSpec& spec, const AugmentedGrid& grid, double* slice) {
    const double t = grid.t_end();
    for (std::size_t i = 0; i < grid.n_x; ++i) {
        const double pi = spec.stop_at(t, grid.x(i));
        for (std::size_t j = 0; j < grid.n_y; ++j) slice[i * grid.n_y + j] = pi;
    }
}

// One backward sweep with the given controls.
SweepStats backward_sweep(const ProblemSpec& spec, const AugmentedGrid& grid, const std::vector<double>& controls,
                          std::vector<double>& values) {
    values.assign(grid.size(), 0.0);
    const std::size_t slice = grid.slice_size();
    fill_terminal(spec, grid, values.data() + grid.n_t * slice);
    const Stepper stepper{grid, controls, std::sqrt(grid.dt)};
    SweepStats total;
    std::vector<SweepStats> rows(grid.n_x);
    std::vector<Choice> choices(slice);
    std::vector<std::uint32_t> source(slice);
    for (std::size_t k = grid.n_t; k-- > 0;) {
        const LevelCoeffs c = level_coeffs(spec, grid, k);
        const double* next = values.data() + (k + 1) * slice;
        double* cur = values.data() + k * slice;
        std::fill(rows.begin(), rows.end(), SweepStats{});
        parallel_for(grid.n_x, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t base = i * grid.n_y;
                stepper.column(c, i, next, choices.data() + base, source.data() + base, rows[i]);
                for (std::size_t j = 0; j < grid.n_y; ++j) cur[base + j] = choices[base + j].value;
            }
        }, 8);
        for (const auto& r : rows) total.merge(r);
    }
    return total;
}

} // namespace

std::vector<double> make_control_set(double a_max, std::size_t m) {
    if (!(a_max >= 0.0) || !std::isfinite(a_max)) throw ValidationError("control bound a_max must be nonnegative");
    std::vector<double> out{0.0};
    if (a_max == 0.0 || m == 0) return out;
    for (std::size_t i = 1; i <= m; ++i) {
        const double a = a_max * static_cast<double>(i) / static_cast<double>(m);
        out.push_back(a);
        out.push_back(-a);
    }
    return out;
}

double one_step_tolerance(const AugmentedGrid& grid) {
    return std::max({grid.dt, grid.dx() * grid.dx(), grid.dy()});
}

void check_dp_stencil(const ProblemSpec& spec, const AugmentedGrid& grid, double stencil_reach) {
    const double sqrt_dt = std::sqrt(grid.dt);
    double worst = 0.0;
    double worst_t = 0.0, worst_x = 0.0;
    for (std::size_t k = 0; k < grid.n_t; ++k) {
        for (std::size_t i = 0; i < grid.n_x; ++i) {
            const double reach = std::abs(spec.vol_at(grid.t(k), grid.x(i))) * sqrt_dt;
            if (reach > worst) {
                worst = reach;
                worst_t = grid.t(k);
                worst_x = grid.x(i);
            }
        }
    }
    const double limit = stencil_reach * grid.dx();
    if (worst > limit * (1.0 + 1e-12)) {
        std::ostringstream msg;
        msg << "stencil violation: sigma*sqrt(dt) = " << worst << " at (t=" << worst_t << ", x=" << worst_x
            << ") exceeds reach*dx = " << limit << "; refine dt to at most "
            << (limit / (worst / sqrt_dt)) * (limit / (worst / sqrt_dt));
        throw ValidationError(msg.str());
    }
}

ValueSurface solve_dpp(std::shared_ptr<const ProblemSpec> spec, const AugmentedGrid& grid, const DpOptions& options) {
    if (!spec) throw ValidationError("solve_dpp: missing problem");
    require_scalar(*spec, "solve_dpp");
    validate_grid(grid);
    check_dp_stencil(*spec, grid, options.stencil_reach);

    ValueSurface surface;
    surface.grid = grid;
    surface.spec = spec;

    double a_max = 0.0;
    if (options.a_max) {
        a_max = *options.a_max;
    } else {
        std::vector<double> pilot;
        backward_sweep(*spec, grid, {0.0}, pilot);
        const double est = cross_scale(*spec, grid, pilot);
        surface.diagnostics["cross_scale_estimate"] = est;
        a_max = std::max(4.0 * est, options.a_max_floor);
    }
    const std::vector<double> controls = make_control_set(a_max, options.m);
    const SweepStats stats = backward_sweep(*spec, grid, controls, surface.values);
    for (double v : surface.values) {
        if (!std::isfinite(v)) throw NumericalError("solve_dpp: non-finite value in surface");
    }

    surface.control_bound = a_max;
    surface.provenance.solver = "dp";
    surface.provenance.params = {
        {"t0", grid.t0}, {"dt", grid.dt}, {"n_t", static_cast<double>(grid.n_t)},
        {"x_min", grid.x_min}, {"x_max", grid.x_max}, {"n_x", static_cast<double>(grid.n_x)},
        {"y_max", grid.y_max}, {"n_y", static_cast<double>(grid.n_y)},
        {"a_max", a_max}, {"m", static_cast<double>(options.m)}, {"stencil_reach", options.stencil_reach},
    };
    surface.diagnostics["x_clamped_nodes"] = static_cast<double>(stats.clamps);
    surface.diagnostics["budget_discard_nodes"] = static_cast<double>(stats.discards);
    surface.diagnostics["max_budget_discard_gap"] = stats.max_discard_gap;
    return surface;
}

std::vector<double> unconstrained_snell(const ProblemSpec& spec, const AugmentedGrid& grid) {
    require_scalar(spec, "unconstrained_snell");
    validate_grid(grid);
    const std::size_t n = grid.n_x;
    std::vector<double> u((grid.n_t + 1) * n);
    for (std::size_t i = 0; i < n; ++i) u[grid.n_t * n + i] = spec.stop_at(grid.t_end(), grid.x(i));
    const double sqrt_dt = std::sqrt(grid.dt);
    const double dx = grid.dx();
    for (std::size_t k = grid.n_t; k-- > 0;) {
        const LevelCoeffs c = level_coeffs(spec, grid, k);
        const double* next = u.data() + (k + 1) * n;
        auto interp = [&](double x) {
            const double fx = std::clamp((x - grid.x_min) / dx, 0.0, static_cast<double>(n - 1));
            const std::size_t i0 = std::min(static_cast<std::size_t>(fx), n - 2);
            const double w = fx - static_cast<double>(i0);
            return next[i0] + w * (next[i0 + 1] - next[i0]);
        };
        for (std::size_t i = 0; i < n; ++i) {
            const double x = grid.x(i);
            const double drift = x + c.drift[i] * grid.dt;
            const double cont = c.running[i] * grid.dt +
                                0.5 * (interp(drift + c.vol[i] * sqrt_dt) + interp(drift - c.vol[i] * sqrt_dt));
            u[k * n + i] = std::max(c.stop[i], cont);
        }
    }
    return u;
}

FeedbackPolicy extract_policy(const ValueSurface& surface) {
    if (!surface.spec) throw ValidationError("extract_policy: surface carries no problem definition");
    const auto& grid = surface.grid;
    const ProblemSpec& spec = *surface.spec;

    FeedbackPolicy policy;
    policy.grid = grid;
    policy.spec = surface.spec;
    policy.controls = make_control_set(surface.control_bound,
                                       static_cast<std::size_t>(surface.provenance.params.count("m")
                                                                    ? surface.provenance.params.at("m") : 0.0));
    policy.stop.assign(grid.size(), 1);
    policy.control.assign(grid.size(), 0.0);

    policy.source.assign(grid.size(), 0);

    const Stepper stepper{grid, policy.controls, std::sqrt(grid.dt)};
    const std::size_t slice = grid.slice_size();
    std::vector<Choice> choices(slice);
    for (std::size_t k = 0; k < grid.n_t; ++k) {
        const LevelCoeffs c = level_coeffs(spec, grid, k);
        const double* next = surface.values.data() + (k + 1) * slice;
        parallel_for(grid.n_x, [&](std::size_t begin, std::size_t end) {
            SweepStats stats;
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t n0 = policy.index(k, i, 0);
                stepper.column(c, i, next, choices.data() + i * grid.n_y, policy.source.data() + n0, stats);
                for (std::size_t j = 0; j < grid.n_y; ++j) {
                    const Choice& ch = choices[i * grid.n_y + j];
                    policy.stop[n0 + j] = ch.stop ? 1 : 0;
                    policy.control[n0 + j] = ch.control;
                }
            }
        }, 8);
    }
    return policy;
}

bool FeedbackPolicy::decide(double t, StateView x, double y, std::span<double> a, bool& extrapolated) const {
    if (y <= 0.0) return true;
    const double ft = (t - grid.t0) / grid.dt;
    if (ft < -1e-9) extrapolated = true;
    const auto k = static_cast<std::size_t>(std::max(0.0, std::floor(ft + 1e-9)));
    if (k >= grid.n_t) return true;

    const double fx = (x[0] - grid.x_min) / grid.dx();
    const double max_i = static_cast<double>(grid.n_x - 1);
    if (fx < 0.0 || fx > max_i) extrapolated = true;
    const auto i = static_cast<std::size_t>(std::lround(std::clamp(fx, 0.0, max_i)));

    const double fy = y / grid.dy();
    const double max_j = static_cast<double>(grid.n_y - 1);
    if (fy > max_j) extrapolated = true;
    const double jy = lookup == PolicyLookup::nearest ? std::round(fy) : std::ceil(fy - 1e-9);
    const auto j = static_cast<std::size_t>(std::clamp(jy, 0.0, max_j));

    const std::size_t n = index(k, i, j);
    if (stop[n]) return true;
    // Keep both budget branches nonnegative, as on the grid.
    double room = y;
    if (spec) {
        room = step_room(y, spec->cost_at(t, x[0]), grid.dt);
        if (room < 0.0) return true;
    }
    const double cap = room / std::sqrt(grid.dt);
    if (!a.empty()) a[0] = std::clamp(control[n], -cap, cap);
    return false;
}

std::vector<double> recompose(const ValueSurface& surface, const FeedbackPolicy& policy, std::size_t k_start,
                              std::size_t k_from) {
    if (!surface.spec) throw ValidationError("recompose: surface carries no problem definition");
    const auto& grid = surface.grid;
    if (k_start > k_from || k_from > grid.n_t) throw ValidationError("recompose: levels out of order or range");
    const std::size_t slice = grid.slice_size();
    std::vector<double> next(surface.values.begin() + static_cast<std::ptrdiff_t>(k_from * slice),
                             surface.values.begin() + static_cast<std::ptrdiff_t>((k_from + 1) * slice));
    std::vector<double> cur(slice);
    const Stepper stepper{grid, policy.controls, std::sqrt(grid.dt)};
    for (std::size_t k = k_from; k-- > k_start;) {
        const LevelCoeffs c = level_coeffs(*surface.spec, grid, k);
        for (std::size_t i = 0; i < grid.n_x; ++i) {
            for (std::size_t j = 0; j < grid.n_y; ++j) {
                const std::size_t n = policy.index(k, i, j);
                cur[i * grid.n_y + j] =
                    stepper.follow(c, i, policy.source[n], next.data(), policy.stop[n] != 0, policy.control[n]);
            }
        }
        std::swap(cur, next);
    }
    return next;
}

ConsistencyReport dpp_consistency(const ValueSurface& surface, std::size_t n_probes, std::uint64_t seed) {
    const auto& grid = surface.grid;
    const FeedbackPolicy policy = extract_policy(surface);
    ConsistencyReport report;
    report.n_probes = n_probes;
    report.tolerance = 2.0 * one_step_tolerance(grid);

    std::mt19937_64 rng(seed);
    auto pick = [&rng](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> cache;
    double total = 0.0;
    for (std::size_t p = 0; p < n_probes; ++p) {
        ConsistencyProbe probe;
        probe.k = pick(0, grid.n_t - 1);
        probe.i = pick(1, grid.n_x - 2);
        probe.j = pick(1, grid.n_y - 1);
        probe.k_mid = pick(probe.k, grid.n_t);
        auto key = std::make_pair(probe.k, probe.k_mid);
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, recompose(surface, policy, probe.k, probe.k_mid)).first;
        probe.value = surface.at(probe.k, probe.i, probe.j);
        probe.recomposed = it->second[probe.i * grid.n_y + probe.j];
        const double diff = std::abs(probe.value - probe.recomposed);
        total += diff;
        if (p == 0 || diff > report.max_discrepancy) {
            report.max_discrepancy = diff;
            report.worst = probe;
        }
    }
    report.mean_discrepancy = n_probes ? total / static_cast<double>(n_probes) : 0.0;
    report.passed = report.max_discrepancy <= report.tolerance;
    return report;
}

} // namespace cstop
