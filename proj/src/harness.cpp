#include "cstop/harness.hpp"

#include "cstop/errors.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <sstream>

namespace cstop {

namespace {

void reject_unknown(const json& doc, std::initializer_list<const char*> known, const std::string& where) {
    if (!doc.is_object()) throw ValidationError(where + " must be an object");
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
            throw ValidationError("unknown field '" + it.key() + "' in " + where);
        }
    }
}

double get_number(const json& doc, const char* key, const std::string& where, double fallback) {
    if (!doc.contains(key)) return fallback;
    if (!doc.at(key).is_number()) throw ValidationError(where + "." + key + " must be a number");
    return doc.at(key).get<double>();
}

std::size_t get_count(const json& doc, const char* key, const std::string& where, std::size_t fallback) {
    if (!doc.contains(key)) return fallback;
    const json& v = doc.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ValidationError(where + "." + key + " must be a nonnegative integer");
    }
    return v.get<std::size_t>();
}

std::string get_string(const json& doc, const char* key, const std::string& where, const std::string& fallback) {
    if (!doc.contains(key)) return fallback;
    if (!doc.at(key).is_string()) throw ValidationError(where + "." + key + " must be a string");
    return doc.at(key).get<std::string>();
}

PolicyLookup parse_lookup(const std::string& name) {
    if (name == "upper_y") return PolicyLookup::upper_y;
    if (name == "nearest") return PolicyLookup::nearest;
    throw ValidationError("unknown policy lookup '" + name + "' (expected upper_y or nearest)");
}

Noise parse_noise(const std::string& name) {
    if (name == "rademacher") return Noise::rademacher;
    if (name == "gaussian") return Noise::gaussian;
    throw ValidationError("unknown noise '" + name + "' (expected rademacher or gaussian)");
}

const char* noise_name(Noise n) { return n == Noise::gaussian ? "gaussian" : "rademacher"; }

ConstraintMode parse_mode(const std::string& name) {
    if (name == "inequality") return ConstraintMode::inequality;
    if (name == "equality") return ConstraintMode::equality;
    throw ValidationError("unknown constraint mode '" + name + "' (expected inequality or equality)");
}

json to_json(const MeanSe& m) { return {{"mean", m.mean}, {"se", m.se}}; }

json witness_json(const std::map<std::string, double>& w) {
    json out = json::object();
    for (const auto& [k, v] : w) out[k] = v;
    return out;
}

} // namespace

RunConfig load_run_config(const std::filesystem::path& problem_path) {
    const json doc = read_json_file(problem_path);
    RunConfig c;
    c.problem_path = problem_path;
    c.spec = std::make_shared<const ProblemSpec>(problem_from_json(doc));
    const double horizon = c.spec->horizon;

    double t0 = 0.0, x_min = -4.0, x_max = 4.0, y_max = 0.8;
    std::size_t n_t = 100, n_x = 81, n_y = 81;
    if (doc.contains("grid")) {
        const json& g = doc.at("grid");
        reject_unknown(g, {"t0", "n_t", "x_min", "x_max", "n_x", "y_max", "n_y"}, "grid");
        t0 = get_number(g, "t0", "grid", t0);
        n_t = get_count(g, "n_t", "grid", n_t);
        x_min = get_number(g, "x_min", "grid", x_min);
        x_max = get_number(g, "x_max", "grid", x_max);
        n_x = get_count(g, "n_x", "grid", n_x);
        y_max = get_number(g, "y_max", "grid", y_max);
        n_y = get_count(g, "n_y", "grid", n_y);
    }
    if (!(t0 < horizon)) throw ValidationError("grid.t0 must lie before the horizon");
    c.grid = AugmentedGrid::over_horizon(t0, horizon - t0, n_t, x_min, x_max, n_x, y_max, n_y);

    if (doc.contains("solver")) {
        const json& s = doc.at("solver");
        const std::string w = "solver";
        reject_unknown(s, {"method", "a_max", "a_max_floor", "m", "stencil_reach", "substeps", "x_boundary",
                           "degeneracy_eps", "clip_h"},
                       w);
        c.method = get_string(s, "method", w, c.method);
        if (s.contains("a_max") && !s.at("a_max").is_null()) {
            c.dp.a_max = get_number(s, "a_max", w, 0.0);
            c.pde.a_max = c.dp.a_max;
        }
        c.dp.a_max_floor = get_number(s, "a_max_floor", w, c.dp.a_max_floor);
        c.pde.a_max_floor = c.dp.a_max_floor;
        c.dp.m = get_count(s, "m", w, c.dp.m);
        c.dp.stencil_reach = get_number(s, "stencil_reach", w, c.dp.stencil_reach);
        c.pde.substeps = get_count(s, "substeps", w, c.pde.substeps);
        c.pde.x_boundary = parse_x_boundary(get_string(s, "x_boundary", w, to_string(c.pde.x_boundary)));
        c.pde.degeneracy_eps = get_number(s, "degeneracy_eps", w, c.pde.degeneracy_eps);
        if (s.contains("clip_h") && !s.at("clip_h").is_null()) c.pde.clip_h = get_number(s, "clip_h", w, 0.0);
    }
    if (doc.contains("start")) {
        const json& s = doc.at("start");
        reject_unknown(s, {"t", "x", "y"}, "start");
        c.start.t = get_number(s, "t", "start", c.grid.t0);
        c.start.x = get_number(s, "x", "start", c.start.x);
        c.start.y = get_number(s, "y", "start", c.start.y);
    } else {
        c.start.t = c.grid.t0;
    }
    if (doc.contains("simulate")) {
        const json& s = doc.at("simulate");
        reject_unknown(s, {"paths", "lookup", "noise"}, "simulate");
        c.noise = parse_noise(get_string(s, "noise", "simulate", noise_name(c.noise)));
        c.paths = get_count(s, "paths", "simulate", c.paths);
        c.lookup = parse_lookup(get_string(s, "lookup", "simulate", "upper_y"));
    }
    if (doc.contains("oracle")) {
        const json& s = doc.at("oracle");
        reject_unknown(s, {"steps", "mode"}, "oracle");
        c.oracle_steps = get_count(s, "steps", "oracle", c.oracle_steps);
        c.oracle_mode = parse_mode(get_string(s, "mode", "oracle", "inequality"));
    }
    if (doc.contains("checks")) {
        const json& s = doc.at("checks");
        reject_unknown(s, {"probes"}, "checks");
        c.probes = get_count(s, "probes", "checks", c.probes);
    }
    if (doc.contains("refine")) {
        const json& s = doc.at("refine");
        reject_unknown(s, {"kind", "levels"}, "refine");
        c.refine_kind = get_string(s, "kind", "refine", c.refine_kind);
        c.refine_levels = get_count(s, "levels", "refine", c.refine_levels);
    }
    c.pde.grid = c.grid;
    validate_run_config(c);
    return c;
}

void validate_run_config(const RunConfig& c) {
    if (!c.spec) throw ValidationError("no problem loaded");
    validate_grid(c.grid);
    if (c.method != "dp" && c.method != "pde") throw ValidationError("method must be dp or pde, got '" + c.method + "'");
    if (c.dp.m == 0) throw ValidationError("solver.m must be positive");
    if (!(c.dp.stencil_reach > 0.0)) throw ValidationError("solver.stencil_reach must be positive");
    if (c.dp.a_max && !(*c.dp.a_max >= 0.0)) throw ValidationError("solver.a_max must be nonnegative");
    if (c.paths == 0) throw ValidationError("simulate.paths must be positive");
    if (c.oracle_steps == 0) throw ValidationError("oracle.steps must be positive");
    if (c.probes == 0) throw ValidationError("checks.probes must be positive");
    if (c.refine_levels == 0) throw ValidationError("refine.levels must be positive");
    if (!(c.start.y >= 0.0)) throw ValidationError("start.y must be nonnegative");
    if (c.start.t < c.grid.t0 || c.start.t >= c.grid.t_end()) {
        throw ValidationError("start.t must lie in [t0, T)");
    }
}

ValueSurface solve_surface(const RunConfig& config) {
    if (config.method == "dp") return solve_dpp(config.spec, config.grid, config.dp);
    SchemeParams params = config.pde;
    params.grid = config.grid;
    return solve_hjb(config.spec, params);
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

DiffReport compare(const ValueSurface& a, const ValueSurface& b, const CompareOptions& options) {
    const bool a_is_ref = a.grid.size() <= b.grid.size();
    const ValueSurface& ref = a_is_ref ? a : b;
    const ValueSurface& other = a_is_ref ? b : a;
    const AugmentedGrid& g = ref.grid;
    const AugmentedGrid& h = other.grid;

    const double eps = 1e-9;
    const double t_lo = std::max(g.t0, h.t0), t_hi = std::min(g.t_end(), h.t_end());
    double x_lo = std::max(g.x_min, h.x_min), x_hi = std::min(g.x_max, h.x_max);
    double y_lo = 0.0, y_hi = std::min(g.y_max, h.y_max);
    if (options.x_lo) x_lo = std::max(x_lo, *options.x_lo);
    if (options.x_hi) x_hi = std::min(x_hi, *options.x_hi);
    if (options.y_lo) y_lo = std::max(y_lo, *options.y_lo);
    if (options.y_hi) y_hi = std::min(y_hi, *options.y_hi);

    DiffReport r;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, total = 0.0;
    for (std::size_t k = 0; k <= g.n_t; ++k) {
        const double t = g.t(k);
        if (t < t_lo - eps || t > t_hi + eps) continue;
        if (options.first_level_only && k > 0) break;
        for (std::size_t i = 0; i < g.n_x; ++i) {
            const double x = g.x(i);
            if (x < x_lo - eps || x > x_hi + eps) continue;
            for (std::size_t j = 0; j < g.n_y; ++j) {
                const double y = g.y(j);
                if (y < y_lo - eps || y > y_hi + eps) continue;
                const double vr = ref.at(k, i, j);
                const double vo = other.sample(std::clamp(t, h.t0, h.t_end()), x, y);
                const double d = std::abs(vr - vo);
                ++r.n_nodes;
                total += d;
                lo = std::min(lo, vr);
                hi = std::max(hi, vr);
                if (r.n_nodes == 1 || d > r.max_abs) {
                    r.max_abs = d;
                    r.worst_t = t;
                    r.worst_x = x;
                    r.worst_y = y;
                    r.worst_a = a_is_ref ? vr : vo;
                    r.worst_b = a_is_ref ? vo : vr;
                }
            }
        }
    }
    if (r.n_nodes == 0) throw ValidationError("compare: the surfaces have no common nodes");
    r.mean_abs = total / static_cast<double>(r.n_nodes);
    r.range = hi - lo;
    const double scale = r.range > 0.0 ? r.range : std::max(std::abs(hi), 1.0);
    r.max_rel = r.max_abs / scale;
    r.mean_rel = r.mean_abs / scale;
    return r;
}

json to_json(const DiffReport& r) {
    return {{"nodes", r.n_nodes},
            {"max_abs", r.max_abs},
            {"mean_abs", r.mean_abs},
            {"range", r.range},
            {"max_rel", r.max_rel},
            {"mean_rel", r.mean_rel},
            {"worst", {{"t", r.worst_t}, {"x", r.worst_x}, {"y", r.worst_y}, {"a", r.worst_a}, {"b", r.worst_b}}}};
}

// ---------------------------------------------------------------------------
// Property suite
// ---------------------------------------------------------------------------

bool PropertyReport::all_passed() const {
    return std::all_of(results.begin(), results.end(), [](const PropertyResult& r) { return r.skipped || r.passed; });
}

const PropertyResult* PropertyReport::find(const std::string& name) const {
    for (const auto& r : results) {
        if (r.name == name) return &r;
    }
    return nullptr;
}

json to_json(const PropertyReport& report) {
    json list = json::array();
    for (const auto& r : report.results) {
        json item = {{"name", r.name}, {"passed", r.passed}, {"skipped", r.skipped}, {"detail", r.detail},
                     {"margins", witness_json(r.margins)}};
        if (!r.witness.empty()) item["witness"] = witness_json(r.witness);
        list.push_back(item);
    }
    return {{"all_passed", report.all_passed()}, {"properties", list}};
}

namespace {

PropertyResult check_monotonicity(const ValueSurface& s) {
    PropertyResult r;
    r.name = "y_monotonicity";
    const AugmentedGrid& g = s.grid;
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k <= g.n_t; ++k) {
        for (std::size_t i = 0; i < g.n_x; ++i) {
            for (std::size_t j = 1; j < g.n_y; ++j) {
                const double d = s.at(k, i, j) - s.at(k, i, j - 1);
                if (d < worst) {
                    worst = d;
                    if (d < 0.0) {
                        r.witness = {{"t", g.t(k)}, {"x", g.x(i)}, {"y", g.y(j)}, {"value", s.at(k, i, j)},
                                     {"value_below", s.at(k, i, j - 1)}, {"k", double(k)}, {"i", double(i)},
                                     {"j", double(j)}};
                    }
                }
            }
        }
    }
    r.passed = worst >= 0.0;
    r.margins["min_increment"] = worst;
    r.detail = r.passed ? "V nondecreasing along every y column" : "V decreases in y";
    return r;
}

PropertyResult check_boundary(const ValueSurface& s) {
    PropertyResult r;
    r.name = "boundary";
    if (!s.spec) {
        r.skipped = true;
        r.detail = "surface carries no problem definition";
        return r;
    }
    const AugmentedGrid& g = s.grid;
    double worst = 0.0;
    for (std::size_t k = 0; k <= g.n_t; ++k) {
        for (std::size_t i = 0; i < g.n_x; ++i) {
            const double pi = s.spec->stop_at(g.t(k), g.x(i));
            worst = std::max(worst, std::abs(s.at(k, i, 0) - pi));
            if (s.at(k, i, 0) != pi && r.witness.empty()) {
                r.witness = {{"t", g.t(k)}, {"x", g.x(i)}, {"y", 0.0}, {"value", s.at(k, i, 0)}, {"pi", pi}};
            }
        }
    }
    r.passed = r.witness.empty();
    r.margins["max_gap"] = worst;
    r.detail = r.passed ? "V(t,x,0) equals pi(t,x) at every node" : "V(t,x,0) differs from pi(t,x)";
    return r;
}

PropertyResult check_sandwich(const ValueSurface& s) {
    PropertyResult r;
    r.name = "sandwich";
    if (!s.spec) {
        r.skipped = true;
        r.detail = "surface carries no problem definition";
        return r;
    }
    const AugmentedGrid& g = s.grid;
    const bool with_snell = s.provenance.solver == "dp";
    std::vector<double> snell;
    if (with_snell) snell = unconstrained_snell(*s.spec, g);
    double lower = std::numeric_limits<double>::infinity(), upper = lower, snell_gap = lower;
    for (std::size_t k = 0; k <= g.n_t; ++k) {
        const double t = g.t(k);
        for (std::size_t i = 0; i < g.n_x; ++i) {
            const double x = g.x(i);
            const double pi = s.spec->stop_at(t, x);
            const double psi = psi_bound(*s.spec, x);
            const double u = with_snell ? snell[k * g.n_x + i] : 0.0;
            const double u_slack = 1e-12 * std::max(1.0, std::abs(u));
            for (std::size_t j = 0; j < g.n_y; ++j) {
                const double v = s.at(k, i, j);
                lower = std::min(lower, v - pi);
                upper = std::min(upper, psi - v);
                if (with_snell) snell_gap = std::min(snell_gap, u - v);
                const bool bad = v < pi || v > psi || (with_snell && v > u + u_slack);
                if (bad && r.witness.empty()) {
                    r.witness = {{"t", t}, {"x", x}, {"y", g.y(j)}, {"value", v}, {"pi", pi}, {"psi", psi}};
                    if (with_snell) r.witness["snell"] = u;
                }
            }
        }
    }
    r.passed = r.witness.empty();
    r.margins["min_value_minus_pi"] = lower;
    r.margins["min_psi_minus_value"] = upper;
    if (with_snell) r.margins["min_snell_minus_value"] = snell_gap;
    r.detail = with_snell ? "pi <= V <= min(Psi, unconstrained Snell on the same grid)" : "pi <= V <= Psi";
    return r;
}

PropertyResult check_continuity(const ValueSurface& s) {
    PropertyResult r;
    r.name = "continuity";
    const AugmentedGrid& g = s.grid;
    const double dx = g.dx(), dy = g.dy();
    double l_xy = 0.0, l_t = 0.0;
    bool finite = true;
    for (std::size_t k = 0; k <= g.n_t; ++k) {
        for (std::size_t i = 0; i < g.n_x; ++i) {
            for (std::size_t j = 0; j < g.n_y; ++j) {
                const double v = s.at(k, i, j);
                if (!std::isfinite(v)) finite = false;
                if (i + 1 < g.n_x) l_xy = std::max(l_xy, std::abs(s.at(k, i + 1, j) - v) / dx);
                if (j + 1 < g.n_y) l_xy = std::max(l_xy, std::abs(s.at(k, i, j + 1) - v) / std::sqrt(dy));
                if (k + 1 <= g.n_t) l_t = std::max(l_t, std::abs(s.at(k + 1, i, j) - v) / std::sqrt(g.dt));
            }
        }
    }
    r.passed = finite;
    r.margins["fitted_modulus_xy"] = l_xy;
    const bool time_regular = s.spec && s.spec->time_regular;
    if (time_regular) r.margins["fitted_modulus_t"] = l_t;
    r.detail = std::string("report only: |dV| <= L (|dx| + |dy|^(1/2)) fitted on neighbouring nodes") +
               (time_regular ? "; t-modulus fitted as |dV| <= L |dt|^(1/2)"
                             : "; t-modulus skipped (problem does not declare time regularity)");
    return r;
}

PropertyResult check_positive_stopping(const ValueSurface& s, const FeedbackPolicy& policy) {
    PropertyResult r;
    r.name = "positive_stopping";
    const AugmentedGrid& g = s.grid;
    std::size_t stops = 0, nodes = 0;
    for (std::size_t i = 0; i < g.n_x; ++i) {
        const double pi = s.spec->stop_at(g.t(0), g.x(i));
        for (std::size_t j = 1; j < g.n_y; ++j) {
            ++nodes;
            if (!policy.stop[policy.index(0, i, j)]) continue;
            ++stops;
            if (s.at(0, i, j) != pi && r.witness.empty()) {
                r.witness = {{"t", g.t(0)}, {"x", g.x(i)}, {"y", g.y(j)}, {"value", s.at(0, i, j)}, {"pi", pi}};
            }
        }
    }
    r.passed = r.witness.empty();
    r.margins["initial_stop_fraction"] = nodes ? static_cast<double>(stops) / static_cast<double>(nodes) : 0.0;
    r.detail = "with budget left, the policy stops at the start only where pi already attains V";
    return r;
}

PropertyResult check_dpp(const ValueSurface& s, std::size_t probes, std::uint64_t seed) {
    PropertyResult r;
    r.name = "dpp_consistency";
    const ConsistencyReport c = dpp_consistency(s, probes, seed);
    r.passed = c.passed;
    r.margins = {{"max_discrepancy", c.max_discrepancy}, {"mean_discrepancy", c.mean_discrepancy},
                 {"tolerance", c.tolerance}, {"probes", double(c.n_probes)}};
    const AugmentedGrid& g = s.grid;
    if (!c.passed) {
        r.witness = {{"t", g.t(c.worst.k)}, {"x", g.x(c.worst.i)}, {"y", g.y(c.worst.j)}, {"t_mid", g.t(c.worst.k_mid)},
                     {"value", c.worst.value}, {"recomposed", c.worst.recomposed}};
    }
    r.detail = "V against the policy value up to a random intermediate level plus V there";
    return r;
}

PropertyResult check_rollout(const ValueSurface& s, FeedbackPolicy policy, const CheckOptions& o) {
    PropertyResult r;
    r.name = "rollout";
    const AugmentedGrid& g = s.grid;
    policy.lookup = o.lookup;
    const auto steps = static_cast<std::size_t>(std::llround((g.t_end() - o.start.t) / g.dt));
    const double x0 = o.start.x;
    const ControlledBatch batch =
        simulate_controlled(*s.spec, o.start.t, StateView(&x0, 1), o.start.y, policy, g.dt, steps,
                            o.rollout_paths, o.seed, RolloutOptions{o.noise, false});
    const BatchSummary sum = batch.summary();
    const double value = s.sample(o.start.t, o.start.x, o.start.y);
    const double tol = one_step_tolerance(g);
    const double cost_margin = o.start.y + 3.0 * sum.cost.se - sum.cost.mean;
    const double reward_gap = std::abs(sum.reward.mean - value);
    const double reward_allow = 3.0 * sum.reward.se + tol;
    r.passed = cost_margin >= 0.0 && reward_gap <= reward_allow;
    r.margins = {{"paths", double(sum.n_paths)},      {"mean_cost", sum.cost.mean},     {"cost_se", sum.cost.se},
                 {"budget", o.start.y},               {"mean_reward", sum.reward.mean}, {"reward_se", sum.reward.se},
                 {"surface_value", value},            {"reward_gap", reward_gap},       {"reward_allowance", reward_allow},
                 {"budget_hits", double(sum.budget_hits)}, {"extrapolated_paths", double(sum.extrapolated_paths)}};
    if (!r.passed) {
        r.witness = {{"t", o.start.t}, {"x", o.start.x}, {"y", o.start.y}, {"mean_cost", sum.cost.mean},
                     {"mean_reward", sum.reward.mean}, {"value", value}};
    }
    r.detail = "extracted policy rolled out: mean cost <= y + 3 SE, mean reward within 3 SE + max(dt, dx^2, dy) of V";
    return r;
}

PropertyResult skipped(const char* name, const char* why) {
    PropertyResult r;
    r.name = name;
    r.skipped = true;
    r.detail = why;
    return r;
}

} // namespace

PropertyReport check_properties(const ValueSurface& surface, const CheckOptions& options) {
    PropertyReport report;
    report.results.push_back(check_monotonicity(surface));
    report.results.push_back(check_boundary(surface));
    report.results.push_back(check_sandwich(surface));
    report.results.push_back(check_continuity(surface));
    const bool dp = surface.provenance.solver == "dp" && surface.spec;
    if (!dp) {
        const char* why = "needs a dynamic-programming surface with its problem definition";
        report.results.push_back(skipped("positive_stopping", why));
        report.results.push_back(skipped("dpp_consistency", why));
        report.results.push_back(skipped("rollout", why));
        return report;
    }
    const FeedbackPolicy policy = extract_policy(surface);
    report.results.push_back(check_positive_stopping(surface, policy));
    report.results.push_back(check_dpp(surface, options.probes, options.seed));
    if (options.rollout_paths > 0) {
        report.results.push_back(check_rollout(surface, policy, options));
    } else {
        report.results.push_back(skipped("rollout", "no rollout paths requested"));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Refinement ladder
// ---------------------------------------------------------------------------

namespace {

RefineRow row_for(const std::string& label, const ValueSurface& s, const StartPoint& start) {
    RefineRow row;
    row.label = label;
    row.n_t = s.grid.n_t;
    row.n_x = s.grid.n_x;
    row.n_y = s.grid.n_y;
    row.horizon = s.grid.t_end() - s.grid.t0;
    row.a_max = s.control_bound;
    auto it = s.provenance.params.find("m");
    row.m = it == s.provenance.params.end() ? 0 : static_cast<std::size_t>(it->second);
    row.value_at_start = s.sample(start.t, start.x, start.y);
    return row;
}

std::size_t coarsen(std::size_t cells, std::size_t factor) {
    return std::max<std::size_t>(1, (cells + factor - 1) / factor);
}

} // namespace

std::vector<RefineRow> refine(const RunConfig& config, const std::string& kind, std::size_t levels) {
    if (levels == 0) throw ValidationError("refine: levels must be positive");
    std::vector<RefineRow> rows;
    std::optional<ValueSurface> previous;
    auto push = [&](const std::string& label, RunConfig c) {
        c.pde.grid = c.grid;
        ValueSurface s = solve_surface(c);
        RefineRow row = row_for(label, s, config.start);
        if (previous) row.diff_previous = compare(*previous, s).max_abs;
        rows.push_back(row);
        previous = std::move(s);
    };
    const AugmentedGrid& base = config.grid;
    const double horizon = base.t_end() - base.t0;
    if (kind == "grid") {
        for (std::size_t r = levels; r-- > 0;) {
            RunConfig c = config;
            const std::size_t fx = std::size_t{1} << r;
            c.grid = AugmentedGrid::over_horizon(base.t0, horizon, coarsen(base.n_t, fx * fx), base.x_min, base.x_max,
                                                 coarsen(base.n_x - 1, fx) + 1, base.y_max, coarsen(base.n_y - 1, fx) + 1);
            push("grid/" + std::to_string(fx), c);
        }
    } else if (kind == "controls") {
        RunConfig base_cfg = config;
        const double a_max = config.dp.a_max ? *config.dp.a_max : solve_surface(config).control_bound;
        base_cfg.dp.a_max = a_max;
        base_cfg.pde.a_max = a_max;
        if (config.method == "dp") {
            for (std::size_t r = levels; r-- > 0;) {
                RunConfig c = base_cfg;
                c.dp.m = std::max<std::size_t>(1, config.dp.m >> r);
                push("m=" + std::to_string(c.dp.m), c);
            }
        }
        for (std::size_t r = 1; r < levels + (config.method == "dp" ? 0 : 1); ++r) {
            RunConfig c = base_cfg;
            const double scale = static_cast<double>(std::size_t{1} << r);
            c.dp.a_max = a_max * scale;
            c.pde.a_max = a_max * scale;
            c.dp.m = config.dp.m << r;
            push("a_max x" + std::to_string(std::size_t{1} << r), c);
        }
    } else if (kind == "horizon") {
        for (std::size_t r = 0; r < levels; ++r) {
            RunConfig c = config;
            const std::size_t f = std::size_t{1} << r;
            c.grid = AugmentedGrid::over_horizon(base.t0, horizon * static_cast<double>(f), base.n_t * f, base.x_min,
                                                 base.x_max, base.n_x, base.y_max, base.n_y);
            push("T x" + std::to_string(f), c);
        }
    } else {
        throw ValidationError("unknown refine kind '" + kind + "' (expected grid, controls, horizon)");
    }
    return rows;
}

json to_json(const std::vector<RefineRow>& rows) {
    json list = json::array();
    for (const auto& r : rows) {
        json item = {{"label", r.label}, {"n_t", r.n_t}, {"n_x", r.n_x}, {"n_y", r.n_y}, {"horizon", r.horizon},
                     {"a_max", r.a_max}, {"m", r.m}, {"value_at_start", r.value_at_start}};
        item["diff_previous"] = r.diff_previous ? json(*r.diff_previous) : json(nullptr);
        list.push_back(item);
    }
    return list;
}

std::string refine_csv(const std::vector<RefineRow>& rows) {
    std::string out = "label,n_t,n_x,n_y,horizon,a_max,m,value_at_start,diff_previous\n";
    for (const auto& r : rows) {
        out += r.label + "," + std::to_string(r.n_t) + "," + std::to_string(r.n_x) + "," + std::to_string(r.n_y) + "," +
               format_double(r.horizon) + "," + format_double(r.a_max) + "," + std::to_string(r.m) + "," +
               format_double(r.value_at_start) + "," + (r.diff_previous ? format_double(*r.diff_previous) : "") + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

namespace {

struct Overrides {
    std::string method;
    double a_max = 0.0;
    std::size_t m = 0;
    std::size_t substeps = 0;
    std::string x_boundary;
    double t = 0.0, x = 0.0, y = 0.0;
    std::size_t steps = 0;
    std::string mode;
    std::size_t paths = 0;
    std::size_t probes = 0;
    std::string lookup;
    std::string noise;
    std::string kind;
    std::size_t levels = 0;
};

json oracle_json(const OracleSolution& s) {
    return {{"value", s.value},           {"primal_value", s.primal_value}, {"multiplier", s.multiplier},
            {"dual_value", s.dual_value}, {"achieved_cost", s.achieved_cost}, {"mode", to_string(s.mode)},
            {"method", s.method},         {"iterations", s.iterations}};
}

json summary_json(const BatchSummary& s) {
    return {{"paths", s.n_paths},
            {"reward", to_json(s.reward)},
            {"cost", to_json(s.cost)},
            {"stop_time", to_json(s.stop_time)},
            {"budget_hits", s.budget_hits},
            {"policy_stops", s.policy_stops},
            {"horizon_stops", s.horizon_stops},
            {"extrapolated_paths", s.extrapolated_paths}};
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"Optimal stopping under an expected-cost budget", "cstop"};
    app.require_subcommand(1, 1);

    std::string problem;
    std::string out = "out";
    std::uint64_t seed = 1;
    Overrides ov;
    std::string surface_a, surface_b;
    double x_lo = 0.0, x_hi = 0.0;
    bool first_level = false;

    std::map<std::string, CLI::Option*> opts;
    auto common = [&](CLI::App* sub, bool needs_problem) {
        auto* p = sub->add_option("--problem", problem, "problem JSON file");
        if (needs_problem) p->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "output directory")->capture_default_str();
        opts[sub->get_name() + "/seed"] = sub->add_option("--seed", seed, "random seed");
    };
    auto method_opts = [&](CLI::App* sub) {
        opts[sub->get_name() + "/method"] =
            sub->add_option("--method", ov.method, "dp or pde")->check(CLI::IsMember({"dp", "pde"}));
        opts[sub->get_name() + "/a-max"] = sub->add_option("--a-max", ov.a_max, "control bound A_max");
        opts[sub->get_name() + "/m"] = sub->add_option("--m", ov.m, "controls per sign");
        opts[sub->get_name() + "/substeps"] = sub->add_option("--substeps", ov.substeps, "pde substeps per grid step");
        opts[sub->get_name() + "/x-boundary"] =
            sub->add_option("--x-boundary", ov.x_boundary, "pde x boundary")->check(CLI::IsMember({"clamp", "one_sided"}));
    };
    auto start_opts = [&](CLI::App* sub) {
        opts[sub->get_name() + "/t"] = sub->add_option("--t", ov.t, "start time");
        opts[sub->get_name() + "/x"] = sub->add_option("--x", ov.x, "start state");
        opts[sub->get_name() + "/y"] = sub->add_option("--y", ov.y, "start budget");
    };

    auto* solve = app.add_subcommand("solve", "solve for the value surface");
    common(solve, true);
    method_opts(solve);
    start_opts(solve);

    auto* oracle = app.add_subcommand("oracle", "exact lattice values by linear programming and duality");
    common(oracle, true);
    start_opts(oracle);
    opts["oracle/steps"] = oracle->add_option("--steps", ov.steps, "lattice steps");
    opts["oracle/mode"] =
        oracle->add_option("--mode", ov.mode, "inequality or equality")->check(CLI::IsMember({"inequality", "equality"}));

    auto* simulate = app.add_subcommand("simulate", "roll out the extracted policy");
    common(simulate, true);
    method_opts(simulate);
    start_opts(simulate);
    opts["simulate/paths"] = simulate->add_option("--paths", ov.paths, "number of paths");
    opts["simulate/noise"] = simulate->add_option("--noise", ov.noise, "rademacher or gaussian increments")
                                 ->check(CLI::IsMember({"rademacher", "gaussian"}));
    opts["simulate/lookup"] =
        simulate->add_option("--lookup", ov.lookup, "upper_y or nearest")->check(CLI::IsMember({"upper_y", "nearest"}));

    auto* check = app.add_subcommand("check", "run the property suite");
    common(check, true);
    method_opts(check);
    start_opts(check);
    opts["check/probes"] = check->add_option("--probes", ov.probes, "random probes");
    opts["check/paths"] = check->add_option("--paths", ov.paths, "rollout paths");
    opts["check/noise"] = check->add_option("--noise", ov.noise, "rademacher or gaussian increments")
                              ->check(CLI::IsMember({"rademacher", "gaussian"}));

    auto* cmp = app.add_subcommand("compare", "compare two surface files");
    cmp->add_option("--a", surface_a, "first surface CSV")->required()->check(CLI::ExistingFile);
    cmp->add_option("--b", surface_b, "second surface CSV")->required()->check(CLI::ExistingFile);
    cmp->add_option("--out", out, "output directory")->capture_default_str();
    opts["compare/x-lo"] = cmp->add_option("--x-lo", x_lo, "lower x bound of compared nodes");
    opts["compare/x-hi"] = cmp->add_option("--x-hi", x_hi, "upper x bound of compared nodes");
    cmp->add_flag("--first-level", first_level, "compare the first time level only");

    auto* ref = app.add_subcommand("refine", "convergence table over a refinement ladder");
    common(ref, true);
    method_opts(ref);
    start_opts(ref);
    opts["refine/kind"] =
        ref->add_option("--kind", ov.kind, "grid, controls or horizon")->check(CLI::IsMember({"grid", "controls", "horizon"}));
    opts["refine/levels"] = ref->add_option("--levels", ov.levels, "ladder length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return exit_code::validation;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    auto given = [&](const std::string& key) {
        auto it = opts.find(name + "/" + key);
        return it != opts.end() && it->second->count() > 0;
    };

    try {
        const std::filesystem::path out_dir(out);
        if (name == "compare") {
            const ValueSurface a = read_surface(surface_a);
            const ValueSurface b = read_surface(surface_b);
            CompareOptions co;
            if (given("x-lo")) co.x_lo = x_lo;
            if (given("x-hi")) co.x_hi = x_hi;
            co.first_level_only = first_level;
            const DiffReport d = compare(a, b, co);
            json doc = to_json(d);
            doc["a"] = surface_a;
            doc["b"] = surface_b;
            write_json(out_dir / "compare.json", doc);
            std::cout << "compared " << d.n_nodes << " nodes: max abs " << format_double(d.max_abs) << ", max rel "
                      << format_double(d.max_rel) << "\n";
            return exit_code::ok;
        }

        RunConfig config = load_run_config(problem);
        config.out_dir = out_dir;
        if (given("seed")) config.seed = seed;
        if (given("method")) config.method = ov.method;
        if (given("a-max")) {
            config.dp.a_max = ov.a_max;
            config.pde.a_max = ov.a_max;
        }
        if (given("m")) config.dp.m = ov.m;
        if (given("substeps")) config.pde.substeps = ov.substeps;
        if (given("x-boundary")) config.pde.x_boundary = parse_x_boundary(ov.x_boundary);
        if (given("t")) config.start.t = ov.t;
        if (given("x")) config.start.x = ov.x;
        if (given("y")) config.start.y = ov.y;
        if (given("steps")) config.oracle_steps = ov.steps;
        if (given("mode")) config.oracle_mode = parse_mode(ov.mode);
        if (given("paths")) config.paths = ov.paths;
        if (given("probes")) config.probes = ov.probes;
        if (given("lookup")) config.lookup = parse_lookup(ov.lookup);
        if (given("noise")) config.noise = parse_noise(ov.noise);
        if (given("kind")) config.refine_kind = ov.kind;
        if (given("levels")) config.refine_levels = ov.levels;
        config.pde.grid = config.grid;
        validate_run_config(config);
        const StartPoint& st = config.start;

        if (name == "solve") {
            const ValueSurface s = solve_surface(config);
            write_surface(s, out_dir / "surface.csv");
            if (config.method == "dp") write_json(out_dir / "policy.json", policy_to_json(extract_policy(s)));
            std::cout << "solved " << config.spec->name << " (" << config.method << "), V(" << format_double(st.t) << ", "
                      << format_double(st.x) << ", " << format_double(st.y)
                      << ") = " << format_double(s.sample(st.t, st.x, st.y)) << "\n";
            return exit_code::ok;
        }
        if (name == "oracle") {
            const double dt = (config.grid.t_end() - st.t) / static_cast<double>(config.oracle_steps);
            const Tree tree = build_tree(*config.spec, st.t, st.x, config.oracle_steps, dt);
            const OracleSolution lp = solve_lp(tree, st.y, config.oracle_mode);
            const OracleSolution lag = solve_lagrangian(tree, st.y, 1e-12, config.oracle_mode);
            json doc = {{"problem", config.spec->name},
                        {"start", {{"t", st.t}, {"x", st.x}, {"y", st.y}}},
                        {"steps", config.oracle_steps},
                        {"dt", dt},
                        {"sigma_eff", tree.sigma_eff},
                        {"max_achievable_cost", max_achievable_cost(tree)},
                        {"lp", oracle_json(lp)},
                        {"lagrangian", oracle_json(lag)},
                        {"duality_gap", std::abs(lp.value - lag.value)}};
            write_json(out_dir / "oracle.json", doc);
            std::cout << "lattice value " << format_double(lp.value) << " (" << lp.method << "), dual "
                      << format_double(lag.value) << "\n";
            return exit_code::ok;
        }
        if (name == "simulate") {
            if (config.method != "dp") throw ValidationError("simulate needs --method dp (policies come from the DP surface)");
            const ValueSurface s = solve_surface(config);
            FeedbackPolicy policy = extract_policy(s);
            policy.lookup = config.lookup;
            const auto steps = static_cast<std::size_t>(std::llround((config.grid.t_end() - st.t) / config.grid.dt));
            const ControlledBatch batch = simulate_controlled(*config.spec, st.t, StateView(&st.x, 1), st.y, policy,
                                                              config.grid.dt, steps, config.paths, config.seed,
                                                              RolloutOptions{config.noise, false});
            const BatchSummary sum = batch.summary();
            json doc = {{"problem", config.spec->name},
                        {"start", {{"t", st.t}, {"x", st.x}, {"y", st.y}}},
                        {"seed", config.seed},
                        {"noise", noise_name(config.noise)},
                        {"steps", steps},
                        {"dt", config.grid.dt},
                        {"surface_value", s.sample(st.t, st.x, st.y)},
                        {"summary", summary_json(sum)}};
            write_json(out_dir / "simulate.json", doc);
            std::cout << "mean reward " << format_double(sum.reward.mean) << " (se " << format_double(sum.reward.se)
                      << "), mean cost " << format_double(sum.cost.mean) << " (se " << format_double(sum.cost.se)
                      << ")\n";
            return exit_code::ok;
        }
        if (name == "check") {
            const ValueSurface s = solve_surface(config);
            CheckOptions co;
            co.probes = config.probes;
            co.seed = config.seed;
            co.rollout_paths = config.method == "dp" ? config.paths : 0;
            co.start = st;
            co.lookup = config.lookup;
            co.noise = config.noise;
            const PropertyReport report = check_properties(s, co);
            json doc = to_json(report);
            doc["problem"] = config.spec->name;
            doc["method"] = config.method;
            write_json(out_dir / "properties.json", doc);
            for (const auto& r : report.results) {
                std::cout << (r.skipped ? "SKIP " : (r.passed ? "PASS " : "FAIL ")) << r.name << "\n";
            }
            return report.all_passed() ? exit_code::ok : exit_code::property;
        }
        if (name == "refine") {
            const auto rows = refine(config, config.refine_kind, config.refine_levels);
            json doc = {{"problem", config.spec->name}, {"kind", config.refine_kind}, {"method", config.method},
                        {"start", {{"t", st.t}, {"x", st.x}, {"y", st.y}}}, {"rows", to_json(rows)}};
            write_json(out_dir / "refine.json", doc);
            write_atomic(out_dir / "refine.csv", refine_csv(rows));
            std::cout << refine_csv(rows);
            return exit_code::ok;
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code::validation;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return exit_code::numerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code::failure;
    }
    return exit_code::failure;
}

} // namespace cstop
