#include "cstop/io.hpp"

#include "cstop/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

namespace cstop {

std::string format_double(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) {
            std::error_code ignored;
            std::filesystem::remove(tmp, ignored);
            throw std::runtime_error("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

void write_json(const std::filesystem::path& path, const json& value) {
    write_atomic(path, value.dump(2) + "\n");
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

namespace {

void reject_unknown(const json& doc, std::initializer_list<const char*> known, const std::string& where) {
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
            throw ValidationError("unknown field '" + it.key() + "' in " + where);
        }
    }
}

double number_at(const json& doc, const char* key, const std::string& where, double fallback) {
    if (!doc.contains(key)) return fallback;
    const json& v = doc.at(key);
    if (!v.is_number()) throw ValidationError(where + "." + key + " must be a number");
    return v.get<double>();
}

std::optional<double> optional_number(const json& doc, const char* key, const std::string& where) {
    if (!doc.contains(key) || doc.at(key).is_null()) return std::nullopt;
    return number_at(doc, key, where, 0.0);
}

const json& object_at(const json& doc, const char* key, const std::string& where) {
    if (!doc.contains(key)) throw ValidationError("missing field " + where + "." + key);
    const json& v = doc.at(key);
    if (!v.is_object()) throw ValidationError(where + "." + key + " must be an object");
    return v;
}

} // namespace

Preset preset_from_json(const json& doc, const std::string& where) {
    if (doc.is_number()) return Preset{"constant", {{"value", doc.get<double>()}}};
    if (!doc.is_object()) throw ValidationError(where + " must be a preset object or a number");
    if (!doc.contains("preset") || !doc.at("preset").is_string()) {
        throw ValidationError(where + ".preset must name a preset");
    }
    Preset p;
    p.name = doc.at("preset").get<std::string>();
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (it.key() == "preset") continue;
        if (!it->is_number()) throw ValidationError(where + "." + it.key() + " must be a number");
        p.params[it.key()] = it->get<double>();
    }
    return p;
}

json preset_to_json(const Preset& preset) {
    json out = json::object();
    out["preset"] = preset.name;
    for (const auto& [k, v] : preset.params) out[k] = v;
    return out;
}

ProblemSpec problem_from_json(const json& doc) {
    if (!doc.is_object()) throw ValidationError("problem file must hold a JSON object");
    reject_unknown(doc, {"name", "dynamics", "reward", "cost", "constants", "horizon", "grid", "solver", "start",
                         "simulate", "oracle", "checks", "refine", "description"},
                   "problem");
    ProblemSpec spec;
    if (doc.contains("name")) {
        if (!doc.at("name").is_string()) throw ValidationError("problem.name must be a string");
        spec.name = doc.at("name").get<std::string>();
    }

    {
        apply_dynamics_preset(spec, preset_from_json(object_at(doc, "dynamics", "problem"), "problem.dynamics"));

        const json& reward = object_at(doc, "reward", "problem");
        reject_unknown(reward, {"running", "stop"}, "problem.reward");
        const Preset running = reward.contains("running") ? preset_from_json(reward.at("running"), "problem.reward.running")
                                                          : Preset{"zero", {}};
        if (!reward.contains("stop")) throw ValidationError("missing field problem.reward.stop");
        const Preset stop = preset_from_json(reward.at("stop"), "problem.reward.stop");
        if (!doc.contains("cost")) throw ValidationError("missing field problem.cost");
        const Preset cost = preset_from_json(doc.at("cost"), "problem.cost");
        spec.running_reward = make_scalar_preset(running);
        spec.stop_reward = make_scalar_preset(stop);
        spec.cost_rate = make_scalar_preset(cost);
        spec.running_preset = running;
        spec.stop_preset = stop;
        spec.cost_preset = cost;
    }

    if (doc.contains("constants")) {
        const json& c = object_at(doc, "constants", "problem");
        const std::string where = "problem.constants";
        reject_unknown(c, {"p", "c_frak", "c_p", "kappa0", "kappa_decay", "lipschitz", "time_regular"}, where);
        auto& k = spec.constants;
        k.exponent = number_at(c, "p", where, k.exponent);
        k.growth = number_at(c, "c_frak", where, k.growth);
        k.moment = number_at(c, "c_p", where, k.moment);
        k.cost_floor = number_at(c, "kappa0", where, k.cost_floor);
        k.cost_floor_decay = number_at(c, "kappa_decay", where, k.cost_floor_decay);
        if (c.contains("lipschitz")) {
            const json& l = object_at(c, "lipschitz", where);
            const std::string lw = where + ".lipschitz";
            reject_unknown(l, {"drift", "volatility", "running", "cost"}, lw);
            k.lipschitz.drift = optional_number(l, "drift", lw);
            k.lipschitz.volatility = optional_number(l, "volatility", lw);
            k.lipschitz.running_reward = optional_number(l, "running", lw);
            k.lipschitz.cost_rate = optional_number(l, "cost", lw);
        }
        if (c.contains("time_regular")) {
            if (!c.at("time_regular").is_boolean()) throw ValidationError(where + ".time_regular must be a boolean");
            spec.time_regular = c.at("time_regular").get<bool>();
        }
    }
    if (!doc.contains("horizon")) throw ValidationError("missing field problem.horizon");
    spec.horizon = number_at(doc, "horizon", "problem", 1.0);
    validate(spec);
    return spec;
}

json problem_to_json(const ProblemSpec& spec) {
    if (!spec.dynamics_preset || !spec.running_preset || !spec.stop_preset || !spec.cost_preset) {
        throw ValidationError("problem '" + spec.name + "' was not built from presets and cannot be serialized");
    }
    json out;
    out["name"] = spec.name;
    out["dynamics"] = preset_to_json(*spec.dynamics_preset);
    out["reward"] = {{"running", preset_to_json(*spec.running_preset)}, {"stop", preset_to_json(*spec.stop_preset)}};
    out["cost"] = preset_to_json(*spec.cost_preset);
    const auto& k = spec.constants;
    json lip = json::object();
    if (k.lipschitz.drift) lip["drift"] = *k.lipschitz.drift;
    if (k.lipschitz.volatility) lip["volatility"] = *k.lipschitz.volatility;
    if (k.lipschitz.running_reward) lip["running"] = *k.lipschitz.running_reward;
    if (k.lipschitz.cost_rate) lip["cost"] = *k.lipschitz.cost_rate;
    out["constants"] = {{"p", k.exponent},        {"c_frak", k.growth},
                        {"c_p", k.moment},        {"kappa0", k.cost_floor},
                        {"kappa_decay", k.cost_floor_decay}, {"lipschitz", lip},
                        {"time_regular", spec.time_regular}};
    out["horizon"] = spec.horizon;
    return out;
}

json grid_to_json(const AugmentedGrid& g) {
    return {{"t0", g.t0}, {"dt", g.dt}, {"n_t", g.n_t}, {"x_min", g.x_min}, {"x_max", g.x_max},
            {"n_x", g.n_x}, {"y_max", g.y_max}, {"n_y", g.n_y}};
}

AugmentedGrid grid_from_json(const json& doc) {
    if (!doc.is_object()) throw ValidationError("grid must be an object");
    reject_unknown(doc, {"t0", "dt", "n_t", "x_min", "x_max", "n_x", "y_max", "n_y"}, "grid");
    AugmentedGrid g;
    auto count = [&](const char* key, std::size_t fallback) {
        if (!doc.contains(key)) return fallback;
        const json& v = doc.at(key);
        if (!v.is_number_integer() || v.get<long long>() < 0) throw ValidationError(std::string("grid.") + key + " must be a nonnegative integer");
        return v.get<std::size_t>();
    };
    g.t0 = number_at(doc, "t0", "grid", g.t0);
    g.dt = number_at(doc, "dt", "grid", g.dt);
    g.n_t = count("n_t", g.n_t);
    g.x_min = number_at(doc, "x_min", "grid", g.x_min);
    g.x_max = number_at(doc, "x_max", "grid", g.x_max);
    g.n_x = count("n_x", g.n_x);
    g.y_max = number_at(doc, "y_max", "grid", g.y_max);
    g.n_y = count("n_y", g.n_y);
    return g;
}

std::string surface_csv(const ValueSurface& s) {
    const AugmentedGrid& g = s.grid;
    std::string out = "t,x,y,value\n";
    out.reserve(out.size() + g.size() * 40);
    for (std::size_t k = 0; k <= g.n_t; ++k) {
        const std::string t = format_double(g.t(k)) + ",";
        for (std::size_t i = 0; i < g.n_x; ++i) {
            const std::string tx = t + format_double(g.x(i)) + ",";
            for (std::size_t j = 0; j < g.n_y; ++j) {
                out += tx;
                out += format_double(g.y(j));
                out += ',';
                out += format_double(s.at(k, i, j));
                out += '\n';
            }
        }
    }
    return out;
}

json surface_metadata(const ValueSurface& s) {
    json out;
    out["grid"] = grid_to_json(s.grid);
    out["solver"] = s.provenance.solver;
    out["params"] = s.provenance.params;
    out["diagnostics"] = s.diagnostics;
    out["control_bound"] = s.control_bound;
    if (s.spec) {
        out["problem"] = s.spec->name;
        try {
            out["problem_definition"] = problem_to_json(*s.spec);
        } catch (const ValidationError&) {
        }
    }
    return out;
}

void write_surface(const ValueSurface& surface, const std::filesystem::path& csv_path) {
    std::filesystem::path meta = csv_path;
    meta.replace_extension(".json");
    write_atomic(csv_path, surface_csv(surface));
    write_json(meta, surface_metadata(surface));
}

namespace {

double parse_field(std::string_view text, std::size_t line) {
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        throw ValidationError("surface CSV line " + std::to_string(line) + ": bad number '" + std::string(text) + "'");
    }
    return v;
}

// Uniform grid through sorted distinct coordinates.
void infer_axis(const std::set<double>& values, const char* name, double& lo, double& hi, std::size_t& n) {
    if (values.size() < 2) throw ValidationError(std::string("surface CSV has fewer than two ") + name + " values");
    lo = *values.begin();
    hi = *values.rbegin();
    n = values.size();
}

} // namespace

ValueSurface read_surface(const std::filesystem::path& csv_path) {
    std::ifstream in(csv_path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + csv_path.string());
    std::string line;
    if (!std::getline(in, line) || line != "t,x,y,value") {
        throw ValidationError(csv_path.string() + ": expected header t,x,y,value");
    }
    std::vector<double> ts, xs, ys, vs;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::string_view view(line);
        double fields[4];
        for (int f = 0; f < 4; ++f) {
            const auto comma = f < 3 ? view.find(',') : std::string_view::npos;
            if (f < 3 && comma == std::string_view::npos) {
                throw ValidationError("surface CSV line " + std::to_string(lineno) + ": expected 4 fields");
            }
            fields[f] = parse_field(view.substr(0, comma), lineno);
            if (f < 3) view.remove_prefix(comma + 1);
        }
        ts.push_back(fields[0]);
        xs.push_back(fields[1]);
        ys.push_back(fields[2]);
        vs.push_back(fields[3]);
    }

    ValueSurface s;
    std::filesystem::path meta = csv_path;
    meta.replace_extension(".json");
    if (std::filesystem::exists(meta)) {
        const json m = read_json_file(meta);
        s.grid = grid_from_json(m.at("grid"));
        s.provenance.solver = m.value("solver", "");
        if (m.contains("params")) s.provenance.params = m.at("params").get<std::map<std::string, double>>();
        if (m.contains("diagnostics")) s.diagnostics = m.at("diagnostics").get<std::map<std::string, double>>();
        s.control_bound = m.value("control_bound", 0.0);
    } else {
        const std::set<double> tset(ts.begin(), ts.end()), xset(xs.begin(), xs.end()), yset(ys.begin(), ys.end());
        double t_lo, t_hi, y_lo;
        std::size_t n_t_nodes;
        infer_axis(tset, "t", t_lo, t_hi, n_t_nodes);
        infer_axis(xset, "x", s.grid.x_min, s.grid.x_max, s.grid.n_x);
        infer_axis(yset, "y", y_lo, s.grid.y_max, s.grid.n_y);
        if (y_lo != 0.0) throw ValidationError("surface CSV: y grid must start at 0");
        s.grid.t0 = t_lo;
        s.grid.n_t = n_t_nodes - 1;
        s.grid.dt = (t_hi - t_lo) / static_cast<double>(s.grid.n_t);
    }
    validate_grid(s.grid);
    if (vs.size() != s.grid.size()) {
        throw ValidationError(csv_path.string() + ": " + std::to_string(vs.size()) + " rows, grid needs " +
                              std::to_string(s.grid.size()));
    }
    const double tol_t = 1e-9 * std::max(1.0, std::abs(s.grid.t_end()));
    const double tol_x = 1e-9 * std::max({1.0, std::abs(s.grid.x_min), std::abs(s.grid.x_max)});
    for (std::size_t n = 0; n < vs.size(); ++n) {
        const std::size_t k = n / s.grid.slice_size();
        const std::size_t i = (n / s.grid.n_y) % s.grid.n_x;
        const std::size_t j = n % s.grid.n_y;
        if (std::abs(ts[n] - s.grid.t(k)) > tol_t || std::abs(xs[n] - s.grid.x(i)) > tol_x ||
            std::abs(ys[n] - s.grid.y(j)) > 1e-9 * std::max(1.0, s.grid.y_max)) {
            throw ValidationError(csv_path.string() + ": row " + std::to_string(n + 2) +
                                  " does not match a uniform (t, x, y) grid in row-major order");
        }
    }
    s.values = std::move(vs);
    return s;
}

json policy_to_json(const FeedbackPolicy& policy) {
    json out;
    out["grid"] = grid_to_json(policy.grid);
    out["lookup"] = policy.lookup == PolicyLookup::nearest ? "nearest" : "upper_y";
    out["controls"] = policy.controls;
    out["layout"] = "[k][i][j] for k < n_t";
    std::vector<int> stop(policy.stop.begin(), policy.stop.end());
    out["stop"] = stop;
    out["control"] = policy.control;
    return out;
}

} // namespace cstop
