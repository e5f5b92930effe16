#pragma once

// Problem files, surface and report files. All writes go through a temporary
// file and a rename, so readers never see a partial output.

#include "cstop/dp_solver.hpp"
#include "cstop/model.hpp"
#include "cstop/surface.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>

namespace cstop {

using json = nlohmann::json;

// Shortest decimal text that reads back to the same double.
std::string format_double(double value);

void write_atomic(const std::filesystem::path& path, const std::string& content);
void write_json(const std::filesystem::path& path, const json& value); // pretty-printed, trailing newline
json read_json_file(const std::filesystem::path& path);

// Problem definition from its JSON form. Throws ValidationError naming the
// offending field. Unknown keys are rejected.
//
//   { "name": "...",
//     "dynamics": {"preset": "bm", "mu": 0, "sigma": 1},
//     "reward": {"running": {"preset": "zero"}, "stop": {"preset": "polynomial", "c2": 1}},
//     "cost": {"preset": "constant", "value": 1},
//     "constants": {"p": 2, "c_frak": 1, "c_p": 1, "kappa0": 1, "kappa_decay": 0,
//                   "lipschitz": {"drift": 0, "volatility": 0, "running": 0, "cost": 0},
//                   "time_regular": true},
//     "horizon": 1 }
//
// Sections consumed by the command line (grid, solver, start, simulate,
// oracle, checks, refine) may sit alongside and are ignored here.
ProblemSpec problem_from_json(const json& doc);
json problem_to_json(const ProblemSpec& spec);

Preset preset_from_json(const json& doc, const std::string& where);
json preset_to_json(const Preset& preset);

json grid_to_json(const AugmentedGrid& grid);
AugmentedGrid grid_from_json(const json& doc);

// CSV with header t,x,y,value, rows in (k, i, j) order.
std::string surface_csv(const ValueSurface& surface);
json surface_metadata(const ValueSurface& surface);

// Writes `csv_path` and the metadata next to it with extension .json.
void write_surface(const ValueSurface& surface, const std::filesystem::path& csv_path);

// Reads a surface CSV. The grid comes from the sibling metadata when present,
// otherwise it is inferred from the coordinates. The problem is not restored.
ValueSurface read_surface(const std::filesystem::path& csv_path);

json policy_to_json(const FeedbackPolicy& policy);

} // namespace cstop
