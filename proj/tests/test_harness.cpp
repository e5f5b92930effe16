#include "doctest.h"

#include "cstop/errors.hpp"
#include "cstop/harness.hpp"
#include "support.hpp"

#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace cstop;
using cstop::testing::read_file;
using cstop::testing::scratch_dir;
using cstop::testing::share;

namespace {

const std::filesystem::path problems = CSTOP_PROBLEMS_DIR;

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cstop");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    CliResult r;
    r.code = run(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string problem(const char* name) { return (problems / name).string(); }

// Small wald-sq configuration for fast checks.
RunConfig small_wald() {
    RunConfig c = load_run_config(problems / "wald-sq.json");
    c.grid = AugmentedGrid::over_horizon(0.0, 1.0, 40, -3.0, 3.0, 31, 0.6, 31);
    c.pde.grid = c.grid;
    return c;
}

} // namespace

TEST_SUITE("harness") {

TEST_CASE("problem files load with their sections") {
    for (const char* name : {"wald-sq.json", "wald-lin.json", "moment.json", "ou-put.json"}) {
        const RunConfig c = load_run_config(problems / name);
        CHECK(c.spec);
        CHECK_NOTHROW(validate_run_config(c));
    }
    const RunConfig c = load_run_config(problems / "wald-sq.json");
    CHECK(c.grid.n_t == 100);
    CHECK(c.grid.n_x == 81);
    CHECK(c.grid.n_y == 81);
    CHECK(c.start.y == 0.5);
}

TEST_CASE("run configuration ranges are validated") {
    RunConfig c = small_wald();
    c.paths = 0;
    CHECK_THROWS_AS(validate_run_config(c), ValidationError);
    c = small_wald();
    c.method = "mc";
    CHECK_THROWS_AS(validate_run_config(c), ValidationError);
    c = small_wald();
    c.start.t = 1.0;
    CHECK_THROWS_AS(validate_run_config(c), ValidationError);
    const auto dir = scratch_dir("harness_cfg");
    write_atomic(dir / "p.json", R"({"name":"x","dynamics":{"preset":"bm"},"reward":{"stop":0},"cost":1,"horizon":1,"grid":{"n_t":-3}})");
    CHECK_THROWS_AS(load_run_config(dir / "p.json"), ValidationError);
}

TEST_CASE("a surface against itself differs nowhere") {
    const ValueSurface s = solve_surface(small_wald());
    const DiffReport d = compare(s, s);
    CHECK(d.n_nodes == s.grid.size());
    CHECK(d.max_abs == 0.0);
    CHECK(d.mean_abs == 0.0);
    CHECK(d.max_rel == 0.0);
}

TEST_CASE("disjoint surfaces cannot be compared") {
    RunConfig c = small_wald();
    const ValueSurface a = solve_surface(c);
    ValueSurface b = a;
    b.grid.x_min += 100.0;
    b.grid.x_max += 100.0;
    CHECK_THROWS_AS(compare(a, b), ValidationError);
}

TEST_CASE("dp and pde agree on wald-sq") {
    RunConfig c = load_run_config(problems / "wald-sq.json");
    const ValueSurface dp = solve_surface(c);
    c.method = "pde";
    const ValueSurface pde = solve_surface(c);
    const DiffReport d = compare(dp, pde);
    CHECK(d.max_rel <= 0.05);
}

TEST_CASE("dp matches the lattice oracle") {
    RunConfig c = load_run_config(problems / "wald-sq.json");
    const ValueSurface s = solve_surface(c);
    for (double y : {0.1, 0.3, 0.5}) {
        const Tree t = build_tree(*c.spec, 0.0, 0.0, 100, 0.01);
        CHECK(std::abs(s.sample(0.0, 0.0, y) - solve_lp(t, y).value) <= one_step_tolerance(s.grid));
    }
}

TEST_CASE("wald-sq passes the property suite") {
    RunConfig c = load_run_config(problems / "wald-sq.json");
    const ValueSurface s = solve_surface(c);
    CheckOptions o;
    o.probes = 100;
    o.rollout_paths = 20000;
    o.start = c.start;
    const PropertyReport r = check_properties(s, o);
    REQUIRE(r.results.size() == 7);
    for (const auto& p : r.results) {
        INFO(p.name);
        CHECK(p.passed);
        CHECK_FALSE(p.skipped);
        CHECK(p.witness.empty());
    }
    CHECK(r.all_passed());
}

TEST_CASE("a corrupted cell is the monotonicity witness") {
    ValueSurface s = solve_surface(small_wald());
    const std::size_t k = 3, i = 12, j = 7;
    s.at(k, i, j) = -10.0;
    const PropertyReport r = check_properties(s, CheckOptions{});
    const PropertyResult* mono = r.find("y_monotonicity");
    REQUIRE(mono);
    CHECK_FALSE(mono->passed);
    CHECK(mono->witness.at("t") == doctest::Approx(s.grid.t(k)));
    CHECK(mono->witness.at("x") == doctest::Approx(s.grid.x(i)));
    CHECK(mono->witness.at("y") == doctest::Approx(s.grid.y(j)));
    CHECK(mono->witness.at("value") == -10.0);
    CHECK_FALSE(r.all_passed());
    const PropertyResult* sandwich = r.find("sandwich");
    REQUIRE(sandwich);
    CHECK_FALSE(sandwich->passed);
    CHECK_FALSE(sandwich->witness.empty());
}

TEST_CASE("moment constraint holds on rollouts") {
    const RunConfig c = load_run_config(problems / "moment.json");
    const ValueSurface s = solve_surface(c);
    CheckOptions o;
    o.rollout_paths = 20000;
    o.start = c.start;
    const PropertyReport r = check_properties(s, o);
    CHECK(r.all_passed());

    const auto policy = extract_policy(s);
    const double x0 = c.start.x;
    const auto batch = simulate_controlled(*c.spec, 0.0, StateView(&x0, 1), c.start.y, policy, c.grid.dt, c.grid.n_t,
                                           20000, 3, RolloutOptions{Noise::rademacher, false});
    const double a = c.spec->cost_preset->param("a", 0.0), q = c.spec->cost_preset->param("q", 1.0),
                 b = c.spec->cost_preset->param("b", 0.0);
    std::vector<double> spent;
    for (const auto& out : batch.outcomes) spent.push_back(a * std::pow(out.stop_time, q) + b * out.stop_time);
    const MeanSe m = mean_se(spent);
    // The exact integral exceeds the left-endpoint sum by at most a q (q - 1) T^(q-2) dt / 2 per unit time.
    const double quadrature = 0.5 * a * q * (q - 1.0) * c.grid.dt;
    CHECK(m.mean <= c.start.y + 3.0 * m.se + quadrature);
}

TEST_CASE("pde surfaces skip the policy checks") {
    RunConfig c = small_wald();
    c.method = "pde";
    const PropertyReport r = check_properties(solve_surface(c), CheckOptions{});
    CHECK(r.find("y_monotonicity")->passed);
    CHECK(r.find("boundary")->passed);
    CHECK(r.find("sandwich")->passed);
    CHECK(r.find("dpp_consistency")->skipped);
    CHECK(r.all_passed());
}

TEST_CASE("continuity reports the t-modulus only for time-regular problems") {
    RunConfig c = small_wald();
    const PropertyReport r = check_properties(solve_surface(c), CheckOptions{});
    CHECK(r.find("continuity")->margins.count("fitted_modulus_t") == 1);
    ProblemSpec irregular = *c.spec;
    irregular.time_regular = false;
    c.spec = share(irregular);
    const PropertyReport r2 = check_properties(solve_surface(c), CheckOptions{});
    CHECK(r2.find("continuity")->margins.count("fitted_modulus_t") == 0);
}

TEST_CASE("refinement ladders") {
    RunConfig c = small_wald();
    const auto grid_rows = refine(c, "grid", 3);
    REQUIRE(grid_rows.size() == 3);
    CHECK(grid_rows.back().n_x == c.grid.n_x);
    CHECK_FALSE(grid_rows.front().diff_previous);
    CHECK(grid_rows.back().diff_previous);
    CHECK(grid_rows[0].n_t < grid_rows[1].n_t);
    CHECK(grid_rows[1].n_x < grid_rows[2].n_x);
    CHECK(std::isfinite(*grid_rows.back().diff_previous));

    const auto control_rows = refine(c, "controls", 2);
    CHECK(control_rows.size() == 3);
    const auto horizon_rows = refine(c, "horizon", 2);
    REQUIRE(horizon_rows.size() == 2);
    CHECK(horizon_rows[1].horizon == doctest::Approx(2.0));
    CHECK_THROWS_AS(refine(c, "space", 2), ValidationError);
    CHECK(refine_csv(grid_rows).rfind("label,", 0) == 0);
}

TEST_CASE("cli solve writes the surface") {
    const auto dir = scratch_dir("cli_solve");
    const auto r = cli({"solve", "--method", "dp", "--problem", problem("wald-sq.json"), "--out", dir.string()});
    CHECK(r.code == exit_code::ok);
    CHECK(std::filesystem::exists(dir / "surface.csv"));
    CHECK(std::filesystem::exists(dir / "surface.json"));
    CHECK(std::filesystem::exists(dir / "policy.json"));
}

TEST_CASE("cli rejects an unstable explicit step with the bound") {
    const auto dir = scratch_dir("cli_unstable");
    const auto r = cli({"solve", "--method", "pde", "--substeps", "1", "--a-max", "20", "--problem",
                        problem("wald-sq.json"), "--out", dir.string()});
    CHECK(r.code == exit_code::validation);
    CHECK(r.err.find("stability bound violated") != std::string::npos);
    CHECK(r.err.find("need dt_pde <=") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(dir / "surface.csv"));
}

TEST_CASE("cli usage errors exit with 2") {
    CHECK(cli({"solve", "--problem", problem("wald-sq.json"), "--bogus"}).code == exit_code::validation);
    CHECK(cli({"solve", "--problem", "/nonexistent/p.json"}).code == exit_code::validation);
    CHECK(cli({"frobnicate"}).code == exit_code::validation);
    CHECK(cli({}).code == exit_code::validation);
    const auto dir = scratch_dir("cli_bad");
    write_atomic(dir / "p.json", R"({"name":"x","dynamics":{"preset":"bm"},"reward":{"stop":0},"cost":1,"horizon":1,"extra":1})");
    CHECK(cli({"solve", "--problem", (dir / "p.json").string(), "--out", dir.string()}).code == exit_code::validation);
}

TEST_CASE("cli check reports property failures with 4") {
    const auto dir = scratch_dir("cli_fail");
    write_atomic(dir / "p.json", R"({
        "name": "loose-ceiling",
        "dynamics": {"preset": "bm", "mu": 0, "sigma": 1},
        "reward": {"running": {"preset": "zero"}, "stop": {"preset": "polynomial", "c2": 3}},
        "cost": {"preset": "constant", "value": 1},
        "constants": {"p": 2, "c_frak": 1, "c_p": 0.01, "kappa0": 1},
        "horizon": 1,
        "grid": {"n_t": 20, "n_x": 21, "n_y": 11, "y_max": 0.5},
        "simulate": {"paths": 1000},
        "checks": {"probes": 10}
    })");
    const auto r = cli({"check", "--problem", (dir / "p.json").string(), "--out", dir.string()});
    CHECK(r.code == exit_code::property);
    CHECK(r.out.find("FAIL sandwich") != std::string::npos);
    const json report = read_json_file(dir / "properties.json");
    bool found = false;
    for (const auto& item : report.at("properties")) {
        if (item.at("name") == "sandwich") {
            found = true;
            CHECK(item.contains("witness"));
        }
    }
    CHECK(found);
}

TEST_CASE("cli subcommands write their reports") {
    const auto dir = scratch_dir("cli_all");
    const std::string p = problem("wald-sq.json");
    const std::string out = dir.string();
    CHECK(cli({"oracle", "--problem", p, "--out", out, "--steps", "40"}).code == exit_code::ok);
    CHECK(cli({"simulate", "--problem", p, "--out", out, "--paths", "2000"}).code == exit_code::ok);
    CHECK(cli({"check", "--problem", p, "--out", out, "--paths", "5000", "--probes", "20"}).code == exit_code::ok);
    CHECK(cli({"refine", "--problem", p, "--out", out, "--levels", "2"}).code == exit_code::ok);
    CHECK(cli({"solve", "--problem", p, "--out", out}).code == exit_code::ok);
    CHECK(cli({"compare", "--a", (dir / "surface.csv").string(), "--b", (dir / "surface.csv").string(), "--out", out})
              .code == exit_code::ok);
    for (const char* f : {"oracle.json", "simulate.json", "properties.json", "refine.json", "refine.csv", "compare.json"}) {
        CHECK(std::filesystem::exists(dir / f));
    }
    const json oracle = read_json_file(dir / "oracle.json");
    CHECK(oracle.at("lp").at("value").get<double>() == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(read_json_file(dir / "compare.json").at("max_abs").get<double>() == 0.0);
    CHECK(read_json_file(dir / "simulate.json").at("summary").at("paths") == 2000);
}

TEST_CASE("cli runs are byte-identical") {
    const std::string p = problem("wald-sq.json");
    const auto a = scratch_dir("cli_det_a"), b = scratch_dir("cli_det_b");
    for (const auto& dir : {a, b}) {
        CHECK(cli({"solve", "--problem", p, "--out", dir.string()}).code == 0);
        CHECK(cli({"simulate", "--problem", p, "--out", dir.string(), "--paths", "3000", "--seed", "9"}).code == 0);
    }
    for (const char* f : {"surface.csv", "surface.json", "policy.json", "simulate.json"}) {
        CHECK(read_file(a / f) == read_file(b / f));
    }
}

}
