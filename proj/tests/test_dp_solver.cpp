#include "doctest.h"

#include "cstop/dp_solver.hpp"
#include "cstop/errors.hpp"
#include "cstop/tree_oracle.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace cstop;
using cstop::testing::share;

namespace {

AugmentedGrid documented_grid() { return AugmentedGrid::over_horizon(0.0, 1.0, 100, -4.0, 4.0, 81, 0.8, 81); }

double max_start_error(const ValueSurface& s, double (*exact)(double, double)) {
    double worst = 0.0;
    for (std::size_t i = 0; i < s.grid.n_x; ++i) {
        const double x = s.grid.x(i);
        if (std::abs(x) > 2.0 + 1e-12) continue;
        for (std::size_t j = 0; j < s.grid.n_y; ++j) worst = std::max(worst, std::abs(s.at(0, i, j) - exact(x, s.grid.y(j))));
    }
    return worst;
}

} // namespace

TEST_SUITE("dp_solver") {

TEST_CASE("control set ordering") {
    const auto c = make_control_set(2.0, 2);
    REQUIRE(c.size() == 5);
    CHECK(c[0] == 0.0);
    CHECK(c[1] == 1.0);
    CHECK(c[2] == -1.0);
    CHECK(c[3] == 2.0);
    CHECK(c[4] == -2.0);
    CHECK(make_control_set(0.0, 8).size() == 1);
    CHECK_THROWS_AS(make_control_set(-1.0, 2), ValidationError);
}

TEST_CASE("stencil reach is enforced") {
    const auto spec = wald_square();
    const auto coarse_t = AugmentedGrid::over_horizon(0.0, 1.0, 4, -4.0, 4.0, 81, 0.8, 9);
    CHECK_THROWS_AS(check_dp_stencil(spec, coarse_t, 2.0), ValidationError);
    CHECK_NOTHROW(check_dp_stencil(spec, documented_grid(), 2.0));
}

TEST_CASE("wald-sq on the documented grid") {
    const auto s = solve_dpp(share(wald_square()), documented_grid());
    const double tol = one_step_tolerance(s.grid);
    CHECK(tol == doctest::Approx(0.01));
    for (std::size_t j = 0; j < s.grid.n_y; ++j) CHECK(std::abs(s.at(0, 40, j) - s.grid.y(j)) <= tol);
    CHECK(max_start_error(s, [](double x, double y) { return x * x + y; }) <= tol);
}

TEST_CASE("wald-lin value is the start state") {
    const auto s = solve_dpp(share(wald_linear()), documented_grid());
    CHECK(max_start_error(s, [](double x, double) { return x; }) <= one_step_tolerance(s.grid));
}

TEST_CASE("empty-budget column is the stopping reward exactly") {
    std::mt19937_64 rng(9);
    const auto spec = share(cstop::testing::random_spec(rng, "r"));
    const auto grid = AugmentedGrid::over_horizon(0.0, 1.0, 50, -3.0, 3.0, 41, 0.6, 31);
    const auto s = solve_dpp(spec, grid);
    for (std::size_t k = 0; k <= grid.n_t; ++k)
        for (std::size_t i = 0; i < grid.n_x; ++i) CHECK(s.at(k, i, 0) == spec->stop_at(grid.t(k), grid.x(i)));
    const auto policy = extract_policy(s);
    for (std::size_t k = 0; k < grid.n_t; ++k)
        for (std::size_t i = 0; i < grid.n_x; ++i) CHECK(policy.stop[policy.index(k, i, 0)] == 1);
}

TEST_CASE("zero control reproduces the lattice Snell envelope with a deadline") {
    std::mt19937_64 rng(15);
    auto base = cstop::testing::random_spec(rng, "snell");
    base.drift = wald_square().drift;
    base.volatility = wald_square().volatility;
    base.cost_rate = wald_square().cost_rate;
    const auto spec = share(base);
    const auto grid = AugmentedGrid::over_horizon(0.0, 0.3, 30, -4.0, 4.0, 81, 0.3, 31);
    DpOptions options;
    options.a_max = 0.0;
    const auto s = solve_dpp(spec, grid, options);
    for (std::size_t j = 0; j < grid.n_y; ++j) {
        const std::size_t steps = std::min<std::size_t>(j, grid.n_t);
        const Tree t = build_tree(*spec, 0.0, 0.0, steps, grid.dt);
        CHECK(s.at(0, 40, j) == doctest::Approx(snell(t, 0.0)).epsilon(1e-12));
    }
}

TEST_CASE("unconstrained Snell matches the lattice on matched nodes") {
    const auto spec = wald_linear();
    ProblemSpec put = spec;
    put.stop_reward = make_scalar_preset(Preset{"polynomial", {{"c0", 1.0}, {"c1", -1.0}, {"cap_lo", 0.0}}});
    const auto grid = AugmentedGrid::over_horizon(0.0, 0.3, 30, -4.0, 4.0, 81, 0.3, 31);
    const auto u = unconstrained_snell(put, grid);
    const Tree t = build_tree(put, 0.0, 0.0, 30, grid.dt);
    CHECK(u[40] == doctest::Approx(snell(t, 0.0)).epsilon(1e-12));
}

TEST_CASE("surfaces are exactly nondecreasing in y and sandwiched") {
    std::mt19937_64 rng(99);
    const auto grid = AugmentedGrid::over_horizon(0.0, 1.0, 50, -3.0, 3.0, 41, 0.6, 31);
    for (int trial = 0; trial < 4; ++trial) {
        const auto spec = share(cstop::testing::random_spec(rng, "r"));
        const auto s = solve_dpp(spec, grid);
        const auto snell_values = unconstrained_snell(*spec, grid);
        for (std::size_t k = 0; k <= grid.n_t; ++k) {
            for (std::size_t i = 0; i < grid.n_x; ++i) {
                const double pi = spec->stop_at(grid.t(k), grid.x(i));
                for (std::size_t j = 0; j < grid.n_y; ++j) {
                    const double v = s.at(k, i, j);
                    if (j > 0) CHECK(v >= s.at(k, i, j - 1));
                    CHECK(v >= pi);
                    CHECK(v <= snell_values[k * grid.n_x + i] + 1e-12 * std::max(1.0, std::abs(v)));
                    CHECK(v <= psi_bound(*spec, grid.x(i)));
                }
            }
        }
    }
}

TEST_CASE("recomposition over an empty or a full leg is exact") {
    const auto grid = AugmentedGrid::over_horizon(0.0, 1.0, 40, -3.0, 3.0, 31, 0.6, 25);
    const auto s = solve_dpp(share(wald_square()), grid);
    const auto policy = extract_policy(s);
    const std::size_t slice = grid.slice_size();
    const auto same = recompose(s, policy, 7, 7);
    for (std::size_t n = 0; n < slice; ++n) CHECK(same[n] == s.values[7 * slice + n]);
    const auto full = recompose(s, policy, 0, grid.n_t);
    for (std::size_t n = 0; n < slice; ++n) CHECK(full[n] == s.values[n]);
}

TEST_CASE("dpp consistency on wald-sq") {
    const auto s = solve_dpp(share(wald_square()), documented_grid());
    const auto report = dpp_consistency(s, 100, 1);
    CHECK(report.n_probes == 100);
    CHECK(report.tolerance == doctest::Approx(2.0 * one_step_tolerance(s.grid)));
    CHECK(report.max_discrepancy <= report.tolerance);
    CHECK(report.passed);
}

TEST_CASE("wald-lin rollouts return the start state in mean") {
    const auto spec = share(wald_linear());
    const auto s = solve_dpp(spec, documented_grid());
    const auto policy = extract_policy(s);
    const double x0 = 0.5;
    const auto batch = simulate_controlled(*spec, 0.0, StateView(&x0, 1), 0.5, policy, 0.01, 100, 20000, 5,
                                           RolloutOptions{Noise::rademacher, false});
    const auto sum = batch.summary();
    CHECK(std::abs(sum.reward.mean - x0) <= 3.0 * sum.reward.se + 1e-12);
    CHECK(sum.cost.mean <= 0.5 + 3.0 * sum.cost.se);
}

TEST_CASE("policy stops outside the budget and at the horizon") {
    const auto s = solve_dpp(share(wald_square()), documented_grid());
    const auto policy = extract_policy(s);
    const double x = 0.0;
    double a = 0.0;
    bool extrapolated = false;
    CHECK(policy.decide(0.0, StateView(&x, 1), 0.0, std::span<double>(&a, 1), extrapolated));
    CHECK(policy.decide(1.0, StateView(&x, 1), 0.5, std::span<double>(&a, 1), extrapolated));
    CHECK_FALSE(policy.decide(0.0, StateView(&x, 1), 0.5, std::span<double>(&a, 1), extrapolated));
    CHECK(std::abs(a) * std::sqrt(s.grid.dt) <= 0.5 - s.grid.dt + 1e-12);
}

TEST_CASE("non-finite coefficients raise a numerical error") {
    auto spec = wald_square();
    spec.running_reward = [](double, StateView x) { return x[0] > 1.0 ? NAN : 0.0; };
    const auto grid = AugmentedGrid::over_horizon(0.0, 1.0, 20, -2.0, 2.0, 21, 0.4, 11);
    CHECK_THROWS_AS(solve_dpp(share(spec), grid), NumericalError);
}

TEST_CASE("provenance carries the control bound") {
    const auto grid = AugmentedGrid::over_horizon(0.0, 1.0, 20, -2.0, 2.0, 21, 0.4, 11);
    DpOptions o;
    o.a_max = 3.0;
    o.m = 4;
    const auto s = solve_dpp(share(wald_square()), grid, o);
    CHECK(s.control_bound == 3.0);
    CHECK(s.provenance.solver == "dp");
    CHECK(s.provenance.params.at("m") == 4.0);
    CHECK(extract_policy(s).controls.size() == 9);
}

}
