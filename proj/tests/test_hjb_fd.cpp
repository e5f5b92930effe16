#include "doctest.h"

#include "cstop/dp_solver.hpp"
#include "cstop/errors.hpp"
#include "cstop/hjb_fd.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

using namespace cstop;
using cstop::testing::make_spec;
using cstop::testing::share;

namespace {

SchemeParams params_for(std::size_t n_t, std::size_t n_x, std::size_t n_y) {
    SchemeParams p;
    p.grid = AugmentedGrid::over_horizon(0.0, 1.0, n_t, -4.0, 4.0, n_x, 0.8, n_y);
    return p;
}

} // namespace

TEST_SUITE("hjb_fd") {

TEST_CASE("hamiltonian at a quadratic vertex") {
    const auto h = hamiltonian(-1.0, 1.0, 10.0);
    CHECK(h.value == doctest::Approx(0.5));
    CHECK(h.argmax == doctest::Approx(1.0));
    CHECK_FALSE(h.degenerate);
    CHECK_FALSE(h.envelope_used);
}

TEST_CASE("hamiltonian of zero data") {
    const auto h = hamiltonian(0.0, 0.0, 10.0);
    CHECK(h.value == 0.0);
    CHECK(h.argmax == 0.0);
}

TEST_CASE("degenerate hamiltonian takes the interval end") {
    const auto h = hamiltonian(0.0, 2.0, 3.0);
    CHECK(h.value == doctest::Approx(6.0));
    CHECK(h.argmax == doctest::Approx(3.0));
    CHECK(h.degenerate);
    const auto neg = hamiltonian(0.0, -2.0, 3.0);
    CHECK(neg.argmax == doctest::Approx(-3.0));
    CHECK(neg.value == doctest::Approx(6.0));
}

TEST_CASE("vertex outside the interval falls back to its end") {
    const auto h = hamiltonian(-1.0, 5.0, 2.0);
    CHECK(h.argmax == doctest::Approx(2.0));
    CHECK(h.value == doctest::Approx(0.5 * 4.0 * -1.0 + 10.0));
}

TEST_CASE("convex case uses the truncation envelope") {
    const auto h = hamiltonian(2.0, -1.0, 3.0);
    CHECK(h.envelope_used);
    CHECK(std::abs(h.argmax) == doctest::Approx(3.0));
    CHECK(h.value == doctest::Approx(0.5 * 9.0 * 2.0 + 3.0));
}

TEST_CASE("hamiltonian is nonnegative and dominates every admissible control") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int n = 0; n < 2000; ++n) {
        const double uyy = u(rng), cross = u(rng), a_max = std::abs(u(rng)) + 0.1;
        const auto h = hamiltonian(uyy, cross, a_max);
        CHECK(h.value >= 0.0);
        for (int s = -10; s <= 10; ++s) {
            const double a = a_max * s / 10.0;
            CHECK(h.value >= 0.5 * a * a * uyy + cross * a - 1e-12);
        }
    }
}

TEST_CASE("clip caps the magnitude") {
    const auto h = hamiltonian(0.0, 100.0, 10.0, 1e-8, 50.0);
    CHECK(h.clipped);
    CHECK(h.value == doctest::Approx(50.0));
}

TEST_CASE("boundary column and obstacle") {
    std::mt19937_64 rng(3);
    const auto spec = share(cstop::testing::random_spec(rng, "r"));
    SchemeParams p;
    p.grid = AugmentedGrid::over_horizon(0.0, 1.0, 50, -3.0, 3.0, 41, 0.6, 31);
    const auto s = solve_hjb(spec, p);
    for (std::size_t k = 0; k <= p.grid.n_t; ++k) {
        for (std::size_t i = 0; i < p.grid.n_x; ++i) {
            const double pi = spec->stop_at(p.grid.t(k), p.grid.x(i));
            CHECK(s.at(k, i, 0) == pi);
            for (std::size_t j = 0; j < p.grid.n_y; ++j) {
                CHECK(s.at(k, i, j) >= pi);
                if (j > 0) CHECK(s.at(k, i, j) >= s.at(k, i, j - 1));
            }
        }
    }
}

TEST_CASE("wald-sq on the documented grid") {
    const auto s = solve_hjb(share(wald_square()), params_for(100, 81, 81));
    double worst = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < s.grid.n_x; ++i) {
        const double x = s.grid.x(i);
        if (std::abs(x) > 2.0 + 1e-12) continue;
        for (std::size_t j = 0; j < s.grid.n_y; ++j) {
            const double exact = x * x + s.grid.y(j);
            worst = std::max(worst, std::abs(s.at(0, i, j) - exact));
            scale = std::max(scale, std::abs(exact));
        }
    }
    CHECK(worst <= 0.05 * scale);
    CHECK(worst <= one_step_tolerance(s.grid));
    CHECK(s.diagnostics.at("monotone") == 1.0);
}

TEST_CASE("maximum principle with a bounded payoff") {
    const double cap = 1.0;
    const auto spec = share(make_spec("capped", Preset{"bm", {}}, Preset{"zero", {}},
                                      Preset{"polynomial", {{"c2", 1.0}, {"cap_hi", cap}}},
                                      Preset{"constant", {{"value", 1.0}}}));
    const auto s = solve_hjb(spec, params_for(50, 41, 41));
    CHECK(*std::max_element(s.values.begin(), s.values.end()) <= cap);
}

TEST_CASE("residual vanishes for a constant payoff") {
    const auto spec = share(make_spec("flat", Preset{"bm", {}}, Preset{"zero", {}},
                                      Preset{"constant", {{"value", 1.0}}}, Preset{"constant", {{"value", 1.0}}}));
    const auto s = solve_hjb(spec, params_for(20, 21, 21));
    for (double v : s.values) CHECK(v == 1.0);
    const auto r = residual_audit(s, 200, 1);
    CHECK(r.stop_probes == 200);
    CHECK(r.max_stop_gap == 0.0);
}

TEST_CASE("wald-sq residual shrinks under refinement") {
    const auto coarse = residual_audit(solve_hjb(share(wald_square()), params_for(25, 21, 21)), 400, 1);
    const auto fine = residual_audit(solve_hjb(share(wald_square()), params_for(100, 81, 81)), 400, 1);
    CHECK(coarse.continuation_probes > 0);
    CHECK(fine.max_residual < coarse.max_residual);
    CHECK(fine.p90 < coarse.p90);
    CHECK(std::isfinite(fine.fitted_constant));
    CHECK(fine.fitted_constant == doctest::Approx(fine.max_residual / fine.scale));
    CHECK(fine.envelope_fraction == 0.0);
}

TEST_CASE("envelope statistics on a smooth problem") {
    const auto s = solve_hjb(share(wald_square()), params_for(50, 41, 41));
    const auto stats = hamiltonian_statistics(s);
    CHECK(stats.nodes > 0);
    CHECK(stats.envelope_fraction == 0.0);
    CHECK(stats.degenerate_fraction >= 0.0);
    CHECK(stats.degenerate_fraction <= 1.0);
}

TEST_CASE("stability bound is enforced with the computed bound in the message") {
    auto p = params_for(100, 81, 81);
    const auto spec = share(wald_square());
    const auto bound = stability_bound(*spec, p, 10.0);
    CHECK(bound.min_substeps >= 1);
    const auto ok = coefficient_audit(*spec, p, 10.0, bound.min_substeps);
    CHECK(ok.monotone);
    if (bound.min_substeps > 1) CHECK_FALSE(coefficient_audit(*spec, p, 10.0, bound.min_substeps - 1).monotone);

    p.a_max = 10.0;
    p.substeps = 1;
    if (bound.min_substeps > 1) {
        try {
            (void)solve_hjb(spec, p);
            FAIL("expected a stability error");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find("stability") != std::string::npos);
            CHECK(std::string(e.what()).find(std::to_string(bound.min_substeps)) != std::string::npos);
        }
    }
}

TEST_CASE("overflow mid-solve names the time level") {
    auto spec = wald_square();
    spec.running_reward = [](double t, StateView) { return t < 0.5 ? 1e308 : 0.0; };
    try {
        (void)solve_hjb(share(spec), params_for(20, 21, 21));
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("level") != std::string::npos);
    }
}

TEST_CASE("x boundary names") {
    CHECK(parse_x_boundary("clamp") == XBoundary::clamp);
    CHECK(parse_x_boundary("one_sided") == XBoundary::one_sided);
    CHECK_THROWS_AS(parse_x_boundary("dirichlet"), ValidationError);
    CHECK(std::string(to_string(XBoundary::one_sided)) == "one_sided");
}

TEST_CASE("one-sided boundary keeps the polynomial exact at the edge") {
    auto p = params_for(50, 41, 41);
    p.x_boundary = XBoundary::one_sided;
    const auto s = solve_hjb(share(wald_linear()), p);
    for (std::size_t j = 0; j < p.grid.n_y; ++j) {
        CHECK(s.at(0, 0, j) == doctest::Approx(-4.0).epsilon(1e-9));
        CHECK(s.at(0, p.grid.n_x - 1, j) == doctest::Approx(4.0).epsilon(1e-9));
    }
}

}
