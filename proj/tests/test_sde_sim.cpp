#include "doctest.h"

#include "cstop/errors.hpp"
#include "cstop/sde_sim.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace cstop;
using cstop::testing::make_spec;

namespace {

ProblemSpec bm(double mu, double sigma) {
    auto spec = make_spec("bm", Preset{"bm", {{"mu", mu}, {"sigma", sigma}}}, Preset{"zero", {}},
                          Preset{"polynomial", {{"c2", 1.0}}}, Preset{"constant", {{"value", 1.0}}});
    return spec;
}

double terminal(const PathBatch& b, std::size_t p) { return b.path(p).at(b.n_steps)[0]; }

} // namespace

TEST_SUITE("sde_sim") {

TEST_CASE("degenerate diffusion keeps paths constant") {
    const double x0 = 3.0;
    const auto b = simulate_state(bm(0.0, 0.0), 0.0, StateView(&x0, 1), 0.1, 20, 50, 1);
    for (double v : b.values) CHECK(v == 3.0);
}

TEST_CASE("pure drift reaches x0 + 1") {
    const double x0 = 0.5;
    const auto b = simulate_state(bm(1.0, 0.0), 0.0, StateView(&x0, 1), 0.1, 10, 5, 1);
    for (std::size_t p = 0; p < b.n_paths; ++p) CHECK(terminal(b, p) == doctest::Approx(1.5).epsilon(1e-14));
}

TEST_CASE("driftless terminal mean within the CLT bound") {
    const double x0 = 0.7;
    const std::size_t n = 20000;
    const auto b = simulate_state(bm(0.0, 1.0), 0.0, StateView(&x0, 1), 0.01, 100, n, 11);
    std::vector<double> xs(n);
    for (std::size_t p = 0; p < n; ++p) xs[p] = terminal(b, p);
    const MeanSe m = mean_se(xs);
    CHECK(std::abs(m.mean - x0) <= 3.0 / std::sqrt(double(n)) * std::sqrt(1.0));
}

TEST_CASE("batches are reproducible and independent of thread layout") {
    const double x0 = 0.0;
    const auto a = simulate_state(bm(0.2, 0.9), 0.0, StateView(&x0, 1), 0.02, 50, 300, 42);
    const auto b = simulate_state(bm(0.2, 0.9), 0.0, StateView(&x0, 1), 0.02, 50, 300, 42);
    CHECK(a.values == b.values);
    CHECK(a.increments == b.increments);
    const auto fewer = simulate_state(bm(0.2, 0.9), 0.0, StateView(&x0, 1), 0.02, 50, 100, 42);
    CHECK(std::equal(fewer.values.begin(), fewer.values.end(), a.values.begin()));
    for (std::size_t p = 0; p < a.n_paths; ++p) CHECK(a.path(p).at(0)[0] == x0);
}

TEST_CASE("invalid step is rejected") {
    const double x0 = 0.0;
    CHECK_THROWS_AS(simulate_state(bm(0.0, 1.0), 0.0, StateView(&x0, 1), -0.1, 10, 10, 1), ValidationError);
}

TEST_CASE("non-finite coefficients raise a numerical error") {
    auto spec = bm(0.0, 1.0);
    spec.drift = [](double, StateView) { return Vector{NAN}; };
    const double x0 = 0.0;
    CHECK_THROWS_AS(simulate_state(spec, 0.0, StateView(&x0, 1), 0.1, 10, 10, 1), NumericalError);
}

TEST_CASE("stop immediately pays the stopping reward at index zero") {
    const double x0 = 1.5;
    const StopImmediately policy;
    const auto batch = simulate_controlled(bm(0.0, 1.0), 0.0, StateView(&x0, 1), 0.4, policy, 0.01, 100, 200, 3);
    for (const auto& o : batch.outcomes) {
        CHECK(o.stop_index == 0);
        CHECK(o.reason == StopReason::policy);
        CHECK(o.cost == 0.0);
    }
    CHECK(batch.summary().reward.mean == doctest::Approx(2.25));
}

TEST_CASE("zero control exhausts the budget deterministically") {
    const double x0 = 0.0;
    const ConstantControl policy(Vector{0.0});
    const double y = 0.35;
    const RolloutOptions traces{Noise::gaussian, true};
    const auto batch = simulate_controlled(bm(0.0, 1.0), 0.0, StateView(&x0, 1), y, policy, 0.1, 10, 40, 9, traces);
    for (std::size_t p = 0; p < batch.n_paths; ++p) {
        const auto& o = batch.outcomes[p];
        CHECK(o.reason == StopReason::budget);
        CHECK(o.hit_index == 4);
        CHECK(o.stop_time == doctest::Approx(y).epsilon(1e-12));
        CHECK(o.cost == doctest::Approx(y).epsilon(1e-12));
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(batch.budget[p * 11 + k] == doctest::Approx(y - 0.1 * double(k)).epsilon(1e-12));
        }
    }
}

TEST_CASE("budget exhausts by ceil(y / (kappa dt)) steps under zero control") {
    std::mt19937_64 rng(8);
    const auto spec = cstop::testing::random_spec(rng, "exhaust");
    const double x0 = 0.3, y = 0.5, dt = 0.01;
    const double kappa = spec.constants.cost_floor;
    const ConstantControl policy(Vector{0.0});
    const auto batch = simulate_controlled(spec, 0.0, StateView(&x0, 1), y, policy, dt, 200, 500, 4);
    const auto bound = static_cast<std::size_t>(std::ceil(y / (kappa * dt)));
    for (const auto& o : batch.outcomes) {
        CHECK(o.reason == StopReason::budget);
        CHECK(o.hit_index <= bound);
    }
}

TEST_CASE("budget plus cost stays a martingale up to the crossing overshoot") {
    const double x0 = 0.0, y = 0.3, dt = 0.01, a = 0.5;
    const ConstantControl policy(Vector{a});
    const RolloutOptions traces{Noise::gaussian, true};
    const std::size_t n = 20000, steps = 100;
    const auto batch = simulate_controlled(bm(0.0, 1.0), 0.0, StateView(&x0, 1), y, policy, dt, steps, n, 21, traces);
    for (std::size_t s : {10UL, 50UL, 100UL}) {
        std::vector<double> v(n);
        for (std::size_t p = 0; p < n; ++p) v[p] = batch.budget[p * (steps + 1) + s] + batch.cost[p * (steps + 1) + s];
        const MeanSe m = mean_se(v);
        CHECK(std::abs(m.mean - y) <= 3.0 * m.se + a * std::sqrt(dt));
    }
}

TEST_CASE("frozen paths have sup moment |x0|^q") {
    const double x0 = -1.7;
    const auto b = simulate_state(bm(0.0, 0.0), 0.0, StateView(&x0, 1), 0.1, 10, 20, 1);
    for (double q : {1.0, 2.0, 4.0}) {
        const auto r = moment_check(b, q);
        CHECK(r.sup_moment.mean == doctest::Approx(std::pow(1.7, q)).epsilon(1e-14));
    }
}

TEST_CASE("driftless paths translate with the start point") {
    const double x0 = 0.0, x1 = 1.25;
    const auto a = simulate_state(bm(0.0, 1.3), 0.0, StateView(&x0, 1), 0.01, 100, 200, 17);
    const auto b = simulate_state(bm(0.0, 1.3), 0.0, StateView(&x1, 1), 0.01, 100, 200, 17);
    for (std::size_t p = 0; p < a.n_paths; ++p) {
        double sa = -HUGE_VAL, sb = -HUGE_VAL;
        for (std::size_t k = 0; k <= a.n_steps; ++k) {
            sa = std::max(sa, a.path(p).at(k)[0]);
            sb = std::max(sb, b.path(p).at(k)[0]);
        }
        CHECK(sb - sa == doctest::Approx(x1 - x0).epsilon(1e-12));
    }
}

TEST_CASE("Brownian sup second moment matches the series value and Doob's bound") {
    const double x0 = 0.0, horizon = 1.0;
    const double exact = cstop::testing::brownian_sup_square(horizon);
    CHECK(exact == doctest::Approx(1.8319).epsilon(1e-3));
    for (std::uint64_t seed : {1ULL, 2ULL}) {
        const auto b = simulate_state(bm(0.0, 1.0), 0.0, StateView(&x0, 1), 1e-3, 1000, 20000, seed);
        const auto r = moment_check(b, 2.0);
        CHECK(r.sup_moment.mean <= 4.0 * horizon);
        CHECK(r.sup_moment.mean == doctest::Approx(exact).epsilon(0.05));
    }
}

TEST_CASE("oscillation moment after a stopping index") {
    const double x0 = 0.0;
    const auto b = simulate_state(bm(0.0, 1.0), 0.0, StateView(&x0, 1), 0.01, 200, 4000, 5);
    std::vector<std::size_t> tau(b.n_paths, 50);
    const auto r = moment_check(b, 2.0, tau, 25);
    CHECK(r.has_increment);
    // sup over a window of length 0.25 from a fresh start
    CHECK(r.increment_moment.mean == doctest::Approx(cstop::testing::brownian_sup_square(0.25)).epsilon(0.1));
}

TEST_CASE("envelope fit over starts") {
    std::vector<MomentReport> reports;
    for (double x : {0.0, 1.0, 2.0, 4.0}) {
        const auto b = simulate_state(bm(0.0, 1.0), 0.0, StateView(&x, 1), 0.01, 100, 2000, 7);
        reports.push_back(moment_check(b, 2.0));
    }
    const auto fit = fit_moment_envelope(reports);
    CHECK(fit.fits);
    for (const auto& r : reports) CHECK(r.sup_moment.mean <= fit.constant * (1.0 + r.start_norm * r.start_norm) * (1 + 1e-12));
}

TEST_CASE("moment check rejects q below one") {
    const double x0 = 0.0;
    const auto b = simulate_state(bm(0.0, 1.0), 0.0, StateView(&x0, 1), 0.1, 10, 10, 1);
    CHECK_THROWS_AS(moment_check(b, 0.5), ValidationError);
}

}
