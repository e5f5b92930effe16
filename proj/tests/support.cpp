#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace cstop::testing {

ProblemSpec make_spec(const std::string& name, const Preset& dynamics, const Preset& running, const Preset& stop,
                      const Preset& cost, double horizon) {
    ProblemSpec spec;
    spec.name = name;
    apply_dynamics_preset(spec, dynamics);
    spec.running_reward = make_scalar_preset(running);
    spec.stop_reward = make_scalar_preset(stop);
    spec.cost_rate = make_scalar_preset(cost);
    spec.running_preset = running;
    spec.stop_preset = stop;
    spec.cost_preset = cost;
    spec.horizon = horizon;
    return spec;
}

ProblemSpec random_spec(std::mt19937_64& rng, const std::string& name) {
    auto u = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const Preset dynamics{"bm", {{"mu", u(-0.3, 0.3)}, {"sigma", u(0.6, 1.4)}}};
    const Preset running{"polynomial", {{"c0", u(-0.3, 0.3)}, {"c1", u(-0.3, 0.3)}}};
    const Preset stop{"polynomial", {{"c0", u(-0.5, 0.5)}, {"c1", u(-1.0, 1.0)}, {"c2", u(-0.5, 1.0)}}};
    const Preset cost{"polynomial", {{"c0", u(0.5, 1.5)}, {"c2", u(0.0, 0.5)}}};
    ProblemSpec spec = make_spec(name, dynamics, running, stop, cost);
    spec.constants.exponent = 2.0;
    spec.constants.growth = 2.0;
    spec.constants.moment = 4.0;
    spec.constants.cost_floor = 0.5;
    return spec;
}

std::shared_ptr<const ProblemSpec> share(ProblemSpec spec) {
    return std::make_shared<const ProblemSpec>(std::move(spec));
}

std::filesystem::path scratch_dir(const std::string& tag) {
    const auto dir = std::filesystem::temp_directory_path() / ("cstop_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RuleHull enumerate_rules(const Tree& tree) {
    const std::size_t n = tree.n_steps;
    const std::size_t inner = Tree::index(n, 0);
    if (inner > 20) throw std::invalid_argument("enumerate_rules: lattice too large");
    RuleHull hull;
    std::vector<double> reach(tree.n_nodes());
    for (std::uint64_t rule = 0; rule < (std::uint64_t{1} << inner); ++rule) {
        std::fill(reach.begin(), reach.end(), 0.0);
        reach[0] = 1.0;
        double value = 0.0;
        double cost = 0.0;
        for (std::size_t k = 0; k <= n; ++k) {
            for (std::size_t j = 0; j <= k; ++j) {
                const std::size_t node = Tree::index(k, j);
                const double mass = reach[node];
                if (mass == 0.0) continue;
                if (k == n || ((rule >> node) & 1U)) {
                    value += mass * tree.stop_reward[node];
                    continue;
                }
                value += mass * tree.running[node] * tree.dt;
                cost += mass * tree.cost_rate[node] * tree.dt;
                reach[Tree::index(k + 1, j + 1)] += mass * tree.p_up[node];
                reach[Tree::index(k + 1, j)] += mass * (1.0 - tree.p_up[node]);
            }
        }
        hull.cost.push_back(cost);
        hull.value.push_back(value);
    }
    return hull;
}

double hull_value(const RuleHull& hull, double y, bool equality) {
    double best = -HUGE_VAL;
    const std::size_t n = hull.cost.size();
    for (std::size_t a = 0; a < n; ++a) {
        if (hull.cost[a] > y) continue;
        if (!equality || hull.cost[a] == y) best = std::max(best, hull.value[a]);
        for (std::size_t b = 0; b < n; ++b) {
            if (hull.cost[b] <= y) continue;
            const double w = (hull.cost[b] - y) / (hull.cost[b] - hull.cost[a]);
            best = std::max(best, w * hull.value[a] + (1.0 - w) * hull.value[b]);
        }
    }
    return best;
}

namespace {

// P(sup_{[0,1]} |W| < m).
double sup_abs_cdf(double m) {
    using std::numbers::pi;
    if (m <= 0.0) return 0.0;
    if (m < 0.6) {
        // Reflection series, fast for small m.
        double tail = 0.0;
        for (int k = 0; k < 60; ++k) {
            const double a = (2.0 * k + 1.0) * m;
            tail += (k % 2 == 0 ? 1.0 : -1.0) * std::erfc(a / std::sqrt(2.0));
        }
        return 1.0 - 2.0 * tail;
    }
    double sum = 0.0;
    for (int k = 0; k < 60; ++k) {
        const double c = 2.0 * k + 1.0;
        sum += (k % 2 == 0 ? 1.0 : -1.0) / c * std::exp(-c * c * pi * pi / (8.0 * m * m));
    }
    return 4.0 / pi * sum;
}

} // namespace

double brownian_sup_square(double horizon) {
    // E[M^2] = int_0^inf 2 m P(M > m) dm by Simpson's rule on [0, 12].
    const std::size_t n = 24000;
    const double h = 12.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double m = h * static_cast<double>(i);
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        total += w * 2.0 * m * (1.0 - sup_abs_cdf(m));
    }
    return total * h / 3.0 * horizon;
}

} // namespace cstop::testing
