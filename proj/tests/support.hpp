#pragma once

// Shared fixtures and independent reference computations for the tests.

#include "cstop/model.hpp"
#include "cstop/tree_oracle.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace cstop::testing {

// Problem built from presets with every preset recorded for export.
ProblemSpec make_spec(const std::string& name, const Preset& dynamics, const Preset& running, const Preset& stop,
                      const Preset& cost, double horizon = 1.0);

// Brownian dynamics with random drift and volatility, polynomial rewards of
// degree two and a cost rate bounded below by 0.5.
ProblemSpec random_spec(std::mt19937_64& rng, const std::string& name);

std::shared_ptr<const ProblemSpec> share(ProblemSpec spec);

// Fresh empty directory under the system temporary directory.
std::filesystem::path scratch_dir(const std::string& tag);
std::string read_file(const std::filesystem::path& path);

// E[h(x_n)] on the lattice by enumerating all 2^n up/down paths.
template <class H>
double lattice_path_mean(double x0, double step, double p_up, std::size_t n, H h) {
    double total = 0.0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        double x = x0;
        double prob = 1.0;
        for (std::size_t s = 0; s < n; ++s) {
            const bool up = (mask >> s) & 1U;
            x += up ? step : -step;
            prob *= up ? p_up : 1.0 - p_up;
        }
        total += prob * h(x);
    }
    return total;
}

// Best randomized stopping value on a small lattice, found by listing every
// deterministic node-wise stopping rule with its (cost, value) and maximizing
// over mixtures of two of them. Rules stop on the last level.
struct RuleHull {
    std::vector<double> cost;
    std::vector<double> value;
};
RuleHull enumerate_rules(const Tree& tree);
double hull_value(const RuleHull& hull, double y, bool equality);

// E[(sup_{s <= T} |W_s|)^2] from the series for the law of the running
// maximum of |W|, integrated numerically.
double brownian_sup_square(double horizon);

} // namespace cstop::testing
