#pragma once

// Dense two-phase simplex for small linear programs (a few thousand
// variables at most). Maximizes c'x subject to sparse rows and x >= 0.

#include <cstddef>
#include <utility>
#include <vector>

namespace cstop::lp {

enum class Sense { less_equal, equal, greater_equal };

struct Row {
    std::vector<std::pair<std::size_t, double>> coeffs; // (variable, coefficient)
    Sense sense = Sense::less_equal;
    double rhs = 0.0;
};

struct Problem {
    std::size_t n_vars = 0;
    std::vector<double> objective; // maximize
    std::vector<Row> rows;

    std::size_t add_row(Row row) {
        rows.push_back(std::move(row));
        return rows.size() - 1;
    }
};

enum class Status { optimal, infeasible, unbounded, iteration_limit };
const char* to_string(Status status);

struct Options {
    double tolerance = 1e-11;
    std::size_t max_iterations = 200000;
};

struct Result {
    Status status = Status::iteration_limit;
    double objective = 0.0;
    std::vector<double> x;
    std::vector<double> duals; // one per row, sign convention of the original row
    std::size_t iterations = 0;
};

Result solve(const Problem& problem, const Options& options = {});

} // namespace cstop::lp
