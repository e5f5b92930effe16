#include "cstop/lp.hpp"

#include "cstop/errors.hpp"

#include <cmath>
#include <limits>

namespace cstop::lp {

namespace {

// Tableau with the objective in the last row, stored as reduced costs
// d_j = z_j - c_j for maximization (optimal when every d_j >= -tol).
class Tableau {
public:
    Tableau(std::size_t rows, std::size_t cols) : m_(rows), n_(cols), a_((rows + 1) * (cols + 1), 0.0) {}

    double& at(std::size_t i, std::size_t j) { return a_[i * (n_ + 1) + j]; }
    double at(std::size_t i, std::size_t j) const { return a_[i * (n_ + 1) + j]; }
    double& rhs(std::size_t i) { return at(i, n_); }
    double& cost(std::size_t j) { return at(m_, j); }
    double& value() { return at(m_, n_); }

    std::size_t rows() const { return m_; }
    std::size_t cols() const { return n_; }

    void pivot(std::size_t r, std::size_t c) {
        const double p = at(r, c);
        double* pr = &a_[r * (n_ + 1)];
        for (std::size_t j = 0; j <= n_; ++j) pr[j] /= p;
        pr[c] = 1.0;
        for (std::size_t i = 0; i <= m_; ++i) {
            if (i == r) continue;
            double* pi = &a_[i * (n_ + 1)];
            const double factor = pi[c];
            if (factor == 0.0) continue;
            for (std::size_t j = 0; j <= n_; ++j) pi[j] -= factor * pr[j];
            pi[c] = 0.0;
        }
    }

private:
    std::size_t m_, n_;
    std::vector<double> a_;
};

struct Runner {
    Tableau& t;
    std::vector<std::size_t>& basis;
    std::vector<bool> allowed;
    const Options& opt;
    std::size_t iterations = 0;

    // Returns optimal, unbounded or iteration_limit.
    Status run() {
        std::size_t degenerate_streak = 0;
        while (iterations < opt.max_iterations) {
            const bool bland = degenerate_streak > 50;
            std::size_t enter = t.cols();
            double best = -opt.tolerance;
            for (std::size_t j = 0; j < t.cols(); ++j) {
                if (!allowed[j]) continue;
                const double d = t.cost(j);
                if (d < -opt.tolerance) {
                    if (bland) { enter = j; break; }
                    if (d < best) { best = d; enter = j; }
                }
            }
            if (enter == t.cols()) return Status::optimal;

            std::size_t leave = t.rows();
            double ratio = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < t.rows(); ++i) {
                const double a = t.at(i, enter);
                if (a > opt.tolerance) {
                    const double r = t.rhs(i) / a;
                    if (r < ratio - 1e-14 || (std::abs(r - ratio) <= 1e-14 && leave < t.rows() && basis[i] < basis[leave])) {
                        ratio = r;
                        leave = i;
                    }
                }
            }
            if (leave == t.rows()) return Status::unbounded;
            degenerate_streak = ratio <= opt.tolerance ? degenerate_streak + 1 : 0;
            t.pivot(leave, enter);
            basis[leave] = enter;
            ++iterations;
        }
        return Status::iteration_limit;
    }
};

} // namespace

const char* to_string(Status status) {
    switch (status) {
    case Status::optimal: return "optimal";
    case Status::infeasible: return "infeasible";
    case Status::unbounded: return "unbounded";
    case Status::iteration_limit: return "iteration_limit";
    }
    return "unknown";
}

Result solve(const Problem& problem, const Options& options) {
    const std::size_t m = problem.rows.size();
    const std::size_t n = problem.n_vars;
    if (problem.objective.size() != n) throw ValidationError("lp: objective size does not match variable count");

    // Normalize to nonnegative right-hand sides.
    std::vector<double> flip(m, 1.0);
    std::vector<Sense> sense(m);
    for (std::size_t i = 0; i < m; ++i) {
        sense[i] = problem.rows[i].sense;
        if (problem.rows[i].rhs < 0.0) {
            flip[i] = -1.0;
            if (sense[i] == Sense::less_equal) sense[i] = Sense::greater_equal;
            else if (sense[i] == Sense::greater_equal) sense[i] = Sense::less_equal;
        }
    }

    // Columns: structural | slack or surplus per inequality row | artificial per >= or = row.
    std::vector<std::size_t> slack_col(m, 0), art_col(m, 0);
    std::size_t cols = n;
    for (std::size_t i = 0; i < m; ++i) if (sense[i] != Sense::equal) slack_col[i] = cols++;
    const std::size_t first_art = cols;
    for (std::size_t i = 0; i < m; ++i) if (sense[i] != Sense::less_equal) art_col[i] = cols++;

    Tableau t(m, cols);
    std::vector<std::size_t> basis(m);
    for (std::size_t i = 0; i < m; ++i) {
        for (const auto& [j, v] : problem.rows[i].coeffs) {
            if (j >= n) throw ValidationError("lp: row references unknown variable");
            t.at(i, j) += flip[i] * v;
        }
        t.rhs(i) = flip[i] * problem.rows[i].rhs;
        if (sense[i] == Sense::less_equal) {
            t.at(i, slack_col[i]) = 1.0;
            basis[i] = slack_col[i];
        } else {
            if (sense[i] == Sense::greater_equal) t.at(i, slack_col[i]) = -1.0;
            t.at(i, art_col[i]) = 1.0;
            basis[i] = art_col[i];
        }
    }

    Result result;
    std::vector<bool> allowed(cols, true);

    // Phase I: maximize -sum(artificials).
    if (first_art < cols) {
        for (std::size_t j = 0; j <= cols; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) if (basis[i] >= first_art) s += t.at(i, j);
            if (j < cols) t.cost(j) = (j >= first_art ? 1.0 : 0.0) - s;
            else t.value() = -s;
        }
        for (std::size_t i = 0; i < m; ++i) if (basis[i] >= first_art) t.cost(basis[i]) = 0.0;
        Runner phase1{t, basis, allowed, options};
        const Status s = phase1.run();
        result.iterations += phase1.iterations;
        if (s == Status::iteration_limit) {
            result.status = s;
            return result;
        }
        if (t.value() < -1e-9 * (1.0 + std::abs(t.value()))) {
            result.status = Status::infeasible;
            return result;
        }
        // Drive zero-level artificials out of the basis where possible.
        for (std::size_t i = 0; i < m; ++i) {
            if (basis[i] < first_art) continue;
            for (std::size_t j = 0; j < first_art; ++j) {
                if (std::abs(t.at(i, j)) > 1e-9) {
                    t.pivot(i, j);
                    basis[i] = j;
                    break;
                }
            }
        }
        for (std::size_t j = first_art; j < cols; ++j) allowed[j] = false;
    }

    // Phase II objective: reduced costs d_j = c_B B^-1 a_j - c_j.
    auto c = [&](std::size_t j) { return j < n ? problem.objective[j] : 0.0; };
    for (std::size_t j = 0; j <= cols; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += c(basis[i]) * t.at(i, j);
        if (j < cols) t.cost(j) = s - c(j);
        else t.value() = s;
    }
    Runner phase2{t, basis, allowed, options};
    result.status = phase2.run();
    result.iterations += phase2.iterations;
    if (result.status != Status::optimal) return result;

    result.objective = t.value();
    result.x.assign(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) if (basis[i] < n) result.x[basis[i]] = t.rhs(i);

    // Row duals from the reduced costs of each row's unit column.
    result.duals.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double y = 0.0;
        if (sense[i] == Sense::less_equal) y = t.cost(slack_col[i]);
        else if (sense[i] == Sense::greater_equal) y = -t.cost(slack_col[i]);
        else y = t.cost(art_col[i]);
        result.duals[i] = flip[i] * y;
    }
    return result;
}

} // namespace cstop::lp
