#include "cstop/tree_oracle.hpp"

#include "cstop/errors.hpp"
#include "cstop/lp.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cstop {

namespace {

void check_budget(double y) {
    if (!(y >= 0.0) || !std::isfinite(y)) throw ValidationError("budget y must be finite and nonnegative");
}

std::vector<double> immediate_stop_plan(const Tree& tree) {
    return std::vector<double>(tree.n_nodes(), 1.0);
}

OracleSolution immediate_stop(const Tree& tree, ConstraintMode mode, const char* method) {
    OracleSolution s;
    s.stop_prob = immediate_stop_plan(tree);
    s.value = s.primal_value = s.dual_value = tree.stop_reward[0];
    s.achieved_cost = 0.0;
    s.mode = mode;
    s.method = method;
    return s;
}

// Stop probabilities reproducing a mixture w * A + (1 - w) * B of two plans'
// occupation measures.
std::vector<double> mix_plans(const Tree& tree, const std::vector<double>& qa, const PlanEvaluation& ea,
                              const std::vector<double>& qb, const PlanEvaluation& eb, double w) {
    std::vector<double> q(tree.n_nodes(), 0.0);
    for (std::size_t i = 0; i < q.size(); ++i) {
        const double reach = w * ea.reach[i] + (1.0 - w) * eb.reach[i];
        const double stopped = w * ea.reach[i] * qa[i] + (1.0 - w) * eb.reach[i] * qb[i];
        q[i] = reach > 0.0 ? std::clamp(stopped / reach, 0.0, 1.0) : qa[i];
    }
    const std::size_t last = Tree::index(tree.n_steps, 0);
    for (std::size_t i = last; i < q.size(); ++i) q[i] = 1.0;
    return q;
}

struct Probe {
    double lambda = 0.0;
    SnellPolicy stop_first, continue_first;
    PlanEvaluation stop_eval, continue_eval;
};

Probe probe(const Tree& tree, double lambda) {
    Probe p;
    p.lambda = lambda;
    p.stop_first = snell_policy(tree, lambda, true);
    p.continue_first = snell_policy(tree, lambda, false);
    p.stop_eval = evaluate_plan(tree, p.stop_first.stop_prob);
    p.continue_eval = evaluate_plan(tree, p.continue_first.stop_prob);
    return p;
}

double dual_at(const Tree& tree, double lambda, double y) { return snell(tree, lambda) + lambda * y; }

// Mixes a high-cost and a low-cost policy to spend exactly y.
OracleSolution mixture(const Tree& tree, double y, const std::vector<double>& q_hi, const PlanEvaluation& e_hi,
                       const std::vector<double>& q_lo, const PlanEvaluation& e_lo) {
    OracleSolution s;
    const double span = e_hi.cost - e_lo.cost;
    const double w = span > 0.0 ? std::clamp((y - e_lo.cost) / span, 0.0, 1.0) : 0.0;
    s.stop_prob = mix_plans(tree, q_hi, e_hi, q_lo, e_lo, w);
    const PlanEvaluation e = evaluate_plan(tree, s.stop_prob);
    s.primal_value = e.value;
    s.achieved_cost = e.cost;
    return s;
}

// Primal optimum from the dual breakpoint: bisect lambda until the cheapest
// optimal policy switches from over-budget to within budget, then mix the two
// sides so the expected cost equals y.
OracleSolution structured_solve(const Tree& tree, double y, ConstraintMode mode) {
    const double max_cost = max_achievable_cost(tree);
    OracleSolution s;
    s.mode = mode;
    s.method = "structured";

    if (mode == ConstraintMode::inequality) {
        Probe zero = probe(tree, 0.0);
        if (zero.stop_eval.cost <= y) {
            s.stop_prob = zero.stop_first.stop_prob;
            s.primal_value = zero.stop_eval.value;
            s.achieved_cost = zero.stop_eval.cost;
            s.multiplier = 0.0;
            s.dual_value = zero.stop_first.root_value;
            s.value = s.primal_value;
            return s;
        }
    } else if (y >= max_cost) {
        std::vector<double> never(tree.n_nodes(), 0.0);
        for (std::size_t i = Tree::index(tree.n_steps, 0); i < never.size(); ++i) never[i] = 1.0;
        const PlanEvaluation e = evaluate_plan(tree, never);
        s.stop_prob = never;
        s.primal_value = s.value = e.value;
        s.achieved_cost = e.cost;
        // Any sufficiently negative multiplier certifies; report the bound at 0.
        s.dual_value = e.value;
        return s;
    }

    auto cheapest_cost = [&](double lambda) {
        return evaluate_plan(tree, snell_policy(tree, lambda, true).stop_prob).cost;
    };

    double lo = 0.0;
    double hi = (snell(tree, 0.0) - tree.stop_reward[0]) / std::max(y, 1e-300) + 1.0;
    for (int i = 0; cheapest_cost(hi) > y; ++i) {
        if (i > 200) throw NumericalError("structured oracle: multiplier bracket failure");
        hi *= 2.0;
    }
    if (mode == ConstraintMode::equality) {
        lo = -1.0;
        for (int i = 0; cheapest_cost(lo) <= y; ++i) {
            if (i > 200) throw NumericalError("structured oracle: multiplier bracket failure");
            lo *= 2.0;
        }
    }
    for (int i = 0; i < 400; ++i) {
        const double mid = lo + 0.5 * (hi - lo);
        if (mid <= lo || mid >= hi) break;
        (cheapest_cost(mid) > y ? lo : hi) = mid;
        ++s.iterations;
    }

    const Probe at_hi = probe(tree, hi);
    if (at_hi.continue_eval.cost >= y) {
        s = mixture(tree, y, at_hi.continue_first.stop_prob, at_hi.continue_eval, at_hi.stop_first.stop_prob,
                    at_hi.stop_eval);
    } else {
        const Probe at_lo = probe(tree, lo);
        s = mixture(tree, y, at_lo.stop_first.stop_prob, at_lo.stop_eval, at_hi.stop_first.stop_prob,
                    at_hi.stop_eval);
    }
    s.mode = mode;
    s.method = "structured";
    const double d_lo = dual_at(tree, lo, y);
    const double d_hi = dual_at(tree, hi, y);
    s.multiplier = d_lo < d_hi ? lo : hi;
    s.dual_value = std::min(d_lo, d_hi);
    s.value = s.primal_value;
    return s;
}

OracleSolution simplex_solve(const Tree& tree, double y, ConstraintMode mode) {
    const std::size_t n_nodes = tree.n_nodes();
    const std::size_t n_inner = Tree::index(tree.n_steps, 0);
    lp::Problem problem;
    problem.n_vars = n_nodes + n_inner;
    problem.objective.assign(problem.n_vars, 0.0);
    auto stop_var = [](std::size_t i) { return i; };
    auto cont_var = [n_nodes](std::size_t i) { return n_nodes + i; };

    lp::Row budget;
    budget.sense = mode == ConstraintMode::inequality ? lp::Sense::less_equal : lp::Sense::equal;
    budget.rhs = y;
    for (std::size_t k = 0; k <= tree.n_steps; ++k) {
        for (std::size_t j = 0; j <= k; ++j) {
            const std::size_t i = Tree::index(k, j);
            problem.objective[stop_var(i)] = tree.stop_reward[i];
            lp::Row flow;
            flow.sense = lp::Sense::equal;
            flow.rhs = k == 0 ? 1.0 : 0.0;
            flow.coeffs.emplace_back(stop_var(i), 1.0);
            if (k < tree.n_steps) {
                flow.coeffs.emplace_back(cont_var(i), 1.0);
                problem.objective[cont_var(i)] = tree.running[i] * tree.dt;
                budget.coeffs.emplace_back(cont_var(i), tree.cost_rate[i] * tree.dt);
            }
            if (k > 0) {
                if (j >= 1) {
                    const std::size_t parent = Tree::index(k - 1, j - 1);
                    flow.coeffs.emplace_back(cont_var(parent), -tree.p_up[parent]);
                }
                if (j <= k - 1) {
                    const std::size_t parent = Tree::index(k - 1, j);
                    flow.coeffs.emplace_back(cont_var(parent), -(1.0 - tree.p_up[parent]));
                }
            }
            problem.add_row(std::move(flow));
        }
    }
    const std::size_t budget_row = problem.add_row(std::move(budget));

    const lp::Result r = lp::solve(problem);
    if (r.status == lp::Status::infeasible) {
        const double max_cost = max_achievable_cost(tree);
        std::ostringstream msg;
        msg << "budget " << y << " cannot be spent exactly; max achievable cost is " << max_cost;
        throw InfeasibleError(msg.str(), max_cost);
    }
    if (r.status != lp::Status::optimal) {
        throw NumericalError(std::string("simplex oracle terminated with status ") + lp::to_string(r.status));
    }

    OracleSolution s;
    s.mode = mode;
    s.method = "simplex";
    s.iterations = r.iterations;
    s.value = r.objective;
    s.stop_prob.assign(n_nodes, 0.0);
    for (std::size_t i = 0; i < n_nodes; ++i) {
        const double stopped = std::max(r.x[stop_var(i)], 0.0);
        const double cont = i < n_inner ? std::max(r.x[cont_var(i)], 0.0) : 0.0;
        const double reach = stopped + cont;
        s.stop_prob[i] = i >= n_inner ? 1.0 : (reach > 1e-300 ? std::clamp(stopped / reach, 0.0, 1.0) : 0.0);
    }
    const PlanEvaluation e = evaluate_plan(tree, s.stop_prob);
    s.primal_value = e.value;
    s.achieved_cost = e.cost;
    s.multiplier = r.duals[budget_row];
    s.dual_value = dual_at(tree, s.multiplier, y);
    return s;
}

} // namespace

double Tree::spacing() const { return sigma_eff * std::sqrt(dt); }

Tree build_tree(const ProblemSpec& spec, double t, double x, std::size_t n_steps, double dt,
                const TreeOptions& options) {
    require_scalar(spec, "build_tree");
    if (!(dt > 0.0)) throw ValidationError("build_tree: dt must be positive");
    Tree tree;
    tree.t0 = t;
    tree.x0 = x;
    tree.dt = dt;
    tree.n_steps = n_steps;
    tree.sigma_eff = options.sigma_eff ? *options.sigma_eff : std::abs(spec.vol_at(t, x));
    if (!(tree.sigma_eff > 0.0) || !std::isfinite(tree.sigma_eff)) {
        throw ValidationError("build_tree: lattice volatility must be positive");
    }
    const std::size_t n = tree.n_nodes();
    tree.state.resize(n);
    tree.stop_reward.resize(n);
    tree.running.resize(n);
    tree.cost_rate.resize(n);
    tree.p_up.resize(n);
    const double h = tree.spacing();
    const double sqrt_dt = std::sqrt(dt);
    for (std::size_t k = 0; k <= n_steps; ++k) {
        const double tk = tree.time(k);
        for (std::size_t j = 0; j <= k; ++j) {
            const std::size_t i = Tree::index(k, j);
            const double xk = x + (2.0 * static_cast<double>(j) - static_cast<double>(k)) * h;
            tree.state[i] = xk;
            tree.stop_reward[i] = spec.stop_at(tk, xk);
            tree.running[i] = spec.running_at(tk, xk);
            tree.cost_rate[i] = spec.cost_at(tk, xk);
            tree.p_up[i] = std::clamp(0.5 + spec.drift_at(tk, xk) * sqrt_dt / (2.0 * tree.sigma_eff), 0.0, 1.0);
            if (!std::isfinite(tree.stop_reward[i]) || !std::isfinite(tree.running[i]) ||
                !std::isfinite(tree.cost_rate[i]) || !std::isfinite(tree.p_up[i])) {
                std::ostringstream msg;
                msg << "build_tree: non-finite coefficient at t=" << tk << ", x=" << xk;
                throw NumericalError(msg.str());
            }
        }
    }
    return tree;
}

const char* to_string(ConstraintMode mode) {
    return mode == ConstraintMode::inequality ? "inequality" : "equality";
}

PlanEvaluation evaluate_plan(const Tree& tree, const std::vector<double>& stop_prob) {
    if (stop_prob.size() != tree.n_nodes()) throw ValidationError("evaluate_plan: plan size does not match tree");
    PlanEvaluation e;
    e.reach.assign(tree.n_nodes(), 0.0);
    e.reach[0] = 1.0;
    for (std::size_t k = 0; k <= tree.n_steps; ++k) {
        for (std::size_t j = 0; j <= k; ++j) {
            const std::size_t i = Tree::index(k, j);
            const double reach = e.reach[i];
            if (reach == 0.0) continue;
            const double q = k == tree.n_steps ? 1.0 : stop_prob[i];
            const double stopped = reach * q;
            const double cont = reach - stopped;
            e.value += stopped * tree.stop_reward[i];
            if (k == tree.n_steps) continue;
            e.value += cont * tree.running[i] * tree.dt;
            e.cost += cont * tree.cost_rate[i] * tree.dt;
            e.reach[Tree::index(k + 1, j + 1)] += cont * tree.p_up[i];
            e.reach[Tree::index(k + 1, j)] += cont * (1.0 - tree.p_up[i]);
        }
    }
    return e;
}

double max_achievable_cost(const Tree& tree) {
    std::vector<double> never(tree.n_nodes(), 0.0);
    return evaluate_plan(tree, never).cost;
}

OracleSolution solve_lp(const Tree& tree, double y, ConstraintMode mode, const LpOptions& options) {
    check_budget(y);
    if (mode == ConstraintMode::equality) {
        const double max_cost = max_achievable_cost(tree);
        if (y > max_cost * (1.0 + 1e-12) + 1e-15) {
            std::ostringstream msg;
            msg << "equality budget " << y << " exceeds the max achievable cost " << max_cost;
            throw InfeasibleError(msg.str(), max_cost);
        }
    }
    if (y == 0.0) return immediate_stop(tree, mode, "boundary");

    bool use_simplex = false;
    switch (options.method) {
    case LpMethod::simplex: use_simplex = true; break;
    case LpMethod::structured: use_simplex = false; break;
    case LpMethod::automatic: use_simplex = tree.n_steps <= options.max_simplex_steps; break;
    }
    return use_simplex ? simplex_solve(tree, y, mode) : structured_solve(tree, y, mode);
}

SnellPolicy snell_policy(const Tree& tree, double lambda, bool prefer_stop) {
    SnellPolicy out;
    out.stop_prob.assign(tree.n_nodes(), 1.0);
    const std::size_t n = tree.n_steps;
    std::vector<double> next(n + 1), cur(n + 1);
    for (std::size_t j = 0; j <= n; ++j) next[j] = tree.stop_reward[Tree::index(n, j)];
    for (std::size_t k = n; k-- > 0;) {
        for (std::size_t j = 0; j <= k; ++j) {
            const std::size_t i = Tree::index(k, j);
            const double p = tree.p_up[i];
            const double cont = (tree.running[i] - lambda * tree.cost_rate[i]) * tree.dt + p * next[j + 1] +
                                (1.0 - p) * next[j];
            const double stop = tree.stop_reward[i];
            const bool stop_here = prefer_stop ? stop >= cont : stop > cont;
            cur[j] = stop_here ? stop : cont;
            out.stop_prob[i] = stop_here ? 1.0 : 0.0;
        }
        std::swap(cur, next);
    }
    out.root_value = next[0];
    return out;
}

double snell(const Tree& tree, double lambda) { return snell_policy(tree, lambda, true).root_value; }

OracleSolution solve_lagrangian(const Tree& tree, double y, double tol_lambda, ConstraintMode mode) {
    check_budget(y);
    if (y == 0.0) return immediate_stop(tree, mode, "boundary");
    if (!(tol_lambda > 0.0)) throw ValidationError("solve_lagrangian: tolerance must be positive");

    auto dual = [&](double lambda) { return dual_at(tree, lambda, y); };
    double hi = (snell(tree, 0.0) - tree.stop_reward[0]) / y + 1.0;
    double lo = mode == ConstraintMode::inequality ? 0.0 : -hi;

    // Golden-section search of the convex dual on [lo, hi], widening the
    // bracket while the minimizer sits on an open end.
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double best = 0.0;
    std::size_t iterations = 0;
    for (int widen = 0;; ++widen) {
        if (widen > 60) throw NumericalError("solve_lagrangian: multiplier bracket failure");
        double a = lo, b = hi;
        double c = b - ratio * (b - a), d = a + ratio * (b - a);
        double fc = dual(c), fd = dual(d);
        while (b - a > tol_lambda * std::max(1.0, std::abs(a) + std::abs(b))) {
            if (fc <= fd) {
                b = d; d = c; fd = fc;
                c = b - ratio * (b - a);
                fc = dual(c);
            } else {
                a = c; c = d; fc = fd;
                d = a + ratio * (b - a);
                fd = dual(d);
            }
            ++iterations;
        }
        best = 0.5 * (a + b);
        const double step = 1e-6 * std::max(1.0, std::abs(hi));
        const bool open_hi = best > hi - 2.0 * step && dual(hi) < dual(hi - step);
        const bool open_lo = mode == ConstraintMode::equality && best < lo + 2.0 * step && dual(lo) < dual(lo + step);
        if (!open_hi && !open_lo) break;
        if (open_hi) hi *= 2.0;
        if (open_lo) lo *= 2.0;
    }
    // The dual is piecewise linear; the bracket end may beat the midpoint.
    double best_value = dual(best);
    if (mode == ConstraintMode::inequality && dual(0.0) < best_value) {
        best = 0.0;
        best_value = dual(0.0);
    }

    OracleSolution primal = structured_solve(tree, y, mode);
    OracleSolution s = primal;
    s.method = "lagrangian";
    s.multiplier = best;
    s.dual_value = best_value;
    s.value = best_value;
    s.iterations = iterations;
    return s;
}

PureSolution solve_pure(const Tree& tree, double y, std::size_t max_steps) {
    check_budget(y);
    if (tree.n_steps > max_steps) {
        std::ostringstream msg;
        msg << "solve_pure: " << tree.n_steps << " steps exceeds the enumeration limit of " << max_steps;
        throw ValidationError(msg.str());
    }
    struct Point {
        double cost, value;
    };
    auto prune = [](std::vector<Point>& pts) {
        std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) {
            return a.cost < b.cost || (a.cost == b.cost && a.value > b.value);
        });
        std::vector<Point> kept;
        double best = -HUGE_VAL;
        for (const auto& p : pts) {
            if (p.value > best + 1e-14 * (1.0 + std::abs(best))) {
                kept.push_back(p);
                best = p.value;
            }
        }
        pts.swap(kept);
    };

    const std::size_t n = tree.n_steps;
    std::vector<std::vector<Point>> next(n + 1), cur(n + 1);
    for (std::size_t j = 0; j <= n; ++j) next[j] = {Point{0.0, tree.stop_reward[Tree::index(n, j)]}};
    for (std::size_t k = n; k-- > 0;) {
        for (std::size_t j = 0; j <= k; ++j) {
            const std::size_t i = Tree::index(k, j);
            const double p = tree.p_up[i];
            const auto& up = next[j + 1];
            const auto& down = next[j];
            std::vector<Point> pts;
            pts.reserve(up.size() * down.size() + 1);
            pts.push_back(Point{0.0, tree.stop_reward[i]});
            for (const auto& u : up) {
                for (const auto& d : down) {
                    pts.push_back(Point{tree.cost_rate[i] * tree.dt + p * u.cost + (1.0 - p) * d.cost,
                                        tree.running[i] * tree.dt + p * u.value + (1.0 - p) * d.value});
                }
            }
            prune(pts);
            cur[j] = std::move(pts);
        }
        for (std::size_t j = 0; j <= k; ++j) next[j] = std::move(cur[j]);
    }

    PureSolution out;
    out.frontier_size = next[0].size();
    out.value = -HUGE_VAL;
    for (const auto& p : next[0]) {
        if (p.cost <= y * (1.0 + 1e-12) + 1e-15 && p.value > out.value) {
            out.value = p.value;
            out.cost = p.cost;
        }
    }
    return out;
}

ReplaySummary replay_plan(const Tree& tree, const std::vector<double>& stop_prob, std::size_t n_paths,
                          std::uint64_t seed) {
    if (stop_prob.size() != tree.n_nodes()) throw ValidationError("replay_plan: plan size does not match tree");
    std::vector<double> rewards(n_paths), costs(n_paths);
    for (std::size_t p = 0; p < n_paths; ++p) {
        auto rng = path_engine(seed, p);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::size_t j = 0;
        double reward = 0.0, cost = 0.0;
        for (std::size_t k = 0; k <= tree.n_steps; ++k) {
            const std::size_t i = Tree::index(k, j);
            if (k == tree.n_steps || unit(rng) < stop_prob[i]) {
                reward += tree.stop_reward[i];
                break;
            }
            reward += tree.running[i] * tree.dt;
            cost += tree.cost_rate[i] * tree.dt;
            if (unit(rng) < tree.p_up[i]) ++j;
        }
        rewards[p] = reward;
        costs[p] = cost;
    }
    return ReplaySummary{mean_se(rewards), mean_se(costs)};
}

} // namespace cstop
