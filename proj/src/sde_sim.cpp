#include "cstop/sde_sim.hpp"

#include "cstop/errors.hpp"
#include "cstop/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cstop {

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double norm(StateView x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

[[noreturn]] void non_finite(const char* what, double t, StateView x) {
    std::ostringstream msg;
    msg << "non-finite " << what << " at t=" << t << ", x=(";
    for (std::size_t i = 0; i < x.size(); ++i) msg << (i ? "," : "") << x[i];
    msg << ")";
    throw NumericalError(msg.str());
}

// One Euler-Maruyama step in place; dw holds the Brownian increment.
void euler_step(const ProblemSpec& spec, double t, std::span<double> x, std::span<const double> dw, double dt) {
    const Vector b = spec.drift(t, x);
    const Matrix s = spec.volatility(t, x);
    for (double v : b) if (!std::isfinite(v)) non_finite("drift", t, x);
    for (double v : s.data) if (!std::isfinite(v)) non_finite("volatility", t, x);
    Vector next(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double acc = b[i] * dt;
        for (std::size_t j = 0; j < dw.size(); ++j) acc += s(i, j) * dw[j];
        next[i] += acc;
    }
    std::copy(next.begin(), next.end(), x.begin());
}

void check_grid(double dt, std::size_t n_paths) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("simulation step dt must be positive");
    if (n_paths == 0) throw ValidationError("simulation needs at least one path");
}

} // namespace

std::mt19937_64 path_engine(std::uint64_t seed, std::uint64_t stream) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

PathView PathBatch::path(std::size_t i) const {
    const std::size_t stride = (n_steps + 1) * dim;
    return PathView{t0, dt, dim, std::span<const double>(values).subspan(i * stride, stride)};
}

std::span<const double> PathBatch::increments_of(std::size_t i) const {
    const std::size_t stride = n_steps * noise_dim;
    return std::span<const double>(increments).subspan(i * stride, stride);
}

PathBatch simulate_state(const ProblemSpec& spec, double t, StateView x, double dt, std::size_t n_steps,
                         std::size_t n_paths, std::uint64_t seed) {
    check_grid(dt, n_paths);
    if (x.size() != spec.dim_state) throw ValidationError("simulate_state: start state has wrong dimension");

    PathBatch batch;
    batch.t0 = t;
    batch.x0.assign(x.begin(), x.end());
    batch.dt = dt;
    batch.n_steps = n_steps;
    batch.n_paths = n_paths;
    batch.seed = seed;
    batch.dim = spec.dim_state;
    batch.noise_dim = spec.dim_noise;
    batch.values.resize(n_paths * (n_steps + 1) * batch.dim);
    batch.increments.resize(n_paths * n_steps * batch.noise_dim);

    const double sqrt_dt = std::sqrt(dt);
    parallel_for(n_paths, [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            auto rng = path_engine(seed, p);
            std::normal_distribution<double> normal(0.0, 1.0);
            double* row = batch.values.data() + p * (n_steps + 1) * batch.dim;
            double* inc = batch.increments.data() + p * n_steps * batch.noise_dim;
            std::copy(x.begin(), x.end(), row);
            for (std::size_t k = 0; k < n_steps; ++k) {
                std::span<double> dw(inc + k * batch.noise_dim, batch.noise_dim);
                for (double& w : dw) w = sqrt_dt * normal(rng);
                std::span<double> next(row + (k + 1) * batch.dim, batch.dim);
                std::copy(row + k * batch.dim, row + (k + 1) * batch.dim, next.begin());
                euler_step(spec, t + static_cast<double>(k) * dt, next, dw, dt);
            }
        }
    }, 64);
    return batch;
}

bool ConstantControl::decide(double, StateView, double, std::span<double> control, bool&) const {
    for (std::size_t j = 0; j < control.size(); ++j) control[j] = j < control_.size() ? control_[j] : 0.0;
    return false;
}

const char* to_string(StopReason reason) {
    switch (reason) {
    case StopReason::budget: return "budget";
    case StopReason::policy: return "policy";
    case StopReason::horizon: return "horizon";
    }
    return "unknown";
}

MeanSe mean_se(std::span<const double> samples) {
    MeanSe out;
    const auto n = static_cast<double>(samples.size());
    if (samples.empty()) return out;
    double sum = 0.0;
    for (double v : samples) sum += v;
    out.mean = sum / n;
    if (samples.size() > 1) {
        double ss = 0.0;
        for (double v : samples) ss += (v - out.mean) * (v - out.mean);
        out.se = std::sqrt(ss / (n - 1.0) / n);
    }
    return out;
}

BatchSummary ControlledBatch::summary() const {
    BatchSummary s;
    s.n_paths = outcomes.size();
    std::vector<double> r, c, h;
    r.reserve(outcomes.size());
    c.reserve(outcomes.size());
    h.reserve(outcomes.size());
    for (const auto& o : outcomes) {
        r.push_back(o.reward);
        c.push_back(o.cost);
        h.push_back(o.stop_time);
        switch (o.reason) {
        case StopReason::budget: ++s.budget_hits; break;
        case StopReason::policy: ++s.policy_stops; break;
        case StopReason::horizon: ++s.horizon_stops; break;
        }
        if (o.extrapolated) ++s.extrapolated_paths;
    }
    s.reward = mean_se(r);
    s.cost = mean_se(c);
    s.stop_time = mean_se(h);
    return s;
}

ControlledBatch simulate_controlled(const ProblemSpec& spec, double t, StateView x, double y, const Policy& policy,
                                    double dt, std::size_t n_steps, std::size_t n_paths, std::uint64_t seed,
                                    const RolloutOptions& options) {
    check_grid(dt, n_paths);
    if (x.size() != spec.dim_state) throw ValidationError("simulate_controlled: start state has wrong dimension");
    if (!(y >= 0.0)) throw ValidationError("simulate_controlled: budget must be nonnegative");

    ControlledBatch out;
    out.t0 = t;
    out.x0.assign(x.begin(), x.end());
    out.y0 = y;
    out.dt = dt;
    out.n_steps = n_steps;
    out.n_paths = n_paths;
    out.seed = seed;
    out.noise_dim = spec.dim_noise;
    out.outcomes.resize(n_paths);

    const std::size_t l = spec.dim_state;
    const std::size_t d = spec.dim_noise;
    const bool traces = options.keep_traces;
    if (traces) {
        out.state.t0 = t;
        out.state.x0 = out.x0;
        out.state.dt = dt;
        out.state.n_steps = n_steps;
        out.state.n_paths = n_paths;
        out.state.seed = seed;
        out.state.dim = l;
        out.state.noise_dim = d;
        out.state.values.resize(n_paths * (n_steps + 1) * l);
        out.state.increments.resize(n_paths * n_steps * d);
        out.budget.resize(n_paths * (n_steps + 1));
        out.cost.resize(n_paths * (n_steps + 1));
        out.control.assign(n_paths * n_steps * d, 0.0);
    }

    const double sqrt_dt = std::sqrt(dt);
    parallel_for(n_paths, [&](std::size_t begin, std::size_t end) {
        Vector state(l);
        Vector control(d);
        Vector dw(d);
        for (std::size_t p = begin; p < end; ++p) {
            auto rng = path_engine(seed, p);
            std::normal_distribution<double> normal(0.0, 1.0);
            std::bernoulli_distribution coin(0.5);
            PathOutcome& o = out.outcomes[p];
            std::copy(x.begin(), x.end(), state.begin());
            double budget = y;
            double cost = 0.0;
            double running = 0.0;
            bool stopped = false;

            auto record = [&](std::size_t k) {
                if (!traces) return;
                std::copy(state.begin(), state.end(), out.state.values.begin() + static_cast<std::ptrdiff_t>((p * (n_steps + 1) + k) * l));
                out.budget[p * (n_steps + 1) + k] = budget;
                out.cost[p * (n_steps + 1) + k] = cost;
            };
            auto stop_here = [&](std::size_t k, StopReason reason) {
                const double tk = t + static_cast<double>(k) * dt;
                o.reward = running + spec.stop_reward(tk, state);
                o.cost = cost;
                o.stop_index = k;
                o.stop_time = static_cast<double>(k) * dt;
                o.reason = reason;
                stopped = true;
            };

            if (budget <= 0.0) {
                o.hit_index = 0;
                stop_here(0, StopReason::budget);
            }
            record(0);
            for (std::size_t k = 0; k < n_steps; ++k) {
                if (stopped && !traces) break;
                const double tk = t + static_cast<double>(k) * dt;
                std::fill(control.begin(), control.end(), 0.0);
                if (!stopped) {
                    bool extrapolated = false;
                    const bool stop = policy.decide(tk, state, budget, control, extrapolated);
                    o.extrapolated = o.extrapolated || extrapolated;
                    if (stop) {
                        stop_here(k, StopReason::policy);
                        if (!traces) break;
                    }
                }
                for (double& w : dw) {
                    w = options.noise == Noise::gaussian ? sqrt_dt * normal(rng) : (coin(rng) ? sqrt_dt : -sqrt_dt);
                }
                if (traces) {
                    std::copy(dw.begin(), dw.end(), out.state.increments.begin() + static_cast<std::ptrdiff_t>((p * n_steps + k) * d));
                }
                if (!stopped) {
                    if (traces) {
                        std::copy(control.begin(), control.end(), out.control.begin() + static_cast<std::ptrdiff_t>((p * n_steps + k) * d));
                    }
                    const double g = spec.cost_rate(tk, state);
                    const double f = spec.running_reward(tk, state);
                    if (!std::isfinite(g) || !std::isfinite(f)) non_finite("reward or cost rate", tk, state);
                    double noise = 0.0;
                    for (std::size_t j = 0; j < d; ++j) noise += control[j] * dw[j];
                    const double next_budget = budget + noise - g * dt;
                    running += f * dt;
                    euler_step(spec, tk, state, dw, dt);
                    if (next_budget <= 0.0) {
                        const double theta = budget / (budget - next_budget);
                        cost += theta * g * dt;
                        budget = 0.0;
                        o.hit_index = k + 1;
                        stop_here(k + 1, StopReason::budget);
                        o.stop_time = (static_cast<double>(k) + theta) * dt;
                    } else {
                        cost += g * dt;
                        budget = next_budget;
                    }
                } else {
                    euler_step(spec, tk, state, dw, dt);
                }
                record(k + 1);
            }
            if (!stopped) stop_here(n_steps, StopReason::horizon);
        }
    }, 64);
    return out;
}

MomentReport moment_check(const PathBatch& batch, double q, std::span<const std::size_t> stop_indices,
                          std::size_t window) {
    if (q < 1.0) throw ValidationError("moment_check: q must be >= 1");
    if (!stop_indices.empty() && stop_indices.size() != batch.n_paths) {
        throw ValidationError("moment_check: need one stopping index per path");
    }
    MomentReport report;
    report.q = q;
    report.start_norm = norm(batch.x0);

    std::vector<double> sup(batch.n_paths), osc;
    for (std::size_t p = 0; p < batch.n_paths; ++p) {
        const PathView path = batch.path(p);
        double m = 0.0;
        for (std::size_t k = 0; k < path.size(); ++k) m = std::max(m, norm(path.at(k)));
        sup[p] = std::pow(m, q);
    }
    report.sup_moment = mean_se(sup);
    report.envelope_ratio = report.sup_moment.mean / (1.0 + std::pow(report.start_norm, q));

    if (!stop_indices.empty()) {
        osc.resize(batch.n_paths);
        for (std::size_t p = 0; p < batch.n_paths; ++p) {
            const PathView path = batch.path(p);
            const std::size_t tau = std::min(stop_indices[p], batch.n_steps);
            const StateView anchor = path.at(tau);
            double m = 0.0;
            for (std::size_t k = tau; k <= std::min(batch.n_steps, tau + window); ++k) {
                const StateView xk = path.at(k);
                double s = 0.0;
                for (std::size_t i = 0; i < xk.size(); ++i) s += (xk[i] - anchor[i]) * (xk[i] - anchor[i]);
                m = std::max(m, std::sqrt(s));
            }
            osc[p] = std::pow(m, q);
        }
        report.has_increment = true;
        report.increment_moment = mean_se(osc);
    }
    return report;
}

EnvelopeFit fit_moment_envelope(std::span<const MomentReport> reports) {
    EnvelopeFit fit;
    if (reports.empty()) return fit;
    fit.constant = 0.0;
    fit.min_ratio = HUGE_VAL;
    fit.fits = true;
    for (const auto& r : reports) {
        if (!std::isfinite(r.envelope_ratio) || r.envelope_ratio <= 0.0) fit.fits = false;
        fit.constant = std::max(fit.constant, r.envelope_ratio);
        fit.min_ratio = std::min(fit.min_ratio, r.envelope_ratio);
    }
    return fit;
}

} // namespace cstop
