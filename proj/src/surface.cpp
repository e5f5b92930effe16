#include "cstop/surface.hpp"

#include "cstop/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cstop {

AugmentedGrid AugmentedGrid::over_horizon(double t0, double horizon, std::size_t n_t, double x_min, double x_max,
                                          std::size_t n_x, double y_max, std::size_t n_y) {
    AugmentedGrid g;
    g.t0 = t0;
    g.n_t = n_t;
    g.dt = n_t > 0 ? horizon / static_cast<double>(n_t) : 0.0;
    g.x_min = x_min;
    g.x_max = x_max;
    g.n_x = n_x;
    g.y_max = y_max;
    g.n_y = n_y;
    return g;
}

void validate_grid(const AugmentedGrid& g) {
    std::ostringstream msg;
    if (g.n_t < 1) msg << "grid needs at least one time step; ";
    if (!(g.dt > 0.0) || !std::isfinite(g.dt)) msg << "time step must be positive; ";
    if (g.n_x < 3) msg << "x grid needs at least 3 nodes; ";
    if (!(g.x_max > g.x_min)) msg << "x range is empty; ";
    if (g.n_y < 2) msg << "y grid needs at least 2 nodes; ";
    if (!(g.y_max > 0.0) || !std::isfinite(g.y_max)) msg << "y_max must be positive; ";
    const std::string problems = msg.str();
    if (!problems.empty()) throw ValidationError("invalid grid: " + problems.substr(0, problems.size() - 2));
}

namespace {

// Fractional grid coordinates within 1e-9 cells of a node are taken as the node.
double snap_to_node(double f) {
    const double r = std::round(f);
    return std::abs(f - r) <= 1e-9 ? r : f;
}

} // namespace

CellWeights locate(const AugmentedGrid& grid, double x, double y) {
    CellWeights w;
    const double fx = snap_to_node((x - grid.x_min) / grid.dx());
    const double fy = snap_to_node(y / grid.dy());
    const double max_i = static_cast<double>(grid.n_x - 1);
    const double max_j = static_cast<double>(grid.n_y - 1);
    w.clamped_x = fx < 0.0 || fx > max_i;
    w.clamped_y = fy < 0.0 || fy > max_j;
    const double cx = std::clamp(fx, 0.0, max_i);
    const double cy = std::clamp(fy, 0.0, max_j);
    w.i0 = std::min(static_cast<std::size_t>(cx), grid.n_x - 2);
    w.j0 = std::min(static_cast<std::size_t>(cy), grid.n_y - 2);
    w.wx = cx - static_cast<double>(w.i0);
    w.wy = cy - static_cast<double>(w.j0);
    return w;
}

double interpolate_slice(const AugmentedGrid& grid, const double* slice, const CellWeights& w) {
    const std::size_t ny = grid.n_y;
    const double* a = slice + w.i0 * ny + w.j0;
    const double* b = a + ny;
    const double lower = a[0] + w.wy * (a[1] - a[0]);
    const double upper = b[0] + w.wy * (b[1] - b[0]);
    return lower + w.wx * (upper - lower);
}

double ValueSurface::interpolate(std::size_t k, double x, double y) const {
    return interpolate_slice(grid, values.data() + k * grid.slice_size(), locate(grid, x, y));
}

double ValueSurface::sample(double t, double x, double y) const {
    const double ft = std::clamp(snap_to_node((t - grid.t0) / grid.dt), 0.0, static_cast<double>(grid.n_t));
    const std::size_t k0 = std::min(static_cast<std::size_t>(ft), grid.n_t - 1);
    const double wt = ft - static_cast<double>(k0);
    const CellWeights w = locate(grid, x, y);
    const double v0 = interpolate_slice(grid, values.data() + k0 * grid.slice_size(), w);
    if (wt == 0.0) return v0;
    const double v1 = interpolate_slice(grid, values.data() + (k0 + 1) * grid.slice_size(), w);
    return v0 + wt * (v1 - v0);
}

double cross_scale(const ProblemSpec& spec, const AugmentedGrid& grid, const std::vector<double>& values) {
    const double dx = grid.dx(), dy = grid.dy();
    double est = 0.0;
    for (std::size_t k = 0; k < grid.n_t; ++k) {
        const double t = grid.t(k);
        for (std::size_t i = 1; i + 1 < grid.n_x; ++i) {
            const double sigma = std::abs(spec.vol_at(t, grid.x(i)));
            for (std::size_t j = 1; j + 1 < grid.n_y; ++j) {
                auto v = [&](std::size_t ii, std::size_t jj) { return values[(k * grid.n_x + ii) * grid.n_y + jj]; };
                const double vxy = (v(i + 1, j + 1) - v(i + 1, j - 1) - v(i - 1, j + 1) + v(i - 1, j - 1)) / (4.0 * dx * dy);
                est = std::max(est, sigma * std::abs(vxy));
            }
        }
    }
    return est;
}

} // namespace cstop
