#pragma once

// Uniform (t, x, y) grids and value arrays over them, shared by the dynamic
// programming and finite-difference solvers.

#include "cstop/model.hpp"

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace cstop {

// Time levels t0 + k dt for k = 0..n_t, x nodes on [x_min, x_max], y nodes on
// [0, y_max]. The y grid contains 0 exactly.
struct AugmentedGrid {
    double t0 = 0.0;
    double dt = 0.01;
    std::size_t n_t = 100; // number of time steps
    double x_min = -4.0;
    double x_max = 4.0;
    std::size_t n_x = 81;  // number of x nodes
    double y_max = 0.8;
    std::size_t n_y = 81;  // number of y nodes

    [[nodiscard]] double t(std::size_t k) const { return t0 + static_cast<double>(k) * dt; }
    [[nodiscard]] double x(std::size_t i) const { return x_min + static_cast<double>(i) * dx(); }
    [[nodiscard]] double y(std::size_t j) const { return static_cast<double>(j) * dy(); }
    [[nodiscard]] double dx() const { return (x_max - x_min) / static_cast<double>(n_x - 1); }
    [[nodiscard]] double dy() const { return y_max / static_cast<double>(n_y - 1); }
    [[nodiscard]] double t_end() const { return t(n_t); }
    [[nodiscard]] std::size_t size() const { return (n_t + 1) * n_x * n_y; }
    [[nodiscard]] std::size_t slice_size() const { return n_x * n_y; }

    // Grid covering [t0, t0 + horizon] with n_t steps.
    static AugmentedGrid over_horizon(double t0, double horizon, std::size_t n_t, double x_min, double x_max,
                                      std::size_t n_x, double y_max, std::size_t n_y);
};

// Throws ValidationError on degenerate grids.
void validate_grid(const AugmentedGrid& grid);

struct Provenance {
    std::string solver;
    std::map<std::string, double> params;
};

// Location in the (x, y) plane expressed as a bilinear stencil.
struct CellWeights {
    std::size_t i0 = 0, j0 = 0;
    double wx = 0.0, wy = 0.0; // weight of the upper neighbour
    bool clamped_x = false;
    bool clamped_y = false;
};

CellWeights locate(const AugmentedGrid& grid, double x, double y);

struct ValueSurface {
    AugmentedGrid grid;
    std::vector<double> values; // [k][i][j]
    std::shared_ptr<const ProblemSpec> spec; // null for surfaces read back from files
    Provenance provenance;
    std::map<std::string, double> diagnostics;
    double control_bound = 0.0; // A_max used by the solver

    [[nodiscard]] std::size_t index(std::size_t k, std::size_t i, std::size_t j) const {
        return (k * grid.n_x + i) * grid.n_y + j;
    }
    [[nodiscard]] double at(std::size_t k, std::size_t i, std::size_t j) const { return values[index(k, i, j)]; }
    double& at(std::size_t k, std::size_t i, std::size_t j) { return values[index(k, i, j)]; }

    // Bilinear in (x, y) on level k; points outside the grid clamp to it.
    [[nodiscard]] double interpolate(std::size_t k, double x, double y) const;
    // Linear in t between levels as well.
    [[nodiscard]] double sample(double t, double x, double y) const;
};

// Bilinear interpolation on one (x, y) slice stored as [i][j].
double interpolate_slice(const AugmentedGrid& grid, const double* slice, const CellWeights& w);

// max over interior nodes of |sigma u_xy| from central differences; used to
// size the control bound.
double cross_scale(const ProblemSpec& spec, const AugmentedGrid& grid, const std::vector<double>& values);

} // namespace cstop
