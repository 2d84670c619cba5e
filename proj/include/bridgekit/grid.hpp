#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace bridgekit {

/// Uniform 1D grid with n nodes on [lo, hi].
struct Grid1D {
    double lo = 0.0;
    double hi = 1.0;
    std::size_t n = 3;

    Grid1D() = default;
    Grid1D(double lo_, double hi_, std::size_t n_) : lo(lo_), hi(hi_), n(n_) {
        if (!(lo < hi)) throw std::invalid_argument("Grid1D: lo must be < hi");
        if (n < 3) throw std::invalid_argument("Grid1D: need at least 3 nodes");
    }

    double spacing() const { return (hi - lo) / double(n - 1); }
    double node(std::size_t i) const { return lo + double(i) * spacing(); }

    std::vector<double> nodes() const {
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = node(i);
        return x;
    }

    bool contains(double x) const { return x >= lo && x <= hi; }

    // Index of the cell [node(i), node(i+1)] containing x, clamped to the grid.
    std::size_t cell(double x) const {
        if (x <= lo) return 0;
        if (x >= hi) return n - 2;
        auto i = std::size_t((x - lo) / spacing());
        if (i > n - 2) i = n - 2;
        return i;
    }

    bool operator==(const Grid1D& o) const { return lo == o.lo && hi == o.hi && n == o.n; }
};

/// Linear interpolation of nodal values on a grid; clamps outside [lo, hi].
inline double interp_linear(const Grid1D& g, const std::vector<double>& v, double x) {
    std::size_t i = g.cell(x);
    double h = g.spacing();
    double w = (x - g.node(i)) / h;
    if (w < 0.0) w = 0.0;
    if (w > 1.0) w = 1.0;
    return (1.0 - w) * v[i] + w * v[i + 1];
}

/// Ascending option maturities plus the simulation/PDE step count per interval.
struct TimeGrid {
    std::vector<double> maturities;
    std::size_t steps_per_interval = 200;

    TimeGrid() = default;
    TimeGrid(std::vector<double> ts, std::size_t steps) : maturities(std::move(ts)), steps_per_interval(steps) {
        if (maturities.empty()) throw std::invalid_argument("TimeGrid: no maturities");
        if (maturities.front() <= 0.0) throw std::invalid_argument("TimeGrid: first maturity must be > 0");
        for (std::size_t i = 1; i < maturities.size(); ++i)
            if (maturities[i] <= maturities[i - 1])
                throw std::invalid_argument("TimeGrid: maturities must be strictly ascending");
        if (steps_per_interval == 0) throw std::invalid_argument("TimeGrid: steps_per_interval must be positive");
    }
};

} // namespace bridgekit
