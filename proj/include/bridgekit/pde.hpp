#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "bridgekit/grid.hpp"
#include "bridgekit/svm.hpp"

namespace bridgekit::pde {

/// Finite-difference scheme controls shared by the 1D and 2D solvers.
struct SchemeParams {
    std::size_t time_steps = 200;
    double theta = 1.0; // implicitness of the linear part; 1 = fully implicit
    enum class BoundaryRule { ValueLinear, LogLinear };
    BoundaryRule boundary = BoundaryRule::ValueLinear;
    std::size_t inner_cap = 20; // nonlinear lag iterations per step
    double inner_tol = 1e-9;
};

/// Backward-time value surface on a 1D grid. Slab 0 holds the terminal data;
/// times descend from the horizon to 0.
struct ValueSurface1D {
    std::vector<double> times;
    Grid1D grid;
    std::vector<std::vector<double>> values;

    /// Linear interpolation in time and space (clamped).
    double at(double t, double x) const;
    std::size_t slab_index(double t) const;
};

/// Solves dU/dt + (1/2) U_xx = 0 backward from the terminal data.
ValueSurface1D solve_heat_1d(const std::vector<double>& terminal, const Grid1D& grid, double horizon,
                             const SchemeParams& params = {});

/// Solves du/dt + (1/2) u_xx - (1/2) (u_x)^2 = 0 by the exponential change of
/// variable u = -ln U plus a heat solve; the terminal data is shifted by its
/// minimum so exp(-f) stays representable.
ValueSurface1D solve_burgers_1d(const std::vector<double>& terminal_f, const Grid1D& grid, double horizon,
                                const SchemeParams& params = {});

/// Backward-time value surface over (log-spot, log-vol). Slab 0 is terminal.
struct ValueSurface2D {
    std::vector<double> times; // descending, absolute
    Grid1D x_grid;             // log-spot
    Grid1D y_grid;             // log-vol
    std::vector<std::vector<double>> values; // [slab][ix * ny + iy]
    bool inner_converged = true;

    std::size_t nx() const { return x_grid.n; }
    std::size_t ny() const { return y_grid.n; }
    double& v(std::size_t slab, std::size_t ix, std::size_t iy) { return values[slab][ix * ny() + iy]; }
    double v(std::size_t slab, std::size_t ix, std::size_t iy) const { return values[slab][ix * ny() + iy]; }

    /// Bilinear interpolation at (s, a) on the given slab (clamped).
    double slab_at(std::size_t slab, double s, double a) const;
    /// Linear in time between slabs, bilinear in space.
    double at(double t, double s, double a) const;
    std::size_t slab_index(double t) const;
};

/// Hedge-ratio field on the same slabs/grids as a value surface.
struct DeltaField {
    std::vector<double> times;
    Grid1D x_grid;
    Grid1D y_grid;
    std::vector<std::vector<double>> values;

    std::size_t nx() const { return x_grid.n; }
    std::size_t ny() const { return y_grid.n; }
    double slab_at(std::size_t slab, double s, double a) const;
    double at(double t, double s, double a) const;
    std::size_t slab_index(double t) const;
};

/// Log-spaced (s, a) grids sized to cover the simulated mass of the model up
/// to the horizon with the requested number of driver standard deviations.
struct SvmGrids {
    Grid1D x; // log-spot
    Grid1D y; // log-vol
};
SvmGrids make_svm_grids(const market::NakedSvmSpec& svm, double horizon, std::size_t nx = 201,
                        std::size_t ny = 101, double width_sigmas = 6.0);

/// Solves du/dt + L0 u - (1/2)(1-rho^2) (sigma(a) du/da)^2 = 0 backward on
/// [t_start, t_end] from u(t_end, s, a) = terminal(s), where L0 is the
/// generator of (S, a). ADI in the two directions, explicit cross-derivative,
/// nonlinearity lagged and inner-iterated.
ValueSurface2D solve_svm_semilinear_2d(const std::function<double(double)>& terminal,
                                       const market::NakedSvmSpec& svm, double t_start, double t_end,
                                       const SvmGrids& grids, const SchemeParams& params = {});

/// Solves the linearization of the semilinear equation around u backward from
/// payoff(s): dD/dt + L0 D - (1-rho^2) sigma(a)^2 (du/da) (dD/da) = 0.
/// The stepper mirrors solve_svm_semilinear_2d exactly, so the result is the
/// derivative of u with respect to a terminal-data perturbation.
ValueSurface2D solve_linear_sensitivity_2d(const ValueSurface2D& u, const std::function<double(double)>& payoff,
                                           const market::NakedSvmSpec& svm, const SchemeParams& params = {});

/// Memory-lean variant of solve_linear_sensitivity_2d that returns only the
/// earliest slab (nodal values at u.times.back()).
std::vector<double> sensitivity_start_slab(const ValueSurface2D& u, const std::function<double(double)>& payoff,
                                           const market::NakedSvmSpec& svm, const SchemeParams& params = {});

/// Hedge field -(d/ds + rho sigma(a)/(s a) d/da) u on every slab.
DeltaField delta_field(const ValueSurface2D& u, const market::NakedSvmSpec& svm);

/// Linear conditional-expectation solve for the alternating calibration
/// route:
///   dU/dt + L0 U + (1/2) s^2 a^2 D^2 U
///          - (1/2) s^2 a^2 D (d/ds + rho sigma(a)/(s a) d/da) U = 0
/// backward from U(t_end, s, a) = terminal(s), with D the supplied hedge
/// field (null for a plain generator solve). The field slabs must match the
/// scheme steps.
ValueSurface2D solve_hedged_expectation_2d(const std::function<double(double)>& terminal,
                                           const DeltaField* delta, const market::NakedSvmSpec& svm,
                                           double t_start, double t_end, const SvmGrids& grids,
                                           const SchemeParams& params = {});

} // namespace bridgekit::pde
