#pragma once

#include <cstdint>
#include <vector>

#include "bridgekit/bridge.hpp"
#include "bridgekit/grid.hpp"
#include "bridgekit/market.hpp"
#include "bridgekit/mc.hpp"
#include "bridgekit/pde.hpp"

namespace bridgekit::martingale {

using market::MarginalDensity;
using market::NakedSvmSpec;

/// Call-decomposed potential f(s) = sum_a w_a (s - K_a)^+.
struct PotentialWeights {
    std::vector<double> strikes; // ascending
    std::vector<double> weights;

    double operator()(double s) const {
        double f = 0.0;
        for (std::size_t i = 0; i < strikes.size(); ++i)
            if (s > strikes[i]) f += weights[i] * (s - strikes[i]);
        return f;
    }
};

/// Weighted prior states at the start of a calibration interval.
struct PriorCloud {
    std::vector<double> s, a, w; // w sums to 1

    static PriorCloud point(double s0, double a0) { return {{s0}, {a0}, {1.0}}; }
};

struct CalibrateOptions {
    pde::SchemeParams scheme;
    std::size_t nx = 201, ny = 101;
    double width_sigmas = 6.0;
    double grad_tol = 1e-6;
    std::size_t max_iters = 80;
    double mean_tol = 1e-4; // martingale feasibility: |E_mu[S] - s0| <= mean_tol * s0
    std::vector<double> strikes; // call decomposition; empty = 20 strikes on [0.6, 1.4] x spot
};

struct McOptions {
    std::size_t paths = 1 << 16;
    std::uint64_t seed = 20240901ull;
    std::size_t steps_per_interval = 200;
};

struct IterationRow {
    std::size_t iteration = 0;
    double dual_value = 0.0;
    double gradient_norm = 0.0;
};

/// Calibrated interval: potential, value surface, hedge field, diagnostics.
struct CalibratedSlice {
    double t_start = 0.0, t_end = 0.0;
    PotentialWeights weights;
    bridge::Potential1D grid_potential; // fixed-point route output
    bool uses_grid_potential = false;
    pde::ValueSurface2D u;
    pde::DeltaField delta;
    double dual_value = 0.0;
    double gradient_norm = 0.0;
    bool converged = false;
    std::vector<IterationRow> log;

    /// Terminal potential evaluation.
    double f_at(double s) const;
};

struct DualEval {
    double value = 0.0;
    std::vector<double> gradient;
    pde::ValueSurface2D u; // surface at the evaluation point
};

/// Dual objective -E_mu[f] + E_cloud[u(t_start)] and its gradient in the
/// strike weights; the gradient components solve the linearized equation per
/// strike, which makes them the exact derivatives of the discrete objective.
DualEval dual_objective_and_gradient(const PotentialWeights& weights, const MarginalDensity& mu,
                                     const NakedSvmSpec& svm, double t_start, double t_end,
                                     const PriorCloud& cloud, const CalibrateOptions& opts,
                                     const pde::SvmGrids& grids, bool want_gradient = true);

/// Quasi-Newton ascent (BFGS with a backtracking line search) of the concave
/// dual for one maturity interval.
CalibratedSlice calibrate_slice(const MarginalDensity& mu, const NakedSvmSpec& svm, double t_start,
                                double t_end, const PriorCloud& cloud, const CalibrateOptions& opts);

struct TermStructureCalibration {
    std::vector<CalibratedSlice> slices;
    mc::PathEnsemble ensemble; // states and weights at maturities plus extra store times
    bool converged = false;
    bool weights_degenerate = false; // effective sample size below 5% of paths
};

/// Sequential multi-maturity calibration: calibrate, simulate and reweight the
/// prior cloud, move to the next interval.
TermStructureCalibration calibrate_term_structure(const std::vector<MarginalDensity>& targets,
                                                  const NakedSvmSpec& svm, const TimeGrid& time_grid,
                                                  const McOptions& mc_opts, const CalibrateOptions& opts,
                                                  const std::vector<double>& extra_store_times = {});

struct FixedPointOptions {
    std::size_t bins = 50;
    std::size_t max_sweeps = 30;
    double tol = 1e-4; // sup-norm change of the binned potential
    McOptions mc;
    CalibrateOptions pde; // grid/scheme controls (grad fields unused)
};

/// Linear-equation alternative: alternate a linear solve for the conditional
/// expectation factor with a binned Monte-Carlo update of the potential.
CalibratedSlice fixed_point_calibration(const MarginalDensity& mu, const NakedSvmSpec& svm, double t_start,
                                        double t_end, const FixedPointOptions& opts);

/// Calibrated vol-level drift (1 - rho^2) sigma(a)^2 d_a(-u)(t, s, a).
double drift_value(double t, double s, double a, const CalibratedSlice& slice, const NakedSvmSpec& svm);

} // namespace bridgekit::martingale
