#pragma once

#include <cstddef>
#include <vector>

#include "bridgekit/grid.hpp"
#include "bridgekit/market.hpp"
#include "bridgekit/pde.hpp"

namespace bridgekit::bridge {

using market::MarginalDensity;

/// Dual potential f on a grid, normalized so max exp(-f) = 1; the dropped
/// multiplicative constant is kept as log_z.
struct Potential1D {
    Grid1D grid;
    std::vector<double> values;
    double log_z = 0.0;

    /// Linear interpolation of f; +infinity-like outside the grid support.
    double at(double x) const;
};

/// Alternating-update state for the two-marginal problem.
struct SinkhornState {
    Potential1D f1, f2;
    std::size_t iteration = 0;
    double residual = 0.0;
    bool converged = false;
    std::vector<double> residual_history;
    double t1 = 0.0, t2 = 0.0, x0 = 0.0;
    /// Cached log of the kernel convolution of exp(-f2), used by the drift
    /// evaluation on [0, t1).
    std::vector<double> log_inner;
};

/// Backward/forward factor pair whose pointwise product is the transition
/// density of the conditioned process. Slabs stop just above t = 0 where the
/// forward factor degenerates to a point mass.
struct FactorizationPair {
    std::vector<double> times; // descending, last entry > 0
    Grid1D grid;
    std::vector<std::vector<double>> psi;
    std::vector<std::vector<double>> psi_bar;
};

/// Area-constrained bridge data: the Lagrange multiplier for the integral
/// constraint plus the terminal potential.
struct AreaBridgeSpec {
    double target_area = 0.0;
    double multiplier = 0.0;
    Potential1D potential;
    MarginalDensity mu;
    double horizon = 0.0;
    double x0 = 0.0;
};

/// Quadratic-divergence bridge state: value-expansion surfaces plus the
/// optimized terminal potential.
struct Chi2BridgeState {
    pde::ValueSurface1D a_surface; // E[f1(W_T) | W_t = x]
    pde::ValueSurface1D c_surface; // residual value term
    Potential1D f1;
    bool converged = false;
    std::size_t iterations = 0;
    double gradient_norm = 0.0;
    std::vector<double> sample_m; // auxiliary martingale values from the last diagnostic run
};

/// Cumulative-distribution surface F(t, K) for a prescribed marginal flow.
struct MarginalFlow {
    std::vector<double> times; // ascending
    Grid1D grid;
    std::vector<std::vector<double>> cdf; // [time][node]
};

/// Optimal one-marginal potential: exp(-f(x)) proportional to
/// mu(x) exp((x-x0)^2 / (2T)).
Potential1D one_marginal_potential(const MarginalDensity& mu, double horizon, double x0);

/// Analytic pinned-bridge drift (x0 - x) / (T - t).
inline double brownian_bridge_drift(double t, double x, double horizon, double x0) {
    return (x0 - x) / (horizon - t);
}

/// Conditioned-diffusion drift toward the target marginal: the ratio of two
/// Gaussian quadratures over the marginal grid.
double one_marginal_drift(double t, double x, const MarginalDensity& mu, double horizon, double x0);

/// Alternating closed-form potential updates until both marginal residuals
/// drop below tol. Returns a flagged (non-converged) state if max_iter is hit.
SinkhornState sinkhorn_two_marginals(const MarginalDensity& mu1, const MarginalDensity& mu2, double t1,
                                     double t2, double x0, double tol = 1e-10, std::size_t max_iter = 500);

/// Drift of the two-marginal conditioned diffusion; the first potential drops
/// out for t >= t1.
double two_marginal_drift(double t, double x, const SinkhornState& state);

/// Drift matching a full marginal flow: (F_xx/2 - F_t) / F_x on the stored
/// surface by central differences.
double marginal_flow_drift(double t, double x, const MarginalFlow& flow);

/// Multiplier and potential for the fixed-area bridge.
AreaBridgeSpec area_bridge(const MarginalDensity& mu, double area, double horizon, double x0);

/// Drift of the area-constrained bridge by log-domain quadrature of the
/// explicit Gaussian exponent.
double area_bridge_drift(double t, double x, const AreaBridgeSpec& spec);

/// Quadratic-divergence bridge: conjugate-gradient dual ascent for f1, value
/// surfaces by heat solves. tol is relative to the initial gradient norm.
Chi2BridgeState chi2_bridge(const MarginalDensity& mu, double horizon, double x0,
                            std::size_t max_iter = 4000, double tol = 1e-8);

/// Drift -d_x A(t, x) / (2 m) of the quadratic-divergence bridge.
double chi2_drift(double t, double x, double m, const Chi2BridgeState& state);

/// Joint Euler simulation of (X, M) under the calibrated measure with
/// adaptive substepping where the 1/M drift stiffens. Returns terminal X
/// samples, stores terminal M samples on the state, and reports the fraction
/// of substeps that hit the M floor.
struct Chi2SimResult {
    std::vector<double> x_terminal;
    double floor_fraction = 0.0;
};
Chi2SimResult chi2_simulate(Chi2BridgeState& state, double horizon, double x0, std::size_t paths,
                            std::size_t steps, std::uint64_t seed);

/// Crank-Nicolson defaults fine enough for the unit-mass factorization check.
pde::SchemeParams doob_default_params();

/// Backward factor from the potential plus the closed-form forward factor.
FactorizationPair doob_factorization(const Potential1D& potential, double horizon, double x0,
                                     const pde::SchemeParams& params = doob_default_params());

} // namespace bridgekit::bridge
