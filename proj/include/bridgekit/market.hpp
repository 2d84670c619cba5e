#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "bridgekit/black_scholes.hpp"
#include "bridgekit/grid.hpp"
#include "bridgekit/svm.hpp"

namespace bridgekit::market {

/// Vanilla call quotes for one maturity.
struct CallQuoteSlice {
    double maturity = 0.0;
    double spot = 1.0;
    std::vector<double> strikes; // ascending
    std::vector<double> prices;

    /// Throws ValidationError (std::invalid_argument) naming the first
    /// offending strike (triple) if the quotes admit static arbitrage.
    void validate() const;
};

/// Probability density on a uniform grid; trapezoidal mass is 1 after
/// construction.
struct MarginalDensity {
    Grid1D grid;
    std::vector<double> mass;

    MarginalDensity() = default;
    /// Normalizes nonnegative nodal values to unit trapezoidal mass.
    MarginalDensity(Grid1D g, std::vector<double> raw);

    double value(double x) const { return interp_linear(grid, mass, x); }
    double total_mass() const;
    double mean() const;
    /// E[(X - K)^+], exact for the piecewise-linear density.
    double call_price(double strike) const;
    /// E[(K - X)^+], exact for the piecewise-linear density.
    double put_price(double strike) const;
    /// P(X <= x), exact for the piecewise-linear density.
    double cdf(double x) const;

    /// Lognormal density with the given mean and Black-Scholes volatility at
    /// maturity, sampled on [mean*exp(-w*vol*sqrt(T)), mean*exp(w*vol*sqrt(T))].
    static MarginalDensity lognormal(double mean, double vol, double maturity, std::size_t n = 801,
                                     double width_sigmas = 10.0);
    /// Gaussian density with the given mean/variance on mean +- w*sd.
    static MarginalDensity gaussian(double mean, double variance, std::size_t n = 801,
                                    double width_sigmas = 8.0);
    /// Near-Dirac spike at x0: a Gaussian whose standard deviation equals two
    /// grid spacings of the returned grid.
    static MarginalDensity dirac_like(double x0, double width = 4e-4);
};

/// One convex-order violation: call prices decreased between slices i and i+1.
struct ConvexOrderViolation {
    std::size_t slice_index = 0; // earlier slice
    double strike = 0.0;
    double gap = 0.0; // E_i[(S-K)^+] - E_{i+1}[(S-K)^+] > tol
};

/// Breeden-Litzenberger style density extraction: a shape-preserving convex
/// C^1 quadratic interpolant of quoted prices is differentiated twice in
/// strike, exponential tails carry the unquoted mass, and the result is
/// renormalized on the target grid.
MarginalDensity density_from_calls(const CallQuoteSlice& slice, const Grid1D& grid);

/// Empty iff the slices are nondecreasing in convex order (tolerance 1e-10 on
/// call prices at every grid node). All densities must share one grid.
std::vector<ConvexOrderViolation> validate_convex_order(const std::vector<MarginalDensity>& densities);

} // namespace bridgekit::market
