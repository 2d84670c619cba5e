#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bridgekit/grid.hpp"
#include "bridgekit/market.hpp"
#include "bridgekit/pde.hpp"
#include "bridgekit/rng.hpp"

namespace bridgekit::mc {

using market::MarginalDensity;
using market::NakedSvmSpec;

/// Weight-producing fields for one calibration interval. Null fields mean the
/// interval contributes no reweighting (prior measure).
struct WeightFields {
    const pde::ValueSurface2D* u = nullptr;
    const pde::DeltaField* delta = nullptr;
};

/// One simulation interval: [t_start, t_end] subdivided into `steps` Euler
/// steps, optionally reweighted by the attached fields.
struct SimInterval {
    double t_start = 0.0;
    double t_end = 0.0;
    std::size_t steps = 200;
    WeightFields fields;
};

/// Monte-Carlo ensemble of the two-factor prior: states, quadratic variation,
/// hedge-integral accumulator and log weights recorded at the stored times.
/// Layout is [stored time][path].
struct PathEnsemble {
    std::vector<double> times; // ascending, strictly positive
    std::size_t paths = 0;
    double s0 = 0.0, a0 = 0.0;
    std::vector<std::vector<double>> s, a, v;
    std::vector<std::vector<double>> ito;   // accumulated integral of Delta dS
    std::vector<std::vector<double>> log_g; // log Radon-Nikodym derivative
    double clamp_fraction = 0.0;            // off-grid field lookups / total lookups

    std::size_t time_index(double t) const;
};

/// Simulates the prior model over the given intervals, recording states at
/// store_times (each must coincide with a fine step time). Log-spot takes an
/// exact-variance lognormal step given the vol level; the vol level takes an
/// Euler step reflected at a positive floor. Per-path counter-based
/// substreams make the fill independent of thread count.
PathEnsemble simulate_weighted_paths(const NakedSvmSpec& svm, const std::vector<SimInterval>& intervals,
                                     const std::vector<double>& store_times, std::size_t n, RngSpec rng);

/// Prior-only convenience wrapper: one interval per consecutive pair of
/// store_times, no reweighting.
PathEnsemble simulate_p0_paths(const NakedSvmSpec& svm, const std::vector<double>& store_times,
                               std::size_t steps_per_interval, std::size_t n, RngSpec rng);

struct PriceResult {
    double price = 0.0;
    double std_error = 0.0;
    double ess = 0.0;
};

/// Self-normalized importance-sampling estimate with delta-method standard
/// error. Throws when the effective sample size drops below 1% of the paths.
PriceResult girsanov_price(const std::vector<double>& payoff, const std::vector<double>& log_weights);

/// Standard error of the difference (price_b - price_a) of two self-normalized
/// estimates sharing the same path set.
double girsanov_difference_stderr(const std::vector<double>& payoff_a, const std::vector<double>& logw_a,
                                  const std::vector<double>& payoff_b, const std::vector<double>& logw_b);

/// Precomputed drift table on Euler step times for the one-factor bridge
/// diagnostics. values[k] holds the drift on the x grid at time t_k.
struct DriftGrid1D {
    std::vector<double> times; // left points of the Euler steps
    double dt = 0.0;
    Grid1D x;
    std::vector<std::vector<double>> values;

    double eval(std::size_t step, double xq, std::size_t* clamped) const;
};

/// Tabulates the one-marginal conditioned drift on every Euler step time
/// (parallel over the table).
DriftGrid1D build_bridge_drift_grid(const MarginalDensity& mu, double horizon, double x0, std::size_t steps,
                                    const Grid1D& x_grid);

/// Terminal samples of a drifted one-factor Euler scheme plus the fraction of
/// drift lookups that fell outside the table.
struct EulerResult {
    std::vector<double> terminal;
    double clamp_fraction = 0.0;
};
EulerResult euler_bridge_paths(const DriftGrid1D& drift, double x_start, std::size_t n, RngSpec rng);

/// Direct Euler simulation of the calibrated two-factor model (diagnostic
/// route): the supplied drift adds to the vol-level equation.
struct SvmEulerResult {
    std::vector<double> s_terminal;
    std::vector<double> a_terminal;
};
SvmEulerResult euler_svm_paths(const NakedSvmSpec& svm,
                               const std::function<double(double, double, double)>& vol_drift, double horizon,
                               std::size_t steps, std::size_t n, RngSpec rng);

/// Equal-mass binned conditional expectation E[value | key].
struct BinnedConditional {
    std::vector<double> edges; // ascending, size bins + 1
    std::vector<double> means;
    std::vector<std::size_t> counts;
    bool degenerate = false; // single-bin fallback engaged

    double eval(double key) const;
};
BinnedConditional conditional_expectation_by_bins(const std::vector<double>& keys,
                                                  const std::vector<double>& values, std::size_t bins);

/// One reported smile node.
struct SmilePoint {
    double strike = 0.0;
    double price = 0.0; // call price via the out-of-the-money instrument + parity
    double std_error = 0.0;
    double implied_vol = 0.0;
};

/// Smile from a weighted terminal sample: prices the out-of-the-money
/// instrument per strike and converts through parity at the known model
/// forward, which keeps deep in-the-money quotes implied-vol accurate.
std::vector<SmilePoint> smile_from_sample(const std::vector<double>& terminal,
                                          const std::vector<double>& log_weights,
                                          const std::vector<double>& strikes, double forward, double maturity);

/// Brownian-prior terminal sample with the conditioned-measure importance
/// weights mu(W_T) exp((W_T - x0)^2 / (2T)) in log form.
struct WeightedTerminal {
    std::vector<double> x;
    std::vector<double> log_w;
};
WeightedTerminal brownian_girsanov_terminal(const MarginalDensity& mu, double horizon, double x0,
                                            std::size_t n, RngSpec rng);

namespace ref {
/// Serial reference implementation of simulate_weighted_paths kept for
/// validating the parallel kernels; must produce bit-identical ensembles.
PathEnsemble simulate_weighted_paths(const NakedSvmSpec& svm, const std::vector<SimInterval>& intervals,
                                     const std::vector<double>& store_times, std::size_t n, RngSpec rng);
/// Naive-accumulation mean used to cross-check the pairwise reductions.
double naive_mean(const std::vector<double>& x);
} // namespace ref

} // namespace bridgekit::mc
