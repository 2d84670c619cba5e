#include "bridgekit/market.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"

namespace bridgekit::market {

namespace {

// Integral of rho(y) * (y - K) over [u, v] where rho is linear on the cell
// [a, a + h] containing [u, v].
double cell_call_integral(double a, double h, double rho_a, double rho_b, double u, double v, double strike) {
    const double m = (rho_b - rho_a) / h;
    auto F = [&](double y) {
        return rho_a * (0.5 * y * y - strike * y) +
               m * (y * y * y / 3.0 - 0.5 * (a + strike) * y * y + a * strike * y);
    };
    return F(v) - F(u);
}

double cell_moment_integral(double a, double h, double rho_a, double rho_b, double u, double v) {
    const double m = (rho_b - rho_a) / h;
    auto F = [&](double y) { return rho_a * 0.5 * y * y + m * (y * y * y / 3.0 - 0.5 * a * y * y); };
    return F(v) - F(u);
}

} // namespace

void CallQuoteSlice::validate() const {
    if (strikes.size() != prices.size() || strikes.size() < 2)
        throw ValidationError("quote_shape", "CallQuoteSlice: need >= 2 strike/price pairs of equal length");
    if (!(maturity > 0.0)) throw ValidationError("quote_maturity", "CallQuoteSlice: maturity must be > 0");
    if (!(spot > 0.0)) throw ValidationError("quote_spot", "CallQuoteSlice: spot must be > 0");
    for (std::size_t i = 0; i + 1 < strikes.size(); ++i)
        if (!(strikes[i] < strikes[i + 1]))
            throw ValidationError("quote_strikes", "CallQuoteSlice: strikes must be strictly ascending");

    const double tol = 1e-12 * spot;
    for (std::size_t i = 0; i < strikes.size(); ++i) {
        const double intrinsic = std::max(spot - strikes[i], 0.0);
        if (prices[i] < intrinsic - tol || prices[i] > spot + tol) {
            std::ostringstream os;
            os << "arbitrage bounds violated at strike " << strikes[i] << ": price " << prices[i];
            throw ValidationError("arbitrage_bounds", os.str());
        }
    }
    for (std::size_t i = 0; i + 1 < strikes.size(); ++i) {
        const double slope = (prices[i + 1] - prices[i]) / (strikes[i + 1] - strikes[i]);
        if (slope > tol || slope < -1.0 - 1e-12) {
            std::ostringstream os;
            os << "call spread arbitrage between strikes " << strikes[i] << " and " << strikes[i + 1]
               << ": slope " << slope;
            throw ValidationError("arbitrage_monotonicity", os.str());
        }
    }
    for (std::size_t i = 0; i + 2 < strikes.size(); ++i) {
        const double s1 = (prices[i + 1] - prices[i]) / (strikes[i + 1] - strikes[i]);
        const double s2 = (prices[i + 2] - prices[i + 1]) / (strikes[i + 2] - strikes[i + 1]);
        if (s2 < s1 - 1e-12) {
            std::ostringstream os;
            os << "butterfly arbitrage at strike triple (" << strikes[i] << ", " << strikes[i + 1] << ", "
               << strikes[i + 2] << ")";
            throw ValidationError("arbitrage_convexity", os.str());
        }
    }
}

MarginalDensity::MarginalDensity(Grid1D g, std::vector<double> raw) : grid(g), mass(std::move(raw)) {
    if (mass.size() != grid.n) throw ValidationError("density_shape", "MarginalDensity: size mismatch with grid");
    for (double v : mass)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw ValidationError("density_negative", "MarginalDensity: nodal values must be finite and >= 0");
    double total = total_mass();
    if (!(total > 0.0)) throw ValidationError("density_empty", "MarginalDensity: zero total mass");
    for (double& v : mass) v /= total;
}

double MarginalDensity::total_mass() const {
    const double h = grid.spacing();
    std::vector<double> cells(grid.n - 1);
    for (std::size_t i = 0; i + 1 < grid.n; ++i) cells[i] = 0.5 * h * (mass[i] + mass[i + 1]);
    return pairwise_sum(cells);
}

double MarginalDensity::mean() const {
    const double h = grid.spacing();
    std::vector<double> cells(grid.n - 1);
    for (std::size_t i = 0; i + 1 < grid.n; ++i) {
        const double a = grid.node(i);
        cells[i] = cell_moment_integral(a, h, mass[i], mass[i + 1], a, a + h);
    }
    return pairwise_sum(cells);
}

double MarginalDensity::call_price(double strike) const {
    const double h = grid.spacing();
    std::vector<double> cells;
    cells.reserve(grid.n);
    for (std::size_t i = 0; i + 1 < grid.n; ++i) {
        const double a = grid.node(i), b = a + h;
        if (b <= strike) continue;
        const double u = std::max(a, strike);
        cells.push_back(cell_call_integral(a, h, mass[i], mass[i + 1], u, b, strike));
    }
    if (cells.empty()) return 0.0;
    return pairwise_sum(std::span<const double>(cells.data(), cells.size()));
}

double MarginalDensity::put_price(double strike) const {
    return call_price(strike) - mean() + strike; // total mass is 1
}

double MarginalDensity::cdf(double x) const {
    if (x <= grid.lo) return 0.0;
    if (x >= grid.hi) return 1.0;
    const double h = grid.spacing();
    std::vector<double> cells;
    cells.reserve(grid.n);
    for (std::size_t i = 0; i + 1 < grid.n; ++i) {
        const double a = grid.node(i), b = a + h;
        if (b <= x) {
            cells.push_back(0.5 * h * (mass[i] + mass[i + 1]));
        } else {
            const double w = (x - a) / h;
            const double rho_x = mass[i] + (mass[i + 1] - mass[i]) * w;
            cells.push_back(0.5 * (x - a) * (mass[i] + rho_x));
            break;
        }
    }
    return std::min(1.0, pairwise_sum(std::span<const double>(cells.data(), cells.size())));
}

MarginalDensity MarginalDensity::lognormal(double mean, double vol, double maturity, std::size_t n,
                                           double width_sigmas) {
    const double sd = vol * std::sqrt(maturity);
    const double mu_log = std::log(mean) - 0.5 * sd * sd;
    Grid1D g(mean * std::exp(-width_sigmas * sd), mean * std::exp(width_sigmas * sd), n);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = g.node(i);
        const double z = (std::log(x) - mu_log) / sd;
        v[i] = std::exp(-0.5 * z * z) / (x * sd * std::sqrt(2.0 * kPi));
    }
    return {g, std::move(v)};
}

MarginalDensity MarginalDensity::gaussian(double mean, double variance, std::size_t n, double width_sigmas) {
    const double sd = std::sqrt(variance);
    Grid1D g(mean - width_sigmas * sd, mean + width_sigmas * sd, n);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double z = (g.node(i) - mean) / sd;
        v[i] = std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * kPi));
    }
    return {g, std::move(v)};
}

MarginalDensity MarginalDensity::dirac_like(double x0, double width) {
    // Grid spacing = width / 2, span x0 +- 8 * width.
    const std::size_t n = 33;
    Grid1D g(x0 - 8.0 * width, x0 + 8.0 * width, n);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double z = (g.node(i) - x0) / width;
        v[i] = std::exp(-0.5 * z * z);
    }
    return {g, std::move(v)};
}

namespace {

// Shape-preserving C^1 convex quadratic interpolation of the quotes.
// Produces piecewise-constant curvature segments plus point masses where the
// construction degenerates to a slope jump (e.g. intrinsic-value quotes).
struct CurvatureSegment {
    double lo, hi, density;
};
struct PointMass {
    double at, mass;
};

struct ConvexSpline {
    std::vector<CurvatureSegment> segments;
    std::vector<PointMass> points;
    double slope_left;  // C'(K_first)
    double slope_right; // C'(K_last)
    double density_left = 0.0, density_right = 0.0;
};

ConvexSpline build_convex_spline(const std::vector<double>& k, const std::vector<double>& c) {
    const std::size_t n = k.size();
    std::vector<double> secant(n - 1), len(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        secant[i] = (c[i + 1] - c[i]) / (k[i + 1] - k[i]);
        len[i] = std::hypot(k[i + 1] - k[i], c[i + 1] - c[i]);
    }
    std::vector<double> d(n);
    for (std::size_t i = 1; i + 1 < n; ++i)
        d[i] = (len[i - 1] * secant[i - 1] + len[i] * secant[i]) / (len[i - 1] + len[i]);
    // End slopes from the quadratic through the three outermost quotes,
    // clamped to the arbitrage-consistent range.
    {
        const double h0 = k[1] - k[0], h1 = k[2] - k[1];
        d[0] = std::clamp(secant[0] - h0 * (secant[1] - secant[0]) / (h0 + h1), -1.0, secant[0]);
        const double g0 = k[n - 2] - k[n - 3], g1 = k[n - 1] - k[n - 2];
        d[n - 1] = std::clamp(secant[n - 2] + g1 * (secant[n - 2] - secant[n - 3]) / (g0 + g1),
                              secant[n - 2], 0.0);
    }

    ConvexSpline out;
    out.slope_left = d[0];
    out.slope_right = d[n - 1];
    const double eps = 1e-14;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double h = k[i + 1] - k[i];
        const double s1 = d[i], s2 = d[i + 1], del = secant[i];
        if (s2 - s1 < eps) continue; // locally linear, zero curvature
        // Knot split so the middle slope equals the secant; each piece has
        // constant curvature >= 0.
        const double alpha = h * (s2 - del) / (s2 - s1);
        const double beta = h - alpha;
        if (alpha < eps * h) {
            out.points.push_back({k[i], del - s1});
            if (beta > eps * h) out.segments.push_back({k[i], k[i + 1], (s2 - del) / beta});
        } else if (beta < eps * h) {
            if (alpha > eps * h) out.segments.push_back({k[i], k[i + 1], (del - s1) / alpha});
            out.points.push_back({k[i + 1], s2 - del});
        } else {
            out.segments.push_back({k[i], k[i] + alpha, (del - s1) / alpha});
            out.segments.push_back({k[i] + alpha, k[i + 1], (s2 - del) / beta});
        }
    }
    if (!out.segments.empty()) {
        if (std::abs(out.segments.front().lo - k.front()) < 1e-12 * (k.back() - k.front()))
            out.density_left = out.segments.front().density;
        if (std::abs(out.segments.back().hi - k.back()) < 1e-12 * (k.back() - k.front()))
            out.density_right = out.segments.back().density;
    }
    return out;
}

} // namespace

MarginalDensity density_from_calls(const CallQuoteSlice& slice, const Grid1D& grid) {
    slice.validate();
    const double k_lo = slice.strikes.front(), k_hi = slice.strikes.back();
    if (grid.lo > 0.5 * k_lo || grid.hi < 1.5 * k_hi) {
        std::ostringstream os;
        os << "density grid too narrow: need at least [" << 0.5 * k_lo << ", " << 1.5 * k_hi << "], got ["
           << grid.lo << ", " << grid.hi << "]";
        throw ValidationError("grid_too_narrow", os.str());
    }

    const ConvexSpline spline = build_convex_spline(slice.strikes, slice.prices);
    const double h = grid.spacing();
    std::vector<double> rho(grid.n, 0.0);

    // Piecewise-constant curvature -> cell-averaged nodal values.
    for (const auto& seg : spline.segments) {
        if (seg.density <= 0.0) continue;
        const std::size_t i0 = grid.cell(seg.lo), i1 = grid.cell(seg.hi) + 1;
        for (std::size_t i = i0; i <= i1 && i < grid.n; ++i) {
            const double a = grid.node(i) - 0.5 * h, b = grid.node(i) + 0.5 * h;
            const double ov = std::max(0.0, std::min(b, seg.hi) - std::max(a, seg.lo));
            rho[i] += seg.density * ov / h;
        }
    }
    // Point masses -> hat functions on the two nearest nodes.
    for (const auto& pm : spline.points) {
        if (pm.mass <= 0.0) continue;
        const std::size_t i = grid.cell(pm.at);
        const double w = (pm.at - grid.node(i)) / h;
        rho[i] += pm.mass * (1.0 - w) / h;
        rho[i + 1] += pm.mass * w / h;
    }
    // Exponential tails carrying the unquoted mass. Left mass is 1 + C'(K_1)
    // (slope in [-1, 0]); right mass is -C'(K_N). Each tail is rescaled so the
    // mass it deposits on the grid is exact, which keeps the final
    // renormalization a no-op and the quoted region undistorted.
    auto deposit_tail = [&](double mass, double anchor_density, double edge, bool left) {
        if (mass <= 0.0) return;
        const double span = left ? (edge - grid.lo) : (grid.hi - edge);
        double tau = std::min(mass / std::max(anchor_density, 1e-12), 0.25 * span);
        tau = std::max(tau, h);
        std::vector<double> tail(grid.n, 0.0);
        for (std::size_t i = 0; i < grid.n; ++i) {
            const double x = grid.node(i);
            const double dist = left ? (edge - x) : (x - edge);
            if (dist > 0.0) tail[i] = std::exp(-dist / tau);
        }
        std::vector<double> cells(grid.n - 1);
        for (std::size_t i = 0; i + 1 < grid.n; ++i) cells[i] = 0.5 * h * (tail[i] + tail[i + 1]);
        const double got = pairwise_sum(cells);
        if (got <= 0.0) return;
        const double scale = mass / got;
        for (std::size_t i = 0; i < grid.n; ++i) rho[i] += scale * tail[i];
    };
    deposit_tail(std::max(0.0, 1.0 + spline.slope_left), spline.density_left, k_lo, true);
    deposit_tail(std::max(0.0, -spline.slope_right), spline.density_right, k_hi, false);

    MarginalDensity density(grid, std::move(rho));

    // Repricing check against the input quotes.
    const double tol = 2e-3 * slice.spot;
    for (std::size_t i = 0; i < slice.strikes.size(); ++i) {
        const double model = density.call_price(slice.strikes[i]);
        if (std::abs(model - slice.prices[i]) > tol) {
            std::ostringstream os;
            os << "density reprice error " << std::abs(model - slice.prices[i]) << " at strike "
               << slice.strikes[i] << " exceeds tolerance " << tol;
            throw NumericalError("reprice_failure", os.str());
        }
    }
    return density;
}

std::vector<ConvexOrderViolation> validate_convex_order(const std::vector<MarginalDensity>& densities) {
    if (densities.size() < 2) return {};
    for (std::size_t i = 1; i < densities.size(); ++i)
        if (!(densities[i].grid == densities[0].grid))
            throw ValidationError("grid_mismatch", "validate_convex_order: densities must share one grid");

    std::vector<ConvexOrderViolation> out;
    const Grid1D& g = densities[0].grid;
    std::vector<std::vector<double>> calls(densities.size(), std::vector<double>(g.n));
    for (std::size_t s = 0; s < densities.size(); ++s)
        for (std::size_t i = 0; i < g.n; ++i) calls[s][i] = densities[s].call_price(g.node(i));
    for (std::size_t s = 0; s + 1 < densities.size(); ++s)
        for (std::size_t i = 0; i < g.n; ++i) {
            const double gap = calls[s][i] - calls[s + 1][i];
            if (gap > 1e-10) out.push_back({s, g.node(i), gap});
        }
    return out;
}

} // namespace bridgekit::market
