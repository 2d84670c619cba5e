#include "bridgekit/martingale.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"

namespace bridgekit::martingale {

namespace {

std::vector<double> target_call_prices(const MarginalDensity& mu, const std::vector<double>& strikes) {
    std::vector<double> c(strikes.size());
    for (std::size_t i = 0; i < strikes.size(); ++i) c[i] = mu.call_price(strikes[i]);
    return c;
}

double cloud_average(const PriorCloud& cloud, const pde::ValueSurface2D& u) {
    const std::size_t last = u.times.size() - 1;
    std::vector<double> terms(cloud.s.size());
    for (std::size_t j = 0; j < cloud.s.size(); ++j)
        terms[j] = cloud.w[j] * u.slab_at(last, cloud.s[j], cloud.a[j]);
    return pairwise_sum(terms);
}

double cloud_average_slab(const PriorCloud& cloud, const std::vector<double>& slab, const pde::SvmGrids& g) {
    std::vector<double> terms(cloud.s.size());
    const std::size_t ny = g.y.n;
    for (std::size_t j = 0; j < cloud.s.size(); ++j) {
        const double x = std::log(std::max(cloud.s[j], 1e-300));
        const double y = std::log(std::max(cloud.a[j], 1e-300));
        const std::size_t i = g.x.cell(x), jj = g.y.cell(y);
        double wx = std::clamp((x - g.x.node(i)) / g.x.spacing(), 0.0, 1.0);
        double wy = std::clamp((y - g.y.node(jj)) / g.y.spacing(), 0.0, 1.0);
        const double v = (1 - wx) * ((1 - wy) * slab[i * ny + jj] + wy * slab[i * ny + jj + 1]) +
                         wx * ((1 - wy) * slab[(i + 1) * ny + jj] + wy * slab[(i + 1) * ny + jj + 1]);
        terms[j] = cloud.w[j] * v;
    }
    return pairwise_sum(terms);
}

} // namespace

double CalibratedSlice::f_at(double s) const {
    if (uses_grid_potential) {
        if (s <= grid_potential.grid.lo) return grid_potential.values.front();
        if (s >= grid_potential.grid.hi) {
            // continue the last linear piece
            const auto& g = grid_potential.grid;
            const auto& v = grid_potential.values;
            const double slope = (v[g.n - 1] - v[g.n - 2]) / g.spacing();
            return v[g.n - 1] + slope * (s - g.hi);
        }
        return interp_linear(grid_potential.grid, grid_potential.values, s);
    }
    return weights(s);
}

DualEval dual_objective_and_gradient(const PotentialWeights& weights, const MarginalDensity& mu,
                                     const NakedSvmSpec& svm, double t_start, double t_end,
                                     const PriorCloud& cloud, const CalibrateOptions& opts,
                                     const pde::SvmGrids& grids, bool want_gradient) {
    if (cloud.s.empty()) throw ValidationError("cal_cloud", "dual objective: empty prior cloud");
    const auto target = target_call_prices(mu, weights.strikes);

    DualEval out;
    out.u = pde::solve_svm_semilinear_2d([&](double s) { return weights(s); }, svm, t_start, t_end, grids,
                                         opts.scheme);
    double e_mu_f = 0.0;
    for (std::size_t i = 0; i < weights.strikes.size(); ++i) e_mu_f += weights.weights[i] * target[i];
    out.value = -e_mu_f + cloud_average(cloud, out.u);
    if (!std::isfinite(out.value))
        throw NumericalError("cal_objective", "dual objective is not finite");

    if (want_gradient) {
        out.gradient.assign(weights.strikes.size(), 0.0);
        const auto nstrikes = (long long)weights.strikes.size();
#pragma omp parallel for schedule(dynamic)
        for (long long q = 0; q < nstrikes; ++q) {
            const double k = weights.strikes[std::size_t(q)];
            auto slab = pde::sensitivity_start_slab(
                out.u, [k](double s) { return std::max(s - k, 0.0); }, svm, opts.scheme);
            out.gradient[std::size_t(q)] = -target[std::size_t(q)] + cloud_average_slab(cloud, slab, grids);
        }
    }
    return out;
}

namespace {

std::vector<double> default_strikes(double s0) {
    std::vector<double> strikes;
    for (std::size_t k = 0; k < 20; ++k) strikes.push_back((0.6 + 0.8 * double(k) / 19.0) * s0);
    return strikes;
}

} // namespace

namespace {

CalibratedSlice run_bfgs(const MarginalDensity& mu, const NakedSvmSpec& svm, double t_start, double t_end,
                         const PriorCloud& cloud, const CalibrateOptions& opts,
                         const std::vector<double>& strikes) {
    const pde::SvmGrids grids = pde::make_svm_grids(svm, t_end, opts.nx, opts.ny, opts.width_sigmas);
    const std::size_t dim = strikes.size();

    CalibratedSlice slice;
    slice.t_start = t_start;
    slice.t_end = t_end;
    slice.weights.strikes = strikes;
    slice.weights.weights.assign(dim, 0.0);

    std::vector<double> x(dim, 0.0);
    auto eval = [&](const std::vector<double>& w, bool grad) {
        PotentialWeights pw{strikes, w};
        return dual_objective_and_gradient(pw, mu, svm, t_start, t_end, cloud, opts, grids, grad);
    };

    DualEval cur = eval(x, true);
    std::vector<double> h(dim * dim, 0.0); // inverse Hessian of the minimized -value
    for (std::size_t i = 0; i < dim; ++i) h[i * dim + i] = 1.0;
    bool scaled = false;

    auto inf_norm = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double q : v) m = std::max(m, std::abs(q));
        return m;
    };

    slice.log.push_back({0, cur.value, inf_norm(cur.gradient)});
    std::size_t it = 0;
    for (; it < opts.max_iters; ++it) {
        const double gnorm = inf_norm(cur.gradient);
        if (gnorm < opts.grad_tol) {
            slice.converged = true;
            break;
        }
        // minimize F = -value: gF = -gradient; direction d = -H gF = H gradient
        std::vector<double> d(dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) d[i] += h[i * dim + j] * cur.gradient[j];
        double slope = 0.0; // dF/dalpha = -gradient . d
        for (std::size_t i = 0; i < dim; ++i) slope -= cur.gradient[i] * d[i];
        if (slope >= 0.0) {
            // reset to steepest ascent
            d = cur.gradient;
            slope = 0.0;
            for (std::size_t i = 0; i < dim; ++i) slope -= cur.gradient[i] * d[i];
            std::fill(h.begin(), h.end(), 0.0);
            for (std::size_t i = 0; i < dim; ++i) h[i * dim + i] = 1.0;
        }

        double alpha = 1.0;
        DualEval trial;
        bool accepted = false;
        std::vector<double> xt(dim);
        for (int ls = 0; ls < 30; ++ls) {
            for (std::size_t i = 0; i < dim; ++i) xt[i] = x[i] + alpha * d[i];
            trial = eval(xt, false);
            if (-trial.value <= -cur.value + 1e-4 * alpha * slope) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) break; // no ascent possible at machine resolution

        DualEval next = eval(xt, true);
        next.value = trial.value; // value from the same solve tolerance
        // BFGS update on the minimized function
        std::vector<double> s(dim), yv(dim);
        double sy = 0.0, yy = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            s[i] = xt[i] - x[i];
            yv[i] = -(next.gradient[i] - cur.gradient[i]);
            sy += s[i] * yv[i];
            yy += yv[i] * yv[i];
        }
        if (sy > 1e-14) {
            if (!scaled) {
                const double g0 = sy / yy;
                std::fill(h.begin(), h.end(), 0.0);
                for (std::size_t i = 0; i < dim; ++i) h[i * dim + i] = g0;
                scaled = true;
            }
            // H <- (I - r s y^T) H (I - r y s^T) + r s s^T
            const double r = 1.0 / sy;
            std::vector<double> hy(dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i)
                for (std::size_t j = 0; j < dim; ++j) hy[i] += h[i * dim + j] * yv[j];
            double yhy = 0.0;
            for (std::size_t i = 0; i < dim; ++i) yhy += yv[i] * hy[i];
            for (std::size_t i = 0; i < dim; ++i)
                for (std::size_t j = 0; j < dim; ++j)
                    h[i * dim + j] += -r * (hy[i] * s[j] + s[i] * hy[j]) + r * (1.0 + r * yhy) * s[i] * s[j];
        }
        x = xt;
        cur = std::move(next);
        slice.log.push_back({it + 1, cur.value, inf_norm(cur.gradient)});
    }

    slice.weights.weights = x;
    slice.dual_value = cur.value;
    slice.gradient_norm = inf_norm(cur.gradient);
    if (slice.gradient_norm < opts.grad_tol) slice.converged = true;
    slice.u = std::move(cur.u);
    slice.delta = pde::delta_field(slice.u, svm);
    return slice;
}

} // namespace

CalibratedSlice calibrate_slice(const MarginalDensity& mu, const NakedSvmSpec& svm, double t_start,
                                double t_end, const PriorCloud& cloud, const CalibrateOptions& opts) {
    const double mean = mu.mean();
    if (std::abs(mean - svm.s0) > opts.mean_tol * svm.s0) {
        std::ostringstream os;
        os << "target mean " << mean << " deviates from the forward " << svm.s0
           << " beyond tolerance; martingale calibration is infeasible";
        throw ValidationError("martingale_infeasible", os.str());
    }
    return run_bfgs(mu, svm, t_start, t_end, cloud, opts,
                    opts.strikes.empty() ? default_strikes(svm.s0) : opts.strikes);
}

TermStructureCalibration calibrate_term_structure(const std::vector<MarginalDensity>& targets,
                                                  const NakedSvmSpec& svm, const TimeGrid& time_grid,
                                                  const McOptions& mc_opts, const CalibrateOptions& opts,
                                                  const std::vector<double>& extra_store_times) {
    if (targets.size() != time_grid.maturities.size())
        throw ValidationError("cal_targets", "calibrate_term_structure: one target per maturity required");
    // Convex-order precheck, ignoring reconstruction-level noise.
    auto violations = market::validate_convex_order(targets);
    for (const auto& v : violations)
        if (v.gap > 1e-6 * svm.s0) {
            std::ostringstream os;
            os << "targets are not increasing in convex order: slice " << v.slice_index << " at strike "
               << v.strike << " (gap " << v.gap << ")";
            throw ValidationError("convex_order", os.str());
        }

    TermStructureCalibration out;
    out.converged = true;

    std::vector<double> store = time_grid.maturities;
    for (double t : extra_store_times) store.push_back(t);
    std::sort(store.begin(), store.end());
    store.erase(std::unique(store.begin(), store.end(),
                            [](double a, double b) { return std::abs(a - b) < 1e-12; }),
                store.end());

    std::vector<mc::SimInterval> intervals;
    PriorCloud cloud = PriorCloud::point(svm.s0, svm.a0);
    double prev_t = 0.0;
    for (std::size_t q = 0; q < targets.size(); ++q) {
        const double t_i = time_grid.maturities[q];
        const auto& mu = targets[q];
        auto slice = calibrate_slice(mu, svm, prev_t, t_i, cloud, opts);
        out.converged = out.converged && slice.converged;
        out.slices.push_back(std::move(slice));

        intervals.push_back({prev_t, t_i, mc_opts.steps_per_interval,
                             {&out.slices.back().u, &out.slices.back().delta}});
        // Re-simulate from 0 with all calibrated intervals to get the cloud at t_i.
        std::vector<double> upto;
        for (double t : store)
            if (t <= t_i + 1e-12) upto.push_back(t);
        auto ens = mc::simulate_weighted_paths(svm, intervals, upto, mc_opts.paths, {mc_opts.seed});
        const std::size_t ti_idx = ens.time_index(t_i);
        cloud.s = ens.s[ti_idx];
        cloud.a = ens.a[ti_idx];
        cloud.w.assign(ens.paths, 0.0);
        const double shift = *std::max_element(ens.log_g[ti_idx].begin(), ens.log_g[ti_idx].end());
        for (std::size_t p = 0; p < ens.paths; ++p) cloud.w[p] = std::exp(ens.log_g[ti_idx][p] - shift);
        const double sw = pairwise_sum(cloud.w);
        std::vector<double> w2(ens.paths);
        for (std::size_t p = 0; p < ens.paths; ++p) {
            cloud.w[p] /= sw;
            w2[p] = cloud.w[p] * cloud.w[p];
        }
        const double ess = 1.0 / pairwise_sum(w2);
        if (ess < 0.05 * double(ens.paths)) out.weights_degenerate = true;
        if (q + 1 == targets.size()) out.ensemble = std::move(ens);
        prev_t = t_i;
    }
    return out;
}

CalibratedSlice fixed_point_calibration(const MarginalDensity& mu, const NakedSvmSpec& svm, double t_start,
                                        double t_end, const FixedPointOptions& opts) {
    const double mean = mu.mean();
    if (std::abs(mean - svm.s0) > opts.pde.mean_tol * svm.s0)
        throw ValidationError("martingale_infeasible",
                              "fixed_point_calibration: target mean is off the forward");

    const pde::SvmGrids grids = pde::make_svm_grids(svm, t_end, opts.pde.nx, opts.pde.ny,
                                                    opts.pde.width_sigmas);

    // Prior sample of S at the maturity (plus the hedge integral under the
    // current field, regenerated with the same seed each sweep).
    auto simulate = [&](const pde::DeltaField* field) {
        std::vector<mc::SimInterval> iv = {{t_start, t_end, opts.mc.steps_per_interval, {nullptr, field}}};
        return mc::simulate_weighted_paths(svm, iv, {t_end}, opts.mc.paths, {opts.mc.seed});
    };
    auto prior = simulate(nullptr);
    const auto& s_t1 = prior.s[0];

    // Equal-mass bins on the terminal spot; bin density estimates the prior
    // law of S at the maturity.
    auto bins = mc::conditional_expectation_by_bins(s_t1, std::vector<double>(s_t1.size(), 1.0), opts.bins);
    const std::size_t nb = bins.means.size();
    std::vector<double> centers(nb), dens(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        centers[b] = 0.5 * (bins.edges[b] + bins.edges[b + 1]);
        const double width = std::max(bins.edges[b + 1] - bins.edges[b], 1e-12);
        dens[b] = double(bins.counts[b]) / (double(s_t1.size()) * width);
    }

    auto gauge = [](std::vector<double>& f) {
        const double m = *std::min_element(f.begin(), f.end());
        for (double& v : f) v -= m;
        return m;
    };

    // f^(0): exp(-f) = Z mu / prior density.
    std::vector<double> f(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const double m = std::max(mu.value(centers[b]), 1e-12);
        f[b] = -std::log(m / std::max(dens[b], 1e-12));
    }
    gauge(f);

    auto f_interp = [&](const std::vector<double>& fb, double s) {
        if (s <= centers.front()) return fb.front();
        if (s >= centers.back()) {
            const double slope = (fb[nb - 1] - fb[nb - 2]) / (centers[nb - 1] - centers[nb - 2]);
            return fb[nb - 1] + slope * (s - centers.back());
        }
        const auto it = std::upper_bound(centers.begin(), centers.end(), s);
        const std::size_t j = std::size_t(it - centers.begin()) - 1;
        const double w = (s - centers[j]) / (centers[j + 1] - centers[j]);
        return (1.0 - w) * fb[j] + w * fb[j + 1];
    };

    CalibratedSlice slice;
    slice.t_start = t_start;
    slice.t_end = t_end;
    slice.uses_grid_potential = true;

    pde::SchemeParams sp = opts.pde.scheme;
    sp.time_steps = opts.mc.steps_per_interval; // fields must match the simulation schedule

    pde::ValueSurface2D u_surface;
    pde::DeltaField delta;
    bool have_delta = false;
    double prev_change = std::numeric_limits<double>::infinity();
    bool damped = false;
    std::size_t sweep = 0;
    for (; sweep < opts.max_sweeps; ++sweep) {
        // Linear solve for the conditional-expectation factor under the
        // current hedge field, then refresh the field from -ln U.
        auto fsnap = f;
        auto U = pde::solve_hedged_expectation_2d(
            [&](double s) { return std::exp(-f_interp(fsnap, s)); }, have_delta ? &delta : nullptr, svm,
            t_start, t_end, grids, sp);
        u_surface = U;
        for (auto& slab : u_surface.values)
            for (double& v : slab) v = -std::log(std::max(v, 1e-300));
        delta = pde::delta_field(u_surface, svm);
        have_delta = true;

        // Binned conditional expectation of exp(-hedge integral) given S.
        auto ens = simulate(&delta);
        std::vector<double> eh(ens.paths);
        for (std::size_t p = 0; p < ens.paths; ++p) eh[p] = std::exp(-ens.ito[0][p]);
        auto cond = mc::conditional_expectation_by_bins(ens.s[0], eh, opts.bins);

        std::vector<double> f_new(nb);
        for (std::size_t b = 0; b < nb; ++b) {
            const double m = std::max(mu.value(centers[b]), 1e-12);
            const double h = std::max(cond.eval(centers[b]), 1e-12);
            f_new[b] = -std::log(m / (std::max(dens[b], 1e-12) * h));
        }
        gauge(f_new);

        double change = 0.0;
        for (std::size_t b = 0; b < nb; ++b) change = std::max(change, std::abs(f_new[b] - f[b]));
        if (change > prev_change) {
            // oscillation: engage geometric damping
            for (std::size_t b = 0; b < nb; ++b) f_new[b] = 0.5 * (f_new[b] + f[b]);
            gauge(f_new);
            change = 0.0;
            for (std::size_t b = 0; b < nb; ++b) change = std::max(change, std::abs(f_new[b] - f[b]));
            if (damped && change > prev_change) {
                f = f_new;
                break; // still diverging after damping: flag below
            }
            damped = true;
        }
        f = f_new;
        slice.log.push_back({sweep, 0.0, change});
        prev_change = change;
        if (change < opts.tol) {
            slice.converged = true;
            break;
        }
    }

    // Package the potential on a uniform grid for interpolation-based use.
    Grid1D pgrid(centers.front(), centers.back(), 401);
    slice.grid_potential.grid = pgrid;
    slice.grid_potential.values.resize(pgrid.n);
    for (std::size_t i = 0; i < pgrid.n; ++i) slice.grid_potential.values[i] = f_interp(f, pgrid.node(i));
    slice.grid_potential.log_z = 0.0;
    slice.gradient_norm = prev_change;
    slice.u = std::move(u_surface);
    slice.delta = std::move(delta);
    return slice;
}

double drift_value(double t, double s, double a, const CalibratedSlice& slice, const NakedSvmSpec& svm) {
    if (t < slice.t_start - 1e-12 || t > slice.t_end + 1e-12)
        throw ValidationError("drift_time", "drift_value: time outside the slice interval");
    const double x = std::log(std::max(s, 1e-300)), y = std::log(std::max(a, 1e-300));
    if (!slice.u.x_grid.contains(x) || !slice.u.y_grid.contains(y))
        throw ValidationError("drift_grid", "drift_value: point outside the stored grids");
    const double hy = slice.u.y_grid.spacing();
    const double up = slice.u.at(t, s, a * std::exp(hy));
    const double dn = slice.u.at(t, s, a * std::exp(-hy));
    const double du_da = (up - dn) / (2.0 * hy * a);
    const double sig = svm.sigma(a);
    return (1.0 - svm.rho * svm.rho) * sig * sig * (-du_da);
}

} // namespace bridgekit::martingale
