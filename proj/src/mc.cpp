#include "bridgekit/mc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "bridgekit/bridge.hpp"
#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"

namespace bridgekit::mc {

namespace {

constexpr double kVolFloor = 1e-8;

struct Schedule {
    // Fine times t_0 = 0 < ... < t_m, interval index per step, store flags.
    std::vector<double> times;
    std::vector<double> dts;                   // size m; exact per-interval step
    std::vector<std::size_t> interval_of_step; // size m
    std::vector<int> store_slot;               // size m + 1; -1 when not stored
    std::vector<std::size_t> delta_slab;       // size m; slab of the interval's delta field at the left point
};

Schedule build_schedule(const std::vector<SimInterval>& intervals, const std::vector<double>& store_times) {
    if (intervals.empty()) throw ValidationError("mc_schedule", "simulate: no intervals");
    Schedule sch;
    sch.times.push_back(intervals.front().t_start);
    if (std::abs(intervals.front().t_start) > 1e-12)
        throw ValidationError("mc_schedule", "simulate: schedule must start at 0");
    for (std::size_t q = 0; q < intervals.size(); ++q) {
        const auto& iv = intervals[q];
        if (!(iv.t_end > iv.t_start) || iv.steps == 0)
            throw ValidationError("mc_schedule", "simulate: bad interval");
        if (q > 0 && std::abs(iv.t_start - intervals[q - 1].t_end) > 1e-12)
            throw ValidationError("mc_schedule", "simulate: intervals must be contiguous");
        if (iv.fields.u) {
            const auto& ut = iv.fields.u->times;
            if (ut.size() != iv.steps + 1 || std::abs(ut.front() - iv.t_end) > 1e-9 ||
                std::abs(ut.back() - iv.t_start) > 1e-9)
                throw ValidationError("mc_schedule", "simulate: field slabs must match the interval steps");
        }
        const double dt = (iv.t_end - iv.t_start) / double(iv.steps);
        for (std::size_t k = 0; k < iv.steps; ++k) {
            sch.interval_of_step.push_back(q);
            sch.dts.push_back(dt);
            sch.delta_slab.push_back(iv.steps - k); // slab of the left point (descending slabs)
            sch.times.push_back(k + 1 == iv.steps ? iv.t_end : iv.t_start + double(k + 1) * dt);
        }
    }
    sch.store_slot.assign(sch.times.size(), -1);
    for (std::size_t s = 0; s < store_times.size(); ++s) {
        bool found = false;
        for (std::size_t k = 1; k < sch.times.size(); ++k)
            if (std::abs(sch.times[k] - store_times[s]) < 1e-9) {
                sch.store_slot[k] = int(s);
                found = true;
                break;
            }
        if (!found)
            throw ValidationError("mc_schedule", "simulate: store time does not lie on the fine schedule");
    }
    return sch;
}

struct PathScratch {
    std::size_t clamped = 0;
    std::size_t lookups = 0;
};

// Advances one path over the whole schedule, recording stored slots.
void run_one_path(std::size_t p, const NakedSvmSpec& svm, const std::vector<SimInterval>& intervals,
                  const Schedule& sch, const Philox& rng, PathEnsemble& out, PathScratch& scratch) {
    double s = svm.s0, a = svm.a0, vqv = 0.0, ito = 0.0, log_g = 0.0;
    // Running anchor for the weight recursion: u at the current interval start.
    std::size_t cur_interval = std::size_t(-1);
    double u_anchor = 0.0, ito_anchor = 0.0, lg_anchor = 0.0;

    auto field_lookup = [&](const pde::ValueSurface2D* u, std::size_t slab, double ss, double aa) {
        ++scratch.lookups;
        const double x = std::log(ss), y = std::log(aa);
        if (!u->x_grid.contains(x) || !u->y_grid.contains(y)) ++scratch.clamped;
        return u->slab_at(slab, ss, aa);
    };
    auto delta_lookup = [&](const pde::DeltaField* d, std::size_t slab, double ss, double aa) {
        ++scratch.lookups;
        const double x = std::log(ss), y = std::log(aa);
        if (!d->x_grid.contains(x) || !d->y_grid.contains(y)) ++scratch.clamped;
        return d->slab_at(slab, ss, aa);
    };

    const std::size_t m = sch.interval_of_step.size();
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t q = sch.interval_of_step[k];
        const auto& iv = intervals[q];
        if (q != cur_interval) {
            cur_interval = q;
            ito_anchor = ito;
            lg_anchor = log_g;
            u_anchor = iv.fields.u ? field_lookup(iv.fields.u, iv.fields.u->times.size() - 1, s, a) : 0.0;
        }
        const double dt = sch.dts[k];

        double delta_here = 0.0;
        if (iv.fields.delta) delta_here = delta_lookup(iv.fields.delta, sch.delta_slab[k], s, a);

        const double z1 = rng.normal(p, std::uint32_t(k), 0);
        const double z2 = rng.normal(p, std::uint32_t(k), 1);
        const double dw = std::sqrt(dt) * z1;
        const double dz = std::sqrt(dt) * (svm.rho * z1 + std::sqrt(1.0 - svm.rho * svm.rho) * z2);

        vqv += a * a * dt; // left-point quadratic variation
        const double s_new = s * std::exp(a * dw - 0.5 * a * a * dt);
        double a_new = a + svm.b(a) * dt + svm.sigma(a) * dz;
        if (a_new < kVolFloor) a_new = std::max(kVolFloor, 2.0 * kVolFloor - a_new);

        if (iv.fields.delta) ito += delta_here * (s_new - s);
        s = s_new;
        a = a_new;

        const int slot = sch.store_slot[k + 1];
        if (slot >= 0 || k + 1 == m || sch.interval_of_step[std::min(k + 1, m - 1)] != q) {
            if (iv.fields.u) {
                const std::size_t slab = sch.delta_slab[k] - 1; // slab of t1
                const double u_here = field_lookup(iv.fields.u, slab, s, a);
                log_g = lg_anchor + (u_anchor - u_here) - (ito - ito_anchor);
            }
        }
        if (slot >= 0) {
            out.s[slot][p] = s;
            out.a[slot][p] = a;
            out.v[slot][p] = vqv;
            out.ito[slot][p] = ito;
            out.log_g[slot][p] = log_g;
        }
    }
}

PathEnsemble simulate_impl(const NakedSvmSpec& svm, const std::vector<SimInterval>& intervals,
                           const std::vector<double>& store_times, std::size_t n, RngSpec spec,
                           bool parallel) {
    if (n < 2) throw ValidationError("mc_paths", "simulate: need at least 2 paths");
    const Schedule sch = build_schedule(intervals, store_times);
    const Philox rng(spec.seed);

    PathEnsemble out;
    out.times = store_times;
    out.paths = n;
    out.s0 = svm.s0;
    out.a0 = svm.a0;
    out.s.assign(store_times.size(), std::vector<double>(n));
    out.a.assign(store_times.size(), std::vector<double>(n));
    out.v.assign(store_times.size(), std::vector<double>(n));
    out.ito.assign(store_times.size(), std::vector<double>(n));
    out.log_g.assign(store_times.size(), std::vector<double>(n));

    std::vector<PathScratch> scratch(n);
    if (parallel) {
#pragma omp parallel for schedule(static)
        for (long long p = 0; p < (long long)n; ++p)
            run_one_path(std::size_t(p), svm, intervals, sch, rng, out, scratch[std::size_t(p)]);
    } else {
        for (std::size_t p = 0; p < n; ++p) run_one_path(p, svm, intervals, sch, rng, out, scratch[p]);
    }
    std::size_t clamped = 0, lookups = 0;
    for (const auto& sc : scratch) {
        clamped += sc.clamped;
        lookups += sc.lookups;
    }
    out.clamp_fraction = lookups ? double(clamped) / double(lookups) : 0.0;
    return out;
}

} // namespace

std::size_t PathEnsemble::time_index(double t) const {
    for (std::size_t i = 0; i < times.size(); ++i)
        if (std::abs(times[i] - t) < 1e-9) return i;
    throw ValidationError("mc_time", "PathEnsemble: time not stored");
}

PathEnsemble simulate_weighted_paths(const NakedSvmSpec& svm, const std::vector<SimInterval>& intervals,
                                     const std::vector<double>& store_times, std::size_t n, RngSpec rng) {
    return simulate_impl(svm, intervals, store_times, n, rng, true);
}

PathEnsemble simulate_p0_paths(const NakedSvmSpec& svm, const std::vector<double>& store_times,
                               std::size_t steps_per_interval, std::size_t n, RngSpec rng) {
    std::vector<SimInterval> intervals;
    double prev = 0.0;
    for (double t : store_times) {
        intervals.push_back({prev, t, steps_per_interval, {}});
        prev = t;
    }
    return simulate_impl(svm, intervals, store_times, n, rng, true);
}

namespace ref {

PathEnsemble simulate_weighted_paths(const NakedSvmSpec& svm, const std::vector<SimInterval>& intervals,
                                     const std::vector<double>& store_times, std::size_t n, RngSpec rng) {
    return simulate_impl(svm, intervals, store_times, n, rng, false);
}

double naive_mean(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / double(x.size());
}

} // namespace ref

PriceResult girsanov_price(const std::vector<double>& payoff, const std::vector<double>& log_weights) {
    const std::size_t n = payoff.size();
    if (n != log_weights.size() || n < 2)
        throw ValidationError("mc_price", "girsanov_price: payoff/weights size mismatch");
    const double shift = *std::max_element(log_weights.begin(), log_weights.end());
    std::vector<double> w(n), wf(n);
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = std::exp(log_weights[i] - shift);
        wf[i] = w[i] * payoff[i];
    }
    const double sw = pairwise_sum(w);
    const double price = pairwise_sum(wf) / sw;
    std::vector<double> w2(n), dev(n);
    for (std::size_t i = 0; i < n; ++i) {
        w2[i] = w[i] * w[i];
        const double d = w[i] * (payoff[i] - price);
        dev[i] = d * d;
    }
    const double ess = sw * sw / pairwise_sum(w2);
    if (ess < 0.01 * double(n)) {
        std::ostringstream os;
        os << "effective sample size " << ess << " below 1% of " << n
           << " paths; increase the path count or tighten the prior";
        throw NumericalError("ess_too_small", os.str());
    }
    PriceResult r;
    r.price = price;
    r.std_error = std::sqrt(pairwise_sum(dev)) / sw;
    r.ess = ess;
    return r;
}

double girsanov_difference_stderr(const std::vector<double>& payoff_a, const std::vector<double>& logw_a,
                                  const std::vector<double>& payoff_b, const std::vector<double>& logw_b) {
    const std::size_t n = payoff_a.size();
    const double sa = *std::max_element(logw_a.begin(), logw_a.end());
    const double sb = *std::max_element(logw_b.begin(), logw_b.end());
    std::vector<double> wa(n), wb(n);
    for (std::size_t i = 0; i < n; ++i) {
        wa[i] = std::exp(logw_a[i] - sa);
        wb[i] = std::exp(logw_b[i] - sb);
    }
    std::vector<double> tmp(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = wa[i];
    const double swa = pairwise_sum(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = wb[i];
    const double swb = pairwise_sum(tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = wa[i] * payoff_a[i];
    const double ra = pairwise_sum(tmp) / swa;
    for (std::size_t i = 0; i < n; ++i) tmp[i] = wb[i] * payoff_b[i];
    const double rb = pairwise_sum(tmp) / swb;
    for (std::size_t i = 0; i < n; ++i) {
        const double infl = wb[i] * (payoff_b[i] - rb) / swb - wa[i] * (payoff_a[i] - ra) / swa;
        tmp[i] = infl * infl;
    }
    return std::sqrt(pairwise_sum(tmp));
}

double DriftGrid1D::eval(std::size_t step, double xq, std::size_t* clamped) const {
    if (clamped && (xq < x.lo || xq > x.hi)) ++(*clamped);
    return interp_linear(x, values[step], xq);
}

DriftGrid1D build_bridge_drift_grid(const MarginalDensity& mu, double horizon, double x0, std::size_t steps,
                                    const Grid1D& x_grid) {
    DriftGrid1D out;
    out.dt = horizon / double(steps);
    out.x = x_grid;
    out.times.resize(steps);
    for (std::size_t k = 0; k < steps; ++k) out.times[k] = double(k) * out.dt;
    out.values.assign(steps, std::vector<double>(x_grid.n));
#pragma omp parallel for schedule(static)
    for (long long k = 0; k < (long long)steps; ++k) {
        const double t = out.times[std::size_t(k)];
        const double tau = horizon - t;
        for (std::size_t i = 0; i < x_grid.n; ++i) {
            const double xq = x_grid.node(i);
            try {
                out.values[std::size_t(k)][i] = bridge::one_marginal_drift(t, xq, mu, horizon, x0);
            } catch (const NumericalError&) {
                // Quadrature underflow far from the support: the weights
                // degenerate onto the dominant node, whose pull is the limit.
                double best = -std::numeric_limits<double>::infinity();
                double ybest = x0;
                for (std::size_t j = 0; j < mu.grid.n; ++j) {
                    if (mu.mass[j] <= 0.0) continue;
                    const double y = mu.grid.node(j);
                    const double lw = std::log(mu.mass[j]) + (y - x0) * (y - x0) / (2.0 * horizon) -
                                      (y - xq) * (y - xq) / (2.0 * tau);
                    if (lw > best) {
                        best = lw;
                        ybest = y;
                    }
                }
                out.values[std::size_t(k)][i] = (ybest - xq) / tau;
            }
        }
    }
    return out;
}

EulerResult euler_bridge_paths(const DriftGrid1D& drift, double x_start, std::size_t n, RngSpec spec) {
    const std::size_t steps = drift.times.size();
    const double dt = drift.dt;
    Philox rng(spec.seed);
    EulerResult out;
    out.terminal.assign(n, 0.0);
    std::vector<std::size_t> clamps(n, 0);
#pragma omp parallel for schedule(static)
    for (long long p = 0; p < (long long)n; ++p) {
        double xp = x_start;
        std::size_t cl = 0;
        for (std::size_t k = 0; k < steps; ++k) {
            const double d = drift.eval(k, xp, &cl);
            xp += d * dt + std::sqrt(dt) * rng.normal(std::uint64_t(p), std::uint32_t(k), 0);
        }
        out.terminal[std::size_t(p)] = xp;
        clamps[std::size_t(p)] = cl;
    }
    std::size_t total = 0;
    for (auto c : clamps) total += c;
    out.clamp_fraction = double(total) / double(n * steps);
    return out;
}

SvmEulerResult euler_svm_paths(const NakedSvmSpec& svm,
                               const std::function<double(double, double, double)>& vol_drift, double horizon,
                               std::size_t steps, std::size_t n, RngSpec spec) {
    Philox rng(spec.seed);
    const double dt = horizon / double(steps);
    SvmEulerResult out;
    out.s_terminal.assign(n, 0.0);
    out.a_terminal.assign(n, 0.0);
#pragma omp parallel for schedule(static)
    for (long long p = 0; p < (long long)n; ++p) {
        double s = svm.s0, a = svm.a0;
        for (std::size_t k = 0; k < steps; ++k) {
            const double t = double(k) * dt;
            const double z1 = rng.normal(std::uint64_t(p), std::uint32_t(k), 0);
            const double z2 = rng.normal(std::uint64_t(p), std::uint32_t(k), 1);
            const double dw = std::sqrt(dt) * z1;
            const double dz = std::sqrt(dt) * (svm.rho * z1 + std::sqrt(1.0 - svm.rho * svm.rho) * z2);
            const double lam = vol_drift(t, s, a);
            const double s_new = s * std::exp(a * dw - 0.5 * a * a * dt);
            double a_new = a + (svm.b(a) + lam) * dt + svm.sigma(a) * dz;
            if (a_new < kVolFloor) a_new = std::max(kVolFloor, 2.0 * kVolFloor - a_new);
            s = s_new;
            a = a_new;
        }
        out.s_terminal[std::size_t(p)] = s;
        out.a_terminal[std::size_t(p)] = a;
    }
    return out;
}

BinnedConditional conditional_expectation_by_bins(const std::vector<double>& keys,
                                                  const std::vector<double>& values, std::size_t bins) {
    const std::size_t n = keys.size();
    if (n != values.size() || n == 0)
        throw ValidationError("mc_bins", "conditional_expectation_by_bins: size mismatch");
    if (bins == 0) bins = 1;
    if (n / bins < 10) bins = std::max<std::size_t>(1, n / 10);

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return keys[a] < keys[b] || (keys[a] == keys[b] && a < b);
    });

    BinnedConditional out;
    if (keys[idx.front()] == keys[idx.back()]) {
        out.degenerate = true;
        bins = 1;
    }
    out.edges.resize(bins + 1);
    out.means.assign(bins, 0.0);
    out.counts.assign(bins, 0);
    for (std::size_t b = 0; b <= bins; ++b) {
        const std::size_t pos = std::min(n - 1, b * n / bins);
        out.edges[b] = keys[idx[b == bins ? n - 1 : pos]];
    }
    std::size_t start = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        const std::size_t stop = (b + 1 == bins) ? n : std::min(n, (b + 1) * n / bins);
        double acc = 0.0;
        for (std::size_t k = start; k < stop; ++k) acc += values[idx[k]];
        out.counts[b] = stop - start;
        out.means[b] = out.counts[b] ? acc / double(out.counts[b]) : 0.0;
        start = stop;
    }
    return out;
}

double BinnedConditional::eval(double key) const {
    if (means.size() == 1) return means[0];
    std::size_t lo = 0, hi = means.size() - 1;
    while (lo < hi) {
        const std::size_t mid = (lo + hi + 1) / 2;
        if (key >= edges[mid]) lo = mid; else hi = mid - 1;
    }
    return means[lo];
}

WeightedTerminal brownian_girsanov_terminal(const MarginalDensity& mu, double horizon, double x0,
                                            std::size_t n, RngSpec spec) {
    Philox rng(spec.seed);
    WeightedTerminal out;
    out.x.assign(n, 0.0);
    out.log_w.assign(n, 0.0);
#pragma omp parallel for schedule(static)
    for (long long p = 0; p < (long long)n; ++p) {
        const double wt = x0 + std::sqrt(horizon) * rng.normal(std::uint64_t(p), 0, 0);
        const double d = mu.value(wt);
        out.x[std::size_t(p)] = wt;
        out.log_w[std::size_t(p)] =
            (d > 0.0 ? std::log(d) : -1e9) + (wt - x0) * (wt - x0) / (2.0 * horizon);
    }
    return out;
}

std::vector<SmilePoint> smile_from_sample(const std::vector<double>& terminal,
                                          const std::vector<double>& log_weights,
                                          const std::vector<double>& strikes, double forward,
                                          double maturity) {
    std::vector<SmilePoint> out;
    std::vector<double> payoff(terminal.size());
    for (double k : strikes) {
        const bool use_put = k < forward;
        for (std::size_t i = 0; i < terminal.size(); ++i)
            payoff[i] = use_put ? std::max(k - terminal[i], 0.0) : std::max(terminal[i] - k, 0.0);
        const auto pr = girsanov_price(payoff, log_weights);
        SmilePoint pt;
        pt.strike = k;
        pt.price = use_put ? pr.price + forward - k : pr.price; // parity at the model forward
        pt.std_error = pr.std_error;
        try {
            pt.implied_vol = market::implied_vol(pt.price, k, forward, maturity);
        } catch (const std::exception&) {
            pt.implied_vol = std::numeric_limits<double>::quiet_NaN();
        }
        out.push_back(pt);
    }
    return out;
}

} // namespace bridgekit::mc
