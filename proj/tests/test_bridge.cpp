#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "bridgekit/bridge.hpp"
#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"
#include "bridgekit/rng.hpp"

using namespace bridgekit;
using namespace bridgekit::bridge;
using market::MarginalDensity;

namespace {

double trapz_weight(const Grid1D& g, std::size_t i) {
    return (i == 0 || i == g.n - 1) ? 0.5 * g.spacing() : g.spacing();
}

// Log-domain quadrature denominator of the one-marginal drift, used for the
// finite-difference consistency property.
double log_denominator(double t, double x, const MarginalDensity& mu, double T, double x0) {
    std::vector<double> lw(mu.grid.n);
    for (std::size_t i = 0; i < mu.grid.n; ++i) {
        const double y = mu.grid.node(i);
        const double lm = mu.mass[i] > 0 ? std::log(mu.mass[i]) : -1e9;
        lw[i] = std::log(trapz_weight(mu.grid, i)) + lm + (y - x0) * (y - x0) / (2.0 * T) -
                (y - x) * (y - x) / (2.0 * (T - t));
    }
    return log_sum_exp(lw);
}

} // namespace

TEST_CASE("one-marginal potential") {
    SUBCASE("prior-consistent Gaussian marginal gives a flat potential") {
        auto mu = MarginalDensity::gaussian(0.3, 1.0, 801);
        auto p = one_marginal_potential(mu, 1.0, 0.3);
        double lo = 1e300, hi = -1e300;
        for (double v : p.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(hi - lo < 1e-10);
    }
    SUBCASE("near-Dirac marginal reproduces the spike shape") {
        auto mu = MarginalDensity::dirac_like(1.0, 1e-3);
        auto p = one_marginal_potential(mu, 1.0, 1.0);
        // exp(-f) proportional to the spike: compare normalized shapes
        const double m0 = *std::max_element(mu.mass.begin(), mu.mass.end());
        double worst = 0.0;
        for (std::size_t i = 0; i < mu.grid.n; ++i)
            worst = std::max(worst, std::abs(std::exp(-p.values[i]) - mu.mass[i] / m0));
        CHECK(worst < 1e-6);
    }
    SUBCASE("lognormal marginal matches the direct nodewise evaluation") {
        auto mu = MarginalDensity::lognormal(1.0, 0.3, 1.0, 801);
        auto p = one_marginal_potential(mu, 1.0, 1.0);
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < mu.grid.n; ++i) {
            if (mu.mass[i] <= 0.0) continue;
            const double x = mu.grid.node(i);
            const double direct = -(std::log(mu.mass[i]) + (x - 1.0) * (x - 1.0) / 2.0);
            const double diff = p.values[i] - direct;
            lo = std::min(lo, diff);
            hi = std::max(hi, diff);
        }
        CHECK(hi - lo < 1e-10); // equal up to one additive constant
    }
    SUBCASE("tail overflow is rejected with grid advice") {
        auto mu = MarginalDensity::gaussian(0.0, 1.0, 801, 8.0);
        CHECK_THROWS_AS(one_marginal_potential(mu, 1e-5, 0.0), NumericalError);
    }
}

TEST_CASE("one-marginal drift") {
    SUBCASE("near-Dirac target reduces to the pinned-bridge drift") {
        auto mu = MarginalDensity::dirac_like(0.7, 1e-4);
        double worst = 0.0;
        for (double t : {0.0, 0.3, 0.6, 0.9})
            for (double x : {0.3, 0.7, 1.1})
                worst = std::max(worst, std::abs(one_marginal_drift(t, x, mu, 1.0, 0.7) -
                                                 brownian_bridge_drift(t, x, 1.0, 0.7)));
        CHECK(worst < 1e-6);
    }
    SUBCASE("prior-consistent Gaussian target has zero drift") {
        auto mu = MarginalDensity::gaussian(0.2, 1.0, 1201, 10.0);
        double worst = 0.0;
        for (double t : {0.1, 0.5})
            for (double x : {-0.4, 0.2, 0.9})
                worst = std::max(worst, std::abs(one_marginal_drift(t, x, mu, 1.0, 0.2)));
        CHECK(worst < 1e-6);
    }
    SUBCASE("matches the Monte-Carlo log-derivative for a lognormal target") {
        auto mu = MarginalDensity::lognormal(1.0, 0.3, 1.0, 1201);
        auto pot = one_marginal_potential(mu, 1.0, 1.0);
        const double t = 0.5, x = 1.1, tau = 0.5, h = 1e-3;
        const std::size_t n = 1000000, batches = 50;
        Philox rng(777);
        std::vector<double> est_p(batches, 0.0), est_m(batches, 0.0);
        const std::size_t per = n / batches;
        for (std::size_t b = 0; b < batches; ++b) {
            double sp = 0.0, sm = 0.0;
            for (std::size_t k = 0; k < per; ++k) {
                const double z = rng.normal(b * per + k, 0, 0);
                sp += std::exp(-pot.at(x + h + std::sqrt(tau) * z));
                sm += std::exp(-pot.at(x - h + std::sqrt(tau) * z));
            }
            est_p[b] = sp / double(per);
            est_m[b] = sm / double(per);
        }
        std::vector<double> fd(batches);
        for (std::size_t b = 0; b < batches; ++b) fd[b] = (std::log(est_p[b]) - std::log(est_m[b])) / (2.0 * h);
        const auto ms = mean_stderr(fd);
        const double drift = one_marginal_drift(t, x, mu, 1.0, 1.0);
        CHECK(std::abs(drift - ms.mean) < 3.0 * ms.stderr_);
    }
    SUBCASE("equals the finite-difference of the log quadrature denominator") {
        auto mu = MarginalDensity::lognormal(1.0, 0.3, 1.0, 1201);
        const double h = 1e-5;
        for (double t : {0.2, 0.7})
            for (double x : {0.8, 1.0, 1.3}) {
                const double fd =
                    (log_denominator(t, x + h, mu, 1.0, 1.0) - log_denominator(t, x - h, mu, 1.0, 1.0)) /
                    (2.0 * h);
                const double d = one_marginal_drift(t, x, mu, 1.0, 1.0);
                CHECK(std::abs(d - fd) / std::max(1.0, std::abs(fd)) < 1e-6);
            }
    }
    SUBCASE("preconditions") {
        auto mu = MarginalDensity::gaussian(0.0, 1.0);
        CHECK_THROWS_AS(one_marginal_drift(1.0, 0.0, mu, 1.0, 0.0), ValidationError);
    }
}

namespace {

// Dense matrix-scaling oracle on the shared grid; returns the normalized
// coupling matrix.
std::vector<double> dense_sinkhorn_coupling(const MarginalDensity& mu1, const MarginalDensity& mu2, double t1,
                                            double t2, double x0, std::size_t iters = 4000) {
    const Grid1D& g = mu1.grid;
    const std::size_t n = g.n;
    std::vector<double> q(n * n), p(n), r(n);
    double pm = 0.0, rm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = mu1.mass[i] * trapz_weight(g, i);
        r[i] = mu2.mass[i] * trapz_weight(g, i);
        pm += p[i];
        rm += r[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        p[i] /= pm;
        r[i] /= rm;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = g.node(i);
        const double pr = std::exp(-(xi - x0) * (xi - x0) / (2.0 * t1));
        for (std::size_t j = 0; j < n; ++j) {
            const double d = g.node(j) - xi;
            q[i * n + j] = pr * std::exp(-d * d / (2.0 * (t2 - t1))) * trapz_weight(g, i) * trapz_weight(g, j);
        }
    }
    std::vector<double> u(n, 1.0), v(n, 1.0), tmp(n);
    for (std::size_t it = 0; it < iters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += q[i * n + j] * v[j];
            u[i] = s > 0 ? p[i] / s : 0.0;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += q[i * n + j] * u[i];
            tmp[j] = s > 0 ? r[j] / s : 0.0;
        }
        double diff = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            diff = std::max(diff, std::abs(tmp[j] - v[j]) / std::max(1e-300, tmp[j]));
            v[j] = tmp[j];
        }
        if (diff < 1e-14 && it > 10) break;
    }
    std::vector<double> pi(n * n);
    double tot = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            pi[i * n + j] = u[i] * q[i * n + j] * v[j];
            tot += pi[i * n + j];
        }
    for (double& x : pi) x /= tot;
    return pi;
}

std::vector<double> state_coupling(const SinkhornState& st) {
    const Grid1D& g = st.f1.grid;
    const std::size_t n = g.n;
    std::vector<double> pi(n * n);
    double tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = g.node(i);
        const double pr = std::exp(-(xi - st.x0) * (xi - st.x0) / (2.0 * st.t1) - st.f1.values[i]) *
                          trapz_weight(g, i);
        for (std::size_t j = 0; j < n; ++j) {
            const double d = g.node(j) - xi;
            pi[i * n + j] = pr * std::exp(-d * d / (2.0 * (st.t2 - st.t1)) - st.f2.values[j]) *
                            trapz_weight(g, j);
            tot += pi[i * n + j];
        }
    }
    for (double& x : pi) x /= tot;
    return pi;
}

MarginalDensity spike_on(const Grid1D& g, double at, double width) {
    std::vector<double> v(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double z = (g.node(i) - at) / width;
        v[i] = std::exp(-0.5 * z * z);
    }
    return {g, std::move(v)};
}

} // namespace

TEST_CASE("alternating potential updates") {
    SUBCASE("prior-consistent Gaussian pair converges in one iteration") {
        Grid1D g(-8.0, 8.0, 801);
        auto gauss_on = [&](double var) {
            std::vector<double> v(g.n);
            for (std::size_t i = 0; i < g.n; ++i) {
                const double x = g.node(i);
                v[i] = std::exp(-0.5 * x * x / var);
            }
            return MarginalDensity(g, v);
        };
        auto mu1 = gauss_on(0.5), mu2 = gauss_on(1.0);
        auto st = sinkhorn_two_marginals(mu1, mu2, 0.5, 1.0, 0.0, 1e-10, 50);
        CHECK(st.converged);
        CHECK(st.iteration == 1);
        // Potentials are flat away from the kernel-truncation zone at the edges.
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < g.n; ++i) {
            if (std::abs(g.node(i)) > 4.0) continue;
            lo = std::min(lo, st.f1.values[i]);
            hi = std::max(hi, st.f1.values[i]);
        }
        CHECK(hi - lo < 1e-6);
    }
    SUBCASE("disjoint spikes match the dense matrix-scaling oracle") {
        Grid1D g(-0.5, 2.5, 301);
        auto mu1 = spike_on(g, 0.7, 0.02);
        auto mu2 = spike_on(g, 1.4, 0.02);
        auto st = sinkhorn_two_marginals(mu1, mu2, 0.5, 1.0, 1.0, 1e-12, 2000);
        CHECK(st.converged);
        auto oracle = dense_sinkhorn_coupling(mu1, mu2, 0.5, 1.0, 1.0);
        auto mine = state_coupling(st);
        double worst = 0.0;
        for (std::size_t k = 0; k < oracle.size(); ++k) worst = std::max(worst, std::abs(oracle[k] - mine[k]));
        CHECK(worst < 1e-8);
    }
    SUBCASE("lognormal pair: residual contracts at a settled linear rate") {
        auto mu1 = MarginalDensity::lognormal(1.0, 0.2, 0.5, 501);
        auto mu2 = MarginalDensity(mu1.grid, [&] {
            auto d = MarginalDensity::lognormal(1.0, 0.3, 1.0, 501);
            std::vector<double> v(mu1.grid.n);
            for (std::size_t i = 0; i < mu1.grid.n; ++i) v[i] = std::max(0.0, d.value(mu1.grid.node(i)));
            return v;
        }());
        auto st = sinkhorn_two_marginals(mu1, mu2, 0.5, 1.0, 1.0, 1e-9, 400);
        CHECK(st.converged);
        REQUIRE(st.residual_history.size() >= 4);
        for (std::size_t k = 1; k + 1 < st.residual_history.size(); ++k) {
            const double ratio = st.residual_history[k + 1] / std::max(1e-300, st.residual_history[k]);
            if (st.residual_history[k] > 1e-12) CHECK(ratio < 0.9);
        }
        // residual history is monotone nonincreasing
        for (std::size_t k = 1; k < st.residual_history.size(); ++k)
            CHECK(st.residual_history[k] <= st.residual_history[k - 1] * (1.0 + 1e-12));
    }
    SUBCASE("final potentials satisfy both marginal equations pointwise") {
        auto mu1 = MarginalDensity::gaussian(1.0, 0.06, 401);
        auto mu2 = MarginalDensity(mu1.grid, [&] {
            std::vector<double> v(mu1.grid.n);
            for (std::size_t i = 0; i < mu1.grid.n; ++i) {
                const double x = mu1.grid.node(i);
                v[i] = std::exp(-0.5 * (x - 1.0) * (x - 1.0) / 0.13);
            }
            return v;
        }());
        auto st = sinkhorn_two_marginals(mu1, mu2, 0.5, 1.0, 1.0, 1e-11, 1000);
        CHECK(st.converged);
        CHECK(st.residual < 1e-11);
    }
}

TEST_CASE("two-marginal drift") {
    auto mu1 = MarginalDensity::gaussian(0.0, 0.5, 601);
    auto mu2 = MarginalDensity(mu1.grid, [&] {
        std::vector<double> v(mu1.grid.n);
        for (std::size_t i = 0; i < mu1.grid.n; ++i) {
            const double x = mu1.grid.node(i);
            v[i] = std::exp(-x * x / 2.0);
        }
        return v;
    }());

    SUBCASE("constant potentials give zero drift") {
        auto st = sinkhorn_two_marginals(mu1, mu2, 0.5, 1.0, 0.0);
        for (double t : {0.1, 0.4, 0.6, 0.9})
            for (double x : {-0.5, 0.0, 0.5}) CHECK(std::abs(two_marginal_drift(t, x, st)) < 1e-6);
    }
    SUBCASE("just past t1 the drift equals the single-potential quadrature") {
        Grid1D g(-0.5, 2.5, 401);
        auto m1 = spike_on(g, 0.8, 0.05);
        auto m2 = spike_on(g, 1.2, 0.05);
        auto st = sinkhorn_two_marginals(m1, m2, 0.5, 1.0, 1.0, 1e-11, 2000);
        REQUIRE(st.converged);
        const double t = 0.5 + 1e-9, x = 0.9, tau = 1.0 - t;
        std::vector<double> lw(g.n);
        for (std::size_t j = 0; j < g.n; ++j) {
            const double d = g.node(j) - x;
            lw[j] = std::log(trapz_weight(g, j)) - d * d / (2.0 * tau) - st.f2.values[j];
        }
        const double m = *std::max_element(lw.begin(), lw.end());
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < g.n; ++j) {
            const double p = std::exp(lw[j] - m);
            den += p;
            num += p * (g.node(j) - x) / tau;
        }
        CHECK(two_marginal_drift(t, x, st) == doctest::Approx(num / den).epsilon(1e-9));
    }
    SUBCASE("double near-Dirac pins produce bridge drifts on each interval") {
        Grid1D g(-0.5, 1.5, 801);
        auto m1 = spike_on(g, 0.5, 0.004);
        auto m2 = spike_on(g, 0.5, 0.004);
        auto st = sinkhorn_two_marginals(m1, m2, 0.5, 1.0, 0.5, 1e-11, 3000);
        REQUIRE(st.converged);
        for (double t : {0.1, 0.3})
            for (double x : {0.3, 0.7})
                CHECK(two_marginal_drift(t, x, st) ==
                      doctest::Approx((0.5 - x) / (0.5 - t)).epsilon(5e-3));
        for (double t : {0.6, 0.8})
            for (double x : {0.3, 0.7})
                CHECK(two_marginal_drift(t, x, st) ==
                      doctest::Approx((0.5 - x) / (1.0 - t)).epsilon(5e-3));
    }
    SUBCASE("non-converged state is rejected") {
        auto st = sinkhorn_two_marginals(mu1, mu2, 0.5, 1.0, 0.0, 1e-30, 1);
        CHECK_FALSE(st.converged);
        CHECK_THROWS_AS(two_marginal_drift(0.2, 0.0, st), ValidationError);
    }
}

TEST_CASE("marginal-flow drift") {
    const double x0 = 0.0;

    SUBCASE("heat-flow marginals have zero drift") {
        const double v0 = 0.25;
        MarginalFlow flow;
        flow.grid = Grid1D(-6.0, 6.0, 1201);
        for (double t = 0.0; t <= 1.0 + 1e-9; t += 0.02) {
            flow.times.push_back(t);
            std::vector<double> row(flow.grid.n);
            for (std::size_t i = 0; i < flow.grid.n; ++i)
                row[i] = normal_cdf((flow.grid.node(i) - x0) / std::sqrt(v0 + t));
            flow.cdf.push_back(std::move(row));
        }
        double worst = 0.0;
        for (double t : {0.2, 0.5, 0.8})
            for (double x : {-0.8, 0.0, 0.5})
                worst = std::max(worst, std::abs(marginal_flow_drift(t, x, flow)));
        CHECK(worst < 1e-3);
    }
    SUBCASE("shrinking-variance flow matches its closed-form drift and its SDE reproduces the flow") {
        const double sig = 0.5;
        MarginalFlow flow;
        flow.grid = Grid1D(-4.0, 4.0, 1601);
        for (double t = 0.01; t <= 1.0 + 1e-9; t += 0.005) {
            flow.times.push_back(t);
            std::vector<double> row(flow.grid.n);
            for (std::size_t i = 0; i < flow.grid.n; ++i)
                row[i] = normal_cdf((flow.grid.node(i) - x0) / (sig * std::sqrt(t)));
            flow.cdf.push_back(std::move(row));
        }
        // closed form: (x - x0) (1 - 1/sig^2) / (2 t)
        for (double t : {0.2, 0.6})
            for (double x : {-0.3, 0.25}) {
                const double want = (x - x0) * (1.0 - 1.0 / (sig * sig)) / (2.0 * t);
                CHECK(marginal_flow_drift(t, x, flow) == doctest::Approx(want).epsilon(2e-2));
            }
        // Euler simulation from the exact t0 marginal reproduces the flow.
        Philox rng(31);
        const std::size_t n = 20000;
        const double t0 = 0.01, dt = 1e-3;
        std::vector<double> xs(n);
        for (std::size_t p = 0; p < n; ++p) xs[p] = x0 + sig * std::sqrt(t0) * rng.normal(p, 0, 0);
        double t = t0;
        std::uint32_t step = 1;
        std::vector<double> at_half;
        while (t < 1.0 - 1e-12) {
            for (std::size_t p = 0; p < n; ++p) {
                double x = xs[p];
                const double cap = 6.0 * sig * std::sqrt(t);
                x = std::clamp(x, x0 - cap, x0 + cap);
                const double d = marginal_flow_drift(t, x, flow);
                xs[p] += d * dt + std::sqrt(dt) * rng.normal(p, step, 0);
            }
            t += dt;
            ++step;
            if (std::abs(t - 0.5) < dt / 2) at_half = xs;
        }
        const double ks_half = ks_distance(at_half, [&](double x) { return normal_cdf((x - x0) / (sig * std::sqrt(0.5))); });
        const double ks_one = ks_distance(xs, [&](double x) { return normal_cdf((x - x0) / sig); });
        CHECK(ks_half < 0.02);
        CHECK(ks_one < 0.02);
    }
    SUBCASE("symmetric flow gives an antisymmetric drift") {
        MarginalFlow flow;
        flow.grid = Grid1D(-6.0, 6.0, 1201);
        for (double t = 0.0; t <= 1.0 + 1e-9; t += 0.02) {
            flow.times.push_back(t);
            std::vector<double> row(flow.grid.n);
            for (std::size_t i = 0; i < flow.grid.n; ++i)
                row[i] = normal_cdf(flow.grid.node(i) / std::sqrt(0.2 + 0.3 * t));
            flow.cdf.push_back(std::move(row));
        }
        for (double t : {0.3, 0.7})
            for (double x : {0.2, 0.9})
                CHECK(marginal_flow_drift(t, x, flow) ==
                      doctest::Approx(-marginal_flow_drift(t, -x, flow)).epsilon(1e-8));
    }
    SUBCASE("density floor breach is rejected naming the point") {
        MarginalFlow flow;
        flow.grid = Grid1D(-6.0, 6.0, 601);
        for (double t : {0.0, 0.5, 1.0}) {
            flow.times.push_back(t);
            std::vector<double> row(flow.grid.n);
            for (std::size_t i = 0; i < flow.grid.n; ++i)
                row[i] = normal_cdf((flow.grid.node(i)) / 0.05);
            flow.cdf.push_back(std::move(row));
        }
        CHECK_THROWS_AS(marginal_flow_drift(0.5, 5.5, flow), NumericalError);
    }
}

TEST_CASE("area-constrained bridge") {
    SUBCASE("prior-consistent area gives zero multiplier and the plain drift") {
        const double T = 1.0, x0 = 1.2;
        auto mu = MarginalDensity::gaussian(x0, T, 1201, 8.0);
        auto spec = area_bridge(mu, x0 * T, T, x0);
        CHECK(std::abs(spec.multiplier) < 1e-10);
        for (double t : {0.2, 0.6})
            for (double x : {0.9, 1.5})
                CHECK(area_bridge_drift(t, x, spec) ==
                      doctest::Approx(one_marginal_drift(t, x, mu, T, x0)).epsilon(1e-9));
    }
    SUBCASE("multiplier is exactly linear in the target area with slope -12/T^3") {
        const double T = 1.3, x0 = 0.7;
        auto mu = MarginalDensity::gaussian(1.0, 0.3, 801);
        auto s1 = area_bridge(mu, 0.9, T, x0);
        auto s2 = area_bridge(mu, 0.9 + 0.05, T, x0);
        CHECK(s2.multiplier - s1.multiplier == doctest::Approx(-12.0 * 0.05 / (T * T * T)).epsilon(1e-12));
    }
    SUBCASE("prior covariance of (W_T, area) matches the closed form") {
        // Monte-Carlo spot check of the covariance matrix used to derive the
        // exponent: [[T, T^2/2], [T^2/2, T^3/3]].
        const double T = 1.0;
        Philox rng(99);
        const std::size_t n = 200000, steps = 200;
        const double dt = T / double(steps);
        std::vector<double> wt(n), area(n);
        for (std::size_t p = 0; p < n; ++p) {
            double w = 0.0, a = 0.0;
            for (std::size_t k = 0; k < steps; ++k) {
                a += w * dt; // left-point rule
                w += std::sqrt(dt) * rng.normal(p, std::uint32_t(k), 0);
            }
            wt[p] = w;
            area[p] = a + 0.0;
        }
        auto mean = [&](const std::vector<double>& v) { return pairwise_sum(v) / double(n); };
        std::vector<double> ww(n), wa(n), aa(n);
        for (std::size_t p = 0; p < n; ++p) {
            ww[p] = wt[p] * wt[p];
            wa[p] = wt[p] * area[p];
            aa[p] = area[p] * area[p];
        }
        CHECK(mean(ww) == doctest::Approx(T).epsilon(0.02));
        CHECK(mean(wa) == doctest::Approx(T * T / 2.0).epsilon(0.03));
        CHECK(mean(aa) == doctest::Approx(T * T * T / 3.0).epsilon(0.03));
    }
}

TEST_CASE("quadratic-divergence bridge") {
    // Target on a state grid wide enough for the prior diffusion.
    Grid1D g(-4.0, 6.0, 601);
    auto mu = MarginalDensity(g, [&] {
        std::vector<double> v(g.n);
        for (std::size_t i = 0; i < g.n; ++i) {
            const double z = g.node(i) - 1.0;
            v[i] = std::exp(-0.5 * z * z / 0.2);
        }
        return v;
    }());
    auto st = chi2_bridge(mu, 1.0, 1.0);
    CHECK(st.converged);

    SUBCASE("terminal slab of the conditional-expectation surface is the potential") {
        CHECK(st.a_surface.values[0] == st.f1.values);
    }
    SUBCASE("drift scales exactly as 1/m") {
        for (double t : {0.2, 0.7})
            for (double x : {0.8, 1.1})
                CHECK(chi2_drift(t, x, 2.0, st) == doctest::Approx(chi2_drift(t, x, 1.0, st) / 2.0).epsilon(1e-12));
    }
    SUBCASE("joint simulation of (X, M) reproduces the target marginal") {
        auto sim = chi2_simulate(st, 1.0, 1.0, 50000, 500, 2024);
        CHECK(sim.floor_fraction < 0.01);
        CHECK(st.sample_m.size() == 50000);
        const double ks = ks_distance(sim.x_terminal, [&](double x) { return mu.cdf(x); });
        CHECK(ks < 0.015);
    }
}

TEST_CASE("factor pair") {
    SUBCASE("terminal backward factor equals exp(-f)") {
        auto mu = MarginalDensity::lognormal(1.0, 0.3, 1.0, 801);
        auto pot = one_marginal_potential(mu, 1.0, 1.0);
        auto pair = doob_factorization(pot, 1.0, 1.0);
        for (std::size_t i = 0; i < pot.grid.n; i += 50)
            CHECK(pair.psi[0][i] == doctest::Approx(std::exp(-pot.values[i])).epsilon(1e-12));
    }
    SUBCASE("flat potential: product is the prior transition density") {
        Grid1D g(-6.0, 6.0, 1201);
        Potential1D pot;
        pot.grid = g;
        pot.values.assign(g.n, 0.7);
        auto pair = doob_factorization(pot, 1.0, 0.0);
        // psi is constant, psi * psi_bar = Gaussian kernel
        for (std::size_t k : {std::size_t(40), std::size_t(200)}) {
            const double t = pair.times[k];
            for (double x : {-0.7, 0.0, 1.1}) {
                const std::size_t i = g.cell(x);
                const double got = pair.psi[k][i] * pair.psi_bar[k][i];
                const double want = std::exp(-g.node(i) * g.node(i) / (2.0 * t)) / std::sqrt(2.0 * kPi * t);
                CHECK(got == doctest::Approx(want).epsilon(5e-3));
            }
        }
    }
    SUBCASE("product is a unit-mass density on every slab") {
        // Gaussian target with variance below the horizon keeps exp(-f)
        // decaying at the grid edges.
        auto mu = MarginalDensity::gaussian(1.0, 0.25, 1601, 14.0);
        auto pot = one_marginal_potential(mu, 1.0, 1.0);
        auto pair = doob_factorization(pot, 1.0, 1.0);
        const double h = pot.grid.spacing();
        for (std::size_t k = 0; k < pair.times.size(); k += 37) {
            std::vector<double> cells(pot.grid.n - 1);
            for (std::size_t i = 0; i + 1 < pot.grid.n; ++i)
                cells[i] = 0.5 * h *
                           (pair.psi[k][i] * pair.psi_bar[k][i] + pair.psi[k][i + 1] * pair.psi_bar[k][i + 1]);
            CHECK(std::abs(pairwise_sum(cells) - 1.0) < 1e-4);
        }
    }
    SUBCASE("near-Dirac target: mid-time product approximates the pinned density") {
        Grid1D g(-3.0, 5.0, 2001);
        const double w = 0.02, x0 = 1.0;
        std::vector<double> v(g.n);
        for (std::size_t i = 0; i < g.n; ++i) {
            const double z = (g.node(i) - x0) / w;
            v[i] = std::exp(-0.5 * z * z);
        }
        MarginalDensity mu(g, std::move(v));
        auto pot = one_marginal_potential(mu, 1.0, x0);
        auto pair = doob_factorization(pot, 1.0, x0);
        // nearest slab to t = 0.5
        std::size_t k = 0;
        for (std::size_t i = 0; i < pair.times.size(); ++i)
            if (std::abs(pair.times[i] - 0.5) < std::abs(pair.times[k] - 0.5)) k = i;
        const double var = 0.25; // t (T - t) / T at t = 1/2
        double l1 = 0.0;
        for (std::size_t i = 0; i + 1 < g.n; ++i) {
            const double x = g.node(i);
            const double exact = std::exp(-0.5 * (x - x0) * (x - x0) / var) / std::sqrt(2.0 * kPi * var);
            l1 += std::abs(pair.psi[k][i] * pair.psi_bar[k][i] - exact) * g.spacing();
        }
        CHECK(l1 < 0.01);
    }
}
