#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"
#include "bridgekit/pde.hpp"

using namespace bridgekit;
using namespace bridgekit::pde;
using market::NakedSvmSpec;

namespace {

// Quadrature oracle for the backward heat equation: U(0, x) is the Gaussian
// convolution of the terminal data over the grid.
double heat_convolution(const Grid1D& g, const std::vector<double>& term, double tau, double x) {
    const double h = g.spacing();
    std::vector<double> w(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double d = g.node(i) - x;
        w[i] = term[i] * std::exp(-0.5 * d * d / tau) / std::sqrt(2.0 * kPi * tau) * h;
    }
    return pairwise_sum(w);
}

// Independent oracle: explicit time stepping of the nonlinear equation
// du/dt + u_xx/2 - (u_x)^2/2 = 0 without the exponential transformation.
std::vector<double> burgers_explicit(const Grid1D& g, std::vector<double> u, double horizon) {
    const double h = g.spacing();
    const std::size_t sub = std::size_t(std::ceil(horizon / (0.2 * h * h)));
    const double dt = horizon / double(sub);
    std::vector<double> nxt = u;
    for (std::size_t s = 0; s < sub; ++s) {
        for (std::size_t i = 1; i + 1 < g.n; ++i) {
            const double uxx = (u[i - 1] - 2.0 * u[i] + u[i + 1]) / (h * h);
            const double ux = (u[i + 1] - u[i - 1]) / (2.0 * h);
            nxt[i] = u[i] + dt * (0.5 * uxx - 0.5 * ux * ux);
        }
        nxt[0] = 2.0 * nxt[1] - nxt[2];
        nxt[g.n - 1] = 2.0 * nxt[g.n - 2] - nxt[g.n - 3];
        u = nxt;
    }
    return u;
}

NakedSvmSpec sabr() { return NakedSvmSpec::lognormal(0.2, 0.4, -0.5, 1.0); }

} // namespace

TEST_CASE("heat solver") {
    Grid1D g(-6.0, 6.0, 1201);
    SchemeParams p;
    p.theta = 0.5;
    p.time_steps = 400;

    SUBCASE("constant terminal stays constant") {
        std::vector<double> term(g.n, 3.25);
        auto s = solve_heat_1d(term, g, 1.0, p);
        for (double t : {1.0, 0.5, 0.0})
            CHECK(s.at(t, 0.3) == doctest::Approx(3.25).epsilon(1e-12));
    }
    SUBCASE("Gaussian terminal spreads to variance v + (T - t)") {
        const double v = 0.25;
        std::vector<double> term(g.n);
        for (std::size_t i = 0; i < g.n; ++i)
            term[i] = std::exp(-0.5 * g.node(i) * g.node(i) / v) / std::sqrt(2.0 * kPi * v);
        auto s = solve_heat_1d(term, g, 1.0, p);
        for (double t : {0.5, 0.0}) {
            const double vv = v + (1.0 - t);
            for (double x : {-1.0, 0.0, 0.7, 2.0}) {
                const double want = std::exp(-0.5 * x * x / vv) / std::sqrt(2.0 * kPi * vv);
                CHECK(s.at(t, x) == doctest::Approx(want).epsilon(2e-4));
            }
        }
    }
    SUBCASE("smooth exp(-f) terminal matches the convolution quadrature at 1e-5") {
        std::vector<double> term(g.n);
        for (std::size_t i = 0; i < g.n; ++i) {
            const double x = g.node(i);
            term[i] = std::exp(-(0.4 * x * x / (1.0 + 0.1 * x * x)));
        }
        auto s = solve_heat_1d(term, g, 1.0, p);
        double worst = 0.0;
        for (double x = -2.0; x <= 2.0; x += 0.25)
            worst = std::max(worst, std::abs(s.at(0.0, x) - heat_convolution(g, term, 1.0, x)));
        CHECK(worst < 1e-5);
    }
    SUBCASE("terminal slab equals the supplied data exactly") {
        std::vector<double> term(g.n);
        for (std::size_t i = 0; i < g.n; ++i) term[i] = std::sin(g.node(i));
        auto s = solve_heat_1d(term, g, 1.0, p);
        CHECK(s.values[0] == term);
    }
}

TEST_CASE("nonlinear 1D solver") {
    Grid1D g(-8.0, 8.0, 1201);
    SchemeParams p;
    p.theta = 0.5;
    p.time_steps = 400;

    SUBCASE("affine terminal has the exact closed-form solution") {
        const double a = 0.8, b = -0.3, T = 1.0;
        std::vector<double> f(g.n);
        for (std::size_t i = 0; i < g.n; ++i) f[i] = a * g.node(i) + b;
        auto s = solve_burgers_1d(f, g, T, p);
        double worst = 0.0;
        for (double t : {0.0, 0.4, 0.9})
            for (double x = -3.0; x <= 3.0; x += 0.5)
                worst = std::max(worst, std::abs(s.at(t, x) - (a * x + b - 0.5 * a * a * (T - t))));
        CHECK(worst < 5e-5);
    }
    SUBCASE("constant terminal is a fixed point") {
        std::vector<double> f(g.n, 1.7);
        auto s = solve_burgers_1d(f, g, 1.0, p);
        CHECK(s.at(0.0, 0.5) == doctest::Approx(1.7).epsilon(1e-12));
    }
    SUBCASE("quadratic terminal matches an independent nonlinear scheme") {
        Grid1D gc(-6.0, 6.0, 401);
        std::vector<double> f(gc.n);
        for (std::size_t i = 0; i < gc.n; ++i) f[i] = 0.3 * gc.node(i) * gc.node(i);
        SchemeParams pc = p;
        pc.time_steps = 800;
        auto s = solve_burgers_1d(f, gc, 0.5, pc);
        auto oracle = burgers_explicit(gc, f, 0.5);
        double worst = 0.0;
        for (std::size_t i = gc.n / 4; i < 3 * gc.n / 4; ++i)
            worst = std::max(worst, std::abs(s.values.back()[i] - oracle[i]));
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("two-factor semilinear solver") {
    auto svm = sabr();
    auto grids = make_svm_grids(svm, 1.0);
    SchemeParams p;

    SUBCASE("constant terminal is preserved on every slab") {
        auto u = solve_svm_semilinear_2d([](double) { return 0.4; }, svm, 0.0, 1.0, grids, p);
        CHECK(u.inner_converged);
        for (std::size_t k : {std::size_t(0), u.times.size() / 2, u.times.size() - 1})
            for (std::size_t i = 0; i < u.nx(); i += 40)
                for (std::size_t j = 0; j < u.ny(); j += 20)
                    CHECK(u.v(k, i, j) == doctest::Approx(0.4).epsilon(1e-10));
    }
    SUBCASE("zero terminal gives zero u and zero hedge field") {
        auto u = solve_svm_semilinear_2d([](double) { return 0.0; }, svm, 0.0, 1.0, grids, p);
        auto d = delta_field(u, svm);
        double worst = 0.0;
        for (const auto& slab : u.values)
            for (double v : slab) worst = std::max(worst, std::abs(v));
        for (const auto& slab : d.values)
            for (double v : slab) worst = std::max(worst, std::abs(v));
        CHECK(worst == 0.0);
    }
    SUBCASE("frozen-volatility model matches the lognormal quadrature oracle") {
        // sigma = 0, b = 0: the vol driver carries no risk, the hedge
        // optimization removes the spot nonlinearity entirely, and
        // u(t, s) = E[f(S_T) | S_t = s] with S_T lognormal at vol a0.
        auto frozen = NakedSvmSpec::custom([](double) { return 0.0; }, [](double) { return 0.0; }, 0.0, 1.0, 0.2);
        SvmGrids fg = make_svm_grids(frozen, 1.0, 401, 31);
        auto f = [](double s) { return 0.5 * std::max(s - 1.0, 0.0) - 0.2 * std::max(s - 1.2, 0.0); };
        auto u = solve_svm_semilinear_2d(f, frozen, 0.0, 1.0, fg, p);

        const double a0 = 0.2, T = 1.0;
        auto oracle = [&](double s) {
            const int n = 4001;
            std::vector<double> w(n);
            for (int q = 0; q < n; ++q) {
                const double z = -8.0 + 16.0 * double(q) / double(n - 1);
                const double st = s * std::exp(a0 * std::sqrt(T) * z - 0.5 * a0 * a0 * T);
                w[q] = f(st) * normal_pdf(z) * 16.0 / double(n - 1);
            }
            return pairwise_sum(w);
        };
        double worst = 0.0;
        for (double s : {0.85, 1.0, 1.15, 1.3})
            worst = std::max(worst, std::abs(u.slab_at(u.times.size() - 1, s, 0.2) - oracle(s)));
        CHECK(worst < 1e-4);
    }
    SUBCASE("vanishing nonlinearity reduces to the linear equation") {
        // rho^2 -> 1 kills the nonlinear term, so the semilinear solve and a
        // linear solve of the same generator applied to f must coincide.
        auto near_one = NakedSvmSpec::lognormal(0.2, 0.4, 0.999999, 1.0);
        auto gg = make_svm_grids(near_one, 0.5, 201, 101);
        auto f = [](double s) { return 0.3 * std::max(s - 1.0, 0.0); };
        auto u = solve_svm_semilinear_2d(f, near_one, 0.0, 0.5, gg, p);

        ValueSurface2D zero_u = u;
        for (auto& slab : zero_u.values) std::fill(slab.begin(), slab.end(), 0.0);
        auto lin = solve_linear_sensitivity_2d(zero_u, f, near_one, p);
        double worst = 0.0;
        for (double s : {0.9, 1.0, 1.1})
            for (double a : {0.15, 0.2, 0.25})
                worst = std::max(worst, std::abs(u.at(0.0, s, a) - lin.at(0.0, s, a)));
        CHECK(worst < 1e-8);
    }
    SUBCASE("grid coverage failure is rejected") {
        SvmGrids narrow{Grid1D(-0.2, 0.2, 51), Grid1D(-2.0, -1.0, 21)};
        CHECK_THROWS_AS(solve_svm_semilinear_2d([](double) { return 0.0; }, svm, 0.0, 1.0, narrow, p),
                        ValidationError);
    }
}

TEST_CASE("linear sensitivity solver") {
    auto svm = sabr();
    auto grids = make_svm_grids(svm, 1.0);
    SchemeParams p;

    SUBCASE("around u = 0 it prices the naked payoff; small strike tends to the forward") {
        auto u0 = solve_svm_semilinear_2d([](double) { return 0.0; }, svm, 0.0, 1.0, grids, p);
        auto d = solve_linear_sensitivity_2d(u0, [](double s) { return std::max(s - 1e-4, 0.0); }, svm, p);
        // payoff ~ S_T, martingale forward = s0
        CHECK(d.at(0.0, 1.0, 0.2) == doctest::Approx(1.0 - 1e-4).epsilon(2e-3));
    }
    SUBCASE("matches centered finite differences of the nonlinear solve") {
        auto base = [](double s) { return 0.4 * std::max(s - 0.95, 0.0) - 0.25 * std::max(s - 1.1, 0.0); };
        auto bump = [](double s) { return std::max(s - 1.05, 0.0); };
        SchemeParams tight = p;
        tight.inner_tol = 1e-12;
        auto u = solve_svm_semilinear_2d(base, svm, 0.0, 1.0, grids, tight);
        auto sens = sensitivity_start_slab(u, bump, svm, tight);

        const double eps = 1e-5;
        auto up = solve_svm_semilinear_2d([&](double s) { return base(s) + eps * bump(s); }, svm, 0.0, 1.0,
                                          grids, tight);
        auto dn = solve_svm_semilinear_2d([&](double s) { return base(s) - eps * bump(s); }, svm, 0.0, 1.0,
                                          grids, tight);
        const std::size_t last = u.times.size() - 1;
        const std::size_t i = grids.x.n / 2, j = grids.y.n / 2;
        const double fd = (up.v(last, i, j) - dn.v(last, i, j)) / (2.0 * eps);
        const double an = sens[i * grids.y.n + j];
        CHECK(std::abs(an - fd) / std::max(1e-8, std::abs(fd)) < 1e-4);
    }
}

TEST_CASE("hedge field") {
    auto svm = sabr();

    SUBCASE("rho = 0 reduces to minus the spot derivative") {
        auto flat = NakedSvmSpec::lognormal(0.2, 0.4, 0.0, 1.0);
        auto grids = make_svm_grids(flat, 1.0, 101, 41);
        ValueSurface2D u;
        u.times = {1.0, 0.5, 0.0};
        u.x_grid = grids.x;
        u.y_grid = grids.y;
        u.values.assign(3, std::vector<double>(grids.x.n * grids.y.n));
        for (auto& slab : u.values)
            for (std::size_t i = 0; i < grids.x.n; ++i)
                for (std::size_t j = 0; j < grids.y.n; ++j)
                    slab[i * grids.y.n + j] = std::sin(grids.x.node(i));
        auto d = delta_field(u, flat);
        double worst = 0.0;
        for (std::size_t i = 1; i + 1 < grids.x.n; ++i) {
            const double x = grids.x.node(i);
            const double want = -std::cos(x) / std::exp(x); // -du/ds = -(du/dx)/s
            worst = std::max(worst, std::abs(d.values[1][i * grids.y.n + 5] - want));
        }
        CHECK(worst < 1e-3);
    }
    SUBCASE("matches a fourth-order stencil on a smooth manufactured surface") {
        // At the low-vol edge the hedge formula multiplies the vol derivative
        // by sigma(a)/a^2 ~ 1/a, so the grid must be fine enough in y for the
        // 1e-5 stencil comparison to hold over the whole interior.
        auto grids = make_svm_grids(svm, 1.0, 801, 2101);
        ValueSurface2D u;
        u.times = {1.0};
        u.x_grid = grids.x;
        u.y_grid = grids.y;
        u.values.assign(1, std::vector<double>(grids.x.n * grids.y.n));
        auto fn = [](double x, double y) { return std::sin(0.9 * x) * std::cos(0.7 * y); };
        for (std::size_t i = 0; i < grids.x.n; ++i)
            for (std::size_t j = 0; j < grids.y.n; ++j)
                u.values[0][i * grids.y.n + j] = fn(grids.x.node(i), grids.y.node(j));
        auto d = delta_field(u, svm);

        const double hx = grids.x.spacing(), hy = grids.y.spacing();
        double worst = 0.0;
        for (std::size_t i = 2; i + 2 < grids.x.n; i += 7) {
            for (std::size_t j = 2; j + 2 < grids.y.n; j += 5) {
                auto at = [&](std::size_t ii, std::size_t jj) { return u.values[0][ii * grids.y.n + jj]; };
                const double dx4 = (-at(i + 2, j) + 8 * at(i + 1, j) - 8 * at(i - 1, j) + at(i - 2, j)) /
                                   (12.0 * hx);
                const double dy4 = (-at(i, j + 2) + 8 * at(i, j + 1) - 8 * at(i, j - 1) + at(i, j - 2)) /
                                   (12.0 * hy);
                const double a = std::exp(grids.y.node(j));
                const double s = std::exp(grids.x.node(i));
                const double want = -(dx4 + svm.rho * svm.sigma(a) / (a * a) * dy4) / s;
                worst = std::max(worst, std::abs(d.values[0][i * grids.y.n + j] - want));
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("scheme quality properties") {
    auto svm = sabr();

    SUBCASE("halving step and spacing moves the solution by a second-order amount") {
        auto f = [](double s) { return 0.5 * std::max(s - 1.0, 0.0); };
        auto g1 = make_svm_grids(svm, 1.0, 101, 51);
        auto g2 = make_svm_grids(svm, 1.0, 201, 101);
        SchemeParams p1;
        p1.time_steps = 100;
        SchemeParams p2;
        p2.time_steps = 200;
        auto ua = solve_svm_semilinear_2d(f, svm, 0.0, 1.0, g1, p1);
        auto ub = solve_svm_semilinear_2d(f, svm, 0.0, 1.0, g2, p2);
        const double va = ua.at(0.0, 1.0, 0.2), vb = ub.at(0.0, 1.0, 0.2);
        CHECK(std::abs(va - vb) < 4.0 * 1e-3); // refinement shift bounded by 4x tolerance
    }
    SUBCASE("comparison principle: larger terminal data gives larger u") {
        auto grids = make_svm_grids(svm, 1.0);
        auto lo = solve_svm_semilinear_2d([](double s) { return 0.2 * std::max(s - 1.0, 0.0); }, svm, 0.0, 1.0,
                                          grids, {});
        auto hi = solve_svm_semilinear_2d([](double s) { return 0.2 * std::max(s - 1.0, 0.0) + 0.05; }, svm,
                                          0.0, 1.0, grids, {});
        bool ok = true;
        for (std::size_t k = 0; k < lo.times.size(); k += 20)
            for (std::size_t idx = 0; idx < lo.values[k].size(); idx += 97)
                ok = ok && (hi.values[k][idx] >= lo.values[k][idx] - 1e-9);
        CHECK(ok);
    }
}
