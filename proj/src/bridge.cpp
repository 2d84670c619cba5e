#include "bridgekit/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"
#include "bridgekit/rng.hpp"

namespace bridgekit::bridge {

namespace {

constexpr double kLogFloor = -690.0; // below this, exp underflows

// Trapezoid quadrature weight of node i.
double qw(const Grid1D& g, std::size_t i) {
    const double h = g.spacing();
    return (i == 0 || i == g.n - 1) ? 0.5 * h : h;
}

std::vector<double> log_density(const MarginalDensity& mu) {
    std::vector<double> lm(mu.grid.n);
    for (std::size_t i = 0; i < mu.grid.n; ++i)
        lm[i] = mu.mass[i] > 0.0 ? std::log(mu.mass[i]) : 2.0 * kLogFloor;
    return lm;
}

} // namespace

double Potential1D::at(double x) const {
    if (x < grid.lo || x > grid.hi) return -kLogFloor; // effectively +inf
    return interp_linear(grid, values, x);
}

Potential1D one_marginal_potential(const MarginalDensity& mu, double horizon, double x0) {
    const Grid1D& g = mu.grid;
    const double edge = std::max(std::abs(g.lo - x0), std::abs(g.hi - x0));
    if (edge * edge / (2.0 * horizon) > 700.0) {
        std::ostringstream os;
        os << "Gaussian tail weight overflows on this grid; keep |x - x0| below "
           << std::sqrt(1400.0 * horizon);
        throw NumericalError("tail_overflow", os.str());
    }
    const auto lm = log_density(mu);
    std::vector<double> w(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double d = g.node(i) - x0;
        w[i] = lm[i] + d * d / (2.0 * horizon);
    }
    const double shift = *std::max_element(w.begin(), w.end());
    Potential1D out;
    out.grid = g;
    out.values.resize(g.n);
    for (std::size_t i = 0; i < g.n; ++i) out.values[i] = -(w[i] - shift);
    out.log_z = shift;
    return out;
}

double one_marginal_drift(double t, double x, const MarginalDensity& mu, double horizon, double x0) {
    if (!(t >= 0.0 && t < horizon))
        throw ValidationError("drift_time", "one_marginal_drift: need 0 <= t < horizon");
    const Grid1D& g = mu.grid;
    const double tau = horizon - t;
    const auto lm = log_density(mu);
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> lw(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double y = g.node(i);
        const double d0 = y - x0, d = y - x;
        lw[i] = std::log(qw(g, i)) + lm[i] + d0 * d0 / (2.0 * horizon) - d * d / (2.0 * tau);
        m = std::max(m, lw[i]);
    }
    if (m < kLogFloor)
        throw NumericalError("unreachable_support", "one_marginal_drift: marginal support unreachable from x");
    double den = 0.0, num = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) {
        const double p = std::exp(lw[i] - m);
        den += p;
        num += p * (g.node(i) - x) / tau;
    }
    return num / den;
}

// ---------------------------------------------------------------------------
// Two-marginal alternating updates.
// ---------------------------------------------------------------------------

namespace {

// log( sum_j qw_j exp(-(x_j - x)^2 / (2 tau) + extra_j) ) for every grid node x.
std::vector<double> log_kernel_convolution(const Grid1D& g, double tau, const std::vector<double>& extra) {
    std::vector<double> out(g.n), lw(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double x = g.node(i);
        for (std::size_t j = 0; j < g.n; ++j) {
            const double d = g.node(j) - x;
            lw[j] = std::log(qw(g, j)) - d * d / (2.0 * tau) + extra[j];
        }
        out[i] = log_sum_exp(lw);
        if (!std::isfinite(out[i]))
            throw NumericalError("kernel_underflow", "sinkhorn: kernel convolution underflowed");
    }
    return out;
}

// Model marginal at t1 implied by (g1, g2), normalized to unit trapezoid mass.
std::vector<double> model_marginal_t1(const Grid1D& g, double t1, double dt12, double x0,
                                      const std::vector<double>& g1, const std::vector<double>& g2) {
    const auto inner = log_kernel_convolution(g, dt12, g2);
    std::vector<double> lm(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double d0 = g.node(i) - x0;
        lm[i] = g1[i] - d0 * d0 / (2.0 * t1) + inner[i];
    }
    const double shift = *std::max_element(lm.begin(), lm.end());
    std::vector<double> dens(g.n);
    for (std::size_t i = 0; i < g.n; ++i) dens[i] = std::exp(lm[i] - shift);
    double mass = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) mass += qw(g, i) * dens[i];
    for (double& v : dens) v /= mass;
    return dens;
}

} // namespace

SinkhornState sinkhorn_two_marginals(const MarginalDensity& mu1, const MarginalDensity& mu2, double t1,
                                     double t2, double x0, double tol, std::size_t max_iter) {
    if (!(t1 < t2) || !(t1 > 0.0))
        throw ValidationError("sinkhorn_times", "sinkhorn_two_marginals: need 0 < t1 < t2");
    if (!(mu1.grid == mu2.grid))
        throw ValidationError("grid_mismatch", "sinkhorn_two_marginals: marginals must share one grid");
    const Grid1D& g = mu1.grid;
    const double dt12 = t2 - t1;
    const auto lm1 = log_density(mu1), lm2 = log_density(mu2);

    // g1 = -f1, g2 = -f2 in log space.
    std::vector<double> g1(g.n, 0.0), g2(g.n, 0.0);
    SinkhornState st;
    st.t1 = t1;
    st.t2 = t2;
    st.x0 = x0;
    double prev_res = std::numeric_limits<double>::infinity();

    for (std::size_t it = 1; it <= max_iter; ++it) {
        // Given g2, the first-marginal equation fixes g1 in closed form.
        auto inner2 = log_kernel_convolution(g, dt12, g2);
        std::vector<double> g1_new(g.n);
        for (std::size_t i = 0; i < g.n; ++i) {
            const double d0 = g.node(i) - x0;
            g1_new[i] = lm1[i] + d0 * d0 / (2.0 * t1) - inner2[i];
            g1_new[i] = std::max(g1_new[i], 2.0 * kLogFloor);
        }
        // Given g1, the second-marginal equation fixes g2.
        std::vector<double> extra(g.n);
        for (std::size_t j = 0; j < g.n; ++j) {
            const double d0 = g.node(j) - x0;
            extra[j] = g1_new[j] - d0 * d0 / (2.0 * t1);
        }
        auto inner1 = log_kernel_convolution(g, dt12, extra);
        std::vector<double> g2_new(g.n);
        for (std::size_t i = 0; i < g.n; ++i) {
            g2_new[i] = lm2[i] - inner1[i];
            g2_new[i] = std::max(g2_new[i], 2.0 * kLogFloor);
        }

        // Residual: sup-norm mismatch of the implied first marginal.
        auto m1 = model_marginal_t1(g, t1, dt12, x0, g1_new, g2_new);
        double res = 0.0;
        for (std::size_t i = 0; i < g.n; ++i) res = std::max(res, std::abs(m1[i] - mu1.mass[i]));

        if (res > prev_res) {
            // Geometric damping on divergence.
            for (std::size_t i = 0; i < g.n; ++i) {
                g1_new[i] = 0.5 * (g1_new[i] + g1[i]);
                g2_new[i] = 0.5 * (g2_new[i] + g2[i]);
            }
            m1 = model_marginal_t1(g, t1, dt12, x0, g1_new, g2_new);
            res = 0.0;
            for (std::size_t i = 0; i < g.n; ++i) res = std::max(res, std::abs(m1[i] - mu1.mass[i]));
        }

        g1 = std::move(g1_new);
        g2 = std::move(g2_new);
        st.iteration = it;
        st.residual = res;
        st.residual_history.push_back(res);
        prev_res = res;
        if (res < tol) {
            st.converged = true;
            break;
        }
    }

    // Package potentials with the max exp(-f) = 1 gauge.
    auto pack = [&](const std::vector<double>& gv) {
        Potential1D p;
        p.grid = g;
        p.values.resize(g.n);
        const double shift = *std::max_element(gv.begin(), gv.end());
        for (std::size_t i = 0; i < g.n; ++i) p.values[i] = -(gv[i] - shift);
        p.log_z = shift;
        return p;
    };
    st.f1 = pack(g1);
    st.f2 = pack(g2);
    std::vector<double> mg2(g.n);
    for (std::size_t j = 0; j < g.n; ++j) mg2[j] = -st.f2.values[j];
    st.log_inner = log_kernel_convolution(g, dt12, mg2);
    return st;
}

double two_marginal_drift(double t, double x, const SinkhornState& state) {
    if (!state.converged)
        throw ValidationError("sinkhorn_not_converged", "two_marginal_drift: state has not converged");
    if (!(t >= 0.0 && t < state.t2))
        throw ValidationError("drift_time", "two_marginal_drift: need 0 <= t < t2");
    const Grid1D& g = state.f1.grid;

    const bool past_t1 = t >= state.t1 - 1e-12;
    const double tau = past_t1 ? state.t2 - t : state.t1 - t;
    std::vector<double> lw(g.n);
    for (std::size_t j = 0; j < g.n; ++j) {
        const double d = g.node(j) - x;
        double extra;
        if (past_t1) {
            extra = -state.f2.values[j];
        } else {
            const double d0 = g.node(j) - state.x0;
            // Potential at t1 plus the kernel-convolved second factor. The
            // prior density factor exp(-d0^2/(2 t1)) belongs to the transition
            // from x, not from x0, so only f1 and the inner factor appear.
            extra = -state.f1.values[j] + state.log_inner[j];
            (void)d0;
        }
        lw[j] = std::log(qw(g, j)) - d * d / (2.0 * tau) + extra;
    }
    const double m = *std::max_element(lw.begin(), lw.end());
    if (m < kLogFloor)
        throw NumericalError("unreachable_support", "two_marginal_drift: support unreachable");
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < g.n; ++j) {
        const double p = std::exp(lw[j] - m);
        den += p;
        num += p * (g.node(j) - x) / tau;
    }
    return num / den;
}

double marginal_flow_drift(double t, double x, const MarginalFlow& flow) {
    const auto& ts = flow.times;
    if (ts.size() < 3) throw ValidationError("flow_shape", "marginal_flow_drift: need >= 3 stored times");
    // Locate the time bracket.
    std::size_t k = 0;
    while (k + 2 < ts.size() && ts[k + 1] < t) ++k;
    const Grid1D& g = flow.grid;
    const double h = g.spacing();

    auto derivs_at = [&](std::size_t kt, double xx) {
        const std::size_t i = std::clamp<std::size_t>(g.cell(xx), 1, g.n - 3);
        auto val = [&](std::size_t tt, std::size_t ii) { return flow.cdf[tt][ii]; };
        // time derivative: central where possible
        const std::size_t ka = kt == 0 ? 0 : kt - 1;
        const std::size_t kb = kt + 1 < ts.size() ? kt + 1 : kt;
        auto node_d = [&](std::size_t ii) {
            const double ft = (val(kb, ii) - val(ka, ii)) / (ts[kb] - ts[ka]);
            const double fx = (val(kt, ii + 1) - val(kt, ii - 1)) / (2.0 * h);
            const double fxx = (val(kt, ii + 1) - 2.0 * val(kt, ii) + val(kt, ii - 1)) / (h * h);
            return std::array<double, 3>{ft, fx, fxx};
        };
        const auto a = node_d(i), b = node_d(i + 1);
        const double w = std::clamp((xx - g.node(i)) / h, 0.0, 1.0);
        return std::array<double, 3>{(1 - w) * a[0] + w * b[0], (1 - w) * a[1] + w * b[1],
                                     (1 - w) * a[2] + w * b[2]};
    };
    // interpolate between the two bracketing stored times
    const std::size_t kt = (std::abs(ts[k] - t) <= std::abs(ts[k + 1] - t)) ? k : k + 1;
    const auto d = derivs_at(kt, x);
    if (d[1] <= 1e-12) {
        std::ostringstream os;
        os << "marginal_flow_drift: density floor breached at (t=" << t << ", x=" << x << ")";
        throw NumericalError("density_floor", os.str());
    }
    return (0.5 * d[2] - d[0]) / d[1];
}

AreaBridgeSpec area_bridge(const MarginalDensity& mu, double area, double horizon, double x0) {
    AreaBridgeSpec spec;
    spec.target_area = area;
    spec.horizon = horizon;
    spec.x0 = x0;
    spec.mu = mu;
    const double t = horizon;
    spec.multiplier = 6.0 / (t * t) * (x0 + mu.mean() - 2.0 * area / t);

    const Grid1D& g = mu.grid;
    const auto lm = log_density(mu);
    std::vector<double> w(g.n);
    for (std::size_t i = 0; i < g.n; ++i) {
        const double x = g.node(i);
        const double d0 = x - x0;
        const double expo = 0.5 * spec.multiplier * t * (x + x0) + d0 * d0 / (2.0 * t);
        if (std::abs(expo) > 700.0)
            throw NumericalError("tail_overflow",
                                 "area_bridge: quadratic exponent overflows; narrow the marginal grid");
        w[i] = lm[i] + expo;
    }
    const double shift = *std::max_element(w.begin(), w.end());
    spec.potential.grid = g;
    spec.potential.values.resize(g.n);
    for (std::size_t i = 0; i < g.n; ++i) spec.potential.values[i] = -(w[i] - shift);
    spec.potential.log_z = shift;
    return spec;
}

double area_bridge_drift(double t, double x, const AreaBridgeSpec& spec) {
    const double T = spec.horizon, A = spec.multiplier, x0 = spec.x0;
    if (!(t >= 0.0 && t < T)) throw ValidationError("drift_time", "area_bridge_drift: need 0 <= t < horizon");
    const Grid1D& g = spec.mu.grid;
    const double tau = T - t;
    const auto lm = log_density(spec.mu);
    std::vector<double> lw(g.n);
    for (std::size_t j = 0; j < g.n; ++j) {
        const double y = g.node(j);
        const double e = (A * A * tau * tau * tau - A * A * T * T * T - 12.0 * A * tau * (y + x) +
                          12.0 * A * T * (y + x0) - 12.0 * (y - x) * (y - x) / tau +
                          12.0 * (y - x0) * (y - x0) / T) /
                         24.0;
        lw[j] = std::log(qw(g, j)) + lm[j] + e;
    }
    const double m = *std::max_element(lw.begin(), lw.end());
    if (m < kLogFloor)
        throw NumericalError("unreachable_support", "area_bridge_drift: support unreachable");
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < g.n; ++j) {
        const double p = std::exp(lw[j] - m);
        den += p;
        num += p * (g.node(j) - x) / tau;
    }
    return num / den - 0.5 * A * tau;
}

// ---------------------------------------------------------------------------
// Quadratic-divergence bridge.
// ---------------------------------------------------------------------------

namespace {

double gauss_kernel(double d, double tau) {
    return std::exp(-0.5 * d * d / tau) / std::sqrt(2.0 * kPi * tau);
}

// Gradient of the dual functional at f (concave, quadratic in f):
//   grad_i = qw_i [ -mu_i + p_T(y_i - x0) ] - (1/2) (K^T D K f)_i
// where B = K f = d_x A on the (t, x) quadrature points and D holds the
// nonnegative weights dt qw_x p_t(x - x0). K^T D K is exactly symmetric
// positive semidefinite (constants are its null space), so conjugate
// gradients apply cleanly.
struct Chi2Dual {
    const Grid1D& g;
    const std::vector<double>& mu;
    double T, x0;
    std::size_t nt;
    std::vector<double> tmid;

    Chi2Dual(const Grid1D& g_, const std::vector<double>& mu_, double T_, double x0_, std::size_t nt_)
        : g(g_), mu(mu_), T(T_), x0(x0_), nt(nt_) {
        for (std::size_t k = 0; k < nt; ++k) tmid.push_back((double(k) + 0.5) * T / double(nt));
    }

    // The derivative kernel depends only on the node separation (uniform
    // grid), so each time slab stores one Toeplitz stencil.
    mutable std::vector<std::vector<double>> stencil; // [slab][n-1+ (i-j)]
    mutable std::vector<std::vector<double>> prior_w; // [slab][j]: dt qw_j p_t(x_j - x0)

    void build_cache() const {
        if (!stencil.empty()) return;
        const double dt = T / double(nt);
        const double h = g.spacing();
        stencil.resize(nt);
        prior_w.resize(nt);
        for (std::size_t k = 0; k < nt; ++k) {
            const double tau = T - tmid[k];
            auto& st = stencil[k];
            st.resize(2 * g.n - 1);
            for (std::size_t q = 0; q < st.size(); ++q) {
                const double d = (double(q) - double(g.n - 1)) * h;
                st[q] = (d / tau) * gauss_kernel(d, tau);
            }
            auto& pw = prior_w[k];
            pw.resize(g.n);
            for (std::size_t j = 0; j < g.n; ++j)
                pw[j] = dt * qw(g, j) * gauss_kernel(g.node(j) - x0, tmid[k]);
        }
    }

    // Applies the quadratic form: out = (1/2) K^T D K f.
    std::vector<double> apply_q(const std::vector<double>& f) const {
        build_cache();
        std::vector<double> out(g.n, 0.0);
        std::vector<double> b(g.n), fw(g.n);
        for (std::size_t i = 0; i < g.n; ++i) fw[i] = qw(g, i) * f[i];
        for (std::size_t k = 0; k < nt; ++k) {
            const auto& st = stencil[k];
            const auto& pw = prior_w[k];
            for (std::size_t j = 0; j < g.n; ++j) {
                double s = 0.0;
                const double* row = st.data() + (g.n - 1 - j);
                for (std::size_t i = 0; i < g.n; ++i) s += row[i] * fw[i];
                b[j] = s;
            }
            for (std::size_t j = 0; j < g.n; ++j) {
                const double w = 0.5 * pw[j] * b[j];
                if (w == 0.0) continue;
                const double* row = st.data() + (g.n - 1 - j);
                for (std::size_t i = 0; i < g.n; ++i) out[i] += w * qw(g, i) * row[i];
            }
        }
        return out;
    }

    std::vector<double> rhs() const {
        std::vector<double> c(g.n);
        for (std::size_t i = 0; i < g.n; ++i)
            c[i] = qw(g, i) * (-mu[i] + gauss_kernel(g.node(i) - x0, T));
        return c;
    }
};

} // namespace

Chi2BridgeState chi2_bridge(const MarginalDensity& mu, double horizon, double x0, std::size_t max_iter,
                            double tol) {
    const Grid1D& g = mu.grid;
    Chi2Dual dual(g, mu.mass, horizon, x0, 64);

    // Conjugate gradients on the stationarity system Q f = c. Constants are a
    // null direction of Q and c sums to zero against the quadrature weights,
    // so starting from zero stays in range(Q).
    std::vector<double> f(g.n, 0.0), r = dual.rhs(), p = r;
    double rs = 0.0, cinf = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) {
        rs += r[i] * r[i];
        cinf = std::max(cinf, std::abs(r[i]));
    }
    const double stop = tol * std::max(cinf, 1e-300);
    Chi2BridgeState st;
    std::size_t it = 0;
    for (; it < max_iter; ++it) {
        double rinf = 0.0;
        for (double v : r) rinf = std::max(rinf, std::abs(v));
        st.gradient_norm = rinf;
        if (rinf < stop) {
            st.converged = true;
            break;
        }
        auto qp = dual.apply_q(p);
        double pqp = 0.0;
        for (std::size_t i = 0; i < g.n; ++i) pqp += p[i] * qp[i];
        if (pqp <= 0.0) break; // null direction reached
        const double alpha = rs / pqp;
        double rs_new = 0.0;
        for (std::size_t i = 0; i < g.n; ++i) {
            f[i] += alpha * p[i];
            r[i] -= alpha * qp[i];
            rs_new += r[i] * r[i];
        }
        const double beta = rs_new / rs;
        rs = rs_new;
        for (std::size_t i = 0; i < g.n; ++i) p[i] = r[i] + beta * p[i];
    }
    st.iterations = it;

    st.f1.grid = g;
    st.f1.values = f;
    st.f1.log_z = 0.0;

    pde::SchemeParams hp;
    hp.theta = 0.5;
    hp.time_steps = 200;
    st.a_surface = pde::solve_heat_1d(f, g, horizon, hp);

    // Residual value term: dC/dt + C_xx/2 = (d_x A)^2 / 4, C(T) = -1.
    {
        const std::size_t m = hp.time_steps, n = g.n;
        const double dt = horizon / double(m), h = g.spacing();
        const double diff = 0.5 / (h * h);
        st.c_surface.grid = g;
        st.c_surface.times = st.a_surface.times;
        st.c_surface.values.assign(1, std::vector<double>(n, -1.0));
        std::vector<double> lower(n), diag(n), upper(n), rhsv(n);
        for (std::size_t k = 0; k < m; ++k) {
            const auto& c1 = st.c_surface.values.back();
            const auto& a_new = st.a_surface.values[k + 1];
            for (std::size_t i = 0; i < n; ++i) {
                double ax;
                if (i == 0)
                    ax = (a_new[1] - a_new[0]) / h;
                else if (i == n - 1)
                    ax = (a_new[n - 1] - a_new[n - 2]) / h;
                else
                    ax = (a_new[i + 1] - a_new[i - 1]) / (2.0 * h);
                rhsv[i] = c1[i] - dt * ax * ax / 4.0;
                lower[i] = 0.0;
                upper[i] = 0.0;
                diag[i] = 1.0;
            }
            for (std::size_t i = 1; i + 1 < n; ++i) {
                lower[i] = -dt * diff;
                diag[i] = 1.0 + 2.0 * dt * diff;
                upper[i] = -dt * diff;
            }
            solve_tridiagonal(lower, diag, upper, rhsv);
            rhsv[0] = 2.0 * rhsv[1] - rhsv[2];
            rhsv[n - 1] = 2.0 * rhsv[n - 2] - rhsv[n - 3];
            st.c_surface.values.push_back(rhsv);
        }
    }
    return st;
}

namespace {

double a_surface_slope(double t, double x, const Chi2BridgeState& state) {
    const Grid1D& g = state.a_surface.grid;
    const double h = g.spacing();
    const double xa = std::clamp(x, g.lo + h, g.hi - h);
    return (state.a_surface.at(t, xa + h) - state.a_surface.at(t, xa - h)) / (2.0 * h);
}

} // namespace

double chi2_drift(double t, double x, double m, const Chi2BridgeState& state) {
    return -a_surface_slope(t, x, state) / (2.0 * m);
}

Chi2SimResult chi2_simulate(Chi2BridgeState& state, double horizon, double x0, std::size_t paths,
                            std::size_t steps, std::uint64_t seed) {
    const double dt = horizon / double(steps);
    const double m_floor = 1e-8;
    Philox rng(seed);
    Chi2SimResult out;
    out.x_terminal.assign(paths, 0.0);
    state.sample_m.assign(paths, 0.0);
    std::size_t floored = 0, total_sub = 0;

    for (std::size_t p = 0; p < paths; ++p) {
        double x = x0, m = 1.0, t = 0.0;
        std::uint32_t draw = 0;
        for (std::size_t k = 0; k < steps; ++k) {
            double remaining = dt;
            std::size_t guard = 0;
            while (remaining > 1e-15 && guard < 256) {
                const double slope = a_surface_slope(t, x, state);
                const double vol_m = -0.5 * slope;      // dM = vol_m dW, bounded
                const double lam = vol_m / std::max(m, m_floor);
                // Resolve the stiff drift: lam^2 dt_s <= 0.04.
                double dts = remaining;
                if (lam * lam > 1e-12) dts = std::min(dts, 0.04 / (lam * lam));
                dts = std::max(dts, dt / 256.0);
                dts = std::min(dts, remaining);
                const double dw = std::sqrt(dts) * rng.normal(p, draw++, 0);
                double move = lam * dts;
                move = std::clamp(move, -0.5, 0.5);
                x += move + dw;
                // The reference-measure density process gains a lam^2 M dt
                // drift under the calibrated measure; its volatility stays
                // lam M = -slope/2.
                m += vol_m * (dw + std::clamp(lam * dts, -0.5, 0.5));
                if (m < m_floor) {
                    m = m_floor;
                    ++floored;
                }
                t += dts;
                remaining -= dts;
                ++guard;
                ++total_sub;
            }
        }
        out.x_terminal[p] = x;
        state.sample_m[p] = m;
    }
    out.floor_fraction = total_sub ? double(floored) / double(total_sub) : 0.0;
    return out;
}

pde::SchemeParams doob_default_params() {
    pde::SchemeParams p;
    p.theta = 0.5;
    p.time_steps = 400;
    return p;
}

FactorizationPair doob_factorization(const Potential1D& potential, double horizon, double x0,
                                     const pde::SchemeParams& params) {
    const Grid1D& g = potential.grid;
    std::vector<double> term(g.n);
    for (std::size_t i = 0; i < g.n; ++i) term[i] = std::exp(-potential.values[i]);
    auto psi = pde::solve_heat_1d(term, g, horizon, params);

    const double denom = psi.values.back()[g.cell(x0)] +
                         (x0 - g.node(g.cell(x0))) / g.spacing() *
                             (psi.values.back()[g.cell(x0) + 1] - psi.values.back()[g.cell(x0)]);

    FactorizationPair out;
    out.grid = g;
    // Drop the t = 0 slab where the forward factor is a point mass.
    for (std::size_t k = 0; k + 1 < psi.times.size(); ++k) {
        out.times.push_back(psi.times[k]);
        out.psi.push_back(psi.values[k]);
        std::vector<double> bar(g.n);
        for (std::size_t i = 0; i < g.n; ++i)
            bar[i] = gauss_kernel(g.node(i) - x0, psi.times[k]) / denom;
        out.psi_bar.push_back(std::move(bar));
    }
    return out;
}

} // namespace bridgekit::bridge
