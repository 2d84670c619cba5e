#include "bridgekit/pde.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bridgekit/errors.hpp"
#include "bridgekit/numerics.hpp"

namespace bridgekit::pde {

namespace {

void check_finite(const std::vector<double>& v, double t) {
    for (double x : v)
        if (!std::isfinite(x) || std::abs(x) > 1e12) {
            std::ostringstream os;
            os << "solver instability detected at slab t=" << t;
            throw NumericalError("pde_instability", os.str());
        }
}

void boundary_closure(std::vector<double>& u, SchemeParams::BoundaryRule rule) {
    const std::size_t n = u.size();
    if (rule == SchemeParams::BoundaryRule::ValueLinear) {
        u[0] = 2.0 * u[1] - u[2];
        u[n - 1] = 2.0 * u[n - 2] - u[n - 3];
    } else {
        const double lo = std::max(u[2], 1e-300), hi = std::max(u[n - 3], 1e-300);
        u[0] = std::max(u[1], 1e-300) * std::max(u[1], 1e-300) / lo;
        u[n - 1] = std::max(u[n - 2], 1e-300) * std::max(u[n - 2], 1e-300) / hi;
    }
}

} // namespace

double ValueSurface1D::at(double t, double x) const {
    const std::size_t k = slab_index(t);
    if (k + 1 >= times.size() || times[k] == t) return interp_linear(grid, values[k], x);
    // times descend; bracket [times[k+1], times[k]]
    const std::size_t k2 = k + 1;
    const double w = (times[k] - t) / (times[k] - times[k2]);
    return (1.0 - w) * interp_linear(grid, values[k], x) + w * interp_linear(grid, values[k2], x);
}

std::size_t ValueSurface1D::slab_index(double t) const {
    // Nearest slab for aligned lookups; times descend from horizon to 0.
    if (t >= times.front()) return 0;
    if (t <= times.back()) return times.size() - 1;
    const double dt = times[0] - times[1];
    const double k = (times[0] - t) / dt;
    const auto lo = std::size_t(k);
    return (k - double(lo) <= 0.5) ? lo : lo + 1;
}

ValueSurface1D solve_heat_1d(const std::vector<double>& terminal, const Grid1D& grid, double horizon,
                             const SchemeParams& params) {
    if (terminal.size() != grid.n) throw ValidationError("pde_shape", "solve_heat_1d: terminal size mismatch");
    for (double v : terminal)
        if (!std::isfinite(v)) throw ValidationError("pde_terminal", "solve_heat_1d: terminal must be finite");

    const std::size_t m = params.time_steps, n = grid.n;
    const double dt = horizon / double(m);
    const double h = grid.spacing();
    const double diff = 0.5 / (h * h); // coefficient of (u_{i-1} - 2 u_i + u_{i+1})

    ValueSurface1D out;
    out.grid = grid;
    out.times.resize(m + 1);
    for (std::size_t k = 0; k <= m; ++k) out.times[k] = horizon - double(k) * dt;
    out.values.reserve(m + 1);
    out.values.push_back(terminal);

    std::vector<double> lower(n), diag(n), upper(n), rhs(n);
    for (std::size_t k = 0; k < m; ++k) {
        const auto& u1 = out.values.back();
        // rhs = (I + (1-theta) dt A) u1, boundary rows pass through.
        rhs[0] = u1[0];
        rhs[n - 1] = u1[n - 1];
        for (std::size_t i = 1; i + 1 < n; ++i) {
            const double au = diff * (u1[i - 1] - 2.0 * u1[i] + u1[i + 1]);
            rhs[i] = u1[i] + (1.0 - params.theta) * dt * au;
        }
        for (std::size_t i = 0; i < n; ++i) {
            lower[i] = 0.0;
            upper[i] = 0.0;
            diag[i] = 1.0;
        }
        for (std::size_t i = 1; i + 1 < n; ++i) {
            lower[i] = -params.theta * dt * diff;
            diag[i] = 1.0 + 2.0 * params.theta * dt * diff;
            upper[i] = -params.theta * dt * diff;
        }
        solve_tridiagonal(lower, diag, upper, rhs);
        boundary_closure(rhs, params.boundary);
        check_finite(rhs, out.times[k + 1]);
        out.values.push_back(rhs);
    }
    return out;
}

ValueSurface1D solve_burgers_1d(const std::vector<double>& terminal_f, const Grid1D& grid, double horizon,
                                const SchemeParams& params) {
    double shift = terminal_f[0];
    for (double v : terminal_f) shift = std::min(shift, v);
    std::vector<double> expo(terminal_f.size());
    for (std::size_t i = 0; i < terminal_f.size(); ++i) {
        expo[i] = std::exp(-(terminal_f[i] - shift));
        if (expo[i] == 0.0)
            throw NumericalError("burgers_underflow", "solve_burgers_1d: exp(-f) underflows after shift");
    }
    SchemeParams p = params;
    p.boundary = SchemeParams::BoundaryRule::LogLinear; // linearity of u = -ln U at the edges
    ValueSurface1D surf = solve_heat_1d(expo, grid, horizon, p);
    for (auto& slab : surf.values)
        for (double& v : slab) v = -std::log(std::max(v, 1e-300)) + shift;
    return surf;
}

// ---------------------------------------------------------------------------
// Two-factor ADI machinery.
// ---------------------------------------------------------------------------

namespace {

// Precomputed stencil coefficients on the (x = ln s, y = ln a) grids.
struct AdiOperator {
    std::size_t nx, ny;
    double hx, hy;
    // x-direction: 0.5 a^2 (u_xx - u_x) per y level; zero rows at x edges.
    std::vector<double> cx; // 0.5 a^2 by y index
    // y-direction rows by y index.
    std::vector<double> ylo, ydiag, yup;
    // cross coefficient rho sigma(a) by y index.
    std::vector<double> cc;
    // source prefactor (sigma(a)/a)^2 by y index.
    std::vector<double> src_pref;

    AdiOperator(const market::NakedSvmSpec& svm, const Grid1D& xg, const Grid1D& yg) {
        nx = xg.n;
        ny = yg.n;
        hx = xg.spacing();
        hy = yg.spacing();
        cx.resize(ny);
        ylo.assign(ny, 0.0);
        ydiag.assign(ny, 0.0);
        yup.assign(ny, 0.0);
        cc.resize(ny);
        src_pref.resize(ny);
        for (std::size_t j = 0; j < ny; ++j) {
            const double a = std::exp(yg.node(j));
            const double sig = svm.sigma(a), b = svm.b(a);
            cx[j] = 0.5 * a * a;
            cc[j] = svm.rho * sig;
            src_pref[j] = (sig / a) * (sig / a);
            const double q = 0.5 * sig * sig / (a * a); // y-diffusion
            const double r = b / a - q;                 // y-advection
            if (j == 0) {
                ydiag[j] = -(b / a) / hy;
                yup[j] = (b / a) / hy;
            } else if (j == ny - 1) {
                ylo[j] = -(b / a) / hy;
                ydiag[j] = (b / a) / hy;
            } else {
                ylo[j] = q / (hy * hy) - r / (2.0 * hy);
                ydiag[j] = -2.0 * q / (hy * hy);
                yup[j] = q / (hy * hy) + r / (2.0 * hy);
            }
        }
    }

    std::size_t id(std::size_t i, std::size_t j) const { return i * ny + j; }

    void apply_x(const std::vector<double>& u, std::vector<double>& out) const {
        for (std::size_t j = 0; j < ny; ++j) {
            const double c = cx[j];
            const double lo = c * (1.0 / (hx * hx) + 0.5 / hx);
            const double di = -2.0 * c / (hx * hx);
            const double up = c * (1.0 / (hx * hx) - 0.5 / hx);
            out[id(0, j)] = 0.0;
            out[id(nx - 1, j)] = 0.0;
            for (std::size_t i = 1; i + 1 < nx; ++i)
                out[id(i, j)] = lo * u[id(i - 1, j)] + di * u[id(i, j)] + up * u[id(i + 1, j)];
        }
    }

    void apply_y(const std::vector<double>& u, std::vector<double>& out) const {
        for (std::size_t i = 0; i < nx; ++i) {
            const std::size_t base = i * ny;
            out[base] = ydiag[0] * u[base] + yup[0] * u[base + 1];
            out[base + ny - 1] = ylo[ny - 1] * u[base + ny - 2] + ydiag[ny - 1] * u[base + ny - 1];
            for (std::size_t j = 1; j + 1 < ny; ++j)
                out[base + j] = ylo[j] * u[base + j - 1] + ydiag[j] * u[base + j] + yup[j] * u[base + j + 1];
        }
    }

    void apply_cross(const std::vector<double>& u, std::vector<double>& out) const {
        std::fill(out.begin(), out.end(), 0.0);
        const double f = 1.0 / (4.0 * hx * hy);
        for (std::size_t i = 1; i + 1 < nx; ++i)
            for (std::size_t j = 1; j + 1 < ny; ++j)
                out[id(i, j)] = cc[j] * f *
                                (u[id(i + 1, j + 1)] - u[id(i + 1, j - 1)] - u[id(i - 1, j + 1)] +
                                 u[id(i - 1, j - 1)]);
    }

    // d/dy with one-sided first-order rows at the edges.
    void d_y(const std::vector<double>& u, std::vector<double>& out) const {
        for (std::size_t i = 0; i < nx; ++i) {
            const std::size_t base = i * ny;
            out[base] = (u[base + 1] - u[base]) / hy;
            out[base + ny - 1] = (u[base + ny - 1] - u[base + ny - 2]) / hy;
            for (std::size_t j = 1; j + 1 < ny; ++j)
                out[base + j] = (u[base + j + 1] - u[base + j - 1]) / (2.0 * hy);
        }
    }

    // Implicit sweep in x: (I - w Ax) out = rhs, solved row-by-row in y.
    void solve_x(std::vector<double>& inout, double w) const {
        std::vector<double> lower(nx), diag(nx), upper(nx), rhs(nx);
        for (std::size_t j = 0; j < ny; ++j) {
            const double c = cx[j];
            const double lo = c * (1.0 / (hx * hx) + 0.5 / hx);
            const double di = -2.0 * c / (hx * hx);
            const double up = c * (1.0 / (hx * hx) - 0.5 / hx);
            for (std::size_t i = 0; i < nx; ++i) rhs[i] = inout[id(i, j)];
            lower[0] = 0.0;
            diag[0] = 1.0;
            upper[0] = 0.0;
            lower[nx - 1] = 0.0;
            diag[nx - 1] = 1.0;
            upper[nx - 1] = 0.0;
            for (std::size_t i = 1; i + 1 < nx; ++i) {
                lower[i] = -w * lo;
                diag[i] = 1.0 - w * di;
                upper[i] = -w * up;
            }
            solve_tridiagonal(lower, diag, upper, rhs);
            for (std::size_t i = 0; i < nx; ++i) inout[id(i, j)] = rhs[i];
        }
    }

    // Implicit sweep in y: (I - w Ay) out = rhs, solved column-by-column in x.
    void solve_y(std::vector<double>& inout, double w) const {
        std::vector<double> lower(ny), diag(ny), upper(ny), rhs(ny);
        for (std::size_t i = 0; i < nx; ++i) {
            const std::size_t base = i * ny;
            for (std::size_t j = 0; j < ny; ++j) {
                rhs[j] = inout[base + j];
                lower[j] = -w * ylo[j];
                diag[j] = 1.0 - w * ydiag[j];
                upper[j] = -w * yup[j];
            }
            solve_tridiagonal(lower, diag, upper, rhs);
            for (std::size_t j = 0; j < ny; ++j) inout[base + j] = rhs[j];
        }
    }
};

// One backward Douglas step with a lagged source; `source` maps the current
// iterate to nodal source values. Returns false if the inner iteration hit
// the cap without reaching inner_tol.
bool douglas_step(const AdiOperator& op, const std::vector<double>& u1, std::vector<double>& u0,
                  const std::function<void(const std::vector<double>&, std::vector<double>&)>& source,
                  double dt, const SchemeParams& params) {
    const std::size_t n = u1.size();
    std::vector<double> ax1(n), ay1(n), ac1(n), src(n), y(n), prev(n);
    op.apply_x(u1, ax1);
    op.apply_y(u1, ay1);
    op.apply_cross(u1, ac1);

    std::vector<double> iterate = u1;
    bool converged = false;
    for (std::size_t m = 0; m < std::max<std::size_t>(params.inner_cap, 1); ++m) {
        source(iterate, src);
        for (std::size_t k = 0; k < n; ++k) y[k] = u1[k] + dt * (ax1[k] + ay1[k] + ac1[k] + src[k]);
        const double w = params.theta * dt;
        for (std::size_t k = 0; k < n; ++k) y[k] -= w * ax1[k];
        op.solve_x(y, w);
        for (std::size_t k = 0; k < n; ++k) y[k] -= w * ay1[k];
        op.solve_y(y, w);

        if (m > 0) {
            double diff = 0.0;
            for (std::size_t k = 0; k < n; ++k) diff = std::max(diff, std::abs(y[k] - prev[k]));
            if (diff < params.inner_tol) {
                converged = true;
                u0 = y;
                break;
            }
        }
        prev = y;
        iterate = y;
        u0 = y;
    }
    return converged;
}

void check_grid_coverage(const market::NakedSvmSpec& svm, double horizon, const SvmGrids& grids) {
    const SvmGrids want = make_svm_grids(svm, horizon, grids.x.n, grids.y.n);
    const double slack = 1e-9;
    if (grids.x.lo > want.x.lo + slack || grids.x.hi < want.x.hi - slack || grids.y.lo > want.y.lo + slack ||
        grids.y.hi < want.y.hi - slack) {
        std::ostringstream os;
        os << "grid does not cover the simulated mass to the horizon: need x in [" << want.x.lo << ", "
           << want.x.hi << "], y in [" << want.y.lo << ", " << want.y.hi << "]";
        throw ValidationError("grid_coverage", os.str());
    }
}

} // namespace

SvmGrids make_svm_grids(const market::NakedSvmSpec& svm, double horizon, std::size_t nx, std::size_t ny,
                        double width_sigmas) {
    const double t = std::max(horizon, 1e-8);
    const double nu_eff = svm.nu_effective();
    const double x0 = std::log(svm.s0), y0 = std::log(svm.a0);
    const double vol_stretch = std::exp(std::min(nu_eff * std::sqrt(t), 2.0));
    const double hx = width_sigmas * svm.a0 * std::sqrt(t) * vol_stretch;
    const double hy =
        std::max(0.5, width_sigmas * nu_eff * std::sqrt(t) + std::abs(svm.b(svm.a0)) * t / svm.a0);
    return {Grid1D(x0 - hx, x0 + hx, nx), Grid1D(y0 - hy, y0 + hy, ny)};
}

double ValueSurface2D::slab_at(std::size_t slab, double s, double a) const {
    const double x = std::log(std::max(s, 1e-300)), y = std::log(std::max(a, 1e-300));
    const std::size_t i = x_grid.cell(x), j = y_grid.cell(y);
    double wx = (x - x_grid.node(i)) / x_grid.spacing();
    double wy = (y - y_grid.node(j)) / y_grid.spacing();
    wx = std::clamp(wx, 0.0, 1.0);
    wy = std::clamp(wy, 0.0, 1.0);
    return (1.0 - wx) * ((1.0 - wy) * v(slab, i, j) + wy * v(slab, i, j + 1)) +
           wx * ((1.0 - wy) * v(slab, i + 1, j) + wy * v(slab, i + 1, j + 1));
}

std::size_t ValueSurface2D::slab_index(double t) const {
    if (t >= times.front()) return 0;
    if (t <= times.back()) return times.size() - 1;
    const double dt = times[0] - times[1];
    const double k = (times[0] - t) / dt;
    const auto lo = std::size_t(k);
    return (k - double(lo) <= 0.5) ? lo : lo + 1;
}

double ValueSurface2D::at(double t, double s, double a) const {
    const std::size_t k = slab_index(t);
    if (times[k] == t || k + 1 >= times.size()) return slab_at(k, s, a);
    std::size_t ka = k, kb = k + 1;
    if (times[k] < t && k > 0) {
        ka = k - 1;
        kb = k;
    }
    const double w = (times[ka] - t) / (times[ka] - times[kb]);
    return (1.0 - w) * slab_at(ka, s, a) + w * slab_at(kb, s, a);
}

namespace {

double bilinear_slab(const Grid1D& xg, const Grid1D& yg, const std::vector<double>& slab, double s, double a) {
    const double x = std::log(std::max(s, 1e-300)), y = std::log(std::max(a, 1e-300));
    const std::size_t i = xg.cell(x), j = yg.cell(y), ny = yg.n;
    double wx = (x - xg.node(i)) / xg.spacing();
    double wy = (y - yg.node(j)) / yg.spacing();
    wx = std::clamp(wx, 0.0, 1.0);
    wy = std::clamp(wy, 0.0, 1.0);
    return (1.0 - wx) * ((1.0 - wy) * slab[i * ny + j] + wy * slab[i * ny + j + 1]) +
           wx * ((1.0 - wy) * slab[(i + 1) * ny + j] + wy * slab[(i + 1) * ny + j + 1]);
}

std::size_t nearest_slab(const std::vector<double>& times, double t) {
    if (t >= times.front()) return 0;
    if (t <= times.back()) return times.size() - 1;
    const double dt = times[0] - times[1];
    const double k = (times[0] - t) / dt;
    const auto lo = std::size_t(k);
    return (k - double(lo) <= 0.5) ? lo : lo + 1;
}

} // namespace

double DeltaField::slab_at(std::size_t slab, double s, double a) const {
    return bilinear_slab(x_grid, y_grid, values[slab], s, a);
}

std::size_t DeltaField::slab_index(double t) const { return nearest_slab(times, t); }

double DeltaField::at(double t, double s, double a) const {
    const std::size_t k = slab_index(t);
    if (times[k] == t || k + 1 >= times.size()) return slab_at(k, s, a);
    std::size_t ka = k, kb = k + 1;
    if (times[k] < t && k > 0) {
        ka = k - 1;
        kb = k;
    }
    const double w = (times[ka] - t) / (times[ka] - times[kb]);
    return (1.0 - w) * slab_at(ka, s, a) + w * slab_at(kb, s, a);
}

ValueSurface2D solve_svm_semilinear_2d(const std::function<double(double)>& terminal,
                                       const market::NakedSvmSpec& svm, double t_start, double t_end,
                                       const SvmGrids& grids, const SchemeParams& params) {
    if (!(t_start < t_end)) throw ValidationError("pde_interval", "solve_svm_semilinear_2d: need t_start < t_end");
    check_grid_coverage(svm, t_end, grids);

    const AdiOperator op(svm, grids.x, grids.y);
    const std::size_t nx = grids.x.n, ny = grids.y.n, m = params.time_steps;
    const double dt = (t_end - t_start) / double(m);
    const double one_m_rho2 = 1.0 - svm.rho * svm.rho;

    ValueSurface2D out;
    out.x_grid = grids.x;
    out.y_grid = grids.y;
    out.times.resize(m + 1);
    for (std::size_t k = 0; k <= m; ++k) out.times[k] = t_end - double(k) * dt;
    out.values.reserve(m + 1);

    std::vector<double> term(nx * ny);
    for (std::size_t i = 0; i < nx; ++i) {
        const double f = terminal(std::exp(grids.x.node(i)));
        for (std::size_t j = 0; j < ny; ++j) term[i * ny + j] = f;
    }
    out.values.push_back(std::move(term));

    std::vector<double> dy(nx * ny);
    auto source = [&](const std::vector<double>& cur, std::vector<double>& src) {
        op.d_y(cur, dy);
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t j = 0; j < ny; ++j) {
                const std::size_t k = i * ny + j;
                src[k] = -0.5 * one_m_rho2 * op.src_pref[j] * dy[k] * dy[k];
            }
    };

    std::vector<double> next(nx * ny);
    for (std::size_t k = 0; k < m; ++k) {
        const bool ok = douglas_step(op, out.values.back(), next, source, dt, params);
        if (!ok) out.inner_converged = false;
        check_finite(next, out.times[k + 1]);
        out.values.push_back(next);
    }
    return out;
}

namespace {

// Shared stepper for the linearized equation around a stored u surface.
// Keeps every slab if `full` is true, otherwise only the final one.
std::vector<std::vector<double>> run_sensitivity(const ValueSurface2D& u,
                                                 const std::function<double(double)>& payoff,
                                                 const market::NakedSvmSpec& svm, const SchemeParams& params,
                                                 bool full, bool* converged_flag) {
    const std::size_t nx = u.nx(), ny = u.ny(), m = u.times.size() - 1;
    const AdiOperator op(svm, u.x_grid, u.y_grid);
    const double dt = u.times[0] - u.times[1];
    const double one_m_rho2 = 1.0 - svm.rho * svm.rho;

    std::vector<std::vector<double>> slabs;
    std::vector<double> cur(nx * ny);
    for (std::size_t i = 0; i < nx; ++i) {
        const double p = payoff(std::exp(u.x_grid.node(i)));
        for (std::size_t j = 0; j < ny; ++j) cur[i * ny + j] = p;
    }
    if (full) slabs.push_back(cur);

    std::vector<double> du_dy(nx * ny), dd_dy(nx * ny), next(nx * ny);
    bool all_ok = true;
    for (std::size_t k = 0; k < m; ++k) {
        // Advection coefficient uses u at the slab being computed (k+1), the
        // derivative of the lagged-source nonlinear step.
        op.d_y(u.values[k + 1], du_dy);
        auto source = [&](const std::vector<double>& it, std::vector<double>& src) {
            op.d_y(it, dd_dy);
            for (std::size_t i = 0; i < nx; ++i)
                for (std::size_t j = 0; j < ny; ++j) {
                    const std::size_t idx = i * ny + j;
                    src[idx] = -one_m_rho2 * op.src_pref[j] * du_dy[idx] * dd_dy[idx];
                }
        };
        const bool ok = douglas_step(op, cur, next, source, dt, params);
        all_ok = all_ok && ok;
        check_finite(next, u.times[k + 1]);
        cur = next;
        if (full) slabs.push_back(cur);
    }
    if (!full) slabs.push_back(cur);
    if (converged_flag) *converged_flag = all_ok;
    return slabs;
}

} // namespace

ValueSurface2D solve_linear_sensitivity_2d(const ValueSurface2D& u, const std::function<double(double)>& payoff,
                                           const market::NakedSvmSpec& svm, const SchemeParams& params) {
    ValueSurface2D out;
    out.times = u.times;
    out.x_grid = u.x_grid;
    out.y_grid = u.y_grid;
    out.values = run_sensitivity(u, payoff, svm, params, true, &out.inner_converged);
    return out;
}

std::vector<double> sensitivity_start_slab(const ValueSurface2D& u, const std::function<double(double)>& payoff,
                                           const market::NakedSvmSpec& svm, const SchemeParams& params) {
    return run_sensitivity(u, payoff, svm, params, false, nullptr).back();
}

ValueSurface2D solve_hedged_expectation_2d(const std::function<double(double)>& terminal,
                                           const DeltaField* delta, const market::NakedSvmSpec& svm,
                                           double t_start, double t_end, const SvmGrids& grids,
                                           const SchemeParams& params) {
    if (!(t_start < t_end))
        throw ValidationError("pde_interval", "solve_hedged_expectation_2d: need t_start < t_end");
    const std::size_t nx = grids.x.n, ny = grids.y.n, m = params.time_steps;
    if (delta && delta->times.size() != m + 1)
        throw ValidationError("pde_shape", "solve_hedged_expectation_2d: field slabs must match steps");
    const AdiOperator op(svm, grids.x, grids.y);
    const double dt = (t_end - t_start) / double(m);
    const double hx = grids.x.spacing(), hy = grids.y.spacing();

    ValueSurface2D out;
    out.x_grid = grids.x;
    out.y_grid = grids.y;
    out.times.resize(m + 1);
    for (std::size_t k = 0; k <= m; ++k) out.times[k] = t_end - double(k) * dt;
    out.values.reserve(m + 1);
    std::vector<double> term(nx * ny);
    for (std::size_t i = 0; i < nx; ++i) {
        const double f = terminal(std::exp(grids.x.node(i)));
        for (std::size_t j = 0; j < ny; ++j) term[i * ny + j] = f;
    }
    out.values.push_back(std::move(term));

    // Per-node extra coefficients at one slab: reaction c, d/dx advection ax,
    // d/dy advection ay.
    std::vector<double> c(nx * ny), ax(nx * ny), ay(nx * ny);
    auto build_extras = [&](std::size_t slab) {
        if (!delta) {
            std::fill(c.begin(), c.end(), 0.0);
            std::fill(ax.begin(), ax.end(), 0.0);
            std::fill(ay.begin(), ay.end(), 0.0);
            return;
        }
        const auto& dv = delta->values[slab];
        for (std::size_t i = 0; i < nx; ++i) {
            const double s = std::exp(grids.x.node(i));
            for (std::size_t j = 0; j < ny; ++j) {
                const double a = std::exp(grids.y.node(j));
                const double d = dv[i * ny + j];
                c[i * ny + j] = 0.5 * s * s * a * a * d * d;
                ax[i * ny + j] = -0.5 * s * a * a * d;
                ay[i * ny + j] = -0.5 * s * d * svm.rho * svm.sigma(a);
            }
        }
    };

    std::vector<double> y0(nx * ny), lower(std::max(nx, ny)), diag(std::max(nx, ny)),
        upper(std::max(nx, ny)), rhs(std::max(nx, ny)), acx(nx * ny), acy(nx * ny), acc(nx * ny);
    const double th = params.theta;
    for (std::size_t k = 0; k < m; ++k) {
        const auto& u1 = out.values.back();
        build_extras(k + 1);

        // Explicit application of the full operator at the old level.
        op.apply_x(u1, acx);
        op.apply_y(u1, acy);
        op.apply_cross(u1, acc);
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t j = 0; j < ny; ++j) {
                const std::size_t idx = i * ny + j;
                double dx_u;
                if (i == 0)
                    dx_u = (u1[ny + j] - u1[j]) / hx;
                else if (i == nx - 1)
                    dx_u = (u1[idx] - u1[(i - 1) * ny + j]) / hx;
                else
                    dx_u = (u1[(i + 1) * ny + j] - u1[(i - 1) * ny + j]) / (2.0 * hx);
                double dy_u;
                if (j == 0)
                    dy_u = (u1[i * ny + 1] - u1[idx]) / hy;
                else if (j == ny - 1)
                    dy_u = (u1[idx] - u1[i * ny + j - 1]) / hy;
                else
                    dy_u = (u1[idx + 1] - u1[idx - 1]) / (2.0 * hy);
                const double extra = c[idx] * u1[idx] + ax[idx] * dx_u + ay[idx] * dy_u;
                y0[idx] = u1[idx] + dt * (acx[idx] + acy[idx] + acc[idx] + extra) -
                          th * dt * (acx[idx] + ax[idx] * dx_u + 0.5 * c[idx] * u1[idx]);
            }

        // Implicit x sweep: (I - th dt (A_x + ax Dx + c/2)) applied row-wise.
        for (std::size_t j = 0; j < ny; ++j) {
            const double cc = op.cx[j];
            const double lo0 = cc * (1.0 / (hx * hx) + 0.5 / hx);
            const double di0 = -2.0 * cc / (hx * hx);
            const double up0 = cc * (1.0 / (hx * hx) - 0.5 / hx);
            for (std::size_t i = 0; i < nx; ++i) {
                const std::size_t idx = i * ny + j;
                rhs[i] = y0[idx];
                if (i == 0 || i == nx - 1) {
                    lower[i] = 0.0;
                    upper[i] = 0.0;
                    diag[i] = 1.0 - th * dt * 0.5 * c[idx];
                    // one-sided advection row
                    if (i == 0) {
                        diag[i] += th * dt * ax[idx] / hx;
                        upper[i] = -th * dt * ax[idx] / hx;
                    } else {
                        diag[i] -= th * dt * ax[idx] / hx;
                        lower[i] = th * dt * ax[idx] / hx;
                    }
                } else {
                    lower[i] = -th * dt * (lo0 - ax[idx] / (2.0 * hx));
                    diag[i] = 1.0 - th * dt * (di0 + 0.5 * c[idx]);
                    upper[i] = -th * dt * (up0 + ax[idx] / (2.0 * hx));
                }
            }
            std::vector<double> lo_v(lower.begin(), lower.begin() + nx), di_v(diag.begin(), diag.begin() + nx),
                up_v(upper.begin(), upper.begin() + nx), rh_v(rhs.begin(), rhs.begin() + nx);
            solve_tridiagonal(lo_v, di_v, up_v, rh_v);
            for (std::size_t i = 0; i < nx; ++i) y0[i * ny + j] = rh_v[i];
        }

        // Subtract the implicit-y explicit part, then the y sweep with the
        // remaining extras (ay Dy + c/2).
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t j = 0; j < ny; ++j) {
                const std::size_t idx = i * ny + j;
                double dy_u;
                if (j == 0)
                    dy_u = (u1[i * ny + 1] - u1[idx]) / hy;
                else if (j == ny - 1)
                    dy_u = (u1[idx] - u1[i * ny + j - 1]) / hy;
                else
                    dy_u = (u1[idx + 1] - u1[idx - 1]) / (2.0 * hy);
                y0[idx] -= th * dt * (acy[idx] + ay[idx] * dy_u + 0.5 * c[idx] * u1[idx]);
            }
        for (std::size_t i = 0; i < nx; ++i) {
            for (std::size_t j = 0; j < ny; ++j) {
                const std::size_t idx = i * ny + j;
                rhs[j] = y0[idx];
                if (j == 0 || j == ny - 1) {
                    lower[j] = -th * dt * op.ylo[j];
                    diag[j] = 1.0 - th * dt * (op.ydiag[j] + 0.5 * c[idx]);
                    upper[j] = -th * dt * op.yup[j];
                    if (j == 0) {
                        diag[j] += th * dt * ay[idx] / hy;
                        upper[j] += -th * dt * ay[idx] / hy;
                    } else {
                        diag[j] -= th * dt * ay[idx] / hy;
                        lower[j] += th * dt * ay[idx] / hy;
                    }
                } else {
                    lower[j] = -th * dt * (op.ylo[j] - ay[idx] / (2.0 * hy));
                    diag[j] = 1.0 - th * dt * (op.ydiag[j] + 0.5 * c[idx]);
                    upper[j] = -th * dt * (op.yup[j] + ay[idx] / (2.0 * hy));
                }
            }
            std::vector<double> lo_v(lower.begin(), lower.begin() + ny), di_v(diag.begin(), diag.begin() + ny),
                up_v(upper.begin(), upper.begin() + ny), rh_v(rhs.begin(), rhs.begin() + ny);
            solve_tridiagonal(lo_v, di_v, up_v, rh_v);
            for (std::size_t j = 0; j < ny; ++j) y0[i * ny + j] = rh_v[j];
        }
        check_finite(y0, out.times[k + 1]);
        out.values.push_back(y0);
    }
    return out;
}

DeltaField delta_field(const ValueSurface2D& u, const market::NakedSvmSpec& svm) {
    const std::size_t nx = u.nx(), ny = u.ny();
    const double hx = u.x_grid.spacing(), hy = u.y_grid.spacing();
    DeltaField out;
    out.times = u.times;
    out.x_grid = u.x_grid;
    out.y_grid = u.y_grid;
    out.values.assign(u.times.size(), std::vector<double>(nx * ny));

    for (std::size_t k = 0; k < u.times.size(); ++k) {
        const auto& s = u.values[k];
        auto& d = out.values[k];
        for (std::size_t i = 0; i < nx; ++i) {
            for (std::size_t j = 0; j < ny; ++j) {
                double dx;
                if (i == 0)
                    dx = (-3.0 * s[j] + 4.0 * s[ny + j] - s[2 * ny + j]) / (2.0 * hx);
                else if (i == nx - 1)
                    dx = (3.0 * s[i * ny + j] - 4.0 * s[(i - 1) * ny + j] + s[(i - 2) * ny + j]) / (2.0 * hx);
                else
                    dx = (s[(i + 1) * ny + j] - s[(i - 1) * ny + j]) / (2.0 * hx);
                double dyv;
                const std::size_t base = i * ny;
                if (j == 0)
                    dyv = (-3.0 * s[base] + 4.0 * s[base + 1] - s[base + 2]) / (2.0 * hy);
                else if (j == ny - 1)
                    dyv = (3.0 * s[base + j] - 4.0 * s[base + j - 1] + s[base + j - 2]) / (2.0 * hy);
                else
                    dyv = (s[base + j + 1] - s[base + j - 1]) / (2.0 * hy);
                const double a = std::exp(u.y_grid.node(j));
                const double sx = std::exp(u.x_grid.node(i));
                d[base + j] = -(dx + svm.rho * svm.sigma(a) / (a * a) * dyv) / sx;
                if (!std::isfinite(d[base + j]))
                    throw NumericalError("delta_nan", "delta_field: non-finite value");
            }
        }
    }
    return out;
}

} // namespace bridgekit::pde
