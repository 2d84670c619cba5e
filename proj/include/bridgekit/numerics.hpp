#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace bridgekit {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

/// Deterministic pairwise (cascade) summation. Used by all reductions so
/// results do not depend on thread count or accumulation order.
inline double pairwise_sum(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n <= 8) {
        double s = 0.0;
        for (double v : x) s += v;
        return s;
    }
    const std::size_t h = n / 2;
    return pairwise_sum(x.subspan(0, h)) + pairwise_sum(x.subspan(h));
}

inline double pairwise_sum(const std::vector<double>& x) {
    return pairwise_sum(std::span<const double>(x.data(), x.size()));
}

/// log(sum_i exp(a_i)) with max-shift; returns -inf for empty/all -inf input.
inline double log_sum_exp(std::span<const double> a) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : a) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    std::vector<double> e(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) e[i] = std::exp(a[i] - m);
    return m + std::log(pairwise_sum(e));
}

/// Solves a tridiagonal system in place (Thomas algorithm).
/// lower[0] and upper[n-1] are ignored. diag is overwritten.
inline void solve_tridiagonal(std::vector<double>& lower, std::vector<double>& diag,
                              std::vector<double>& upper, std::vector<double>& rhs) {
    const std::size_t n = diag.size();
    for (std::size_t i = 1; i < n; ++i) {
        const double w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) {
        rhs[i] = (rhs[i] - upper[i] * rhs[i + 1]) / diag[i];
    }
}

/// Standard normal pdf.
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi); }

/// Standard normal cdf via erfc.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Inverse standard normal cdf (Acklam's rational approximation plus one
/// Halley refinement; |rel err| ~ 1e-15 away from the extreme tails).
inline double normal_inv_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_inv_cdf: p outside (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                               1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                               6.680131188771972e+01,  -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                               -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                               3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // Halley step against the exact cdf.
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * kPi) * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
    return x;
}

/// Mean and standard error of a sample (pairwise reductions).
struct MeanStdErr {
    double mean = 0.0;
    double stderr_ = 0.0;
};

inline MeanStdErr mean_stderr(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("mean_stderr: need at least 2 samples");
    const double m = pairwise_sum(x) / double(n);
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = (x[i] - m) * (x[i] - m);
    const double var = pairwise_sum(sq) / double(n - 1);
    return {m, std::sqrt(var / double(n))};
}

/// Kolmogorov-Smirnov distance between a sample and a cdf callable.
template <typename Cdf>
double ks_distance(std::vector<double> sample, Cdf&& cdf) {
    std::sort(sample.begin(), sample.end());
    const double n = double(sample.size());
    double ks = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const double f = cdf(sample[i]);
        ks = std::max(ks, std::abs(f - double(i) / n));
        ks = std::max(ks, std::abs(f - double(i + 1) / n));
    }
    return ks;
}

} // namespace bridgekit
