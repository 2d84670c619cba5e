#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace bridgekit::market {

/// Prior stochastic volatility model under the reference measure:
///   dS = S a dW,   da = b(a) dt + sigma(a) dZ,   d<W,Z> = rho dt.
/// The lognormal family has b = 0, sigma(a) = nu * a; arbitrary coefficient
/// functions can be supplied for custom dynamics.
struct NakedSvmSpec {
    enum class Family { LognormalSabr, Custom };

    Family family = Family::LognormalSabr;
    double rho = 0.0;
    double s0 = 1.0;
    double a0 = 0.2;
    double nu = 0.0; // lognormal family only

    std::function<double(double)> drift_b;
    std::function<double(double)> volvol_sigma;
    std::function<double(double)> drift_b_prime;     // used by tangent-process estimators
    std::function<double(double)> volvol_sigma_prime;

    static NakedSvmSpec lognormal(double alpha, double nu_, double rho_, double s0_) {
        NakedSvmSpec m;
        m.family = Family::LognormalSabr;
        m.rho = rho_;
        m.s0 = s0_;
        m.a0 = alpha;
        m.nu = nu_;
        m.validate();
        return m;
    }

    static NakedSvmSpec custom(std::function<double(double)> b, std::function<double(double)> sigma,
                               double rho_, double s0_, double a0_) {
        NakedSvmSpec m;
        m.family = Family::Custom;
        m.drift_b = std::move(b);
        m.volvol_sigma = std::move(sigma);
        m.rho = rho_;
        m.s0 = s0_;
        m.a0 = a0_;
        m.validate();
        return m;
    }

    void validate() const {
        if (!(rho > -1.0 && rho < 1.0)) throw std::invalid_argument("NakedSvmSpec: rho must be in (-1,1)");
        if (!(s0 > 0.0)) throw std::invalid_argument("NakedSvmSpec: s0 must be > 0");
        if (!(a0 > 0.0)) throw std::invalid_argument("NakedSvmSpec: a0 must be > 0");
    }

    double b(double a) const {
        if (family == Family::LognormalSabr) return 0.0;
        return drift_b ? drift_b(a) : 0.0;
    }
    double sigma(double a) const {
        if (family == Family::LognormalSabr) return nu * a;
        return volvol_sigma(a);
    }
    double b_prime(double a) const {
        if (family == Family::LognormalSabr) return 0.0;
        if (drift_b_prime) return drift_b_prime(a);
        const double h = 1e-5 * std::max(1.0, std::abs(a));
        return (b(a + h) - b(a - h)) / (2.0 * h);
    }
    double sigma_prime(double a) const {
        if (family == Family::LognormalSabr) return nu;
        if (volvol_sigma_prime) return volvol_sigma_prime(a);
        const double h = 1e-5 * std::max(1.0, std::abs(a));
        return (sigma(a + h) - sigma(a - h)) / (2.0 * h);
    }

    /// Effective lognormal vol-of-vol used for grid sizing.
    double nu_effective() const { return sigma(a0) / a0; }
};

} // namespace bridgekit::market
