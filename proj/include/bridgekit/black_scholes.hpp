#pragma once

#include <cmath>
#include <stdexcept>

#include "bridgekit/numerics.hpp"

namespace bridgekit::market {

inline double black_scholes_call(double spot, double strike, double vol, double maturity) {
    if (strike <= 0.0) return spot;
    if (vol <= 0.0 || maturity <= 0.0) return std::max(spot - strike, 0.0);
    const double st = vol * std::sqrt(maturity);
    const double d1 = (std::log(spot / strike) + 0.5 * vol * vol * maturity) / st;
    return spot * normal_cdf(d1) - strike * normal_cdf(d1 - st);
}

inline double black_scholes_vega(double spot, double strike, double vol, double maturity) {
    const double st = vol * std::sqrt(maturity);
    const double d1 = (std::log(spot / strike) + 0.5 * vol * vol * maturity) / st;
    return spot * normal_pdf(d1) * std::sqrt(maturity);
}

/// Black-Scholes implied volatility by bracketed bisection refined with
/// Newton; the returned vol reprices within 1e-10.
inline double implied_vol(double price, double strike, double spot, double maturity) {
    const double intrinsic = std::max(spot - strike, 0.0);
    if (!(price > intrinsic) || !(price < spot))
        throw std::domain_error("implied_vol: price outside arbitrage bounds");
    double lo = 1e-9, hi = 1.0;
    while (black_scholes_call(spot, strike, hi, maturity) < price) {
        hi *= 2.0;
        if (hi > 64.0) throw std::domain_error("implied_vol: no bracketing volatility");
    }
    double v = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        const double err = black_scholes_call(spot, strike, v, maturity) - price;
        if (std::abs(err) < 1e-10) return v;
        if (err > 0.0) hi = v; else lo = v;
        const double vega = black_scholes_vega(spot, strike, v, maturity);
        double vn = v - err / vega;
        if (!(vn > lo && vn < hi)) vn = 0.5 * (lo + hi);
        v = vn;
    }
    return v;
}

} // namespace bridgekit::market
