#pragma once

// Test-only oracles: finite differences, quadrature and a second,
// deliberately naive forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <vector>

#include "pfedbayes/bnn.hpp"
#include "pfedbayes/tensor.hpp"

namespace testing_support {

using pfedbayes::Vector;

/// Central differences of f around x, step h per coordinate.
inline Vector central_differences(const std::function<double(const Vector&)>& f, Vector x, double h = 1e-5) {
    Vector grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f(x);
        x[i] = saved - h;
        const double down = f(x);
        x[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

/// max_i |a_i - b_i| / max(1, |b_i|)
inline double max_relative_error(const Vector& a, const Vector& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    }
    return worst;
}

/// Relative error; entries smaller than 1e-3 in magnitude are compared
/// absolutely.
inline double grad_error(const Vector& analytic, const Vector& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return worst;
}

/// Composite Simpson rule on [lo, hi] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double lo, double hi, std::size_t panels = 20000) {
    const double h = (hi - lo) / static_cast<double>(panels);
    double s = f(lo) + f(hi);
    for (std::size_t i = 1; i < panels; ++i) s += f(lo + h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
}

inline double normal_pdf(double x, double mean, double sd) {
    const double z = (x - mean) / sd;
    return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

/// KL(N(m1, s1^2) || N(m2, s2^2)) by quadrature of q log(q / w).
inline double kl_by_quadrature(double m1, double s1, double m2, double s2) {
    const double lo = m1 - 12.0 * s1;
    const double hi = m1 + 12.0 * s1;
    return simpson([&](double x) {
        const double q = normal_pdf(x, m1, s1);
        if (q == 0.0) return 0.0;
        return q * (std::log(q) - std::log(normal_pdf(x, m2, s2)));
    }, lo, hi);
}

/// Straightforward MLP: explicit weight matrices built from the flat layout.
inline Vector reference_forward(const std::vector<std::size_t>& widths, const Vector& theta, const Vector& x) {
    Vector a = x;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const std::size_t in = widths[l], out = widths[l + 1];
        std::vector<std::vector<double>> w(out, std::vector<double>(in));
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t i = 0; i < in; ++i) w[o][i] = theta[offset++];
        Vector z(out);
        for (std::size_t o = 0; o < out; ++o) {
            z[o] = theta[offset + o];
            for (std::size_t i = 0; i < in; ++i) z[o] += w[o][i] * a[i];
            if (l + 2 < widths.size() && z[o] < 0) z[o] = 0;
        }
        offset += out;
        a = z;
    }
    return a;
}

inline pfedbayes::VariationalParams random_params(std::size_t n, pfedbayes::RngEngine& rng, double mu_scale = 1.0,
                                                  double rho_lo = -2.0, double rho_hi = 1.0) {
    pfedbayes::VariationalParams v = pfedbayes::VariationalParams::filled(n, 0.0, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        v.mu[i] = mu_scale * rng.normal();
        v.rho[i] = rng.uniform(rho_lo, rho_hi);
    }
    return v;
}

}  // namespace testing_support
