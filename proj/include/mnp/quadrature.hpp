#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mnp/array.hpp"

namespace mnp::quad {

struct GaussHermite {
    std::vector<double> nodes;    // ascending, weight e^{-x^2}
    std::vector<double> weights;
};

namespace detail {

// Implicit-QL sweep on a symmetric tridiagonal matrix, rotating a single
// companion row along. Eigenvalues land in d; first eigenvector components
// land in z. Standard EISPACK recipe, stable for orders in the hundreds.
inline void tridiag_eigen_first_row(std::vector<double>& d, std::vector<double>& e,
                                    std::vector<double>& z) {
    const std::size_t n = d.size();
    const double eps = 2.220446049250313e-16;
    e.push_back(0.0);
    for (std::size_t l = 0; l < n; ++l) {
        int iter = 0;
        std::size_t m;
        do {
            for (m = l; m + 1 < n; ++m) {
                double dd = std::fabs(d[m]) + std::fabs(d[m + 1]);
                if (std::fabs(e[m]) <= eps * dd) break;
            }
            if (m != l) {
                if (iter++ == 60)
                    throw numeric_error("gauss_hermite: eigensolver failed to converge");
                double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
                double r = std::hypot(g, 1.0);
                g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
                double s = 1.0, c = 1.0, p = 0.0;
                for (std::size_t i = m; i-- > l;) {
                    double f = s * e[i];
                    double b = c * e[i];
                    r = std::hypot(f, g);
                    e[i + 1] = r;
                    if (r == 0.0) {
                        d[i + 1] -= p;
                        e[m] = 0.0;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[i + 1] - p;
                    r = (d[i] - g) * s + 2.0 * c * b;
                    p = s * r;
                    d[i + 1] = g + p;
                    g = c * r - b;
                    f = z[i + 1];
                    z[i + 1] = s * z[i] + c * f;
                    z[i] = c * z[i] - s * f;
                }
                d[l] -= p;
                e[l] = g;
                e[m] = 0.0;
            }
        } while (m != l);
    }
}

}  // namespace detail

// Golub-Welsch: nodes and weights from the Jacobi matrix of the Hermite
// recurrence (weight e^{-x^2}), diag 0 and off-diag sqrt(j/2).
inline GaussHermite gauss_hermite(std::size_t n) {
    require(n >= 1 && n <= 1000, "gauss_hermite: order out of range");
    const double sqrt_pi = 1.7724538509055160272981674833411451828;
    std::vector<double> d(n, 0.0), e(n > 1 ? n - 1 : 0), z(n, 0.0);
    for (std::size_t j = 1; j < n; ++j) e[j - 1] = std::sqrt(j / 2.0);
    z[0] = 1.0;
    detail::tridiag_eigen_first_row(d, e, z);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&d](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    GaussHermite gh;
    gh.nodes.reserve(n);
    gh.weights.reserve(n);
    for (std::size_t i : order) {
        gh.nodes.push_back(d[i]);
        gh.weights.push_back(sqrt_pi * z[i] * z[i]);
    }
    // symmetric rule: enforce exact mirror pairs
    for (std::size_t i = 0; i < n / 2; ++i) {
        double x = 0.5 * (gh.nodes[n - 1 - i] - gh.nodes[i]);
        gh.nodes[n - 1 - i] = x;
        gh.nodes[i] = -x;
        double w = 0.5 * (gh.weights[i] + gh.weights[n - 1 - i]);
        gh.weights[i] = w;
        gh.weights[n - 1 - i] = w;
    }
    if (n % 2 == 1) gh.nodes[n / 2] = 0.0;
    return gh;
}

// E_{z~N(mu,sigma^2)}[f(z)]
inline double integrate_normal(const GaussHermite& gh,
                               const std::function<double(double)>& f,
                               double mu = 0.0, double sigma = 1.0) {
    const double inv_sqrt_pi = 0.5641895835477562869480794515607725858441;
    double s = 0.0;
    const double sq2 = 1.4142135623730950488016887242096980786;
    for (std::size_t i = 0; i < gh.nodes.size(); ++i)
        s += gh.weights[i] * f(mu + sigma * sq2 * gh.nodes[i]);
    return s * inv_sqrt_pi;
}

inline double trapezoid(const std::function<double(double)>& f, double a, double b,
                        std::size_t n) {
    require(n >= 2, "trapezoid: need at least 2 points");
    double h = (b - a) / static_cast<double>(n - 1);
    double s = 0.5 * (f(a) + f(b));
    for (std::size_t i = 1; i + 1 < n; ++i) s += f(a + h * static_cast<double>(i));
    return s * h;
}

}  // namespace mnp::quad
