#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mnp/autodiff.hpp"
#include "mnp/rng.hpp"

namespace mnp::nn {

constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

// Weights N(0, 1/fan_in), biases zero. zero_last makes the output layer an
// exact zero map, which several modules rely on for identity starts.
inline void init_mlp(ad::ParamStore& ps, const std::string& prefix,
                     const std::vector<std::size_t>& sizes, Rng& rng,
                     bool zero_last = false) {
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        Array w = Array::mat(sizes[l], sizes[l + 1]);
        bool last = (l + 2 == sizes.size());
        if (!(zero_last && last)) {
            double sd = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
            for (auto& x : w.v) x = sd * rng.normal();
        }
        ps.add(prefix + ".w" + std::to_string(l), std::move(w));
        ps.add(prefix + ".b" + std::to_string(l), Array::vec_n(sizes[l + 1]));
    }
}

inline std::size_t mlp_depth(const ad::ParamStore& ps, const std::string& prefix) {
    std::size_t l = 0;
    while (ps.has(prefix + ".w" + std::to_string(l))) ++l;
    require(l > 0, "no layers under parameter prefix: " + prefix);
    return l;
}

// X is n x d_in; hidden activations are tanh, output linear.
inline ad::Var mlp_rows(ad::Tape& t, ad::Var X, ad::ParamStore& ps,
                        const std::string& prefix) {
    std::size_t L = mlp_depth(ps, prefix);
    ad::Var h = X;
    for (std::size_t l = 0; l < L; ++l) {
        ad::Var w = t.param(ps, prefix + ".w" + std::to_string(l));
        ad::Var b = t.param(ps, prefix + ".b" + std::to_string(l));
        h = t.add(t.matmul(h, w), b);
        if (l + 1 < L) h = t.tanh(h);
    }
    return h;
}

inline ad::Var mlp_vec(ad::Tape& t, ad::Var x, ad::ParamStore& ps,
                       const std::string& prefix) {
    std::size_t L = mlp_depth(ps, prefix);
    ad::Var h = x;
    for (std::size_t l = 0; l < L; ++l) {
        ad::Var w = t.param(ps, prefix + ".w" + std::to_string(l));
        ad::Var b = t.param(ps, prefix + ".b" + std::to_string(l));
        h = t.add(t.matvec(t.transpose(w), h), b);
        if (l + 1 < L) h = t.tanh(h);
    }
    return h;
}

// sum_i log N(x_i; mu_i, sigma_i) for same-shape nodes
inline ad::Var gauss_logpdf_sum(ad::Tape& t, ad::Var x, ad::Var mu, ad::Var sigma) {
    ad::Var z = t.div(t.sub(x, mu), sigma);
    ad::Var quad = t.mul_const(t.sum(t.square(z)), -0.5);
    ad::Var logs = t.sum(t.log(sigma));
    double n = static_cast<double>(t.val(x).numel());
    return t.add_const(t.sub(quad, logs), -0.5 * kLog2Pi * n);
}

// per-element log N(x_i; 0, 1) as a vector node
inline ad::Var std_normal_logpdf_elems(ad::Tape& t, ad::Var x) {
    return t.add_const(t.mul_const(t.square(x), -0.5), -0.5 * kLog2Pi);
}

inline double logsumexp(const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace mnp::nn
