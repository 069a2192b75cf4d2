#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mnp/mnp.hpp"

namespace mnp::bl {

// ---- neural process baseline ----
// Single global latent, Gaussian likelihood per point from a decoder net.
// Encoder and posterior heads mirror the transition model's inference side.

struct NpConfig {
    std::size_t z_dim = 16;
    std::size_t x_dim = 1;
    std::size_t n_fourier = 80;
    std::size_t dec_hidden = 128;  // decoder, two hidden layers
    std::size_t head_hidden = 64;  // posterior mean/std nets, two hidden layers
    enc::EncoderConfig encoder{};
    std::size_t train_samples = 1;
    std::size_t iwae_k = 20;

    std::size_t feat_dim() const { return enc::fourier_dim(x_dim, n_fourier); }

    void validate() const {
        require(z_dim >= 1 && x_dim >= 1, "np config: bad dimensions");
        require(train_samples >= 1 && iwae_k >= 1, "np config: bad sample counts");
    }
};

inline void init_np(ad::ParamStore& ps, const NpConfig& cfg, Rng& rng) {
    cfg.validate();
    ps.add("fourier.freqs", enc::make_fourier_freqs(cfg.n_fourier, cfg.x_dim, rng),
           /*trainable=*/false);
    const std::size_t fd = cfg.feat_dim();
    enc::init_encoder(ps, "enc", cfg.encoder, fd, rng);
    nn::init_mlp(ps, "np.mu", {cfg.encoder.out_dim, cfg.head_hidden, cfg.head_hidden, cfg.z_dim},
                 rng);
    nn::init_mlp(ps, "np.sigma",
                 {cfg.encoder.out_dim, cfg.head_hidden, cfg.head_hidden, cfg.z_dim}, rng);
    nn::init_mlp(ps, "np.dec", {fd + cfg.z_dim, cfg.dec_hidden, cfg.dec_hidden, 2}, rng);
}

// Gaussian posterior factor from an encoded set
inline std::pair<ad::Var, ad::Var> np_factor(ad::Tape& t, ad::Var feats, ad::Var y,
                                             ad::ParamStore& ps, const NpConfig& cfg) {
    ad::Var r = enc::encode_set(t, feats, y, ps, "enc", cfg.encoder);
    ad::Var mu = nn::mlp_vec(t, r, ps, "np.mu");
    ad::Var sg = t.add_const(t.softplus(nn::mlp_vec(t, r, ps, "np.sigma")), 1e-4);
    return {mu, sg};
}

// Per-point observation model: decoder rows to (mean, floored std)
inline std::pair<ad::Var, ad::Var> np_decode_rows(ad::Tape& t, ad::Var feats, ad::Var z,
                                                  ad::ParamStore& ps) {
    const std::size_t n = t.val(feats).d0;
    ad::Var rows = nn::mlp_rows(t, t.hstack(feats, t.repeat_row(z, n)), ps, "np.dec");
    std::vector<std::size_t> c0(n, 0), c1(n, 1);
    ad::Var mean = t.gather_cols(rows, c0);
    ad::Var sigma = t.add_const(t.softplus(t.gather_cols(rows, c1)), 1e-4);
    return {mean, sigma};
}

inline ad::Var np_objective_graph(ad::Tape& t, const FunctionSet& fs, std::size_t m,
                                  ad::ParamStore& ps, const NpConfig& cfg, Rng& rng,
                                  ObjectiveParts* parts = nullptr) {
    fs.validate();
    require(m < fs.size(), "np objective: target set must be non-empty");
    FunctionSet ctx = subset(fs, 0, m);
    FunctionSet tar = subset(fs, m, fs.size());
    ad::Var feats_full = t.constant(mnp_features(ps, fs.x));
    ad::Var feats_ctx = t.constant(mnp_features(ps, ctx.x));
    ad::Var feats_tar = t.constant(mnp_features(ps, tar.x));
    ad::Var y_full = t.constant(Array::vec(fs.y));
    ad::Var y_ctx = t.constant(Array::vec(ctx.y));
    ad::Var y_tar = t.constant(Array::vec(tar.y));

    auto [mu_f, sg_f] = np_factor(t, feats_full, y_full, ps, cfg);
    auto [mu_c, sg_c] = np_factor(t, feats_ctx, y_ctx, ps, cfg);

    ad::Var elbo = t.constant(0.0);
    ObjectiveParts acc;
    for (std::size_t k = 0; k < cfg.train_samples; ++k) {
        Array e = Array::vec_n(cfg.z_dim);
        for (auto& v : e.v) v = rng.normal();
        ad::Var z = t.add(mu_f, t.mul(sg_f, t.constant(e)));
        auto [mean, sigma] = np_decode_rows(t, feats_tar, z, ps);
        ad::Var loglik = nn::gauss_logpdf_sum(t, y_tar, mean, sigma);
        ad::Var lq_f = nn::gauss_logpdf_sum(t, z, mu_f, sg_f);
        ad::Var lq_c = nn::gauss_logpdf_sum(t, z, mu_c, sg_c);
        elbo = t.add(elbo, t.add(loglik, t.sub(lq_c, lq_f)));
        acc.logp_target += t.val(loglik)[0];
        acc.logq_ctx += t.val(lq_c)[0];
        acc.logq_full += t.val(lq_f)[0];
    }
    const double inv = 1.0 / static_cast<double>(cfg.train_samples);
    if (parts) {
        parts->logp_target = acc.logp_target * inv;
        parts->logq_ctx = acc.logq_ctx * inv;
        parts->logq_full = acc.logq_full * inv;
    }
    return t.neg(t.mul_const(elbo, inv));
}

inline double np_objective(const FunctionSet& fs, std::size_t m, ad::ParamStore& ps,
                           const NpConfig& cfg, std::uint64_t seed,
                           ObjectiveParts* parts = nullptr) {
    Rng rng(seed, 7);
    ad::Tape t;
    ad::Var loss = np_objective_graph(t, fs, m, ps, cfg, rng, parts);
    return t.val(loss)[0];
}

inline double np_iwae_ll(const FunctionSet& fs, std::size_t m, ad::ParamStore& ps,
                         const NpConfig& cfg, std::size_t K, Rng& rng) {
    fs.validate();
    require(K >= 1, "np iwae: need at least one sample");
    require(m < fs.size(), "np iwae: target set must be non-empty");
    FunctionSet ctx = subset(fs, 0, m);
    FunctionSet tar = subset(fs, m, fs.size());
    const Array feats_full_a = mnp_features(ps, fs.x);
    const Array feats_ctx_a = mnp_features(ps, ctx.x);
    const Array feats_tar_a = mnp_features(ps, tar.x);

    std::vector<double> logw(K);
    for (std::size_t k = 0; k < K; ++k) {
        Array e = Array::vec_n(cfg.z_dim);
        for (auto& v : e.v) v = rng.normal();
        ad::Tape t;
        auto [mu_f, sg_f] = np_factor(t, t.constant(feats_full_a), t.constant(Array::vec(fs.y)),
                                      ps, cfg);
        auto [mu_c, sg_c] = np_factor(t, t.constant(feats_ctx_a), t.constant(Array::vec(ctx.y)),
                                      ps, cfg);
        ad::Var z = t.add(mu_f, t.mul(sg_f, t.constant(e)));
        auto [mean, sigma] = np_decode_rows(t, t.constant(feats_tar_a), z, ps);
        ad::Var loglik = nn::gauss_logpdf_sum(t, t.constant(Array::vec(tar.y)), mean, sigma);
        logw[k] = t.val(loglik)[0] + t.val(nn::gauss_logpdf_sum(t, z, mu_c, sg_c))[0] -
                  t.val(nn::gauss_logpdf_sum(t, z, mu_f, sg_f))[0];
    }
    double lse = nn::logsumexp(logw) - std::log(static_cast<double>(K));
    require(std::isfinite(lse), "np iwae: every importance weight vanished");
    return lse / static_cast<double>(fs.size() - m);
}

inline double np_iwae_ll(const FunctionSet& fs, std::size_t m, ad::ParamStore& ps,
                         const NpConfig& cfg, std::size_t K, std::uint64_t seed) {
    Rng rng(seed, 11);
    return np_iwae_ll(fs, m, ps, cfg, K, rng);
}

inline Array np_predict(const FunctionSet& ctx, const Array& x_targets, ad::ParamStore& ps,
                        const NpConfig& cfg, std::size_t n_draws, Rng& rng) {
    ctx.validate();
    require(x_targets.rank == 2 && x_targets.d1 == ctx.x.d1, "np predict: query shape mismatch");
    const std::size_t n_tar = x_targets.d0;
    const Array feats_ctx_a = mnp_features(ps, ctx.x);
    const Array feats_tar_a = mnp_features(ps, x_targets);
    Array out = Array::mat(n_draws, n_tar);
    for (std::size_t d = 0; d < n_draws; ++d) {
        Array e = Array::vec_n(cfg.z_dim);
        for (auto& v : e.v) v = rng.normal();
        Array eo = Array::vec_n(n_tar);
        for (auto& v : eo.v) v = rng.normal();
        ad::Tape t;
        auto [mu_c, sg_c] = np_factor(t, t.constant(feats_ctx_a), t.constant(Array::vec(ctx.y)),
                                      ps, cfg);
        ad::Var z = t.add(mu_c, t.mul(sg_c, t.constant(e)));
        auto [mean, sigma] = np_decode_rows(t, t.constant(feats_tar_a), z, ps);
        ad::Var draw = t.add(mean, t.mul(sigma, t.constant(eo)));
        const Array& row = t.val(draw);
        for (std::size_t j = 0; j < n_tar; ++j) out.at(d, j) = row.v[j];
    }
    return out;
}

inline TrainResult np_train(const std::vector<FunctionSet>& data, const TrainOptions& topt,
                            ad::ParamStore& ps, const NpConfig& cfg, Rng& rng) {
    return train_core(data, topt, ps, rng,
                      [&cfg](ad::Tape& t, const FunctionSet& fs, std::size_t m,
                             ad::ParamStore& p, Rng& r) { return np_objective_graph(t, fs, m, p, cfg, r); });
}

// ---- gaussian processes ----

enum class KernelKind { Rbf, Matern, ExpSine, Additive };

inline std::string kernel_kind_name(KernelKind k) {
    switch (k) {
        case KernelKind::Rbf: return "rbf";
        case KernelKind::Matern: return "matern";
        case KernelKind::ExpSine: return "expsine";
        case KernelKind::Additive: return "additive";
    }
    return "?";
}

inline KernelKind kernel_kind_from(const std::string& s) {
    if (s == "rbf") return KernelKind::Rbf;
    if (s == "matern") return KernelKind::Matern;
    if (s == "expsine") return KernelKind::ExpSine;
    if (s == "additive") return KernelKind::Additive;
    throw std::invalid_argument("unknown kernel kind: " + s);
}

// All positive; the additive kind sums the three components, the single kinds
// read only their own fields.
struct GpSpec {
    KernelKind kind = KernelKind::Rbf;
    double ls_rbf = 0.25, var_rbf = 1.0;
    double ls_mat = 0.5, var_mat = 1.0;
    double ls_sin = 0.5, period = 0.5, var_sin = 1.0;
    double noise = 1e-4;

    void validate() const {
        for (double v : {ls_rbf, var_rbf, ls_mat, var_mat, ls_sin, period, var_sin, noise})
            require(v > 0.0 && std::isfinite(v), "gp spec: fields must be positive");
    }
};

namespace detail {

inline double dist(const Array& X, std::size_t i, const Array& Z, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < X.d1; ++c) {
        double d = X.at(i, c) - Z.at(j, c);
        s += d * d;
    }
    return std::sqrt(s);
}

inline double k_rbf(double r, double ls, double var) {
    double u = r / ls;
    return var * std::exp(-0.5 * u * u);
}

inline double k_matern(double r, double ls, double var) {
    double a = std::sqrt(5.0) * r / ls;
    return var * (1.0 + a + a * a / 3.0) * std::exp(-a);
}

inline double k_expsine(double r, double ls, double period, double var) {
    double s = std::sin(3.141592653589793238462643383279502884 * r / period);
    return var * std::exp(-2.0 * s * s / (ls * ls));
}

}  // namespace detail

inline double kernel_value(const GpSpec& spec, double r) {
    switch (spec.kind) {
        case KernelKind::Rbf: return detail::k_rbf(r, spec.ls_rbf, spec.var_rbf);
        case KernelKind::Matern: return detail::k_matern(r, spec.ls_mat, spec.var_mat);
        case KernelKind::ExpSine: return detail::k_expsine(r, spec.ls_sin, spec.period, spec.var_sin);
        case KernelKind::Additive:
            return detail::k_rbf(r, spec.ls_rbf, spec.var_rbf) +
                   detail::k_matern(r, spec.ls_mat, spec.var_mat) +
                   detail::k_expsine(r, spec.ls_sin, spec.period, spec.var_sin);
    }
    return 0.0;
}

// cross-covariance; adds noise on the diagonal only when X and Z are the same
inline Array gp_gram(const GpSpec& spec, const Array& X, const Array& Z, bool add_noise) {
    Array K = Array::mat(X.d0, Z.d0);
    for (std::size_t i = 0; i < X.d0; ++i)
        for (std::size_t j = 0; j < Z.d0; ++j)
            K.at(i, j) = kernel_value(spec, detail::dist(X, i, Z, j));
    if (add_noise)
        for (std::size_t i = 0; i < std::min(X.d0, Z.d0); ++i) K.at(i, i) += spec.noise;
    return K;
}

namespace detail {

// plain lower Cholesky; returns false on a non-positive pivot
inline bool try_cholesky(const Array& A, Array& L) {
    const std::size_t n = A.d0;
    L = Array::mat(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = A.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= L.at(i, k) * L.at(j, k);
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s)) return false;
                L.at(i, i) = std::sqrt(s);
            } else {
                L.at(i, j) = s / L.at(j, j);
            }
        }
    }
    return true;
}

}  // namespace detail

// SPD factorisation; on failure retries with jitter 1e-6 escalated tenfold,
// three escalations, then gives up.
inline Array gp_cholesky(const Array& A) {
    require(A.rank == 2 && A.d0 == A.d1, "cholesky: square matrix required");
    Array L;
    if (detail::try_cholesky(A, L)) return L;
    double jitter = 1e-6;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        Array Aj = A;
        for (std::size_t i = 0; i < A.d0; ++i) Aj.at(i, i) += jitter;
        if (detail::try_cholesky(Aj, L)) return L;
        jitter *= 10.0;
    }
    throw numeric_error("cholesky: not positive definite after 3 jitter escalations");
}

namespace detail {

inline std::vector<double> solve_lower(const Array& L, const std::vector<double>& b) {
    const std::size_t n = L.d0;
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= L.at(i, k) * x[k];
        x[i] = s / L.at(i, i);
    }
    return x;
}

inline std::vector<double> solve_upper_t(const Array& L, const std::vector<double>& b) {
    // solves L^T x = b
    const std::size_t n = L.d0;
    std::vector<double> x(n);
    for (std::size_t ii = n; ii >= 1; --ii) {
        std::size_t i = ii - 1;
        double s = b[i];
        for (std::size_t k = i + 1; k < n; ++k) s -= L.at(k, i) * x[k];
        x[i] = s / L.at(i, i);
    }
    return x;
}

inline std::vector<double> chol_solve(const Array& L, const std::vector<double>& b) {
    return solve_upper_t(L, solve_lower(L, b));
}

inline Array chol_inverse(const Array& L) {
    const std::size_t n = L.d0;
    Array inv = Array::mat(n, n);
    std::vector<double> e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        std::vector<double> col = chol_solve(L, e);
        for (std::size_t i = 0; i < n; ++i) inv.at(i, j) = col[i];
        e[j] = 0.0;
    }
    return inv;
}

}  // namespace detail

inline double gp_log_marginal(const Array& X, const std::vector<double>& y, const GpSpec& spec) {
    spec.validate();
    require(X.rank == 2 && X.d0 == y.size() && X.d0 >= 1, "gp: one output per input row");
    const std::size_t n = X.d0;
    Array L = gp_cholesky(gp_gram(spec, X, X, true));
    std::vector<double> alpha = detail::chol_solve(L, y);
    double quad = 0.0, logdet = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        quad += y[i] * alpha[i];
        logdet += std::log(L.at(i, i));
    }
    return -0.5 * quad - logdet - 0.5 * static_cast<double>(n) * nn::kLog2Pi;
}

struct GpPosterior {
    Array mean;  // length n_targets
    Array cov;   // n_targets x n_targets, latent-function covariance
};

inline GpPosterior gp_posterior(const Array& Xc, const std::vector<double>& yc, const Array& Xt,
                                const GpSpec& spec) {
    spec.validate();
    require(Xc.rank == 2 && Xc.d0 == yc.size() && Xc.d0 >= 1, "gp posterior: bad context");
    require(Xt.rank == 2 && Xt.d1 == Xc.d1, "gp posterior: query shape mismatch");
    Array L = gp_cholesky(gp_gram(spec, Xc, Xc, true));
    std::vector<double> alpha = detail::chol_solve(L, yc);
    Array Ktc = gp_gram(spec, Xt, Xc, false);
    Array Ktt = gp_gram(spec, Xt, Xt, false);

    GpPosterior post;
    post.mean = Array::vec_n(Xt.d0);
    for (std::size_t i = 0; i < Xt.d0; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < Xc.d0; ++j) s += Ktc.at(i, j) * alpha[j];
        post.mean.v[i] = s;
    }
    // cov = Ktt - V^T V with V = L^{-1} Kct
    std::vector<double> col(Xc.d0);
    Array V = Array::mat(Xc.d0, Xt.d0);
    for (std::size_t i = 0; i < Xt.d0; ++i) {
        for (std::size_t j = 0; j < Xc.d0; ++j) col[j] = Ktc.at(i, j);
        std::vector<double> v = detail::solve_lower(L, col);
        for (std::size_t j = 0; j < Xc.d0; ++j) V.at(j, i) = v[j];
    }
    post.cov = Ktt;
    for (std::size_t i = 0; i < Xt.d0; ++i)
        for (std::size_t j = 0; j < Xt.d0; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < Xc.d0; ++k) s += V.at(k, i) * V.at(k, j);
            post.cov.at(i, j) -= s;
        }
    return post;
}

// Joint conditional log-likelihood of the tail outputs given the head, by the
// difference of two marginals; empty head degrades to the plain marginal.
inline double gp_conditional_ll(const FunctionSet& fs, std::size_t m, const GpSpec& spec) {
    fs.validate();
    require(m < fs.size(), "gp conditional: target set must be non-empty");
    double full = gp_log_marginal(fs.x, fs.y, spec);
    if (m == 0) return full;
    FunctionSet ctx = subset(fs, 0, m);
    return full - gp_log_marginal(ctx.x, ctx.y, spec);
}

// ---- hyperparameter fitting ----

namespace detail {

// order of each kind's log-parameters inside the fit vector
inline std::vector<std::string> gp_param_names(KernelKind kind) {
    switch (kind) {
        case KernelKind::Rbf: return {"log_ls_rbf", "log_var_rbf", "log_noise"};
        case KernelKind::Matern: return {"log_ls_mat", "log_var_mat", "log_noise"};
        case KernelKind::ExpSine:
            return {"log_ls_sin", "log_period", "log_var_sin", "log_noise"};
        case KernelKind::Additive:
            return {"log_ls_rbf", "log_var_rbf", "log_ls_mat", "log_var_mat",
                    "log_ls_sin", "log_period", "log_var_sin", "log_noise"};
    }
    return {};
}

inline GpSpec spec_from_log(KernelKind kind, const std::vector<std::string>& names,
                            const std::vector<double>& logv) {
    GpSpec s;
    s.kind = kind;
    for (std::size_t i = 0; i < names.size(); ++i) {
        double v = std::exp(logv[i]);
        const std::string& n = names[i];
        if (n == "log_ls_rbf") s.ls_rbf = v;
        else if (n == "log_var_rbf") s.var_rbf = v;
        else if (n == "log_ls_mat") s.ls_mat = v;
        else if (n == "log_var_mat") s.var_mat = v;
        else if (n == "log_ls_sin") s.ls_sin = v;
        else if (n == "log_period") s.period = v;
        else if (n == "log_var_sin") s.var_sin = v;
        else if (n == "log_noise") s.noise = v;
    }
    return s;
}

// dK(i,j)/d log-param for one named parameter
inline double kernel_grad(const GpSpec& s, double r, const std::string& name) {
    if (name == "log_noise") return 0.0;  // handled on the diagonal
    if (name == "log_ls_rbf" || name == "log_var_rbf") {
        double k = k_rbf(r, s.ls_rbf, s.var_rbf);
        if (name == "log_var_rbf") return k;
        double u = r / s.ls_rbf;
        return k * u * u;
    }
    if (name == "log_ls_mat" || name == "log_var_mat") {
        double a = std::sqrt(5.0) * r / s.ls_mat;
        if (name == "log_var_mat") return k_matern(r, s.ls_mat, s.var_mat);
        return s.var_mat * (a * a / 3.0) * (1.0 + a) * std::exp(-a);
    }
    double k = k_expsine(r, s.ls_sin, s.period, s.var_sin);
    if (name == "log_var_sin") return k;
    const double pi = 3.141592653589793238462643383279502884;
    double phase = pi * r / s.period;
    if (name == "log_ls_sin") {
        double sn = std::sin(phase);
        return k * 4.0 * sn * sn / (s.ls_sin * s.ls_sin);
    }
    // log_period
    return k * (2.0 * phase / (s.ls_sin * s.ls_sin)) * std::sin(2.0 * phase);
}

struct LmlGrad {
    double value = 0.0;
    std::vector<double> grad;  // one per fit parameter
};

// marginal likelihood and its log-parameter gradient for one set:
// d lml / dK = (alpha alpha^T - K^{-1}) / 2, chained through the kernel
inline LmlGrad gp_lml_grad(const Array& X, const std::vector<double>& y, const GpSpec& spec,
                           const std::vector<std::string>& names) {
    const std::size_t n = X.d0;
    Array L = gp_cholesky(gp_gram(spec, X, X, true));
    std::vector<double> alpha = chol_solve(L, y);
    Array Kinv = chol_inverse(L);

    LmlGrad out;
    out.grad.assign(names.size(), 0.0);
    double quad = 0.0, logdet = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        quad += y[i] * alpha[i];
        logdet += std::log(L.at(i, i));
    }
    out.value = -0.5 * quad - logdet - 0.5 * static_cast<double>(n) * nn::kLog2Pi;

    for (std::size_t p = 0; p < names.size(); ++p) {
        double g = 0.0;
        if (names[p] == "log_noise") {
            for (std::size_t i = 0; i < n; ++i)
                g += 0.5 * (alpha[i] * alpha[i] - Kinv.at(i, i)) * spec.noise;
        } else {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double m = 0.5 * (alpha[i] * alpha[j] - Kinv.at(i, j));
                    g += m * kernel_grad(spec, dist(X, i, X, j), names[p]);
                }
        }
        out.grad[p] = g;
    }
    return out;
}

}  // namespace detail

namespace detail {

// summed marginal likelihood as a tape node over the packed log-param vector,
// with the exact closed-form gradient injected on the backward pass
inline ad::Var gp_lml_node(ad::Tape& t, ad::ParamStore& ps, const std::vector<FunctionSet>& data,
                           KernelKind kind, const std::vector<std::string>& names) {
    ad::Var lp = t.param(ps, "gp.log");
    std::vector<double> logv(t.val(lp).v);
    GpSpec spec = spec_from_log(kind, names, logv);
    double total = 0.0;
    auto grad = std::make_shared<std::vector<double>>(names.size(), 0.0);
    for (const auto& fs : data) {
        LmlGrad lg = gp_lml_grad(fs.x, fs.y, spec, names);
        total += lg.value;
        for (std::size_t p = 0; p < names.size(); ++p) (*grad)[p] += lg.grad[p];
    }
    const std::int32_t pid = lp.id;
    return t.custom(Array::scalar(total), {lp},
                    [grad, pid](ad::Tape& tt, std::int32_t self) {
                        double up = tt.grads[self].v[0];
                        Array& g = tt.grads[pid];
                        if (!g.same_shape(tt.nodes[pid].val)) {
                            g = tt.nodes[pid].val;
                            std::fill(g.v.begin(), g.v.end(), 0.0);
                        }
                        for (std::size_t p = 0; p < grad->size(); ++p)
                            g.v[p] += up * (*grad)[p];
                    },
                    "gp_lml");
}

}  // namespace detail

struct GpFitOptions {
    std::size_t restarts = 5;
    std::size_t max_steps = 120;
    double lr = 0.05;
    double min_lr = 1e-4;
};

struct GpFitResult {
    GpSpec spec;
    double objective = 0.0;            // summed marginal likelihood at the optimum
    std::vector<double> accepted_lml;  // objective after each accepted step
};

// Multi-start guarded ascent on log-hyperparameters: Adam proposes, a step is
// kept only if the summed marginal likelihood does not decrease, otherwise it
// is undone and the rate halves (with fresh optimizer state).
inline GpFitResult gp_fit(const std::vector<FunctionSet>& data, KernelKind kind, Rng& rng,
                          const GpFitOptions& fopt = {}) {
    require(!data.empty(), "gp fit: empty dataset");
    for (const auto& fs : data) fs.validate();
    const std::vector<std::string> names = detail::gp_param_names(kind);

    GpFitResult best;
    bool have_best = false;
    for (std::size_t restart = 0; restart < fopt.restarts; ++restart) {
        Array init = Array::vec_n(names.size());
        for (std::size_t i = 0; i < names.size(); ++i) {
            const std::string& n = names[i];
            double lo, hi;
            if (n == "log_noise") lo = std::log(1e-4), hi = std::log(0.1);
            else if (n.rfind("log_var", 0) == 0) lo = std::log(0.1), hi = std::log(4.0);
            else lo = std::log(0.05), hi = std::log(2.0);  // lengthscales, period
            init[i] = rng.uniform(lo, hi);
        }
        ad::ParamStore ps;
        ps.add("gp.log", std::move(init));

        auto spec_now = [&]() {
            return detail::spec_from_log(kind, names, ps.value("gp.log").v);
        };
        auto objective = [&]() {
            GpSpec spec = spec_now();
            double total = 0.0;
            for (const auto& fs : data) total += gp_log_marginal(fs.x, fs.y, spec);
            return total;
        };

        double cur;
        try {
            cur = objective();
        } catch (const numeric_error&) {
            continue;  // hopeless start
        }
        std::vector<double> accepted;
        opt::AdamConfig acfg;
        acfg.lr = fopt.lr;
        acfg.clip = 0.0;
        opt::Adam stepper(acfg);
        for (std::size_t step = 0; step < fopt.max_steps && acfg.lr >= fopt.min_lr; ++step) {
            ad::Grads grads;
            try {
                ad::Tape t;
                ad::Var loss = t.neg(detail::gp_lml_node(t, ps, data, kind, names));
                t.backward(loss);
                grads = t.param_grads();
            } catch (const numeric_error&) {
                break;
            }
            ad::ParamStore before = ps;
            stepper.step(ps, grads);
            double after;
            try {
                after = objective();
            } catch (const numeric_error&) {
                after = -std::numeric_limits<double>::infinity();
            }
            if (after >= cur) {
                cur = after;
                accepted.push_back(cur);
            } else {
                ps = before;
                acfg.lr *= 0.5;
                stepper = opt::Adam(acfg);
            }
        }
        if (!have_best || cur > best.objective) {
            best.objective = cur;
            best.spec = spec_now();
            best.accepted_lml = accepted;
            have_best = true;
        }
    }
    if (!have_best) throw numeric_error("gp fit: every restart diverged");
    return best;
}

}  // namespace mnp::bl
