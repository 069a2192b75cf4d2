#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mnp/autodiff.hpp"
#include "mnp/flows.hpp"
#include "mnp/nn.hpp"
#include "mnp/optim.hpp"
#include "mnp/quadrature.hpp"
#include "mnp/rng.hpp"
#include "mnp/setenc.hpp"

namespace mnp {

// Stacked per-point transition model. Outputs start as independent standard
// normals and pass through `steps` latent-conditioned invertible maps; the
// inference chain walks the same maps in reverse, sharing their parameters.
struct MnpConfig {
    std::size_t steps = 3;
    std::size_t z_dim = 16;
    std::size_t x_dim = 1;
    std::size_t n_fourier = 80;
    std::size_t cond_hidden = 128;  // transition conditioner, two hidden layers
    std::size_t head_hidden = 64;   // posterior mean/std nets, two hidden layers
    flows::FlowConfig flow{};
    enc::EncoderConfig encoder{};
    std::size_t train_samples = 1;  // latent paths per objective evaluation
    std::size_t iwae_k = 20;

    std::size_t feat_dim() const { return enc::fourier_dim(x_dim, n_fourier); }

    void validate() const {
        require(steps >= 1, "config: steps must be at least 1");
        require(z_dim >= 1, "config: z_dim must be at least 1");
        require(x_dim >= 1, "config: x_dim must be at least 1");
        require(train_samples >= 1, "config: train_samples must be at least 1");
        require(iwae_k >= 1, "config: iwae_k must be at least 1");
    }
};

inline std::string gen_prefix(std::size_t step) { return "gen.t" + std::to_string(step); }
inline std::string inf_prefix(std::size_t step) { return "inf.t" + std::to_string(step); }

// Parameter layout: one conditioner per transition step, one shared set
// encoder, one mean net and one std net per step. Frequency matrix is fixed.
inline void init_mnp(ad::ParamStore& ps, const MnpConfig& cfg, Rng& rng) {
    cfg.validate();
    ps.add("fourier.freqs", enc::make_fourier_freqs(cfg.n_fourier, cfg.x_dim, rng),
           /*trainable=*/false);
    const std::size_t fd = cfg.feat_dim();
    for (std::size_t s = 1; s <= cfg.steps; ++s)
        nn::init_mlp(ps, gen_prefix(s) + ".cond",
                     {fd + cfg.z_dim, cfg.cond_hidden, cfg.cond_hidden, cfg.flow.param_count()},
                     rng, /*zero_last=*/true);  // zero head: every transition starts as identity
    enc::init_encoder(ps, "enc", cfg.encoder, fd, rng);
    for (std::size_t s = 1; s <= cfg.steps; ++s) {
        nn::init_mlp(ps, inf_prefix(s) + ".mu",
                     {cfg.z_dim + cfg.encoder.out_dim, cfg.head_hidden, cfg.head_hidden, cfg.z_dim},
                     rng);
        nn::init_mlp(ps, inf_prefix(s) + ".sigma",
                     {cfg.z_dim + cfg.encoder.out_dim, cfg.head_hidden, cfg.head_hidden, cfg.z_dim},
                     rng);
    }
}

inline Array mnp_features(const ad::ParamStore& ps, const Array& x) {
    return enc::fourier_features(x, ps.value("fourier.freqs"));
}

struct FunctionSet {
    Array x;                // n x d inputs
    std::vector<double> y;  // n outputs

    std::size_t size() const { return y.size(); }

    void validate() const {
        require(x.rank == 2, "function set: x must be n x d");
        require(x.d0 == y.size(), "function set: one y per x row");
        require(x.all_finite(), "function set: non-finite input");
        for (double v : y) require(std::isfinite(v), "function set: non-finite output");
    }
};

inline FunctionSet subset(const FunctionSet& fs, std::size_t lo, std::size_t hi) {
    require(lo <= hi && hi <= fs.size(), "subset: bad row range");
    FunctionSet out;
    out.x = Array::mat(hi - lo, fs.x.d1);
    out.y.assign(fs.y.begin() + static_cast<std::ptrdiff_t>(lo),
                 fs.y.begin() + static_cast<std::ptrdiff_t>(hi));
    for (std::size_t i = lo; i < hi; ++i)
        for (std::size_t j = 0; j < fs.x.d1; ++j) out.x.at(i - lo, j) = fs.x.at(i, j);
    return out;
}

inline FunctionSet permute_points(const FunctionSet& fs, const std::vector<std::size_t>& perm) {
    require(perm.size() == fs.size(), "permute_points: length mismatch");
    FunctionSet out;
    out.x = Array::mat(fs.size(), fs.x.d1);
    out.y.resize(fs.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.y[i] = fs.y[perm[i]];
        for (std::size_t j = 0; j < fs.x.d1; ++j) out.x.at(i, j) = fs.x.at(perm[i], j);
    }
    return out;
}

// ---- sampling primitives ----

inline Array sample_initial(std::size_t n, Rng& rng) {
    Array y0 = Array::vec_n(n);
    for (auto& v : y0.v) v = rng.normal();
    return y0;
}

inline std::vector<Array> sample_latent_prior(const MnpConfig& cfg, Rng& rng) {
    std::vector<Array> z(cfg.steps);
    for (auto& zs : z) {
        zs = Array::vec_n(cfg.z_dim);
        for (auto& v : zs.v) v = rng.normal();
    }
    return z;
}

inline double std_normal_logpdf_total(const Array& a) {
    double s = 0.0;
    for (double v : a.v) s += -0.5 * v * v - 0.5 * nn::kLog2Pi;
    return s;
}

inline double latent_path_logpdf(const std::vector<Array>& zpath) {
    double s = 0.0;
    for (const auto& z : zpath) s += std_normal_logpdf_total(z);
    return s;
}

// T x z_dim of standard normal noise, one row per step
inline Array draw_eps(const MnpConfig& cfg, Rng& rng) {
    Array e = Array::mat(cfg.steps, cfg.z_dim);
    for (auto& v : e.v) v = rng.normal();
    return e;
}

// ---- graph cores ----

struct InferChain {
    std::vector<ad::Var> z;      // z[s-1] is the step-s latent, s = 1..steps
    std::vector<ad::Var> mu;     // factor means, same indexing
    std::vector<ad::Var> sigma;  // factor stds after the softplus floor
    ad::Var logq;                // joint density of z under the chain's factors
    std::vector<ad::Var> ys;     // ys[s] is the step-s output vector, s = 0..steps
};

// Reverse sweep s = steps..1: encode the current outputs, form the Gaussian
// factor conditioned on the step above (all-zero sentinel at the top), take or
// score the latent, then invert the step's transition to expose the outputs
// below. `eps` drives fresh reparameterised samples; `given` instead scores an
// existing path (its Vars must live on the same tape).
inline InferChain infer_chain(ad::Tape& t, ad::Var feats, ad::Var y, ad::ParamStore& ps,
                              const MnpConfig& cfg, const Array* eps,
                              const std::vector<ad::Var>* given = nullptr) {
    require((eps != nullptr) != (given != nullptr), "infer_chain: pass exactly one of eps/given");
    if (eps) require(eps->rank == 2 && eps->d0 == cfg.steps && eps->d1 == cfg.z_dim,
                     "infer_chain: eps must be steps x z_dim");
    if (given) require(given->size() == cfg.steps, "infer_chain: need one latent per step");
    const std::size_t n = t.val(y).d0;

    InferChain out;
    out.z.resize(cfg.steps);
    out.mu.resize(cfg.steps);
    out.sigma.resize(cfg.steps);
    out.ys.resize(cfg.steps + 1);
    out.ys[cfg.steps] = y;
    out.logq = t.constant(0.0);
    ad::Var z_above = t.constant(Array::vec_n(cfg.z_dim));  // sentinel, all zero

    for (std::size_t s = cfg.steps; s >= 1; --s) {
        ad::Var r = enc::encode_set(t, feats, out.ys[s], ps, "enc", cfg.encoder);
        ad::Var h = t.concat(z_above, r);
        ad::Var mu = nn::mlp_vec(t, h, ps, inf_prefix(s) + ".mu");
        ad::Var sg = t.add_const(
            t.softplus(nn::mlp_vec(t, h, ps, inf_prefix(s) + ".sigma")), 1e-4);
        ad::Var zs;
        if (given) {
            zs = (*given)[s - 1];
        } else {
            Array e = Array::vec_n(cfg.z_dim);
            for (std::size_t j = 0; j < cfg.z_dim; ++j) e.v[j] = eps->at(s - 1, j);
            zs = t.add(mu, t.mul(sg, t.constant(e)));
        }
        out.logq = t.add(out.logq, nn::gauss_logpdf_sum(t, zs, mu, sg));
        out.z[s - 1] = zs;
        out.mu[s - 1] = mu;
        out.sigma[s - 1] = sg;
        if (n > 0) {
            try {
                ad::Var raw = flows::conditioner_raw_rows(t, feats, zs, ps, gen_prefix(s) + ".cond");
                out.ys[s - 1] = flows::flow_inverse_rows(t, out.ys[s], raw, cfg.flow).y;
            } catch (const numeric_error& e) {
                throw numeric_error("transition step " + std::to_string(s) + ": " + e.what());
            }
        } else {
            out.ys[s - 1] = out.ys[s];  // empty set, nothing to invert
        }
        z_above = zs;
    }
    return out;
}

struct DensityOut {
    ad::Var per_point;  // length n
    ad::Var total;
};

// Inverts the chain top-down, accumulating per-point inverse log-derivatives,
// and scores what remains under the initial standard normal.
inline DensityOut log_density_graph(ad::Tape& t, ad::Var feats, ad::Var y,
                                    const std::vector<ad::Var>& z, ad::ParamStore& ps,
                                    const MnpConfig& cfg) {
    require(z.size() == cfg.steps, "log_density: need one latent per step");
    require(t.val(y).d0 > 0, "log_density: empty point set");
    ad::Var cur = y;
    ad::Var acc = t.mul_const(y, 0.0);
    for (std::size_t s = cfg.steps; s >= 1; --s) {
        try {
            ad::Var raw = flows::conditioner_raw_rows(t, feats, z[s - 1], ps, gen_prefix(s) + ".cond");
            flows::FlowOut inv = flows::flow_inverse_rows(t, cur, raw, cfg.flow);
            cur = inv.y;
            acc = t.add(acc, inv.logdet);
        } catch (const numeric_error& e) {
            throw numeric_error("transition step " + std::to_string(s) + ": " + e.what());
        }
    }
    ad::Var pp = t.add(acc, nn::std_normal_logpdf_elems(t, cur));
    return {pp, t.sum(pp)};
}

// ---- eager wrappers ----

inline double log_density_given_z(const FunctionSet& fs, const std::vector<Array>& zpath,
                                  ad::ParamStore& ps, const MnpConfig& cfg) {
    fs.validate();
    ad::Tape t;
    ad::Var feats = t.constant(mnp_features(ps, fs.x));
    ad::Var y = t.constant(Array::vec(fs.y));
    std::vector<ad::Var> z(zpath.size());
    for (std::size_t i = 0; i < zpath.size(); ++i) z[i] = t.constant(zpath[i]);
    DensityOut d = log_density_graph(t, feats, y, z, ps, cfg);
    return t.val(d.total)[0];
}

// Runs the forward chain from given initial outputs; returns all intermediate
// output vectors, index s holding the step-s state.
inline std::vector<Array> generate_states(const Array& x, const Array& y0,
                                          const std::vector<Array>& zpath, ad::ParamStore& ps,
                                          const MnpConfig& cfg) {
    require(y0.rank == 1 && y0.d0 == x.d0, "generate: one initial output per input row");
    require(zpath.size() == cfg.steps, "generate: need one latent per step");
    ad::Tape t;
    ad::Var feats = t.constant(mnp_features(ps, x));
    ad::Var cur = t.constant(y0);
    std::vector<Array> states;
    states.push_back(y0);
    for (std::size_t s = 1; s <= cfg.steps; ++s) {
        try {
            ad::Var raw = flows::conditioner_raw_rows(t, feats, t.constant(zpath[s - 1]), ps,
                                                      gen_prefix(s) + ".cond");
            cur = flows::flow_forward_rows(t, cur, raw, cfg.flow).y;
        } catch (const numeric_error& e) {
            throw numeric_error("transition step " + std::to_string(s) + ": " + e.what());
        }
        states.push_back(t.val(cur));
    }
    return states;
}

// ---- conditional objective and evaluation ----

struct ObjectiveParts {
    double logp_target = 0.0;
    double logq_ctx = 0.0;
    double logq_full = 0.0;
};

// Negated single- or multi-sample estimate of the conditional bound: draw the
// latent path from the full-set chain, score it under the context chain, and
// credit the target outputs' density under that path.
inline ad::Var objective_graph(ad::Tape& t, const FunctionSet& fs, std::size_t m,
                               ad::ParamStore& ps, const MnpConfig& cfg, Rng& rng,
                               ObjectiveParts* parts = nullptr) {
    fs.validate();
    require(m < fs.size(), "objective: target set must be non-empty");
    const Array feats_all = mnp_features(ps, fs.x);
    FunctionSet ctx = subset(fs, 0, m);
    FunctionSet tar = subset(fs, m, fs.size());
    ad::Var feats_full = t.constant(feats_all);
    ad::Var feats_ctx = t.constant(mnp_features(ps, ctx.x));
    ad::Var feats_tar = t.constant(mnp_features(ps, tar.x));
    ad::Var y_full = t.constant(Array::vec(fs.y));
    ad::Var y_ctx = t.constant(Array::vec(ctx.y));
    ad::Var y_tar = t.constant(Array::vec(tar.y));

    ad::Var elbo = t.constant(0.0);
    ObjectiveParts acc;
    for (std::size_t k = 0; k < cfg.train_samples; ++k) {
        Array eps = draw_eps(cfg, rng);
        InferChain full = infer_chain(t, feats_full, y_full, ps, cfg, &eps);
        InferChain cchain = infer_chain(t, feats_ctx, y_ctx, ps, cfg, nullptr, &full.z);
        DensityOut den = log_density_graph(t, feats_tar, y_tar, full.z, ps, cfg);
        elbo = t.add(elbo, t.add(den.total, t.sub(cchain.logq, full.logq)));
        acc.logp_target += t.val(den.total)[0];
        acc.logq_ctx += t.val(cchain.logq)[0];
        acc.logq_full += t.val(full.logq)[0];
    }
    const double inv = 1.0 / static_cast<double>(cfg.train_samples);
    if (parts) {
        parts->logp_target = acc.logp_target * inv;
        parts->logq_ctx = acc.logq_ctx * inv;
        parts->logq_full = acc.logq_full * inv;
    }
    return t.neg(t.mul_const(elbo, inv));
}

inline double objective_conditional(const FunctionSet& fs, std::size_t m, ad::ParamStore& ps,
                                    const MnpConfig& cfg, std::uint64_t seed,
                                    ObjectiveParts* parts = nullptr) {
    Rng rng(seed, 7);
    ad::Tape t;
    ad::Var loss = objective_graph(t, fs, m, ps, cfg, rng, parts);
    return t.val(loss)[0];
}

// Importance-weighted per-target-point conditional log-likelihood. Proposal is
// the full-set chain; weights carry the context chain as the effective prior.
inline double iwae_conditional_ll(const FunctionSet& fs, std::size_t m, ad::ParamStore& ps,
                                  const MnpConfig& cfg, std::size_t K, Rng& rng) {
    fs.validate();
    require(K >= 1, "iwae: need at least one sample");
    require(m < fs.size(), "iwae: target set must be non-empty");
    const Array feats_all = mnp_features(ps, fs.x);
    FunctionSet ctx = subset(fs, 0, m);
    FunctionSet tar = subset(fs, m, fs.size());
    const Array feats_ctx_a = mnp_features(ps, ctx.x);
    const Array feats_tar_a = mnp_features(ps, tar.x);

    std::vector<double> logw(K);
    for (std::size_t k = 0; k < K; ++k) {
        Array eps = draw_eps(cfg, rng);
        ad::Tape t;
        ad::Var feats_full = t.constant(feats_all);
        ad::Var feats_ctx = t.constant(feats_ctx_a);
        ad::Var feats_tar = t.constant(feats_tar_a);
        ad::Var y_full = t.constant(Array::vec(fs.y));
        ad::Var y_ctx = t.constant(Array::vec(ctx.y));
        ad::Var y_tar = t.constant(Array::vec(tar.y));
        InferChain full = infer_chain(t, feats_full, y_full, ps, cfg, &eps);
        InferChain cchain = infer_chain(t, feats_ctx, y_ctx, ps, cfg, nullptr, &full.z);
        DensityOut den = log_density_graph(t, feats_tar, y_tar, full.z, ps, cfg);
        logw[k] = t.val(den.total)[0] + t.val(cchain.logq)[0] - t.val(full.logq)[0];
    }
    double lse = nn::logsumexp(logw) - std::log(static_cast<double>(K));
    require(std::isfinite(lse), "iwae: every importance weight vanished");
    return lse / static_cast<double>(fs.size() - m);
}

inline double iwae_conditional_ll(const FunctionSet& fs, std::size_t m, ad::ParamStore& ps,
                                  const MnpConfig& cfg, std::size_t K, std::uint64_t seed) {
    Rng rng(seed, 11);
    return iwae_conditional_ll(fs, m, ps, cfg, K, rng);
}

// Draws from the predictive: latent path from the context chain, fresh initial
// outputs at the query inputs, forward through the transitions. Row per draw.
inline Array predict(const FunctionSet& ctx, const Array& x_targets, ad::ParamStore& ps,
                     const MnpConfig& cfg, std::size_t n_draws, Rng& rng) {
    ctx.validate();
    require(x_targets.rank == 2 && x_targets.d1 == ctx.x.d1, "predict: query shape mismatch");
    const std::size_t n_tar = x_targets.d0;
    const Array feats_ctx_a = mnp_features(ps, ctx.x);
    const Array feats_tar_a = mnp_features(ps, x_targets);
    Array out = Array::mat(n_draws, n_tar);
    for (std::size_t d = 0; d < n_draws; ++d) {
        Array eps = draw_eps(cfg, rng);
        Array y0 = sample_initial(n_tar, rng);
        ad::Tape t;
        ad::Var feats_ctx = t.constant(feats_ctx_a);
        ad::Var y_ctx = t.constant(Array::vec(ctx.y));
        InferChain chain = infer_chain(t, feats_ctx, y_ctx, ps, cfg, &eps);
        ad::Var feats_tar = t.constant(feats_tar_a);
        ad::Var cur = t.constant(y0);
        for (std::size_t s = 1; s <= cfg.steps; ++s) {
            ad::Var raw = flows::conditioner_raw_rows(t, feats_tar, chain.z[s - 1], ps,
                                                      gen_prefix(s) + ".cond");
            cur = flows::flow_forward_rows(t, cur, raw, cfg.flow).y;
        }
        const Array& row = t.val(cur);
        for (std::size_t j = 0; j < n_tar; ++j) out.at(d, j) = row.v[j];
    }
    return out;
}

// ---- training ----

struct TrainOptions {
    std::size_t steps = 500;
    std::size_t batch = 16;
    std::size_t ctx_lo = 2;
    std::size_t ctx_hi = 20;
    opt::AdamConfig adam{};
    std::function<void(std::size_t step, double loss)> on_step{};
};

struct TrainResult {
    std::vector<double> loss_trace;
    bool aborted = false;
    std::string abort_reason;
};

// Adam on a per-episode loss graph, batches drawn with replacement, point
// order and context size resampled per element. A non-finite evaluation rolls
// the parameters back to the last completed step and stops. `make_loss` builds
// the scalar loss Var for one (set, split) episode.
template <class MakeLoss>
TrainResult train_core(const std::vector<FunctionSet>& data, const TrainOptions& topt,
                       ad::ParamStore& ps, Rng& rng, MakeLoss&& make_loss) {
    require(!data.empty(), "train: empty dataset");
    require(topt.batch >= 1 && topt.ctx_lo <= topt.ctx_hi, "train: bad options");
    TrainResult res;
    opt::Adam adam(topt.adam);
    ad::ParamStore last_good = ps;
    const double inv_b = 1.0 / static_cast<double>(topt.batch);
    for (std::size_t step = 0; step < topt.steps; ++step) {
        ad::Grads acc;
        double loss_sum = 0.0;
        try {
            for (std::size_t b = 0; b < topt.batch; ++b) {
                const FunctionSet& base =
                    data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
                require(base.size() >= 2, "train: sets need at least two points");
                FunctionSet fs = permute_points(base, random_perm(base.size(), rng));
                std::size_t hi = std::min(topt.ctx_hi, fs.size() - 1);
                std::size_t lo = std::min(topt.ctx_lo, hi);
                std::size_t m = static_cast<std::size_t>(
                    rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
                ad::Tape t;
                ad::Var loss = make_loss(t, fs, m, ps, rng);
                loss_sum += t.val(loss)[0] * inv_b;
                t.backward(loss);
                for (auto& [name, g] : t.param_grads()) {
                    auto it = acc.find(name);
                    if (it == acc.end()) {
                        for (double& v : g.v) v *= inv_b;
                        acc.emplace(name, std::move(g));
                    } else {
                        for (std::size_t i = 0; i < g.v.size(); ++i) it->second.v[i] += g.v[i] * inv_b;
                    }
                }
            }
            require(std::isfinite(loss_sum), "train: non-finite batch loss");
        } catch (const numeric_error& e) {
            ps = last_good;
            res.aborted = true;
            res.abort_reason = e.what();
            break;
        }
        adam.step(ps, acc);
        last_good = ps;
        res.loss_trace.push_back(loss_sum);
        if (topt.on_step) topt.on_step(step, loss_sum);
    }
    return res;
}

inline TrainResult train(const std::vector<FunctionSet>& data, const TrainOptions& topt,
                         ad::ParamStore& ps, const MnpConfig& cfg, Rng& rng) {
    return train_core(data, topt, ps, rng,
                      [&cfg](ad::Tape& t, const FunctionSet& fs, std::size_t m,
                             ad::ParamStore& p, Rng& r) { return objective_graph(t, fs, m, p, cfg, r); });
}

// ---- structural checks ----

// Max deviation between evaluations on a set and on a permuted copy under
// common random numbers: fixed-path density over a full shuffle, then the
// importance estimate with context and target shuffled in place.
inline double check_exchangeability(ad::ParamStore& ps, const MnpConfig& cfg,
                                    const FunctionSet& fs, std::size_t m, std::uint64_t seed,
                                    std::size_t K = 8) {
    fs.validate();
    require(m < fs.size(), "exchangeability: target set must be non-empty");
    Rng zr(seed, 101);
    std::vector<Array> zpath = sample_latent_prior(cfg, zr);
    Rng pr(seed, 202);
    double d0 = log_density_given_z(fs, zpath, ps, cfg);
    double d1 = log_density_given_z(permute_points(fs, random_perm(fs.size(), pr)), zpath, ps, cfg);
    double dev = std::fabs(d0 - d1);

    std::vector<std::size_t> perm(fs.size());
    std::vector<std::size_t> pc = random_perm(m, pr);
    std::vector<std::size_t> pt = random_perm(fs.size() - m, pr);
    for (std::size_t i = 0; i < m; ++i) perm[i] = pc[i];
    for (std::size_t i = m; i < fs.size(); ++i) perm[i] = m + pt[i - m];
    double i0 = iwae_conditional_ll(fs, m, ps, cfg, K, seed + 303);
    double i1 = iwae_conditional_ll(permute_points(fs, perm), m, ps, cfg, K, seed + 303);
    return std::max(dev, std::fabs(i0 - i1));
}

struct ConsistencyGrid {
    double y1_lo = -2.0, y1_hi = 2.0;
    std::size_t y1_n = 9;
    double y2_lo = -8.0, y2_hi = 8.0;
    std::size_t y2_n = 400;  // trapezoid interval count
    std::size_t gh_n = 200;
};

// Single-step, scalar-latent witness that marginalising a second point away
// reproduces the single-point density: p(y1) computed directly against the
// same quadrature with the y2 integral carried explicitly. Returns the max
// relative gap over the y1 grid.
inline double check_marginal_consistency(ad::ParamStore& ps, const MnpConfig& cfg,
                                         const Array& x_pair, const ConsistencyGrid& g = {}) {
    require(cfg.steps == 1 && cfg.z_dim == 1, "marginal check: needs steps=1, z_dim=1");
    require(x_pair.rank == 2 && x_pair.d0 == 2, "marginal check: needs exactly two inputs");
    require(g.y1_n >= 2 && g.y2_n >= 8, "marginal check: grid too small");
    const Array ff = mnp_features(ps, x_pair);
    const std::size_t n1 = g.y1_n, n2 = g.y2_n + 1;
    const double h2 = (g.y2_hi - g.y2_lo) / static_cast<double>(g.y2_n);

    // one batched row set per latent node: the y1 grid at the first input,
    // then the y2 trapezoid nodes at the second
    Array feats = Array::mat(n1 + n2, ff.d1);
    Array yrows = Array::vec_n(n1 + n2);
    for (std::size_t a = 0; a < n1; ++a) {
        for (std::size_t j = 0; j < ff.d1; ++j) feats.at(a, j) = ff.at(0, j);
        yrows.v[a] = g.y1_lo + (g.y1_hi - g.y1_lo) * static_cast<double>(a) / static_cast<double>(n1 - 1);
    }
    for (std::size_t b = 0; b < n2; ++b) {
        for (std::size_t j = 0; j < ff.d1; ++j) feats.at(n1 + b, j) = ff.at(1, j);
        yrows.v[n1 + b] = g.y2_lo + h2 * static_cast<double>(b);
    }

    quad::GaussHermite gh = quad::gauss_hermite(g.gh_n);
    const double root2 = std::sqrt(2.0), rootpi = std::sqrt(3.141592653589793238462643383279502884);
    std::vector<double> direct(n1, 0.0), marg(n1, 0.0);
    for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
        const double cw = gh.weights[i] / rootpi;
        if (cw == 0.0) continue;
        ad::Tape t;
        ad::Var fv = t.constant(feats);
        ad::Var yv = t.constant(yrows);
        std::vector<ad::Var> z{t.constant(Array::vec({root2 * gh.nodes[i]}))};
        DensityOut d = log_density_graph(t, fv, yv, z, ps, cfg);
        const Array& pp = t.val(d.per_point);
        double i2 = 0.0;
        for (std::size_t b = 0; b < n2; ++b) {
            double w = (b == 0 || b == n2 - 1) ? 0.5 : 1.0;
            i2 += w * std::exp(pp.v[n1 + b]);
        }
        i2 *= h2;
        for (std::size_t a = 0; a < n1; ++a) {
            double p1 = std::exp(pp.v[a]);
            direct[a] += cw * p1;
            marg[a] += cw * p1 * i2;
        }
    }
    double worst = 0.0;
    for (std::size_t a = 0; a < n1; ++a) {
        require(direct[a] > 0.0, "marginal check: degenerate direct density");
        worst = std::max(worst, std::fabs(direct[a] - marg[a]) / direct[a]);
    }
    return worst;
}

}  // namespace mnp
