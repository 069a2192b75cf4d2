#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mnp/autodiff.hpp"
#include "mnp/nn.hpp"
#include "mnp/rng.hpp"

namespace mnp::enc {

// x -> concat(x, sin(Fx), cos(Fx)) with fixed frequency matrix F.
// Frequencies are drawn once at model init and never trained.
inline Array make_fourier_freqs(std::size_t n_freq, std::size_t x_dim, Rng& rng) {
    Array f = Array::mat(n_freq, x_dim);
    for (auto& v : f.v) v = rng.normal();
    return f;
}

inline Array fourier_features(const Array& x, const Array& freqs) {
    require(x.rank == 2, "fourier_features: x must be n x d");
    require(freqs.rank == 2 && freqs.d1 == x.d1, "fourier_features: frequency shape mismatch");
    std::size_t n = x.d0, d = x.d1, F = freqs.d0;
    Array out = Array::mat(n, d + 2 * F);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j);
        for (std::size_t k = 0; k < F; ++k) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += freqs.at(k, j) * x.at(i, j);
            out.at(i, d + k) = std::sin(dot);
            out.at(i, d + F + k) = std::cos(dot);
        }
    }
    return out;
}

inline std::size_t fourier_dim(std::size_t x_dim, std::size_t n_freq) {
    return x_dim + 2 * n_freq;
}

enum class EncKind { DeepSets, SetTransformer };

inline std::string enc_kind_name(EncKind k) {
    return k == EncKind::DeepSets ? "deep-sets" : "set-transformer";
}
inline EncKind enc_kind_from_name(const std::string& s) {
    if (s == "deep-sets") return EncKind::DeepSets;
    if (s == "set-transformer") return EncKind::SetTransformer;
    throw std::invalid_argument("unknown encoder kind: " + s);
}

struct EncoderConfig {
    EncKind kind = EncKind::DeepSets;
    std::size_t out_dim = 64;
    std::size_t hidden = 64;
    std::size_t heads = 4;  // attention variant only
};

inline void init_encoder(ad::ParamStore& ps, const std::string& prefix,
                         const EncoderConfig& cfg, std::size_t feat_dim, Rng& rng) {
    std::size_t in = feat_dim + 1;
    ps.add(prefix + ".null", Array::vec_n(cfg.out_dim));
    if (cfg.kind == EncKind::DeepSets) {
        nn::init_mlp(ps, prefix + ".psi", {in, cfg.hidden, cfg.hidden}, rng);
        nn::init_mlp(ps, prefix + ".rho", {cfg.hidden, cfg.hidden, cfg.out_dim}, rng);
        return;
    }
    require(cfg.hidden % cfg.heads == 0, "encoder: hidden must divide into heads");
    auto lin = [&](const std::string& name, std::size_t a, std::size_t b) {
        Array w = Array::mat(a, b);
        double sd = 1.0 / std::sqrt(static_cast<double>(a));
        for (auto& x : w.v) x = sd * rng.normal();
        ps.add(name + ".w", std::move(w));
        ps.add(name + ".b", Array::vec_n(b));
    };
    lin(prefix + ".sab0.q", in, cfg.hidden);
    lin(prefix + ".sab0.k", in, cfg.hidden);
    lin(prefix + ".sab0.v", in, cfg.hidden);
    lin(prefix + ".sab0.o", cfg.hidden, cfg.hidden);
    lin(prefix + ".sab1.q", cfg.hidden, cfg.hidden);
    lin(prefix + ".sab1.k", cfg.hidden, cfg.hidden);
    lin(prefix + ".sab1.v", cfg.hidden, cfg.hidden);
    lin(prefix + ".sab1.o", cfg.hidden, cfg.hidden);
    Array seed = Array::mat(1, cfg.hidden);
    double sd = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (auto& x : seed.v) x = sd * rng.normal();
    ps.add(prefix + ".pma.seed", std::move(seed));
    lin(prefix + ".pma.ff", cfg.hidden, cfg.hidden);
    lin(prefix + ".pma.q", cfg.hidden, cfg.hidden);
    lin(prefix + ".pma.k", cfg.hidden, cfg.hidden);
    lin(prefix + ".pma.v", cfg.hidden, cfg.hidden);
    lin(prefix + ".pma.o", cfg.hidden, cfg.hidden);
    lin(prefix + ".out", cfg.hidden, cfg.out_dim);
}

namespace detail {

inline ad::Var linear_rows(ad::Tape& t, ad::Var X, ad::ParamStore& ps,
                           const std::string& name) {
    return t.add(t.matmul(X, t.param(ps, name + ".w")), t.param(ps, name + ".b"));
}

// multihead attention block: out = Q_ + softmax(Q_h K_h^T / sqrt(dv)) V_h,
// heads re-joined, then a residual feedforward. No normalization layers.
inline ad::Var mab(ad::Tape& t, ad::Var Q, ad::Var K, ad::ParamStore& ps,
                   const std::string& prefix, std::size_t heads,
                   std::vector<Array>* attn) {
    ad::Var Q_ = linear_rows(t, Q, ps, prefix + ".q");
    ad::Var K_ = linear_rows(t, K, ps, prefix + ".k");
    ad::Var V_ = linear_rows(t, K, ps, prefix + ".v");
    std::size_t dv = t.val(Q_).d1;
    std::size_t hd = dv / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dv));
    ad::Var joined{};
    for (std::size_t h = 0; h < heads; ++h) {
        ad::Var Qh = t.cols_slice(Q_, h * hd, (h + 1) * hd);
        ad::Var Kh = t.cols_slice(K_, h * hd, (h + 1) * hd);
        ad::Var Vh = t.cols_slice(V_, h * hd, (h + 1) * hd);
        ad::Var A = t.row_softmax(t.mul_const(t.matmul(Qh, t.transpose(Kh)), scale));
        if (attn) attn->push_back(t.val(A));
        ad::Var Oh = t.matmul(A, Vh);
        joined = h == 0 ? Oh : t.hstack(joined, Oh);
    }
    ad::Var O = t.add(Q_, joined);
    return t.add(O, t.tanh(linear_rows(t, O, ps, prefix + ".o")));
}

}  // namespace detail

// Permutation-invariant encoding of {(feature row, y value)} pairs. Rows are
// presorted into a canonical order so the result is bit-identical under any
// input permutation. Empty sets return the trainable null encoding.
inline ad::Var encode_set(ad::Tape& t, ad::Var feats, ad::Var y, ad::ParamStore& ps,
                          const std::string& prefix, const EncoderConfig& cfg,
                          std::vector<Array>* attn = nullptr) {
    const Array fv = t.val(feats);
    const Array yv = t.val(y);
    require(fv.rank == 2, "encode_set: features must be a matrix");
    require(yv.rank == 1 && yv.d0 == fv.d0, "encode_set: one y per feature row");
    std::size_t n = fv.d0;
    if (n == 0) return t.param(ps, prefix + ".null");

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
        for (std::size_t j = 0; j < fv.d1; ++j) {
            if (fv.at(a, j) != fv.at(b, j)) return fv.at(a, j) < fv.at(b, j);
        }
        return yv[a] < yv[b];
    });

    ad::Var E = t.rows_select(t.hstack(feats, y), perm);
    if (cfg.kind == EncKind::DeepSets) {
        ad::Var phi = t.tanh(nn::mlp_rows(t, E, ps, prefix + ".psi"));
        ad::Var pooled = t.pool_sum(phi);
        return nn::mlp_vec(t, pooled, ps, prefix + ".rho");
    }
    ad::Var Z = detail::mab(t, E, E, ps, prefix + ".sab0", cfg.heads, attn);
    Z = detail::mab(t, Z, Z, ps, prefix + ".sab1", cfg.heads, attn);
    ad::Var ff = t.tanh(detail::linear_rows(t, Z, ps, prefix + ".pma.ff"));
    ad::Var seed = t.param(ps, prefix + ".pma.seed");
    ad::Var pooled = detail::mab(t, seed, ff, ps, prefix + ".pma", cfg.heads, attn);
    ad::Var out = detail::linear_rows(t, pooled, ps, prefix + ".out");
    // 1 x out_dim -> vector
    std::vector<std::size_t> zeros(t.val(out).d1, 0);
    ad::Var outT = t.transpose(out);
    return t.gather_cols(outT, zeros);
}

}  // namespace mnp::enc
