#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mnp/autodiff.hpp"
#include "mnp/nn.hpp"

namespace mnp::flows {

enum class FlowKind { Spline, Affine };

inline std::string flow_kind_name(FlowKind k) {
    return k == FlowKind::Spline ? "spline" : "affine";
}
inline FlowKind flow_kind_from_name(const std::string& s) {
    if (s == "spline") return FlowKind::Spline;
    if (s == "affine") return FlowKind::Affine;
    throw std::invalid_argument("unknown flow kind: " + s);
}

struct FlowConfig {
    FlowKind kind = FlowKind::Spline;
    std::size_t bins = 10;
    double tail = 5.0;  // identity outside [-tail, tail]

    std::size_t param_count() const {
        return kind == FlowKind::Spline ? 3 * bins - 1 : 2;
    }
};

constexpr double kMinBinFrac = 1e-3;   // of the full 2*tail extent
constexpr double kMinDerivative = 1e-3;

// shift so that zero raw input gives exactly unit derivatives
inline double deriv_raw_offset() {
    return std::log(std::exp(1.0 - kMinDerivative) - 1.0);
}

struct FlowOut {
    ad::Var y;       // transformed points, length n
    ad::Var logdet;  // per-point log |dy'/dy|, length n
};

// normalized spline parameter matrices, one row per point
struct SplineMats {
    ad::Var W;  // n x K bin widths, each row sums to 2*tail
    ad::Var H;  // n x K bin heights, same total
    ad::Var D;  // n x (K+1) knot derivatives, boundary columns pinned to 1
    std::size_t bins;
    double tail;
};

inline SplineMats spline_mats_from_raw(ad::Tape& t, ad::Var raw, std::size_t bins,
                                       double tail) {
    const Array& rv = t.val(raw);
    require(rv.rank == 2 && rv.d1 == 3 * bins - 1,
            "spline raw params: expected n x " + std::to_string(3 * bins - 1));
    std::size_t n = rv.d0;
    double extent = 2.0 * tail;
    double min_w = kMinBinFrac * extent;
    double span = extent - static_cast<double>(bins) * min_w;

    ad::Var W = t.add_const(
        t.mul_const(t.row_softmax(t.cols_slice(raw, 0, bins)), span), min_w);
    ad::Var H = t.add_const(
        t.mul_const(t.row_softmax(t.cols_slice(raw, bins, 2 * bins)), span), min_w);
    ad::Var Dint = t.add_const(
        t.softplus(t.add_const(t.cols_slice(raw, 2 * bins, 3 * bins - 1),
                               deriv_raw_offset())),
        kMinDerivative);
    ad::Var ones = t.constant(Array::mat(n, 1, 1.0));
    ad::Var D = t.hstack(t.hstack(ones, Dint), ones);
    return SplineMats{W, H, D, bins, tail};
}

namespace detail {

// knot positions: -tail, then cumulative sums; last lands on +tail
inline ad::Var knots(ad::Tape& t, ad::Var bins_mat, double tail, std::size_t n) {
    ad::Var edge = t.constant(Array::mat(n, 1, -tail));
    return t.hstack(edge, t.add_const(t.cumsum_row(bins_mat), -tail));
}

// Bin index per point against that point's own knot row; out-of-range points
// get the bin containing zero so the discarded branch stays well-defined.
inline std::vector<std::size_t> bin_search(const Array& knot_vals, const Array& y,
                                           const std::vector<double>& mask) {
    std::size_t n = y.numel();
    std::size_t K = knot_vals.d1 - 1;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        double q = mask[i] != 0.0 ? y.v[i] : 0.0;
        std::size_t k = 0;
        while (k + 1 < K && knot_vals.at(i, k + 1) <= q) ++k;
        idx[i] = k;
    }
    return idx;
}

inline Array range_mask(const Array& y, double tail) {
    Array m = y;
    for (auto& x : m.v) x = std::fabs(x) <= tail ? 1.0 : 0.0;
    return m;
}

struct BinSlices {
    ad::Var wk, hk, xk, yk, d0, d1, s;
};

inline BinSlices gather_bins(ad::Tape& t, const SplineMats& m, ad::Var xknots,
                             ad::Var yknots, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> idx1(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx1[i] = idx[i] + 1;
    BinSlices b;
    b.wk = t.gather_cols(m.W, idx);
    b.hk = t.gather_cols(m.H, idx);
    b.xk = t.gather_cols(xknots, idx);
    b.yk = t.gather_cols(yknots, idx);
    b.d0 = t.gather_cols(m.D, idx);
    b.d1 = t.gather_cols(m.D, idx1);
    b.s = t.div(b.hk, b.wk);
    return b;
}

// derivative of the rational-quadratic at position xi inside the bin
inline std::pair<ad::Var, ad::Var> rq_denom_dnum(ad::Tape& t, const BinSlices& b,
                                                 ad::Var xi) {
    ad::Var xi1 = t.add_const(t.neg(xi), 1.0);
    ad::Var xx = t.mul(xi, xi1);
    ad::Var tsum = t.sub(t.add(b.d1, b.d0), t.mul_const(b.s, 2.0));
    ad::Var denom = t.add(b.s, t.mul(tsum, xx));
    ad::Var dnum = t.mul(t.square(b.s),
                         t.add(t.add(t.mul(b.d1, t.square(xi)),
                                     t.mul(t.mul_const(b.s, 2.0), xx)),
                               t.mul(b.d0, t.square(xi1))));
    return {denom, dnum};
}

}  // namespace detail

inline FlowOut rqs_forward_rows(ad::Tape& t, ad::Var y, const SplineMats& m) {
    const Array yv = t.val(y);  // copy: node storage may grow below
    require(yv.rank == 1, "rqs_forward_rows: y must be a vector");
    std::size_t n = yv.d0;
    ad::Var xknots = detail::knots(t, m.W, m.tail, n);
    ad::Var yknots = detail::knots(t, m.H, m.tail, n);
    Array mask = detail::range_mask(yv, m.tail);
    auto idx = detail::bin_search(t.val(xknots), yv, mask.v);
    auto b = detail::gather_bins(t, m, xknots, yknots, idx);

    ad::Var ysafe = t.select(mask, y, t.mul_const(y, 0.0));
    ad::Var xi = t.div(t.sub(ysafe, b.xk), b.wk);
    ad::Var xi1 = t.add_const(t.neg(xi), 1.0);
    ad::Var xx = t.mul(xi, xi1);
    auto [denom, dnum] = detail::rq_denom_dnum(t, b, xi);
    ad::Var num = t.mul(b.hk, t.add(t.mul(b.s, t.square(xi)), t.mul(b.d0, xx)));
    ad::Var out_sp = t.add(b.yk, t.div(num, denom));
    ad::Var ld_sp = t.sub(t.log(dnum), t.mul_const(t.log(denom), 2.0));

    ad::Var zero = t.mul_const(y, 0.0);
    return FlowOut{t.select(mask, out_sp, y), t.select(mask, ld_sp, zero)};
}

inline FlowOut rqs_inverse_rows(ad::Tape& t, ad::Var u, const SplineMats& m) {
    const Array uv = t.val(u);  // copy: node storage may grow below
    require(uv.rank == 1, "rqs_inverse_rows: input must be a vector");
    std::size_t n = uv.d0;
    ad::Var xknots = detail::knots(t, m.W, m.tail, n);
    ad::Var yknots = detail::knots(t, m.H, m.tail, n);
    Array mask = detail::range_mask(uv, m.tail);
    auto idx = detail::bin_search(t.val(yknots), uv, mask.v);
    auto b = detail::gather_bins(t, m, xknots, yknots, idx);

    ad::Var usafe = t.select(mask, u, t.mul_const(u, 0.0));
    ad::Var dlt = t.sub(usafe, b.yk);
    ad::Var tsum = t.sub(t.add(b.d1, b.d0), t.mul_const(b.s, 2.0));
    ad::Var qa = t.add(t.mul(dlt, tsum), t.mul(b.hk, t.sub(b.s, b.d0)));
    ad::Var qb = t.sub(t.mul(b.hk, b.d0), t.mul(dlt, tsum));
    ad::Var qc = t.neg(t.mul(b.s, dlt));
    ad::Var disc = t.sub(t.square(qb), t.mul_const(t.mul(qa, qc), 4.0));
    ad::Var xi = t.div(t.mul_const(qc, 2.0), t.sub(t.neg(qb), t.sqrt(disc)));
    ad::Var y_sp = t.add(b.xk, t.mul(xi, b.wk));
    auto [denom, dnum] = detail::rq_denom_dnum(t, b, xi);
    ad::Var ld_sp = t.sub(t.mul_const(t.log(denom), 2.0), t.log(dnum));

    ad::Var zero = t.mul_const(u, 0.0);
    return FlowOut{t.select(mask, y_sp, u), t.select(mask, ld_sp, zero)};
}

inline FlowOut affine_forward_rows(ad::Tape& t, ad::Var y, ad::Var raw) {
    const Array& rv = t.val(raw);
    require(rv.rank == 2 && rv.d1 == 2, "affine raw params: expected n x 2");
    std::size_t n = rv.d0;
    std::vector<std::size_t> c0(n, 0), c1(n, 1);
    ad::Var ls = t.gather_cols(raw, c0);
    ad::Var sh = t.gather_cols(raw, c1);
    return FlowOut{t.add(t.mul(y, t.exp(ls)), sh), ls};
}

inline FlowOut affine_inverse_rows(ad::Tape& t, ad::Var u, ad::Var raw) {
    const Array& rv = t.val(raw);
    require(rv.rank == 2 && rv.d1 == 2, "affine raw params: expected n x 2");
    std::size_t n = rv.d0;
    std::vector<std::size_t> c0(n, 0), c1(n, 1);
    ad::Var ls = t.gather_cols(raw, c0);
    ad::Var sh = t.gather_cols(raw, c1);
    return FlowOut{t.mul(t.sub(u, sh), t.exp(t.neg(ls))), t.neg(ls)};
}

// raw is the n x param_count conditioner output for these points
inline FlowOut flow_forward_rows(ad::Tape& t, ad::Var y, ad::Var raw,
                                 const FlowConfig& cfg) {
    if (cfg.kind == FlowKind::Affine) return affine_forward_rows(t, y, raw);
    return rqs_forward_rows(t, y, spline_mats_from_raw(t, raw, cfg.bins, cfg.tail));
}

inline FlowOut flow_inverse_rows(ad::Tape& t, ad::Var u, ad::Var raw,
                                 const FlowConfig& cfg) {
    if (cfg.kind == FlowKind::Affine) return affine_inverse_rows(t, u, raw);
    return rqs_inverse_rows(t, u, spline_mats_from_raw(t, raw, cfg.bins, cfg.tail));
}

// ---- eager single-parameter-set interface ----

struct SplineParams {
    std::vector<double> widths;   // K, positive, sum 2*tail
    std::vector<double> heights;  // K, positive, sum 2*tail
    std::vector<double> derivs;   // K+1, positive, ends 1
    double tail = 5.0;

    void validate() const {
        std::size_t K = widths.size();
        require(K >= 1 && heights.size() == K && derivs.size() == K + 1,
                "spline params: size mismatch");
        double sw = 0.0, sh = 0.0;
        for (double w : widths) {
            require(w > 0.0, "spline params: non-positive width");
            sw += w;
        }
        for (double h : heights) {
            require(h > 0.0, "spline params: non-positive height");
            sh += h;
        }
        for (double d : derivs) require(d > 0.0, "spline params: non-positive derivative");
        require(std::fabs(sw - 2.0 * tail) < 1e-9 * tail, "spline params: widths must sum to the extent");
        require(std::fabs(sh - 2.0 * tail) < 1e-9 * tail, "spline params: heights must sum to the extent");
    }
};

inline SplineParams spline_params_from_raw(const std::vector<double>& raw,
                                           std::size_t bins, double tail) {
    require(raw.size() == 3 * bins - 1, "spline raw params: wrong length");
    ad::Tape t;
    Array m = Array::mat(1, raw.size());
    m.v = raw;
    auto sm = spline_mats_from_raw(t, t.constant(m), bins, tail);
    SplineParams p;
    p.tail = tail;
    p.widths = t.val(sm.W).v;
    p.heights = t.val(sm.H).v;
    p.derivs = t.val(sm.D).v;
    return p;
}

namespace detail {

inline SplineMats mats_from_params(ad::Tape& t, const SplineParams& p, std::size_t n) {
    std::size_t K = p.widths.size();
    Array W = Array::mat(n, K), H = Array::mat(n, K), D = Array::mat(n, K + 1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            W.at(i, k) = p.widths[k];
            H.at(i, k) = p.heights[k];
        }
        for (std::size_t k = 0; k <= K; ++k) D.at(i, k) = p.derivs[k];
    }
    return SplineMats{t.constant(W), t.constant(H), t.constant(D), K, p.tail};
}

}  // namespace detail

// returns (transformed value, log |d out / d in|)
inline std::pair<double, double> spline_forward(const SplineParams& p, double y) {
    p.validate();
    ad::Tape t;
    auto m = detail::mats_from_params(t, p, 1);
    auto out = rqs_forward_rows(t, t.constant(Array::vec({y})), m);
    return {t.val(out.y)[0], t.val(out.logdet)[0]};
}

inline std::pair<double, double> spline_inverse(const SplineParams& p, double u) {
    p.validate();
    ad::Tape t;
    auto m = detail::mats_from_params(t, p, 1);
    auto out = rqs_inverse_rows(t, t.constant(Array::vec({u})), m);
    return {t.val(out.y)[0], t.val(out.logdet)[0]};
}

inline std::pair<double, double> affine_forward(double y, double log_scale, double shift) {
    return {std::exp(log_scale) * y + shift, log_scale};
}

inline std::pair<double, double> affine_inverse(double u, double log_scale, double shift) {
    return {(u - shift) * std::exp(-log_scale), -log_scale};
}

// conditioner: per-point features and the shared latent in, raw flow params out
inline ad::Var conditioner_raw_rows(ad::Tape& t, ad::Var feats, ad::Var z,
                                    ad::ParamStore& ps, const std::string& prefix) {
    const Array& fv = t.val(feats);
    require(fv.rank == 2, "conditioner: features must be a matrix");
    ad::Var zin = t.repeat_row(z, fv.d0);
    return nn::mlp_rows(t, t.hstack(feats, zin), ps, prefix);
}

}  // namespace mnp::flows
