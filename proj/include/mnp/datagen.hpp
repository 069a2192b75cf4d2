#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mnp/baselines.hpp"
#include "mnp/mnp.hpp"

namespace mnp::dg {

enum class DataKind { GpRbf, GpMatern, GpPeriodic, Monotonic, Convex, Sde };

inline std::string data_kind_name(DataKind k) {
    switch (k) {
        case DataKind::GpRbf: return "gp-rbf";
        case DataKind::GpMatern: return "gp-matern";
        case DataKind::GpPeriodic: return "gp-periodic";
        case DataKind::Monotonic: return "monotonic";
        case DataKind::Convex: return "convex";
        case DataKind::Sde: return "sde";
    }
    return "?";
}

inline DataKind data_kind_from(const std::string& s) {
    if (s == "gp-rbf") return DataKind::GpRbf;
    if (s == "gp-matern") return DataKind::GpMatern;
    if (s == "gp-periodic") return DataKind::GpPeriodic;
    if (s == "monotonic") return DataKind::Monotonic;
    if (s == "convex") return DataKind::Convex;
    if (s == "sde") return DataKind::Sde;
    throw std::invalid_argument("unknown dataset kind: " + s);
}

struct DatasetSpec {
    DataKind kind = DataKind::GpRbf;
    std::size_t n_train = 50000, n_val = 5000, n_test = 5000;
    std::size_t points = 128;
    std::size_t ctx_lo = 2, ctx_hi = 50;
    std::uint64_t seed = 0;

    void validate() const {
        require(n_train >= 1 && n_val >= 1 && n_test >= 1, "dataset spec: counts must be positive");
        require(points >= 3, "dataset spec: need at least 3 points per function");
        require(ctx_lo >= 2 && ctx_lo <= ctx_hi && ctx_hi <= points - 1,
                "dataset spec: context range must sit inside [2, points-1]");
    }
};

inline DatasetSpec default_spec(DataKind kind) {
    DatasetSpec s;
    s.kind = kind;
    if (kind == DataKind::Monotonic || kind == DataKind::Convex) s.ctx_hi = 20;
    return s;
}

// generating hyperparameters of the three GP dataset variants
inline bl::GpSpec gp_spec_for(DataKind kind) {
    bl::GpSpec s;
    switch (kind) {
        case DataKind::GpRbf:
            s.kind = bl::KernelKind::Rbf;
            s.ls_rbf = 0.25;
            s.var_rbf = 1.0;
            s.noise = 1e-4;
            break;
        case DataKind::GpMatern:
            s.kind = bl::KernelKind::Matern;
            s.ls_mat = 0.5;
            s.var_mat = 1.0;
            s.noise = 1e-4;
            break;
        case DataKind::GpPeriodic:
            s.kind = bl::KernelKind::ExpSine;
            s.ls_sin = 0.5;
            s.period = 0.5;
            s.var_sin = 1.0;
            s.noise = 1e-3;
            break;
        default: throw std::invalid_argument("gp_spec_for: not a GP dataset kind");
    }
    return s;
}

// ---- monotone cubic interpolation ----

struct PchipNodes {
    std::vector<double> x, y;
};

struct Pchip {
    std::vector<double> x, y, d;  // node derivatives, Fritsch-Carlson rule
};

inline Pchip pchip_build(const PchipNodes& nodes) {
    const std::size_t n = nodes.x.size();
    require(n >= 2 && nodes.y.size() == n, "pchip: need matching x/y with at least two nodes");
    for (std::size_t i = 1; i < n; ++i)
        require(nodes.x[i] > nodes.x[i - 1], "pchip: node x values must be strictly increasing");

    std::vector<double> h(n - 1), slope(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        h[i] = nodes.x[i + 1] - nodes.x[i];
        slope[i] = (nodes.y[i + 1] - nodes.y[i]) / h[i];
    }

    Pchip p;
    p.x = nodes.x;
    p.y = nodes.y;
    p.d.assign(n, 0.0);

    if (n == 2) {
        p.d[0] = p.d[1] = slope[0];
        return p;
    }

    // interior: weighted harmonic mean when adjacent slopes share a sign
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (slope[i - 1] * slope[i] > 0.0) {
            double w1 = 2.0 * h[i] + h[i - 1];
            double w2 = h[i] + 2.0 * h[i - 1];
            p.d[i] = (w1 + w2) / (w1 / slope[i - 1] + w2 / slope[i]);
        }
    }

    // one-sided three-point ends, clipped to preserve shape
    auto endpoint = [](double h0, double h1, double s0, double s1) {
        double d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
        if (d * s0 <= 0.0) return 0.0;
        if (s0 * s1 < 0.0 && std::fabs(d) > 3.0 * std::fabs(s0)) return 3.0 * s0;
        return d;
    };
    p.d[0] = endpoint(h[0], h[1], slope[0], slope[1]);
    p.d[n - 1] = endpoint(h[n - 2], h[n - 3], slope[n - 2], slope[n - 3]);
    return p;
}

inline double pchip_eval(const Pchip& p, double t) {
    require(t >= p.x.front() && t <= p.x.back(), "pchip: query outside the node span");
    std::size_t i =
        static_cast<std::size_t>(std::upper_bound(p.x.begin(), p.x.end(), t) - p.x.begin());
    if (i > 0) --i;
    if (i + 1 >= p.x.size()) i = p.x.size() - 2;

    double h = p.x[i + 1] - p.x[i];
    double s = (t - p.x[i]) / h;
    double s2 = s * s, s3 = s2 * s;
    double h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    double h10 = s3 - 2.0 * s2 + s;
    double h01 = -2.0 * s3 + 3.0 * s2;
    double h11 = s3 - s2;
    return h00 * p.y[i] + h10 * h * p.d[i] + h01 * p.y[i + 1] + h11 * h * p.d[i + 1];
}

inline std::vector<double> pchip_interpolate(const PchipNodes& nodes,
                                             const std::vector<double>& queries) {
    Pchip p = pchip_build(nodes);
    std::vector<double> out(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) out[i] = pchip_eval(p, queries[i]);
    return out;
}

// ---- shared pieces ----

namespace detail {

// one stream per (split, function, purpose) so generation parallelises
inline std::uint64_t stream_of(std::uint64_t split, std::uint64_t index, std::uint64_t salt) {
    return (split << 56) ^ (index << 8) ^ salt;
}

// affine map of the values onto [-1, 1]; a flat function maps to zeros
inline void normalize_unit(std::vector<double>& v) {
    double lo = v[0], hi = v[0];
    for (double t : v) {
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    if (hi <= lo) {
        std::fill(v.begin(), v.end(), 0.0);
        return;
    }
    for (double& t : v) t = 2.0 * (t - lo) / (hi - lo) - 1.0;
}

// cumulative trapezoid integral over an increasing grid, anchored at zero
inline std::vector<double> cumtrapz(const std::vector<double>& grid,
                                    const std::vector<double>& vals) {
    require(grid.size() == vals.size() && grid.size() >= 2, "cumtrapz: grid/value mismatch");
    std::vector<double> out(grid.size(), 0.0);
    for (std::size_t i = 1; i < grid.size(); ++i)
        out[i] = out[i - 1] + 0.5 * (vals[i - 1] + vals[i]) * (grid[i] - grid[i - 1]);
    return out;
}

inline double lerp_grid(const std::vector<double>& grid, const std::vector<double>& vals,
                        double t) {
    std::size_t i =
        static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), t) - grid.begin());
    if (i > 0) --i;
    if (i + 1 >= grid.size()) i = grid.size() - 2;
    double w = (t - grid[i]) / (grid[i + 1] - grid[i]);
    return (1.0 - w) * vals[i] + w * vals[i + 1];
}

}  // namespace detail

// GP function values at given inputs: y = L u with u standard normal
inline std::vector<double> gp_function_values(const bl::GpSpec& spec, const Array& x, Rng& rng) {
    const std::size_t n = x.d0;
    Array L = bl::gp_cholesky(bl::gp_gram(spec, x, x, true));
    std::vector<double> u(n), y(n, 0.0);
    for (auto& v : u) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k <= i; ++k) y[i] += L.at(i, k) * u[k];
    return y;
}

// ---- monotonic functions ----

struct MonotonicDraw {
    PchipNodes nodes;
    std::vector<double> pre_noise;  // normalized outputs before observation noise
    FunctionSet fs;
};

inline PchipNodes monotonic_nodes(Rng& rng) {
    std::size_t n_inc = static_cast<std::size_t>(rng.poisson(5.0)) + 1;
    std::vector<double> inc = rng.dirichlet_flat(n_inc);
    double sum = 0.0;
    for (auto& v : inc) {
        v += 0.01;
        sum += v;
    }
    for (auto& v : inc) v *= 4.0 / sum;

    PchipNodes nodes;
    nodes.x.resize(n_inc + 1);
    nodes.y.resize(n_inc + 1);
    nodes.x[0] = -2.0;
    double cx = -2.0;
    for (std::size_t i = 0; i < n_inc; ++i) {
        cx += inc[i];
        nodes.x[i + 1] = cx;
    }
    nodes.x[n_inc] = 2.0;  // increments sum to 4 exactly; pin the rounding
    double cy = 0.0;
    for (std::size_t i = 0; i <= n_inc; ++i) {
        cy += rng.gamma2();
        nodes.y[i] = cy;
    }
    return nodes;
}

inline MonotonicDraw gen_monotonic_function(std::size_t points, Rng& rng) {
    MonotonicDraw d;
    d.nodes = monotonic_nodes(rng);
    Pchip p = pchip_build(d.nodes);

    d.fs.x = Array::mat(points, 1);
    for (auto& v : d.fs.x.v) v = rng.uniform(-2.0, 2.0);
    d.pre_noise.resize(points);
    for (std::size_t i = 0; i < points; ++i) d.pre_noise[i] = pchip_eval(p, d.fs.x.at(i, 0));
    detail::normalize_unit(d.pre_noise);

    d.fs.y.resize(points);
    for (std::size_t i = 0; i < points; ++i) d.fs.y[i] = d.pre_noise[i] + 0.01 * rng.normal();
    return d;
}

// ---- convex functions ----

struct ConvexDraw {
    std::vector<double> pre_noise;
    FunctionSet fs;
};

inline ConvexDraw gen_convex_function(std::size_t points, Rng& rng) {
    PchipNodes nodes = monotonic_nodes(rng);
    Pchip p = pchip_build(nodes);

    const std::size_t g = 1024;
    std::vector<double> grid(g), integrand(g);
    for (std::size_t i = 0; i < g; ++i) {
        grid[i] = -2.0 + 4.0 * static_cast<double>(i) / static_cast<double>(g - 1);
        integrand[i] = pchip_eval(p, grid[i]);
    }
    std::vector<double> F = detail::cumtrapz(grid, integrand);
    double shift = rng.uniform(-0.5, 0.5);
    double scale = rng.uniform(0.5, 2.0);
    for (auto& v : F) v = scale * (v + shift);

    ConvexDraw d;
    d.fs.x = Array::mat(points, 1);
    for (auto& v : d.fs.x.v) v = rng.uniform(-2.0, 2.0);
    d.pre_noise.resize(points);
    for (std::size_t i = 0; i < points; ++i)
        d.pre_noise[i] = detail::lerp_grid(grid, F, d.fs.x.at(i, 0));
    detail::normalize_unit(d.pre_noise);

    d.fs.y.resize(points);
    for (std::size_t i = 0; i < points; ++i) d.fs.y[i] = d.pre_noise[i] + 0.01 * rng.normal();
    return d;
}

// ---- diffusion trajectories ----

// Heun predictor-corrector with the Stratonovich reading of the noise term.
// Returns false if the path leaves [-1.0001, 1.0001].
inline bool sde_trajectory(double a, double b, double x0, const std::vector<double>& times,
                           std::size_t substeps, Rng& rng, std::vector<double>& out) {
    auto f = [&](double x) { return -(a + x * b * b) * (1.0 - x * x); };
    auto g = [&](double x) { return b * (1.0 - x * x); };

    out.assign(times.size(), 0.0);
    double x = x0;
    out[0] = x;
    for (std::size_t i = 1; i < times.size(); ++i) {
        double h = (times[i] - times[i - 1]) / static_cast<double>(substeps);
        double sqrt_h = std::sqrt(h);
        for (std::size_t s = 0; s < substeps; ++s) {
            double dw = sqrt_h * rng.normal();
            double xp = x + f(x) * h + g(x) * dw;
            x = x + 0.5 * (f(x) + f(xp)) * h + 0.5 * (g(x) + g(xp)) * dw;
            if (std::fabs(x) > 1.0001) return false;
        }
        out[i] = x;
    }
    return true;
}

inline FunctionSet gen_sde_function(std::size_t points, Rng& rng) {
    std::vector<double> times(points);
    for (std::size_t i = 0; i < points; ++i)
        times[i] = -5.0 + 10.0 * static_cast<double>(i) / static_cast<double>(points - 1);

    FunctionSet fs;
    fs.x = Array::mat(points, 1);
    for (std::size_t i = 0; i < points; ++i) fs.x.at(i, 0) = times[i];

    std::vector<double> traj;
    for (;;) {
        double x0 = rng.uniform(0.2, 0.6);
        if (sde_trajectory(0.1, 0.1, x0, times, 8, rng, traj)) break;
    }
    fs.y = traj;
    return fs;
}

// ---- dataset assembly ----

// split tags: 1 train, 2 val, 3 test. GP variants reuse one set of input
// locations per block of 20 consecutive functions.
inline std::vector<FunctionSet> gen_functions(const DatasetSpec& spec, std::uint64_t split,
                                              std::size_t count) {
    spec.validate();
    std::vector<FunctionSet> out;
    out.reserve(count);

    const bool is_gp = spec.kind == DataKind::GpRbf || spec.kind == DataKind::GpMatern ||
                       spec.kind == DataKind::GpPeriodic;
    if (is_gp) {
        bl::GpSpec gspec = gp_spec_for(spec.kind);
        Array block_x;
        Array block_L;
        for (std::size_t i = 0; i < count; ++i) {
            if (i % 20 == 0) {
                Rng xr(spec.seed, detail::stream_of(split, i / 20, 1));
                block_x = Array::mat(spec.points, 1);
                for (auto& v : block_x.v) v = xr.uniform(-2.0, 2.0);
                block_L = bl::gp_cholesky(bl::gp_gram(gspec, block_x, block_x, true));
            }
            Rng fr(spec.seed, detail::stream_of(split, i, 0));
            FunctionSet fs;
            fs.x = block_x;
            fs.y.assign(spec.points, 0.0);
            std::vector<double> u(spec.points);
            for (auto& v : u) v = fr.normal();
            for (std::size_t r = 0; r < spec.points; ++r)
                for (std::size_t k = 0; k <= r; ++k) fs.y[r] += block_L.at(r, k) * u[k];
            out.push_back(std::move(fs));
        }
        return out;
    }

    for (std::size_t i = 0; i < count; ++i) {
        Rng fr(spec.seed, detail::stream_of(split, i, 0));
        switch (spec.kind) {
            case DataKind::Monotonic:
                out.push_back(gen_monotonic_function(spec.points, fr).fs);
                break;
            case DataKind::Convex: out.push_back(gen_convex_function(spec.points, fr).fs); break;
            case DataKind::Sde: out.push_back(gen_sde_function(spec.points, fr)); break;
            default: break;
        }
    }
    return out;
}

struct Dataset {
    DatasetSpec spec;
    std::vector<FunctionSet> train, val, test;
};

inline Dataset gen_dataset(const DatasetSpec& spec) {
    Dataset d;
    d.spec = spec;
    d.train = gen_functions(spec, 1, spec.n_train);
    d.val = gen_functions(spec, 2, spec.n_val);
    d.test = gen_functions(spec, 3, spec.n_test);
    return d;
}

// ---- context/target splitting ----

struct ContextTargetSplit {
    std::vector<std::size_t> context, target;  // both ascending
};

inline ContextTargetSplit split_context_target(const FunctionSet& fs, std::size_t lo,
                                               std::size_t hi, std::uint64_t seed) {
    fs.validate();
    require(lo >= 1 && lo <= hi && hi < fs.size(),
            "context split: range must leave at least one target");
    Rng rng(seed, 17);
    std::size_t m = lo + static_cast<std::size_t>(
                             rng.uniform_int(0, static_cast<std::int64_t>(hi - lo)));
    std::vector<std::size_t> perm = random_perm(fs.size(), rng);

    ContextTargetSplit s;
    s.context.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
    s.target.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
    std::sort(s.context.begin(), s.context.end());
    std::sort(s.target.begin(), s.target.end());
    return s;
}

// context rows first, target rows after: the layout the objectives expect
inline FunctionSet arrange_split(const FunctionSet& fs, const ContextTargetSplit& s) {
    std::vector<std::size_t> order = s.context;
    order.insert(order.end(), s.target.begin(), s.target.end());
    return permute_points(fs, order);
}

}  // namespace mnp::dg
