#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mnp/datagen.hpp"
#include "test_support.hpp"

using namespace mnp;
using dg::DataKind;
using dg::DatasetSpec;

namespace {

// independent restatement of the two-sided harmonic-mean derivative rule
double fc_interior(double h0, double h1, double s0, double s1) {
    if (s0 * s1 <= 0.0) return 0.0;
    double w1 = 2.0 * h1 + h0;
    double w2 = h1 + 2.0 * h0;
    return (w1 + w2) / (w1 / s0 + w2 / s1);
}

double fc_end(double h0, double h1, double s0, double s1) {
    double d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if (d * s0 <= 0.0) return 0.0;
    if (s0 * s1 < 0.0 && std::fabs(d) > 3.0 * std::fabs(s0)) return 3.0 * s0;
    return d;
}

double hermite(double y0, double y1, double d0, double d1, double h, double s) {
    double s2 = s * s, s3 = s2 * s;
    return (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * h * d0 +
           (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * h * d1;
}

std::vector<std::size_t> sorted_order(const Array& x) {
    std::vector<std::size_t> idx(x.d0);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return x.at(a, 0) < x.at(b, 0); });
    return idx;
}

}  // namespace

TEST_CASE("interpolator reproduces lines and node values") {
    dg::PchipNodes nodes;
    nodes.x = {0.0, 1.0, 2.0};
    nodes.y = {0.0, 1.0, 2.0};
    auto vals = dg::pchip_interpolate(nodes, {0.5, 1.25, 0.0, 1.0, 2.0});
    CHECK(vals[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(vals[1] == doctest::Approx(1.25).epsilon(1e-14));
    CHECK(vals[2] == 0.0);
    CHECK(vals[3] == 1.0);
    CHECK(vals[4] == 2.0);

    dg::PchipNodes bad;
    bad.x = {0.0, 1.0, 1.0};
    bad.y = {0.0, 1.0, 2.0};
    CHECK_THROWS_AS((void)dg::pchip_build(bad), std::invalid_argument);
}

TEST_CASE("interpolator matches the hand-computed derivative rule") {
    dg::PchipNodes nodes;
    nodes.x = {0.0, 1.0, 3.0};
    nodes.y = {0.0, 1.0, 1.5};

    double h0 = 1.0, h1 = 2.0;
    double s0 = 1.0, s1 = 0.25;
    double d0 = fc_end(h0, h1, s0, s1);
    double d1 = fc_interior(h0, h1, s0, s1);
    double d2 = fc_end(h1, h0, s1, s0);
    CHECK(d0 == doctest::Approx(1.25).epsilon(1e-14));
    CHECK(d1 == doctest::Approx(3.0 / 7.0).epsilon(1e-14));
    CHECK(d2 == 0.0);

    double want = hermite(nodes.y[1], nodes.y[2], d1, d2, h1, (2.0 - 1.0) / h1);
    double got = dg::pchip_interpolate(nodes, {2.0})[0];
    CHECK(got == doctest::Approx(want).epsilon(1e-14));
    CHECK(got == doctest::Approx(19.0 / 14.0).epsilon(1e-12));
}

TEST_CASE("monotone nodes give monotone interpolants") {
    Rng rng(701);
    for (std::size_t trial = 0; trial < 200; ++trial) {
        std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 8));
        dg::PchipNodes nodes;
        nodes.x.resize(n);
        nodes.y.resize(n);
        double x = 0.0, y = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            x += rng.uniform(0.05, 1.0);
            y += rng.uniform(0.0, 1.0);
            nodes.x[i] = x;
            nodes.y[i] = y;
        }
        dg::Pchip p = dg::pchip_build(nodes);
        double prev = -1e300;
        for (std::size_t q = 0; q <= 400; ++q) {
            double t = q == 400 ? nodes.x.back()
                                : nodes.x.front() + (nodes.x.back() - nodes.x.front()) *
                                                        static_cast<double>(q) / 400.0;
            double v = dg::pchip_eval(p, t);
            CHECK(v >= prev - 1e-12);
            prev = v;
        }
    }
}

TEST_CASE("gp samples carry the generating variance and correlation") {
    DatasetSpec spec = dg::default_spec(DataKind::GpRbf);
    spec.points = 3;
    spec.ctx_lo = spec.ctx_hi = 2;
    spec.seed = 11;
    auto fns = dg::gen_functions(spec, 1, 10000);
    double mean = 0.0, sq = 0.0;
    for (const auto& fs : fns) {
        mean += fs.y[0];
        sq += fs.y[0] * fs.y[0];
    }
    mean /= 10000.0;
    double var = sq / 10000.0 - mean * mean;
    CHECK(std::fabs(var - 1.0001) < 0.05 * 1.0001);

    // correlation at one lengthscale of separation
    bl::GpSpec k = dg::gp_spec_for(DataKind::GpRbf);
    Array pair = Array::mat(2, 1);
    pair.at(1, 0) = 0.25;
    Rng rng(703);
    double s00 = 0.0, s11 = 0.0, s01 = 0.0;
    const std::size_t reps = 10000;
    for (std::size_t i = 0; i < reps; ++i) {
        auto y = dg::gp_function_values(k, pair, rng);
        s00 += y[0] * y[0];
        s11 += y[1] * y[1];
        s01 += y[0] * y[1];
    }
    double corr = s01 / std::sqrt(s00 * s11);
    CHECK(std::fabs(corr - std::exp(-0.5)) < 0.05);
}

TEST_CASE("functions in one block share inputs, across blocks they differ") {
    DatasetSpec spec = dg::default_spec(DataKind::GpMatern);
    spec.points = 16;
    spec.ctx_hi = 15;
    spec.seed = 12;
    auto fns = dg::gen_functions(spec, 1, 40);
    for (std::size_t i = 1; i < 20; ++i)
        for (std::size_t r = 0; r < 16; ++r)
            CHECK(fns[i].x.at(r, 0) == fns[0].x.at(r, 0));
    bool differs = false;
    for (std::size_t r = 0; r < 16; ++r) differs = differs || fns[20].x.at(r, 0) != fns[0].x.at(r, 0);
    CHECK(differs);
}

TEST_CASE("monotonic draws are anchored, ordered, and normalised") {
    double noise_sq = 0.0;
    std::size_t noise_n = 0;
    bool saw_two_nodes = false;
    for (std::size_t i = 0; i < 300; ++i) {
        Rng rng(705, i);
        dg::MonotonicDraw d = dg::gen_monotonic_function(128, rng);

        REQUIRE(d.nodes.x.size() >= 2);
        saw_two_nodes = saw_two_nodes || d.nodes.x.size() == 2;
        CHECK(d.nodes.x.front() == -2.0);
        CHECK(d.nodes.x.back() == 2.0);
        for (double x : d.nodes.x) {
            CHECK(x >= -2.0);
            CHECK(x <= 2.0);
        }

        auto order = sorted_order(d.fs.x);
        for (std::size_t k = 1; k < order.size(); ++k)
            CHECK(d.pre_noise[order[k]] >= d.pre_noise[order[k - 1]] - 1e-12);

        double lo = *std::min_element(d.pre_noise.begin(), d.pre_noise.end());
        double hi = *std::max_element(d.pre_noise.begin(), d.pre_noise.end());
        CHECK(lo == doctest::Approx(-1.0).epsilon(1e-12));
        CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));

        for (std::size_t k = 0; k < d.fs.size(); ++k) {
            double e = d.fs.y[k] - d.pre_noise[k];
            noise_sq += e * e;
            ++noise_n;
        }
    }
    CHECK(saw_two_nodes);  // the zero-interior-node draw occurs and is valid
    double noise_sd = std::sqrt(noise_sq / static_cast<double>(noise_n));
    CHECK(noise_sd == doctest::Approx(0.01).epsilon(0.1));
}

TEST_CASE("convex draws have non-decreasing slopes") {
    for (std::size_t i = 0; i < 200; ++i) {
        Rng rng(707, i);
        dg::ConvexDraw d = dg::gen_convex_function(128, rng);
        auto order = sorted_order(d.fs.x);
        double prev_slope = -1e300;
        for (std::size_t k = 1; k < order.size(); ++k) {
            double dx = d.fs.x.at(order[k], 0) - d.fs.x.at(order[k - 1], 0);
            if (dx < 1e-9) continue;
            double slope = (d.pre_noise[order[k]] - d.pre_noise[order[k - 1]]) / dx;
            CHECK(slope >= prev_slope - 1e-6);
            prev_slope = slope;
        }
        double lo = *std::min_element(d.pre_noise.begin(), d.pre_noise.end());
        double hi = *std::max_element(d.pre_noise.begin(), d.pre_noise.end());
        CHECK(lo == doctest::Approx(-1.0).epsilon(1e-12));
        CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("cumulative trapezoid is exact on linear integrands and flat maps to zero") {
    const std::size_t g = 1024;
    std::vector<double> grid(g), vals(g);
    for (std::size_t i = 0; i < g; ++i) {
        grid[i] = -2.0 + 4.0 * static_cast<double>(i) / static_cast<double>(g - 1);
        vals[i] = 2.0 * grid[i] + 1.0;
    }
    auto F = dg::detail::cumtrapz(grid, vals);
    for (std::size_t i = 0; i < g; ++i) {
        double exact = grid[i] * grid[i] + grid[i] - 2.0;  // anchored at x = -2
        CHECK(std::fabs(F[i] - exact) < 1e-6);
    }

    std::vector<double> zeros(g, 0.0);
    auto Fz = dg::detail::cumtrapz(grid, zeros);
    for (double v : Fz) CHECK(v == 0.0);
    dg::detail::normalize_unit(Fz);
    for (double v : Fz) CHECK(v == 0.0);
}

TEST_CASE("diffusion fixed point, drift-only oracle, and bounded sweep") {
    std::vector<double> times(128);
    for (std::size_t i = 0; i < 128; ++i)
        times[i] = -5.0 + 10.0 * static_cast<double>(i) / 127.0;

    {
        Rng rng(709);
        std::vector<double> out;
        REQUIRE(dg::sde_trajectory(0.1, 0.1, 1.0, times, 8, rng, out));
        for (double v : out) CHECK(v == 1.0);
    }

    {
        // b = 0 leaves the pure drift x' = -a (1 - x^2); oracle is RK4 on a
        // fine grid, itself validated against the closed form
        const double a = 0.1, x0 = 0.4;
        auto f = [&](double x) { return -a * (1.0 - x * x); };
        std::vector<double> oracle(128);
        double x = x0;
        oracle[0] = x;
        for (std::size_t i = 1; i < 128; ++i) {
            const std::size_t fine = 200;
            double h = (times[i] - times[i - 1]) / static_cast<double>(fine);
            for (std::size_t s = 0; s < fine; ++s) {
                double k1 = f(x);
                double k2 = f(x + 0.5 * h * k1);
                double k3 = f(x + 0.5 * h * k2);
                double k4 = f(x + h * k3);
                x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            oracle[i] = x;
            double closed = std::tanh(std::atanh(x0) - a * (times[i] - times[0]));
            CHECK(std::fabs(oracle[i] - closed) < 1e-9);
        }

        Rng rng(710);
        std::vector<double> out;
        REQUIRE(dg::sde_trajectory(a, 0.0, x0, times, 8, rng, out));
        for (std::size_t i = 0; i < 128; ++i) CHECK(std::fabs(out[i] - oracle[i]) < 1e-4);
    }

    for (std::size_t i = 0; i < 10000; ++i) {
        Rng rng(711, i);
        FunctionSet fs = dg::gen_sde_function(32, rng);
        CHECK(fs.y[0] >= 0.2);
        CHECK(fs.y[0] <= 0.6);
        for (double v : fs.y) {
            CHECK(v > -1.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("context splitting is seeded, feasible, and uniform") {
    Rng rng(713);
    FunctionSet fs;
    fs.x = Array::mat(10, 1);
    for (auto& v : fs.x.v) v = rng.uniform(-2.0, 2.0);
    fs.y.assign(10, 0.0);

    auto s1 = dg::split_context_target(fs, 9, 9, 42);
    CHECK(s1.context.size() == 9);
    CHECK(s1.target.size() == 1);

    auto s2 = dg::split_context_target(fs, 2, 8, 42);
    auto s3 = dg::split_context_target(fs, 2, 8, 42);
    CHECK(s2.context == s3.context);
    CHECK(s2.target == s3.target);
    CHECK_THROWS_AS((void)dg::split_context_target(fs, 2, 10, 1), std::invalid_argument);

    // every index covered exactly once, in order
    std::vector<char> seen(10, 0);
    for (auto i : s2.context) seen[i] = 1;
    for (auto i : s2.target) {
        CHECK(seen[i] == 0);
        seen[i] = 1;
    }
    for (char c : seen) CHECK(c == 1);

    std::vector<double> freq(10, 0.0);
    const std::size_t reps = 10000;
    for (std::size_t r = 0; r < reps; ++r) {
        auto s = dg::split_context_target(fs, 3, 3, 9000 + r);
        for (auto i : s.context) freq[i] += 1.0;
    }
    double bound = 3.0 * std::sqrt(0.3 * 0.7 / static_cast<double>(reps));
    for (double f : freq) CHECK(std::fabs(f / reps - 0.3) < bound);
}

TEST_CASE("datasets regenerate bit-identically and respect their spec") {
    for (auto kind : {DataKind::GpRbf, DataKind::GpMatern, DataKind::GpPeriodic,
                      DataKind::Monotonic, DataKind::Convex, DataKind::Sde}) {
        DatasetSpec spec = dg::default_spec(kind);
        spec.n_train = 6;
        spec.n_val = 2;
        spec.n_test = 2;
        spec.points = 24;
        spec.ctx_hi = 10;
        spec.seed = 77;

        dg::Dataset a = dg::gen_dataset(spec);
        dg::Dataset b = dg::gen_dataset(spec);
        REQUIRE(a.train.size() == 6);
        REQUIRE(a.val.size() == 2);
        REQUIRE(a.test.size() == 2);
        auto same = [](const std::vector<FunctionSet>& u, const std::vector<FunctionSet>& v) {
            REQUIRE(u.size() == v.size());
            for (std::size_t i = 0; i < u.size(); ++i) {
                for (std::size_t k = 0; k < u[i].x.numel(); ++k)
                    CHECK(u[i].x.v[k] == v[i].x.v[k]);
                for (std::size_t k = 0; k < u[i].y.size(); ++k) CHECK(u[i].y[k] == v[i].y[k]);
            }
        };
        same(a.train, b.train);
        same(a.val, b.val);
        same(a.test, b.test);
        for (const auto& fs : a.train) {
            fs.validate();
            CHECK(fs.size() == 24);
        }

        // val and test draws differ from training draws
        bool differs = false;
        for (std::size_t k = 0; k < a.train[0].y.size(); ++k)
            differs = differs || a.train[0].y[k] != a.val[0].y[k];
        CHECK(differs);
    }
}
