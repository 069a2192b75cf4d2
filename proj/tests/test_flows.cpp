#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mnp/flows.hpp"
#include "mnp/nn.hpp"
#include "mnp/rng.hpp"
#include "test_support.hpp"

using namespace mnp;
using ad::Tape;
using ad::Var;

namespace {

flows::SplineParams random_spline(Rng& rng, double scale = 1.5) {
    std::vector<double> raw(29);
    for (auto& x : raw) x = scale * rng.normal();
    return flows::spline_params_from_raw(raw, 10, 5.0);
}

}  // namespace

TEST_CASE("zero raw parameters give the exact identity spline") {
    std::vector<double> raw(29, 0.0);
    auto p = flows::spline_params_from_raw(raw, 10, 5.0);
    p.validate();
    for (double w : p.widths) CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
    for (double d : p.derivs) CHECK(d == doctest::Approx(1.0).epsilon(1e-12));
    auto [y, ld] = flows::spline_forward(p, 0.3);
    CHECK(y == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(ld == doctest::Approx(0.0));
    auto [y2, ld2] = flows::spline_forward(p, -4.7);
    CHECK(y2 == doctest::Approx(-4.7).epsilon(1e-14));
    CHECK(ld2 == doctest::Approx(0.0));
}

TEST_CASE("spline round trip and logdet consistency") {
    Rng rng(21);
    double worst_rt = 0.0, worst_ld = 0.0;
    for (int trial = 0; trial < 300; ++trial) {
        auto p = random_spline(rng);
        // cover interior, boundary and identity tails
        double y = trial % 7 == 0 ? rng.uniform(-8.0, 8.0) : rng.uniform(-4.999, 4.999);
        auto [u, ld_f] = flows::spline_forward(p, y);
        auto [back, ld_i] = flows::spline_inverse(p, u);
        worst_rt = std::max(worst_rt, std::fabs(back - y));
        worst_ld = std::max(worst_ld, std::fabs(ld_f + ld_i));
        if (std::fabs(y) > 5.0) {
            CHECK(u == y);  // identity tail, bitwise
            CHECK(ld_f == 0.0);
        }
    }
    CHECK(worst_rt < 1e-9);
    CHECK(worst_ld < 1e-9);
}

TEST_CASE("spline logdet matches numerical derivative of the map") {
    Rng rng(22);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        auto p = random_spline(rng);
        double y = rng.uniform(-4.9, 4.9);
        auto [u0, ld] = flows::spline_forward(p, y);
        double h = 1e-6;
        double up = flows::spline_forward(p, y + h).first;
        double um = flows::spline_forward(p, y - h).first;
        double fd = (up - um) / (2.0 * h);
        worst = std::max(worst, testsup::rel_err(std::exp(ld), fd));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("spline is strictly increasing") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = random_spline(rng);
        double prev = -1e18;
        for (double y = -6.0; y <= 6.0; y += 0.05) {
            double u = flows::spline_forward(p, y).first;
            CHECK(u > prev);
            prev = u;
        }
    }
}

TEST_CASE("spline maps the boundary onto itself") {
    Rng rng(24);
    auto p = random_spline(rng);
    CHECK(flows::spline_forward(p, 5.0).first == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(flows::spline_forward(p, -5.0).first == doctest::Approx(-5.0).epsilon(1e-9));
}

TEST_CASE("invalid spline parameters are rejected") {
    flows::SplineParams p;
    p.widths.assign(10, 1.0);
    p.heights.assign(10, 1.0);
    p.derivs.assign(11, 1.0);
    p.tail = 5.0;
    p.validate();  // exact sums pass
    auto bad = p;
    bad.widths[3] = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = p;
    bad.heights[0] = 2.0;  // breaks the sum
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = p;
    bad.derivs.pop_back();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("affine flow round trip") {
    Rng rng(25);
    for (int trial = 0; trial < 100; ++trial) {
        double ls = rng.uniform(-2.0, 2.0), sh = rng.uniform(-30.0, 30.0);
        double y = rng.uniform(-60.0, 60.0);
        auto [u, ld] = flows::affine_forward(y, ls, sh);
        CHECK(ld == ls);
        auto [back, ld_i] = flows::affine_inverse(u, ls, sh);
        CHECK(back == doctest::Approx(y).epsilon(1e-12));
        CHECK(ld_i == -ls);
    }
}

TEST_CASE("batched rows agree with the scalar interface") {
    Rng rng(26);
    auto p = random_spline(rng);
    std::vector<double> ys = {-7.2, -4.4, -0.3, 0.0, 1.7, 4.99, 6.5};
    Tape t;
    auto m = flows::detail::mats_from_params(t, p, ys.size());
    auto out = flows::rqs_forward_rows(t, t.constant(Array::vec(ys)), m);
    for (std::size_t i = 0; i < ys.size(); ++i) {
        auto [u, ld] = flows::spline_forward(p, ys[i]);
        CHECK(t.val(out.y)[i] == doctest::Approx(u).epsilon(1e-14));
        CHECK(t.val(out.logdet)[i] == doctest::Approx(ld).epsilon(1e-12));
    }
}

TEST_CASE("flow gradients match finite differences through raw parameters") {
    Rng rng(27);
    for (int rep = 0; rep < 3; ++rep) {
        ad::ParamStore ps;
        Array raw = testsup::random_array(rng, 2, 4, 29, 0.8);
        ps.add("raw", raw);
        Array yv = Array::vec({-3.1, 0.4, 2.2, 6.0});  // last point is in the tail
        flows::FlowConfig cfg;
        auto builder = [yv, cfg](Tape& t, ad::ParamStore& p) {
            Var y = t.constant(yv);
            auto out = flows::flow_forward_rows(t, y, t.param(p, "raw"), cfg);
            auto inv = flows::flow_inverse_rows(t, y, t.param(p, "raw"), cfg);
            return t.add(t.add(t.sum(out.y), t.sum(out.logdet)),
                         t.add(t.sum(inv.y), t.sum(inv.logdet)));
        };
        auto rep_fd = ad::finite_diff_check(builder, ps, 1e-5);
        CHECK(rep_fd.max_rel_err < 1e-4);
    }
}

TEST_CASE("gradient flows through the transformed points") {
    Rng rng(28);
    ad::ParamStore ps;
    ps.add("y", Array::vec({-2.0, 0.5, 3.3, 7.0}));
    Array raw = testsup::random_array(rng, 2, 4, 29, 0.8);
    flows::FlowConfig cfg;
    auto builder = [raw, cfg](Tape& t, ad::ParamStore& p) {
        auto out = flows::flow_forward_rows(t, t.param(p, "y"), t.constant(raw), cfg);
        return t.add(t.sum(t.square(out.y)), t.sum(out.logdet));
    };
    auto rep_fd = ad::finite_diff_check(builder, ps, 1e-6);
    CHECK(rep_fd.max_rel_err < 1e-4);
}

TEST_CASE("zero-initialized conditioner yields the identity flow") {
    Rng rng(29);
    ad::ParamStore ps;
    nn::init_mlp(ps, "cond", {5, 16, 16, 29}, rng, true);
    Tape t;
    Array feats = testsup::random_array(rng, 2, 6, 3);
    Array zv = testsup::random_array(rng, 1, 2, 1);
    Var raw = flows::conditioner_raw_rows(t, t.constant(feats), t.constant(zv), ps, "cond");
    Array yv = testsup::random_array(rng, 1, 6, 1, 2.0);
    auto out = flows::flow_forward_rows(t, t.constant(yv), raw, flows::FlowConfig{});
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(t.val(out.y)[i] == doctest::Approx(yv[i]).epsilon(1e-12));
        CHECK(t.val(out.logdet)[i] == doctest::Approx(0.0));
    }
}
