#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mnp/setenc.hpp"
#include "test_support.hpp"

using namespace mnp;
using ad::Tape;
using ad::Var;

namespace {

struct Setup {
    ad::ParamStore ps;
    Array feats;
    Array yv;
};

Setup make_setup(enc::EncKind kind, std::size_t n, std::size_t d, unsigned seed) {
    Setup s;
    Rng rng(seed);
    enc::EncoderConfig cfg{kind, 12, 16, 4};
    enc::init_encoder(s.ps, "enc", cfg, d, rng);
    s.feats = testsup::random_array(rng, 2, n, d);
    s.yv = testsup::random_array(rng, 1, n, 1);
    return s;
}

Array run_encode(Setup& s, enc::EncKind kind, const std::vector<std::size_t>& order) {
    enc::EncoderConfig cfg{kind, 12, 16, 4};
    Array pf = Array::mat(s.feats.d0, s.feats.d1);
    Array py = Array::vec_n(s.yv.d0);
    for (std::size_t i = 0; i < order.size(); ++i) {
        for (std::size_t j = 0; j < s.feats.d1; ++j) pf.at(i, j) = s.feats.at(order[i], j);
        py[i] = s.yv[order[i]];
    }
    Tape t;
    Var r = enc::encode_set(t, t.constant(pf), t.constant(py), s.ps, "enc", cfg);
    return t.val(r);
}

}  // namespace

TEST_CASE("fourier features layout and values") {
    Rng rng(31);
    Array freqs = enc::make_fourier_freqs(3, 1, rng);
    Array x = Array::mat(2, 1);
    x.at(0, 0) = 0.5;
    x.at(1, 0) = -1.25;
    Array f = enc::fourier_features(x, freqs);
    REQUIRE(f.d0 == 2);
    REQUIRE(f.d1 == enc::fourier_dim(1, 3));
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(f.at(i, 0) == x.at(i, 0));
        for (std::size_t k = 0; k < 3; ++k) {
            double dot = freqs.at(k, 0) * x.at(i, 0);
            CHECK(f.at(i, 1 + k) == doctest::Approx(std::sin(dot)).epsilon(1e-15));
            CHECK(f.at(i, 4 + k) == doctest::Approx(std::cos(dot)).epsilon(1e-15));
        }
    }
}

TEST_CASE("encodings are invariant to input permutation, bit for bit") {
    for (auto kind : {enc::EncKind::DeepSets, enc::EncKind::SetTransformer}) {
        auto s = make_setup(kind, 7, 3, 101);
        std::vector<std::size_t> ident(7);
        std::iota(ident.begin(), ident.end(), 0);
        Array base = run_encode(s, kind, ident);
        Rng rng(55);
        for (int rep = 0; rep < 8; ++rep) {
            auto order = ident;
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<std::size_t>(
                                            rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
            Array enc2 = run_encode(s, kind, order);
            for (std::size_t k = 0; k < base.numel(); ++k) CHECK(base.v[k] == enc2.v[k]);
        }
    }
}

TEST_CASE("empty set returns the trainable null encoding") {
    auto s = make_setup(enc::EncKind::DeepSets, 0, 3, 102);
    enc::EncoderConfig cfg{enc::EncKind::DeepSets, 12, 16, 4};
    Tape t;
    Var r = enc::encode_set(t, t.constant(Array::mat(0, 3)), t.constant(Array::vec_n(0)),
                            s.ps, "enc", cfg);
    const Array& null_val = s.ps.value("enc.null");
    for (std::size_t k = 0; k < 12; ++k) CHECK(t.val(r)[k] == null_val[k]);
    // gradient reaches the null parameter
    auto [v, g] = ad::eval_and_grad(t, t.sum(t.square(r)));
    CHECK(g.count("enc.null") == 1);
}

TEST_CASE("single element set encodes without error") {
    for (auto kind : {enc::EncKind::DeepSets, enc::EncKind::SetTransformer}) {
        auto s = make_setup(kind, 1, 2, 103);
        std::vector<std::size_t> one{0};
        Array r = run_encode(s, kind, one);
        CHECK(r.numel() == 12);
        for (double x : r.v) CHECK(std::isfinite(x));
    }
}

TEST_CASE("deep sets encoding matches a hand-rolled reimplementation") {
    auto s = make_setup(enc::EncKind::DeepSets, 4, 2, 104);
    enc::EncoderConfig cfg{enc::EncKind::DeepSets, 12, 16, 4};
    Tape t;
    Var r = enc::encode_set(t, t.constant(s.feats), t.constant(s.yv), s.ps, "enc", cfg);

    // independent arithmetic: psi per row, sum, rho
    auto matrow = [&](const Array& w, const std::vector<double>& in, const Array& b) {
        std::vector<double> out(w.d1, 0.0);
        for (std::size_t j = 0; j < w.d1; ++j) {
            for (std::size_t i = 0; i < w.d0; ++i) out[j] += in[i] * w.at(i, j);
            out[j] += b[j];
        }
        return out;
    };
    std::vector<double> pooled(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> row = {s.feats.at(i, 0), s.feats.at(i, 1), s.yv[i]};
        auto h1 = matrow(s.ps.value("enc.psi.w0"), row, s.ps.value("enc.psi.b0"));
        for (auto& x : h1) x = std::tanh(x);
        auto h2 = matrow(s.ps.value("enc.psi.w1"), h1, s.ps.value("enc.psi.b1"));
        for (auto& x : h2) x = std::tanh(x);
        for (std::size_t j = 0; j < 16; ++j) pooled[j] += h2[j];
    }
    auto g1 = matrow(s.ps.value("enc.rho.w0"), pooled, s.ps.value("enc.rho.b0"));
    for (auto& x : g1) x = std::tanh(x);
    auto g2 = matrow(s.ps.value("enc.rho.w1"), g1, s.ps.value("enc.rho.b1"));
    for (std::size_t j = 0; j < 12; ++j)
        CHECK(t.val(r)[j] == doctest::Approx(g2[j]).epsilon(1e-10));
}

TEST_CASE("attention rows are probability distributions") {
    auto s = make_setup(enc::EncKind::SetTransformer, 6, 3, 105);
    enc::EncoderConfig cfg{enc::EncKind::SetTransformer, 12, 16, 4};
    Tape t;
    std::vector<Array> attn;
    enc::encode_set(t, t.constant(s.feats), t.constant(s.yv), s.ps, "enc", cfg, &attn);
    REQUIRE(attn.size() == 12);  // 3 blocks x 4 heads
    for (const Array& A : attn) {
        for (std::size_t i = 0; i < A.d0; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < A.d1; ++j) {
                REQUIRE(A.at(i, j) >= 0.0);
                rs += A.at(i, j);
            }
            CHECK(rs == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("encoder gradients match finite differences") {
    for (auto kind : {enc::EncKind::DeepSets, enc::EncKind::SetTransformer}) {
        Rng rng(201);
        ad::ParamStore ps;
        enc::EncoderConfig cfg{kind, 5, 8, 2};
        enc::init_encoder(ps, "enc", cfg, 2, rng);
        Array feats = testsup::random_array(rng, 2, 4, 2);
        Array yv = testsup::random_array(rng, 1, 4, 1);
        auto builder = [feats, yv, cfg](Tape& t, ad::ParamStore& p) {
            Var r = enc::encode_set(t, t.constant(feats), t.constant(yv), p, "enc", cfg);
            return t.sum(t.square(r));
        };
        auto rep = ad::finite_diff_check(builder, ps, 1e-4);
        INFO("kind: " << enc::enc_kind_name(kind));
        CHECK(rep.max_rel_err < 1e-3);
    }
}

TEST_CASE("gradients flow through the y values into the encoding") {
    Rng rng(202);
    ad::ParamStore ps;
    enc::EncoderConfig cfg{enc::EncKind::DeepSets, 5, 8, 2};
    enc::init_encoder(ps, "enc", cfg, 2, rng);
    Array feats = testsup::random_array(rng, 2, 4, 2);
    ps.add("yv", testsup::random_array(rng, 1, 4, 1));
    auto builder = [feats, cfg](Tape& t, ad::ParamStore& p) {
        Var r = enc::encode_set(t, t.constant(feats), t.param(p, "yv"), p, "enc", cfg);
        return t.sum(t.square(r));
    };
    auto rep = ad::finite_diff_check(builder, ps, 1e-4);
    CHECK(rep.max_rel_err < 5e-6);
}
