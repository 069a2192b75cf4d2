#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mnp/bandit.hpp"
#include "test_support.hpp"

using namespace mnp;

namespace {

// independent restatement: average the optimal-minus-chosen mean over the two
// regions, enumerating the five arms explicitly
double uniform_regret_oracle(double delta) {
    double inside = 0.0, outside = 0.0;
    for (std::size_t a = 1; a <= 5; ++a) {
        double mean_in = a == 1 ? 1.2 : 1.0;
        inside += (1.2 - mean_in) / 5.0;
        double mean_out = a == 2 ? 50.0 : (a == 1 ? 1.2 : 1.0);  // fix a ++ quadrant point
        outside += (50.0 - mean_out) / 5.0;
    }
    double p_in = delta * delta;
    return p_in * inside + (1.0 - p_in) * outside;
}

bd::Agent constant_agent(std::size_t a) {
    return [a](const std::vector<bd::BanditStep>&, double, double, Rng&) { return a; };
}

MnpConfig tiny_surrogate() {
    MnpConfig cfg;
    cfg.steps = 1;
    cfg.z_dim = 4;
    cfg.x_dim = bd::kSurrogateDim;
    cfg.n_fourier = 8;
    cfg.cond_hidden = 16;
    cfg.head_hidden = 16;
    cfg.flow.kind = flows::FlowKind::Affine;
    cfg.encoder.kind = enc::EncKind::DeepSets;
    cfg.encoder.out_dim = 16;
    cfg.encoder.hidden = 16;
    return cfg;
}

}  // namespace

TEST_CASE("reward means follow the wheel geometry") {
    CHECK(bd::mean_reward(0.0, 0.0, 1, 0.5) == 1.2);
    for (std::size_t a = 2; a <= 5; ++a) CHECK(bd::mean_reward(0.0, 0.0, a, 0.5) == 1.0);

    // outer point in the ++ quadrant
    CHECK(bd::quadrant_action(0.9, 0.1) == 2);
    CHECK(bd::mean_reward(0.9, 0.1, 2, 0.5) == 50.0);
    CHECK(bd::mean_reward(0.9, 0.1, 3, 0.5) == 1.0);
    CHECK(bd::mean_reward(0.9, 0.1, 1, 0.5) == 1.2);

    CHECK(bd::quadrant_action(0.6, -0.2) == 3);
    CHECK(bd::quadrant_action(-0.6, 0.2) == 4);
    CHECK(bd::quadrant_action(-0.6, -0.2) == 5);

    auto best0 = bd::optimal_action(0.0, 0.0, 0.5);
    CHECK(best0.action == 1);
    CHECK(best0.mean == 1.2);
    auto best1 = bd::optimal_action(0.7, 0.7, 0.5);
    CHECK(best1.action == 2);
    CHECK(best1.mean == 50.0);

    // boundary radius classifies as the core
    auto edge = bd::optimal_action(0.5, 0.0, 0.5);
    CHECK(edge.action == 1);
    CHECK(edge.mean == 1.2);

    CHECK_THROWS_AS((void)bd::mean_reward(0.0, 0.0, 0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS((void)bd::mean_reward(0.0, 0.0, 6, 0.5), std::invalid_argument);
    CHECK_THROWS_AS((void)bd::mean_reward(1.1, 0.0, 1, 0.5), std::invalid_argument);
    CHECK_THROWS_AS((void)bd::uniform_expected_regret(0.0), std::invalid_argument);
}

TEST_CASE("sampled rewards carry the stated noise") {
    Rng rng(801);
    double sum = 0.0, sq = 0.0;
    const std::size_t n = 10000;
    for (std::size_t i = 0; i < n; ++i) {
        double r = bd::wheel_reward(0.0, 0.0, 1, 0.5, rng);
        sum += r;
        sq += r * r;
    }
    double mean = sum / n;
    double sd = std::sqrt(sq / n - mean * mean);
    CHECK(std::fabs(mean - 1.2) < 3.0 * 0.01 / std::sqrt(static_cast<double>(n)));
    CHECK(std::fabs(sd - 0.01) < 0.001);
    CHECK(bd::wheel_reward(0.0, 0.0, 1, 0.5, std::uint64_t{99}) ==
          bd::wheel_reward(0.0, 0.0, 1, 0.5, std::uint64_t{99}));
}

TEST_CASE("uniform-policy regret: closed form against Monte Carlo") {
    for (double delta : {0.1, 0.5, 0.7, 0.95}) {
        CHECK(bd::uniform_expected_regret(delta) ==
              doctest::Approx(uniform_regret_oracle(delta)).epsilon(1e-12));
    }
    CHECK(bd::uniform_expected_regret(0.5) == doctest::Approx(29.41).epsilon(1e-12));

    Rng rng(803);
    const std::size_t n = 1000000;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double x1, x2;
        rng.uniform_disc(1.0, x1, x2);
        std::size_t a = static_cast<std::size_t>(rng.uniform_int(1, 5));
        acc += bd::optimal_action(x1, x2, 0.5).mean - bd::mean_reward(x1, x2, a, 0.5);
    }
    double mc = acc / static_cast<double>(n);
    CHECK(std::fabs(mc - bd::uniform_expected_regret(0.5)) < 0.005 * bd::uniform_expected_regret(0.5));
}

TEST_CASE("pretraining corpus has the pinned shape and reward structure") {
    auto corpus = bd::gen_pretrain_corpus(42);
    REQUIRE(corpus.size() == 64);
    double opt_sum = 0.0;
    std::size_t opt_n = 0;
    for (const auto& w : corpus) {
        CHECK(w.delta > 0.0);
        CHECK(w.delta < 1.0);
        CHECK(w.n_context >= 10);
        CHECK(w.n_context <= 512);
        std::size_t n_tar = w.fs.size() - w.n_context;
        CHECK(n_tar >= 1);
        CHECK(n_tar <= 50);
        w.fs.validate();
        REQUIRE(w.fs.x.d1 == bd::kSurrogateDim);
        for (std::size_t i = 0; i < w.fs.size(); ++i) {
            double x1 = w.fs.x.at(i, 0), x2 = w.fs.x.at(i, 1);
            CHECK(x1 * x1 + x2 * x2 <= 1.0);
            std::size_t ones = 0, a = 0;
            for (std::size_t c = 2; c < bd::kSurrogateDim; ++c) {
                if (w.fs.x.at(i, c) == 1.0) {
                    ++ones;
                    a = c - 1;
                } else {
                    CHECK(w.fs.x.at(i, c) == 0.0);
                }
            }
            CHECK(ones == 1);
            if (x1 * x1 + x2 * x2 > w.delta * w.delta && a == bd::quadrant_action(x1, x2)) {
                opt_sum += w.fs.y[i];
                ++opt_n;
            }
        }
    }
    REQUIRE(opt_n > 500);
    CHECK(std::fabs(opt_sum / static_cast<double>(opt_n) - 50.0) < 0.01);

    auto corpus2 = bd::gen_pretrain_corpus(42);
    for (std::size_t w = 0; w < 64; ++w) {
        CHECK(corpus[w].delta == corpus2[w].delta);
        CHECK(corpus[w].n_context == corpus2[w].n_context);
        for (std::size_t k = 0; k < corpus[w].fs.y.size(); ++k)
            CHECK(corpus[w].fs.y[k] == corpus2[w].fs.y[k]);
    }
    auto corpus3 = bd::gen_pretrain_corpus(43);
    bool differs = false;
    for (std::size_t k = 0; k < corpus[0].fs.y.size() && k < corpus3[0].fs.y.size(); ++k)
        differs = differs || corpus[0].fs.y[k] != corpus3[0].fs.y[k];
    CHECK(differs);
}

TEST_CASE("history encoding and tie handling") {
    std::vector<bd::BanditStep> hist = {{0.1, -0.2, 3, 4.5}, {-0.7, 0.0, 1, 1.19}};
    FunctionSet fs = bd::history_set(hist);
    REQUIRE(fs.size() == 2);
    CHECK(fs.x.at(0, 0) == 0.1);
    CHECK(fs.x.at(0, 1) == -0.2);
    CHECK(fs.x.at(0, 4) == 1.0);  // one-hot slot for action 3
    CHECK(fs.x.at(1, 2) == 1.0);  // one-hot slot for action 1
    CHECK(fs.y[0] == 4.5);
    CHECK(fs.y[1] == 1.19);

    Array cand = bd::candidate_inputs(0.3, 0.4);
    REQUIRE(cand.d0 == 5);
    for (std::size_t a = 1; a <= 5; ++a) {
        CHECK(cand.at(a - 1, 0) == 0.3);
        CHECK(cand.at(a - 1, 1 + a) == 1.0);
    }

    CHECK(bd::select_from_draw(Array::vec_n(5, 0.7)) == 1);
    Array up = Array::vec_n(5, 0.0);
    up.v[3] = 2.0;
    CHECK(bd::select_from_draw(up) == 4);
    CHECK_THROWS_AS((void)bd::select_from_draw(Array::vec_n(4, 0.0)), std::invalid_argument);

    // a constant predictive draw forces the lowest arm through the agent path
    bd::Agent flat = bd::thompson_agent(
        [](const FunctionSet&, const Array&, Rng&) { return Array::vec_n(5, 1.0); });
    Rng rng(805);
    CHECK(flat({}, 0.2, 0.1, rng) == 1);
}

TEST_CASE("fresh surrogate picks arms uniformly and deterministically") {
    MnpConfig cfg = tiny_surrogate();
    Rng init(807);
    ad::ParamStore ps;
    init_mnp(ps, cfg, init);

    std::vector<double> freq(5, 0.0);
    const std::size_t n = 5000;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t a = bd::agent_select(ps, cfg, {}, 0.3, 0.2, 9000 + i);
        freq[a - 1] += 1.0;
    }
    double bound = 3.0 * std::sqrt(0.2 * 0.8 / static_cast<double>(n));
    for (double f : freq) CHECK(std::fabs(f / n - 0.2) < bound);

    CHECK(bd::agent_select(ps, cfg, {}, 0.3, 0.2, 555) ==
          bd::agent_select(ps, cfg, {}, 0.3, 0.2, 555));

    // the same draw decides every arm: with history present the call still runs
    std::vector<bd::BanditStep> hist = {{0.0, 0.1, 2, 1.0}, {0.4, -0.3, 5, 0.9}};
    std::size_t a = bd::agent_select(ps, cfg, hist, -0.2, 0.6, 3);
    CHECK(a >= 1);
    CHECK(a <= 5);
}

TEST_CASE("trials score regret against the analytic uniform scale") {
    // oracle play is regret-free
    bd::TrialResult oracle = bd::run_trial(bd::oracle_agent(0.5), 0.5, 600, 1);
    for (double r : oracle.regrets) CHECK(r == 0.0);
    CHECK(oracle.cumulative == 0.0);
    CHECK(oracle.normalized_cumulative == 0.0);
    CHECK(oracle.normalized_simple == 0.0);

    // uniform play normalises to 100 in expectation
    double acc = 0.0, acc_sq = 0.0;
    const std::size_t trials = 20;
    for (std::size_t k = 0; k < trials; ++k) {
        bd::TrialResult tr = bd::run_trial(bd::uniform_agent(), 0.5, 2000, 100 + k);
        for (double r : tr.regrets) CHECK(r >= 0.0);
        acc += tr.normalized_cumulative;
        acc_sq += tr.normalized_cumulative * tr.normalized_cumulative;
    }
    double mean = acc / trials;
    double sd = std::sqrt(std::max(0.0, acc_sq / trials - mean * mean));
    double se = sd / std::sqrt(static_cast<double>(trials));
    CHECK(std::fabs(mean - 100.0) < 3.0 * se + 1e-9);

    // short horizons average the simple regret over every step
    bd::TrialResult shorty = bd::run_trial(constant_agent(1), 0.5, 10, 7);
    CHECK(shorty.simple == doctest::Approx(shorty.cumulative / 10.0).epsilon(1e-12));
    REQUIRE(shorty.actions.size() == 10);
    for (auto a : shorty.actions) CHECK(a == 1);

    // determinism of the whole trial loop
    bd::TrialResult t1 = bd::run_trial(bd::uniform_agent(), 0.5, 50, 11);
    bd::TrialResult t2 = bd::run_trial(bd::uniform_agent(), 0.5, 50, 11);
    for (std::size_t i = 0; i < 50; ++i) {
        CHECK(t1.actions[i] == t2.actions[i]);
        CHECK(t1.rewards[i] == t2.rewards[i]);
        CHECK(t1.regrets[i] == t2.regrets[i]);
    }
}

TEST_CASE("pretraining on wheel sets lowers the objective and reruns bitwise") {
    std::vector<bd::PretrainSet> corpus;
    Rng gen(811);
    for (std::size_t w = 0; w < 8; ++w) {
        bd::PretrainSet ps;
        ps.delta = gen.uniform(0.2, 0.9);
        ps.n_context = 6;
        std::size_t n = 10;
        ps.fs.x = Array::mat(n, bd::kSurrogateDim);
        ps.fs.y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double x1, x2;
            gen.uniform_disc(1.0, x1, x2);
            std::size_t a = static_cast<std::size_t>(gen.uniform_int(1, 5));
            bd::surrogate_row(ps.fs.x, i, x1, x2, a);
            ps.fs.y[i] = bd::wheel_reward(x1, x2, a, ps.delta, gen);
        }
        corpus.push_back(std::move(ps));
    }

    MnpConfig cfg = tiny_surrogate();
    cfg.steps = 2;
    auto run = [&](std::vector<double>& trace) {
        Rng init(813);
        ad::ParamStore ps;
        init_mnp(ps, cfg, init);
        TrainOptions topt;
        topt.steps = 120;
        topt.batch = 2;
        topt.adam.lr = 3e-3;
        Rng rng(815);
        TrainResult res = bd::pretrain(corpus, topt, ps, cfg, rng);
        REQUIRE(!res.aborted);
        trace = res.loss_trace;
    };
    std::vector<double> trace1, trace2;
    run(trace1);
    run(trace2);
    REQUIRE(trace1.size() == 120);
    CHECK(trace1 == trace2);

    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += trace1[i] / 10.0;
        tail += trace1[110 + i] / 10.0;
    }
    CHECK(tail < 0.8 * head);
}
