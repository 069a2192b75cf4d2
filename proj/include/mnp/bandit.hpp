#pragma once
// Wheel contextual bandit: a 5-action environment on the unit disk whose
// high-reward outer region is carved into quadrants, plus the pretraining
// corpus, Thompson-style agents over set-conditioned surrogates, and regret
// accounting normalised against the uniform policy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mnp/baselines.hpp"

namespace mnp::bd {

constexpr std::size_t kActions = 5;
constexpr double kRewardSd = 0.01;
constexpr std::size_t kSurrogateDim = 7;  // coordinate pair + one-hot action

struct WheelProblem {
    double delta = 0.5;

    void validate() const {
        require(std::isfinite(delta) && delta > 0.0 && delta < 1.0,
                "wheel: delta must lie in (0, 1)");
    }
};

struct BanditStep {
    double x1 = 0.0;
    double x2 = 0.0;
    std::size_t action = 1;  // 1..5
    double reward = 0.0;
};

inline void check_coordinate(double x1, double x2) {
    require(std::isfinite(x1) && std::isfinite(x2) && x1 * x1 + x2 * x2 <= 1.0 + 1e-12,
            "wheel: coordinate outside the unit disk");
}

inline void check_action(std::size_t a) {
    require(a >= 1 && a <= kActions, "wheel: action must lie in 1..5");
}

// outer-region optimum by quadrant: ++ -> 2, +- -> 3, -+ -> 4, -- -> 5
inline std::size_t quadrant_action(double x1, double x2) {
    if (x1 >= 0.0) return x2 >= 0.0 ? 2 : 3;
    return x2 >= 0.0 ? 4 : 5;
}

// boundary radius counts as inside
inline double mean_reward(double x1, double x2, std::size_t a, double delta) {
    check_coordinate(x1, x2);
    check_action(a);
    if (x1 * x1 + x2 * x2 > delta * delta && a == quadrant_action(x1, x2)) return 50.0;
    return a == 1 ? 1.2 : 1.0;
}

struct OptimalChoice {
    std::size_t action = 1;
    double mean = 0.0;
};

inline OptimalChoice optimal_action(double x1, double x2, double delta) {
    check_coordinate(x1, x2);
    if (x1 * x1 + x2 * x2 <= delta * delta) return {1, 1.2};
    return {quadrant_action(x1, x2), 50.0};
}

inline double wheel_reward(double x1, double x2, std::size_t a, double delta, Rng& rng) {
    return mean_reward(x1, x2, a, delta) + kRewardSd * rng.normal();
}

inline double wheel_reward(double x1, double x2, std::size_t a, double delta,
                           std::uint64_t seed) {
    Rng rng(seed, 23);
    return wheel_reward(x1, x2, a, delta, rng);
}

// expected per-step regret of the uniform policy, from region probabilities:
// inside the core only the four wrong arms lose 0.2 each; outside, arm 1
// loses 48.8 and the three wrong outer arms lose 49 each
inline double uniform_expected_regret(double delta) {
    WheelProblem{delta}.validate();
    double p_in = delta * delta;
    double inside = (4.0 / 5.0) * 0.2;
    double outside = (48.8 + 3.0 * 49.0) / 5.0;
    return p_in * inside + (1.0 - p_in) * outside;
}

// ---- surrogate encoding ----

inline void surrogate_row(Array& x, std::size_t row, double x1, double x2, std::size_t a) {
    check_action(a);
    x.at(row, 0) = x1;
    x.at(row, 1) = x2;
    for (std::size_t c = 2; c < kSurrogateDim; ++c) x.at(row, c) = 0.0;
    x.at(row, 1 + a) = 1.0;
}

inline FunctionSet history_set(const std::vector<BanditStep>& hist) {
    FunctionSet fs;
    fs.x = Array::mat(hist.size(), kSurrogateDim);
    fs.y.resize(hist.size());
    for (std::size_t i = 0; i < hist.size(); ++i) {
        surrogate_row(fs.x, i, hist[i].x1, hist[i].x2, hist[i].action);
        fs.y[i] = hist[i].reward;
    }
    return fs;
}

inline Array candidate_inputs(double x1, double x2) {
    Array c = Array::mat(kActions, kSurrogateDim);
    for (std::size_t a = 1; a <= kActions; ++a) surrogate_row(c, a - 1, x1, x2, a);
    return c;
}

// ---- pretraining corpus ----

struct PretrainSet {
    FunctionSet fs;              // context points first
    std::size_t n_context = 0;
    double delta = 0.0;
};

inline std::vector<PretrainSet> gen_pretrain_corpus(std::uint64_t seed) {
    std::vector<PretrainSet> out;
    out.reserve(64);
    for (std::size_t w = 0; w < 64; ++w) {
        Rng rng(seed, 4000 + w);
        double delta;
        do {
            delta = rng.uniform();
        } while (delta <= 0.0);
        std::size_t n_ctx = static_cast<std::size_t>(rng.uniform_int(10, 512));
        std::size_t n_tar = static_cast<std::size_t>(rng.uniform_int(1, 50));
        std::size_t n = n_ctx + n_tar;
        PretrainSet ps;
        ps.delta = delta;
        ps.n_context = n_ctx;
        ps.fs.x = Array::mat(n, kSurrogateDim);
        ps.fs.y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double x1, x2;
            rng.uniform_disc(1.0, x1, x2);
            std::size_t a = static_cast<std::size_t>(rng.uniform_int(1, 5));
            surrogate_row(ps.fs.x, i, x1, x2, a);
            ps.fs.y[i] = wheel_reward(x1, x2, a, delta, rng);
        }
        out.push_back(std::move(ps));
    }
    return out;
}

// Episode loop over wheels with each wheel's own context size; point order is
// reshuffled per visit (the points are exchangeable draws). TrainOptions
// context bounds are ignored here.
inline TrainResult pretrain(const std::vector<PretrainSet>& corpus, const TrainOptions& topt,
                            ad::ParamStore& ps, const MnpConfig& cfg, Rng& rng) {
    require(!corpus.empty(), "pretrain: empty corpus");
    require(topt.batch >= 1, "pretrain: bad options");
    TrainResult res;
    opt::Adam adam(topt.adam);
    ad::ParamStore last_good = ps;
    const double inv_b = 1.0 / static_cast<double>(topt.batch);
    for (std::size_t step = 0; step < topt.steps; ++step) {
        ad::Grads acc;
        double loss_sum = 0.0;
        try {
            for (std::size_t b = 0; b < topt.batch; ++b) {
                const PretrainSet& base = corpus[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))];
                FunctionSet fs = permute_points(base.fs, random_perm(base.fs.size(), rng));
                std::size_t m = std::min(base.n_context, fs.size() - 1);
                ad::Tape t;
                ad::Var loss = objective_graph(t, fs, m, ps, cfg, rng);
                loss_sum += t.val(loss)[0] * inv_b;
                t.backward(loss);
                for (auto& [name, g] : t.param_grads()) {
                    auto it = acc.find(name);
                    if (it == acc.end()) {
                        for (double& v : g.v) v *= inv_b;
                        acc.emplace(name, std::move(g));
                    } else {
                        for (std::size_t i = 0; i < g.v.size(); ++i)
                            it->second.v[i] += g.v[i] * inv_b;
                    }
                }
            }
            require(std::isfinite(loss_sum), "pretrain: non-finite batch loss");
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

// ---- agents ----

// maps a context set and candidate rows to one sampled predictive row
using Sampler = std::function<Array(const FunctionSet&, const Array&, Rng&)>;

// ties resolve to the lowest action index
inline std::size_t select_from_draw(const Array& draw) {
    require(draw.numel() == kActions, "select: need one value per action");
    std::size_t best = 0;
    for (std::size_t j = 1; j < kActions; ++j)
        if (draw.v[j] > draw.v[best]) best = j;
    return best + 1;
}

using Agent = std::function<std::size_t(const std::vector<BanditStep>&, double, double, Rng&)>;

inline Agent uniform_agent() {
    return [](const std::vector<BanditStep>&, double, double, Rng& rng) {
        return static_cast<std::size_t>(rng.uniform_int(1, 5));
    };
}

inline Agent oracle_agent(double delta) {
    return [delta](const std::vector<BanditStep>&, double x1, double x2, Rng&) {
        return optimal_action(x1, x2, delta).action;
    };
}

// one posterior latent and one predictive function draw per step, shared
// across the five candidate arms
inline Agent thompson_agent(Sampler sampler) {
    return [sampler = std::move(sampler)](const std::vector<BanditStep>& hist, double x1,
                                          double x2, Rng& rng) {
        FunctionSet ctx = history_set(hist);
        Array draw = sampler(ctx, candidate_inputs(x1, x2), rng);
        return select_from_draw(draw);
    };
}

inline Agent surrogate_agent(ad::ParamStore& ps, const MnpConfig& cfg) {
    return thompson_agent([&ps, cfg](const FunctionSet& ctx, const Array& cand, Rng& rng) {
        return predict(ctx, cand, ps, cfg, 1, rng);
    });
}

inline Agent surrogate_agent(ad::ParamStore& ps, const bl::NpConfig& cfg) {
    return thompson_agent([&ps, cfg](const FunctionSet& ctx, const Array& cand, Rng& rng) {
        return bl::np_predict(ctx, cand, ps, cfg, 1, rng);
    });
}

inline std::size_t agent_select(ad::ParamStore& ps, const MnpConfig& cfg,
                                const std::vector<BanditStep>& hist, double x1, double x2,
                                std::uint64_t seed) {
    Rng rng(seed, 41);
    FunctionSet ctx = history_set(hist);
    Array draw = predict(ctx, candidate_inputs(x1, x2), ps, cfg, 1, rng);
    return select_from_draw(draw);
}

// ---- trials ----

struct TrialResult {
    std::vector<double> regrets;  // per-step gap between optimal and chosen mean reward
    std::vector<std::size_t> actions;
    std::vector<double> rewards;  // sampled rewards as observed by the agent
    double cumulative = 0.0;
    double simple = 0.0;  // mean per-step regret over the final 500 steps
    double normalized_cumulative = 0.0;
    double normalized_simple = 0.0;
};

inline TrialResult run_trial(const Agent& agent, double delta, std::size_t horizon,
                             std::uint64_t seed) {
    WheelProblem{delta}.validate();
    require(horizon >= 1, "trial: horizon must be positive");
    Rng env(seed, 31);
    Rng act(seed, 37);
    std::vector<BanditStep> hist;
    hist.reserve(horizon);
    TrialResult res;
    res.regrets.reserve(horizon);
    res.actions.reserve(horizon);
    res.rewards.reserve(horizon);
    for (std::size_t step = 0; step < horizon; ++step) {
        double x1, x2;
        env.uniform_disc(1.0, x1, x2);
        std::size_t a = agent(hist, x1, x2, act);
        check_action(a);
        double r = wheel_reward(x1, x2, a, delta, env);
        OptimalChoice best = optimal_action(x1, x2, delta);
        double regret = best.mean - mean_reward(x1, x2, a, delta);
        hist.push_back({x1, x2, a, r});
        res.regrets.push_back(regret);
        res.actions.push_back(a);
        res.rewards.push_back(r);
        res.cumulative += regret;
    }
    std::size_t tail = std::min<std::size_t>(500, horizon);
    double tail_sum = 0.0;
    for (std::size_t i = horizon - tail; i < horizon; ++i) tail_sum += res.regrets[i];
    res.simple = tail_sum / static_cast<double>(tail);
    double eu = uniform_expected_regret(delta);
    res.normalized_cumulative = 100.0 * res.cumulative / (static_cast<double>(horizon) * eu);
    res.normalized_simple = 100.0 * res.simple / eu;
    return res;
}

}  // namespace mnp::bd
