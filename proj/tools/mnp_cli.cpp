// Command-line front end: dataset generation, training, evaluation,
// prediction, bandit trials, and the invariant-suite runner. One command per
// process; outputs are written atomically with a replayable manifest.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "mnp/io.hpp"

using namespace mnp;
using io::json;

namespace {

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t i) {
    return seed ^ (0x9e3779b97f4a7c15ULL * (i + 1));
}

json parse_json_file(const std::string& path) {
    try {
        return json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

// a manifest for the same command stands in for its config document
json load_config_doc(const std::string& path, const std::string& command, bool& had_seed,
                     std::uint64_t& seed_out) {
    json doc = parse_json_file(path);
    if (io::looks_like_manifest(doc)) {
        io::Manifest m = io::manifest_from_json(doc, path);
        require(m.command == command,
                path + ": manifest was written by '" + m.command + "', not '" + command + "'");
        had_seed = true;
        seed_out = m.seed;
        return m.config;
    }
    return doc;
}

void emit(const json& j) { std::printf("%s\n", j.dump().c_str()); }

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1) /
                     static_cast<double>(v.size()));
}

// ---- gen-data ----

struct GenArgs {
    std::string config, out, kind;
    std::int64_t seed = 0;
    bool seed_set = false, kind_set = false;
};

int cmd_gen_data(const GenArgs& a) {
    require(!a.out.empty(), "gen-data: --out is required");
    json doc = json::object();
    bool doc_seed = false;
    std::uint64_t doc_seed_v = 0;
    if (!a.config.empty()) doc = load_config_doc(a.config, "gen-data", doc_seed, doc_seed_v);
    if (a.kind_set) doc["kind"] = a.kind;
    require(doc.contains("kind"), "gen-data: dataset kind missing (--kind or config)");

    std::uint64_t seed = doc_seed ? doc_seed_v : 0;
    if (doc.contains("seed")) seed = io::need_count(doc, "seed", "gen-data config");
    if (a.seed_set) seed = static_cast<std::uint64_t>(a.seed);

    std::vector<io::FunctionRecord> recs;
    json resolved;
    if (doc["kind"] == "wheel") {
        io::reject_unknown_keys(doc, {"kind", "seed"}, "gen-data config");
        auto corpus = bd::gen_pretrain_corpus(seed);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            io::FunctionRecord r;
            r.fs = corpus[i].fs;
            r.meta = json{{"kind", "wheel"},
                          {"index", i},
                          {"n_context", corpus[i].n_context},
                          {"delta", corpus[i].delta}};
            recs.push_back(std::move(r));
        }
        resolved = json{{"kind", "wheel"}, {"seed", seed}};
    } else {
        doc["seed"] = seed;
        dg::DatasetSpec spec = io::dataset_spec_from_json(doc, "gen-data config");
        dg::Dataset ds = dg::gen_dataset(spec);
        auto push = [&](const std::vector<FunctionSet>& fns, const char* split) {
            for (std::size_t i = 0; i < fns.size(); ++i) {
                io::FunctionRecord r;
                r.fs = fns[i];
                r.meta = json{{"kind", dg::data_kind_name(spec.kind)},
                              {"split", split},
                              {"index", i},
                              {"ctx_lo", spec.ctx_lo},
                              {"ctx_hi", spec.ctx_hi}};
                recs.push_back(std::move(r));
            }
        };
        push(ds.train, "train");
        push(ds.val, "val");
        push(ds.test, "test");
        resolved = io::to_json(spec);
    }

    io::write_dataset(a.out, recs);
    io::Manifest m;
    m.command = "gen-data";
    m.config = resolved;
    m.seed = seed;
    io::write_manifest(a.out, m);
    emit(json{{"command", "gen-data"}, {"written", a.out}, {"functions", recs.size()},
              {"seed", seed}});
    return 0;
}

// ---- shared model plumbing ----

struct LoadedModel {
    std::string kind;  // mnp | np | gp
    MnpConfig mnp;
    bl::NpConfig np;
    bl::GpSpec gp;
    ad::ParamStore params;
};

void check_param_layout(const ad::ParamStore& expect, const ad::ParamStore& got,
                        const std::string& where) {
    require(expect.entries.size() == got.entries.size(), where + ": parameter set mismatch");
    for (const auto& [name, e] : expect.entries) {
        require(got.has(name), where + ": missing parameter '" + name + "'");
        const Array& g = got.value(name);
        require(g.rank == e.value.rank && g.d0 == e.value.d0 && g.d1 == e.value.d1,
                where + ": shape mismatch for parameter '" + name + "'");
    }
}

LoadedModel load_model(const std::string& path) {
    io::Checkpoint ck = io::load_checkpoint(path);
    LoadedModel m;
    m.kind = ck.model;
    if (ck.model == "mnp") {
        m.mnp = io::mnp_config_from_json(ck.config, path + ".config");
        ad::ParamStore fresh;
        Rng rng(0);
        init_mnp(fresh, m.mnp, rng);
        check_param_layout(fresh, ck.params, path);
        m.params = std::move(ck.params);
    } else if (ck.model == "np") {
        m.np = io::np_config_from_json(ck.config, path + ".config");
        ad::ParamStore fresh;
        Rng rng(0);
        bl::init_np(fresh, m.np, rng);
        check_param_layout(fresh, ck.params, path);
        m.params = std::move(ck.params);
    } else {
        m.gp = io::gp_spec_from_json(ck.config, path + ".config");
    }
    return m;
}

std::vector<io::FunctionRecord> filter_split(const std::vector<io::FunctionRecord>& recs,
                                             const std::string& want) {
    if (want == "all") return recs;
    std::vector<io::FunctionRecord> out;
    for (const auto& r : recs)
        if (r.meta.is_object() && r.meta.contains("split") && r.meta["split"] == want)
            out.push_back(r);
    return out;
}

// explicit split choice wins; otherwise prefer the named default when present
std::vector<io::FunctionRecord> pick_split(const std::vector<io::FunctionRecord>& recs,
                                           const std::string& flag, const char* fallback) {
    if (!flag.empty()) {
        auto out = filter_split(recs, flag);
        require(!out.empty(), "no records in split '" + flag + "'");
        return out;
    }
    auto out = filter_split(recs, fallback);
    return out.empty() ? recs : out;
}

void ctx_range_of(const io::FunctionRecord& r, std::size_t& lo, std::size_t& hi) {
    const std::size_t n = r.fs.size();
    lo = 2;
    hi = std::min<std::size_t>(20, n - 1);
    if (r.meta.is_object() && r.meta.contains("ctx_lo"))
        lo = io::need_count(r.meta, "ctx_lo", "meta");
    if (r.meta.is_object() && r.meta.contains("ctx_hi"))
        hi = io::need_count(r.meta, "ctx_hi", "meta");
    hi = std::min(hi, n - 1);
    lo = std::min(lo, hi);
}

// ---- train ----

struct TrainArgs {
    std::string config, data, out, kind;
    std::int64_t seed = 0, steps = 0;
    bool seed_set = false, steps_set = false, kind_set = false;
};

int cmd_train(const TrainArgs& a) {
    require(!a.data.empty(), "train: --data is required");
    require(!a.out.empty(), "train: --out is required");
    json doc = json::object();
    bool doc_seed = false;
    std::uint64_t doc_seed_v = 0;
    if (!a.config.empty()) doc = load_config_doc(a.config, "train", doc_seed, doc_seed_v);
    io::reject_unknown_keys(doc, {"model", "mnp", "np", "gp", "train", "seed"}, "train config");

    std::string model = doc.contains("model") ? io::need_str(doc, "model", "train config") : "mnp";
    if (a.kind_set) model = a.kind;
    require(model == "mnp" || model == "np" || model == "gp",
            "train: model must be one of mnp, np, gp");
    for (const char* k : {"mnp", "np", "gp"})
        require(!doc.contains(k) || model == k,
                std::string("train config: '") + k + "' section does not match model '" + model +
                    "'");

    std::uint64_t seed = doc_seed ? doc_seed_v : 0;
    if (doc.contains("seed")) seed = io::need_count(doc, "seed", "train config");
    if (a.seed_set) seed = static_cast<std::uint64_t>(a.seed);

    auto recs = io::read_dataset(a.data);
    bool wheel = !recs.empty();
    for (const auto& r : recs)
        wheel = wheel && r.meta.is_object() && r.meta.contains("n_context");
    auto train_recs = wheel ? recs : pick_split(recs, "", "train");
    require(!train_recs.empty(), "train: no training records");
    const std::size_t x_dim = train_recs[0].fs.x.d1;
    for (const auto& r : train_recs)
        require(r.fs.x.d1 == x_dim, "train: inconsistent input dimension across records");

    TrainOptions topt;
    if (doc.contains("train"))
        topt = io::train_options_from_json(doc["train"], "train config.train");
    if (a.steps_set) topt.steps = static_cast<std::size_t>(a.steps);

    io::Checkpoint ck;
    ck.step = topt.steps;
    TrainResult res;
    json summary;

    if (model == "gp") {
        json gdoc = doc.contains("gp") ? doc["gp"] : json::object();
        io::reject_unknown_keys(gdoc, {"kernel", "restarts", "max_steps", "lr"},
                                "train config.gp");
        bl::KernelKind kind = bl::KernelKind::Additive;
        if (gdoc.contains("kernel"))
            kind = bl::kernel_kind_from(io::need_str(gdoc, "kernel", "train config.gp"));
        bl::GpFitOptions fopt;
        if (gdoc.contains("restarts"))
            fopt.restarts = io::need_count(gdoc, "restarts", "train config.gp");
        if (gdoc.contains("max_steps"))
            fopt.max_steps = io::need_count(gdoc, "max_steps", "train config.gp");
        if (gdoc.contains("lr")) fopt.lr = io::need_num(gdoc, "lr", "train config.gp");
        std::vector<FunctionSet> sets;
        for (const auto& r : train_recs) sets.push_back(r.fs);
        Rng rng(seed, 3);
        bl::GpFitResult fit = bl::gp_fit(sets, kind, rng, fopt);
        ck.model = "gp";
        ck.config = io::to_json(fit.spec);
        ck.step = fit.accepted_lml.size();
        std::vector<double> trace;
        for (double v : fit.accepted_lml) trace.push_back(-v);
        res.loss_trace = std::move(trace);
        summary["objective"] = fit.objective;
    } else if (model == "mnp") {
        MnpConfig cfg;
        cfg.x_dim = x_dim;
        if (doc.contains("mnp")) cfg = io::mnp_config_from_json(doc["mnp"], "train config.mnp");
        require(cfg.x_dim == x_dim, "train: config x_dim disagrees with the dataset");
        ad::ParamStore ps;
        Rng init(seed, 1);
        init_mnp(ps, cfg, init);
        Rng rng(seed, 2);
        if (wheel) {
            std::vector<bd::PretrainSet> corpus;
            for (const auto& r : train_recs) {
                bd::PretrainSet p;
                p.fs = r.fs;
                p.n_context = io::need_count(r.meta, "n_context", "meta");
                require(p.n_context >= 1 && p.n_context < p.fs.size(),
                        "train: bad n_context in record meta");
                corpus.push_back(std::move(p));
            }
            res = bd::pretrain(corpus, topt, ps, cfg, rng);
        } else {
            std::vector<FunctionSet> sets;
            for (const auto& r : train_recs) sets.push_back(r.fs);
            res = mnp::train(sets, topt, ps, cfg, rng);
        }
        ck.model = "mnp";
        ck.config = io::to_json(cfg);
        ck.params = std::move(ps);
    } else {
        bl::NpConfig cfg;
        cfg.x_dim = x_dim;
        if (doc.contains("np")) cfg = io::np_config_from_json(doc["np"], "train config.np");
        require(cfg.x_dim == x_dim, "train: config x_dim disagrees with the dataset");
        require(!wheel, "train: the per-set split corpus is wired to the mnp model");
        ad::ParamStore ps;
        Rng init(seed, 1);
        bl::init_np(ps, cfg, init);
        std::vector<FunctionSet> sets;
        for (const auto& r : train_recs) sets.push_back(r.fs);
        Rng rng(seed, 2);
        res = bl::np_train(sets, topt, ps, cfg, rng);
        ck.model = "np";
        ck.config = io::to_json(cfg);
        ck.params = std::move(ps);
    }

    io::save_checkpoint(a.out, ck);
    io::atomic_write_text(a.out + ".loss.csv", io::loss_csv(res.loss_trace));

    json resolved = doc;
    resolved["model"] = model;
    resolved["seed"] = seed;
    resolved["train"] = io::to_json(topt);
    io::Manifest m;
    m.command = "train";
    m.config = resolved;
    m.seed = seed;
    io::write_manifest(a.out, m);

    summary["command"] = "train";
    summary["model"] = model;
    summary["written"] = a.out;
    summary["steps_run"] = res.loss_trace.size();
    if (!res.loss_trace.empty()) summary["final_loss"] = res.loss_trace.back();
    summary["aborted"] = res.aborted;
    if (res.aborted) summary["abort_reason"] = res.abort_reason;
    emit(summary);
    return res.aborted ? 2 : 0;
}

// ---- eval ----

struct EvalArgs {
    std::string config, ckpt, data, out, kind;
    std::int64_t seed = 0;
    std::size_t iwae_k = 20;
    bool seed_set = false;
};

int cmd_eval(const EvalArgs& a) {
    require(!a.ckpt.empty(), "eval: --ckpt is required");
    require(!a.data.empty(), "eval: --data is required");
    std::uint64_t seed = static_cast<std::uint64_t>(a.seed);
    if (!a.config.empty()) {
        bool doc_seed = false;
        std::uint64_t doc_seed_v = 0;
        json doc = load_config_doc(a.config, "eval", doc_seed, doc_seed_v);
        io::reject_unknown_keys(doc, {"seed"}, "eval config");
        if (doc_seed) seed = doc_seed_v;
        if (doc.contains("seed")) seed = io::need_count(doc, "seed", "eval config");
        if (a.seed_set) seed = static_cast<std::uint64_t>(a.seed);
    }

    LoadedModel model = load_model(a.ckpt);
    auto recs = pick_split(io::read_dataset(a.data), a.kind, "test");
    const std::size_t n = recs.size();
    std::vector<double> per_fn(n, 0.0);

    io::parallel_for(n, [&](std::size_t i) {
        const auto& r = recs[i];
        std::size_t lo, hi;
        ctx_range_of(r, lo, hi);
        auto split = dg::split_context_target(r.fs, lo, hi, sub_seed(seed, i));
        FunctionSet fs = dg::arrange_split(r.fs, split);
        const std::size_t m = split.context.size();
        if (model.kind == "mnp") {
            Rng rng(sub_seed(seed, i), 11);
            per_fn[i] = iwae_conditional_ll(fs, m, model.params, model.mnp, a.iwae_k, rng);
        } else if (model.kind == "np") {
            Rng rng(sub_seed(seed, i), 11);
            per_fn[i] = bl::np_iwae_ll(fs, m, model.params, model.np, a.iwae_k, rng);
        } else {
            per_fn[i] = bl::gp_conditional_ll(fs, m, model.gp) /
                        static_cast<double>(fs.size() - m);
        }
    });

    json report{{"command", "eval"},
                {"model", model.kind},
                {"checkpoint", a.ckpt},
                {"functions", n},
                {"iwae_k", a.iwae_k},
                {"seed", seed},
                {"mean_per_point_ll", mean_of(per_fn)},
                {"stderr", stderr_of(per_fn)}};
    if (!a.out.empty()) {
        json full = report;
        full["per_function"] = per_fn;
        io::atomic_write_text(a.out, full.dump(1) + "\n");
        io::Manifest m;
        m.command = "eval";
        m.config = json{{"seed", seed}};
        m.seed = seed;
        io::write_manifest(a.out, m);
    }
    emit(report);
    return 0;
}

// ---- predict ----

struct PredictArgs {
    std::string config, ckpt, data, out;
    std::int64_t seed = 0;
};

int cmd_predict(const PredictArgs& a) {
    require(!a.ckpt.empty(), "predict: --ckpt is required");
    require(!a.data.empty(), "predict: --data is required");
    require(!a.out.empty(), "predict: --out is required");

    std::size_t index = 0, draws = 30, grid_n = 128;
    bool use_grid = true;
    std::uint64_t seed = static_cast<std::uint64_t>(a.seed);
    json doc = json::object();
    if (!a.config.empty()) {
        bool doc_seed = false;
        std::uint64_t doc_seed_v = 0;
        doc = load_config_doc(a.config, "predict", doc_seed, doc_seed_v);
        io::reject_unknown_keys(doc, {"index", "draws", "grid_n", "targets", "seed"},
                                "predict config");
        if (doc_seed) seed = doc_seed_v;
        if (doc.contains("index")) index = io::need_count(doc, "index", "predict config");
        if (doc.contains("draws")) draws = io::need_count(doc, "draws", "predict config");
        if (doc.contains("grid_n")) grid_n = io::need_count(doc, "grid_n", "predict config");
        if (doc.contains("targets")) {
            std::string t = io::need_str(doc, "targets", "predict config");
            require(t == "grid" || t == "data", "predict: targets must be grid or data");
            use_grid = t == "grid";
        }
        if (doc.contains("seed")) seed = io::need_count(doc, "seed", "predict config");
    }
    require(draws >= 1, "predict: need at least one draw");

    LoadedModel model = load_model(a.ckpt);
    auto recs = io::read_dataset(a.data);
    require(index < recs.size(), "predict: function index out of range");
    const auto& r = recs[index];
    require(r.fs.x.d1 == 1 || !use_grid, "predict: the dense grid needs 1-d inputs");

    std::size_t lo, hi;
    ctx_range_of(r, lo, hi);
    auto split = dg::split_context_target(r.fs, lo, hi, sub_seed(seed, index));
    FunctionSet ctx = subset(dg::arrange_split(r.fs, split), 0, split.context.size());

    Array targets;
    if (use_grid) {
        double xlo = r.fs.x.v[0], xhi = r.fs.x.v[0];
        for (std::size_t i = 0; i < r.fs.x.d0; ++i) {
            xlo = std::min(xlo, r.fs.x.at(i, 0));
            xhi = std::max(xhi, r.fs.x.at(i, 0));
        }
        require(grid_n >= 2, "predict: grid needs at least two points");
        targets = Array::mat(grid_n, 1);
        for (std::size_t i = 0; i < grid_n; ++i)
            targets.at(i, 0) =
                xlo + (xhi - xlo) * static_cast<double>(i) / static_cast<double>(grid_n - 1);
    } else {
        targets = r.fs.x;
    }

    Array out;
    Rng rng(seed, 7);
    if (model.kind == "mnp") {
        out = predict(ctx, targets, model.params, model.mnp, draws, rng);
    } else if (model.kind == "np") {
        out = bl::np_predict(ctx, targets, model.params, model.np, draws, rng);
    } else {
        bl::GpPosterior post = bl::gp_posterior(ctx.x, ctx.y, targets, model.gp);
        Array chol = bl::gp_cholesky(post.cov);
        const std::size_t nt = targets.d0;
        out = Array::mat(draws, nt);
        for (std::size_t d = 0; d < draws; ++d) {
            std::vector<double> u(nt);
            for (auto& v : u) v = rng.normal();
            for (std::size_t i = 0; i < nt; ++i) {
                double acc = post.mean.v[i];
                for (std::size_t j = 0; j <= i; ++j) acc += chol.at(i, j) * u[j];
                out.at(d, i) = acc;
            }
        }
    }

    io::atomic_write_text(a.out, io::prediction_csv(targets, out));
    json resolved{{"index", index}, {"draws", draws},
                  {"targets", use_grid ? "grid" : "data"}, {"grid_n", grid_n},
                  {"seed", seed}};
    io::Manifest m;
    m.command = "predict";
    m.config = resolved;
    m.seed = seed;
    io::write_manifest(a.out, m);
    emit(json{{"command", "predict"}, {"written", a.out}, {"model", model.kind},
              {"context_points", ctx.size()}, {"targets", targets.d0}, {"draws", draws}});
    return 0;
}

// ---- bandit ----

struct BanditArgs {
    std::string config, ckpt, out, kind;
    double delta = 0.5;
    std::size_t trials = 10, horizon = 2000;
    std::int64_t seed = 0;
    bool kind_set = false, delta_set = false, trials_set = false, horizon_set = false,
         seed_set = false;
};

int cmd_bandit(const BanditArgs& a) {
    std::string agent_kind = a.kind_set ? a.kind : "surrogate";
    double delta = a.delta;
    std::size_t trials = a.trials, horizon = a.horizon;
    std::uint64_t seed = static_cast<std::uint64_t>(a.seed);
    std::string ckpt = a.ckpt;
    if (!a.config.empty()) {
        bool doc_seed = false;
        std::uint64_t doc_seed_v = 0;
        json doc = load_config_doc(a.config, "bandit", doc_seed, doc_seed_v);
        io::reject_unknown_keys(doc, {"agent", "delta", "trials", "horizon", "ckpt", "seed"},
                                "bandit config");
        if (doc_seed && !a.seed_set) seed = doc_seed_v;
        if (doc.contains("agent") && !a.kind_set)
            agent_kind = io::need_str(doc, "agent", "bandit config");
        if (doc.contains("delta") && !a.delta_set)
            delta = io::need_num(doc, "delta", "bandit config");
        if (doc.contains("trials") && !a.trials_set)
            trials = io::need_count(doc, "trials", "bandit config");
        if (doc.contains("horizon") && !a.horizon_set)
            horizon = io::need_count(doc, "horizon", "bandit config");
        if (doc.contains("ckpt") && ckpt.empty())
            ckpt = io::need_str(doc, "ckpt", "bandit config");
        if (doc.contains("seed") && !a.seed_set)
            seed = io::need_count(doc, "seed", "bandit config");
    }
    require(agent_kind == "surrogate" || agent_kind == "uniform" || agent_kind == "oracle",
            "bandit: --kind must be surrogate, uniform, or oracle");
    require(trials >= 1, "bandit: need at least one trial");

    LoadedModel model;
    if (agent_kind == "surrogate") {
        require(!ckpt.empty(), "bandit: --ckpt is required for the surrogate agent");
        model = load_model(ckpt);
        require(model.kind != "gp", "bandit: the surrogate agent needs an mnp or np checkpoint");
        require((model.kind == "mnp" ? model.mnp.x_dim : model.np.x_dim) == bd::kSurrogateDim,
                "bandit: checkpoint input dimension must be 7");
    }

    std::vector<bd::TrialResult> results(trials);
    io::parallel_for(trials, [&](std::size_t t) {
        bd::Agent agent;
        if (agent_kind == "uniform") {
            agent = bd::uniform_agent();
        } else if (agent_kind == "oracle") {
            agent = bd::oracle_agent(delta);
        } else if (model.kind == "mnp") {
            agent = bd::surrogate_agent(model.params, model.mnp);
        } else {
            agent = bd::surrogate_agent(model.params, model.np);
        }
        results[t] = bd::run_trial(agent, delta, horizon, sub_seed(seed, t));
    });

    std::vector<double> ncum, nsimple;
    for (const auto& r : results) {
        ncum.push_back(r.normalized_cumulative);
        nsimple.push_back(r.normalized_simple);
    }
    json report{{"command", "bandit"},
                {"agent", agent_kind},
                {"delta", delta},
                {"trials", trials},
                {"horizon", horizon},
                {"seed", seed},
                {"normalized_cumulative_mean", mean_of(ncum)},
                {"normalized_cumulative_stderr", stderr_of(ncum)},
                {"normalized_simple_mean", mean_of(nsimple)},
                {"normalized_simple_stderr", stderr_of(nsimple)}};
    if (!a.out.empty()) {
        io::atomic_write_text(a.out, io::trial_csv(results));
        io::Manifest m;
        m.command = "bandit";
        m.config = json{{"agent", agent_kind}, {"delta", delta}, {"trials", trials},
                        {"horizon", horizon},  {"ckpt", ckpt},   {"seed", seed}};
        m.seed = seed;
        io::write_manifest(a.out, m);
        report["written"] = a.out;
    }
    emit(report);
    return 0;
}

// ---- check ----

struct SuiteResult {
    std::string name;
    bool pass = false;
    double metric = 0.0;
    double threshold = 0.0;
    std::string detail;
};

void perturb_gen_params(ad::ParamStore& ps, Rng& rng, double scale) {
    for (auto& [name, e] : ps.entries)
        if (e.trainable && name.rfind("gen.", 0) == 0)
            for (double& v : e.value.v) v += scale * rng.normal();
}

MnpConfig check_config() {
    MnpConfig cfg;
    cfg.steps = 2;
    cfg.z_dim = 2;
    cfg.n_fourier = 4;
    cfg.cond_hidden = 12;
    cfg.head_hidden = 12;
    cfg.encoder.kind = enc::EncKind::DeepSets;
    cfg.encoder.out_dim = 8;
    cfg.encoder.hidden = 8;
    return cfg;
}

FunctionSet check_set(Rng& rng, std::size_t n) {
    FunctionSet fs;
    fs.x = Array::mat(n, 1);
    for (auto& v : fs.x.v) v = rng.uniform(-2.0, 2.0);
    fs.y.resize(n);
    for (auto& v : fs.y) v = rng.normal();
    return fs;
}

SuiteResult suite_autodiff() {
    SuiteResult r{"autodiff-gradients", false, 0.0, 1e-4, "finite differences on an mlp graph"};
    for (std::uint64_t s = 0; s < 3; ++s) {
        Rng rng(7000 + s);
        ad::ParamStore ps;
        nn::init_mlp(ps, "chk", {3, 8, 8, 2}, rng);
        Array input = Array::mat(5, 3);
        for (auto& v : input.v) v = rng.uniform(-1.0, 1.0);
        auto builder = [&input](ad::Tape& t, ad::ParamStore& p) {
            ad::Var rows = nn::mlp_rows(t, t.constant(input), p, "chk");
            return t.sum(t.mul(rows, rows));
        };
        ad::FdReport rep = ad::finite_diff_check(builder, ps, 1e-5);
        r.metric = std::max(r.metric, rep.max_rel_err);
    }
    r.pass = r.metric < r.threshold;
    return r;
}

SuiteResult suite_flows() {
    SuiteResult r{"flows-invertibility", false, 0.0, 1e-9,
                  "round trip and derivative agreement, both transition kinds"};
    double fd_worst = 0.0;
    Rng rng(7100);
    for (int kind = 0; kind < 2; ++kind) {
        flows::FlowConfig fc;
        fc.kind = kind == 0 ? flows::FlowKind::Affine : flows::FlowKind::Spline;
        const std::size_t n = 400;
        Array raw = Array::mat(n, fc.param_count());
        for (auto& v : raw.v) v = 0.5 * rng.normal();
        Array y = Array::mat(n, 1);
        y.rank = 1;
        for (auto& v : y.v) v = rng.uniform(-4.5, 4.5);

        ad::Tape t;
        ad::Var yv = t.constant(y);
        ad::Var rv = t.constant(raw);
        flows::FlowOut fwd = flows::flow_forward_rows(t, yv, rv, fc);
        flows::FlowOut inv = flows::flow_inverse_rows(t, fwd.y, rv, fc);
        const Array& back = t.val(inv.y);
        for (std::size_t i = 0; i < n; ++i)
            r.metric = std::max(r.metric, std::fabs(back.v[i] - y.v[i]));

        // forward derivative by central difference per point
        const double h = 1e-6;
        const Array& ld = t.val(fwd.logdet);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> rowraw(raw.d1);
            for (std::size_t c = 0; c < raw.d1; ++c) rowraw[c] = raw.at(i, c);
            auto eval1 = [&](double yy) {
                if (fc.kind == flows::FlowKind::Affine)
                    return flows::affine_forward(yy, rowraw[0], rowraw[1]).first;
                flows::SplineParams sp = flows::spline_params_from_raw(rowraw, fc.bins, fc.tail);
                return flows::spline_forward(sp, yy).first;
            };
            double fd = (eval1(y.v[i] + h) - eval1(y.v[i] - h)) / (2.0 * h);
            double an = std::exp(ld.v[i]);
            fd_worst = std::max(fd_worst, std::fabs(fd - an) / (std::fabs(an) + 1e-8));
        }
    }
    r.pass = r.metric < r.threshold && fd_worst < 1e-4;
    r.detail += ", derivative rel err " + io::format_double(fd_worst);
    return r;
}

SuiteResult suite_setenc() {
    SuiteResult r{"setenc-permutation", false, 0.0, 1e-9,
                  "pooled encodings invariant to point order"};
    for (int kind = 0; kind < 2; ++kind) {
        enc::EncoderConfig ec;
        ec.kind = kind == 0 ? enc::EncKind::DeepSets : enc::EncKind::SetTransformer;
        ec.out_dim = 8;
        ec.hidden = 8;
        ec.heads = 2;
        Rng rng(7200 + kind);
        ad::ParamStore ps;
        ps.add("fourier.freqs", enc::make_fourier_freqs(4, 1, rng), false);
        enc::init_encoder(ps, "enc", ec, enc::fourier_dim(1, 4), rng);
        for (std::size_t c = 0; c < 10; ++c) {
            FunctionSet fs = check_set(rng, 7);
            std::vector<std::size_t> perm = random_perm(fs.size(), rng);
            FunctionSet fp = permute_points(fs, perm);
            auto encode = [&](const FunctionSet& f) {
                ad::Tape t;
                ad::Var feats = t.constant(mnp_features(ps, f.x));
                ad::Var out = enc::encode_set(t, feats, t.constant(Array::vec(f.y)), ps, "enc", ec);
                return t.val(out);
            };
            Array e0 = encode(fs), e1 = encode(fp);
            for (std::size_t k = 0; k < e0.numel(); ++k)
                r.metric = std::max(r.metric, std::fabs(e0.v[k] - e1.v[k]));
        }
    }
    r.pass = r.metric < r.threshold;
    return r;
}

SuiteResult suite_exchangeability() {
    SuiteResult r{"mnp-exchangeability", false, 0.0, 1e-9,
                  "densities and conditionals invariant to point order"};
    MnpConfig cfg = check_config();
    for (int kind = 0; kind < 2; ++kind) {
        cfg.encoder.kind = kind == 0 ? enc::EncKind::DeepSets : enc::EncKind::SetTransformer;
        cfg.encoder.heads = 2;
        Rng rng(7300 + kind);
        ad::ParamStore ps;
        init_mnp(ps, cfg, rng);
        perturb_gen_params(ps, rng, 0.5);
        for (std::uint64_t c = 0; c < 5; ++c) {
            FunctionSet fs = check_set(rng, 9);
            r.metric = std::max(r.metric, check_exchangeability(ps, cfg, fs, 4, 7400 + c, 6));
        }
    }
    r.pass = r.metric < r.threshold;
    return r;
}

SuiteResult suite_consistency() {
    SuiteResult r{"mnp-consistency", false, 0.0, 1e-3,
                  "marginalising one point away preserves the other's law"};
    Array x_pair = Array::mat(2, 1);
    x_pair.at(0, 0) = -0.3;
    x_pair.at(1, 0) = 0.9;
    MnpConfig cfg = check_config();
    cfg.steps = 1;
    cfg.z_dim = 1;
    for (int kind = 0; kind < 2; ++kind) {
        cfg.flow.kind = kind == 0 ? flows::FlowKind::Affine : flows::FlowKind::Spline;
        Rng rng(7500 + kind);
        ad::ParamStore ps;
        init_mnp(ps, cfg, rng);
        perturb_gen_params(ps, rng, kind == 0 ? 0.2 : 0.15);
        r.metric = std::max(r.metric, check_marginal_consistency(ps, cfg, x_pair));
    }
    r.pass = r.metric < r.threshold;
    return r;
}

SuiteResult suite_mnp_gradients() {
    SuiteResult r{"mnp-gradients", false, 0.0, 1e-3,
                  "objective gradient against finite differences"};
    MnpConfig cfg = check_config();
    for (std::uint64_t s = 0; s < 2; ++s) {
        Rng rng(7600 + s);
        ad::ParamStore ps;
        init_mnp(ps, cfg, rng);
        perturb_gen_params(ps, rng, 0.3);
        FunctionSet fs = check_set(rng, 4);
        auto builder = [&fs, &cfg, s](ad::Tape& t, ad::ParamStore& p) {
            Rng r2(7700 + s);
            return objective_graph(t, fs, 2, p, cfg, r2);
        };
        ad::FdReport rep = ad::finite_diff_check(builder, ps, 1e-4);
        r.metric = std::max(r.metric, rep.max_rel_err);
    }
    r.pass = r.metric < r.threshold;
    return r;
}

SuiteResult suite_bounds() {
    SuiteResult r{"mnp-bounds", false, 0.0, 0.0,
                  "single-sample objective does not beat the quadrature evidence"};
    MnpConfig cfg = check_config();
    cfg.steps = 1;
    cfg.z_dim = 1;
    double worst = -1e300;
    for (std::uint64_t inst = 0; inst < 3; ++inst) {
        Rng rng(7800 + inst);
        ad::ParamStore ps;
        init_mnp(ps, cfg, rng);
        perturb_gen_params(ps, rng, 0.3);
        FunctionSet fs = check_set(rng, 6);
        const std::size_t m = 2;

        // context factor parameters
        Array eps0 = Array::mat(1, 1);
        FunctionSet ctx = subset(fs, 0, m);
        FunctionSet tar = subset(fs, m, fs.size());
        double mu_c, sg_c;
        {
            ad::Tape t;
            ad::Var feats = t.constant(mnp_features(ps, ctx.x));
            InferChain ch = infer_chain(t, feats, t.constant(Array::vec(ctx.y)), ps, cfg, &eps0);
            mu_c = t.val(ch.mu[0]).v[0];
            sg_c = t.val(ch.sigma[0]).v[0];
        }
        auto log_p_tar = [&](double z) {
            std::vector<Array> zpath{Array::vec({z})};
            return log_density_given_z(tar, zpath, ps, cfg);
        };
        quad::GaussHermite gh = quad::gauss_hermite(200);
        const double root2 = std::sqrt(2.0);
        const double rootpi = std::sqrt(3.141592653589793238462643383279502884);
        double peak = log_p_tar(mu_c);
        double acc = 0.0;
        for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
            double w = gh.weights[i] / rootpi;
            if (w == 0.0) continue;
            acc += w * std::exp(log_p_tar(mu_c + root2 * sg_c * gh.nodes[i]) - peak);
        }
        double log_evidence = peak + std::log(acc);

        const std::size_t draws = 300;
        std::vector<double> vals(draws);
        for (std::size_t d = 0; d < draws; ++d)
            vals[d] = -objective_conditional(fs, m, ps, cfg, sub_seed(7900 + inst, d));
        double mean = mean_of(vals), se = stderr_of(vals);
        worst = std::max(worst, mean - (log_evidence + 3.0 * se));
    }
    r.metric = worst;  // gap above the allowed ceiling; negative is healthy
    r.pass = worst <= 0.0;
    return r;
}

SuiteResult suite_datagen() {
    SuiteResult r{"datagen-structure", false, 0.0, 1e-6,
                  "shape constraints on monotone, convex, and bounded draws"};
    double viol = 0.0;
    for (std::uint64_t i = 0; i < 50; ++i) {
        Rng rng(8000, i);
        dg::MonotonicDraw d = dg::gen_monotonic_function(64, rng);
        std::vector<std::size_t> idx(d.fs.size());
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
        std::sort(idx.begin(), idx.end(), [&](std::size_t u, std::size_t v) {
            return d.fs.x.at(u, 0) < d.fs.x.at(v, 0);
        });
        for (std::size_t k = 1; k < idx.size(); ++k)
            viol = std::max(viol, d.pre_noise[idx[k - 1]] - d.pre_noise[idx[k]]);
    }
    for (std::uint64_t i = 0; i < 50; ++i) {
        Rng rng(8100, i);
        dg::ConvexDraw d = dg::gen_convex_function(64, rng);
        std::vector<std::size_t> idx(d.fs.size());
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
        std::sort(idx.begin(), idx.end(), [&](std::size_t u, std::size_t v) {
            return d.fs.x.at(u, 0) < d.fs.x.at(v, 0);
        });
        double prev = -1e300;
        for (std::size_t k = 1; k < idx.size(); ++k) {
            double dx = d.fs.x.at(idx[k], 0) - d.fs.x.at(idx[k - 1], 0);
            if (dx < 1e-9) continue;
            double slope = (d.pre_noise[idx[k]] - d.pre_noise[idx[k - 1]]) / dx;
            viol = std::max(viol, prev - slope);
            prev = slope;
        }
    }
    for (std::uint64_t i = 0; i < 200; ++i) {
        Rng rng(8200, i);
        FunctionSet fs = dg::gen_sde_function(32, rng);
        for (double v : fs.y) viol = std::max(viol, std::fabs(v) - 1.0);
    }
    dg::PchipNodes nodes;
    nodes.x = {0.0, 1.0, 3.0};
    nodes.y = {0.0, 1.0, 1.5};
    viol = std::max(viol, std::fabs(dg::pchip_interpolate(nodes, {2.0})[0] - 19.0 / 14.0));
    r.metric = viol;
    r.pass = viol < r.threshold;
    return r;
}

SuiteResult suite_bandit() {
    SuiteResult r{"bandit-regret", false, 0.0, 0.0,
                  "uniform play normalises to 100, oracle play to 0"};
    std::vector<double> norms;
    for (std::uint64_t t = 0; t < 30; ++t)
        norms.push_back(bd::run_trial(bd::uniform_agent(), 0.5, 400, 8300 + t)
                            .normalized_cumulative);
    double gap = std::fabs(mean_of(norms) - 100.0);
    double lim = 3.0 * stderr_of(norms);
    bd::TrialResult oracle = bd::run_trial(bd::oracle_agent(0.5), 0.5, 200, 1);
    r.metric = gap;
    r.threshold = lim;
    r.pass = gap <= lim && oracle.cumulative == 0.0;
    return r;
}

SuiteResult suite_bandit_corpus() {
    SuiteResult r{"bandit-corpus", false, 0.0, 0.5, "pretraining corpus shape"};
    auto corpus = bd::gen_pretrain_corpus(97);
    double bad = corpus.size() == 64 ? 0.0 : 1.0;
    for (const auto& w : corpus) {
        if (w.n_context < 10 || w.n_context > 512) bad += 1.0;
        std::size_t tar = w.fs.size() - w.n_context;
        if (tar < 1 || tar > 50) bad += 1.0;
        if (!(w.delta > 0.0 && w.delta < 1.0)) bad += 1.0;
    }
    r.metric = bad;
    r.pass = bad == 0.0;
    return r;
}

struct CheckArgs {
    std::string suite = "all", out;
};

int cmd_check(const CheckArgs& a) {
    using SuiteFn = SuiteResult (*)();
    const std::pair<const char*, SuiteFn> all[] = {
        {"autodiff-gradients", &suite_autodiff},
        {"flows-invertibility", &suite_flows},
        {"setenc-permutation", &suite_setenc},
        {"mnp-exchangeability", &suite_exchangeability},
        {"mnp-consistency", &suite_consistency},
        {"mnp-gradients", &suite_mnp_gradients},
        {"mnp-bounds", &suite_bounds},
        {"datagen-structure", &suite_datagen},
        {"bandit-regret", &suite_bandit},
        {"bandit-corpus", &suite_bandit_corpus},
    };
    auto family_of = [](const std::string& s) { return s.substr(0, s.find('-')); };
    bool any = false, all_pass = true;
    std::string lines;
    for (const auto& [name, fn] : all) {
        std::string n = name;
        if (a.suite != "all" && a.suite != n && a.suite != family_of(n)) continue;
        any = true;
        SuiteResult res = fn();
        all_pass = all_pass && res.pass;
        json line{{"suite", res.name},
                  {"pass", res.pass},
                  {"metric", res.metric},
                  {"threshold", res.threshold},
                  {"detail", res.detail}};
        emit(line);
        lines += line.dump();
        lines += '\n';
    }
    require(any, "check: unknown suite '" + a.suite + "'");
    json summary{{"command", "check"}, {"suite", a.suite}, {"all_pass", all_pass}};
    emit(summary);
    lines += summary.dump();
    lines += '\n';
    if (!a.out.empty()) io::atomic_write_text(a.out, lines);
    return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stochastic-process models built from stacked per-point transitions"};
    app.require_subcommand(1);

    GenArgs ga;
    auto* gen = app.add_subcommand("gen-data", "sample a synthetic dataset to jsonl");
    gen->add_option("--kind", ga.kind,
                    "gp-rbf | gp-matern | gp-periodic | monotonic | convex | sde | wheel");
    gen->add_option("--seed", ga.seed, "generation seed");
    gen->add_option("--out", ga.out, "output jsonl path")->required();
    gen->add_option("--config", ga.config, "dataset spec json, or a gen-data manifest");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "fit a model and write a checkpoint");
    tr->add_option("--config", ta.config, "run config json, or a train manifest");
    tr->add_option("--data", ta.data, "training jsonl")->required();
    tr->add_option("--out", ta.out, "checkpoint output path")->required();
    tr->add_option("--steps", ta.steps, "training step override");
    tr->add_option("--seed", ta.seed, "training seed override");
    tr->add_option("--kind", ta.kind, "model override: mnp | np | gp");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "held-out conditional likelihood of a checkpoint");
    ev->add_option("--ckpt", ea.ckpt, "checkpoint path")->required();
    ev->add_option("--data", ea.data, "evaluation jsonl")->required();
    ev->add_option("--iwae-k", ea.iwae_k, "importance samples per function");
    ev->add_option("--seed", ea.seed, "evaluation seed");
    ev->add_option("--kind", ea.kind, "split to evaluate: train | val | test | all");
    ev->add_option("--out", ea.out, "write the full report json here");
    ev->add_option("--config", ea.config, "eval config json, or an eval manifest");

    PredictArgs pa;
    auto* pr = app.add_subcommand("predict", "sample predictive curves to csv");
    pr->add_option("--ckpt", pa.ckpt, "checkpoint path")->required();
    pr->add_option("--data", pa.data, "jsonl holding the conditioning function")->required();
    pr->add_option("--out", pa.out, "output csv path")->required();
    pr->add_option("--seed", pa.seed, "sampling seed");
    pr->add_option("--config", pa.config, "predict config json, or a predict manifest");

    BanditArgs ba;
    auto* bn = app.add_subcommand("bandit", "run wheel bandit trials");
    bn->add_option("--ckpt", ba.ckpt, "surrogate checkpoint (mnp or np)");
    bn->add_option("--kind", ba.kind, "agent: surrogate | uniform | oracle");
    bn->add_option("--delta", ba.delta, "exploration parameter in (0, 1)");
    bn->add_option("--trials", ba.trials, "independent trials");
    bn->add_option("--horizon", ba.horizon, "steps per trial");
    bn->add_option("--seed", ba.seed, "trial seed");
    bn->add_option("--out", ba.out, "per-step csv output path");
    bn->add_option("--config", ba.config, "bandit config json, or a bandit manifest");

    CheckArgs ca;
    auto* ch = app.add_subcommand("check", "run invariant suites");
    ch->add_option("--suite", ca.suite,
                   "all, a family (autodiff, flows, setenc, mnp, datagen, bandit), or a full name");
    ch->add_option("--out", ca.out, "write the machine-readable summary here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        ga.seed_set = gen->count("--seed") > 0;
        ga.kind_set = gen->count("--kind") > 0;
        ta.seed_set = tr->count("--seed") > 0;
        ta.steps_set = tr->count("--steps") > 0;
        ta.kind_set = tr->count("--kind") > 0;
        ea.seed_set = ev->count("--seed") > 0;
        ba.kind_set = bn->count("--kind") > 0;
        ba.delta_set = bn->count("--delta") > 0;
        ba.trials_set = bn->count("--trials") > 0;
        ba.horizon_set = bn->count("--horizon") > 0;
        ba.seed_set = bn->count("--seed") > 0;
        if (gen->parsed()) return cmd_gen_data(ga);
        if (tr->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_eval(ea);
        if (pr->parsed()) return cmd_predict(pa);
        if (bn->parsed()) return cmd_bandit(ba);
        if (ch->parsed()) return cmd_check(ca);
        std::fprintf(stderr, "error: no subcommand\n");
        return 1;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
