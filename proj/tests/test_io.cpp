#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "mnp/io.hpp"
#include "test_support.hpp"

using namespace mnp;
using io::json;

namespace {

std::string temp_path(const std::string& stem) {
    static std::atomic<int> counter{0};
    return (std::filesystem::temp_directory_path() /
            (stem + "." + std::to_string(counter++) + ".tmp.json"))
        .string();
}

struct PathGuard {
    std::string p;
    explicit PathGuard(std::string s) : p(std::move(s)) {}
    ~PathGuard() { std::remove(p.c_str()); }
};

double bits_to_finite_double(std::uint64_t bits) {
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    if (!std::isfinite(d)) return static_cast<double>(bits % 1000003) * 1e-3;
    return d;
}

}  // namespace

TEST_CASE("doubles survive serialisation bit-exactly") {
    Rng rng(901);
    std::vector<double> vals = {0.0, -0.0, 1.0, -1.0, 0.1, 1e-300, 1e300, 2.2250738585072014e-308};
    for (std::size_t i = 0; i < 20000; ++i) {
        std::uint64_t bits = (static_cast<std::uint64_t>(rng.uniform_int(0, (1LL << 32) - 1)) << 32) ^
                             static_cast<std::uint64_t>(rng.uniform_int(0, (1LL << 32) - 1));
        vals.push_back(bits_to_finite_double(bits));
    }
    for (double v : vals) {
        json j = v;
        double back = json::parse(j.dump()).get<double>();
        std::uint64_t b1, b2;
        std::memcpy(&b1, &v, 8);
        std::memcpy(&b2, &back, 8);
        CHECK(b1 == b2);

        // the CSV formatter makes the same guarantee
        double parsed = std::strtod(io::format_double(v).c_str(), nullptr);
        std::memcpy(&b2, &parsed, 8);
        CHECK(b1 == b2);
    }
}

TEST_CASE("dataset lines round-trip and reject malformed rows") {
    Rng rng(903);
    std::vector<io::FunctionRecord> recs;
    for (std::size_t i = 0; i < 7; ++i) {
        io::FunctionRecord r;
        std::size_t n = 3 + i;
        r.fs.x = testsup::random_array(rng, 2, n, 2);
        r.fs.y.resize(n);
        for (auto& v : r.fs.y) v = rng.normal();
        r.meta = json{{"kind", "gp-rbf"}, {"split", "train"}, {"index", i}};
        recs.push_back(std::move(r));
    }
    PathGuard pg(temp_path("ds"));
    io::write_dataset(pg.p, recs);
    auto back = io::read_dataset(pg.p);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        REQUIRE(back[i].fs.x.d0 == recs[i].fs.x.d0);
        REQUIRE(back[i].fs.x.d1 == 2);
        for (std::size_t k = 0; k < recs[i].fs.x.numel(); ++k)
            CHECK(back[i].fs.x.v[k] == recs[i].fs.x.v[k]);
        for (std::size_t k = 0; k < recs[i].fs.y.size(); ++k)
            CHECK(back[i].fs.y[k] == recs[i].fs.y[k]);
        CHECK(back[i].meta["index"].get<std::size_t>() == i);
    }

    // identical content twice gives identical bytes
    std::string text1 = io::dataset_text(recs);
    std::string text2 = io::dataset_text(recs);
    CHECK(text1 == text2);

    CHECK_THROWS_AS((void)io::function_from_json(json::parse(R"({"x":[[0.1]],"y":[1],"zz":3})"),
                                                 "t"),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)io::function_from_json(json::parse(R"({"x":[[0.1],[0.2]],"y":[1]})"),
                                                 "t"),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)io::function_from_json(json::parse(R"({"x":[[0.1],[0.2,0.3]],"y":[1,2]})"),
                                                 "t"),
                    std::invalid_argument);

    PathGuard bad(temp_path("badline"));
    io::atomic_write_text(bad.p, "{\"x\": [[0.0]], \"y\": [1.0]}\nnot json\n");
    try {
        (void)io::read_dataset(bad.p);
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find(":2") != std::string::npos);  // line diagnostic
    }
}

TEST_CASE("config documents are strict about keys and values") {
    MnpConfig mc;
    mc.steps = 4;
    mc.flow.kind = flows::FlowKind::Affine;
    mc.encoder.kind = enc::EncKind::SetTransformer;
    mc.encoder.heads = 2;
    json j = io::to_json(mc);
    MnpConfig back = io::mnp_config_from_json(j, "cfg");
    CHECK(back.steps == 4);
    CHECK(back.flow.kind == flows::FlowKind::Affine);
    CHECK(back.encoder.kind == enc::EncKind::SetTransformer);
    CHECK(back.encoder.heads == 2);

    json extra = j;
    extra["bogus"] = 1;
    CHECK_THROWS_AS((void)io::mnp_config_from_json(extra, "cfg"), std::invalid_argument);
    json negative = j;
    negative["steps"] = -3;
    CHECK_THROWS_AS((void)io::mnp_config_from_json(negative, "cfg"), std::invalid_argument);
    json wrongtype = j;
    wrongtype["z_dim"] = "five";
    CHECK_THROWS_AS((void)io::mnp_config_from_json(wrongtype, "cfg"), std::invalid_argument);

    bl::GpSpec gs;
    gs.kind = bl::KernelKind::Additive;
    gs.noise = 0.007;
    bl::GpSpec gback = io::gp_spec_from_json(io::to_json(gs), "gp");
    CHECK(gback.kind == bl::KernelKind::Additive);
    CHECK(gback.noise == 0.007);

    dg::DatasetSpec ds = dg::default_spec(dg::DataKind::Monotonic);
    ds.seed = 9;
    dg::DatasetSpec dback = io::dataset_spec_from_json(io::to_json(ds), "ds");
    CHECK(dback.kind == dg::DataKind::Monotonic);
    CHECK(dback.ctx_hi == 20);
    CHECK(dback.seed == 9);
    CHECK_THROWS_AS((void)io::dataset_spec_from_json(json{{"n_train", 5}}, "ds"),
                    std::invalid_argument);  // kind is mandatory

    TrainOptions topt;
    topt.steps = 77;
    topt.adam.lr = 0.5;
    TrainOptions tback = io::train_options_from_json(io::to_json(topt), "train");
    CHECK(tback.steps == 77);
    CHECK(tback.adam.lr == 0.5);
}

TEST_CASE("checkpoints restore every parameter bit and stay strict") {
    MnpConfig cfg;
    cfg.steps = 2;
    cfg.z_dim = 3;
    cfg.n_fourier = 4;
    cfg.cond_hidden = 8;
    cfg.head_hidden = 8;
    cfg.encoder.out_dim = 8;
    cfg.encoder.hidden = 8;
    Rng rng(905);
    ad::ParamStore ps;
    init_mnp(ps, cfg, rng);

    io::Checkpoint ck;
    ck.model = "mnp";
    ck.config = io::to_json(cfg);
    ck.params = ps;
    ck.step = 321;
    PathGuard pg(temp_path("ck"));
    io::save_checkpoint(pg.p, ck);
    io::Checkpoint back = io::load_checkpoint(pg.p);
    CHECK(back.model == "mnp");
    CHECK(back.step == 321);
    REQUIRE(back.params.entries.size() == ps.entries.size());
    for (const auto& [name, e] : ps.entries) {
        REQUIRE(back.params.has(name));
        const Array& b = back.params.value(name);
        REQUIRE(b.rank == e.value.rank);
        REQUIRE(b.d0 == e.value.d0);
        REQUIRE(b.d1 == e.value.d1);
        CHECK(back.params.entries.at(name).trainable == ps.entries.at(name).trainable);
        for (std::size_t k = 0; k < b.numel(); ++k) CHECK(b.v[k] == e.value.v[k]);
    }
    MnpConfig cback = io::mnp_config_from_json(back.config, "ck.config");
    CHECK(cback.steps == cfg.steps);

    // saving the loaded copy reproduces the file byte for byte
    PathGuard pg2(temp_path("ck2"));
    io::save_checkpoint(pg2.p, back);
    CHECK(io::read_text(pg.p) == io::read_text(pg2.p));

    json raw = json::parse(io::read_text(pg.p));
    raw["surprise"] = 1;
    PathGuard pg3(temp_path("ck3"));
    io::atomic_write_text(pg3.p, raw.dump());
    CHECK_THROWS_AS((void)io::load_checkpoint(pg3.p), std::invalid_argument);
    raw.erase("surprise");
    raw["format_version"] = 2;
    io::atomic_write_text(pg3.p, raw.dump());
    CHECK_THROWS_AS((void)io::load_checkpoint(pg3.p), std::invalid_argument);
}

TEST_CASE("manifests hash their config and verify on load") {
    io::Manifest m;
    m.command = "gen-data";
    m.config = json{{"kind", "gp-rbf"}, {"n_train", 10}};
    m.seed = 7;
    json j = io::to_json(m);
    CHECK(j["config_hash"].get<std::string>().size() == 16);

    io::Manifest back = io::manifest_from_json(j, "m");
    CHECK(back.command == "gen-data");
    CHECK(back.seed == 7);
    CHECK(back.config == m.config);
    CHECK(io::looks_like_manifest(j));
    CHECK(!io::looks_like_manifest(json{{"kind", "gp-rbf"}}));

    json tampered = j;
    tampered["config"]["n_train"] = 11;
    CHECK_THROWS_AS((void)io::manifest_from_json(tampered, "m"), std::invalid_argument);

    // reference value pins the hash function itself
    CHECK(io::fnv1a_hex("") == "cbf29ce484222325");
    CHECK(io::fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("csv exports carry the stated columns") {
    std::vector<double> trace = {2.5, 1.25, 0.75};
    std::string lc = io::loss_csv(trace);
    CHECK(lc == "step,loss\n0,2.5\n1,1.25\n2,0.75\n");

    Array x = Array::mat(2, 1);
    x.at(0, 0) = -1.0;
    x.at(1, 0) = 0.5;
    Array draws = Array::mat(2, 2);
    draws.at(0, 0) = 1.0;
    draws.at(0, 1) = 3.0;
    draws.at(1, 0) = 3.0;
    draws.at(1, 1) = 5.0;
    std::string pc = io::prediction_csv(x, draws);
    CHECK(pc.rfind("x,mean,std,sample\n", 0) == 0);
    // aggregate row: mean 2, sd sqrt(2) at x=-1
    CHECK(pc.find("-1,2," + io::format_double(std::sqrt(2.0)) + ",\n") != std::string::npos);
    CHECK(pc.find("-1,1,,0\n") != std::string::npos);  // draw 0 value at x=-1
    CHECK(pc.find("0.5,5,,1\n") != std::string::npos);

    bd::TrialResult tr;
    tr.actions = {1, 4};
    tr.rewards = {1.19, 50.01};
    tr.regrets = {0.0, 48.8};
    std::string tc = io::trial_csv({tr});
    CHECK(tc == "trial,step,action,reward,regret\n0,0,1,1.19,0\n0,1,4,50.01,48.8\n");
}

TEST_CASE("parallel maps match serial execution for any worker count") {
    const std::size_t n = 1000;
    std::vector<double> serial(n), wide(n);
    auto work = [](std::size_t i) {
        Rng rng(907, i);
        double acc = 0.0;
        for (int k = 0; k < 50; ++k) acc += rng.normal();
        return acc;
    };
    io::parallel_for(n, [&](std::size_t i) { serial[i] = work(i); }, 1);
    io::parallel_for(n, [&](std::size_t i) { wide[i] = work(i); }, 7);
    CHECK(serial == wide);

    bool threw = false;
    try {
        io::parallel_for(
            8, [](std::size_t i) { if (i == 5) throw numeric_error("boom"); }, 4);
    } catch (const numeric_error&) {
        threw = true;
    }
    CHECK(threw);
}
