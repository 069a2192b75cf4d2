#pragma once
// File plumbing: JSONL datasets, JSON checkpoints whose numbers survive a
// round trip bit-exactly, run manifests keyed by a config hash, CSV export,
// atomic writes, and a thread cap for data-parallel loops.

#include <json.hpp>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mnp/bandit.hpp"
#include "mnp/datagen.hpp"

namespace mnp::io {

using json = nlohmann::json;

// ---- text files ----

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// temp file plus rename, so readers never observe a partial write
inline void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "cannot open file for writing: " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        require(out.good(), "write failed: " + tmp);
    }
    require(std::rename(tmp.c_str(), path.c_str()) == 0, "rename failed: " + path);
}

// shortest decimal form that parses back to the same bits
inline std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ---- strict parsing ----

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
    require(j.is_object(), where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        require(known, where + ": unknown key '" + it.key() + "'");
    }
}

inline const json& need(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    require(it != j.end(), where + ": missing key '" + std::string(key) + "'");
    return *it;
}

inline double need_num(const json& j, const char* key, const std::string& where) {
    const json& v = need(j, key, where);
    require(v.is_number(), where + ": key '" + std::string(key) + "' must be a number");
    return v.get<double>();
}

inline std::size_t need_count(const json& j, const char* key, const std::string& where) {
    const json& v = need(j, key, where);
    require(v.is_number_integer() && v.get<std::int64_t>() >= 0,
            where + ": key '" + std::string(key) + "' must be a non-negative integer");
    return static_cast<std::size_t>(v.get<std::int64_t>());
}

inline std::string need_str(const json& j, const char* key, const std::string& where) {
    const json& v = need(j, key, where);
    require(v.is_string(), where + ": key '" + std::string(key) + "' must be a string");
    return v.get<std::string>();
}

// ---- dataset lines ----

struct FunctionRecord {
    FunctionSet fs;
    json meta;  // freeform per-function annotations
};

inline json function_to_json(const FunctionSet& fs, const json& meta) {
    fs.validate();
    json jx = json::array();
    for (std::size_t i = 0; i < fs.x.d0; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < fs.x.d1; ++j) row.push_back(fs.x.at(i, j));
        jx.push_back(std::move(row));
    }
    json out;
    out["x"] = std::move(jx);
    out["y"] = fs.y;
    out["meta"] = meta.is_null() ? json::object() : meta;
    return out;
}

inline FunctionRecord function_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"x", "y", "meta"}, where);
    const json& jx = need(j, "x", where);
    const json& jy = need(j, "y", where);
    require(jx.is_array() && !jx.empty(), where + ": 'x' must be a non-empty array");
    require(jy.is_array(), where + ": 'y' must be an array");
    const std::size_t n = jx.size();
    require(jy.size() == n, where + ": 'x' and 'y' lengths differ");
    require(jx[0].is_array() && !jx[0].empty(), where + ": 'x' rows must be arrays");
    const std::size_t d = jx[0].size();
    FunctionRecord rec;
    rec.fs.x = Array::mat(n, d);
    rec.fs.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        require(jx[i].is_array() && jx[i].size() == d, where + ": ragged 'x' rows");
        for (std::size_t c = 0; c < d; ++c) {
            require(jx[i][c].is_number(), where + ": 'x' entries must be numbers");
            rec.fs.x.at(i, c) = jx[i][c].get<double>();
        }
        require(jy[i].is_number(), where + ": 'y' entries must be numbers");
        rec.fs.y[i] = jy[i].get<double>();
    }
    rec.fs.validate();
    if (j.contains("meta")) rec.meta = j["meta"];
    return rec;
}

inline std::string dataset_text(const std::vector<FunctionRecord>& recs) {
    std::string out;
    for (const auto& r : recs) {
        out += function_to_json(r.fs, r.meta).dump();
        out += '\n';
    }
    return out;
}

inline void write_dataset(const std::string& path, const std::vector<FunctionRecord>& recs) {
    atomic_write_text(path, dataset_text(recs));
}

inline std::vector<FunctionRecord> read_dataset(const std::string& path) {
    std::istringstream in(read_text(path));
    std::vector<FunctionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::invalid_argument(where + ": " + e.what());
        }
        out.push_back(function_from_json(j, where));
    }
    require(!out.empty(), path + ": no function records");
    return out;
}

// ---- config documents ----

inline json to_json(const flows::FlowConfig& f) {
    return json{{"kind", flows::flow_kind_name(f.kind)}, {"bins", f.bins}, {"tail", f.tail}};
}

inline flows::FlowConfig flow_config_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"kind", "bins", "tail"}, where);
    flows::FlowConfig f;
    if (j.contains("kind")) f.kind = flows::flow_kind_from_name(need_str(j, "kind", where));
    if (j.contains("bins")) f.bins = need_count(j, "bins", where);
    if (j.contains("tail")) f.tail = need_num(j, "tail", where);
    return f;
}

inline json to_json(const enc::EncoderConfig& e) {
    return json{{"kind", enc::enc_kind_name(e.kind)},
                {"out_dim", e.out_dim},
                {"hidden", e.hidden},
                {"heads", e.heads}};
}

inline enc::EncoderConfig encoder_config_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"kind", "out_dim", "hidden", "heads"}, where);
    enc::EncoderConfig e;
    if (j.contains("kind")) e.kind = enc::enc_kind_from_name(need_str(j, "kind", where));
    if (j.contains("out_dim")) e.out_dim = need_count(j, "out_dim", where);
    if (j.contains("hidden")) e.hidden = need_count(j, "hidden", where);
    if (j.contains("heads")) e.heads = need_count(j, "heads", where);
    return e;
}

inline json to_json(const MnpConfig& c) {
    return json{{"steps", c.steps},
                {"z_dim", c.z_dim},
                {"x_dim", c.x_dim},
                {"n_fourier", c.n_fourier},
                {"cond_hidden", c.cond_hidden},
                {"head_hidden", c.head_hidden},
                {"flow", to_json(c.flow)},
                {"encoder", to_json(c.encoder)},
                {"train_samples", c.train_samples},
                {"iwae_k", c.iwae_k}};
}

inline MnpConfig mnp_config_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j,
                        {"steps", "z_dim", "x_dim", "n_fourier", "cond_hidden", "head_hidden",
                         "flow", "encoder", "train_samples", "iwae_k"},
                        where);
    MnpConfig c;
    if (j.contains("steps")) c.steps = need_count(j, "steps", where);
    if (j.contains("z_dim")) c.z_dim = need_count(j, "z_dim", where);
    if (j.contains("x_dim")) c.x_dim = need_count(j, "x_dim", where);
    if (j.contains("n_fourier")) c.n_fourier = need_count(j, "n_fourier", where);
    if (j.contains("cond_hidden")) c.cond_hidden = need_count(j, "cond_hidden", where);
    if (j.contains("head_hidden")) c.head_hidden = need_count(j, "head_hidden", where);
    if (j.contains("flow")) c.flow = flow_config_from_json(j["flow"], where + ".flow");
    if (j.contains("encoder"))
        c.encoder = encoder_config_from_json(j["encoder"], where + ".encoder");
    if (j.contains("train_samples")) c.train_samples = need_count(j, "train_samples", where);
    if (j.contains("iwae_k")) c.iwae_k = need_count(j, "iwae_k", where);
    c.validate();
    return c;
}

inline json to_json(const bl::NpConfig& c) {
    return json{{"z_dim", c.z_dim},
                {"x_dim", c.x_dim},
                {"n_fourier", c.n_fourier},
                {"dec_hidden", c.dec_hidden},
                {"head_hidden", c.head_hidden},
                {"encoder", to_json(c.encoder)},
                {"train_samples", c.train_samples},
                {"iwae_k", c.iwae_k}};
}

inline bl::NpConfig np_config_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j,
                        {"z_dim", "x_dim", "n_fourier", "dec_hidden", "head_hidden", "encoder",
                         "train_samples", "iwae_k"},
                        where);
    bl::NpConfig c;
    if (j.contains("z_dim")) c.z_dim = need_count(j, "z_dim", where);
    if (j.contains("x_dim")) c.x_dim = need_count(j, "x_dim", where);
    if (j.contains("n_fourier")) c.n_fourier = need_count(j, "n_fourier", where);
    if (j.contains("dec_hidden")) c.dec_hidden = need_count(j, "dec_hidden", where);
    if (j.contains("head_hidden")) c.head_hidden = need_count(j, "head_hidden", where);
    if (j.contains("encoder"))
        c.encoder = encoder_config_from_json(j["encoder"], where + ".encoder");
    if (j.contains("train_samples")) c.train_samples = need_count(j, "train_samples", where);
    if (j.contains("iwae_k")) c.iwae_k = need_count(j, "iwae_k", where);
    c.validate();
    return c;
}

inline json to_json(const bl::GpSpec& s) {
    return json{{"kind", bl::kernel_kind_name(s.kind)}, {"ls_rbf", s.ls_rbf},
                {"var_rbf", s.var_rbf},                 {"ls_mat", s.ls_mat},
                {"var_mat", s.var_mat},                 {"ls_sin", s.ls_sin},
                {"period", s.period},                   {"var_sin", s.var_sin},
                {"noise", s.noise}};
}

inline bl::GpSpec gp_spec_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j,
                        {"kind", "ls_rbf", "var_rbf", "ls_mat", "var_mat", "ls_sin", "period",
                         "var_sin", "noise"},
                        where);
    bl::GpSpec s;
    if (j.contains("kind")) s.kind = bl::kernel_kind_from(need_str(j, "kind", where));
    if (j.contains("ls_rbf")) s.ls_rbf = need_num(j, "ls_rbf", where);
    if (j.contains("var_rbf")) s.var_rbf = need_num(j, "var_rbf", where);
    if (j.contains("ls_mat")) s.ls_mat = need_num(j, "ls_mat", where);
    if (j.contains("var_mat")) s.var_mat = need_num(j, "var_mat", where);
    if (j.contains("ls_sin")) s.ls_sin = need_num(j, "ls_sin", where);
    if (j.contains("period")) s.period = need_num(j, "period", where);
    if (j.contains("var_sin")) s.var_sin = need_num(j, "var_sin", where);
    if (j.contains("noise")) s.noise = need_num(j, "noise", where);
    s.validate();
    return s;
}

inline json to_json(const dg::DatasetSpec& s) {
    return json{{"kind", dg::data_kind_name(s.kind)},
                {"n_train", s.n_train},
                {"n_val", s.n_val},
                {"n_test", s.n_test},
                {"points", s.points},
                {"ctx_lo", s.ctx_lo},
                {"ctx_hi", s.ctx_hi},
                {"seed", s.seed}};
}

inline dg::DatasetSpec dataset_spec_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(
        j, {"kind", "n_train", "n_val", "n_test", "points", "ctx_lo", "ctx_hi", "seed"}, where);
    dg::DatasetSpec s = dg::default_spec(dg::data_kind_from(need_str(j, "kind", where)));
    if (j.contains("n_train")) s.n_train = need_count(j, "n_train", where);
    if (j.contains("n_val")) s.n_val = need_count(j, "n_val", where);
    if (j.contains("n_test")) s.n_test = need_count(j, "n_test", where);
    if (j.contains("points")) s.points = need_count(j, "points", where);
    if (j.contains("ctx_lo")) s.ctx_lo = need_count(j, "ctx_lo", where);
    if (j.contains("ctx_hi")) s.ctx_hi = need_count(j, "ctx_hi", where);
    if (j.contains("seed")) s.seed = need_count(j, "seed", where);
    s.validate();
    return s;
}

inline json to_json(const opt::AdamConfig& a) {
    return json{{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps},
                {"clip", a.clip}};
}

inline opt::AdamConfig adam_config_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"lr", "beta1", "beta2", "eps", "clip"}, where);
    opt::AdamConfig a;
    if (j.contains("lr")) a.lr = need_num(j, "lr", where);
    if (j.contains("beta1")) a.beta1 = need_num(j, "beta1", where);
    if (j.contains("beta2")) a.beta2 = need_num(j, "beta2", where);
    if (j.contains("eps")) a.eps = need_num(j, "eps", where);
    if (j.contains("clip")) a.clip = need_num(j, "clip", where);
    return a;
}

inline json to_json(const TrainOptions& t) {
    return json{{"steps", t.steps},
                {"batch", t.batch},
                {"ctx_lo", t.ctx_lo},
                {"ctx_hi", t.ctx_hi},
                {"adam", to_json(t.adam)}};
}

inline TrainOptions train_options_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"steps", "batch", "ctx_lo", "ctx_hi", "adam"}, where);
    TrainOptions t;
    if (j.contains("steps")) t.steps = need_count(j, "steps", where);
    if (j.contains("batch")) t.batch = need_count(j, "batch", where);
    if (j.contains("ctx_lo")) t.ctx_lo = need_count(j, "ctx_lo", where);
    if (j.contains("ctx_hi")) t.ctx_hi = need_count(j, "ctx_hi", where);
    if (j.contains("adam")) t.adam = adam_config_from_json(j["adam"], where + ".adam");
    return t;
}

// ---- parameter arrays ----

inline json array_to_json(const Array& a) {
    if (a.rank == 0) return json(a.v[0]);
    if (a.rank == 1) return json(a.v);
    json rows = json::array();
    for (std::size_t i = 0; i < a.d0; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < a.d1; ++j) row.push_back(a.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Array array_from_json(const json& j, const std::string& where) {
    if (j.is_number()) return Array::scalar(j.get<double>());
    require(j.is_array() && !j.empty(), where + ": parameter values must be non-empty");
    if (j[0].is_number()) {
        std::vector<double> v;
        v.reserve(j.size());
        for (const auto& e : j) {
            require(e.is_number(), where + ": mixed parameter row");
            v.push_back(e.get<double>());
        }
        return Array::vec(std::move(v));
    }
    require(j[0].is_array() && !j[0].empty(), where + ": malformed parameter nesting");
    const std::size_t r = j.size(), c = j[0].size();
    Array a = Array::mat(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        require(j[i].is_array() && j[i].size() == c, where + ": ragged parameter rows");
        for (std::size_t k = 0; k < c; ++k) {
            require(j[i][k].is_number(), where + ": parameter entries must be numbers");
            a.at(i, k) = j[i][k].get<double>();
        }
    }
    return a;
}

inline json params_to_json(const ad::ParamStore& ps) {
    json out = json::object();
    for (const auto& [name, e] : ps.entries)
        out[name] = json{{"trainable", e.trainable}, {"values", array_to_json(e.value)}};
    return out;
}

inline ad::ParamStore params_from_json(const json& j, const std::string& where) {
    require(j.is_object(), where + ": params must be an object");
    ad::ParamStore ps;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string w = where + "." + it.key();
        reject_unknown_keys(*it, {"trainable", "values"}, w);
        const json& tr = need(*it, "trainable", w);
        require(tr.is_boolean(), w + ": 'trainable' must be a boolean");
        ps.add(it.key(), array_from_json(need(*it, "values", w), w), tr.get<bool>());
    }
    return ps;
}

// ---- checkpoints ----

struct Checkpoint {
    int format_version = 1;
    std::string model;  // mnp | np | gp
    json config;
    ad::ParamStore params;  // empty for gp
    std::size_t step = 0;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    require(ck.model == "mnp" || ck.model == "np" || ck.model == "gp",
            "checkpoint: unknown model kind '" + ck.model + "'");
    json j{{"format_version", ck.format_version},
           {"model", ck.model},
           {"config", ck.config},
           {"step", ck.step},
           {"params", params_to_json(ck.params)}};
    atomic_write_text(path, j.dump(1) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
    reject_unknown_keys(j, {"format_version", "model", "config", "step", "params"}, path);
    Checkpoint ck;
    ck.format_version = static_cast<int>(need_count(j, "format_version", path));
    require(ck.format_version == 1, path + ": unsupported format version");
    ck.model = need_str(j, "model", path);
    require(ck.model == "mnp" || ck.model == "np" || ck.model == "gp",
            path + ": unknown model kind '" + ck.model + "'");
    ck.config = need(j, "config", path);
    ck.step = need_count(j, "step", path);
    ck.params = params_from_json(need(j, "params", path), path + ".params");
    return ck;
}

// ---- manifests ----

// enough to replay the run: the command, its full config document, the seed
struct Manifest {
    std::string command;
    json config;
    std::uint64_t seed = 0;
    int artifact_version = 1;
    std::string config_hash;
};

inline json to_json(const Manifest& m) {
    return json{{"command", m.command},
                {"config", m.config},
                {"seed", m.seed},
                {"artifact_version", m.artifact_version},
                {"config_hash", fnv1a_hex(m.config.dump())}};
}

inline Manifest manifest_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"command", "config", "seed", "artifact_version", "config_hash"},
                        where);
    Manifest m;
    m.command = need_str(j, "command", where);
    m.config = need(j, "config", where);
    m.seed = need_count(j, "seed", where);
    if (j.contains("artifact_version"))
        m.artifact_version = static_cast<int>(need_count(j, "artifact_version", where));
    m.config_hash = fnv1a_hex(m.config.dump());
    if (j.contains("config_hash"))
        require(need_str(j, "config_hash", where) == m.config_hash,
                where + ": config hash mismatch");
    return m;
}

inline bool looks_like_manifest(const json& j) {
    return j.is_object() && j.contains("command") && j.contains("config") && j.contains("seed");
}

inline std::string manifest_path(const std::string& out_path) {
    return out_path + ".manifest.json";
}

inline void write_manifest(const std::string& out_path, const Manifest& m) {
    atomic_write_text(manifest_path(out_path), to_json(m).dump(1) + "\n");
}

// ---- csv ----

inline std::string loss_csv(const std::vector<double>& trace) {
    std::string out = "step,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) {
        out += std::to_string(i);
        out += ',';
        out += format_double(trace[i]);
        out += '\n';
    }
    return out;
}

// aggregate rows leave the sample field empty; sampled-curve rows carry the
// draw's value in the mean column and leave std empty
inline std::string prediction_csv(const Array& x_targets, const Array& draws) {
    require(x_targets.rank == 2 && draws.rank == 2 && draws.d1 == x_targets.d0,
            "prediction csv: draws must be n_draws x n_targets");
    require(draws.d0 >= 1, "prediction csv: need at least one draw");
    std::string out = "x,mean,std,sample\n";
    const std::size_t n = x_targets.d0, k = draws.d0;
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0.0;
        for (std::size_t d = 0; d < k; ++d) mean += draws.at(d, j);
        mean /= static_cast<double>(k);
        double var = 0.0;
        for (std::size_t d = 0; d < k; ++d) {
            double e = draws.at(d, j) - mean;
            var += e * e;
        }
        double sd = k > 1 ? std::sqrt(var / static_cast<double>(k - 1)) : 0.0;
        out += format_double(x_targets.at(j, 0));
        out += ',';
        out += format_double(mean);
        out += ',';
        out += format_double(sd);
        out += ",\n";
    }
    for (std::size_t d = 0; d < k; ++d)
        for (std::size_t j = 0; j < n; ++j) {
            out += format_double(x_targets.at(j, 0));
            out += ',';
            out += format_double(draws.at(d, j));
            out += ",,";
            out += std::to_string(d);
            out += '\n';
        }
    return out;
}

inline std::string trial_csv(const std::vector<bd::TrialResult>& trials) {
    std::string out = "trial,step,action,reward,regret\n";
    for (std::size_t t = 0; t < trials.size(); ++t)
        for (std::size_t s = 0; s < trials[t].regrets.size(); ++s) {
            out += std::to_string(t);
            out += ',';
            out += std::to_string(s);
            out += ',';
            out += std::to_string(trials[t].actions[s]);
            out += ',';
            out += format_double(trials[t].rewards[s]);
            out += ',';
            out += format_double(trials[t].regrets[s]);
            out += '\n';
        }
    return out;
}

// ---- worker threads ----

inline std::size_t thread_cap() {
    const char* env = std::getenv("MNP_THREADS");
    if (env) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        require(end != env && *end == '\0' && v >= 1, "MNP_THREADS must be a positive integer");
        return static_cast<std::size_t>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

// index-split map; each unit owns its slot, so results are order-stable and
// independent of the worker count
template <class Fn>
inline void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = thread_cap()) {
    if (n == 0) return;
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr err;
    std::mutex err_mu;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace mnp::io
