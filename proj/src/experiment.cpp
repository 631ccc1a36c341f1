#include "covmoe/experiment.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "covmoe/errors.hpp"

namespace covmoe {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError(section + ": expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k)) throw ConfigError(section + ": unknown key '" + k + "'");
}

const std::initializer_list<const char*> kTrainKeys = {"lr",    "batch_size", "epochs",  "max_steps",
                                                       "optimizer", "beta1",  "beta2",   "epsilon",
                                                       "seed",  "scope",      "gating"};

}  // namespace

ExperimentConfig::ExperimentConfig() {
    window.context_len = 48;
    window.horizon = 24;
    window.stride = 24;
    data.synthetic = SyntheticConfig{};
    data.synthetic->hours = 24 * 200;
    data.schema = synthetic_schema();
    train.lr = 1e-2;
    train.epochs = 8;
    federation.local = train;
    federation.gate.lr = 1e-2;
    federation.gate.epochs = 10;
    federation.cold_start.lr = 1e-3;
    federation.cold_start.epochs = 3;
}

json ExperimentConfig::to_json() const {
    json data_j;
    if (data.synthetic) {
        data_j["synthetic"] = data.synthetic->to_json();
    } else {
        json files = json::array();
        for (const auto& f : data.files) files.push_back(f.generic_string());
        data_j["files"] = files;
        data_j["schema"] = data.schema.to_json();
    }
    return {{"seed", seed},
            {"data", data_j},
            {"window", {{"context", window.context_len}, {"horizon", window.horizon}, {"stride", window.stride}}},
            {"split", {{"train", window.train_fraction}, {"val", window.val_fraction}}},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"federation", federation.to_json()},
            {"eval", {{"seasonality", seasonality}}},
            {"output", output_dir.generic_string()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
    try {
        check_keys(j, {"seed", "data", "window", "split", "model", "train", "federation", "eval", "output"}, "config");
        ExperimentConfig c;
        c.seed = j.value("seed", c.seed);
        if (j.contains("data")) {
            const json& d = j.at("data");
            check_keys(d, {"synthetic", "files", "schema"}, "data");
            if (d.contains("synthetic") == d.contains("files")) {
                throw ConfigError("data: give exactly one of 'synthetic' or 'files'");
            }
            if (d.contains("synthetic")) {
                check_keys(d.at("synthetic"), {"regions", "hours", "seed", "start", "noise"}, "data.synthetic");
                c.data.synthetic = SyntheticConfig::from_json(d.at("synthetic"));
                c.data.schema = synthetic_schema();
            } else {
                c.data.synthetic.reset();
                for (const auto& f : d.at("files")) {
                    std::filesystem::path p = f.get<std::string>();
                    c.data.files.push_back(p.is_relative() && !base_dir.empty() ? base_dir / p : p);
                }
                if (c.data.files.empty()) throw ConfigError("data: 'files' is empty");
                if (!d.contains("schema")) throw ConfigError("data: 'files' needs a 'schema'");
                check_keys(d.at("schema"),
                           {"timestamp_column", "target", "channels", "covariates", "step_seconds", "max_gap_fraction"},
                           "data.schema");
                c.data.schema = CsvSchema::from_json(d.at("schema"));
            }
        }
        if (j.contains("window")) {
            const json& w = j.at("window");
            check_keys(w, {"context", "horizon", "stride"}, "window");
            c.window.context_len = w.value("context", c.window.context_len);
            c.window.horizon = w.value("horizon", c.window.horizon);
            c.window.stride = w.value("stride", c.window.stride);
        }
        if (j.contains("split")) {
            const json& s = j.at("split");
            check_keys(s, {"train", "val"}, "split");
            c.window.train_fraction = s.value("train", c.window.train_fraction);
            c.window.val_fraction = s.value("val", c.window.val_fraction);
        }
        if (j.contains("model")) {
            check_keys(j.at("model"),
                       {"h", "h_z", "h_ff", "shared", "conditional", "routed", "top_k", "rank", "fallback",
                        "gate_input", "quantiles", "selector", "hour_buckets", "backbone_seed"},
                       "model");
            c.model = ModelSpec::from_json(j.at("model"));
        }
        if (j.contains("train")) {
            check_keys(j.at("train"), kTrainKeys, "train");
            json merged = c.train.to_json();
            merged.update(j.at("train"));
            c.train = TrainConfig::from_json(merged);
        }
        c.federation.local = c.train;
        if (j.contains("federation")) {
            const json& f = j.at("federation");
            check_keys(f,
                       {"clients", "scheme", "alpha", "dval_fraction", "local", "gate", "pool_top_k",
                        "server_gate_input", "concurrent", "keep_local_gates", "cold_start_budget",
                        "cold_start_rank", "cold_start", "personalized"},
                       "federation");
            for (const char* sub : {"local", "gate", "cold_start"})
                if (f.contains(sub)) check_keys(f.at(sub), kTrainKeys, std::string("federation.") + sub);
            json merged = c.federation.to_json();
            for (const char* sub : {"local", "gate", "cold_start"})
                if (f.contains(sub)) merged[sub].update(f.at(sub));
            for (const auto& [k, v] : f.items())
                if (k != "local" && k != "gate" && k != "cold_start") merged[k] = v;
            c.federation = FedConfig::from_json(merged);
        }
        if (j.contains("eval")) {
            check_keys(j.at("eval"), {"seasonality"}, "eval");
            c.seasonality = j.at("eval").value("seasonality", c.seasonality);
        }
        if (j.contains("output")) c.output_dir = j.at("output").get<std::string>();
        if (c.window.context_len <= c.seasonality) {
            throw ConfigError("window.context must exceed eval.seasonality (" + std::to_string(c.seasonality) + ")");
        }
        if (c.window.stride == 0) throw ConfigError("window.stride must be positive");
        c.window.alpha = c.federation.alpha;
        c.window.seed = Rng(c.seed).derive("partition").next_u64();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j, path.parent_path());
}

// ------------------------------------------------------------------ data

std::vector<Window> Dataset::all(std::vector<Window> ClientPartition::*split) const {
    std::vector<Window> out;
    for (const auto& c : clients) out.insert(out.end(), (c.*split).begin(), (c.*split).end());
    return out;
}

std::vector<std::vector<double>> Dataset::raw_targets() const {
    std::vector<std::vector<double>> out;
    for (const auto& f : frames) out.push_back(f.target_series());
    return out;
}

std::vector<SeriesFrame> load_frames(const ExperimentConfig& cfg, json* inputs) {
    std::vector<SeriesFrame> frames;
    json in = json::array();
    if (cfg.data.synthetic) {
        frames = make_synthetic_frames(*cfg.data.synthetic);
        Fnv1a h;
        h.text(cfg.data.synthetic->to_json().dump());
        in.push_back({{"source", "synthetic"}, {"hash", hex64(h.digest())}});
    } else {
        for (const auto& path : cfg.data.files) {
            frames.push_back(derive_calendar_covariates(load_csv(path, cfg.data.schema)));
            std::ifstream f(path, std::ios::binary);
            std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
            Fnv1a h;
            h.text(bytes);
            in.push_back({{"source", path.filename().string()}, {"hash", hex64(h.digest())}});
        }
    }
    for (const auto& f : frames) {
        if (f.channels() != frames.front().channels() || f.covariate_count() != frames.front().covariate_count()) {
            throw ConfigError("all input series must share channels and covariates");
        }
    }
    if (inputs) *inputs = std::move(in);
    return frames;
}

Dataset build_dataset(const ExperimentConfig& cfg, bool federated) {
    Dataset ds;
    ds.frames = load_frames(cfg, &ds.inputs);
    std::vector<ClientPartition> parts;
    if (federated) {
        const auto& fc = cfg.federation;
        if (fc.scheme == PartitionScheme::by_region && ds.frames.size() > fc.clients) ds.frames.resize(fc.clients);
        parts = partition_clients(ds.frames, fc.clients, fc.scheme, cfg.window);
    } else if (ds.frames.size() >= 2) {
        parts = partition_clients(ds.frames, ds.frames.size(), PartitionScheme::by_region, cfg.window);
    } else {
        const auto& f = ds.frames.front();
        parts.push_back(split_chronological(f.region.empty() ? "client-0" : f.region, 0,
                                            make_windows(f, cfg.window.context_len, cfg.window.horizon,
                                                         cfg.window.stride, 0),
                                            cfg.window));
    }
    const auto& f0 = ds.frames.front();
    for (auto& p : parts) ds.clients.push_back(normalize(std::move(p), f0.channel_names, f0.covariate_names));
    ds.regions = ds.clients.size();
    ds.d = f0.channels();
    ds.p = f0.covariate_count();
    ds.horizon = cfg.window.horizon;
    return ds;
}

MetricReport evaluate_clients(ForecastModel& model, const std::vector<ClientPartition>& clients,
                              const RoutingOptions& opts, std::size_t m, std::vector<MetricReport>* per_client,
                              const std::vector<std::vector<Window>>* override_test) {
    std::vector<MetricReport> parts;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const auto& c = clients[i];
        if (!c.scaler) throw ConfigError("client '" + c.client_id + "' is not normalized");
        const auto& test = override_test ? override_test->at(i) : c.test;
        parts.push_back(evaluate(model, test, *c.scaler, opts, m));
    }
    MetricReport merged = merge_reports(parts);
    if (per_client) *per_client = std::move(parts);
    return merged;
}

CentralRun train_centralized(const ExperimentConfig& cfg, const Dataset& data) {
    CentralRun run{ForecastModel::init(cfg.model, data.d, data.p, data.horizon, data.regions, cfg.seed), {}, {}, {}};
    TrainConfig tc = cfg.train;
    run.report = train_local(run.model, data.all(&ClientPartition::train), data.all(&ClientPartition::val), tc);
    run.test = evaluate_clients(run.model, data.clients, routing_for(tc), cfg.seasonality, &run.per_client);
    return run;
}

// -------------------------------------------------------------- checkpoints

void write_checkpoint(const std::filesystem::path& path, const ForecastModel& model, const TrainConfig& train) {
    json manifest = {{"model", model.spec.to_json()},
                     {"regions", model.regions},
                     {"routing", {{"strategy", std::string(to_string(train.strategy))}, {"seed", train.seed}}},
                     {"fingerprints",
                      {{"tokenizer", hex64(model.tokenizer.fingerprint())},
                       {"backbone", hex64(model.backbone.fingerprint())},
                       {"moe", hex64(model.moe.fingerprint())}}}};
    const std::string text = manifest.dump();
    ByteWriter w;
    w.magic("CKPT");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.raw(text.data(), text.size());
    write_model(w, model);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
    if (!out) throw IoError("short write to " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    Bytes all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ByteReader r(all, ErrorKind::checkpoint);
    r.expect_magic("CKPT");
    if (r.u32() != 1) r.fail("unsupported checkpoint version");
    const std::uint32_t n = r.u32();
    auto text = r.raw(n);
    Checkpoint ck;
    try {
        ck.manifest = json::parse(text.begin(), text.end());
        const ModelSpec spec = ModelSpec::from_json(ck.manifest.at("model"));
        const std::size_t regions = ck.manifest.at("regions").get<std::size_t>();
        ck.model = read_model(r, spec, regions);
        ck.routing.strategy = gating_strategy_from_string(ck.manifest.at("routing").at("strategy").get<std::string>());
        ck.routing.seed = ck.manifest.at("routing").at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint manifest unreadable: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint manifest invalid: ") + e.what());
    }
    if (!r.done()) r.fail("trailing bytes after model records");
    const auto& fp = ck.manifest.at("fingerprints");
    const std::pair<const char*, std::uint64_t> checks[] = {{"tokenizer", ck.model.tokenizer.fingerprint()},
                                                            {"backbone", ck.model.backbone.fingerprint()},
                                                            {"moe", ck.model.moe.fingerprint()}};
    for (const auto& [name, value] : checks) {
        if (!fp.contains(name) || fp.at(name).get<std::string>() != hex64(value)) {
            throw CheckpointError(std::string(name) + " fingerprint does not match the checkpoint manifest");
        }
    }
    return ck;
}

}  // namespace covmoe
