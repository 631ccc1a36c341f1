#include "covmoe/commands.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>

#include "covmoe/ablation.hpp"
#include "covmoe/experiment.hpp"

namespace covmoe {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class RunDir {
public:
    explicit RunDir(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
    }

    fs::path path(const std::string& name) {
        artifacts_.push_back(name);
        return dir_ / name;
    }

    void text(const std::string& name, const std::string& content) {
        const fs::path p = path(name);
        std::ofstream f(p, std::ios::binary);
        f << content;
        if (!f) throw IoError("cannot write " + p.string());
    }

    void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

    const std::vector<std::string>& artifacts() const noexcept { return artifacts_; }

private:
    fs::path dir_;
    std::vector<std::string> artifacts_;
};

ExperimentConfig load_config(const CommandOptions& o) {
    ExperimentConfig cfg = ExperimentConfig::load(o.config);
    if (o.out) cfg.output_dir = *o.out;
    cfg.model.validate();
    cfg.train.validate();
    cfg.federation.validate();
    return cfg;
}

std::string now_utc() {
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(
                          std::chrono::system_clock::now().time_since_epoch())
                          .count();
    return format_timestamp(static_cast<Timestamp>(secs));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json fingerprints_of(const ForecastModel& m) {
    return {{"tokenizer", hex64(m.tokenizer.fingerprint())},
            {"backbone", hex64(m.backbone.fingerprint())},
            {"moe", hex64(m.moe.fingerprint())}};
}

// Manifest and timing carry wall-clock values; every other artifact is a
// pure function of the config and inputs.
void finish(RunDir& dir, const ExperimentConfig& cfg, const json& inputs, const json& fingerprints,
            const json& timing) {
    dir.json_file("timing.json", timing);
    Fnv1a h;
    h.text(cfg.to_json().dump());
    json artifacts = dir.artifacts();
    artifacts.push_back("manifest.json");
    dir.json_file("manifest.json", {{"config_hash", hex64(h.digest())},
                                    {"inputs", inputs},
                                    {"fingerprints", fingerprints},
                                    {"created_utc", now_utc()},
                                    {"artifacts", artifacts}});
}

std::string utilization_csv(const std::vector<std::size_t>& counts, std::size_t conditional) {
    std::string s = "class,index,count\n";
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const bool cond = i < conditional;
        s += std::string(cond ? "conditional," : "routed,") + std::to_string(cond ? i : i - conditional) + "," +
             std::to_string(counts[i]) + "\n";
    }
    return s;
}

json metrics_document(const MetricReport& merged, const std::vector<MetricReport>& parts,
                      const std::vector<ClientPartition>& clients) {
    json per = json::array();
    for (std::size_t i = 0; i < parts.size(); ++i)
        per.push_back({{"client", clients[i].client_id}, {"region", clients[i].region_code}, {"metrics", parts[i].to_json()}});
    return {{"test", merged.to_json(false)}, {"clients", per}};
}

}  // namespace

void cmd_train(const CommandOptions& o, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = load_config(o);
    const Dataset data = build_dataset(cfg, false);
    RunDir dir(cfg.output_dir);
    dir.json_file("resolved_config.json", cfg.to_json());

    CentralRun run = train_centralized(cfg, data);
    json report = run.report.to_json();
    report["fingerprints"] = fingerprints_of(run.model);
    dir.json_file("train_report.json", report);
    dir.text("loss_trace.csv", run.report.loss_csv());
    const json metrics = metrics_document(run.test, run.per_client, data.clients);
    dir.json_file("metrics.json", metrics);
    dir.text("utilization.csv", utilization_csv(run.report.utilization, cfg.model.moe.conditional));
    json scalers = json::array();
    for (const auto& c : data.clients) scalers.push_back({{"client", c.client_id}, {"scaler", c.scaler->to_json()}});
    dir.json_file("scalers.json", scalers);
    write_checkpoint(dir.path("checkpoint.bin"), run.model, cfg.train);
    finish(dir, cfg, data.inputs, fingerprints_of(run.model),
           {{"train_seconds", run.report.wall_seconds}, {"total_seconds", seconds_since(t0)}});
    out << metrics["test"].dump(2) << "\n";
}

void cmd_eval(const CommandOptions& o, std::ostream& out) {
    const ExperimentConfig cfg = ExperimentConfig::load(o.config);
    if (!o.checkpoint) throw ConfigError("eval needs --checkpoint");
    Checkpoint ck = read_checkpoint(*o.checkpoint);
    const Dataset data = build_dataset(cfg, false);
    const ModelDims& dims = ck.model.dims;
    if (dims.d != data.d || dims.p != data.p || dims.horizon != data.horizon || ck.model.regions != data.regions) {
        throw ConfigError("checkpoint shapes do not match the configured data");
    }
    std::vector<MetricReport> parts;
    const MetricReport merged = evaluate_clients(ck.model, data.clients, ck.routing, cfg.seasonality, &parts);
    const json metrics = metrics_document(merged, parts, data.clients);
    if (o.out) {
        RunDir dir(*o.out);
        dir.json_file("eval_metrics.json", metrics);
    }
    out << metrics["test"].dump(2) << "\n";
}

void cmd_fed_sim(const CommandOptions& o, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = load_config(o);
    const Dataset data = build_dataset(cfg, true);
    RunDir dir(cfg.output_dir);
    dir.json_file("resolved_config.json", cfg.to_json());

    Federation fed(data.clients, cfg.model, cfg.federation, cfg.seed, data.regions);
    fed.run_all();
    const double fed_seconds = seconds_since(t0);

    const RoutingOptions opts = routing_for(cfg.federation.gate);
    json per = json::array();
    std::vector<MetricReport> fed_parts;
    for (std::size_t i = 0; i < fed.clients().size(); ++i) {
        const ClientState& c = fed.clients()[i];
        json entry = {{"client", c.client_id}, {"region", c.partition.region_code}};
        if (c.local_report) {
            entry["local_training"] = {{"initial_val_loss", c.local_report->initial_val_loss},
                                       {"final_val_loss", c.local_report->final_val_loss},
                                       {"steps", c.local_report->steps}};
        }
        MetricReport rep = evaluate(fed.deployed_model(i), c.partition.test, *c.partition.scaler, opts, cfg.seasonality);
        entry["federated"] = rep.to_json(false);
        fed_parts.push_back(rep);
        if (cfg.federation.cold_start_budget > 0) {
            AdaptResult a = cold_start_adapt(c, *c.bundle, cfg.federation.cold_start_budget,
                                             cfg.federation.cold_start_rank, cfg.federation.cold_start, cfg.seasonality);
            entry["cold_start"] = {{"budget", cfg.federation.cold_start_budget},
                                   {"steps", a.steps},
                                   {"pre_val_loss", a.pre_val_loss},
                                   {"post_val_loss", a.post_val_loss},
                                   {"pre", a.pre.to_json(false)},
                                   {"post", a.post.to_json(false)}};
        }
        if (cfg.federation.personalized) {
            PersonalizedResult p = personalized_routing(c, *c.bundle, cfg.seasonality);
            entry["personalized"] = {{"training_steps", p.training_steps}, {"metrics", p.report.to_json(false)}};
        }
        per.push_back(entry);
    }
    dir.json_file("client_metrics.json", {{"federated", merge_reports(fed_parts).to_json(false)}, {"clients", per}});

    dir.text("ledger.csv", fed.ledger().to_csv());
    const fs::path archive_path = dir.path("messages.bin");
    write_archive(archive_path, fed.archive());
    const ModelDims dims = fed.server().model->dims;
    dir.json_file("comm_report.json", communication_report(fed.ledger(), dims).to_json());
    // The audit replays what actually went over the wire, read back from disk.
    const AuditResult audit = privacy_audit(fed.ledger(), read_archive(archive_path), data.raw_targets());
    dir.json_file("privacy_audit.json", audit.to_json());
    if (fed.server().gate_report) {
        json g = fed.server().gate_report->to_json();
        json pool = json::array();
        for (auto f : fed.server().pool_fingerprints) pool.push_back(hex64(f));
        g["pool_fingerprints"] = pool;
        dir.json_file("gate_training.json", g);
    }
    finish(dir, cfg, data.inputs, fingerprints_of(*fed.server().model),
           {{"federation_seconds", fed_seconds}, {"total_seconds", seconds_since(t0)}});
    out << json{{"privacy_audit", audit.pass ? "PASS" : "FAIL"}, {"messages", fed.ledger().entries().size()}}.dump()
        << "\n";
    if (!audit.pass) throw ProtocolError("privacy audit failed; see privacy_audit.json");
}

void cmd_ablate(const CommandOptions& o, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!o.axis) throw ConfigError("ablate needs --axis");
    const AblationAxis axis = ablation_axis_from_string(*o.axis);
    const ExperimentConfig cfg = load_config(o);
    RunDir dir(cfg.output_dir);
    dir.json_file("resolved_config.json", cfg.to_json());
    const AblationTable table = run_ablation(axis, cfg);
    const std::string stem = "ablation_" + std::string(to_string(axis));
    dir.text(stem + ".csv", table.to_csv());
    dir.json_file(stem + ".json", table.to_json());
    json inputs;
    load_frames(cfg, &inputs);
    finish(dir, cfg, inputs, json::object(), {{"total_seconds", seconds_since(t0)}});
    out << table.to_csv();
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
        case ErrorKind::ingest:
        case ErrorKind::io:
        case ErrorKind::shape: return 2;
        case ErrorKind::protocol: return 3;
        case ErrorKind::checkpoint: return 4;
        default: return 1;
    }
}

int run_guarded(const std::function<void()>& fn, std::ostream& err) {
    auto report = [&](std::string_view kind, const std::string& msg, int code) {
        err << json{{"error", {{"kind", kind}, {"message", msg}, {"exit_code", code}}}}.dump() << std::endl;
        return code;
    };
    try {
        fn();
        return 0;
    } catch (const Error& e) {
        return report(to_string(e.kind()), e.what(), exit_code_for(e.kind()));
    } catch (const nlohmann::json::exception& e) {
        return report("config", e.what(), 2);
    } catch (const std::exception& e) {
        return report("internal", e.what(), 1);
    }
}

}  // namespace covmoe
