#include "covmoe/fedsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "covmoe/errors.hpp"

namespace covmoe {

std::string_view to_string(MessageKind k) {
    switch (k) {
        case MessageKind::expert_upload: return "ExpertUpload";
        case MessageKind::gate_broadcast: return "GateBroadcast";
        case MessageKind::deploy_bundle: return "DeployBundle";
    }
    return "?";
}

std::size_t envelope_bytes(std::size_t sender_len, std::size_t receiver_len) {
    return kEnvelopeFixedBytes + sender_len + receiver_len;
}

Bytes FedMessage::serialize() const {
    ByteWriter w;
    w.magic("FMSG");
    w.u8(static_cast<std::uint8_t>(kind));
    w.u32(round);
    w.text16(sender);
    w.text16(receiver);
    w.u64(payload.size());
    w.raw(payload.data(), payload.size());
    return w.take();
}

MoELayer parse_layer_payload(std::span<const std::uint8_t> payload) {
    ByteReader r(payload, ErrorKind::protocol);
    MoELayer layer = read_layer(r);
    if (!r.done()) r.fail("trailing bytes after layer record");
    return layer;
}

FedMessage FedMessage::parse(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, ErrorKind::protocol);
    r.expect_magic("FMSG");
    FedMessage m;
    const std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 3) r.fail("unknown message kind " + std::to_string(kind));
    m.kind = static_cast<MessageKind>(kind);
    m.round = r.u32();
    m.sender = r.text16();
    m.receiver = r.text16();
    const std::uint64_t len = r.u64();
    if (len != r.remaining()) r.fail("payload length field disagrees with message size");
    auto payload = r.raw(static_cast<std::size_t>(len));
    parse_layer_payload(payload);
    m.payload.assign(payload.begin(), payload.end());
    return m;
}

void CommLedger::record(const FedMessage& m) {
    entries_.push_back({m.round, m.kind, m.sender, m.receiver, m.byte_len()});
}

std::size_t CommLedger::total_bytes() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.bytes;
    return n;
}

std::size_t CommLedger::count(MessageKind k) const noexcept {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [k](const LedgerEntry& e) { return e.kind == k; }));
}

std::string CommLedger::to_csv() const {
    std::ostringstream os;
    os << "round,kind,sender,receiver,bytes\n";
    for (const auto& e : entries_)
        os << e.round << ',' << to_string(e.kind) << ',' << e.sender << ',' << e.receiver << ',' << e.bytes << '\n';
    return os.str();
}

void write_archive(const std::filesystem::path& path, const std::vector<Bytes>& records) {
    ByteWriter w;
    for (const auto& r : records) {
        w.u64(r.size());
        w.raw(r.data(), r.size());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
    if (!out) throw IoError("short write to " + path.string());
}

std::vector<Bytes> read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    Bytes all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ByteReader r(all, ErrorKind::protocol);
    std::vector<Bytes> out;
    while (!r.done()) {
        const std::uint64_t n = r.u64();
        if (n > r.remaining()) r.fail("archive record exceeds file");
        auto s = r.raw(static_cast<std::size_t>(n));
        out.emplace_back(s.begin(), s.end());
    }
    return out;
}

// ------------------------------------------------------------------ config

void FedConfig::validate() const {
    if (clients < 2) throw ConfigError("federation: at least 2 clients required");
    if (!(dval_fraction > 0.0 && dval_fraction <= 1.0)) throw ConfigError("federation: dval_fraction must be in (0, 1]");
    if (!(alpha > 0.0)) throw ConfigError("federation: alpha must be positive");
    local.validate();
    gate.validate();
    cold_start.validate();
}

nlohmann::json FedConfig::to_json() const {
    return {{"clients", clients},
            {"scheme", std::string(to_string(scheme))},
            {"alpha", alpha},
            {"dval_fraction", dval_fraction},
            {"local", local.to_json()},
            {"gate", gate.to_json()},
            {"pool_top_k", pool_top_k},
            {"server_gate_input", std::string(to_string(server_gate_input))},
            {"concurrent", concurrent},
            {"keep_local_gates", keep_local_gates},
            {"cold_start_budget", cold_start_budget},
            {"cold_start_rank", cold_start_rank},
            {"cold_start", cold_start.to_json()},
            {"personalized", personalized}};
}

FedConfig FedConfig::from_json(const nlohmann::json& j) {
    FedConfig c;
    c.gate.epochs = 10;
    c.gate.lr = 1e-2;
    c.cold_start.epochs = 3;
    c.cold_start.lr = 1e-3;
    c.clients = j.value("clients", c.clients);
    if (j.contains("scheme")) c.scheme = partition_scheme_from_string(j.at("scheme").get<std::string>());
    c.alpha = j.value("alpha", c.alpha);
    c.dval_fraction = j.value("dval_fraction", c.dval_fraction);
    if (j.contains("local")) c.local = TrainConfig::from_json(j.at("local"));
    if (j.contains("gate")) c.gate = TrainConfig::from_json(j.at("gate"));
    c.pool_top_k = j.value("pool_top_k", c.pool_top_k);
    if (j.contains("server_gate_input"))
        c.server_gate_input = gate_input_from_string(j.at("server_gate_input").get<std::string>());
    c.concurrent = j.value("concurrent", c.concurrent);
    c.keep_local_gates = j.value("keep_local_gates", c.keep_local_gates);
    c.cold_start_budget = j.value("cold_start_budget", c.cold_start_budget);
    c.cold_start_rank = j.value("cold_start_rank", c.cold_start_rank);
    if (j.contains("cold_start")) c.cold_start = TrainConfig::from_json(j.at("cold_start"));
    c.personalized = j.value("personalized", c.personalized);
    c.validate();
    return c;
}

std::string_view to_string(FedPhase p) {
    switch (p) {
        case FedPhase::created: return "created";
        case FedPhase::local_trained: return "local-trained";
        case FedPhase::uploaded: return "uploaded";
        case FedPhase::pooled: return "pooled";
        case FedPhase::gate_trained: return "gate-trained";
        case FedPhase::deployed: return "deployed";
    }
    return "?";
}

// -------------------------------------------------------------------- pool

namespace {

// Region r -> offset of the owning client's conditional block + local rule.
CovSelectorRule pool_rule(const std::vector<std::size_t>& conditional_counts, const std::vector<int>& client_regions,
                          const ModelSpec& spec, std::size_t regions) {
    CovSelectorRule rule;
    rule.mode = spec.selector;
    if (spec.moe.conditional == 0) return rule;
    const CovSelectorRule local = make_selector_rule(spec, regions);
    std::vector<std::size_t> offset(conditional_counts.size(), 0);
    for (std::size_t i = 1; i < offset.size(); ++i) offset[i] = offset[i - 1] + conditional_counts[i - 1];
    if (spec.selector == SelectorMode::hour_bucket) return local.shifted(offset.empty() ? 0 : offset[0]);
    for (std::size_t i = 0; i < client_regions.size(); ++i) {
        const std::int64_t r = client_regions[i];
        if (conditional_counts[i] == 0 || rule.table.count(r)) continue;
        auto it = local.table.find(r);
        if (it == local.table.end()) continue;
        rule.table[r] = offset[i] + std::min(it->second, conditional_counts[i] - 1);
    }
    return rule;
}

// Conditional experts per roster entry, read from the origin labels.
std::vector<std::size_t> conditional_counts(const MoELayer& pool, const std::vector<std::string>& roster) {
    std::vector<std::size_t> n(roster.size(), 0);
    for (const auto& e : pool.conditional) {
        auto it = std::find(roster.begin(), roster.end(), e.origin_client);
        if (it == roster.end()) throw ProtocolError("pool expert from unknown client '" + e.origin_client + "'");
        ++n[static_cast<std::size_t>(it - roster.begin())];
    }
    return n;
}

}  // namespace

MoELayer build_pool_layer(const std::vector<MoELayer>& uploads, const std::vector<int>& client_regions,
                          const ModelSpec& spec, std::size_t regions, std::size_t top_k, GateInput gate_input,
                          Rng rng) {
    if (uploads.empty()) throw ProtocolError("pool construction with no uploads");
    MoELayer pool;
    pool.cfg = spec.moe;
    pool.cfg.shared = pool.cfg.conditional = pool.cfg.routed = 0;
    pool.cfg.rank = uploads.front().cfg.rank;
    pool.cfg.gate_input = gate_input;
    pool.width = uploads.front().width;
    pool.cov_width = uploads.front().cov_width;
    std::vector<double> cprior, rprior;
    std::vector<std::size_t> ccounts;
    for (const auto& u : uploads) {
        if (u.width != pool.width || u.cov_width != pool.cov_width) throw ProtocolError("uploads disagree on widths");
        pool.cfg.shared += u.shared.size();
        pool.cfg.conditional += u.conditional.size();
        pool.cfg.routed += u.routed.size();
        ccounts.push_back(u.conditional.size());
        cprior.insert(cprior.end(), u.cond_prior.value.flat().begin(), u.cond_prior.value.flat().end());
        rprior.insert(rprior.end(), u.routed_prior.value.flat().begin(), u.routed_prior.value.flat().end());
    }
    pool.cfg.top_k = std::min(top_k ? top_k : spec.moe.top_k, pool.cfg.routed);
    pool.cfg.validate();
    std::uint32_t id = 0;
    auto take = [&](auto member, std::vector<ExpertParams>& dst) {
        for (const auto& u : uploads)
            for (const auto& e : u.*member) {
                dst.push_back(e);
                dst.back().expert_id = id++;
            }
    };
    take(&MoELayer::shared, pool.shared);
    take(&MoELayer::conditional, pool.conditional);
    take(&MoELayer::routed, pool.routed);
    pool.gate = GateParams::init(pool.cov_width, pool.width, pool.cfg.routed, gate_input, rng);
    pool.cond_prior = Param(Matrix(1, cprior.size(), cprior));
    pool.routed_prior = Param(Matrix(1, rprior.size(), rprior));
    pool.rule = pool_rule(ccounts, client_regions, spec, regions);
    return pool;
}

// -------------------------------------------------------------- federation

Federation::Federation(std::vector<ClientPartition> partitions, const ModelSpec& spec, const FedConfig& cfg,
                       std::uint64_t seed, std::size_t regions)
    : spec_(spec), cfg_(cfg), seed_(seed), regions_(regions) {
    cfg_.validate();
    if (partitions.size() < 2) throw ConfigError("federation: at least 2 client partitions required");
    for (const auto& p : partitions)
        if (p.train.empty()) throw ConfigError("federation: client '" + p.client_id + "' has no training windows");
    const Window& w0 = partitions.front().train.front();
    const ForecastModel base =
        ForecastModel::init(spec, w0.context.cols(), w0.context_cov.cols(), w0.horizon(), regions, seed);
    const Rng client_rng = Rng(seed).derive("client");
    for (std::size_t i = 0; i < partitions.size(); ++i) {
        ClientState c;
        c.client_id = partitions[i].client_id;
        c.model = base;
        c.model.moe = MoELayer::init(spec.moe, spec.h, spec.h_z, make_selector_rule(spec, regions), client_rng.derive(i));
        for (auto* e : c.model.moe.experts()) e->origin_client = c.client_id;
        c.tokenizer_fingerprint = base.tokenizer.fingerprint();
        c.backbone_fingerprint = base.backbone.fingerprint();
        c.partition = std::move(partitions[i]);
        const auto& val = c.partition.val;
        const auto take = static_cast<std::size_t>(std::ceil(cfg_.dval_fraction * static_cast<double>(val.size())));
        server_.dval.insert(server_.dval.end(), val.begin(), val.begin() + static_cast<std::ptrdiff_t>(take));
        clients_.push_back(std::move(c));
    }
    if (server_.dval.empty()) throw ConfigError("federation: D_val is empty (no validation windows)");
    server_.model = base;
}

void Federation::require(FedPhase expected, std::string_view op) const {
    if (phase_ != expected) {
        throw ProtocolError(std::string(op) + " called in phase '" + std::string(to_string(phase_)) + "', expected '" +
                            std::string(to_string(expected)) + "'");
    }
}

void Federation::transmit(const FedMessage& m) {
    Bytes wire = m.serialize();
    if (wire.size() != m.byte_len()) throw ProtocolError("serialized length differs from declared byte_len");
    ledger_.record(m);
    archive_.push_back(std::move(wire));
}

void Federation::check_frozen_components() const {
    const ForecastModel& s = *server_.model;
    for (const auto& c : clients_) {
        if (c.model.backbone.fingerprint() != s.backbone.stored_fingerprint ||
            c.backbone_fingerprint != s.backbone.stored_fingerprint) {
            throw ProtocolError("client '" + c.client_id + "' backbone fingerprint drifted");
        }
        if (c.model.tokenizer.fingerprint() != c.tokenizer_fingerprint) {
            throw ProtocolError("client '" + c.client_id + "' tokenizer fingerprint drifted");
        }
    }
}

void Federation::train_local_experts() {
    require(FedPhase::created, "train_local_experts");
    TrainConfig tc = cfg_.local;
    if (tc.scope == TrainScope::moe_tokenizer) tc.scope = TrainScope::moe_only;  // tokenizer is shared and frozen
    auto work = [&](std::size_t i) {
        ClientState& c = clients_[i];
        TrainConfig mine = tc;
        mine.seed = Rng(tc.seed).derive(c.client_id).next_u64();
        c.local_report = train_local(c.model, c.partition.train, c.partition.val, mine);
    };
    if (cfg_.concurrent) {
        std::vector<std::exception_ptr> errors(clients_.size());
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < clients_.size(); ++i) {
            pool.emplace_back([&, i] {
                try {
                    work(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    } else {
        for (std::size_t i = 0; i < clients_.size(); ++i) work(i);
    }
    check_frozen_components();
    phase_ = FedPhase::local_trained;
}

void Federation::upload_experts() {
    require(FedPhase::local_trained, "upload_experts");
    server_.round = 1;
    for (const auto& c : clients_) {
        ByteWriter w;
        write_layer(w, c.model.moe);
        FedMessage m{MessageKind::expert_upload, c.client_id, "server", server_.round, w.take()};
        transmit(m);
        // The server only ever sees the bytes.
        const FedMessage received = FedMessage::parse(archive_.back());
        server_.inbox.push_back(parse_layer_payload(received.payload));
        if (server_.inbox.back().experts().size() != c.model.moe.experts().size()) {
            throw ProtocolError("upload from '" + c.client_id + "' lost experts in transit");
        }
    }
    phase_ = FedPhase::uploaded;
}

void Federation::build_pool() {
    require(FedPhase::uploaded, "build_pool");
    std::vector<int> regions;
    for (const auto& c : clients_) regions.push_back(c.partition.region_code);
    server_.model->moe = build_pool_layer(server_.inbox, regions, spec_, regions_, cfg_.pool_top_k,
                                          cfg_.server_gate_input, Rng(seed_).derive("server-gate"));
    server_.pool_fingerprints.clear();
    for (const auto* e : server_.model->moe.experts()) server_.pool_fingerprints.push_back(e->fingerprint());
    phase_ = FedPhase::pooled;
}

void Federation::train_global_gate() {
    require(FedPhase::pooled, "train_global_gate");
    TrainConfig gc = cfg_.gate;
    gc.scope = TrainScope::gate_only;
    gc.strategy = GatingStrategy::softmax_topk;
    ForecastModel& m = *server_.model;
    server_.gate_report = train_local(m, server_.dval, server_.dval, gc);
    const auto experts = m.moe.experts();
    for (std::size_t i = 0; i < experts.size(); ++i) {
        if (experts[i]->fingerprint() != server_.pool_fingerprints[i]) {
            throw ProtocolError("pool expert " + std::to_string(i) + " changed during gate training");
        }
    }
    if (!m.backbone.intact()) throw ProtocolError("server backbone changed during gate training");
    phase_ = FedPhase::gate_trained;
}

void Federation::deploy() {
    require(FedPhase::gate_trained, "deploy");
    std::vector<std::string> roster;
    std::vector<int> regions;
    for (const auto& c : clients_) {
        roster.push_back(c.client_id);
        regions.push_back(c.partition.region_code);
    }
    for (auto& c : clients_) {
        ByteWriter w;
        write_layer(w, server_.model->moe);
        FedMessage m{MessageKind::deploy_bundle, "server", c.client_id, server_.round, w.take()};
        transmit(m);
        const FedMessage received = FedMessage::parse(archive_.back());
        ForecastModel bundle = c.model;
        bundle.moe = parse_layer_payload(received.payload);
        bundle.moe.rule = pool_rule(conditional_counts(bundle.moe, roster), regions, spec_, regions_);
        bundle.spec.moe = bundle.moe.cfg;
        c.bundle = std::move(bundle);
    }
    check_frozen_components();
    phase_ = FedPhase::deployed;
}

void Federation::run_all() {
    train_local_experts();
    upload_experts();
    build_pool();
    train_global_gate();
    deploy();
}

ForecastModel& Federation::deployed_model(std::size_t client) {
    require(FedPhase::deployed, "deployed_model");
    ClientState& c = clients_.at(client);
    return cfg_.keep_local_gates ? c.model : *c.bundle;
}

// --------------------------------------------------------------- strategies

AdaptResult cold_start_adapt(const ClientState& client, const ForecastModel& bundle, std::size_t budget,
                             std::size_t rank, const TrainConfig& cfg, std::size_t m) {
    const auto& train = client.partition.train;
    if (budget > train.size()) {
        throw ConfigError("cold start budget " + std::to_string(budget) + " exceeds " + std::to_string(train.size()) +
                          " training windows");
    }
    if (!client.partition.scaler) throw ConfigError("cold start needs a normalized partition");
    const Scaler& scaler = *client.partition.scaler;
    RoutingOptions opts;
    AdaptResult res{bundle, {}, {}, 0.0, 0.0, 0, false};
    res.pre = evaluate(res.model, client.partition.test, scaler, opts, m);
    res.pre_val_loss = evaluate_loss(res.model, client.partition.val, opts).mean_loss;
    if (budget == 0) {
        res.post = res.pre;
        res.post_val_loss = res.pre_val_loss;
        return res;
    }
    if (rank == 0) throw ConfigError("cold start rank must be positive");
    res.model.moe.attach_lowrank(rank, Rng(cfg.seed).derive("cold-start"));
    TrainConfig tc = cfg;
    tc.scope = TrainScope::moe_only;
    tc.strategy = GatingStrategy::softmax_topk;
    std::vector<Window> subset(train.end() - static_cast<std::ptrdiff_t>(budget), train.end());
    TrainReport rep = train_local(res.model, subset, {}, tc);
    res.steps = rep.steps;
    res.adapted = true;
    res.post = evaluate(res.model, client.partition.test, scaler, opts, m);
    res.post_val_loss = evaluate_loss(res.model, client.partition.val, opts).mean_loss;
    return res;
}

PersonalizedResult personalized_routing(const ClientState& client, const ForecastModel& bundle, std::size_t m) {
    if (!client.partition.scaler) throw ConfigError("personalized routing needs a normalized partition");
    ForecastModel model = bundle;
    RoutingOptions opts;
    opts.strategy = GatingStrategy::covariate_fixed;
    PersonalizedResult res;
    res.report = evaluate(model, client.partition.test, *client.partition.scaler, opts, m);
    for (const Window& w : client.partition.test) res.decisions.push_back(route_window(model, w, opts));
    res.training_steps = 0;
    return res;
}

// ------------------------------------------------------------ accounting

nlohmann::json CommReport::to_json() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", reduction_fraction);
    return {{"messages", messages},
            {"moe_bytes", moe_bytes},
            {"full_finetune_bytes", full_finetune_bytes},
            {"reduction_fraction", reduction_fraction},
            {"reduction_fraction_4dp", buf}};
}

CommReport communication_report(const CommLedger& ledger, const ModelDims& dims) {
    const std::size_t tok = tokenizer_param_count(dims);
    const std::size_t bb = backbone_param_count(dims);
    const std::size_t extra = (tok ? kTokenizerHeaderBytes + 8 * tok : 0) + (bb ? kBackboneHeaderBytes + 8 * bb : 0);
    CommReport r;
    for (const auto& e : ledger.entries()) {
        ++r.messages;
        r.moe_bytes += e.bytes;
        r.full_finetune_bytes += e.bytes + extra;
    }
    r.reduction_fraction =
        r.full_finetune_bytes ? 1.0 - static_cast<double>(r.moe_bytes) / static_cast<double>(r.full_finetune_bytes) : 0.0;
    return r;
}

// ----------------------------------------------------------------- privacy

nlohmann::json AuditResult::to_json() const {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& x : findings) f.push_back({{"message", x.message_index}, {"reason", x.reason}});
    return {{"verdict", pass ? "PASS" : "FAIL"},
            {"messages_checked", messages_checked},
            {"offsets_scanned", offsets_scanned},
            {"findings", f}};
}

AuditResult privacy_audit(const CommLedger& ledger, const std::vector<Bytes>& archive,
                          const std::vector<std::vector<double>>& raw_targets) {
    constexpr std::size_t kRun = 8;
    constexpr std::size_t kSpan = kRun * 8;
    AuditResult res;
    auto fail = [&](std::size_t i, std::string why) {
        res.pass = false;
        res.findings.push_back({i, std::move(why)});
    };
    auto span_hash = [](const std::uint8_t* p) {
        Fnv1a h;
        h.bytes(p, kSpan);
        return h.digest();
    };

    // Every run of 8 consecutive target values, as little-endian bytes.
    std::vector<Bytes> runs;
    for (const auto& series : raw_targets) {
        for (std::size_t s = 0; s + kRun <= series.size(); ++s) {
            ByteWriter w;
            for (std::size_t k = 0; k < kRun; ++k) w.f64(series[s + k]);
            runs.push_back(w.take());
        }
    }
    std::unordered_multimap<std::uint64_t, std::size_t> index;
    for (std::size_t i = 0; i < runs.size(); ++i) index.emplace(span_hash(runs[i].data()), i);

    if (archive.size() != ledger.entries().size()) {
        fail(std::min(archive.size(), ledger.entries().size()), "archive and ledger disagree on message count");
    }
    for (std::size_t i = 0; i < archive.size(); ++i) {
        ++res.messages_checked;
        FedMessage m;
        try {
            m = FedMessage::parse(archive[i]);
        } catch (const ProtocolError& e) {
            fail(i, std::string("schema violation: ") + e.what());
            continue;
        }
        if (i < ledger.entries().size()) {
            const auto& e = ledger.entries()[i];
            if (e.kind != m.kind || e.sender != m.sender || e.receiver != m.receiver || e.bytes != archive[i].size()) {
                fail(i, "message does not match its ledger entry");
            }
        }
        const auto& p = m.payload;
        for (std::size_t off = 0; off + kSpan <= p.size(); ++off) {
            ++res.offsets_scanned;
            auto [lo, hi] = index.equal_range(span_hash(p.data() + off));
            bool hit = false;
            for (auto it = lo; it != hi && !hit; ++it) hit = std::memcmp(runs[it->second].data(), p.data() + off, kSpan) == 0;
            if (hit) {
                fail(i, "payload reproduces 8 consecutive raw target values at byte " + std::to_string(off));
                break;
            }
        }
    }
    return res;
}

}  // namespace covmoe
