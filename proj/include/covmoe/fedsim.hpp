#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "covmoe/evalkit.hpp"
#include "covmoe/trainer.hpp"
#include "covmoe/wire.hpp"

namespace covmoe {

// ---------------------------------------------------------------------------
// Wire objects. A FedMessage carries exactly one MoE layer record; there is no
// field that could hold sample data.
// ---------------------------------------------------------------------------
enum class MessageKind : std::uint8_t { expert_upload = 1, gate_broadcast = 2, deploy_bundle = 3 };
std::string_view to_string(MessageKind k);

/// "FMSG", kind u8, round u32, sender, receiver, payload length u64.
inline constexpr std::size_t kEnvelopeFixedBytes = 21;
std::size_t envelope_bytes(std::size_t sender_len, std::size_t receiver_len);

struct FedMessage {
    MessageKind kind = MessageKind::expert_upload;
    std::string sender;
    std::string receiver;
    std::uint32_t round = 1;
    Bytes payload;

    std::size_t byte_len() const noexcept { return envelope_bytes(sender.size(), receiver.size()) + payload.size(); }
    Bytes serialize() const;
    /// Strict: envelope, then a payload that is exactly one layer record.
    /// Any violation raises ProtocolError.
    static FedMessage parse(std::span<const std::uint8_t> bytes);
};

/// Decodes a payload as a layer record with nothing trailing.
MoELayer parse_layer_payload(std::span<const std::uint8_t> payload);

struct LedgerEntry {
    std::uint32_t round = 0;
    MessageKind kind = MessageKind::expert_upload;
    std::string sender;
    std::string receiver;
    std::size_t bytes = 0;
};

/// Append-only record of every message that crossed the boundary.
class CommLedger {
public:
    void record(const FedMessage& m);
    const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
    std::size_t total_bytes() const noexcept;
    std::size_t count(MessageKind k) const noexcept;
    std::string to_csv() const;

private:
    std::vector<LedgerEntry> entries_;
};

/// u64 length-prefixed records.
void write_archive(const std::filesystem::path& path, const std::vector<Bytes>& records);
std::vector<Bytes> read_archive(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Protocol state.
// ---------------------------------------------------------------------------
struct FedConfig {
    std::size_t clients = 3;
    PartitionScheme scheme = PartitionScheme::by_region;
    double alpha = 1.0;
    double dval_fraction = 1.0;  // share of each client's val split pooled as D_val
    TrainConfig local;
    TrainConfig gate;
    std::size_t pool_top_k = 0;  // 0 = model top_k
    GateInput server_gate_input = GateInput::covariate_plus_token;
    bool concurrent = false;
    bool keep_local_gates = false;
    std::size_t cold_start_budget = 50;
    std::size_t cold_start_rank = 2;
    TrainConfig cold_start;
    bool personalized = true;

    void validate() const;
    nlohmann::json to_json() const;
    static FedConfig from_json(const nlohmann::json& j);
};

struct ClientState {
    std::string client_id;
    ClientPartition partition;
    ForecastModel model;
    std::uint64_t tokenizer_fingerprint = 0;
    std::uint64_t backbone_fingerprint = 0;
    std::optional<TrainReport> local_report;
    std::optional<ForecastModel> bundle;  // parsed DeployBundle
};

struct ServerState {
    std::vector<Window> dval;
    std::vector<MoELayer> inbox;
    std::optional<ForecastModel> model;  // shared tokenizer/backbone + pool
    std::vector<std::uint64_t> pool_fingerprints;
    std::optional<TrainReport> gate_report;
    std::uint32_t round = 0;
};

enum class FedPhase { created, local_trained, uploaded, pooled, gate_trained, deployed };
std::string_view to_string(FedPhase p);

/// Pool built from uploaded layers. Experts are concatenated per class and
/// renumbered; region r maps to the conditional experts of the client that
/// owns region r.
MoELayer build_pool_layer(const std::vector<MoELayer>& uploads, const std::vector<int>& client_regions,
                          const ModelSpec& spec, std::size_t regions, std::size_t top_k, GateInput gate_input,
                          Rng rng);

class Federation {
public:
    /// `partitions` must already be normalized.
    Federation(std::vector<ClientPartition> partitions, const ModelSpec& spec, const FedConfig& cfg,
               std::uint64_t seed, std::size_t regions);

    void train_local_experts();
    void upload_experts();
    void build_pool();
    void train_global_gate();
    void deploy();
    void run_all();

    FedPhase phase() const noexcept { return phase_; }
    const CommLedger& ledger() const noexcept { return ledger_; }
    const std::vector<Bytes>& archive() const noexcept { return archive_; }
    std::vector<ClientState>& clients() noexcept { return clients_; }
    const std::vector<ClientState>& clients() const noexcept { return clients_; }
    const ServerState& server() const noexcept { return server_; }
    const FedConfig& config() const noexcept { return cfg_; }

    /// Model a client evaluates with after deployment.
    ForecastModel& deployed_model(std::size_t client);

private:
    void require(FedPhase expected, std::string_view op) const;
    void transmit(const FedMessage& m);
    void check_frozen_components() const;

    ModelSpec spec_;
    FedConfig cfg_;
    std::uint64_t seed_;
    std::size_t regions_;
    std::vector<ClientState> clients_;
    ServerState server_;
    CommLedger ledger_;
    std::vector<Bytes> archive_;
    FedPhase phase_ = FedPhase::created;
};

// ---------------------------------------------------------------------------
// Sharing strategies.
// ---------------------------------------------------------------------------
struct AdaptResult {
    ForecastModel model;
    MetricReport pre;
    MetricReport post;
    double pre_val_loss = 0.0;
    double post_val_loss = 0.0;
    std::size_t steps = 0;
    bool adapted = false;
};

/// Fine-tunes gate, priors and low-rank expert deltas on the last `budget`
/// training windows; base expert weights stay frozen.
AdaptResult cold_start_adapt(const ClientState& client, const ForecastModel& bundle, std::size_t budget,
                             std::size_t rank, const TrainConfig& cfg, std::size_t m = 24);

struct PersonalizedResult {
    MetricReport report;
    std::size_t training_steps = 0;
    std::vector<std::vector<RoutingDecision>> decisions;  // one entry per test window
};

/// Covariate-fixed routing over the deployed pool; no training.
PersonalizedResult personalized_routing(const ClientState& client, const ForecastModel& bundle, std::size_t m = 24);

struct CommReport {
    std::size_t messages = 0;
    std::size_t moe_bytes = 0;
    std::size_t full_finetune_bytes = 0;
    double reduction_fraction = 0.0;

    nlohmann::json to_json() const;
};

/// Full fine-tuning sends tokenizer and backbone records alongside every MoE
/// payload; records for empty components are omitted.
CommReport communication_report(const CommLedger& ledger, const ModelDims& dims);

struct AuditFinding {
    std::size_t message_index = 0;
    std::string reason;
};

struct AuditResult {
    bool pass = true;
    std::size_t messages_checked = 0;
    std::size_t offsets_scanned = 0;
    std::vector<AuditFinding> findings;

    nlohmann::json to_json() const;
};

/// Schema check of every archived message against the ledger, then an
/// exact-match scan of every byte offset of every payload for any run of 8
/// consecutive values from any client's raw target series.
AuditResult privacy_audit(const CommLedger& ledger, const std::vector<Bytes>& archive,
                          const std::vector<std::vector<double>>& raw_targets);

}  // namespace covmoe
