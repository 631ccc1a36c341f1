#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "covmoe/evalkit.hpp"
#include "covmoe/fedsim.hpp"
#include "covmoe/trainer.hpp"

namespace covmoe {

struct DataConfig {
    std::optional<SyntheticConfig> synthetic;
    std::vector<std::filesystem::path> files;
    CsvSchema schema;
};

/// One JSON document drives every command. Missing keys take the defaults
/// below; unknown keys are rejected.
struct ExperimentConfig {
    std::uint64_t seed = 7;
    DataConfig data;
    PartitionConfig window;
    ModelSpec model;
    TrainConfig train;
    FedConfig federation;
    std::size_t seasonality = 24;
    std::filesystem::path output_dir = "out";

    ExperimentConfig();
    /// Fully resolved document; written next to every run's reports.
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    static ExperimentConfig load(const std::filesystem::path& path);
};

struct Dataset {
    std::vector<SeriesFrame> frames;
    std::vector<ClientPartition> clients;  // normalized
    std::size_t regions = 0;
    std::size_t d = 0;
    std::size_t p = 0;
    std::size_t horizon = 0;
    nlohmann::json inputs;  // source label and content hash per input

    std::vector<Window> all(std::vector<Window> ClientPartition::*split) const;
    std::vector<std::vector<double>> raw_targets() const;
};

std::vector<SeriesFrame> load_frames(const ExperimentConfig& cfg, nlohmann::json* inputs = nullptr);
/// Centralized: one partition per frame. Federated: the configured client split.
Dataset build_dataset(const ExperimentConfig& cfg, bool federated);

/// Scores each client's test windows with its own scaler, then merges.
MetricReport evaluate_clients(ForecastModel& model, const std::vector<ClientPartition>& clients,
                              const RoutingOptions& opts, std::size_t m,
                              std::vector<MetricReport>* per_client = nullptr,
                              const std::vector<std::vector<Window>>* override_test = nullptr);

struct CentralRun {
    ForecastModel model;
    TrainReport report;
    MetricReport test;
    std::vector<MetricReport> per_client;
};

CentralRun train_centralized(const ExperimentConfig& cfg, const Dataset& data);

/// "CKPT", version, JSON manifest (spec, routing, fingerprints), then the
/// tokenizer, backbone and MoE records.
void write_checkpoint(const std::filesystem::path& path, const ForecastModel& model, const TrainConfig& train);
struct Checkpoint {
    ForecastModel model;
    RoutingOptions routing;
    nlohmann::json manifest;
};
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string hex64(std::uint64_t v);

}  // namespace covmoe
