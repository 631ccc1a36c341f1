#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "covmoe/experiment.hpp"

namespace covmoe {

enum class AblationAxis { expert_count, gating_strategy, perturbation_grid };
std::string_view to_string(AblationAxis a);
/// ConfigError for anything outside the three axes.
AblationAxis ablation_axis_from_string(std::string_view s);

struct AblationRow {
    std::string setting;
    double mase = 0.0;
    double wql = 0.0;
    std::size_t n_windows = 0;
    std::string flags;
};

struct AblationTable {
    AblationAxis axis = AblationAxis::expert_count;
    std::vector<AblationRow> rows;

    std::string to_csv() const;
    nlohmann::json to_json() const;
};

/// none, missing 20/50/100 %, noise sigma 0.1, region swap.
std::vector<PerturbSpec> perturbation_grid(std::uint64_t seed);

/// Expert-count and gating-strategy settings each train their own model;
/// the perturbation grid trains once and evaluates perturbed test windows.
/// Settings run on separate threads when `concurrent` is set.
AblationTable run_ablation(AblationAxis axis, const ExperimentConfig& cfg, bool concurrent = true);

}  // namespace covmoe
