#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"

#include "covmoe/backbone.hpp"
#include "covmoe/cov_smoe.hpp"
#include "covmoe/datahub.hpp"
#include "covmoe/tokenizer.hpp"

namespace covmoe {

/// Everything needed to build a forecaster besides the data dimensions.
struct ModelSpec {
    std::size_t h = 32;
    std::size_t h_z = 16;
    MoEConfig moe;
    std::vector<double> quantiles = default_quantiles();
    SelectorMode selector = SelectorMode::region;
    std::size_t hour_buckets = 4;
    std::uint64_t backbone_seed = 42;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
};

/// Selector rule implied by the spec: region r -> r mod C, or hour buckets.
CovSelectorRule make_selector_rule(const ModelSpec& spec, std::size_t regions);

/// Tokenizer -> Cov-SMoE -> frozen backbone.
struct ForecastModel {
    ModelSpec spec;
    ModelDims dims;
    std::size_t regions = 1;
    TokenizerParams tokenizer;
    MoELayer moe;
    BackboneParams backbone;

    /// Tokenizer and MoE draw from `seed`; the backbone from spec.backbone_seed.
    static ForecastModel init(const ModelSpec& spec, std::size_t d, std::size_t p, std::size_t horizon,
                              std::size_t regions, std::uint64_t seed);

    std::vector<Param*> params();
    void zero_grad();
    std::uint64_t fingerprint() const;
};

/// NaN covariate cells become 0; the token is then marked invalid.
Matrix covariate_rows(const Window& w);
std::vector<TokenContext> token_contexts(const Window& w, SelectorMode mode);
/// Per-window salt for seeded random routing.
std::uint64_t window_key(const Window& w);

struct ForwardPass {
    Var forecast;  // H x |Q|
    std::vector<RoutingDecision> decisions;
    std::size_t expert_evaluations = 0;
};

ForwardPass model_forward(GradTape& tape, ForecastModel& model, const Window& w, RoutingOptions opts = {});
QuantileForecast predict(ForecastModel& model, const Window& w, const RoutingOptions& opts = {});
std::vector<RoutingDecision> route_window(ForecastModel& model, const Window& w, const RoutingOptions& opts = {});

/// Tokenizer, backbone and MoE records back to back.
void write_model(ByteWriter& w, const ForecastModel& m);
ForecastModel read_model(ByteReader& r, const ModelSpec& spec, std::size_t regions);

}  // namespace covmoe
