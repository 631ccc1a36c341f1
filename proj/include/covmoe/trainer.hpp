#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "covmoe/model.hpp"

namespace covmoe {

enum class OptimizerKind { sgd, adam };
std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view s);

enum class TrainScope { moe_only, moe_tokenizer, gate_only };
std::string_view to_string(TrainScope s);
TrainScope train_scope_from_string(std::string_view s);

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 5;
    std::size_t max_steps = 0;  // 0 = no cap
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    TrainScope scope = TrainScope::moe_only;
    GatingStrategy strategy = GatingStrategy::softmax_topk;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Mean over (t, q) of q·max(y−ŷ, 0) + (1−q)·max(ŷ−y, 0).
double pinball_loss(const QuantileForecast& f, std::span<const double> target);
/// Tape version. At ŷ == y the derivative is the right-derivative (1−q).
Var pinball_loss(GradTape& tape, Var forecast, std::span<const double> levels, std::span<const double> target);

/// Sets `trainable` on every parameter for the given scope and strategy.
/// The backbone is always frozen.
void apply_scope(ForecastModel& model, TrainScope scope, GatingStrategy strategy);

/// Updates only parameters that are trainable and were reached by the last
/// backward pass.
class Optimizer {
public:
    explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}
    void step(std::span<Param* const> params);
    std::size_t updates() const noexcept { return updates_; }

private:
    struct Moments {
        Matrix m, v;
        std::size_t t = 0;
    };
    TrainConfig cfg_;
    std::map<const Param*, Moments> state_;
    std::size_t updates_ = 0;
};

struct TrainReport {
    std::vector<double> epoch_train_loss;  // mean batch loss per epoch
    std::vector<double> epoch_val_loss;    // full pass after each epoch
    std::vector<double> step_loss;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double initial_val_loss = 0.0;
    double final_val_loss = 0.0;
    std::size_t steps = 0;
    std::vector<std::size_t> utilization;  // conditional experts, then routed
    std::size_t routing_events = 0;
    std::size_t fallback_tokens = 0;
    double wall_seconds = 0.0;
    std::uint64_t backbone_fingerprint = 0;
    std::uint64_t model_fingerprint = 0;

    /// Wall-clock is left out so reports from identical runs compare equal.
    nlohmann::json to_json() const;
    std::string loss_csv() const;
};

struct LossSummary {
    double mean_loss = 0.0;
    std::vector<std::size_t> utilization;
    std::size_t routing_events = 0;
    std::size_t fallback_tokens = 0;
};

/// Mean pinball loss and routing histogram over windows, no updates.
LossSummary evaluate_loss(ForecastModel& model, const std::vector<Window>& windows, const RoutingOptions& opts);

RoutingOptions routing_for(const TrainConfig& cfg);

/// Local training loop: seeded batch order, one optimizer step per batch.
TrainReport train_local(ForecastModel& model, const std::vector<Window>& train, const std::vector<Window>& val,
                        const TrainConfig& cfg);

/// Routing decisions of one window under a gating strategy.
std::vector<RoutingDecision> gating_strategy_forward(ForecastModel& model, const Window& w, GatingStrategy strategy,
                                                     std::uint64_t seed);

}  // namespace covmoe
