#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "covmoe/numkit.hpp"
#include "covmoe/wire.hpp"

namespace covmoe {

// Covariate-aware sparse mixture-of-experts layer.
//
// Per token t with token h_t:
//
//   out_t = h_t + (1/S) Σ_shared E_j(h_t) + Σ_{e ∈ {c} ∪ TopK} w̃_e E_e(h_t)
//
// c is the conditional expert picked by the CovSelector rule from a static
// covariate, TopK are the k highest gate scores over the M routed experts,
// and w̃ is a softmax restricted to the selected set. The conditional
// expert's logit is its learned scalar prior. Routed experts outside TopK are
// never evaluated.

enum class ExpertClass : std::uint8_t { shared = 0, conditional = 1, routed = 2 };
std::string_view to_string(ExpertClass c);

struct LowRankPair {
    Param a1;  // h x r
    Param b1;  // r x h_ff
    Param a2;  // h_ff x r
    Param b2;  // r x h
};

struct ExpertParams {
    std::uint32_t expert_id = 0;
    ExpertClass cls = ExpertClass::routed;
    Param w1;  // h x h_ff
    Param b1;  // 1 x h_ff
    Param w2;  // h_ff x h
    Param b2;  // 1 x h
    std::optional<LowRankPair> lowrank;
    std::string origin_client;

    /// Base weights ~ Uniform(±1/sqrt(fan_in)), biases zero.
    static ExpertParams init(std::uint32_t id, ExpertClass cls, std::size_t h, std::size_t h_ff, Rng rng);

    std::size_t width() const noexcept { return w1.value.rows(); }
    std::size_t hidden() const noexcept { return w1.value.cols(); }
    std::size_t rank() const noexcept { return lowrank ? lowrank->a1.value.cols() : 0; }

    /// Adds low-rank factors (A random, B zero so the effective weights are
    /// unchanged) and freezes the base weights.
    void attach_lowrank(std::size_t r, Rng rng);
    /// Folds A·B into the base weights and drops the factors.
    void merge_lowrank();

    Matrix effective_w1() const;
    Matrix effective_w2() const;
    MlpVars bind(GradTape& tape);
    Matrix forward(const Matrix& x) const;

    void set_trainable(bool on);
    std::vector<Param*> params();
    std::vector<const Param*> params() const;
    std::size_t base_param_count() const noexcept;
    std::size_t lowrank_param_count() const noexcept;
    /// Hash of the base weights only.
    std::uint64_t base_fingerprint() const;
    /// Hash of base weights and low-rank factors.
    std::uint64_t fingerprint() const;
};

enum class GateInput : std::uint8_t { covariate_only = 0, covariate_plus_token = 1 };
std::string_view to_string(GateInput g);
GateInput gate_input_from_string(std::string_view s);

struct GateParams {
    Param w_g;  // (h_z [+ h]) x M
    Param b_g;  // 1 x M
    GateInput mode = GateInput::covariate_only;

    static GateParams init(std::size_t h_z, std::size_t h, std::size_t routed, GateInput mode, Rng rng);
    std::size_t input_width() const noexcept { return w_g.value.rows(); }
    std::size_t experts() const noexcept { return w_g.value.cols(); }
    std::uint64_t fingerprint() const;
};

enum class SelectorMode : std::uint8_t { region = 0, hour_bucket = 1 };
std::string_view to_string(SelectorMode m);
SelectorMode selector_mode_from_string(std::string_view s);

/// Deterministic map from a static covariate value to a conditional expert.
struct CovSelectorRule {
    SelectorMode mode = SelectorMode::region;
    std::map<std::int64_t, std::size_t> table;

    /// Region r -> expert r mod C for r in [0, regions).
    static CovSelectorRule region_identity(std::size_t regions, std::size_t conditional);
    /// Hour h -> floor(h * buckets / 24).
    static CovSelectorRule hour_buckets(std::size_t buckets);
    /// Same rule with every target index shifted by `offset`.
    CovSelectorRule shifted(std::size_t offset) const;
};

/// Throws RoutingError for a value outside the rule's domain.
std::size_t cov_select(const CovSelectorRule& rule, std::int64_t value);

enum class FallbackMode : std::uint8_t { uniform = 0, learned_prior = 1 };
std::string_view to_string(FallbackMode m);
FallbackMode fallback_mode_from_string(std::string_view s);

enum class GatingStrategy { covariate_fixed, softmax_topk, random };
std::string_view to_string(GatingStrategy g);
GatingStrategy gating_strategy_from_string(std::string_view s);

struct MoEConfig {
    std::size_t shared = 1;
    std::size_t conditional = 2;
    std::size_t routed = 4;
    std::size_t top_k = 2;
    std::size_t hidden_ff = 8;
    std::size_t rank = 0;
    FallbackMode fallback = FallbackMode::uniform;
    GateInput gate_input = GateInput::covariate_only;

    void validate() const;
};

struct RoutingDecision {
    std::size_t token_idx = 0;
    std::optional<std::size_t> conditional;
    std::vector<std::size_t> routed;  // ascending
    /// Conditional weight first (when present), then one per routed index.
    std::vector<double> weights;
    bool fallback_used = false;

    friend bool operator==(const RoutingDecision&, const RoutingDecision&) = default;
};

/// Indices of the k largest scores, ties toward the lowest index, ascending.
std::vector<std::size_t> select_topk(std::span<const double> scores, std::size_t k);

/// Top-k plus restricted softmax for one token. `conditional` carries the
/// conditional expert index and its prior logit.
RoutingDecision route_token(std::span<const double> scores, std::size_t k,
                            std::optional<std::pair<std::size_t, double>> conditional,
                            std::size_t token_idx = 0);

/// Pure gate scores for one token (no tape).
std::vector<double> gate_scores(const GateParams& gate, std::span<const double> cov_embed,
                                std::span<const double> token);
Var gate_scores(GradTape& tape, GateParams& gate, Var cov_embed, Var tokens);

/// Uniform fallback over the k lowest-indexed routed experts.
RoutingDecision uniform_fallback(std::size_t routed, std::size_t k, std::size_t token_idx = 0);

/// Covariate-fixed routed slots: k distinct experts drawn from a hash of the
/// static covariate value.
std::vector<std::size_t> covariate_hash_slots(std::int64_t value, std::size_t routed, std::size_t k);

struct MoELayer {
    MoEConfig cfg;
    std::size_t width = 0;      // h
    std::size_t cov_width = 0;  // h_z
    std::vector<ExpertParams> shared;
    std::vector<ExpertParams> conditional;
    std::vector<ExpertParams> routed;
    GateParams gate;
    Param cond_prior;    // 1 x C, initialised 0
    Param routed_prior;  // 1 x M, initialised 0
    CovSelectorRule rule;

    static MoELayer init(const MoEConfig& cfg, std::size_t h, std::size_t h_z, CovSelectorRule rule, Rng rng);

    std::vector<ExpertParams*> experts();
    std::vector<const ExpertParams*> experts() const;
    std::size_t param_count() const;
    std::uint64_t fingerprint() const;
    void attach_lowrank(std::size_t r, Rng rng);
    void zero_grad();
};

/// Per-token routing inputs derived from the window.
struct TokenContext {
    std::optional<std::int64_t> static_cov;  // region code or hour; nullopt = unavailable
    bool covariates_valid = true;
};

struct RoutingOptions {
    GatingStrategy strategy = GatingStrategy::softmax_topk;
    std::uint64_t seed = 0;        // random strategy
    std::uint64_t window_key = 0;  // random strategy, per-window salt
    bool force_fallback = false;
    /// When set, expert sets and fallback flags are replayed from these
    /// decisions; weights are still recomputed from the current parameters.
    const std::vector<RoutingDecision>* frozen = nullptr;
};

struct MoEOutput {
    Var out;
    std::vector<RoutingDecision> decisions;
    std::size_t expert_evaluations = 0;  // token-rows pushed through experts
};

MoEOutput route_and_aggregate(GradTape& tape, MoELayer& layer, Var tokens, Var cov_embed,
                              std::span<const TokenContext> ctx, const RoutingOptions& opts = {});

/// Routes every token through the fallback path.
MoEOutput fallback_route(GradTape& tape, MoELayer& layer, Var tokens, std::span<const TokenContext> ctx);

// ---------------------------------------------------------------------------
// Parameter accounting.
// ---------------------------------------------------------------------------
struct ModelDims {
    std::size_t d = 0;          // observed channels
    std::size_t p = 0;          // covariates
    std::size_t h = 0;          // token width
    std::size_t h_z = 0;        // covariate embedding width
    std::size_t horizon = 0;
    std::size_t quantiles = 0;
};

enum class ParamScope { moe_only, full_model };

std::size_t expert_param_count(std::size_t h, std::size_t h_ff, std::size_t r = 0);
std::size_t gate_param_count(const ModelDims& dims, const MoEConfig& cfg);
std::size_t tokenizer_param_count(const ModelDims& dims);
std::size_t backbone_param_count(const ModelDims& dims);
std::size_t count_params(const ModelDims& dims, const MoEConfig& cfg, ParamScope scope);

// ---------------------------------------------------------------------------
// Binary records. All integers and payloads little-endian; payload doubles in
// declared order. Lengths are computable from the headers alone.
// ---------------------------------------------------------------------------
inline constexpr std::size_t kExpertHeaderBytes = 23;  // + origin label bytes
inline constexpr std::size_t kGateHeaderBytes = 13;
inline constexpr std::size_t kPriorHeaderBytes = 12;
inline constexpr std::size_t kLayerHeaderBytes = 38;

std::size_t expert_record_bytes(std::size_t h, std::size_t h_ff, std::size_t r, std::size_t origin_len);
void write_expert(ByteWriter& w, const ExpertParams& e);
ExpertParams read_expert(ByteReader& r);

void write_gate(ByteWriter& w, const GateParams& g);
GateParams read_gate(ByteReader& r);

/// Layer record: header, gate, priors, then shared/conditional/routed experts.
void write_layer(ByteWriter& w, const MoELayer& layer);
/// Reads a layer; the selector rule is not part of the record.
MoELayer read_layer(ByteReader& r);
std::size_t layer_record_bytes(const MoELayer& layer);

}  // namespace covmoe
