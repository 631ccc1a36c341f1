#include "covmoe/model.hpp"

#include <cmath>

#include "covmoe/errors.hpp"

namespace covmoe {

void ModelSpec::validate() const {
    if (h == 0 || h_z == 0) throw ConfigError("model: h and h_z must be positive");
    moe.validate();
    validate_quantiles(quantiles);
    if (selector == SelectorMode::hour_bucket && (hour_buckets == 0 || hour_buckets > 24)) {
        throw ConfigError("model: hour_buckets must be in [1, 24]");
    }
    if (selector == SelectorMode::hour_bucket && moe.conditional > 0 && moe.conditional < hour_buckets) {
        throw ConfigError("model: hour-bucket selector needs conditional >= hour_buckets");
    }
}

nlohmann::json ModelSpec::to_json() const {
    return {{"h", h},
            {"h_z", h_z},
            {"h_ff", moe.hidden_ff},
            {"shared", moe.shared},
            {"conditional", moe.conditional},
            {"routed", moe.routed},
            {"top_k", moe.top_k},
            {"rank", moe.rank},
            {"fallback", std::string(to_string(moe.fallback))},
            {"gate_input", std::string(to_string(moe.gate_input))},
            {"quantiles", quantiles},
            {"selector", std::string(to_string(selector))},
            {"hour_buckets", hour_buckets},
            {"backbone_seed", backbone_seed}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.h = j.value("h", s.h);
    s.h_z = j.value("h_z", s.h_z);
    s.moe.hidden_ff = j.value("h_ff", s.moe.hidden_ff);
    s.moe.shared = j.value("shared", s.moe.shared);
    s.moe.conditional = j.value("conditional", s.moe.conditional);
    s.moe.routed = j.value("routed", s.moe.routed);
    s.moe.top_k = j.value("top_k", s.moe.top_k);
    s.moe.rank = j.value("rank", s.moe.rank);
    if (j.contains("fallback")) s.moe.fallback = fallback_mode_from_string(j.at("fallback").get<std::string>());
    if (j.contains("gate_input")) s.moe.gate_input = gate_input_from_string(j.at("gate_input").get<std::string>());
    s.quantiles = j.value("quantiles", s.quantiles);
    if (j.contains("selector")) s.selector = selector_mode_from_string(j.at("selector").get<std::string>());
    s.hour_buckets = j.value("hour_buckets", s.hour_buckets);
    s.backbone_seed = j.value("backbone_seed", s.backbone_seed);
    s.validate();
    return s;
}

CovSelectorRule make_selector_rule(const ModelSpec& spec, std::size_t regions) {
    if (spec.moe.conditional == 0) {
        CovSelectorRule r;
        r.mode = spec.selector;
        return r;
    }
    if (spec.selector == SelectorMode::region) return CovSelectorRule::region_identity(regions, spec.moe.conditional);
    return CovSelectorRule::hour_buckets(spec.hour_buckets);
}

ForecastModel ForecastModel::init(const ModelSpec& spec, std::size_t d, std::size_t p, std::size_t horizon,
                                  std::size_t regions, std::uint64_t seed) {
    spec.validate();
    if (d == 0 || horizon == 0) throw ConfigError("model: need at least one channel and a positive horizon");
    if (regions == 0) throw ConfigError("model: need at least one region");
    ForecastModel m;
    m.spec = spec;
    m.regions = regions;
    m.dims = ModelDims{d, p, spec.h, spec.h_z, horizon, spec.quantiles.size()};
    const Rng root(seed);
    m.tokenizer = TokenizerParams::init(d, spec.h, p, spec.h_z, root.derive("tokenizer"));
    m.moe = MoELayer::init(spec.moe, spec.h, spec.h_z, make_selector_rule(spec, regions), root.derive("moe"));
    m.backbone = build_frozen_backbone(spec.backbone_seed, spec.h, horizon, spec.quantiles);
    return m;
}

std::vector<Param*> ForecastModel::params() {
    std::vector<Param*> out{&tokenizer.w_in, &tokenizer.b_in, &tokenizer.w_cov, &tokenizer.b_cov,
                            &moe.gate.w_g,   &moe.gate.b_g,   &moe.cond_prior,  &moe.routed_prior};
    for (auto* e : moe.experts())
        for (Param* p : e->params()) out.push_back(p);
    for (Param* p : {&backbone.w_pool, &backbone.w_out, &backbone.b_out}) out.push_back(p);
    return out;
}

void ForecastModel::zero_grad() {
    for (Param* p : params()) p->zero_grad();
}

std::uint64_t ForecastModel::fingerprint() const {
    Fnv1a h;
    h.u64(tokenizer.fingerprint());
    h.u64(moe.fingerprint());
    h.u64(backbone.fingerprint());
    return h.digest();
}

Matrix covariate_rows(const Window& w) {
    Matrix z = w.context_cov;
    for (double& x : z.flat())
        if (!std::isfinite(x)) x = 0.0;
    return z;
}

std::vector<TokenContext> token_contexts(const Window& w, SelectorMode mode) {
    const bool absent = w.covariates_absent();
    std::vector<TokenContext> ctx(w.context_length());
    for (std::size_t t = 0; t < ctx.size(); ++t) {
        bool finite = true;
        for (double x : w.context_cov.row(t)) finite = finite && std::isfinite(x);
        ctx[t].covariates_valid = !absent && finite;
        if (absent) continue;
        if (mode == SelectorMode::region) {
            ctx[t].static_cov = w.region_code;
        } else {
            const Timestamp ts = w.time_at(t);
            ctx[t].static_cov = ((ts % 86400) + 86400) % 86400 / 3600;
        }
    }
    return ctx;
}

std::uint64_t window_key(const Window& w) {
    Fnv1a h;
    h.u64(static_cast<std::uint64_t>(w.origin));
    h.u64(static_cast<std::uint64_t>(w.region_code));
    return h.digest();
}

ForwardPass model_forward(GradTape& tape, ForecastModel& model, const Window& w, RoutingOptions opts) {
    Var tokens = tokenize(tape, model.tokenizer, w.context);
    Var cov = embed_covariates(tape, model.tokenizer, covariate_rows(w));
    const auto ctx = token_contexts(w, model.spec.selector);
    opts.window_key = window_key(w);
    MoEOutput moe = route_and_aggregate(tape, model.moe, tokens, cov, ctx, opts);
    ForwardPass fp;
    fp.forecast = backbone_forward(tape, model.backbone, moe.out);
    fp.decisions = std::move(moe.decisions);
    fp.expert_evaluations = moe.expert_evaluations;
    return fp;
}

QuantileForecast predict(ForecastModel& model, const Window& w, const RoutingOptions& opts) {
    GradTape tape;
    ForwardPass fp = model_forward(tape, model, w, opts);
    QuantileForecast f;
    f.levels = model.spec.quantiles;
    f.values = tape.value(fp.forecast);
    return f;
}

std::vector<RoutingDecision> route_window(ForecastModel& model, const Window& w, const RoutingOptions& opts) {
    GradTape tape;
    return model_forward(tape, model, w, opts).decisions;
}

void write_model(ByteWriter& w, const ForecastModel& m) {
    write_tokenizer(w, m.tokenizer);
    write_backbone(w, m.backbone);
    write_layer(w, m.moe);
}

ForecastModel read_model(ByteReader& r, const ModelSpec& spec, std::size_t regions) {
    ForecastModel m;
    m.spec = spec;
    m.regions = regions;
    m.tokenizer = read_tokenizer(r);
    m.backbone = read_backbone(r, spec.quantiles);
    m.moe = read_layer(r);
    if (m.tokenizer.token_width() != spec.h || m.backbone.width() != spec.h || m.moe.width != spec.h ||
        m.moe.cov_width != m.tokenizer.embedding_width()) {
        r.fail("model records disagree on widths");
    }
    m.moe.rule = make_selector_rule(spec, regions);
    m.spec.moe = m.moe.cfg;
    m.dims = ModelDims{m.tokenizer.input_width(), m.tokenizer.covariate_width(), spec.h,
                       m.tokenizer.embedding_width(), m.backbone.horizon, spec.quantiles.size()};
    return m;
}

}  // namespace covmoe
