#include "covmoe/cov_smoe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "covmoe/errors.hpp"

namespace covmoe {

std::string_view to_string(ExpertClass c) {
    switch (c) {
        case ExpertClass::shared: return "shared";
        case ExpertClass::conditional: return "conditional";
        case ExpertClass::routed: return "routed";
    }
    return "?";
}

std::string_view to_string(GateInput g) {
    return g == GateInput::covariate_only ? "covariate-only" : "covariate-plus-token";
}

GateInput gate_input_from_string(std::string_view s) {
    if (s == "covariate-only") return GateInput::covariate_only;
    if (s == "covariate-plus-token") return GateInput::covariate_plus_token;
    throw ConfigError("unknown gate input mode '" + std::string(s) + "'");
}

std::string_view to_string(SelectorMode m) { return m == SelectorMode::region ? "region" : "hour-bucket"; }

SelectorMode selector_mode_from_string(std::string_view s) {
    if (s == "region") return SelectorMode::region;
    if (s == "hour-bucket") return SelectorMode::hour_bucket;
    throw ConfigError("unknown selector mode '" + std::string(s) + "'");
}

std::string_view to_string(FallbackMode m) { return m == FallbackMode::uniform ? "uniform" : "learned-prior"; }

FallbackMode fallback_mode_from_string(std::string_view s) {
    if (s == "uniform") return FallbackMode::uniform;
    if (s == "learned-prior") return FallbackMode::learned_prior;
    throw ConfigError("unknown fallback mode '" + std::string(s) + "'");
}

std::string_view to_string(GatingStrategy g) {
    switch (g) {
        case GatingStrategy::covariate_fixed: return "covariate-fixed";
        case GatingStrategy::softmax_topk: return "softmax-topk";
        case GatingStrategy::random: return "random";
    }
    return "?";
}

GatingStrategy gating_strategy_from_string(std::string_view s) {
    if (s == "covariate-fixed") return GatingStrategy::covariate_fixed;
    if (s == "softmax-topk") return GatingStrategy::softmax_topk;
    if (s == "random") return GatingStrategy::random;
    throw ConfigError("unknown gating strategy '" + std::string(s) + "'");
}

// -------------------------------------------------------------------- experts

ExpertParams ExpertParams::init(std::uint32_t id, ExpertClass cls, std::size_t h, std::size_t h_ff, Rng rng) {
    ExpertParams e;
    e.expert_id = id;
    e.cls = cls;
    Matrix w1(h, h_ff), w2(h_ff, h);
    Rng r1 = rng.derive("w1");
    Rng r2 = rng.derive("w2");
    fill_uniform(w1, r1, 1.0 / std::sqrt(static_cast<double>(h)));
    fill_uniform(w2, r2, 1.0 / std::sqrt(static_cast<double>(h_ff)));
    e.w1 = Param(std::move(w1));
    e.b1 = Param(Matrix(1, h_ff));
    e.w2 = Param(std::move(w2));
    e.b2 = Param(Matrix(1, h));
    return e;
}

void ExpertParams::attach_lowrank(std::size_t r, Rng rng) {
    if (r == 0) return;
    const std::size_t h = width(), h_ff = hidden();
    LowRankPair lr;
    Matrix a1(h, r), a2(h_ff, r);
    Rng ra = rng.derive("a1");
    Rng rb = rng.derive("a2");
    fill_uniform(a1, ra, 1.0 / std::sqrt(static_cast<double>(h)));
    fill_uniform(a2, rb, 1.0 / std::sqrt(static_cast<double>(h_ff)));
    lr.a1 = Param(std::move(a1));
    lr.b1 = Param(Matrix(r, h_ff));
    lr.a2 = Param(std::move(a2));
    lr.b2 = Param(Matrix(r, h));
    lowrank = std::move(lr);
    for (Param* p : {&w1, &b1, &w2, &b2}) p->trainable = false;
}

void ExpertParams::merge_lowrank() {
    if (!lowrank) return;
    w1.value = effective_w1();
    w2.value = effective_w2();
    lowrank.reset();
    for (Param* p : {&w1, &b1, &w2, &b2}) p->trainable = true;
}

Matrix ExpertParams::effective_w1() const {
    if (!lowrank) return w1.value;
    Matrix delta = matmul(lowrank->a1.value, lowrank->b1.value);
    Matrix out = w1.value;
    for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] += delta.flat()[i];
    return out;
}

Matrix ExpertParams::effective_w2() const {
    if (!lowrank) return w2.value;
    Matrix delta = matmul(lowrank->a2.value, lowrank->b2.value);
    Matrix out = w2.value;
    for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] += delta.flat()[i];
    return out;
}

MlpVars ExpertParams::bind(GradTape& tape) {
    MlpVars v;
    v.w1 = tape.param(w1);
    v.w2 = tape.param(w2);
    if (lowrank) {
        v.w1 = ops::add(tape, v.w1, ops::matmul(tape, tape.param(lowrank->a1), tape.param(lowrank->b1)));
        v.w2 = ops::add(tape, v.w2, ops::matmul(tape, tape.param(lowrank->a2), tape.param(lowrank->b2)));
    }
    v.b1 = tape.param(b1);
    v.b2 = tape.param(b2);
    return v;
}

Matrix ExpertParams::forward(const Matrix& x) const {
    Matrix hdn = matmul(x, effective_w1());
    for (std::size_t i = 0; i < hdn.rows(); ++i)
        for (std::size_t j = 0; j < hdn.cols(); ++j) hdn(i, j) = std::tanh(hdn(i, j) + b1.value(0, j));
    Matrix out = matmul(hdn, effective_w2());
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b2.value(0, j);
    return out;
}

void ExpertParams::set_trainable(bool on) {
    if (lowrank) {
        for (Param* p : {&w1, &b1, &w2, &b2}) p->trainable = false;
        for (Param* p : {&lowrank->a1, &lowrank->b1, &lowrank->a2, &lowrank->b2}) p->trainable = on;
    } else {
        for (Param* p : {&w1, &b1, &w2, &b2}) p->trainable = on;
    }
}

std::vector<Param*> ExpertParams::params() {
    std::vector<Param*> out{&w1, &b1, &w2, &b2};
    if (lowrank) {
        for (Param* p : {&lowrank->a1, &lowrank->b1, &lowrank->a2, &lowrank->b2}) out.push_back(p);
    }
    return out;
}

std::vector<const Param*> ExpertParams::params() const {
    std::vector<const Param*> out{&w1, &b1, &w2, &b2};
    if (lowrank) {
        for (const Param* p : {&lowrank->a1, &lowrank->b1, &lowrank->a2, &lowrank->b2}) out.push_back(p);
    }
    return out;
}

std::size_t ExpertParams::base_param_count() const noexcept {
    return w1.value.size() + b1.value.size() + w2.value.size() + b2.value.size();
}

std::size_t ExpertParams::lowrank_param_count() const noexcept {
    if (!lowrank) return 0;
    return lowrank->a1.value.size() + lowrank->b1.value.size() + lowrank->a2.value.size() +
           lowrank->b2.value.size();
}

std::uint64_t ExpertParams::base_fingerprint() const {
    Fnv1a h;
    for (const Param* p : {&w1, &b1, &w2, &b2}) h.matrix(p->value);
    return h.digest();
}

std::uint64_t ExpertParams::fingerprint() const {
    Fnv1a h;
    for (const Param* p : params()) h.matrix(p->value);
    return h.digest();
}

// ----------------------------------------------------------------------- gate

GateParams GateParams::init(std::size_t h_z, std::size_t h, std::size_t routed, GateInput mode, Rng rng) {
    GateParams g;
    g.mode = mode;
    const std::size_t in = h_z + (mode == GateInput::covariate_plus_token ? h : 0);
    Matrix w(in, routed);
    Rng r = rng.derive("w_g");
    fill_uniform(w, r, in ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0);
    g.w_g = Param(std::move(w));
    g.b_g = Param(Matrix(1, routed));
    return g;
}

std::uint64_t GateParams::fingerprint() const {
    Fnv1a h;
    h.u64(static_cast<std::uint64_t>(mode));
    h.matrix(w_g.value);
    h.matrix(b_g.value);
    return h.digest();
}

std::vector<double> gate_scores(const GateParams& gate, std::span<const double> cov_embed,
                                std::span<const double> token) {
    std::vector<double> input(cov_embed.begin(), cov_embed.end());
    if (gate.mode == GateInput::covariate_plus_token) input.insert(input.end(), token.begin(), token.end());
    if (input.size() != gate.input_width()) {
        throw ShapeError("gate_scores: input width " + std::to_string(input.size()) + " != " +
                         std::to_string(gate.input_width()));
    }
    Matrix s = matmul(Matrix::row_vector(input), gate.w_g.value);
    std::vector<double> out(gate.experts());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = s(0, j) + gate.b_g.value(0, j);
    return out;
}

Var gate_scores(GradTape& tape, GateParams& gate, Var cov_embed, Var tokens) {
    Var input = gate.mode == GateInput::covariate_plus_token ? ops::concat_cols(tape, cov_embed, tokens) : cov_embed;
    if (tape.value(input).cols() != gate.input_width()) {
        throw ShapeError("gate_scores: input width " + std::to_string(tape.value(input).cols()) + " != " +
                         std::to_string(gate.input_width()));
    }
    return ops::add_row(tape, ops::matmul(tape, input, tape.param(gate.w_g)), tape.param(gate.b_g));
}

// ------------------------------------------------------------------- selector

CovSelectorRule CovSelectorRule::region_identity(std::size_t regions, std::size_t conditional) {
    if (conditional == 0) throw ConfigError("region selector needs at least one conditional expert");
    CovSelectorRule r;
    r.mode = SelectorMode::region;
    for (std::size_t i = 0; i < regions; ++i) r.table[static_cast<std::int64_t>(i)] = i % conditional;
    return r;
}

CovSelectorRule CovSelectorRule::hour_buckets(std::size_t buckets) {
    if (buckets == 0 || buckets > 24) throw ConfigError("hour buckets must be in [1, 24]");
    CovSelectorRule r;
    r.mode = SelectorMode::hour_bucket;
    for (std::size_t hour = 0; hour < 24; ++hour) r.table[static_cast<std::int64_t>(hour)] = hour * buckets / 24;
    return r;
}

CovSelectorRule CovSelectorRule::shifted(std::size_t offset) const {
    CovSelectorRule r = *this;
    for (auto& [k, v] : r.table) v += offset;
    return r;
}

std::size_t cov_select(const CovSelectorRule& rule, std::int64_t value) {
    auto it = rule.table.find(value);
    if (it == rule.table.end()) {
        throw RoutingError(std::string(to_string(rule.mode)) + " selector has no entry for " + std::to_string(value));
    }
    return it->second;
}

// -------------------------------------------------------------------- routing

void MoEConfig::validate() const {
    if (routed == 0) throw ConfigError("MoE needs at least one routed expert");
    if (top_k < 1 || top_k > routed) {
        throw ConfigError("top_k must be in [1, " + std::to_string(routed) + "], got " + std::to_string(top_k));
    }
    if (hidden_ff == 0) throw ConfigError("expert hidden width must be positive");
}

std::vector<std::size_t> select_topk(std::span<const double> scores, std::size_t k) {
    k = std::min(k, scores.size());
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                      });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

RoutingDecision route_token(std::span<const double> scores, std::size_t k,
                            std::optional<std::pair<std::size_t, double>> conditional, std::size_t token_idx) {
    RoutingDecision d;
    d.token_idx = token_idx;
    d.routed = select_topk(scores, k);
    std::vector<double> logits;
    if (conditional) {
        d.conditional = conditional->first;
        logits.push_back(conditional->second);
    }
    for (std::size_t i : d.routed) logits.push_back(scores[i]);
    d.weights = softmax(logits);
    return d;
}

RoutingDecision uniform_fallback(std::size_t routed, std::size_t k, std::size_t token_idx) {
    RoutingDecision d;
    d.token_idx = token_idx;
    k = std::min(k, routed);
    d.routed.resize(k);
    std::iota(d.routed.begin(), d.routed.end(), std::size_t{0});
    d.weights.assign(k, 1.0 / static_cast<double>(k));
    d.fallback_used = true;
    return d;
}

std::vector<std::size_t> covariate_hash_slots(std::int64_t value, std::size_t routed, std::size_t k) {
    Rng rng = Rng(splitmix64(static_cast<std::uint64_t>(value))).derive("covariate-fixed");
    std::vector<std::size_t> idx(routed);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    idx.resize(std::min(k, routed));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------------- layer

MoELayer MoELayer::init(const MoEConfig& cfg, std::size_t h, std::size_t h_z, CovSelectorRule rule, Rng rng) {
    cfg.validate();
    MoELayer l;
    l.cfg = cfg;
    l.width = h;
    l.cov_width = h_z;
    l.rule = std::move(rule);
    std::uint32_t id = 0;
    Rng er = rng.derive("experts");
    for (std::size_t i = 0; i < cfg.shared; ++i, ++id)
        l.shared.push_back(ExpertParams::init(id, ExpertClass::shared, h, cfg.hidden_ff, er.derive(id)));
    for (std::size_t i = 0; i < cfg.conditional; ++i, ++id)
        l.conditional.push_back(ExpertParams::init(id, ExpertClass::conditional, h, cfg.hidden_ff, er.derive(id)));
    for (std::size_t i = 0; i < cfg.routed; ++i, ++id)
        l.routed.push_back(ExpertParams::init(id, ExpertClass::routed, h, cfg.hidden_ff, er.derive(id)));
    l.gate = GateParams::init(h_z, h, cfg.routed, cfg.gate_input, rng.derive("gate"));
    l.cond_prior = Param(Matrix(1, cfg.conditional));
    l.routed_prior = Param(Matrix(1, cfg.routed));
    if (cfg.rank > 0) l.attach_lowrank(cfg.rank, rng.derive("lowrank"));
    return l;
}

std::vector<ExpertParams*> MoELayer::experts() {
    std::vector<ExpertParams*> out;
    for (auto* group : {&shared, &conditional, &routed})
        for (auto& e : *group) out.push_back(&e);
    return out;
}

std::vector<const ExpertParams*> MoELayer::experts() const {
    std::vector<const ExpertParams*> out;
    for (const auto* group : {&shared, &conditional, &routed})
        for (const auto& e : *group) out.push_back(&e);
    return out;
}

std::size_t MoELayer::param_count() const {
    std::size_t n = gate.w_g.value.size() + gate.b_g.value.size() + cond_prior.value.size() + routed_prior.value.size();
    for (const auto* e : experts()) n += e->base_param_count() + e->lowrank_param_count();
    return n;
}

std::uint64_t MoELayer::fingerprint() const {
    Fnv1a h;
    h.u64(gate.fingerprint());
    h.matrix(cond_prior.value);
    h.matrix(routed_prior.value);
    for (const auto* e : experts()) h.u64(e->fingerprint());
    return h.digest();
}

void MoELayer::attach_lowrank(std::size_t r, Rng rng) {
    cfg.rank = r;
    for (auto* e : experts()) e->attach_lowrank(r, rng.derive(e->expert_id).derive(e->origin_client));
}

void MoELayer::zero_grad() {
    gate.w_g.zero_grad();
    gate.b_g.zero_grad();
    cond_prior.zero_grad();
    routed_prior.zero_grad();
    for (auto* e : experts())
        for (Param* p : e->params()) p->zero_grad();
}

namespace {

enum class SourceKind : std::uint8_t { score, cond_prior, routed_prior };

struct WeightSource {
    SourceKind kind;
    std::size_t index;
};

struct TokenPlan {
    bool uniform = false;
    std::vector<WeightSource> sources;  // one per selected non-shared expert
};

// Restricted softmax over per-token source logits gathered from the gate
// scores and the prior vectors. Output is L x width, zero padded.
Var restricted_weights(GradTape& tape, Var scores, Var cond_prior, Var routed_prior, std::vector<TokenPlan> plan,
                       std::size_t width, std::vector<RoutingDecision>& decisions) {
    const std::size_t L = plan.size();
    Matrix w(L, width);
    auto logit = [&](std::size_t t, const WeightSource& s) {
        switch (s.kind) {
            case SourceKind::score: return tape.value(scores)(t, s.index);
            case SourceKind::cond_prior: return tape.value(cond_prior)(0, s.index);
            case SourceKind::routed_prior: return tape.value(routed_prior)(0, s.index);
        }
        return 0.0;
    };
    for (std::size_t t = 0; t < L; ++t) {
        const auto& p = plan[t];
        std::vector<double> weights;
        if (p.uniform) {
            weights.assign(p.sources.size(), 1.0 / static_cast<double>(p.sources.size()));
        } else {
            std::vector<double> logits;
            for (const auto& s : p.sources) logits.push_back(logit(t, s));
            weights = softmax(logits);
        }
        for (std::size_t j = 0; j < weights.size(); ++j) w(t, j) = weights[j];
        decisions[t].weights = std::move(weights);
    }

    std::vector<std::size_t> parents{scores.id};
    if (cond_prior.valid()) parents.push_back(cond_prior.id);
    if (routed_prior.valid()) parents.push_back(routed_prior.id);
    const std::size_t is = scores.id;
    const std::size_t ic = cond_prior.valid() ? cond_prior.id : SIZE_MAX;
    const std::size_t ir = routed_prior.valid() ? routed_prior.id : SIZE_MAX;
    return tape.record(std::move(w), std::move(parents),
                       [plan = std::move(plan), is, ic, ir](GradTape& tp, std::size_t self) {
                           const Matrix& g = tp.grad(Var{self});
                           const Matrix& w = tp.value_at(self);
                           for (std::size_t t = 0; t < plan.size(); ++t) {
                               const auto& p = plan[t];
                               if (p.uniform) continue;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < p.sources.size(); ++j) dot += w(t, j) * g(t, j);
                               for (std::size_t j = 0; j < p.sources.size(); ++j) {
                                   const double dz = w(t, j) * (g(t, j) - dot);
                                   const auto& s = p.sources[j];
                                   std::size_t target = s.kind == SourceKind::score        ? is
                                                        : s.kind == SourceKind::cond_prior ? ic
                                                                                           : ir;
                                   if (!tp.needs_grad(target)) continue;
                                   if (s.kind == SourceKind::score) tp.grad_mut(target)(t, s.index) += dz;
                                   else tp.grad_mut(target)(0, s.index) += dz;
                               }
                           }
                       });
}

}  // namespace

MoEOutput route_and_aggregate(GradTape& tape, MoELayer& layer, Var tokens, Var cov_embed,
                              std::span<const TokenContext> ctx, const RoutingOptions& opts) {
    const MoEConfig& cfg = layer.cfg;
    const Matrix& tok = tape.value(tokens);
    const std::size_t L = tok.rows();
    if (tok.cols() != layer.width) {
        throw ShapeError("route_and_aggregate: token width " + std::to_string(tok.cols()) + " != " +
                         std::to_string(layer.width));
    }
    if (ctx.size() != L) throw ShapeError("route_and_aggregate: one TokenContext per token required");
    if (tape.value(cov_embed).rows() != L) throw ShapeError("route_and_aggregate: covariate rows != tokens");
    if (opts.frozen && opts.frozen->size() != L) throw ShapeError("route_and_aggregate: frozen routing size");
    const std::size_t C = layer.conditional.size();
    const std::size_t M = layer.routed.size();
    const std::size_t k = std::min(cfg.top_k, M);

    Var scores = gate_scores(tape, layer.gate, cov_embed, tokens);
    Var cprior = C > 0 ? tape.param(layer.cond_prior) : Var{};
    Var rprior = cfg.fallback == FallbackMode::learned_prior ? tape.param(layer.routed_prior) : Var{};
    const Matrix& sv = tape.value(scores);

    std::vector<RoutingDecision> decisions(L);
    std::vector<TokenPlan> plan(L);
    for (std::size_t t = 0; t < L; ++t) {
        RoutingDecision& d = decisions[t];
        d.token_idx = t;
        if (opts.frozen) {
            const RoutingDecision& f = (*opts.frozen)[t];
            d.conditional = f.conditional;
            d.routed = f.routed;
            d.fallback_used = f.fallback_used;
        } else {
            bool fallback = opts.force_fallback || !ctx[t].covariates_valid;
            if (opts.strategy == GatingStrategy::random) {
                Rng rng = Rng(opts.seed).derive("random-routing").derive(opts.window_key).derive(t);
                if (C > 0) d.conditional = rng.below(C);
                std::vector<std::size_t> idx(M);
                std::iota(idx.begin(), idx.end(), std::size_t{0});
                rng.shuffle(idx);
                idx.resize(k);
                std::sort(idx.begin(), idx.end());
                d.routed = std::move(idx);
                fallback = false;
            } else if (!fallback) {
                if (C > 0 || opts.strategy == GatingStrategy::covariate_fixed) {
                    if (!ctx[t].static_cov) {
                        fallback = true;
                    } else if (C > 0) {
                        try {
                            d.conditional = cov_select(layer.rule, *ctx[t].static_cov);
                            if (*d.conditional >= C) fallback = true;
                        } catch (const RoutingError&) {
                            fallback = true;
                        }
                    }
                }
                if (!fallback) {
                    if (opts.strategy == GatingStrategy::covariate_fixed) {
                        d.routed = covariate_hash_slots(*ctx[t].static_cov, M, k);
                    } else {
                        d.routed = select_topk(sv.row(t), k);
                    }
                }
            }
            if (fallback) {
                d.conditional.reset();
                d.fallback_used = true;
                if (cfg.fallback == FallbackMode::uniform) {
                    d.routed = uniform_fallback(M, k, t).routed;
                } else {
                    d.routed = select_topk(layer.routed_prior.value.row(0), k);
                }
            }
        }

        TokenPlan& p = plan[t];
        if (d.fallback_used) {
            p.uniform = cfg.fallback == FallbackMode::uniform;
            for (std::size_t i : d.routed) p.sources.push_back({SourceKind::routed_prior, i});
        } else {
            p.uniform = opts.strategy != GatingStrategy::softmax_topk;
            if (d.conditional) p.sources.push_back({SourceKind::cond_prior, *d.conditional});
            for (std::size_t i : d.routed) p.sources.push_back({SourceKind::score, i});
        }
        if (!p.uniform && d.fallback_used && !rprior.valid()) p.uniform = true;
    }

    const std::size_t slots = k + (C > 0 ? 1 : 0);
    Var weights = restricted_weights(tape, scores, cprior, rprior, std::move(plan), slots, decisions);

    MoEOutput out;
    Var acc = tokens;
    if (!layer.shared.empty()) {
        Var shared_sum;
        for (auto& e : layer.shared) {
            Var y = mlp_forward(tape, e.bind(tape), tokens);
            shared_sum = shared_sum.valid() ? ops::add(tape, shared_sum, y) : y;
            out.expert_evaluations += L;
        }
        acc = ops::add(tape, acc, ops::scale(tape, shared_sum, 1.0 / static_cast<double>(layer.shared.size())));
    }

    // Token rows and weight columns assigned to each non-shared expert.
    std::vector<std::vector<std::size_t>> rows(C + M);
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> cells(C + M);
    for (std::size_t t = 0; t < L; ++t) {
        const RoutingDecision& d = decisions[t];
        std::size_t col = 0;
        if (d.conditional) {
            rows[*d.conditional].push_back(t);
            cells[*d.conditional].emplace_back(t, col++);
        }
        for (std::size_t i : d.routed) {
            rows[C + i].push_back(t);
            cells[C + i].emplace_back(t, col++);
        }
    }
    for (std::size_t e = 0; e < C + M; ++e) {
        if (rows[e].empty()) continue;
        ExpertParams& ex = e < C ? layer.conditional[e] : layer.routed[e - C];
        out.expert_evaluations += rows[e].size();
        Var x = ops::gather_rows(tape, tokens, rows[e]);
        Var y = mlp_forward(tape, ex.bind(tape), x);
        Var w = ops::gather_entries(tape, weights, std::move(cells[e]));
        Var scaled = ops::mul_rowwise(tape, y, w);
        acc = ops::add(tape, acc, ops::scatter_rows(tape, scaled, std::move(rows[e]), L));
    }
    out.out = acc;
    out.decisions = std::move(decisions);
    return out;
}

MoEOutput fallback_route(GradTape& tape, MoELayer& layer, Var tokens, std::span<const TokenContext> ctx) {
    Var cov = tape.constant(Matrix(tape.value(tokens).rows(), layer.cov_width));
    RoutingOptions opts;
    opts.force_fallback = true;
    return route_and_aggregate(tape, layer, tokens, cov, ctx, opts);
}

// ------------------------------------------------------------------ accounting

std::size_t expert_param_count(std::size_t h, std::size_t h_ff, std::size_t r) {
    std::size_t n = h * h_ff + h_ff + h_ff * h + h;
    if (r > 0) n += h * r + r * h_ff + h_ff * r + r * h;
    return n;
}

std::size_t gate_param_count(const ModelDims& dims, const MoEConfig& cfg) {
    const std::size_t in = dims.h_z + (cfg.gate_input == GateInput::covariate_plus_token ? dims.h : 0);
    return in * cfg.routed + cfg.routed;
}

std::size_t tokenizer_param_count(const ModelDims& dims) {
    return dims.d * dims.h + dims.h + dims.p * dims.h_z + dims.h_z;
}

std::size_t backbone_param_count(const ModelDims& dims) {
    const std::size_t out = dims.horizon * dims.quantiles;
    return dims.h * dims.h + dims.h * out + out;
}

std::size_t count_params(const ModelDims& dims, const MoEConfig& cfg, ParamScope scope) {
    const std::size_t experts = cfg.shared + cfg.conditional + cfg.routed;
    std::size_t n = gate_param_count(dims, cfg) + cfg.conditional + cfg.routed +
                    experts * expert_param_count(dims.h, cfg.hidden_ff, cfg.rank);
    if (scope == ParamScope::full_model) n += tokenizer_param_count(dims) + backbone_param_count(dims);
    return n;
}

// ---------------------------------------------------------------- serializing

std::size_t expert_record_bytes(std::size_t h, std::size_t h_ff, std::size_t r, std::size_t origin_len) {
    return kExpertHeaderBytes + origin_len + 8 * expert_param_count(h, h_ff, r);
}

namespace {

constexpr std::uint32_t kMaxDim = 1u << 16;

void check_dim(ByteReader& r, std::uint64_t v, const char* what) {
    if (v > kMaxDim) r.fail(std::string("implausible ") + what + " " + std::to_string(v));
}

}  // namespace

void write_expert(ByteWriter& w, const ExpertParams& e) {
    w.magic("EXPT");
    w.u32(e.expert_id);
    w.u8(static_cast<std::uint8_t>(e.cls));
    w.u32(static_cast<std::uint32_t>(e.width()));
    w.u32(static_cast<std::uint32_t>(e.hidden()));
    w.u32(static_cast<std::uint32_t>(e.rank()));
    w.text16(e.origin_client);
    w.matrix(e.w1.value);
    w.matrix(e.b1.value);
    w.matrix(e.w2.value);
    w.matrix(e.b2.value);
    if (e.lowrank) {
        w.matrix(e.lowrank->a1.value);
        w.matrix(e.lowrank->b1.value);
        w.matrix(e.lowrank->a2.value);
        w.matrix(e.lowrank->b2.value);
    }
}

ExpertParams read_expert(ByteReader& r) {
    r.expect_magic("EXPT");
    ExpertParams e;
    e.expert_id = r.u32();
    const std::uint8_t cls = r.u8();
    if (cls > 2) r.fail("unknown expert class " + std::to_string(cls));
    e.cls = static_cast<ExpertClass>(cls);
    const std::size_t h = r.u32(), h_ff = r.u32(), rank = r.u32();
    check_dim(r, h, "width");
    check_dim(r, h_ff, "hidden width");
    check_dim(r, rank, "rank");
    e.origin_client = r.text16();
    if (r.remaining() < 8 * expert_param_count(h, h_ff, rank)) r.fail("expert payload truncated");
    e.w1 = Param(r.matrix(h, h_ff));
    e.b1 = Param(r.matrix(1, h_ff));
    e.w2 = Param(r.matrix(h_ff, h));
    e.b2 = Param(r.matrix(1, h));
    if (rank > 0) {
        LowRankPair lr;
        lr.a1 = Param(r.matrix(h, rank));
        lr.b1 = Param(r.matrix(rank, h_ff));
        lr.a2 = Param(r.matrix(h_ff, rank));
        lr.b2 = Param(r.matrix(rank, h));
        e.lowrank = std::move(lr);
        for (Param* p : {&e.w1, &e.b1, &e.w2, &e.b2}) p->trainable = false;
    }
    return e;
}

void write_gate(ByteWriter& w, const GateParams& g) {
    w.magic("GATE");
    w.u8(static_cast<std::uint8_t>(g.mode));
    w.u32(static_cast<std::uint32_t>(g.input_width()));
    w.u32(static_cast<std::uint32_t>(g.experts()));
    w.matrix(g.w_g.value);
    w.matrix(g.b_g.value);
}

GateParams read_gate(ByteReader& r) {
    r.expect_magic("GATE");
    GateParams g;
    const std::uint8_t mode = r.u8();
    if (mode > 1) r.fail("unknown gate input mode " + std::to_string(mode));
    g.mode = static_cast<GateInput>(mode);
    const std::size_t in = r.u32(), m = r.u32();
    check_dim(r, in, "gate input width");
    check_dim(r, m, "gate output width");
    g.w_g = Param(r.matrix(in, m));
    g.b_g = Param(r.matrix(1, m));
    return g;
}

void write_layer(ByteWriter& w, const MoELayer& l) {
    w.magic("MOEL");
    for (std::size_t v : {l.shared.size(), l.conditional.size(), l.routed.size(), l.cfg.top_k, l.width, l.cov_width,
                          l.cfg.hidden_ff, l.cfg.rank})
        w.u32(static_cast<std::uint32_t>(v));
    w.u8(static_cast<std::uint8_t>(l.cfg.fallback));
    w.u8(static_cast<std::uint8_t>(l.cfg.gate_input));
    write_gate(w, l.gate);
    w.magic("PRIO");
    w.u32(static_cast<std::uint32_t>(l.cond_prior.value.cols()));
    w.u32(static_cast<std::uint32_t>(l.routed_prior.value.cols()));
    w.matrix(l.cond_prior.value);
    w.matrix(l.routed_prior.value);
    for (const auto* e : l.experts()) write_expert(w, *e);
}

MoELayer read_layer(ByteReader& r) {
    r.expect_magic("MOEL");
    std::size_t v[8];
    for (auto& x : v) {
        x = r.u32();
        check_dim(r, x, "layer field");
    }
    MoELayer l;
    l.cfg.shared = v[0];
    l.cfg.conditional = v[1];
    l.cfg.routed = v[2];
    l.cfg.top_k = v[3];
    l.width = v[4];
    l.cov_width = v[5];
    l.cfg.hidden_ff = v[6];
    l.cfg.rank = v[7];
    const std::uint8_t fb = r.u8(), gi = r.u8();
    if (fb > 1 || gi > 1) r.fail("unknown layer mode flag");
    l.cfg.fallback = static_cast<FallbackMode>(fb);
    l.cfg.gate_input = static_cast<GateInput>(gi);
    try {
        l.cfg.validate();
    } catch (const ConfigError& e) {
        r.fail(e.what());
    }
    l.gate = read_gate(r);
    if (l.gate.experts() != l.cfg.routed || l.gate.mode != l.cfg.gate_input) r.fail("gate does not match layer header");
    r.expect_magic("PRIO");
    const std::size_t c = r.u32(), m = r.u32();
    if (c != l.cfg.conditional || m != l.cfg.routed) r.fail("prior record does not match layer header");
    l.cond_prior = Param(r.matrix(1, c));
    l.routed_prior = Param(r.matrix(1, m));
    auto read_group = [&](std::vector<ExpertParams>& group, std::size_t n, ExpertClass cls) {
        for (std::size_t i = 0; i < n; ++i) {
            ExpertParams e = read_expert(r);
            if (e.cls != cls || e.width() != l.width) r.fail("expert record does not match layer header");
            group.push_back(std::move(e));
        }
    };
    read_group(l.shared, l.cfg.shared, ExpertClass::shared);
    read_group(l.conditional, l.cfg.conditional, ExpertClass::conditional);
    read_group(l.routed, l.cfg.routed, ExpertClass::routed);
    return l;
}

std::size_t layer_record_bytes(const MoELayer& l) {
    std::size_t n = kLayerHeaderBytes + kGateHeaderBytes + 8 * (l.gate.w_g.value.size() + l.gate.b_g.value.size()) +
                    kPriorHeaderBytes + 8 * (l.cond_prior.value.size() + l.routed_prior.value.size());
    for (const auto* e : l.experts())
        n += expert_record_bytes(e->width(), e->hidden(), e->rank(), e->origin_client.size());
    return n;
}

}  // namespace covmoe
