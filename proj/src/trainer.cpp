#include "covmoe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "covmoe/errors.hpp"

namespace covmoe {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(std::string_view s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

std::string_view to_string(TrainScope s) {
    switch (s) {
        case TrainScope::moe_only: return "moe-only";
        case TrainScope::moe_tokenizer: return "moe+tokenizer";
        case TrainScope::gate_only: return "gate-only";
    }
    return "?";
}

TrainScope train_scope_from_string(std::string_view s) {
    if (s == "moe-only") return TrainScope::moe_only;
    if (s == "moe+tokenizer") return TrainScope::moe_tokenizer;
    if (s == "gate-only") return TrainScope::gate_only;
    throw ConfigError("unknown trainable scope '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must be in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"lr", lr},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"optimizer", std::string(to_string(optimizer))},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"seed", seed},
            {"scope", std::string(to_string(scope))},
            {"gating", std::string(to_string(strategy))}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seed = j.value("seed", c.seed);
    if (j.contains("scope")) c.scope = train_scope_from_string(j.at("scope").get<std::string>());
    if (j.contains("gating")) c.strategy = gating_strategy_from_string(j.at("gating").get<std::string>());
    c.validate();
    return c;
}

// ------------------------------------------------------------------- loss

namespace {

void check_target(std::size_t rows, std::size_t cols, std::size_t nq, std::span<const double> target) {
    if (rows != target.size() || cols != nq) {
        throw ShapeError("pinball_loss: forecast " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " vs target " + std::to_string(target.size()) + " and " + std::to_string(nq) + " levels");
    }
}

}  // namespace

double pinball_loss(const QuantileForecast& f, std::span<const double> target) {
    check_target(f.values.rows(), f.values.cols(), f.levels.size(), target);
    if (!f.values.all_finite()) throw NumericError("pinball_loss: non-finite forecast");
    double s = 0.0;
    for (std::size_t t = 0; t < target.size(); ++t) {
        if (std::isnan(target[t])) throw NumericError("pinball_loss: NaN target");
        for (std::size_t q = 0; q < f.levels.size(); ++q) {
            const double diff = target[t] - f.values(t, q);
            s += diff >= 0.0 ? f.levels[q] * diff : (f.levels[q] - 1.0) * diff;
        }
    }
    return s / static_cast<double>(f.values.size());
}

Var pinball_loss(GradTape& tape, Var forecast, std::span<const double> levels, std::span<const double> target) {
    QuantileForecast f;
    f.levels.assign(levels.begin(), levels.end());
    f.values = tape.value(forecast);
    const double loss = pinball_loss(f, target);
    const std::size_t src = forecast.id;
    const double n = static_cast<double>(f.values.size());
    std::vector<double> lv = f.levels;
    std::vector<double> y(target.begin(), target.end());
    return tape.record(Matrix(1, 1, loss), {src}, [src, n, lv = std::move(lv), y = std::move(y)](GradTape& tp, std::size_t self) {
        const double g = tp.grad(Var{self})(0, 0);
        const Matrix& yhat = tp.value_at(src);
        Matrix& gi = tp.grad_mut(src);
        for (std::size_t t = 0; t < y.size(); ++t)
            for (std::size_t q = 0; q < lv.size(); ++q) {
                const double d = yhat(t, q) >= y[t] ? 1.0 - lv[q] : -lv[q];
                gi(t, q) += g * d / n;
            }
    });
}

// -------------------------------------------------------------- optimizer

void apply_scope(ForecastModel& model, TrainScope scope, GatingStrategy strategy) {
    model.tokenizer.set_trainable(scope == TrainScope::moe_tokenizer);
    for (auto* e : model.moe.experts()) e->set_trainable(scope != TrainScope::gate_only);
    const bool gate = strategy == GatingStrategy::softmax_topk;
    model.moe.gate.w_g.trainable = gate;
    model.moe.gate.b_g.trainable = gate;
    model.moe.cond_prior.trainable = gate;
    model.moe.routed_prior.trainable = true;
    for (Param* p : {&model.backbone.w_pool, &model.backbone.w_out, &model.backbone.b_out}) p->trainable = false;
}

void Optimizer::step(std::span<Param* const> params) {
    for (Param* p : params) {
        if (!p->trainable || !p->touched) continue;
        ++updates_;
        auto v = p->value.flat();
        auto g = p->grad.flat();
        if (cfg_.optimizer == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg_.lr * g[i];
            continue;
        }
        Moments& st = state_[p];
        if (st.m.size() != v.size()) {
            st.m = Matrix(p->value.rows(), p->value.cols());
            st.v = Matrix(p->value.rows(), p->value.cols());
        }
        ++st.t;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
        auto m = st.m.flat();
        auto s = st.v.flat();
        for (std::size_t i = 0; i < v.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            s[i] = cfg_.beta2 * s[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mh = m[i] / c1;
            const double vh = s[i] / c2;
            v[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.epsilon);
        }
    }
}

// ---------------------------------------------------------------- training

RoutingOptions routing_for(const TrainConfig& cfg) {
    RoutingOptions o;
    o.strategy = cfg.strategy;
    o.seed = cfg.seed;
    return o;
}

LossSummary evaluate_loss(ForecastModel& model, const std::vector<Window>& windows, const RoutingOptions& opts) {
    LossSummary s;
    const std::size_t C = model.moe.conditional.size();
    s.utilization.assign(C + model.moe.routed.size(), 0);
    double total = 0.0;
    for (const Window& w : windows) {
        GradTape tape;
        ForwardPass fp = model_forward(tape, model, w, opts);
        QuantileForecast f{model.spec.quantiles, tape.value(fp.forecast)};
        total += pinball_loss(f, w.target_future);
        for (const auto& d : fp.decisions) {
            if (d.conditional) {
                ++s.utilization[*d.conditional];
                ++s.routing_events;
            }
            for (std::size_t i : d.routed) {
                ++s.utilization[C + i];
                ++s.routing_events;
            }
            if (d.fallback_used) ++s.fallback_tokens;
        }
    }
    s.mean_loss = windows.empty() ? 0.0 : total / static_cast<double>(windows.size());
    return s;
}

TrainReport train_local(ForecastModel& model, const std::vector<Window>& train, const std::vector<Window>& val,
                        const TrainConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw TrainingError("no training windows", 0);
    const auto started = std::chrono::steady_clock::now();
    apply_scope(model, cfg.scope, cfg.strategy);
    const RoutingOptions opts = routing_for(cfg);
    const std::uint64_t backbone_before = model.backbone.fingerprint();

    TrainReport rep;
    rep.initial_train_loss = evaluate_loss(model, train, opts).mean_loss;
    if (!val.empty()) rep.initial_val_loss = evaluate_loss(model, val, opts).mean_loss;

    Optimizer opt(cfg);
    const auto params = model.params();
    std::vector<std::size_t> order(train.size());
    const Rng batch_rng = Rng(cfg.seed).derive("batches");
    bool capped = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs && !capped; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng r = batch_rng.derive(epoch);
        r.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            if (cfg.max_steps && rep.steps >= cfg.max_steps) {
                capped = true;
                break;
            }
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            model.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const Window& w = train[order[i]];
                GradTape tape;
                ForwardPass fp = model_forward(tape, model, w, opts);
                if (!tape.value(fp.forecast).all_finite()) throw TrainingError("forecast is not finite", epoch);
                Var loss = pinball_loss(tape, fp.forecast, model.spec.quantiles, w.target_future);
                batch_loss += tape.value(loss)(0, 0);
                tape.backward(loss, inv);
            }
            batch_loss *= inv;
            if (!std::isfinite(batch_loss) || batch_loss > 1e6) {
                throw TrainingError("loss diverged (" + std::to_string(batch_loss) + ")", epoch);
            }
            opt.step(params);
            rep.step_loss.push_back(batch_loss);
            epoch_loss += batch_loss;
            ++batches;
            ++rep.steps;
        }
        if (batches == 0) break;
        rep.epoch_train_loss.push_back(epoch_loss / static_cast<double>(batches));
        if (!val.empty()) rep.epoch_val_loss.push_back(evaluate_loss(model, val, opts).mean_loss);
    }

    LossSummary fin = evaluate_loss(model, train, opts);
    if (!std::isfinite(fin.mean_loss)) throw TrainingError("final loss is not finite", rep.epoch_train_loss.size());
    rep.final_train_loss = fin.mean_loss;
    rep.utilization = std::move(fin.utilization);
    rep.routing_events = fin.routing_events;
    rep.fallback_tokens = fin.fallback_tokens;
    rep.final_val_loss = val.empty() ? 0.0 : evaluate_loss(model, val, opts).mean_loss;
    rep.backbone_fingerprint = model.backbone.fingerprint();
    if (rep.backbone_fingerprint != backbone_before || !model.backbone.intact()) {
        throw TrainingError("backbone weights changed during training", rep.epoch_train_loss.size());
    }
    rep.model_fingerprint = model.fingerprint();
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return rep;
}

namespace {

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

}  // namespace

nlohmann::json TrainReport::to_json() const {
    return {{"epoch_train_loss", epoch_train_loss},
            {"epoch_val_loss", epoch_val_loss},
            {"initial_train_loss", initial_train_loss},
            {"final_train_loss", final_train_loss},
            {"initial_val_loss", initial_val_loss},
            {"final_val_loss", final_val_loss},
            {"steps", steps},
            {"utilization", utilization},
            {"routing_events", routing_events},
            {"fallback_tokens", fallback_tokens},
            {"backbone_fingerprint", hex(backbone_fingerprint)},
            {"model_fingerprint", hex(model_fingerprint)}};
}

std::string TrainReport::loss_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,split,loss\n";
    os << "0,train," << initial_train_loss << "\n";
    if (!epoch_val_loss.empty()) os << "0,val," << initial_val_loss << "\n";
    for (std::size_t e = 0; e < epoch_train_loss.size(); ++e) {
        os << e + 1 << ",train," << epoch_train_loss[e] << "\n";
        if (e < epoch_val_loss.size()) os << e + 1 << ",val," << epoch_val_loss[e] << "\n";
    }
    return os.str();
}

std::vector<RoutingDecision> gating_strategy_forward(ForecastModel& model, const Window& w, GatingStrategy strategy,
                                                     std::uint64_t seed) {
    RoutingOptions o;
    o.strategy = strategy;
    o.seed = seed;
    return route_window(model, w, o);
}

}  // namespace covmoe
