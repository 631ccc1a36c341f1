#include "covmoe/evalkit.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "covmoe/errors.hpp"

namespace covmoe {

double mase(std::span<const double> point, std::span<const double> target, std::span<const double> insample,
            std::size_t m) {
    if (point.size() != target.size() || target.empty()) throw ShapeError("mase: forecast and target lengths differ");
    if (m == 0 || insample.size() <= m) {
        throw ShapeError("mase: in-sample length " + std::to_string(insample.size()) + " must exceed m=" +
                         std::to_string(m));
    }
    double num = 0.0;
    for (std::size_t t = 0; t < target.size(); ++t) num += std::abs(target[t] - point[t]);
    num /= static_cast<double>(target.size());
    double den = 0.0;
    for (std::size_t t = m; t < insample.size(); ++t) den += std::abs(insample[t] - insample[t - m]);
    den /= static_cast<double>(insample.size() - m);
    if (den == 0.0) return std::numeric_limits<double>::infinity();
    return num / den;
}

WqlTerms wql_terms(const QuantileForecast& f, std::span<const double> target) {
    if (f.values.rows() != target.size() || f.values.cols() != f.levels.size()) {
        throw ShapeError("wql: forecast shape does not match target");
    }
    WqlTerms w;
    for (std::size_t t = 0; t < target.size(); ++t) {
        w.scale += std::abs(target[t]);
        for (std::size_t q = 0; q < f.levels.size(); ++q) {
            const double diff = target[t] - f.values(t, q);
            w.loss += diff >= 0.0 ? f.levels[q] * diff : (f.levels[q] - 1.0) * diff;
        }
    }
    return w;
}

double wql(const QuantileForecast& f, std::span<const double> target) {
    const WqlTerms w = wql_terms(f, target);
    if (w.scale == 0.0) return std::numeric_limits<double>::infinity();
    return 2.0 * w.loss / w.scale;
}

nlohmann::json MetricReport::to_json(bool with_windows) const {
    nlohmann::json j = {{"mase", mase},
                        {"wql", wql},
                        {"n_windows", n_windows},
                        {"seasonality", seasonality},
                        {"mase_excluded", mase_excluded},
                        {"fallback_tokens", fallback_tokens}};
    if (with_windows) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& w : per_window) {
            rows.push_back({{"origin", format_timestamp(w.origin)},
                            {"region", w.region_code},
                            {"mase", std::isfinite(w.mase) ? nlohmann::json(w.mase) : nlohmann::json("inf")},
                            {"wql", std::isfinite(w.wql) ? nlohmann::json(w.wql) : nlohmann::json("inf")}});
        }
        j["windows"] = std::move(rows);
    }
    return j;
}

namespace {

MetricReport finish(MetricReport r, double wql_loss, double wql_scale) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& w : r.per_window) {
        if (std::isfinite(w.mase)) {
            sum += w.mase;
            ++n;
        }
    }
    r.n_windows = r.per_window.size();
    r.mase_excluded = r.n_windows - n;
    r.mase = n ? sum / static_cast<double>(n) : std::numeric_limits<double>::infinity();
    r.wql_sums = {wql_loss, wql_scale};
    r.wql = wql_scale > 0.0 ? 2.0 * wql_loss / wql_scale : std::numeric_limits<double>::infinity();
    return r;
}

}  // namespace

MetricReport evaluate(ForecastModel& model, const std::vector<Window>& windows, const Scaler& scaler,
                      const RoutingOptions& opts, std::size_t m) {
    MetricReport r;
    r.seasonality = m;
    double loss = 0.0, scale = 0.0;
    for (const Window& w : windows) {
        GradTape tape;
        ForwardPass fp = model_forward(tape, model, w, opts);
        for (const auto& d : fp.decisions) r.fallback_tokens += d.fallback_used ? 1 : 0;
        QuantileForecast f{model.spec.quantiles, tape.value(fp.forecast)};
        for (double& x : f.values.flat()) x = scaler.target_from_model(x);
        std::vector<double> y = w.target_future;
        for (double& v : y) v = scaler.target_from_model(v);
        std::vector<double> insample = w.insample_target();
        for (double& v : insample) v = scaler.target_from_model(v);

        const WqlTerms terms = wql_terms(f, y);
        loss += terms.loss;
        scale += terms.scale;
        WindowScore s;
        s.origin = w.origin;
        s.region_code = w.region_code;
        s.mase = mase(f.point(), y, insample, m);
        s.wql = terms.scale > 0.0 ? 2.0 * terms.loss / terms.scale : std::numeric_limits<double>::infinity();
        r.per_window.push_back(s);
    }
    return finish(std::move(r), loss, scale);
}

MetricReport merge_reports(const std::vector<MetricReport>& parts) {
    MetricReport r;
    double loss = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        r.seasonality = parts[i].seasonality;
        r.fallback_tokens += parts[i].fallback_tokens;
        r.per_window.insert(r.per_window.end(), parts[i].per_window.begin(), parts[i].per_window.end());
        loss += parts[i].wql_sums.loss;
        scale += parts[i].wql_sums.scale;
    }
    return finish(std::move(r), loss, scale);
}

// -------------------------------------------------------------- perturbation

std::string_view to_string(PerturbKind k) {
    switch (k) {
        case PerturbKind::none: return "none";
        case PerturbKind::missing: return "missing";
        case PerturbKind::noise: return "noise";
        case PerturbKind::adversarial_shift: return "adversarial-shift";
    }
    return "?";
}

void PerturbSpec::validate() const {
    if (kind == PerturbKind::missing && !(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("perturb: missing fraction must be in (0, 1]");
    }
    if (kind == PerturbKind::noise && !(sigma > 0.0)) throw ConfigError("perturb: sigma must be positive");
}

std::string PerturbSpec::label() const {
    char buf[64];
    switch (kind) {
        case PerturbKind::none: return "none";
        case PerturbKind::missing:
            std::snprintf(buf, sizeof buf, "missing-%g%%", fraction * 100.0);
            return buf;
        case PerturbKind::noise:
            std::snprintf(buf, sizeof buf, "noise-sigma-%g", sigma);
            return buf;
        case PerturbKind::adversarial_shift:
            return "region-swap" + (swap_source.empty() ? std::string() : "-" + swap_source);
    }
    return "?";
}

std::size_t missing_columns(double fraction, std::size_t p) {
    return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(p)));
}

std::vector<Window> perturb(const std::vector<Window>& windows, const PerturbSpec& spec,
                            const std::vector<Window>& swap_pool) {
    spec.validate();
    std::vector<Window> out = windows;
    if (spec.kind == PerturbKind::none || out.empty()) return out;
    const Rng root = Rng(spec.seed).derive("perturb");

    if (spec.kind == PerturbKind::missing) {
        const std::size_t p = out.front().context_cov.cols();
        std::vector<std::size_t> cols(p);
        std::iota(cols.begin(), cols.end(), std::size_t{0});
        Rng r = root.derive("columns");
        r.shuffle(cols);
        cols.resize(missing_columns(spec.fraction, p));
        for (Window& w : out) {
            if (w.context_cov.cols() != p) throw HarnessError("perturb: windows disagree on covariate count");
            if (w.cov_present.size() != p) w.cov_present.assign(p, true);
            for (std::size_t c : cols) {
                w.cov_present[c] = false;
                for (std::size_t t = 0; t < w.context_cov.rows(); ++t) w.context_cov(t, c) = 0.0;
                for (std::size_t k = 0; k < w.future_cov_columns.size(); ++k)
                    if (w.future_cov_columns[k] == c)
                        for (std::size_t t = 0; t < w.future_cov.rows(); ++t) w.future_cov(t, k) = 0.0;
            }
        }
        return out;
    }

    if (spec.kind == PerturbKind::noise) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            Rng r = root.derive("noise").derive(static_cast<std::uint64_t>(out[i].origin)).derive(
                static_cast<std::uint64_t>(out[i].region_code));
            for (double& x : out[i].context_cov.flat()) x += spec.sigma * r.normal();
            for (double& x : out[i].future_cov.flat()) x += spec.sigma * r.normal();
        }
        return out;
    }

    std::map<Timestamp, const Window*> by_origin;
    for (const Window& w : swap_pool)
        if (w.region_code == spec.swap_region) by_origin[w.origin] = &w;
    for (Window& w : out) {
        auto it = by_origin.find(w.origin);
        if (it == by_origin.end()) {
            throw HarnessError("perturb: swap source '" + spec.swap_source + "' has no window at " +
                               format_timestamp(w.origin));
        }
        const Window& src = *it->second;
        if (src.context_cov.rows() != w.context_cov.rows() || src.context_cov.cols() != w.context_cov.cols()) {
            throw HarnessError("perturb: swap source covariates have a different shape");
        }
        w.context_cov = src.context_cov;
        w.future_cov = src.future_cov;
        w.cov_present = src.cov_present;
        w.region_code = src.region_code;
    }
    return out;
}

}  // namespace covmoe
