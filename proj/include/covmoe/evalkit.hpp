#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "covmoe/model.hpp"

namespace covmoe {

/// Mean |y − ŷ| over the horizon divided by the in-sample seasonal naive
/// error mean |y_t − y_{t−m}|. Returns +inf when that denominator is zero.
double mase(std::span<const double> point, std::span<const double> target, std::span<const double> insample,
            std::size_t m = 24);

/// Numerator and denominator of WQL: Σ_{t,q} QL_q and Σ_t |y_t|.
struct WqlTerms {
    double loss = 0.0;
    double scale = 0.0;
};
WqlTerms wql_terms(const QuantileForecast& f, std::span<const double> target);
/// 2·Σ QL_q(y_t, ŷ_{t,q}) / Σ |y_t|; +inf for an all-zero target.
double wql(const QuantileForecast& f, std::span<const double> target);

struct WindowScore {
    Timestamp origin = 0;
    int region_code = 0;
    double mase = 0.0;
    double wql = 0.0;
};

struct MetricReport {
    double mase = 0.0;  // mean over windows with a finite score
    double wql = 0.0;   // pooled: 2·ΣQL / Σ|y| over all windows
    std::size_t n_windows = 0;
    std::size_t seasonality = 24;
    std::size_t mase_excluded = 0;
    std::size_t fallback_tokens = 0;
    WqlTerms wql_sums;  // pooled numerator and denominator
    std::vector<WindowScore> per_window;

    nlohmann::json to_json(bool with_windows = true) const;
};

/// Windows are in model units; forecasts and targets are mapped back through
/// `scaler` before scoring.
MetricReport evaluate(ForecastModel& model, const std::vector<Window>& windows, const Scaler& scaler,
                      const RoutingOptions& opts = {}, std::size_t m = 24);

/// Merges per-client reports: MASE averaged over windows, WQL re-pooled.
MetricReport merge_reports(const std::vector<MetricReport>& parts);

enum class PerturbKind { none, missing, noise, adversarial_shift };
std::string_view to_string(PerturbKind k);

struct PerturbSpec {
    PerturbKind kind = PerturbKind::none;
    double fraction = 0.0;  // missing
    double sigma = 0.0;     // noise
    int swap_region = 0;    // adversarial-shift source region code
    std::string swap_source;
    std::uint64_t seed = 0;

    void validate() const;
    std::string label() const;
};

/// Number of covariate columns a missing-fraction spec drops: round(f·p).
std::size_t missing_columns(double fraction, std::size_t p);

/// `swap_pool` supplies the source region's windows for adversarial shift;
/// they are matched by origin timestamp.
std::vector<Window> perturb(const std::vector<Window>& windows, const PerturbSpec& spec,
                            const std::vector<Window>& swap_pool = {});

}  // namespace covmoe
