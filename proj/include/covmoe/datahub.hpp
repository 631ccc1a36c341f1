#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "covmoe/numkit.hpp"

namespace covmoe {

using Timestamp = std::int64_t;  // seconds since the Unix epoch, UTC

/// Parses ISO-8601 "YYYY-MM-DD[T| ]HH:MM[:SS][Z|±HH:MM]" into UTC seconds.
std::optional<Timestamp> parse_timestamp(std::string_view text);
std::string format_timestamp(Timestamp ts);

/// Timestamped multivariate series with a designated target channel and a
/// covariate table aligned to the same rows.
struct SeriesFrame {
    std::string region;
    std::vector<Timestamp> timestamps;
    Matrix values;  // T x d
    std::size_t target_idx = 0;
    std::vector<std::string> channel_names;
    Matrix covariates;  // T x p
    std::vector<std::string> covariate_names;
    std::vector<bool> known_in_advance;  // per covariate column
    std::int64_t step_seconds = 3600;
    std::size_t filled_gaps = 0;
    std::size_t filled_cells = 0;

    std::size_t length() const noexcept { return timestamps.size(); }
    std::size_t channels() const noexcept { return values.cols(); }
    std::size_t covariate_count() const noexcept { return covariates.cols(); }
    std::vector<double> target_series() const;
};

struct CsvSchema {
    std::string timestamp_column = "timestamp";
    std::string target;
    std::vector<std::string> channels;    // extra forecast channels besides the target
    std::vector<std::string> covariates;  // raw exogenous covariate columns
    std::int64_t step_seconds = 3600;
    double max_gap_fraction = 0.10;

    nlohmann::json to_json() const;
    static CsvSchema from_json(const nlohmann::json& j);
};

SeriesFrame load_csv(const std::filesystem::path& path, const CsvSchema& schema);
void write_csv(const SeriesFrame& frame, const std::filesystem::path& path);

inline constexpr std::size_t kCalendarCovariates = 10;

/// Appends hour-of-day (sin, cos), day-of-week one-hot (Monday first) and a
/// weekend flag.
SeriesFrame derive_calendar_covariates(SeriesFrame frame);

struct Window {
    Matrix context;                       // T_c x d
    Matrix context_cov;                   // T_c x p
    Matrix future_cov;                    // H x p_known
    std::vector<std::size_t> future_cov_columns;  // covariate indices in future_cov
    std::vector<double> target_future;    // H
    std::size_t target_idx = 0;
    Timestamp origin = 0;                 // timestamp of the first context row
    std::int64_t step_seconds = 3600;
    int region_code = 0;
    std::vector<bool> cov_present;        // p flags; false = column dropped

    std::size_t context_length() const noexcept { return context.rows(); }
    std::size_t horizon() const noexcept { return target_future.size(); }
    Timestamp time_at(std::size_t t) const noexcept {
        return origin + static_cast<Timestamp>(t) * step_seconds;
    }
    std::vector<double> insample_target() const;
    bool covariates_absent() const noexcept;
};

std::vector<Window> make_windows(const SeriesFrame& frame, std::size_t context_len,
                                 std::size_t horizon, std::size_t stride, int region_code = 0);

struct ChannelScale {
    std::string channel;
    double offset = 0.0;
    double scale = 1.0;
};

/// Per-channel affine scaling fit on training windows only.
struct Scaler {
    std::vector<ChannelScale> channels;    // d
    std::vector<ChannelScale> covariates;  // p
    std::size_t target_idx = 0;
    std::vector<std::string> warnings;

    double to_model(std::size_t channel, double v) const;
    double from_model(std::size_t channel, double v) const;
    double target_to_model(double v) const { return to_model(target_idx, v); }
    double target_from_model(double v) const { return from_model(target_idx, v); }

    nlohmann::json to_json() const;
    static Scaler from_json(const nlohmann::json& j);
};

struct ClientPartition {
    std::string client_id;
    int region_code = 0;
    std::vector<Window> train;
    std::vector<Window> val;
    std::vector<Window> test;
    std::optional<Scaler> scaler;

    std::size_t window_count() const noexcept { return train.size() + val.size() + test.size(); }
};

enum class PartitionScheme { by_region, dirichlet };
std::string_view to_string(PartitionScheme s);
PartitionScheme partition_scheme_from_string(std::string_view s);

struct PartitionConfig {
    std::size_t context_len = 32;
    std::size_t horizon = 8;
    std::size_t stride = 1;
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    double alpha = 1.0;  // dirichlet concentration
    std::uint64_t seed = 0;
};

/// Chronological train/val/test split of one client's windows; every split
/// gets at least one window.
ClientPartition split_chronological(std::string id, int region, std::vector<Window> windows,
                                    const PartitionConfig& cfg);

/// Dirichlet client sizes for `total` items (largest-remainder rounding).
std::vector<std::size_t> dirichlet_sizes(std::size_t total, std::size_t clients, double alpha,
                                         std::uint64_t seed);

std::vector<ClientPartition> partition_clients(const std::vector<SeriesFrame>& frames,
                                               std::size_t clients, PartitionScheme scheme,
                                               const PartitionConfig& cfg);

Scaler fit_scaler(const std::vector<Window>& train, const std::vector<std::string>& channel_names,
                  const std::vector<std::string>& covariate_names);
Window apply_scaler(const Scaler& s, Window w);
/// Exact inverse of apply_scaler on the numeric fields.
Window invert_scaler(const Scaler& s, Window w);

/// Fits on train, applies to train/val/test. The returned partition carries
/// the scaler record.
ClientPartition normalize(ClientPartition partition,
                          const std::vector<std::string>& channel_names = {},
                          const std::vector<std::string>& covariate_names = {});

// ---------------------------------------------------------------------------
// Seeded synthetic electricity-like regions: daily/weekly sinusoid mixtures
// whose amplitude follows a slow "temperature" covariate.
// ---------------------------------------------------------------------------
struct SyntheticConfig {
    std::size_t regions = 3;
    std::size_t hours = 24 * 40;
    std::uint64_t seed = 11;
    Timestamp start = 1577836800;  // 2020-01-01T00:00:00Z (Wednesday)
    double noise = 0.05;

    nlohmann::json to_json() const;
    static SyntheticConfig from_json(const nlohmann::json& j);
};

/// Schema of the synthetic frames (target "price", one channel "load",
/// covariates "temperature" and "wind").
CsvSchema synthetic_schema();
std::vector<SeriesFrame> make_synthetic_frames(const SyntheticConfig& cfg);

}  // namespace covmoe
