#include "covmoe/datahub.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "covmoe/errors.hpp"

namespace covmoe {

namespace {

// Howard Hinnant's days_from_civil.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y += m <= 2;
}

bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
    if (pos + len > s.size()) return false;
    for (std::size_t i = pos; i < pos + len; ++i) {
        if (s[i] < '0' || s[i] > '9') return false;
    }
    std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return true;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

std::optional<double> parse_number(std::string_view s) {
    if (s.empty()) return std::nullopt;
    // std::from_chars for double is available in libstdc++ 11.
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

int weekday_monday0(Timestamp ts) {
    std::int64_t days = ts >= 0 ? ts / 86400 : (ts - 86399) / 86400;
    // 1970-01-01 was a Thursday (index 3 with Monday = 0).
    return static_cast<int>(((days + 3) % 7 + 7) % 7);
}

int hour_of_day(Timestamp ts) {
    std::int64_t s = ((ts % 86400) + 86400) % 86400;
    return static_cast<int>(s / 3600);
}

}  // namespace

std::optional<Timestamp> parse_timestamp(std::string_view text) {
    std::string_view s = trim(text);
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
    if (!read_int(s, 0, 4, y) || s.size() < 10 || s[4] != '-' || !read_int(s, 5, 2, mo) ||
        s[7] != '-' || !read_int(s, 8, 2, d)) {
        return std::nullopt;
    }
    std::size_t pos = 10;
    if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
        if (!read_int(s, pos + 1, 2, h) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
            !read_int(s, pos + 4, 2, mi)) {
            return std::nullopt;
        }
        pos += 6;
        if (pos < s.size() && s[pos] == ':') {
            if (!read_int(s, pos + 1, 2, se)) return std::nullopt;
            pos += 3;
        }
    }
    std::int64_t offset = 0;
    if (pos < s.size()) {
        if (s[pos] == 'Z' && pos + 1 == s.size()) {
            pos += 1;
        } else if ((s[pos] == '+' || s[pos] == '-') && s.size() == pos + 6 && s[pos + 3] == ':') {
            int oh, om;
            if (!read_int(s, pos + 1, 2, oh) || !read_int(s, pos + 4, 2, om)) return std::nullopt;
            offset = (s[pos] == '+' ? 1 : -1) * (oh * 3600 + om * 60);
            pos = s.size();
        } else {
            return std::nullopt;
        }
    }
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || se > 60) return std::nullopt;
    const std::int64_t days = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
    std::int64_t ym;
    unsigned mm, dd;
    civil_from_days(days, ym, mm, dd);
    if (dd != static_cast<unsigned>(d)) return std::nullopt;  // e.g. Feb 30
    return days * 86400 + h * 3600 + mi * 60 + se - offset;
}

std::string format_timestamp(Timestamp ts) {
    const std::int64_t days = ts >= 0 ? ts / 86400 : (ts - 86399) / 86400;
    const std::int64_t secs = ts - days * 86400;
    std::int64_t y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lldZ",
                  static_cast<long long>(y), m, d, static_cast<long long>(secs / 3600),
                  static_cast<long long>((secs / 60) % 60), static_cast<long long>(secs % 60));
    return buf;
}

std::vector<double> SeriesFrame::target_series() const {
    std::vector<double> out(length());
    for (std::size_t t = 0; t < length(); ++t) out[t] = values(t, target_idx);
    return out;
}

nlohmann::json CsvSchema::to_json() const {
    return {{"timestamp_column", timestamp_column}, {"target", target},
            {"channels", channels}, {"covariates", covariates},
            {"step_seconds", step_seconds}, {"max_gap_fraction", max_gap_fraction}};
}

CsvSchema CsvSchema::from_json(const nlohmann::json& j) {
    CsvSchema s;
    s.timestamp_column = j.value("timestamp_column", s.timestamp_column);
    if (!j.contains("target")) throw ConfigError("schema: missing 'target'");
    s.target = j.at("target").get<std::string>();
    s.channels = j.value("channels", s.channels);
    s.covariates = j.value("covariates", s.covariates);
    s.step_seconds = j.value("step_seconds", s.step_seconds);
    s.max_gap_fraction = j.value("max_gap_fraction", s.max_gap_fraction);
    if (s.step_seconds <= 0) throw ConfigError("schema: step_seconds must be positive");
    return s;
}

SeriesFrame load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw IngestError("empty file " + path.string(), 1);
    const auto header = split_csv(line);
    auto column = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw IngestError("missing column '" + name + "' in " + path.string(), 1);
    };
    const std::size_t ts_col = column(schema.timestamp_column);
    std::vector<std::size_t> value_cols{column(schema.target)};
    for (const auto& c : schema.channels) value_cols.push_back(column(c));
    std::vector<std::size_t> cov_cols;
    for (const auto& c : schema.covariates) cov_cols.push_back(column(c));

    struct Row {
        Timestamp ts;
        std::vector<double> cells;  // values then covariates; NaN = empty
        std::size_t line;
    };
    std::vector<Row> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() < header.size()) {
            throw IngestError("expected " + std::to_string(header.size()) + " fields", line_no);
        }
        auto ts = parse_timestamp(fields[ts_col]);
        if (!ts) throw IngestError("unparseable timestamp '" + std::string(fields[ts_col]) + "'", line_no);
        Row r{*ts, {}, line_no};
        for (std::size_t c : value_cols) {
            auto v = parse_number(fields[c]);
            if (!v && !fields[c].empty()) throw IngestError("non-numeric value '" + std::string(fields[c]) + "'", line_no);
            r.cells.push_back(v.value_or(std::nan("")));
        }
        for (std::size_t c : cov_cols) {
            auto v = parse_number(fields[c]);
            if (!v && !fields[c].empty()) throw IngestError("non-numeric value '" + std::string(fields[c]) + "'", line_no);
            r.cells.push_back(v.value_or(std::nan("")));
        }
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw IngestError("no data rows in " + path.string(), line_no);

    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.ts < b.ts; });
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].ts == rows[i - 1].ts) {
            throw IngestError("duplicate timestamp " + format_timestamp(rows[i].ts), rows[i].line);
        }
        if ((rows[i].ts - rows[0].ts) % schema.step_seconds != 0) {
            throw IngestError("timestamp off the " + std::to_string(schema.step_seconds) + "s grid",
                              rows[i].line);
        }
    }

    const std::size_t total =
        static_cast<std::size_t>((rows.back().ts - rows.front().ts) / schema.step_seconds) + 1;
    const std::size_t missing = total - rows.size();
    if (static_cast<double>(missing) > schema.max_gap_fraction * static_cast<double>(total)) {
        throw IngestError(std::to_string(missing) + " of " + std::to_string(total) +
                          " hourly rows missing exceeds the gap limit");
    }

    const std::size_t d = value_cols.size();
    const std::size_t p = cov_cols.size();
    SeriesFrame f;
    f.region = path.stem().string();
    f.step_seconds = schema.step_seconds;
    f.target_idx = 0;
    f.channel_names.push_back(schema.target);
    for (const auto& c : schema.channels) f.channel_names.push_back(c);
    f.covariate_names = schema.covariates;
    f.known_in_advance.assign(p, false);
    f.timestamps.resize(total);
    f.values = Matrix(total, d);
    f.covariates = Matrix(total, p);

    std::size_t ri = 0;
    std::vector<double> last(d + p, std::nan(""));
    for (std::size_t t = 0; t < total; ++t) {
        const Timestamp ts = rows.front().ts + static_cast<Timestamp>(t) * schema.step_seconds;
        f.timestamps[t] = ts;
        const bool present = ri < rows.size() && rows[ri].ts == ts;
        if (!present) ++f.filled_gaps;
        for (std::size_t c = 0; c < d + p; ++c) {
            double v = present ? rows[ri].cells[c] : std::nan("");
            if (std::isnan(v)) {
                if (present) ++f.filled_cells;
                v = last[c];
                if (std::isnan(v)) {
                    throw IngestError("leading empty value in column " + std::to_string(c),
                                      present ? rows[ri].line : 0);
                }
            }
            last[c] = v;
            if (c < d) f.values(t, c) = v;
            else f.covariates(t, c - d) = v;
        }
        if (present) ++ri;
    }
    return f;
}

void write_csv(const SeriesFrame& frame, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "timestamp";
    for (const auto& c : frame.channel_names) out << ',' << c;
    for (std::size_t j = 0; j < frame.covariate_count(); ++j) {
        if (!frame.known_in_advance.empty() && frame.known_in_advance[j]) continue;
        out << ',' << frame.covariate_names[j];
    }
    out << '\n';
    char buf[64];
    for (std::size_t t = 0; t < frame.length(); ++t) {
        out << format_timestamp(frame.timestamps[t]);
        for (std::size_t c = 0; c < frame.channels(); ++c) {
            std::snprintf(buf, sizeof buf, ",%.17g", frame.values(t, c));
            out << buf;
        }
        for (std::size_t j = 0; j < frame.covariate_count(); ++j) {
            if (!frame.known_in_advance.empty() && frame.known_in_advance[j]) continue;
            std::snprintf(buf, sizeof buf, ",%.17g", frame.covariates(t, j));
            out << buf;
        }
        out << '\n';
    }
}

SeriesFrame derive_calendar_covariates(SeriesFrame frame) {
    const std::size_t T = frame.length();
    const std::size_t p0 = frame.covariate_count();
    Matrix cov(T, p0 + kCalendarCovariates);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < p0; ++j) cov(t, j) = frame.covariates(t, j);
        const Timestamp ts = frame.timestamps[t];
        const double seconds_of_day = static_cast<double>(((ts % 86400) + 86400) % 86400);
        const double angle = 2.0 * M_PI * seconds_of_day / 86400.0;
        cov(t, p0) = std::sin(angle);
        cov(t, p0 + 1) = std::cos(angle);
        const int dow = weekday_monday0(ts);
        cov(t, p0 + 2 + static_cast<std::size_t>(dow)) = 1.0;
        cov(t, p0 + 9) = dow >= 5 ? 1.0 : 0.0;
    }
    frame.covariates = std::move(cov);
    frame.known_in_advance.resize(p0, false);
    frame.covariate_names.resize(p0);
    frame.covariate_names.push_back("hour_sin");
    frame.covariate_names.push_back("hour_cos");
    for (const char* day : {"dow_mon", "dow_tue", "dow_wed", "dow_thu", "dow_fri", "dow_sat", "dow_sun"})
        frame.covariate_names.push_back(day);
    frame.covariate_names.push_back("weekend");
    frame.known_in_advance.resize(p0 + kCalendarCovariates, true);
    return frame;
}

std::vector<double> Window::insample_target() const {
    std::vector<double> out(context.rows());
    for (std::size_t t = 0; t < context.rows(); ++t) out[t] = context(t, target_idx);
    return out;
}

bool Window::covariates_absent() const noexcept {
    if (context_cov.cols() == 0) return true;
    return std::none_of(cov_present.begin(), cov_present.end(), [](bool b) { return b; });
}

std::vector<Window> make_windows(const SeriesFrame& frame, std::size_t context_len,
                                 std::size_t horizon, std::size_t stride, int region_code) {
    const std::size_t T = frame.length();
    if (context_len == 0 || horizon == 0) throw ConfigError("context length and horizon must be positive");
    if (stride == 0) throw ConfigError("stride must be >= 1");
    if (context_len + horizon > T) {
        throw ConfigError("series of length " + std::to_string(T) + " too short for context " +
                          std::to_string(context_len) + " + horizon " + std::to_string(horizon));
    }
    const std::size_t d = frame.channels();
    const std::size_t p = frame.covariate_count();
    std::vector<std::size_t> known;
    for (std::size_t j = 0; j < p; ++j)
        if (j < frame.known_in_advance.size() && frame.known_in_advance[j]) known.push_back(j);

    const std::size_t count = (T - context_len - horizon) / stride + 1;
    std::vector<Window> out;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t s = w * stride;
        Window win;
        win.context = Matrix(context_len, d);
        win.context_cov = Matrix(context_len, p);
        for (std::size_t t = 0; t < context_len; ++t) {
            for (std::size_t c = 0; c < d; ++c) win.context(t, c) = frame.values(s + t, c);
            for (std::size_t j = 0; j < p; ++j) win.context_cov(t, j) = frame.covariates(s + t, j);
        }
        win.future_cov = Matrix(horizon, known.size());
        win.future_cov_columns = known;
        win.target_future.resize(horizon);
        for (std::size_t t = 0; t < horizon; ++t) {
            const std::size_t row = s + context_len + t;
            win.target_future[t] = frame.values(row, frame.target_idx);
            for (std::size_t k = 0; k < known.size(); ++k) win.future_cov(t, k) = frame.covariates(row, known[k]);
        }
        win.target_idx = frame.target_idx;
        win.origin = frame.timestamps[s];
        win.step_seconds = frame.step_seconds;
        win.region_code = region_code;
        win.cov_present.assign(p, true);
        out.push_back(std::move(win));
    }
    return out;
}

// ----------------------------------------------------------------- partitions

std::string_view to_string(PartitionScheme s) {
    return s == PartitionScheme::by_region ? "by-region" : "dirichlet";
}

PartitionScheme partition_scheme_from_string(std::string_view s) {
    if (s == "by-region") return PartitionScheme::by_region;
    if (s == "dirichlet") return PartitionScheme::dirichlet;
    throw ConfigError("unknown partition scheme '" + std::string(s) + "'");
}

std::vector<std::size_t> dirichlet_sizes(std::size_t total, std::size_t clients, double alpha,
                                         std::uint64_t seed) {
    if (clients == 0) throw ConfigError("dirichlet: zero clients");
    if (!(alpha > 0.0)) throw ConfigError("dirichlet: alpha must be positive");
    Rng rng = Rng(seed).derive("dirichlet");
    std::vector<double> g(clients);
    double sum = 0.0;
    for (double& x : g) {
        x = rng.gamma(alpha);
        sum += x;
    }
    std::vector<std::size_t> sizes(clients);
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < clients; ++k) {
        const double share = g[k] / sum * static_cast<double>(total);
        sizes[k] = static_cast<std::size_t>(std::floor(share));
        assigned += sizes[k];
        rem.emplace_back(share - std::floor(share), k);
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++sizes[rem[i % clients].second];
    // Every client gets at least one item when that is possible.
    if (total >= clients) {
        for (std::size_t k = 0; k < clients; ++k) {
            while (sizes[k] == 0) {
                auto big = std::max_element(sizes.begin(), sizes.end());
                --*big;
                ++sizes[k];
            }
        }
    }
    return sizes;
}

ClientPartition split_chronological(std::string id, int region, std::vector<Window> windows,
                                    const PartitionConfig& cfg) {
    if (windows.size() < 3) throw ConfigError("client " + id + " has fewer than 3 windows");
    const std::size_t n = windows.size();
    std::size_t n_train = static_cast<std::size_t>(std::floor(cfg.train_fraction * static_cast<double>(n)));
    std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 2);
    n_val = std::clamp<std::size_t>(n_val, 1, n - n_train - 1);
    ClientPartition part;
    part.client_id = std::move(id);
    part.region_code = region;
    for (std::size_t i = 0; i < n; ++i) {
        windows[i].region_code = region;
        if (i < n_train) part.train.push_back(std::move(windows[i]));
        else if (i < n_train + n_val) part.val.push_back(std::move(windows[i]));
        else part.test.push_back(std::move(windows[i]));
    }
    return part;
}

std::vector<ClientPartition> partition_clients(const std::vector<SeriesFrame>& frames,
                                               std::size_t clients, PartitionScheme scheme,
                                               const PartitionConfig& cfg) {
    if (clients < 2) throw ConfigError("partition needs at least 2 clients");
    if (cfg.train_fraction <= 0.0 || cfg.val_fraction < 0.0 || cfg.train_fraction + cfg.val_fraction >= 1.0) {
        throw ConfigError("split fractions must leave a non-empty test block");
    }
    std::vector<ClientPartition> out;
    if (scheme == PartitionScheme::by_region) {
        if (clients > frames.size()) {
            throw ConfigError("by-region partition of " + std::to_string(clients) + " clients needs as many frames, got " +
                              std::to_string(frames.size()));
        }
        for (std::size_t k = 0; k < clients; ++k) {
            auto windows = make_windows(frames[k], cfg.context_len, cfg.horizon, cfg.stride, static_cast<int>(k));
            std::string id = frames[k].region.empty() ? "client-" + std::to_string(k) : frames[k].region;
            out.push_back(split_chronological(std::move(id), static_cast<int>(k), std::move(windows), cfg));
        }
        return out;
    }
    if (frames.size() != 1) throw ConfigError("dirichlet partition splits exactly one frame");
    auto windows = make_windows(frames[0], cfg.context_len, cfg.horizon, cfg.stride, 0);
    const auto sizes = dirichlet_sizes(windows.size(), clients, cfg.alpha, cfg.seed);
    std::size_t at = 0;
    for (std::size_t k = 0; k < clients; ++k) {
        std::vector<Window> mine(std::make_move_iterator(windows.begin() + static_cast<std::ptrdiff_t>(at)),
                                 std::make_move_iterator(windows.begin() + static_cast<std::ptrdiff_t>(at + sizes[k])));
        at += sizes[k];
        out.push_back(split_chronological("client-" + std::to_string(k), static_cast<int>(k), std::move(mine), cfg));
    }
    return out;
}

// -------------------------------------------------------------------- scaling

double Scaler::to_model(std::size_t channel, double v) const {
    const auto& c = channels.at(channel);
    return (v - c.offset) / c.scale;
}

double Scaler::from_model(std::size_t channel, double v) const {
    const auto& c = channels.at(channel);
    return v * c.scale + c.offset;
}

nlohmann::json Scaler::to_json() const {
    auto dump = [](const std::vector<ChannelScale>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& c : v) arr.push_back({{"channel", c.channel}, {"offset", c.offset}, {"scale", c.scale}});
        return arr;
    };
    return {{"channels", dump(channels)}, {"covariates", dump(covariates)},
            {"target_idx", target_idx}, {"warnings", warnings}};
}

Scaler Scaler::from_json(const nlohmann::json& j) {
    auto load = [](const nlohmann::json& arr) {
        std::vector<ChannelScale> v;
        for (const auto& e : arr) v.push_back({e.at("channel"), e.at("offset"), e.at("scale")});
        return v;
    };
    Scaler s;
    s.channels = load(j.at("channels"));
    s.covariates = load(j.at("covariates"));
    s.target_idx = j.value("target_idx", std::size_t{0});
    s.warnings = j.value("warnings", std::vector<std::string>{});
    return s;
}

namespace {

ChannelScale fit_column(std::string name, const std::vector<const Matrix*>& blocks, std::size_t col,
                        std::vector<std::string>& warnings) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const Matrix* m : blocks)
        for (std::size_t r = 0; r < m->rows(); ++r) {
            sum += (*m)(r, col);
            ++n;
        }
    const double mean = n ? sum / static_cast<double>(n) : 0.0;
    double ss = 0.0;
    for (const Matrix* m : blocks)
        for (std::size_t r = 0; r < m->rows(); ++r) {
            const double dv = (*m)(r, col) - mean;
            ss += dv * dv;
        }
    const double sd = n ? std::sqrt(ss / static_cast<double>(n)) : 0.0;
    if (!(sd > 1e-12)) {
        warnings.push_back("zero-variance column '" + name + "': scale fixed at 1");
        return {std::move(name), 0.0, 1.0};
    }
    return {std::move(name), mean, sd};
}

}  // namespace

Scaler fit_scaler(const std::vector<Window>& train, const std::vector<std::string>& channel_names,
                  const std::vector<std::string>& covariate_names) {
    if (train.empty()) throw ConfigError("cannot fit scaler on an empty train split");
    Scaler s;
    s.target_idx = train.front().target_idx;
    std::vector<const Matrix*> ctx, cov;
    for (const auto& w : train) {
        ctx.push_back(&w.context);
        cov.push_back(&w.context_cov);
    }
    const std::size_t d = train.front().context.cols();
    const std::size_t p = train.front().context_cov.cols();
    for (std::size_t c = 0; c < d; ++c) {
        std::string name = c < channel_names.size() ? channel_names[c] : "channel_" + std::to_string(c);
        s.channels.push_back(fit_column(std::move(name), ctx, c, s.warnings));
    }
    for (std::size_t j = 0; j < p; ++j) {
        std::string name = j < covariate_names.size() ? covariate_names[j] : "covariate_" + std::to_string(j);
        s.covariates.push_back(fit_column(std::move(name), cov, j, s.warnings));
    }
    return s;
}

Window apply_scaler(const Scaler& s, Window w) {
    for (std::size_t t = 0; t < w.context.rows(); ++t) {
        for (std::size_t c = 0; c < w.context.cols(); ++c) w.context(t, c) = s.to_model(c, w.context(t, c));
        for (std::size_t j = 0; j < w.context_cov.cols(); ++j) {
            const auto& cs = s.covariates.at(j);
            w.context_cov(t, j) = (w.context_cov(t, j) - cs.offset) / cs.scale;
        }
    }
    for (std::size_t t = 0; t < w.future_cov.rows(); ++t)
        for (std::size_t k = 0; k < w.future_cov.cols(); ++k) {
            const auto& cs = s.covariates.at(w.future_cov_columns[k]);
            w.future_cov(t, k) = (w.future_cov(t, k) - cs.offset) / cs.scale;
        }
    for (double& y : w.target_future) y = s.target_to_model(y);
    return w;
}

Window invert_scaler(const Scaler& s, Window w) {
    for (std::size_t t = 0; t < w.context.rows(); ++t) {
        for (std::size_t c = 0; c < w.context.cols(); ++c) w.context(t, c) = s.from_model(c, w.context(t, c));
        for (std::size_t j = 0; j < w.context_cov.cols(); ++j) {
            const auto& cs = s.covariates.at(j);
            w.context_cov(t, j) = w.context_cov(t, j) * cs.scale + cs.offset;
        }
    }
    for (std::size_t t = 0; t < w.future_cov.rows(); ++t)
        for (std::size_t k = 0; k < w.future_cov.cols(); ++k) {
            const auto& cs = s.covariates.at(w.future_cov_columns[k]);
            w.future_cov(t, k) = w.future_cov(t, k) * cs.scale + cs.offset;
        }
    for (double& y : w.target_future) y = s.target_from_model(y);
    return w;
}

ClientPartition normalize(ClientPartition partition, const std::vector<std::string>& channel_names,
                          const std::vector<std::string>& covariate_names) {
    Scaler s = fit_scaler(partition.train, channel_names, covariate_names);
    for (auto* split : {&partition.train, &partition.val, &partition.test})
        for (auto& w : *split) w = apply_scaler(s, std::move(w));
    partition.scaler = std::move(s);
    return partition;
}

// ------------------------------------------------------------------ synthetic

nlohmann::json SyntheticConfig::to_json() const {
    return {{"regions", regions}, {"hours", hours}, {"seed", seed}, {"start", start}, {"noise", noise}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
    SyntheticConfig c;
    c.regions = j.value("regions", c.regions);
    c.hours = j.value("hours", c.hours);
    c.seed = j.value("seed", c.seed);
    c.start = j.value("start", c.start);
    c.noise = j.value("noise", c.noise);
    if (c.regions == 0 || c.hours < 48) throw ConfigError("synthetic: need >= 1 region and >= 48 hours");
    return c;
}

CsvSchema synthetic_schema() {
    CsvSchema s;
    s.target = "price";
    s.channels = {"load"};
    s.covariates = {"temperature", "wind"};
    return s;
}

std::vector<SeriesFrame> make_synthetic_frames(const SyntheticConfig& cfg) {
    static const char* kNames[] = {"BE", "DE", "FR", "NP", "PJM", "ES", "IT", "NL"};
    std::vector<SeriesFrame> frames;
    const Rng root(cfg.seed);
    for (std::size_t r = 0; r < cfg.regions; ++r) {
        Rng rng = root.derive("region").derive(r);
        const double base = 40.0 + 10.0 * static_cast<double>(r);
        const double amp = 8.0 + 4.0 * rng.uniform();
        const double phase = 2.0 * M_PI * (static_cast<double>(r) / static_cast<double>(cfg.regions));
        const double temp_phase = 2.0 * M_PI * rng.uniform();
        const double weekend_drop = 0.15 + 0.2 * rng.uniform();

        SeriesFrame f;
        f.region = r < 8 ? kNames[r] : "R" + std::to_string(r);
        f.step_seconds = 3600;
        f.channel_names = {"price", "load"};
        f.covariate_names = {"temperature", "wind"};
        f.known_in_advance = {false, false};
        f.values = Matrix(cfg.hours, 2);
        f.covariates = Matrix(cfg.hours, 2);
        double wind = 0.5;
        double temp_noise = 0.0;
        for (std::size_t t = 0; t < cfg.hours; ++t) {
            const Timestamp ts = cfg.start + static_cast<Timestamp>(t) * 3600;
            f.timestamps.push_back(ts);
            const double hour = static_cast<double>(hour_of_day(ts));
            const int dow = weekday_monday0(ts);
            temp_noise = 0.9 * temp_noise + 0.3 * rng.normal();
            const double temp = 12.0 + 8.0 * std::sin(2.0 * M_PI * static_cast<double>(t) / (24.0 * 9.0) + temp_phase) +
                                2.0 * std::sin(2.0 * M_PI * (hour - 15.0) / 24.0) + temp_noise;
            wind = std::clamp(wind + 0.08 * rng.normal(), 0.0, 1.0);
            const double daily = std::sin(2.0 * M_PI * hour / 24.0 + phase);
            // Temperature drives the amplitude of the daily cycle; wind lowers the level.
            const double cycle_gain = 1.0 + 0.6 * std::tanh((temp - 12.0) / 5.0);
            const double week = dow >= 5 ? 1.0 - weekend_drop : 1.0;
            const double load = week * (1.0 + 0.3 * daily * cycle_gain) + 0.02 * rng.normal();
            const double price = week * (base + amp * cycle_gain * daily) - 6.0 * wind +
                                 cfg.noise * amp * rng.normal();
            f.values(t, 0) = price;
            f.values(t, 1) = load;
            f.covariates(t, 0) = temp;
            f.covariates(t, 1) = wind;
        }
        frames.push_back(derive_calendar_covariates(std::move(f)));
    }
    return frames;
}

}  // namespace covmoe
