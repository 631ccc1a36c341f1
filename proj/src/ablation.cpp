#include "covmoe/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <sstream>
#include <thread>

#include "covmoe/errors.hpp"

namespace covmoe {

std::string_view to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::expert_count: return "expert-count";
        case AblationAxis::gating_strategy: return "gating-strategy";
        case AblationAxis::perturbation_grid: return "perturbation-grid";
    }
    return "?";
}

AblationAxis ablation_axis_from_string(std::string_view s) {
    for (auto a : {AblationAxis::expert_count, AblationAxis::gating_strategy, AblationAxis::perturbation_grid})
        if (s == to_string(a)) return a;
    throw ConfigError("unknown ablation axis '" + std::string(s) +
                      "' (expected expert-count, gating-strategy or perturbation-grid)");
}

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

AblationRow row_from(std::string setting, const MetricReport& r) {
    AblationRow row{std::move(setting), r.mase, r.wql, r.n_windows, {}};
    row.flags = "fallback_tokens=" + std::to_string(r.fallback_tokens);
    if (r.mase_excluded) row.flags += ";mase_excluded=" + std::to_string(r.mase_excluded);
    if (!std::isfinite(r.mase) || !std::isfinite(r.wql)) row.flags += ";non_finite";
    return row;
}

void run_jobs(std::vector<std::function<void()>>& jobs, bool concurrent) {
    if (!concurrent) {
        for (auto& j : jobs) j();
        return;
    }
    std::vector<std::exception_ptr> errs(jobs.size());
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        threads.emplace_back([&, i] {
            try {
                jobs[i]();
            } catch (...) {
                errs[i] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

}  // namespace

std::string AblationTable::to_csv() const {
    std::ostringstream out;
    out << "setting,mase,wql,n_windows,flags\n";
    for (const auto& r : rows) out << r.setting << ',' << num(r.mase) << ',' << num(r.wql) << ',' << r.n_windows << ',' << r.flags << '\n';
    return out.str();
}

nlohmann::json AblationTable::to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows)
        rows_j.push_back({{"setting", r.setting}, {"mase", r.mase}, {"wql", r.wql}, {"n_windows", r.n_windows}, {"flags", r.flags}});
    return {{"axis", std::string(to_string(axis))}, {"rows", rows_j}};
}

std::vector<PerturbSpec> perturbation_grid(std::uint64_t seed) {
    std::vector<PerturbSpec> g(6);
    g[1].kind = g[2].kind = g[3].kind = PerturbKind::missing;
    g[1].fraction = 0.2;
    g[2].fraction = 0.5;
    g[3].fraction = 1.0;
    g[4].kind = PerturbKind::noise;
    g[4].sigma = 0.1;
    g[5].kind = PerturbKind::adversarial_shift;
    for (std::size_t i = 0; i < g.size(); ++i) g[i].seed = Rng(seed).derive("perturb").derive(i).next_u64();
    return g;
}

AblationTable run_ablation(AblationAxis axis, const ExperimentConfig& cfg, bool concurrent) {
    const Dataset data = build_dataset(cfg, false);
    AblationTable table;
    table.axis = axis;

    if (axis == AblationAxis::expert_count || axis == AblationAxis::gating_strategy) {
        std::vector<std::pair<std::string, ExperimentConfig>> settings;
        if (axis == AblationAxis::expert_count) {
            for (std::size_t n : {4, 8, 16}) {
                ExperimentConfig c = cfg;
                c.model.moe.routed = n;
                c.model.moe.top_k = std::min(c.model.moe.top_k, n);
                settings.emplace_back("N=" + std::to_string(n), c);
            }
        } else {
            for (auto g : {GatingStrategy::covariate_fixed, GatingStrategy::softmax_topk, GatingStrategy::random}) {
                ExperimentConfig c = cfg;
                c.train.strategy = g;
                settings.emplace_back(std::string(to_string(g)), c);
            }
        }
        table.rows.resize(settings.size());
        std::vector<std::function<void()>> jobs;
        for (std::size_t i = 0; i < settings.size(); ++i) {
            jobs.push_back([&, i] {
                CentralRun run = train_centralized(settings[i].second, data);
                table.rows[i] = row_from(settings[i].first, run.test);
            });
        }
        run_jobs(jobs, concurrent);
        return table;
    }

    if (data.clients.size() < 2) throw HarnessError("region swap needs at least two regions");
    const CentralRun base = train_centralized(cfg, data);
    const RoutingOptions opts = routing_for(cfg.train);
    const auto grid = perturbation_grid(cfg.seed);
    table.rows.resize(grid.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        jobs.push_back([&, i] {
            ForecastModel model = base.model;
            std::vector<std::vector<Window>> tests;
            std::string label = grid[i].label();
            for (std::size_t c = 0; c < data.clients.size(); ++c) {
                PerturbSpec spec = grid[i];
                std::vector<Window> pool;
                if (spec.kind == PerturbKind::adversarial_shift) {
                    const auto& src = data.clients[(c + 1) % data.clients.size()];
                    spec.swap_source = src.client_id;
                    spec.swap_region = src.region_code;
                    pool = src.test;
                }
                tests.push_back(perturb(data.clients[c].test, spec, pool));
            }
            if (grid[i].kind == PerturbKind::adversarial_shift) label = "region-swap";
            table.rows[i] = row_from(label, evaluate_clients(model, data.clients, opts, cfg.seasonality, nullptr, &tests));
        });
    }
    run_jobs(jobs, concurrent);
    return table;
}

}  // namespace covmoe
