#pragma once

// Small seeded datasets and models shared by the test binaries.

#include <vector>

#include "covmoe/datahub.hpp"
#include "covmoe/experiment.hpp"
#include "covmoe/trainer.hpp"

namespace fixture {

using namespace covmoe;

inline std::vector<ClientPartition> regions(std::size_t k, std::size_t hours, std::size_t horizon,
                                            double train_fraction = 0.7, double val_fraction = 0.1) {
    SyntheticConfig sc;
    sc.regions = k;
    sc.hours = hours;
    auto frames = make_synthetic_frames(sc);
    PartitionConfig pc;
    pc.context_len = 48;
    pc.horizon = horizon;
    pc.stride = 24;
    pc.train_fraction = train_fraction;
    pc.val_fraction = val_fraction;
    auto parts = partition_clients(frames, k, PartitionScheme::by_region, pc);
    for (auto& p : parts) p = normalize(std::move(p));
    return parts;
}

inline std::vector<Window> concat(const std::vector<ClientPartition>& parts, std::vector<Window> ClientPartition::*split) {
    std::vector<Window> out;
    for (const auto& p : parts) out.insert(out.end(), (p.*split).begin(), (p.*split).end());
    return out;
}

/// h=8, h_ff=8, S=1, C=2, M=4, k=2, |Q|=3.
inline ModelSpec small_spec() {
    ModelSpec s;
    s.h = 8;
    s.h_z = 4;
    s.moe.hidden_ff = 8;
    s.moe.shared = 1;
    s.moe.conditional = 2;
    s.moe.routed = 4;
    s.moe.top_k = 2;
    s.quantiles = {0.1, 0.5, 0.9};
    return s;
}

/// Two synthetic regions, three weeks of hours, as a config document.
inline ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.data.synthetic->regions = 2;
    c.data.synthetic->hours = 24 * 24;
    c.window.horizon = 8;
    c.model = small_spec();
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.federation.clients = 2;
    c.federation.local = c.train;
    c.federation.gate.epochs = 2;
    c.federation.cold_start_budget = 4;
    c.federation.cold_start.epochs = 1;
    return c;
}

}  // namespace fixture
