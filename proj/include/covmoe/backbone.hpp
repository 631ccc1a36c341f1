#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "covmoe/numkit.hpp"
#include "covmoe/wire.hpp"

namespace covmoe {

/// Quantile levels {0.1, ..., 0.9}.
std::vector<double> default_quantiles();
/// Throws ConfigError unless levels are strictly increasing inside (0, 1).
void validate_quantiles(const std::vector<double>& levels);

struct QuantileForecast {
    std::vector<double> levels;
    Matrix values;  // H x |Q|, non-decreasing along each row

    std::size_t horizon() const noexcept { return values.rows(); }
    /// Median column, or the level closest to 0.5.
    std::vector<double> point() const;
};

/// Frozen stand-in for the pretrained predictor. Mean-pools the tokens,
/// applies tanh(·W_pool), then an affine head reshaped to H x |Q|.
struct BackboneParams {
    Param w_pool;  // h x h
    Param w_out;   // h x (H·|Q|)
    Param b_out;   // 1 x (H·|Q|)
    std::size_t horizon = 0;
    std::vector<double> levels;
    std::uint64_t stored_fingerprint = 0;

    std::size_t width() const noexcept { return w_pool.value.rows(); }
    std::size_t param_count() const noexcept;
    std::uint64_t fingerprint() const;
    /// True when the weights still hash to the value recorded at build time.
    bool intact() const { return fingerprint() == stored_fingerprint; }
};

/// W_out column (t, q) is a + b_t + c_q with a, b_t, c_q drawn independently,
/// so level, horizon profile and quantile spread are each reachable through
/// the pooled state.
BackboneParams build_frozen_backbone(std::uint64_t seed, std::size_t h, std::size_t horizon,
                                     std::vector<double> levels);

/// Returns the H x |Q| forecast node; gradient flows back through the row
/// sort to the tokens.
Var backbone_forward(GradTape& tape, BackboneParams& params, Var tokens);
QuantileForecast backbone_forward(const BackboneParams& params, const Matrix& tokens);

inline constexpr std::size_t kBackboneHeaderBytes = 12;
void write_backbone(ByteWriter& w, const BackboneParams& b);
BackboneParams read_backbone(ByteReader& r, std::vector<double> levels);

}  // namespace covmoe
