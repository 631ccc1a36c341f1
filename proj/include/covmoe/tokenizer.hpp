#pragma once

#include <cstddef>
#include <cstdint>

#include "covmoe/datahub.hpp"
#include "covmoe/numkit.hpp"
#include "covmoe/wire.hpp"

namespace covmoe {

/// Per-timestep projection of the d observed variables to an h-wide token,
/// plus a separate embedder for the p covariates that feeds the gates.
struct TokenizerParams {
    Param w_in;   // d x h
    Param b_in;   // 1 x h
    Param w_cov;  // p x h_z
    Param b_cov;  // 1 x h_z

    static TokenizerParams init(std::size_t d, std::size_t h, std::size_t p, std::size_t h_z, Rng rng);

    std::size_t input_width() const noexcept { return w_in.value.rows(); }
    std::size_t token_width() const noexcept { return w_in.value.cols(); }
    std::size_t covariate_width() const noexcept { return w_cov.value.rows(); }
    std::size_t embedding_width() const noexcept { return w_cov.value.cols(); }
    std::size_t param_count() const noexcept;

    void set_trainable(bool on);
    std::uint64_t fingerprint() const;
};

/// Row t = tanh(x_t·W_in + b_in). One token per context timestep.
Var tokenize(GradTape& tape, TokenizerParams& params, const Matrix& context);
Matrix tokenize(const TokenizerParams& params, const Matrix& context);

/// Row t = tanh(z_t·W_cov + b_cov).
Var embed_covariates(GradTape& tape, TokenizerParams& params, const Matrix& cov_rows);
Matrix embed_covariates(const TokenizerParams& params, const Matrix& cov_rows);

inline constexpr std::size_t kTokenizerHeaderBytes = 20;
void write_tokenizer(ByteWriter& w, const TokenizerParams& t);
TokenizerParams read_tokenizer(ByteReader& r);

}  // namespace covmoe
