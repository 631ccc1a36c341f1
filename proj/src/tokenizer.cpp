#include "covmoe/tokenizer.hpp"

#include <cmath>

#include "covmoe/errors.hpp"

namespace covmoe {

TokenizerParams TokenizerParams::init(std::size_t d, std::size_t h, std::size_t p, std::size_t h_z, Rng rng) {
    TokenizerParams t;
    Matrix w_in(d, h), w_cov(p, h_z);
    Rng a = rng.derive("w_in");
    Rng b = rng.derive("w_cov");
    fill_uniform(w_in, a, d ? 1.0 / std::sqrt(static_cast<double>(d)) : 0.0);
    fill_uniform(w_cov, b, p ? 1.0 / std::sqrt(static_cast<double>(p)) : 0.0);
    t.w_in = Param(std::move(w_in));
    t.b_in = Param(Matrix(1, h));
    t.w_cov = Param(std::move(w_cov));
    t.b_cov = Param(Matrix(1, h_z));
    return t;
}

std::size_t TokenizerParams::param_count() const noexcept {
    return w_in.value.size() + b_in.value.size() + w_cov.value.size() + b_cov.value.size();
}

void TokenizerParams::set_trainable(bool on) {
    for (Param* p : {&w_in, &b_in, &w_cov, &b_cov}) p->trainable = on;
}

std::uint64_t TokenizerParams::fingerprint() const {
    Fnv1a h;
    for (const Param* p : {&w_in, &b_in, &w_cov, &b_cov}) h.matrix(p->value);
    return h.digest();
}

namespace {

void check_width(const Matrix& rows, std::size_t expect, const char* what) {
    if (rows.cols() != expect) {
        throw ShapeError(std::string(what) + ": input has " + std::to_string(rows.cols()) +
                         " columns, parameters expect " + std::to_string(expect));
    }
}

Matrix affine_tanh(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix out = matmul(x, w);
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = std::tanh(out(i, j) + b(0, j));
    return out;
}

}  // namespace

Var tokenize(GradTape& tape, TokenizerParams& params, const Matrix& context) {
    check_width(context, params.input_width(), "tokenize");
    Var x = tape.constant(context);
    Var z = ops::add_row(tape, ops::matmul(tape, x, tape.param(params.w_in)), tape.param(params.b_in));
    return ops::tanh(tape, z);
}

Matrix tokenize(const TokenizerParams& params, const Matrix& context) {
    check_width(context, params.input_width(), "tokenize");
    return affine_tanh(context, params.w_in.value, params.b_in.value);
}

Var embed_covariates(GradTape& tape, TokenizerParams& params, const Matrix& cov_rows) {
    check_width(cov_rows, params.covariate_width(), "embed_covariates");
    Var x = tape.constant(cov_rows);
    Var z = ops::add_row(tape, ops::matmul(tape, x, tape.param(params.w_cov)), tape.param(params.b_cov));
    return ops::tanh(tape, z);
}

Matrix embed_covariates(const TokenizerParams& params, const Matrix& cov_rows) {
    check_width(cov_rows, params.covariate_width(), "embed_covariates");
    return affine_tanh(cov_rows, params.w_cov.value, params.b_cov.value);
}

void write_tokenizer(ByteWriter& w, const TokenizerParams& t) {
    w.magic("TOKN");
    for (std::size_t v : {t.input_width(), t.token_width(), t.covariate_width(), t.embedding_width()})
        w.u32(static_cast<std::uint32_t>(v));
    for (const Param* p : {&t.w_in, &t.b_in, &t.w_cov, &t.b_cov}) w.matrix(p->value);
}

TokenizerParams read_tokenizer(ByteReader& r) {
    r.expect_magic("TOKN");
    const std::size_t d = r.u32(), h = r.u32(), p = r.u32(), h_z = r.u32();
    TokenizerParams t;
    t.w_in = Param(r.matrix(d, h));
    t.b_in = Param(r.matrix(1, h));
    t.w_cov = Param(r.matrix(p, h_z));
    t.b_cov = Param(r.matrix(1, h_z));
    return t;
}

}  // namespace covmoe
