#include "covmoe/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "covmoe/errors.hpp"

namespace covmoe {

std::vector<double> default_quantiles() {
    return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

void validate_quantiles(const std::vector<double>& levels) {
    if (levels.empty()) throw ConfigError("at least one quantile level is required");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (!(levels[i] > 0.0 && levels[i] < 1.0)) throw ConfigError("quantile levels must lie in (0, 1)");
        if (i > 0 && !(levels[i] > levels[i - 1])) throw ConfigError("quantile levels must be strictly increasing");
    }
}

std::vector<double> QuantileForecast::point() const {
    std::size_t best = 0;
    for (std::size_t q = 1; q < levels.size(); ++q)
        if (std::abs(levels[q] - 0.5) < std::abs(levels[best] - 0.5)) best = q;
    std::vector<double> out(values.rows());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = values(t, best);
    return out;
}

std::size_t BackboneParams::param_count() const noexcept {
    return w_pool.value.size() + w_out.value.size() + b_out.value.size();
}

std::uint64_t BackboneParams::fingerprint() const {
    Fnv1a h;
    h.u64(horizon);
    for (double q : levels) h.f64(q);
    h.matrix(w_pool.value);
    h.matrix(w_out.value);
    h.matrix(b_out.value);
    return h.digest();
}

BackboneParams build_frozen_backbone(std::uint64_t seed, std::size_t h, std::size_t horizon,
                                     std::vector<double> levels) {
    validate_quantiles(levels);
    if (h == 0 || horizon == 0) throw ConfigError("backbone needs positive width and horizon");
    const std::size_t nq = levels.size();
    Rng rng = Rng(seed).derive("backbone");
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));

    Matrix w_pool(h, h);
    Rng rp = rng.derive("w_pool");
    fill_uniform(w_pool, rp, bound);

    Matrix level(h, 1), step(h, horizon), spread(h, nq);
    Rng ra = rng.derive("level");
    Rng rb = rng.derive("step");
    Rng rc = rng.derive("spread");
    fill_uniform(level, ra, bound);
    fill_uniform(step, rb, bound);
    fill_uniform(spread, rc, bound);
    Matrix w_out(h, horizon * nq);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t t = 0; t < horizon; ++t)
            for (std::size_t q = 0; q < nq; ++q) w_out(i, t * nq + q) = level(i, 0) + step(i, t) + spread(i, q);

    BackboneParams b;
    b.w_pool = Param(std::move(w_pool));
    b.w_out = Param(std::move(w_out));
    b.b_out = Param(Matrix(1, horizon * nq));
    for (Param* p : {&b.w_pool, &b.w_out, &b.b_out}) p->trainable = false;
    b.horizon = horizon;
    b.levels = std::move(levels);
    b.stored_fingerprint = b.fingerprint();
    return b;
}

namespace {

// 1 x (H·Q) -> H x Q with each row sorted ascending.
Var reshape_sorted(GradTape& tape, Var flat, std::size_t horizon, std::size_t nq) {
    const Matrix& v = tape.value(flat);
    Matrix out(horizon, nq);
    std::vector<std::size_t> perm(horizon * nq);
    for (std::size_t t = 0; t < horizon; ++t) {
        auto* p = perm.data() + t * nq;
        std::iota(p, p + nq, t * nq);
        std::stable_sort(p, p + nq, [&](std::size_t a, std::size_t b) { return v(0, a) < v(0, b); });
        for (std::size_t q = 0; q < nq; ++q) out(t, q) = v(0, p[q]);
    }
    const std::size_t src = flat.id;
    return tape.record(std::move(out), {src}, [perm = std::move(perm), src, nq](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        Matrix& gi = tp.grad_mut(src);
        for (std::size_t i = 0; i < perm.size(); ++i) gi(0, perm[i]) += g(i / nq, i % nq);
    });
}

}  // namespace

Var backbone_forward(GradTape& tape, BackboneParams& params, Var tokens) {
    if (tape.value(tokens).cols() != params.width() || tape.value(tokens).rows() == 0) {
        throw ShapeError("backbone_forward: tokens must be L x " + std::to_string(params.width()));
    }
    Var pooled = ops::mean_rows(tape, tokens);
    Var hidden = ops::tanh(tape, ops::matmul(tape, pooled, tape.param(params.w_pool)));
    Var flat = ops::add_row(tape, ops::matmul(tape, hidden, tape.param(params.w_out)), tape.param(params.b_out));
    return reshape_sorted(tape, flat, params.horizon, params.levels.size());
}

QuantileForecast backbone_forward(const BackboneParams& params, const Matrix& tokens) {
    if (tokens.cols() != params.width() || tokens.rows() == 0) {
        throw ShapeError("backbone_forward: tokens must be L x " + std::to_string(params.width()));
    }
    const std::size_t h = params.width();
    // Same summation order and 1/L scaling as ops::mean_rows so both paths agree bitwise.
    Matrix pooled(1, h);
    for (std::size_t i = 0; i < tokens.rows(); ++i)
        for (std::size_t j = 0; j < h; ++j) pooled(0, j) += tokens(i, j);
    const double inv = 1.0 / static_cast<double>(tokens.rows());
    for (double& v : pooled.flat()) v *= inv;
    Matrix hidden = matmul(pooled, params.w_pool.value);
    for (double& x : hidden.flat()) x = std::tanh(x);
    Matrix flat = matmul(hidden, params.w_out.value);
    const std::size_t nq = params.levels.size();
    QuantileForecast f;
    f.levels = params.levels;
    f.values = Matrix(params.horizon, nq);
    for (std::size_t t = 0; t < params.horizon; ++t) {
        std::vector<double> row(nq);
        for (std::size_t q = 0; q < nq; ++q) row[q] = flat(0, t * nq + q) + params.b_out.value(0, t * nq + q);
        std::stable_sort(row.begin(), row.end());
        for (std::size_t q = 0; q < nq; ++q) f.values(t, q) = row[q];
    }
    return f;
}

void write_backbone(ByteWriter& w, const BackboneParams& b) {
    w.magic("BKBN");
    w.u32(static_cast<std::uint32_t>(b.width()));
    w.u32(static_cast<std::uint32_t>(b.w_out.value.cols()));
    w.matrix(b.w_pool.value);
    w.matrix(b.w_out.value);
    w.matrix(b.b_out.value);
}

BackboneParams read_backbone(ByteReader& r, std::vector<double> levels) {
    r.expect_magic("BKBN");
    const std::size_t h = r.u32(), out = r.u32();
    if (levels.empty() || out % levels.size() != 0) r.fail("backbone output width does not match quantile levels");
    BackboneParams b;
    b.w_pool = Param(r.matrix(h, h));
    b.w_out = Param(r.matrix(h, out));
    b.b_out = Param(r.matrix(1, out));
    for (Param* p : {&b.w_pool, &b.w_out, &b.b_out}) p->trainable = false;
    b.horizon = out / levels.size();
    b.levels = std::move(levels);
    b.stored_fingerprint = b.fingerprint();
    return b;
}

}  // namespace covmoe
