#include "covmoe/numkit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "covmoe/errors.hpp"

namespace covmoe {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::ingest: return "ingest";
        case ErrorKind::config: return "config";
        case ErrorKind::routing: return "routing";
        case ErrorKind::training: return "training";
        case ErrorKind::protocol: return "protocol";
        case ErrorKind::harness: return "harness";
        case ErrorKind::checkpoint: return "checkpoint";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
    }
}

}  // namespace

// --------------------------------------------------------------------- Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
    }
    Matrix c(a.rows(), b.cols());
    const std::size_t n = a.cols();
    const std::size_t m = b.cols();
    // i-k-j order: each c(i,j) still accumulates its k terms strictly in order.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i).data();
        const double* ai = a.row(i).data();
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = ai[k];
            const double* bk = b.row(k).data();
            for (std::size_t j = 0; j < m; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

std::vector<double> softmax(std::span<const double> v) {
    if (v.empty()) throw ShapeError("softmax of empty vector");
    for (double x : v) {
        if (std::isnan(x)) throw NumericError("softmax input contains NaN");
    }
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

// -------------------------------------------------------------------- hashing

void Fnv1a::bytes(const void* data, std::size_t n) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        state_ ^= p[i];
        state_ *= 0x100000001b3ULL;
    }
}

void Fnv1a::u64(std::uint64_t v) noexcept {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
}

void Fnv1a::f64(double v) noexcept { u64(std::bit_cast<std::uint64_t>(v)); }

void Fnv1a::text(std::string_view s) noexcept {
    u64(s.size());
    bytes(s.data(), s.size());
}

void Fnv1a::matrix(const Matrix& m) noexcept {
    u64(m.rows());
    u64(m.cols());
    for (double x : m.flat()) f64(x);
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// ------------------------------------------------------------------------ Rng

Rng Rng::derive(std::string_view label) const noexcept {
    Fnv1a h;
    h.u64(key_);
    h.text(label);
    return Rng(splitmix64(h.digest()), 0);
}

Rng Rng::derive(std::uint64_t salt) const noexcept {
    return Rng(splitmix64(key_ ^ splitmix64(salt + 0x632be59bd9b4e019ULL)), 0);
}

std::uint64_t Rng::next_u64() noexcept {
    return splitmix64(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL);
}

double Rng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::size_t Rng::below(std::size_t n) noexcept {
    if (n <= 1) return 0;
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
}

double Rng::normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::gamma(double shape) noexcept {
    if (shape < 1.0) {
        const double u = uniform();
        return gamma(shape + 1.0) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

void fill_uniform(Matrix& m, Rng& rng, double bound) {
    for (double& x : m.flat()) x = rng.uniform(-bound, bound);
}

void Param::zero_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
        grad = Matrix(value.rows(), value.cols());
    } else {
        grad.fill(0.0);
    }
    touched = false;
}

// ----------------------------------------------------------------------- tape

Var GradTape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var GradTape::param(Param& p) {
    Node n;
    n.value = p.value;
    n.needs_grad = p.trainable;
    n.sink = p.trainable ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var GradTape::record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (std::size_t p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Matrix& GradTape::grad_mut(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Matrix(n.value.rows(), n.value.cols());
        n.has_grad = true;
    }
    return n.grad;
}

void GradTape::backward(Var loss, double seed) {
    const Matrix& lv = nodes_.at(loss.id).value;
    if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward from non-scalar node");
    grad_mut(loss.id)(0, 0) = seed;
    visited_ = 0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.needs_grad) continue;
        ++visited_;
        if (n.backward) n.backward(*this, i);
        if (n.sink) {
            Param& p = *n.sink;
            if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
                p.grad = Matrix(p.value.rows(), p.value.cols());
            }
            auto dst = p.grad.flat();
            auto src = n.grad.flat();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            p.touched = true;
        }
    }
}

// ------------------------------------------------------------------------ ops

namespace ops {

Var matmul(GradTape& t, Var a, Var b) {
    Matrix out = covmoe::matmul(t.value(a), t.value(b));
    const std::size_t ia = a.id, ib = b.id;
    return t.record(std::move(out), {ia, ib}, [ia, ib](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        const Matrix& av = tp.value_at(ia);
        const Matrix& bv = tp.value_at(ib);
        if (tp.needs_grad(ia)) {
            Matrix& ga = tp.grad_mut(ia);
            for (std::size_t i = 0; i < av.rows(); ++i)
                for (std::size_t k = 0; k < av.cols(); ++k) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < bv.cols(); ++j) s += g(i, j) * bv(k, j);
                    ga(i, k) += s;
                }
        }
        if (tp.needs_grad(ib)) {
            Matrix& gb = tp.grad_mut(ib);
            for (std::size_t i = 0; i < av.rows(); ++i)
                for (std::size_t k = 0; k < av.cols(); ++k) {
                    const double aik = av(i, k);
                    for (std::size_t j = 0; j < bv.cols(); ++j) gb(k, j) += aik * g(i, j);
                }
        }
    });
}

Var add(GradTape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Matrix out = av;
    for (std::size_t k = 0; k < out.size(); ++k) out.flat()[k] += bv.flat()[k];
    const std::size_t ia = a.id, ib = b.id;
    return t.record(std::move(out), {ia, ib}, [ia, ib](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        for (std::size_t p : {ia, ib}) {
            if (!tp.needs_grad(p)) continue;
            auto dst = tp.grad_mut(p).flat();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g.flat()[k];
        }
    });
}

Var add_row(GradTape& t, Var x, Var row) {
    const Matrix& xv = t.value(x);
    const Matrix& rv = t.value(row);
    if (rv.rows() != 1 || rv.cols() != xv.cols()) {
        throw ShapeError("add_row: " + shape_str(xv) + " + " + shape_str(rv));
    }
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
    const std::size_t ix = x.id, ir = row.id;
    return t.record(std::move(out), {ix, ir}, [ix, ir](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        if (tp.needs_grad(ix)) {
            auto dst = tp.grad_mut(ix).flat();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g.flat()[k];
        }
        if (tp.needs_grad(ir)) {
            Matrix& gr = tp.grad_mut(ir);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
        }
    });
}

Var tanh(GradTape& t, Var x) {
    Matrix out = t.value(x);
    for (double& v : out.flat()) v = std::tanh(v);
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        const Matrix& y = tp.value_at(self);
        auto dst = tp.grad_mut(ix).flat();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            const double yk = y.flat()[k];
            dst[k] += g.flat()[k] * (1.0 - yk * yk);
        }
    });
}

Var scale(GradTape& t, Var x, double s) {
    Matrix out = t.value(x);
    for (double& v : out.flat()) v *= s;
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix, s](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        auto dst = tp.grad_mut(ix).flat();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += s * g.flat()[k];
    });
}

Var mean_rows(GradTape& t, Var x) {
    const Matrix& xv = t.value(x);
    if (xv.rows() == 0) throw ShapeError("mean_rows of empty matrix");
    Matrix out(1, xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j) out(0, j) += xv(i, j);
    const double inv = 1.0 / static_cast<double>(xv.rows());
    for (double& v : out.flat()) v *= inv;
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix, inv](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        Matrix& gx = tp.grad_mut(ix);
        for (std::size_t i = 0; i < gx.rows(); ++i)
            for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += inv * g(0, j);
    });
}

Var concat_cols(GradTape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    if (av.rows() != bv.rows()) throw ShapeError("concat_cols row mismatch");
    Matrix out(av.rows(), av.cols() + bv.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) = av(i, j);
        for (std::size_t j = 0; j < bv.cols(); ++j) out(i, av.cols() + j) = bv(i, j);
    }
    const std::size_t ia = a.id, ib = b.id, ca = av.cols();
    return t.record(std::move(out), {ia, ib}, [ia, ib, ca](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        if (tp.needs_grad(ia)) {
            Matrix& ga = tp.grad_mut(ia);
            for (std::size_t i = 0; i < ga.rows(); ++i)
                for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(i, j);
        }
        if (tp.needs_grad(ib)) {
            Matrix& gb = tp.grad_mut(ib);
            for (std::size_t i = 0; i < gb.rows(); ++i)
                for (std::size_t j = 0; j < gb.cols(); ++j) gb(i, j) += g(i, ca + j);
        }
    });
}

Var gather_rows(GradTape& t, Var x, std::vector<std::size_t> rows) {
    const Matrix& xv = t.value(x);
    Matrix out(rows.size(), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.rows()) throw ShapeError("gather_rows index out of range");
        auto src = xv.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix},
                    [ix, rows = std::move(rows)](GradTape& tp, std::size_t self) {
                        const Matrix& g = tp.grad(Var{self});
                        Matrix& gx = tp.grad_mut(ix);
                        for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t j = 0; j < g.cols(); ++j) gx(rows[i], j) += g(i, j);
                    });
}

Var scatter_rows(GradTape& t, Var x, std::vector<std::size_t> rows, std::size_t out_rows) {
    const Matrix& xv = t.value(x);
    if (rows.size() != xv.rows()) throw ShapeError("scatter_rows index count mismatch");
    Matrix out(out_rows, xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= out_rows) throw ShapeError("scatter_rows index out of range");
        for (std::size_t j = 0; j < xv.cols(); ++j) out(rows[i], j) += xv(i, j);
    }
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix},
                    [ix, rows = std::move(rows)](GradTape& tp, std::size_t self) {
                        const Matrix& g = tp.grad(Var{self});
                        Matrix& gx = tp.grad_mut(ix);
                        for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(rows[i], j);
                    });
}

Var gather_entries(GradTape& t, Var x, std::vector<std::pair<std::size_t, std::size_t>> at) {
    const Matrix& xv = t.value(x);
    Matrix out(at.size(), 1);
    for (std::size_t i = 0; i < at.size(); ++i) {
        if (at[i].first >= xv.rows() || at[i].second >= xv.cols()) {
            throw ShapeError("gather_entries index out of range");
        }
        out(i, 0) = xv(at[i].first, at[i].second);
    }
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix},
                    [ix, at = std::move(at)](GradTape& tp, std::size_t self) {
                        const Matrix& g = tp.grad(Var{self});
                        Matrix& gx = tp.grad_mut(ix);
                        for (std::size_t i = 0; i < at.size(); ++i)
                            gx(at[i].first, at[i].second) += g(i, 0);
                    });
}

Var mul_rowwise(GradTape& t, Var x, Var w) {
    const Matrix& xv = t.value(x);
    const Matrix& wv = t.value(w);
    if (wv.rows() != xv.rows() || wv.cols() != 1) {
        throw ShapeError("mul_rowwise: " + shape_str(xv) + " by " + shape_str(wv));
    }
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= wv(i, 0);
    const std::size_t ix = x.id, iw = w.id;
    return t.record(std::move(out), {ix, iw}, [ix, iw](GradTape& tp, std::size_t self) {
        const Matrix& g = tp.grad(Var{self});
        const Matrix& xv2 = tp.value_at(ix);
        const Matrix& wv2 = tp.value_at(iw);
        if (tp.needs_grad(ix)) {
            Matrix& gx = tp.grad_mut(ix);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j) * wv2(i, 0);
        }
        if (tp.needs_grad(iw)) {
            Matrix& gw = tp.grad_mut(iw);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j) * xv2(i, j);
                gw(i, 0) += s;
            }
        }
    });
}

}  // namespace ops

Var mlp_forward(GradTape& tape, const MlpVars& w, Var x) {
    const Matrix& xv = tape.value(x);
    const Matrix& w1 = tape.value(w.w1);
    const Matrix& w2 = tape.value(w.w2);
    if (xv.cols() != w1.rows() || w1.cols() != w2.rows() ||
        tape.value(w.b1).cols() != w1.cols() || tape.value(w.b2).cols() != w2.cols()) {
        throw ShapeError("mlp_forward: incompatible weight chain for input " + shape_str(xv));
    }
    Var hidden = ops::tanh(tape, ops::add_row(tape, ops::matmul(tape, x, w.w1), w.b1));
    return ops::add_row(tape, ops::matmul(tape, hidden, w.w2), w.b2);
}

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> theta, std::span<const double> analytic, double eps) {
    if (!(eps > 0.0 && eps <= 1e-3)) throw ConfigError("grad_check eps must be in (0, 1e-3]");
    if (analytic.size() != theta.size()) throw ShapeError("grad_check: analytic size mismatch");
    std::vector<double> probe(theta.begin(), theta.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: non-finite objective at coordinate " + std::to_string(i));
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace covmoe
