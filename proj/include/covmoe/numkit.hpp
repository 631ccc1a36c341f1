#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace covmoe {

// ---------------------------------------------------------------------------
// Dense row-major matrix of doubles.
// ---------------------------------------------------------------------------
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix row_vector(std::span<const double> v);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> flat() noexcept { return data_; }
    std::span<const double> flat() const noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    void fill(double v);
    bool all_finite() const noexcept;

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// a·b with a fixed left-to-right accumulation order over the inner index.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// Numerically stable softmax (max-subtraction).
std::vector<double> softmax(std::span<const double> v);

// ---------------------------------------------------------------------------
// Hashing and fingerprints.
// ---------------------------------------------------------------------------

/// FNV-1a, 64 bit. Incremental so callers can fold several buffers together.
class Fnv1a {
public:
    void bytes(const void* data, std::size_t n) noexcept;
    void u64(std::uint64_t v) noexcept;
    void f64(double v) noexcept;
    void text(std::string_view s) noexcept;
    void matrix(const Matrix& m) noexcept;
    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// ---------------------------------------------------------------------------
// Counter-based PRNG: output i is splitmix64(key + i * golden). Streams never
// depend on how many draws other components made.
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : key_(splitmix64(seed)) {}

    /// Independent stream for a named component.
    Rng derive(std::string_view label) const noexcept;
    Rng derive(std::uint64_t salt) const noexcept;

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) noexcept;
    double normal() noexcept;
    /// Marsaglia-Tsang gamma(shape, 1).
    double gamma(double shape) noexcept;

    template <class T>
    void shuffle(std::vector<T>& v) noexcept {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t counter() const noexcept { return counter_; }

private:
    Rng(std::uint64_t key, int) noexcept : key_(key) {}
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Fills with Uniform(-bound, bound).
void fill_uniform(Matrix& m, Rng& rng, double bound);

// ---------------------------------------------------------------------------
// Trainable tensor. Gradients accumulate into `grad` when the parameter is
// bound to a tape and `trainable` is set; `touched` records whether any
// backward pass reached it since the last reset.
// ---------------------------------------------------------------------------
struct Param {
    Matrix value;
    Matrix grad;
    bool trainable = true;
    bool touched = false;

    Param() = default;
    explicit Param(Matrix v) : value(std::move(v)), grad(value.rows(), value.cols()) {}

    void zero_grad();
};

// ---------------------------------------------------------------------------
// Reverse-mode tape over Matrix values. Nodes are appended in evaluation
// order; backward() walks them once in reverse.
// ---------------------------------------------------------------------------
class GradTape;

struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

class GradTape {
public:
    using BackwardFn = std::function<void(GradTape&, std::size_t)>;

    Var constant(Matrix value);
    Var param(Param& p);

    const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }

    /// Appends an op node. `parents` lists inputs that may receive gradient.
    Var record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward);

    /// Gradient buffer of a node, allocated on first use.
    Matrix& grad_mut(std::size_t id);
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    const Matrix& value_at(std::size_t id) const { return nodes_[id].value; }

    /// Seeds d(loss)/d(loss) = seed and propagates to every bound parameter.
    void backward(Var loss, double seed = 1.0);

    std::size_t size() const noexcept { return nodes_.size(); }
    /// Number of nodes whose backward function ran during the last backward().
    std::size_t visited() const noexcept { return visited_; }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool has_grad = false;
        bool needs_grad = false;
        BackwardFn backward;
        Param* sink = nullptr;
    };
    std::vector<Node> nodes_;
    std::size_t visited_ = 0;
};

namespace ops {

Var matmul(GradTape& t, Var a, Var b);
Var add(GradTape& t, Var a, Var b);
/// x (n×c) plus a 1×c row broadcast over rows.
Var add_row(GradTape& t, Var x, Var row);
Var tanh(GradTape& t, Var x);
Var scale(GradTape& t, Var x, double s);
/// 1×c mean over rows.
Var mean_rows(GradTape& t, Var x);
Var concat_cols(GradTape& t, Var a, Var b);
Var gather_rows(GradTape& t, Var x, std::vector<std::size_t> rows);
/// Scatter-add rows of x (n×c) into an out_rows×c zero matrix at `rows`.
Var scatter_rows(GradTape& t, Var x, std::vector<std::size_t> rows, std::size_t out_rows);
/// Gathers single entries (row, col) into an n×1 column.
Var gather_entries(GradTape& t, Var x, std::vector<std::pair<std::size_t, std::size_t>> at);
/// Scales row i of x (n×c) by column entry w(i,0).
Var mul_rowwise(GradTape& t, Var x, Var w);

}  // namespace ops

/// Weights of a two-layer tanh perceptron already placed on a tape.
struct MlpVars {
    Var w1, b1, w2, b2;
};

/// tanh(x·W1 + b1)·W2 + b2.
Var mlp_forward(GradTape& tape, const MlpVars& w, Var x);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> theta, std::span<const double> analytic, double eps);

}  // namespace covmoe
