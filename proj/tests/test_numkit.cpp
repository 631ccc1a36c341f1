#include <cmath>
#include <functional>
#include <set>

#include "doctest.h"
#include "oracles.hpp"

#include "covmoe/numkit.hpp"

using namespace covmoe;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Matrix m(r, c);
    Rng rng(seed);
    fill_uniform(m, rng, 1.0);
    return m;
}

Var to_scalar(GradTape& t, Var v) {
    const std::size_t c = t.value(v).cols();
    Matrix w(c, 1);
    for (std::size_t i = 0; i < c; ++i) w(i, 0) = 0.3 + 0.1 * static_cast<double>(i);
    return ops::matmul(t, ops::mean_rows(t, v), t.constant(w));
}

// Builds loss = to_scalar(op(P)) for a parameter of the given shape and
// compares tape gradients with central differences.
double check_op(std::size_t r, std::size_t c, const std::function<Var(GradTape&, Var)>& op, std::uint64_t seed) {
    Param p(random_matrix(r, c, seed));
    GradTape tape;
    tape.backward(to_scalar(tape, op(tape, tape.param(p))));
    auto f = [&](std::span<const double> theta) {
        Param q(Matrix(r, c, std::vector<double>(theta.begin(), theta.end())));
        GradTape t;
        return t.value(to_scalar(t, op(t, t.param(q))))(0, 0);
    };
    return grad_check(f, p.value.flat(), p.grad.flat(), 1e-5);
}

}  // namespace

TEST_SUITE("numkit") {
    TEST_CASE("matmul matches the triple-loop oracle") {
        for (std::uint64_t s = 0; s < 20; ++s) {
            const Matrix a = random_matrix(3 + s % 4, 5, s), b = random_matrix(5, 2 + s % 3, s + 100);
            CHECK(oracle::max_abs_diff(matmul(a, b), oracle::loop_matmul(a, b)) < 1e-14);
        }
    }

    TEST_CASE("shape errors") {
        CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
        CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1.0}), ShapeError);
        CHECK_THROWS_AS((Matrix{{1.0, 2.0}, {3.0}}), ShapeError);
        CHECK_THROWS_AS(softmax(std::vector<double>{}), ShapeError);
        GradTape t;
        Var a = t.constant(Matrix(2, 2));
        CHECK_THROWS_AS(t.backward(a), ShapeError);
        CHECK_THROWS_AS(ops::gather_rows(t, a, {2}), ShapeError);
        CHECK_THROWS_AS(ops::scatter_rows(t, a, {0, 5}, 3), ShapeError);
        CHECK_THROWS_AS(ops::add_row(t, a, t.constant(Matrix(1, 3))), ShapeError);
        CHECK_THROWS_AS(ops::concat_cols(t, a, t.constant(Matrix(3, 1))), ShapeError);
    }

    TEST_CASE("transpose") {
        const Matrix a{{1, 2, 3}, {4, 5, 6}};
        const Matrix t = transpose(a);
        CHECK(t.rows() == 3);
        CHECK(t(2, 1) == 6.0);
        CHECK(transpose(t) == a);
    }

    TEST_CASE("softmax is stable and normalized") {
        const auto p = softmax(std::vector<double>{1000.0, 1001.0, 999.0});
        double s = 0.0;
        for (double v : p) s += v;
        CHECK(std::fabs(s - 1.0) < 1e-15);
        CHECK(p[1] > p[0]);
        CHECK_THROWS_AS(softmax(std::vector<double>{0.0, std::nan("")}), NumericError);
    }

    TEST_CASE("rng streams are reproducible and labels independent") {
        Rng a(5), b(5);
        for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
        Rng x = Rng(5).derive("x"), y = Rng(5).derive("y");
        CHECK(x.next_u64() != y.next_u64());
        CHECK(Rng(5).derive(3).next_u64() == Rng(5).derive(3).next_u64());

        Rng r(9);
        std::vector<int> v(50);
        std::iota(v.begin(), v.end(), 0);
        r.shuffle(v);
        CHECK(std::set<int>(v.begin(), v.end()).size() == 50);

        double mean = 0.0;
        Rng g(1);
        for (int i = 0; i < 4000; ++i) {
            const double u = g.uniform();
            CHECK(u >= 0.0);
            CHECK(u < 1.0);
            mean += g.gamma(2.0);
        }
        CHECK(std::fabs(mean / 4000.0 - 2.0) < 0.15);
        for (int i = 0; i < 200; ++i) CHECK(g.below(7) < 7);
    }

    TEST_CASE("fingerprints see every bit") {
        Matrix m(2, 2, 1.0);
        Fnv1a a, b;
        a.matrix(m);
        m(1, 1) = std::nextafter(1.0, 2.0);
        b.matrix(m);
        CHECK(a.digest() != b.digest());
    }

    TEST_CASE("every op passes the finite-difference check") {
        const Matrix w = random_matrix(4, 3, 77), row = random_matrix(1, 4, 78);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::matmul(t, x, t.constant(w)); }, 1) < 1e-8);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::add_row(t, x, t.constant(row)); }, 2) < 1e-8);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::add(t, x, ops::tanh(t, x)); }, 3) < 1e-8);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::scale(t, x, -2.5); }, 4) < 1e-8);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::concat_cols(t, x, ops::tanh(t, x)); }, 5) < 1e-8);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::gather_rows(t, x, {2, 0, 2}); }, 6) < 1e-8);
        CHECK(check_op(3, 4, [&](GradTape& t, Var x) { return ops::scatter_rows(t, x, {4, 0, 4}, 5); }, 7) < 1e-8);
        CHECK(check_op(3, 4,
                       [&](GradTape& t, Var x) {
                           Var e = ops::gather_entries(t, x, {{0, 1}, {2, 3}, {1, 0}});
                           return ops::mul_rowwise(t, ops::gather_rows(t, x, {0, 1, 2}), e);
                       },
                       8) < 1e-8);
        Param w1(random_matrix(3, 5, 9));
        CHECK(check_op(4, 3,
                       [&](GradTape& t, Var x) {
                           MlpVars v{t.param(w1), t.constant(Matrix(1, 5, 0.1)),
                                     t.constant(random_matrix(5, 2, 10)), t.constant(Matrix(1, 2, -0.2))};
                           return mlp_forward(t, v, x);
                       },
                       9) < 1e-8);
    }

    TEST_CASE("frozen params pass gradient through but do not accumulate") {
        Param frozen(random_matrix(3, 3, 1));
        frozen.trainable = false;
        Param live(random_matrix(2, 3, 2));
        GradTape t;
        Var y = ops::matmul(t, t.param(live), t.param(frozen));
        t.backward(to_scalar(t, y));
        CHECK_FALSE(frozen.touched);
        for (double g : frozen.grad.flat()) CHECK(g == 0.0);
        CHECK(live.touched);
        double norm = 0.0;
        for (double g : live.grad.flat()) norm += std::fabs(g);
        CHECK(norm > 0.0);

        live.zero_grad();
        CHECK_FALSE(live.touched);
        for (double g : live.grad.flat()) CHECK(g == 0.0);
    }

    TEST_CASE("backward seed scales gradients and accumulates across tapes") {
        Param p(random_matrix(2, 2, 3));
        for (int i = 0; i < 2; ++i) {
            GradTape t;
            t.backward(to_scalar(t, ops::tanh(t, t.param(p))), 0.5);
        }
        Param q(p.value);
        GradTape t;
        t.backward(to_scalar(t, ops::tanh(t, t.param(q))));
        for (std::size_t i = 0; i < 4; ++i) CHECK(p.grad.flat()[i] == doctest::Approx(q.grad.flat()[i]).epsilon(1e-14));
    }

    TEST_CASE("grad_check rejects a bad epsilon and non-finite objectives") {
        std::vector<double> th{1.0}, g{0.0};
        CHECK_THROWS_AS(grad_check([](std::span<const double>) { return 0.0; }, th, g, 0.0), ConfigError);
        CHECK_THROWS_AS(grad_check([](std::span<const double>) { return 0.0; }, th, g, 1e-2), ConfigError);
        CHECK_THROWS_AS(grad_check([](std::span<const double>) { return INFINITY; }, th, g, 1e-5), NumericError);
        CHECK_THROWS_AS(grad_check([](std::span<const double>) { return 0.0; }, th, std::vector<double>{}, 1e-5),
                        ShapeError);
    }
}
