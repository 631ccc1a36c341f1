#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "covmoe/evalkit.hpp"

using namespace covmoe;

namespace {

std::vector<double> random_vec(Rng& r, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (double& x : v) x = r.uniform(lo, hi);
    return v;
}

}  // namespace

TEST_SUITE("evalkit") {
    TEST_CASE("MASE hand example and edge cases") {
        const std::vector<double> insample{1, 3, 2, 5}, y{2, 3}, yhat{3, 3};
        CHECK(mase(yhat, y, insample, 1) == 0.25);
        CHECK(mase(y, y, insample, 1) == 0.0);
        CHECK(std::isinf(mase(yhat, y, std::vector<double>{4, 4, 4}, 1)));
        CHECK_THROWS_AS(mase(yhat, y, std::vector<double>{1, 2}, 2), ShapeError);
        CHECK_THROWS_AS(mase(std::vector<double>{1}, y, insample, 1), ShapeError);
    }

    TEST_CASE("WQL hand example and edge cases") {
        QuantileForecast f{{0.5}, Matrix{{1.0}}};
        CHECK(wql(f, std::vector<double>{2.0}) == 0.5);
        QuantileForecast perfect{{0.1, 0.9}, Matrix{{2.0, 2.0}}};
        CHECK(wql(perfect, std::vector<double>{2.0}) == 0.0);
        CHECK(std::isinf(wql(f, std::vector<double>{0.0})));
        CHECK_THROWS_AS(wql(f, std::vector<double>{1.0, 2.0}), ShapeError);
    }

    TEST_CASE("metrics match brute-force oracles and are scale invariant") {
        Rng r(99);
        for (int i = 0; i < 100; ++i) {
            const std::size_t H = 1 + r.below(12), m = 1 + r.below(6);
            const auto insample = random_vec(r, m + 1 + r.below(30), -5, 5);
            const auto y = random_vec(r, H, -5, 5), yhat = random_vec(r, H, -5, 5);
            const double a = mase(yhat, y, insample, m);
            CHECK(std::fabs(a - oracle::mase(yhat, y, insample, m)) < 1e-12);

            const std::vector<double> levels{0.1, 0.3, 0.5, 0.9};
            QuantileForecast f{levels, Matrix(H, levels.size())};
            for (double& v : f.values.flat()) v = r.uniform(-5, 5);
            const double w = wql(f, y);
            CHECK(std::fabs(w - oracle::wql(levels, f.values, y)) < 1e-12);

            const double c = r.uniform(0.1, 10.0);
            auto scale = [c](std::vector<double> v) {
                for (double& x : v) x *= c;
                return v;
            };
            CHECK(std::fabs(mase(scale(yhat), scale(y), scale(insample), m) - a) < 1e-12);
            QuantileForecast fc = f;
            for (double& v : fc.values.flat()) v *= c;
            CHECK(std::fabs(wql(fc, scale(y)) - w) < 1e-12);
            // Negative scale flips quantile order; MASE alone is sign-invariant.
            const double neg = -c;
            auto nscale = [neg](std::vector<double> v) {
                for (double& x : v) x *= neg;
                return v;
            };
            CHECK(std::fabs(mase(nscale(yhat), nscale(y), nscale(insample), m) - a) < 1e-12);
        }
    }

    TEST_CASE("evaluate, merge and the excluded-window count") {
        auto parts = fixture::regions(2, 24 * 30, 8);
        ForecastModel model = ForecastModel::init(fixture::small_spec(), 2, 12, 8, 2, 1);
        const MetricReport a = evaluate(model, parts[0].test, *parts[0].scaler);
        const MetricReport b = evaluate(model, parts[1].test, *parts[1].scaler);
        CHECK(a.n_windows == parts[0].test.size());
        CHECK(a.per_window.size() == a.n_windows);
        CHECK(a.mase >= 0.0);
        CHECK(std::isfinite(a.wql));
        const MetricReport ab = merge_reports({a, b});
        CHECK(ab.n_windows == a.n_windows + b.n_windows);
        CHECK(ab.wql == doctest::Approx(2.0 * (a.wql_sums.loss + b.wql_sums.loss) / (a.wql_sums.scale + b.wql_sums.scale)));
        double mean = 0.0;
        for (const auto* r : {&a, &b})
            for (const auto& w : r->per_window) mean += w.mase;
        CHECK(ab.mase == doctest::Approx(mean / static_cast<double>(ab.n_windows)));
        CHECK(a.to_json(false).contains("mase"));
        CHECK_FALSE(a.to_json(false).contains("windows"));

        // A flat in-sample history makes that window's MASE undefined.
        auto flat = parts[0].test;
        for (std::size_t t = 0; t < flat[0].context.rows(); ++t) flat[0].context(t, 0) = 1.0;
        const MetricReport ex = evaluate(model, flat, *parts[0].scaler);
        CHECK(ex.mase_excluded == 1);
        CHECK(std::isfinite(ex.mase));
    }

    TEST_CASE("missing covariates drop whole columns") {
        const auto parts = fixture::regions(2, 24 * 30, 8);
        const std::size_t p = parts[0].test[0].context_cov.cols();
        for (double f : {0.2, 0.5, 1.0}) {
            PerturbSpec s;
            s.kind = PerturbKind::missing;
            s.fraction = f;
            s.seed = 4;
            const auto out = perturb(parts[0].test, s);
            const std::size_t want = missing_columns(f, p);
            CHECK(want == static_cast<std::size_t>(std::llround(f * static_cast<double>(p))));
            for (const auto& w : out) {
                std::size_t absent = 0;
                for (bool b : w.cov_present) absent += !b;
                CHECK(absent == want);
                CHECK(w.target_future == parts[0].test[0].target_future);
                for (std::size_t c = 0; c < p; ++c)
                    if (!w.cov_present[c]) CHECK(w.context_cov(0, c) == 0.0);
                break;
            }
        }
        PerturbSpec all;
        all.kind = PerturbKind::missing;
        all.fraction = 1.0;
        ForecastModel model = ForecastModel::init(fixture::small_spec(), 2, 12, 8, 2, 1);
        for (const auto& w : perturb(parts[0].test, all)) {
            CHECK(w.covariates_absent());
            for (const auto& d : route_window(model, w)) CHECK(d.fallback_used);
        }
    }

    TEST_CASE("noise is seeded and never touches targets") {
        const auto parts = fixture::regions(2, 24 * 30, 8);
        PerturbSpec s;
        s.kind = PerturbKind::noise;
        s.sigma = 0.1;
        s.seed = 3;
        const auto a = perturb(parts[0].test, s), b = perturb(parts[0].test, s);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].context_cov == b[i].context_cov);
            CHECK(a[i].context_cov != parts[0].test[i].context_cov);
            CHECK(a[i].target_future == parts[0].test[i].target_future);
            CHECK(a[i].context == parts[0].test[i].context);
        }
    }

    TEST_CASE("region swap copies covariates at the same timestamps") {
        const auto parts = fixture::regions(2, 24 * 30, 8);
        PerturbSpec s;
        s.kind = PerturbKind::adversarial_shift;
        s.swap_region = 1;
        s.swap_source = "DE";
        const auto out = perturb(parts[0].test, s, parts[1].test);
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i].context_cov == parts[1].test[i].context_cov);
            CHECK(out[i].region_code == 1);
            CHECK(out[i].context == parts[0].test[i].context);
        }
        CHECK_THROWS_AS(perturb(parts[0].test, s, parts[1].train), HarnessError);
        CHECK_THROWS_AS(perturb(parts[0].test, s, {}), HarnessError);
    }

    TEST_CASE("perturb spec validation and labels") {
        PerturbSpec s;
        s.kind = PerturbKind::missing;
        s.fraction = 0.0;
        CHECK_THROWS_AS(s.validate(), ConfigError);
        s.fraction = 1.5;
        CHECK_THROWS_AS(s.validate(), ConfigError);
        s.fraction = 0.2;
        CHECK(s.label() == "missing-20%");
        s.kind = PerturbKind::noise;
        s.sigma = 0.0;
        CHECK_THROWS_AS(s.validate(), ConfigError);
        CHECK(PerturbSpec{}.label() == "none");
    }
}
