#include "doctest.h"

#include <cmath>
#include <numeric>

#include "dvit/metrics.hpp"

#include "oracles.hpp"
#include "support.hpp"

using namespace dvit;

namespace {

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

Tensor features(std::size_t n, std::size_t d, Rng& rng, double shift = 0.0) {
    return support::random_tensor({n, d}, rng, -1.0 + shift, 1.0 + shift);
}

std::vector<oracle::Vec> rows_of(const Tensor& t) {
    std::vector<oracle::Vec> out;
    const std::size_t d = t.dim(1);
    for (std::size_t i = 0; i < t.dim(0); ++i) out.emplace_back(t.data().begin() + i * d, t.data().begin() + (i + 1) * d);
    return out;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("confusion counting") {
    const auto m = confusion({0, 0, 1, 2, 2, 2}, {0, 1, 1, 2, 0, 2}, 3);
    CHECK(m.at(0, 0) == 1);
    CHECK(m.at(0, 1) == 1);
    CHECK(m.at(2, 0) == 1);
    CHECK(m.at(2, 2) == 2);
    CHECK(m.total() == 6);
    CHECK(confusion({0}, {1}, 2).at(0, 1) == 1);
    CHECK_THROWS(confusion({0, 3}, {0, 1}, 3));
    CHECK_THROWS(confusion({0, 1}, {0}, 3));
}

TEST_CASE("hand-computed cases") {
    CHECK(overall_accuracy(ConfusionMatrix::from_rows({{3, 2}, {1, 4}})) == 0.7);
    const auto k = ConfusionMatrix::from_rows({{20, 5}, {10, 15}});
    CHECK(overall_accuracy(k) == 0.7);
    CHECK(cohen_kappa(k) == doctest::Approx(0.4).epsilon(1e-15));

    const auto m = ConfusionMatrix::from_rows({{8, 2}, {4, 6}});
    CHECK(mean_accuracy(m) == doctest::Approx(0.7).epsilon(1e-15));
    const auto p = per_class_precision(m).values, r = per_class_recall(m).values, f = per_class_f1(m).values;
    CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(p[1] == 0.75);
    CHECK(r[0] == 0.8);
    CHECK(r[1] == 0.6);
    CHECK(f[0] == doctest::Approx(8.0 / 11.0).epsilon(1e-15));
    CHECK(f[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(macro_f1(m) == doctest::Approx(23.0 / 33.0).epsilon(1e-15));
    CHECK(std::round(macro_f1(m) * 1e4) / 1e4 == 0.6970);

    const auto imb = ConfusionMatrix::from_rows({{90, 10}, {0, 10}});
    CHECK(mean_accuracy(imb) == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(overall_accuracy(imb) == doctest::Approx(100.0 / 110.0).epsilon(1e-15));

    const auto absent = ConfusionMatrix::from_rows({{5, 1, 0}, {2, 3, 0}, {0, 0, 0}});
    const auto ap = per_class_precision(absent), ar = per_class_recall(absent), af = per_class_f1(absent);
    CHECK(ap.values[2] == 0.0);
    CHECK(ar.values[2] == 0.0);
    CHECK(af.values[2] == 0.0);
    CHECK(ap.undefined[2]);
    CHECK_FALSE(ap.undefined[0]);
    CHECK_THROWS_AS(mean_accuracy(absent), UndefinedMetricError);
    const auto report = make_report(absent);
    CHECK_FALSE(report.mean_accuracy.has_value());
    CHECK_FALSE(report.warnings.empty());
}

TEST_CASE("kappa calibration") {
    CHECK(cohen_kappa(ConfusionMatrix::from_rows({{5, 0, 0}, {0, 7, 0}, {0, 0, 2}})) == 1.0);
    // rank-one outer product: observed agreement equals chance
    const std::vector<std::uint64_t> row{2, 3, 5}, col{4, 1, 5};
    std::vector<std::vector<std::uint64_t>> outer(3, std::vector<std::uint64_t>(3));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) outer[i][j] = row[i] * col[j];
    CHECK(std::abs(cohen_kappa(ConfusionMatrix::from_rows(outer))) <= 1e-15);
    CHECK(cohen_kappa(ConfusionMatrix::from_rows({{0, 5}, {5, 0}})) < 0.0);
    CHECK(cohen_kappa(ConfusionMatrix::from_rows({{0, 3, 4}, {2, 0, 1}, {5, 6, 0}})) < 0.0);
    CHECK_THROWS_AS(cohen_kappa(ConfusionMatrix::from_rows({{4, 0}, {0, 0}})), UndefinedMetricError);
}

TEST_CASE("random prediction sets agree with per-sample counting") {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const int classes = 2 + t % 7;
        const std::size_t n = 20 + static_cast<std::size_t>(rng.uniform(0, 200));
        std::vector<int> truth(n), pred(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = i < static_cast<std::size_t>(classes) ? static_cast<int>(i) : static_cast<int>(rng.uniform(0, classes));
            pred[i] = rng.uniform() < 0.6 ? truth[i] : static_cast<int>(rng.uniform(0, classes));
        }
        const auto m = confusion(truth, pred, classes);
        const auto o = oracle::metrics(truth, pred, classes);
        const auto r = make_report(m);
        INFO(t);
        CHECK(std::abs(r.overall_accuracy - o.oa) <= 1e-12);
        REQUIRE(r.mean_accuracy.has_value());
        CHECK(std::abs(*r.mean_accuracy - o.macc) <= 1e-12);
        REQUIRE(r.kappa.has_value());
        CHECK(std::abs(*r.kappa - o.kappa) <= 1e-12);
        CHECK(std::abs(r.macro_precision - o.precision) <= 1e-12);
        CHECK(std::abs(r.macro_recall - o.recall) <= 1e-12);
        CHECK(std::abs(r.macro_f1 - o.f1) <= 1e-12);
        CHECK(support::max_abs_diff(r.class_precision, o.p) <= 1e-12);
        CHECK(support::max_abs_diff(r.class_accuracy, o.r) <= 1e-12);
        CHECK(support::max_abs_diff(r.class_f1, o.f) <= 1e-12);
        CHECK(std::abs(r.macro_f1 - mean(r.class_f1)) <= 1e-12);
        CHECK(std::abs(r.macro_precision - mean(r.class_precision)) <= 1e-12);
        CHECK(*r.kappa <= 1.0);
        for (const auto& row : r.normalized) CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-12);
        for (double k : r.class_kappa) {
            CHECK(k <= 1.0);
            CHECK(k >= -1.0);
        }
    }
}

TEST_CASE("one-vs-rest kappa") {
    const auto m = ConfusionMatrix::from_rows({{8, 2}, {4, 6}});
    const auto k = per_class_kappa(m);
    // binary case: both one-vs-rest matrices equal the full matrix up to relabeling
    CHECK(k.values[0] == doctest::Approx(cohen_kappa(m)).epsilon(1e-14));
    CHECK(k.values[1] == doctest::Approx(cohen_kappa(m)).epsilon(1e-14));
}

TEST_CASE("report serialization") {
    const auto m = confusion({0, 1, 1, 2}, {0, 1, 2, 2}, 3, {"farm", "river", "road"});
    const auto r = make_report(m);
    const auto j = r.to_json();
    for (const char* key : {"overall_accuracy", "mean_accuracy", "kappa", "macro_precision", "macro_recall", "macro_f1"})
        CHECK(j.contains(key));
    CHECK(j.at("samples") == 4);
    const std::string text = r.to_text();
    CHECK(text.find("river") != std::string::npos);
}

TEST_CASE("kid on identical sets and point masses") {
    Rng rng(4);
    Tensor x = features(40, 6, rng);
    KidConfig cfg;
    cfg.subsets = 20;
    cfg.subset_size = 10;
    cfg.seed = 9;
    const auto same = kid(x, x, cfg);
    CHECK(std::abs(same.value) <= 1e-6);
    CHECK(same.gamma == doctest::Approx(1.0 / 6.0));
    CHECK(same.subset_size == 10);

    const std::size_t d = 4;
    const std::vector<double> a{0.5, -1.0, 2.0, 0.25}, b{-0.75, 1.5, 0.0, 1.0};
    std::vector<double> xa, yb;
    for (int i = 0; i < 12; ++i) {
        xa.insert(xa.end(), a.begin(), a.end());
        yb.insert(yb.end(), b.begin(), b.end());
    }
    auto k = [&](const std::vector<double>& u, const std::vector<double>& v) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += u[i] * v[i];
        return std::pow(dot / d + 1.0, 3);
    };
    const double closed = k(a, a) + k(b, b) - 2 * k(a, b);
    const auto pm = kid(Tensor::from({12, d}, xa), Tensor::from({12, d}, yb), cfg);
    CHECK(closed > 0.0);
    CHECK(std::abs(pm.value - closed) <= 1e-10);
    CHECK(pm.scaled == doctest::Approx(1000.0 * pm.value));
}

TEST_CASE("kid determinism and full-set equivalence") {
    Rng rng(5);
    Tensor x = features(30, 5, rng), y = features(30, 5, rng, 0.3);
    KidConfig cfg;
    cfg.subsets = 15;
    cfg.subset_size = 12;
    cfg.seed = 2;
    const auto a = kid(x, y, cfg), b = kid(x, y, cfg);
    CHECK(a.value == b.value);
    CHECK(a.stddev == b.stddev);
    cfg.seed = 3;
    CHECK(kid(x, y, cfg).value != a.value);
    CHECK(a.value > 0.0);

    cfg.subset_size = 30;
    cfg.subsets = 4;
    const double full = oracle::mmd2_unbiased(rows_of(x), rows_of(y), 1.0 / 5.0, 1.0, 3);
    const auto f = kid(x, y, cfg);
    CHECK(std::abs(f.value - full) <= 1e-12);
    CHECK(f.stddev <= 1e-12);

    CHECK(polynomial_kernel(std::vector<double>{1, 2}.data(), std::vector<double>{3, 4}.data(), 2, 0.5, 1.0, 3) ==
          doctest::Approx(std::pow(6.5, 3)));
    cfg.subset_size = 31;
    CHECK_THROWS(kid(x, y, cfg));
    CHECK_THROWS(kid(x, Tensor::zeros({30, 4}), KidConfig{}));
}

}  // TEST_SUITE
