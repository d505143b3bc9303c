#include "doctest.h"

#include <cmath>

#include "dvit/nn.hpp"

#include "oracles.hpp"
#include "support.hpp"

using namespace dvit;

namespace {

Tensor with_zero_grad(Tensor t) {
    t.set_requires_grad(true);
    sum(mul_scalar(t, 0.0)).backward();
    return t;
}

Tensor projected(const Tensor& t) {
    Rng rng(99);
    return sum(mul(t, support::random_tensor(t.shape(), rng)));
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("conv2d identity, constant field and direct oracle") {
    Rng rng(1);
    Tensor x = support::random_tensor({2, 3, 4, 5}, rng);
    std::vector<double> eye(9, 0.0);
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    Tensor w1 = Tensor::from({3, 3, 1, 1}, eye);
    CHECK(support::bit_equal(conv2d(x, w1, Tensor(), 1, 0).data(), x.data()));

    Tensor c = Tensor::full({1, 1, 5, 5}, 2.5);
    Tensor y = conv2d(c, Tensor::ones({1, 1, 3, 3}), Tensor(), 1, 1);
    for (std::size_t i = 1; i < 4; ++i)
        for (std::size_t j = 1; j < 4; ++j) CHECK(y.at({0, 0, i, j}) == 22.5);
    CHECK(y.at({0, 0, 0, 0}) == 10.0);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng r(seed);
        Tensor xi = support::random_tensor({2, 3, 7, 6}, r);
        Tensor w = support::random_tensor({4, 3, 3, 3}, r);
        Tensor b = support::random_tensor({4}, r);
        const auto ref = oracle::conv2d(xi.to_vector(), 2, 3, 7, 6, w.to_vector(), b.to_vector(), 4, 3, 2, 1);
        Tensor out = conv2d(xi, w, b, 2, 1);
        CHECK(out.shape() == Shape{2, 4, 4, 3});
        CHECK(support::max_abs_diff(out.data(), ref) <= 1e-10);
    }
}

TEST_CASE("batch norm statistics and running buffers") {
    Rng rng(2);
    Tensor x = support::random_tensor({4, 3, 5, 5}, rng, -3, 5);
    Tensor g = Tensor::ones({3}), b = Tensor::zeros({3});
    Tensor rm = Tensor::zeros({3}), rv = Tensor::ones({3});
    Tensor y = batch_norm2d(x, g, b, rm, rv, true, 0.1, 1e-300);
    const std::size_t per = 4 * 25;
    for (std::size_t c = 0; c < 3; ++c) {
        // two-pass oracle
        double mu = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) mu += x.data()[(n * 3 + c) * 25 + i];
        mu /= per;
        double var = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) var += std::pow(x.data()[(n * 3 + c) * 25 + i] - mu, 2);
        double ym = 0.0, yv = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) {
                const double v = y.data()[(n * 3 + c) * 25 + i];
                CHECK(v == doctest::Approx((x.data()[(n * 3 + c) * 25 + i] - mu) / std::sqrt(var / per)).epsilon(1e-12));
                ym += v;
                yv += v * v;
            }
        CHECK(std::abs(ym / per) <= 1e-6);
        CHECK(std::abs(yv / per - 1.0) <= 1e-6);
        CHECK(rm.data()[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
        CHECK(rv.data()[c] == doctest::Approx(0.9 + 0.1 * var / (per - 1)).epsilon(1e-12));
    }

    Tensor z = Tensor::zeros({3}), o = Tensor::ones({3});
    Tensor ye = batch_norm2d(x, o, z, z, o, false, 0.1, 1e-300);
    CHECK(support::bit_equal(ye.data(), x.data()));

    BatchNorm2d bn(3);
    CHECK_THROWS_AS(bn.forward(support::random_tensor({1, 3, 2, 2}, rng), true), std::invalid_argument);
}

TEST_CASE("layer norm") {
    Tensor g = Tensor::ones({4}), b = Tensor::zeros({4});
    Tensor c = layer_norm(Tensor::full({2, 4}, 3.7), g, b);
    for (double v : c.data()) CHECK(v == 0.0);

    Tensor unit = Tensor::from({1, 4}, {1, -1, 1, -1});
    CHECK(support::max_abs_diff(layer_norm(unit, g, b).data(), unit.data()) <= 1e-5);

    Rng rng(3);
    Tensor x = support::random_tensor({3, 6}, rng, -2, 2);
    Tensor gg = support::random_tensor({6}, rng), bb = support::random_tensor({6}, rng);
    Tensor y = layer_norm(x, gg, bb, 1e-5);
    for (std::size_t i = 0; i < 3; ++i) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 6; ++j) mu += x.at({i, j}) / 6;
        for (std::size_t j = 0; j < 6; ++j) var += std::pow(x.at({i, j}) - mu, 2) / 6;
        for (std::size_t j = 0; j < 6; ++j)
            CHECK(std::abs(y.at({i, j}) - ((x.at({i, j}) - mu) / std::sqrt(var + 1e-5) * gg.data()[j] + bb.data()[j])) <=
                  1e-12);
    }
}

TEST_CASE("attention cases") {
    Rng rng(4);
    MultiheadAttention attn(4, 2, 3, rng);
    Tensor one = support::random_tensor({1, 4}, rng);
    const auto v = slice(attn.qkv.forward(one), 1, 12, 6);
    Tensor expected = attn.proj.forward(v);
    CHECK(support::max_abs_diff(attn.forward(one, {}).data(), expected.data()) <= 1e-14);

    // value and output projections identity, queries zero: uniform mixing
    MultiheadAttention id(4, 2, 2, rng);
    std::vector<double> qkv(12 * 4, 0.0);
    for (std::size_t i = 0; i < 4; ++i) qkv[(8 + i) * 4 + i] = 1.0;
    for (std::size_t i = 0; i < 4; ++i) qkv[(4 + i) * 4 + i] = 1.0;
    id.qkv.weight = Tensor::from({12, 4}, qkv);
    id.qkv.bias = Tensor::zeros({12});
    std::vector<double> eye(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    id.proj.weight = Tensor::from({4, 4}, eye);
    id.proj.bias = Tensor::zeros({4});
    Tensor tokens = support::random_tensor({5, 4}, rng);
    Tensor mixed = id.forward(tokens, {});
    Tensor avg = mean(tokens, 0);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(mixed.at({t, d}) - avg.data()[d]) <= 1e-14);

    // per-head loop oracle
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng r(seed);
        MultiheadAttention a(6, 2, 3, r);
        for (double& w : a.qkv.weight.mutable_data()) w *= 25.0;
        Tensor x = support::random_tensor({3, 6}, r);
        const auto proj = a.qkv.forward(x).to_vector();  // 3 x 18
        std::vector<double> mixedv(3 * 6, 0.0);
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < 3; ++i) {
                double s[3], mx = -1e300, z = 0;
                for (std::size_t j = 0; j < 3; ++j) {
                    s[j] = 0;
                    for (std::size_t d = 0; d < 3; ++d) s[j] += proj[i * 18 + h * 3 + d] * proj[j * 18 + 6 + h * 3 + d];
                    s[j] /= std::sqrt(3.0);
                    mx = std::max(mx, s[j]);
                }
                for (double& sj : s) z += (sj = std::exp(sj - mx));
                for (std::size_t j = 0; j < 3; ++j)
                    for (std::size_t d = 0; d < 3; ++d) mixedv[i * 6 + h * 3 + d] += s[j] / z * proj[j * 18 + 12 + h * 3 + d];
            }
        Tensor ref = a.proj.forward(Tensor::from({3, 6}, mixedv));
        CHECK(support::max_abs_diff(a.forward(x, {}).data(), ref.data()) <= 1e-10);
    }
}

TEST_CASE("dropout and droppath") {
    Rng rng(5);
    Tensor x = support::random_tensor({4, 3}, rng);
    CHECK(dropout(x, 0.0, true, &rng).node() == x.node());
    CHECK(support::bit_equal(dropout(x, 0.5, false, nullptr).data(), x.data()));
    CHECK(support::bit_equal(droppath(x, 0.5, false, nullptr).data(), x.data()));
    CHECK_THROWS_AS(dropout(x, 0.5, true, nullptr), std::invalid_argument);

    Tensor ones = Tensor::ones({100000});
    const double m = mean(dropout(ones, 0.2, true, &rng)).item();
    CHECK(std::abs(m - 1.0) <= 0.01);
    const double mp = mean(droppath(Tensor::ones({100000, 1}), 0.2, true, &rng)).item();
    CHECK(std::abs(mp - 1.0) <= 0.01);

    Tensor d = droppath(support::random_tensor({50, 2, 2}, rng), 0.5, true, &rng);
    for (std::size_t n = 0; n < 50; ++n) {
        const Tensor s = slice(d, 0, n, 1);
        const bool all_zero = std::all_of(s.data().begin(), s.data().end(), [](double v) { return v == 0.0; });
        const bool none_zero = std::none_of(s.data().begin(), s.data().end(), [](double v) { return v == 0.0; });
        CHECK((all_zero || none_zero));
    }
}

TEST_CASE("bilinear sampling") {
    Rng rng(6);
    Tensor f = support::random_tensor({2, 3, 4}, rng);
    Tensor at = bilinear_sample(f, Tensor::from({1, 2}, {2, 1}));
    CHECK(at.at({0, 0}) == f.at({0, 2, 1}));
    CHECK(at.at({1, 0}) == f.at({1, 2, 1}));
    Tensor patch = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(bilinear_sample(patch, Tensor::from({1, 2}, {0.5, 0.5})).item() == 2.5);
    CHECK(bilinear_sample(patch, Tensor::from({1, 2}, {-3.0, 0.0})).item() == 0.0);
    Tensor pts = Tensor::from({3, 2}, {0.3, 0.7, 1.25, 2.5, 1.9, 0.1});
    auto r = grad_check([&](const Tensor& p) { return projected(bilinear_sample(f, p)); }, pts);
    CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("cross entropy") {
    Tensor sure = Tensor::from({1, 3}, {0, 60, 0});
    CHECK(cross_entropy(sure, {1}).item() < 1e-20);
    CHECK(cross_entropy(Tensor::zeros({2, 8}), {3, 5}).item() == doctest::Approx(std::log(8.0)).epsilon(1e-15));
    Tensor logits = Tensor::from({2, 3}, {0.2, -1.0, 2.0, 1.5, 0.3, -0.4});
    double ref = 0.0;
    const std::size_t labels[2] = {2, 0};
    for (std::size_t i = 0; i < 2; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 3; ++j) z += std::exp(logits.at({i, j}));
        ref += -(logits.at({i, labels[i]}) - std::log(z)) / 2.0;
    }
    CHECK(std::abs(cross_entropy(logits, {2, 0}).item() - ref) <= 1e-14);
    CHECK_THROWS(cross_entropy(logits, {3, 0}));
}

TEST_CASE("adamw closed forms") {
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.0;
    Tensor p = with_zero_grad(Tensor::from({3}, {1, -2, 3}));
    ParameterList params{{"p", p, true, true}};
    auto state = OptimizerState::for_parameters(params, cfg);
    adamw_step(state, params);
    CHECK(p.to_vector() == std::vector<double>{1, -2, 3});

    cfg.weight_decay = 0.05;
    Tensor q = with_zero_grad(Tensor::from({2}, {1.0, -4.0}));
    ParameterList qp{{"q", q, true, true}};
    auto qs = OptimizerState::for_parameters(qp, cfg);
    adamw_step(qs, qp);
    CHECK(q.to_vector()[0] == doctest::Approx(1.0 * (1 - 0.01 * 0.05)).epsilon(1e-15));
    CHECK(q.to_vector()[1] == doctest::Approx(-4.0 * (1 - 0.01 * 0.05)).epsilon(1e-15));

    cfg.weight_decay = 0.0;
    Tensor r = Tensor::from({3}, {0.5, 0.5, 0.5}, true);
    sum(mul(r, Tensor::from({3}, {2.0, -0.3, 1e-3}))).backward();
    ParameterList rp{{"r", r, true, true}};
    auto rs = OptimizerState::for_parameters(rp, cfg);
    adamw_step(rs, rp);
    const double g[3] = {2.0, -0.3, 1e-3};
    for (int i = 0; i < 3; ++i) {
        const double step = cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps);
        CHECK(r.to_vector()[i] == doctest::Approx(0.5 - step).epsilon(1e-14));
        CHECK(std::abs(r.to_vector()[i] - 0.5 + cfg.lr * (g[i] > 0 ? 1 : -1)) <= 1e-4 * cfg.lr);
    }

    Tensor missing = Tensor::zeros({2}, true);
    ParameterList mp{{"m", missing, true, true}};
    auto ms = OptimizerState::for_parameters(mp, cfg);
    CHECK_THROWS_AS(adamw_step(ms, mp), std::invalid_argument);
}

TEST_CASE("linear schedule") {
    CHECK(linear_schedule(1, 0.2) == std::vector<double>{0.0});
    const auto s = linear_schedule(5, 0.2);
    CHECK(s.front() == 0.0);
    CHECK(s.back() == doctest::Approx(0.2));
    CHECK(s[2] == doctest::Approx(0.1));
}

}  // TEST_SUITE
