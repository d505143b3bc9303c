#include "doctest.h"

#include <cmath>
#include <algorithm>
#include <filesystem>
#include <set>

#include "dvit/model.hpp"

#include "support.hpp"

using namespace dvit;

namespace {

// Inventory enumeration straight from the architecture description.
std::size_t enumerate_parameters(const ModelConfig& c) {
    auto conv = [](std::size_t in, std::size_t out) { return in * out * 9 + out; };
    auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
    auto block = [&](std::size_t ch) {
        const std::size_t g = std::max<std::size_t>(1, ch / 16);
        return 2 * ch + lin(ch, ch) + lin(ch, g * 3 * c.kernel_points) + lin(ch, ch) + ch + 2 * ch + lin(ch, 4 * ch) +
               lin(4 * ch, ch) + ch;
    };
    const std::size_t c0 = c.stage_channels[0];
    std::size_t n = conv(c.in_channels, c0 / 2) + c0 + conv(c0 / 2, c0) + 2 * c0;
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) n += conv(c.stage_channels[s - 1], c.stage_channels[s]) + 2 * c.stage_channels[s];
        n += c.stage_depths[s] * block(c.stage_channels[s]);
    }
    const std::size_t d = c.embed_dim, inner = c.heads * c.head_dim;
    n += lin(c.stage_channels[3], d) + d + c.token_count() * d;
    n += c.encoder_depth * (2 * d + lin(d, 3 * inner) + lin(inner, d) + 2 * d + lin(d, c.mlp_dim) + lin(c.mlp_dim, d));
    n += 2 * d + lin(d, c.num_classes);
    return n;
}

Tensor eval_logits(Dvit& m, const Tensor& x) { return m.forward(x, {false, nullptr}); }

}  // namespace

TEST_SUITE("model") {

TEST_CASE("default configuration inventory") {
    ModelConfig cfg;
    cfg.num_classes = 8;
    Rng a(1), b(2);
    std::size_t first = 0;
    {
        Dvit m(cfg, a);
        first = m.parameter_count();
    }
    Dvit m2(cfg, b);
    CHECK(first == m2.parameter_count());
    CHECK(first == enumerate_parameters(cfg));
    CHECK(first == 64660837);

    std::set<std::string> names;
    for (const auto& p : m2.parameters()) CHECK(names.insert(p.name).second);
}

TEST_CASE("tiny inventory and invalid configs") {
    const auto tiny = ModelConfig::tiny();
    Rng rng(3);
    Dvit m(tiny, rng);
    CHECK(m.parameter_count() == enumerate_parameters(tiny));
    CHECK(m.parameter_count() == 514601);

    ModelConfig bad;
    bad.heads = 7;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = ModelConfig{};
    bad.input_size = 500;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = ModelConfig{};
    bad.stage_depths = {1, 1, 1};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK(ModelConfig::from_json(tiny.to_json()) == tiny);
}

TEST_CASE("drop-path schedules rise linearly") {
    ModelConfig cfg = ModelConfig::tiny();
    Rng rng(4);
    Dvit m(cfg, rng);
    std::vector<double> rates;
    for (auto& s : m.stages())
        for (auto& b : s.blocks) rates.push_back(b.cfg.droppath_rate);
    REQUIRE(rates.size() == 5);
    for (std::size_t i = 0; i < rates.size(); ++i) CHECK(rates[i] == doctest::Approx(0.2 * i / 4.0));
    CHECK(m.encoder()[0].droppath_rate == 0.0);
    CHECK(m.encoder()[1].droppath_rate == doctest::Approx(0.15));
}

TEST_CASE("shape pipeline across input sizes") {
    for (std::size_t size : {32, 64, 96}) {
        const auto cfg = ModelConfig::tiny(5, size);
        Rng rng(size);
        Dvit m(cfg, rng);
        Tensor x = support::random_tensor({2, 3, size, size}, rng);
        ActivationCapture cap;
        Tensor logits = m.forward(x, {false, nullptr}, &cap);
        CHECK(cap.at("stem").shape() == Shape{2, 16, size / 4, size / 4});
        CHECK(cap.at("stage1").shape() == Shape{2, 16, size / 4, size / 4});
        CHECK(cap.at("stage2").shape() == Shape{2, 32, size / 8, size / 8});
        CHECK(cap.at("stage3").shape() == Shape{2, 64, size / 16, size / 16});
        CHECK(cap.at("stage4").shape() == Shape{2, 128, size / 32, size / 32});
        CHECK(cap.at("tokens").shape() == Shape{2, (size / 32) * (size / 32) + 1, 64});
        CHECK(logits.shape() == Shape{2, 5});
        for (const auto& [name, t] : cap)
            for (double v : t.data()) REQUIRE(std::isfinite(v));
    }
    Rng rng(9);
    Dvit m(ModelConfig::tiny(), rng);
    CHECK_THROWS_AS(m.forward(Tensor::zeros({1, 3, 64, 64}), {}), ShapeError);
}

TEST_CASE("default configuration at 256") {
    ModelConfig cfg;
    cfg.input_size = 256;
    Rng rng(10);
    Dvit m(cfg, rng);
    NoGradGuard guard;
    ActivationCapture cap;
    Tensor logits = m.forward(support::random_tensor({1, 3, 256, 256}, rng), {false, nullptr}, &cap);
    CHECK(cap.at("stage1").shape() == Shape{1, 80, 64, 64});
    CHECK(cap.at("stage2").shape() == Shape{1, 160, 32, 32});
    CHECK(cap.at("stage3").shape() == Shape{1, 320, 16, 16});
    CHECK(cap.at("stage4").shape() == Shape{1, 640, 8, 8});
    CHECK(cap.at("tokens").shape() == Shape{1, 65, 384});
    CHECK(logits.shape() == Shape{1, 8});
    for (double v : logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("patch embedding") {
    auto cfg = ModelConfig::tiny(8, 64);
    Rng rng(5);
    Dvit m(cfg, rng);
    for (double& v : m.patch_proj().bias.mutable_data()) v = rng.uniform(-1, 1);
    Tensor tokens = m.patch_embed(Tensor::zeros({1, 128, 2, 2}), {});
    CHECK(tokens.shape() == Shape{1, 5, 64});
    for (std::size_t t = 1; t < 5; ++t)
        for (std::size_t d = 0; d < 64; ++d) CHECK(tokens.at({0, t, d}) == m.patch_proj().bias.data()[d]);

    Tensor fmap = support::random_tensor({1, 128, 2, 2}, rng);
    std::vector<double> swapped = fmap.to_vector();
    for (std::size_t c = 0; c < 128; ++c) std::swap(swapped[c * 4 + 0], swapped[c * 4 + 3]);
    Tensor a = m.patch_embed(fmap, {}), b = m.patch_embed(Tensor::from(fmap.shape(), swapped), {});
    for (std::size_t d = 0; d < 64; ++d) {
        CHECK(a.at({0, 1, d}) == b.at({0, 4, d}));
        CHECK(a.at({0, 4, d}) == b.at({0, 1, d}));
        CHECK(a.at({0, 2, d}) == b.at({0, 2, d}));
    }
}

TEST_CASE("head behaviour") {
    Rng rng(6);
    Dvit m(ModelConfig::tiny(), rng);
    Tensor x = support::random_tensor({2, 3, 32, 32}, rng);
    Tensor before = eval_logits(m, x);
    CHECK(support::bit_equal(before.data(), eval_logits(m, x).data()));

    // permuting head rows permutes logits
    const std::vector<std::size_t> perm{3, 0, 7, 1, 2, 6, 5, 4};
    Tensor w = m.head().weight, b = m.head().bias;
    std::vector<double> pw(w.numel()), pb(8);
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 64; ++c) pw[r * 64 + c] = w.at({perm[r], c});
        pb[r] = b.data()[perm[r]] + 0.1 * r;
        b.mutable_data()[perm[r]] += 0.1 * r;
    }
    Tensor base = eval_logits(m, x);
    m.head().weight = Tensor::from(w.shape(), pw, true);
    m.head().bias = Tensor::from({8}, pb, true);
    Tensor permuted = eval_logits(m, x);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t r = 0; r < 8; ++r) CHECK(permuted.at({n, r}) == base.at({n, perm[r]}));

    for (double& v : m.head().weight.mutable_data()) v = 0.0;
    for (double& v : m.head().bias.mutable_data()) v = 0.0;
    const Tensor zero = eval_logits(m, x);
    for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("tiny model gradient check") {
    Rng rng(7);
    Dvit m(ModelConfig::tiny(4, 32), rng);
    for (auto& s : m.stages())
        for (auto& b : s.blocks) {
            for (double& v : b.gamma1.mutable_data()) v = 0.5;
            for (double& v : b.dcn.offset_mod.weight.mutable_data()) v *= 20.0;
        }
    Tensor x = support::random_tensor({1, 3, 32, 32}, rng);
    auto loss = [&](const Tensor& in) { return cross_entropy(m.forward(in, {false, nullptr}), {2}); };
    CHECK(grad_check(loss, x, 1e-5, 48).max_rel_error <= 1e-4);
    auto params = m.parameters();
    for (const char* name : {"stem.conv1.weight", "stages.1.blocks.0.dcn.offset_mod.weight", "patch_embed.cls_token",
                             "encoder.0.attn.qkv.weight", "head.fc.weight"}) {
        auto it = std::find_if(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
        REQUIRE(it != params.end());
        INFO(name);
        CHECK(grad_check_inplace([&] { return loss(x); }, it->tensor, 1e-5, 24).max_rel_error <= 1e-4);
    }
}

TEST_CASE("checkpoint round trip and failures") {
    support::TempDir dir("ckpt");
    Rng rng(8);
    Dvit m(ModelConfig::tiny(), rng);
    Tensor x = support::random_tensor({2, 3, 32, 32}, rng);
    // non-trivial running statistics
    m.forward(x, {true, &rng});
    save_checkpoint(dir / "m.ckpt", m, nullptr, 3, 99);
    Dvit loaded = load_checkpoint(dir / "m.ckpt");
    CHECK(support::bit_equal(eval_logits(m, x).data(), eval_logits(loaded, x).data()));
    const auto ck = read_checkpoint(dir / "m.ckpt");
    CHECK(ck.epoch == 3);
    CHECK(ck.seed == 99);

    std::filesystem::copy_file(dir / "m.ckpt", dir / "cut.ckpt");
    std::filesystem::resize_file(dir / "cut.ckpt", std::filesystem::file_size(dir / "m.ckpt") / 2);
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), FormatError);

    auto dump = read_tensor_dump(dir / "m.ckpt");
    for (auto& e : dump.entries)
        if (e.name == "head.fc.weight") e.name = "head.fc.kernel";
    write_tensor_dump(dir / "renamed.ckpt", dump);
    try {
        load_checkpoint(dir / "renamed.ckpt");
        FAIL("expected a missing-parameter error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("head.fc.weight") != std::string::npos);
    }

    Rng other(1);
    Dvit wider(ModelConfig::tiny(5), other);
    CHECK_THROWS_AS(load_into(wider, ck), std::invalid_argument);
}

}  // TEST_SUITE
