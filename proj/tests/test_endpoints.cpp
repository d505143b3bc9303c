#include "doctest.h"

#include <cstdlib>
#include <set>
#include <thread>

#include "httplib.h"

#include "dvit/endpoints.hpp"

#include "support.hpp"

using namespace dvit;

namespace {

constexpr RetryPolicy kFast{3, std::chrono::milliseconds(0), 2.0};

// Writes `per_class` PNGs per class under dir and returns a split manifest.
Manifest image_manifest(const support::TempDir& dir, int classes, int per_class, std::size_t size = 16) {
    Rng rng(11);
    Manifest m;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            const auto path = dir / ("c" + std::to_string(c) + "_" + std::to_string(i) + ".png");
            save_image(path, support::texture_image(c, size, rng));
            m.entries.push_back({path.string(), "class" + std::to_string(c)});
        }
    m.assign_class_ids();
    return stratified_split(m, {0.8, 0.1, 0.1}, 1);
}

struct MockClients {
    MockCaptionTransport caption;
    MockGenerationTransport generation;
    MockSuperresTransport superres{2};
    AugmentClients clients() { return {&caption, &generation, &superres}; }
};

// Counts calls and fails permanently.
struct DeadTransport : Transport {
    int calls = 0;
    nlohmann::json post(const nlohmann::json&) override {
        ++calls;
        throw TransportError("connection refused");
    }
};

}  // namespace

TEST_SUITE("endpoints") {

TEST_CASE("base64 round trip") {
    CHECK(base64_encode({}) == "");
    CHECK(base64_encode({'f', 'o', 'o', 'b', 'a'}) == "Zm9vYmE=");
    CHECK(base64_encode({'f', 'o'}) == "Zm8=");
    Rng rng(1);
    for (std::size_t n = 0; n < 40; ++n) {
        std::vector<std::uint8_t> bytes(n);
        for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.uniform(0, 256));
        CHECK(base64_decode(base64_encode(bytes)) == bytes);
    }
    CHECK_THROWS(base64_decode("@@@@"));
}

TEST_CASE("mock services") {
    MockCaptionTransport caption("tone {mean}");
    CHECK(request_caption(Image(4, 4, 3, 0.5), caption) == "tone 0.50");

    MockSuperresTransport sr(4);
    Image small(2, 3, 3);
    for (std::size_t i = 0; i < small.data.size(); ++i) small.data[i] = static_cast<double>(i % 7) / 255.0 * 30;
    const Image big = request_superres(small, sr);
    CHECK(big.height == 8);
    CHECK(big.width == 12);
    CHECK(big.at(5, 7, 1) == doctest::Approx(small.at(1, 1, 1)).epsilon(1e-12));

    MockGenerationTransport gen;
    Rng rng(2);
    const Image src = support::texture_image(3, 16, rng);
    const EdgeMap edges = canny_edges(to_gray255(src), 100, 150);
    const Image a = request_generation("p", edges, src, 1, gen), b = request_generation("p", edges, src, 1, gen),
                c = request_generation("p", edges, src, 2, gen);
    CHECK(a.data == b.data);
    CHECK(a.data != c.data);
    CHECK(a.height == 16);
}

TEST_CASE("retry policy and backoff") {
    MockCaptionTransport inner;
    FlakyTransport flaky(inner, 2);
    std::vector<long long> sleeps;
    RetryPolicy policy{3, std::chrono::milliseconds(500), 2.0};
    auto record = [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); };
    CHECK_NOTHROW(post_with_retry(flaky, {{"image", base64_encode(encode_png(Image(2, 2, 3)))}}, policy, record));
    CHECK(flaky.calls() == 3);
    CHECK(sleeps == std::vector<long long>{500, 1000});

    DeadTransport dead;
    CHECK_THROWS_AS(post_with_retry(dead, {}, policy, record), TransportError);
    CHECK(dead.calls == 3);
    CHECK_THROWS_AS(post_with_retry(dead, {}, RetryPolicy{0}, record), std::invalid_argument);
}

TEST_CASE("augmentation with mocks") {
    support::TempDir dir("augment");
    const Manifest m = image_manifest(dir, 2, 5);
    MockClients mocks;
    AugmentOptions opt;
    opt.output_dir = dir.path / "gen";
    opt.retry = kFast;
    opt.seed = 4;
    const AugmentResult r = augment(m, mocks.clients(), opt);
    const std::size_t train = m.count(Split::train);
    REQUIRE(r.generated.size() == 3 * train);
    CHECK(r.quarantine.empty());
    std::size_t sr = 0, diff = 0;
    std::set<std::string> paths;
    for (const auto& g : r.generated) {
        CHECK(std::filesystem::exists(g.path));
        CHECK(paths.insert(g.path).second);
        CHECK(g.split == Split::unassigned);
        const auto src = std::find_if(m.entries.begin(), m.entries.end(), [&](const auto& e) { return e.path == g.source_id; });
        REQUIRE(src != m.entries.end());
        CHECK(src->split == Split::train);
        CHECK(src->class_name == g.class_name);
        if (g.provenance == Provenance::superres) {
            ++sr;
            CHECK(load_image(g.path).height == 32);
        } else {
            ++diff;
            CHECK_FALSE(g.prompt.empty());
        }
    }
    CHECK(sr == train);
    CHECK(diff == 2 * train);

    opt.output_dir = dir.path / "gen2";
    opt.max_in_flight = 1;
    const AugmentResult serial = augment(m, mocks.clients(), opt);
    REQUIRE(serial.generated.size() == r.generated.size());
    for (std::size_t i = 0; i < r.generated.size(); ++i) {
        CHECK(serial.generated[i].source_id == r.generated[i].source_id);
        CHECK(load_image(serial.generated[i].path).data == load_image(r.generated[i].path).data);
    }
}

TEST_CASE("failures are retried then quarantined") {
    support::TempDir dir("quarantine");
    Manifest m = image_manifest(dir, 1, 10);
    MockClients mocks;
    AugmentOptions opt;
    opt.output_dir = dir.path / "gen";
    opt.retry = kFast;
    opt.max_in_flight = 1;

    FlakyTransport flaky(mocks.superres, 2);
    AugmentClients clients = mocks.clients();
    clients.superres = &flaky;
    opt.diffusion = false;
    const AugmentResult recovered = augment(m, clients, opt);
    CHECK(recovered.quarantine.empty());
    CHECK(recovered.generated.size() == m.count(Split::train));

    DeadTransport dead;
    clients = mocks.clients();
    clients.caption = &dead;
    opt.diffusion = true;
    const AugmentResult failed = augment(m, clients, opt);
    CHECK(failed.quarantine.size() == m.count(Split::train));
    for (const auto& q : failed.quarantine) CHECK(q.stage == "caption");
    CHECK(dead.calls == 3 * static_cast<int>(m.count(Split::train)));
    for (const auto& g : failed.generated) CHECK(g.provenance == Provenance::superres);

    m.entries[0].path = (dir / "missing.png").string();
    m.entries[0].split = Split::train;
    const AugmentResult missing = augment(m, mocks.clients(), opt);
    REQUIRE_FALSE(missing.quarantine.empty());
    CHECK(missing.quarantine[0].stage == "load");

    write_quarantine(dir / "q.tsv", failed.quarantine);
    CHECK(std::filesystem::file_size(dir / "q.tsv") > 0);
}

TEST_CASE("ablation grid yields four distinct valid manifests") {
    support::TempDir dir("ablation");
    const Manifest m = image_manifest(dir, 2, 10);
    MockClients mocks;
    AugmentOptions opt;
    opt.output_dir = dir.path / "gen";
    opt.retry = kFast;
    const AugmentResult r = augment(m, mocks.clients(), opt);
    const AblationManifests grid = build_ablation_manifests(m, r, {0.8, 0.2}, 3);
    const std::vector<const Manifest*> all{&grid.baseline, &grid.superres_only, &grid.diffusion_only, &grid.full};
    const std::size_t train = m.count(Split::train);
    const std::size_t expect[4] = {m.entries.size(), m.entries.size() + train, m.entries.size() + 2 * train,
                                   m.entries.size() + 3 * train};
    std::set<std::string> texts;
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK_NOTHROW(all[i]->validate());
        CHECK(all[i]->entries.size() == expect[i]);
        CHECK(all[i]->count(Split::test) == m.count(Split::valid) + m.count(Split::test));
        CHECK(all[i]->count(Split::unassigned) == 0);
        texts.insert(format_manifest(*all[i]));
        CHECK(parse_manifest(format_manifest(*all[i])).entries.size() == expect[i]);
    }
    CHECK(texts.size() == 4);
    for (const auto& e : grid.superres_only.entries) CHECK(e.provenance != Provenance::diffusion);
    for (const auto& e : grid.diffusion_only.entries) CHECK(e.provenance != Provenance::superres);
}

TEST_CASE("http transport against a loopback server") {
    httplib::Server server;
    std::string seen_auth;
    int calls = 0;
    server.Post("/ok", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        auto body = nlohmann::json::parse(req.body);
        res.set_content(nlohmann::json{{"prompt", "echo " + body.value("image", std::string())}}.dump(), "application/json");
    });
    server.Post("/busy", [&](const httplib::Request&, httplib::Response& res) {
        ++calls;
        res.status = 503;
    });
    server.Post("/bad", [&](const httplib::Request&, httplib::Response& res) {
        res.status = 400;
        res.set_content("nope", "text/plain");
    });
    server.Post("/garbage", [&](const httplib::Request&, httplib::Response& res) { res.set_content("{", "text/plain"); });
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    const std::string base = "http://127.0.0.1:" + std::to_string(port);

    ::setenv("DVIT_TEST_TOKEN", "s3cret", 1);
    HttpTransport ok({base + "/ok", "DVIT_TEST_TOKEN", std::chrono::milliseconds(5000)});
    CHECK(ok.post({{"image", "abc"}}).at("prompt") == "echo abc");
    CHECK(seen_auth == "Bearer s3cret");
    ::unsetenv("DVIT_TEST_TOKEN");
    ok.post({{"image", "x"}});
    CHECK(seen_auth.empty());

    HttpTransport busy({base + "/busy", "DVIT_TEST_TOKEN", std::chrono::milliseconds(5000)});
    CHECK_THROWS_AS(post_with_retry(busy, {}, kFast, [](auto) {}), TransportError);
    CHECK(calls == 3);
    HttpTransport bad({base + "/bad", "DVIT_TEST_TOKEN", std::chrono::milliseconds(5000)});
    try {
        bad.post({});
        FAIL("expected a parse error");
    } catch (const ResponseParseError& e) {
        CHECK(e.raw() == "nope");
    }
    HttpTransport garbage({base + "/garbage", "DVIT_TEST_TOKEN", std::chrono::milliseconds(5000)});
    CHECK_THROWS_AS(garbage.post({}), ResponseParseError);
    CHECK_THROWS_AS(request_caption(Image(2, 2, 3), bad, kFast), ResponseParseError);

    server.stop();
    thread.join();
    HttpTransport closed({base + "/ok", "DVIT_TEST_TOKEN", std::chrono::milliseconds(500)});
    CHECK_THROWS_AS(closed.post({}), TransportError);
}

}  // TEST_SUITE
