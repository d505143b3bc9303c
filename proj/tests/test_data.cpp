#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "dvit/canny.hpp"
#include "dvit/image.hpp"
#include "dvit/manifest.hpp"

#include "oracles.hpp"
#include "support.hpp"

using namespace dvit;

namespace {

Manifest flat_manifest(std::size_t classes, std::size_t per_class) {
    Manifest m;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i)
            m.entries.push_back({"img/c" + std::to_string(c) + "/" + std::to_string(i) + ".png",
                                 "class" + std::to_string(c)});
    m.assign_class_ids();
    return m;
}

std::map<std::string, std::array<std::size_t, 4>> per_class_counts(const Manifest& m) {
    std::map<std::string, std::array<std::size_t, 4>> out;
    for (const auto& e : m.entries) ++out[e.class_name][static_cast<std::size_t>(e.split)];
    return out;
}

Tensor gray_from(const std::vector<double>& v, std::size_t h, std::size_t w) { return Tensor::from({h, w}, v); }

}  // namespace

TEST_SUITE("data") {

TEST_CASE("apportionment matches the largest-remainder oracle") {
    CHECK(apportion(100, {0.8, 0.1, 0.1}) == std::vector<std::size_t>{80, 10, 10});
    CHECK(apportion(10, {0.8, 0.1, 0.1}) == std::vector<std::size_t>{8, 1, 1});
    CHECK(apportion(7, {0.8, 0.1, 0.1}) == oracle::largest_remainder(7, {0.8, 0.1, 0.1}));
    CHECK(apportion(7, {0.8, 0.1, 0.1}) == std::vector<std::size_t>{5, 1, 1});
    for (std::size_t n = 1; n < 60; ++n)
        for (const auto& r : std::vector<std::vector<double>>{{0.8, 0.1, 0.1}, {0.8, 0.2}, {0.5, 0.25, 0.25}, {0.6, 0.3, 0.1}}) {
            const auto got = apportion(n, r);
            INFO(n);
            CHECK(got == oracle::largest_remainder(n, r));
            std::size_t total = 0;
            for (auto g : got) total += g;
            CHECK(total == n);
        }
    CHECK_THROWS_AS(apportion(5, {0.5, 0.6}), std::invalid_argument);
}

TEST_CASE("stratified split counts, determinism and disjointness") {
    const Manifest m = flat_manifest(8, 100);
    const Manifest a = stratified_split(m, {0.8, 0.1, 0.1}, 17);
    for (const auto& [cls, n] : per_class_counts(a)) {
        INFO(cls);
        CHECK(n[1] == 80);
        CHECK(n[2] == 10);
        CHECK(n[3] == 10);
    }
    CHECK(a.entries == stratified_split(m, {0.8, 0.1, 0.1}, 17).entries);
    CHECK(a.entries.size() == m.entries.size());
    std::set<std::string> paths;
    for (const auto& e : a.entries) CHECK(paths.insert(e.path).second);
    for (const auto& e : m.entries) CHECK(paths.count(e.path) == 1);

    const Manifest b = stratified_split(m, {0.8, 0.1, 0.1}, 18);
    CHECK(per_class_counts(a) == per_class_counts(b));
    std::size_t moved = 0;
    for (const auto& e : a.entries)
        for (const auto& f : b.entries)
            if (e.path == f.path && e.split != f.split) ++moved;
    CHECK(moved > 0);

    const Manifest small = stratified_split(flat_manifest(1, 7), {0.8, 0.1, 0.1}, 3);
    const auto want = oracle::largest_remainder(7, {0.8, 0.1, 0.1});
    CHECK(small.count(Split::train) == want[0]);
    CHECK(small.count(Split::valid) == want[1]);
    CHECK(small.count(Split::test) == want[2]);

    const Manifest ten = stratified_split(flat_manifest(3, 10), {0.8, 0.1, 0.1}, 4);
    for (const auto& [cls, n] : per_class_counts(ten)) CHECK(n == std::array<std::size_t, 4>{0, 8, 1, 1});

    CHECK_THROWS(stratified_split(m, {0.8, 0.1, 0.1}, 1, {"class0", "missing"}));
}

TEST_CASE("merge and resplit keeps the test split generation-free") {
    // 4 classes x (200 train, 25 valid, 25 test) = 800/100/100
    Manifest original;
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 250; ++i) {
            ManifestEntry e{"o/" + std::to_string(c) + "/" + std::to_string(i) + ".png", "class" + std::to_string(c)};
            e.split = i < 200 ? Split::train : i < 225 ? Split::valid : Split::test;
            original.entries.push_back(e);
        }
    original.assign_class_ids();
    std::vector<ManifestEntry> generated;
    for (const auto* e : original.in_split(Split::train)) {
        const std::string stem = e->path.substr(0, e->path.size() - 4);
        generated.push_back({stem + "_sr.png", e->class_name, -1, Split::unassigned, Provenance::superres, e->path});
        for (int k = 0; k < 2; ++k)
            generated.push_back({stem + "_gen" + std::to_string(k) + ".png", e->class_name, -1, Split::unassigned,
                                 Provenance::diffusion, e->path, "a prompt"});
    }
    const Manifest merged = merge_and_resplit(original, generated, {0.8, 0.2}, 5);
    CHECK(merged.count(Split::test) == 200);
    CHECK(merged.count(Split::train) == 2560);
    CHECK(merged.count(Split::valid) == 640);
    for (const auto* e : merged.in_split(Split::test)) CHECK(e->provenance == Provenance::original);
    std::set<std::string> orig_test;
    for (const auto& e : original.entries)
        if (e.split != Split::train) orig_test.insert(e.path);
    for (const auto* e : merged.in_split(Split::test)) CHECK(orig_test.count(e->path) == 1);
    merged.validate();
    CHECK(merged.entries == merge_and_resplit(original, generated, {0.8, 0.2}, 5).entries);

    const Manifest none = merge_and_resplit(original, {}, {0.8, 0.2}, 5);
    CHECK(none.count(Split::test) == 200);
    CHECK(none.count(Split::train) == 640);
    CHECK(none.count(Split::valid) == 160);

    auto bad = generated;
    bad[0].source_id = original.in_split(Split::test)[0]->path;
    CHECK_THROWS(merge_and_resplit(original, bad, {0.8, 0.2}, 5));
}

TEST_CASE("manifest TSV round trip and validation") {
    Manifest m = stratified_split(flat_manifest(2, 5), {0.8, 0.1, 0.1}, 1);
    m.entries.push_back({"gen/x.png", "class0", -1, Split::train, Provenance::diffusion, m.entries[0].path,
                         "tab\there"});
    m.assign_class_ids();
    const Manifest back = parse_manifest(format_manifest(m));
    REQUIRE(back.entries.size() == m.entries.size());
    CHECK(back.entries.back().prompt == "tab here");
    for (std::size_t i = 0; i + 1 < m.entries.size(); ++i) CHECK(back.entries[i] == m.entries[i]);

    support::TempDir dir("manifest");
    write_manifest(dir / "m.tsv", m);
    CHECK(format_manifest(read_manifest(dir / "m.tsv")) == format_manifest(back));

    CHECK(parse_manifest("# comment\n\na.png\tc\t-\toriginal\t-\n").entries.size() == 1);
    CHECK_THROWS_AS(parse_manifest("a.png\tc\n"), ManifestError);
    CHECK_THROWS_AS(parse_manifest("a.png\tc\ttrain\tsomething\t-\n"), ManifestError);

    Manifest leak;
    leak.entries.push_back({"a.png", "c", 0, Split::test, Provenance::original});
    leak.entries.push_back({"b.png", "c", 0, Split::test, Provenance::diffusion, "a.png"});
    CHECK_THROWS_AS(leak.validate(), ManifestError);
}

TEST_CASE("image normalization and resizing") {
    NormalizationSpec spec;
    spec.size = 4;
    Tensor t = normalize_image(Image(4, 4, 3, 0.5), spec);
    CHECK(t.shape() == Shape{3, 4, 4});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) CHECK(t.data()[c * 16 + i] == (0.5 - spec.mean[c]) / spec.std[c]);

    Rng rng(2);
    Image img(5, 3, 3);
    for (double& v : img.data) v = rng.uniform();
    CHECK(resize_bilinear(img, 5, 3).data == img.data);

    Image grid(2, 2, 1);
    grid.data = {0, 1, 2, 3};
    const Image up = resize_bilinear(grid, 4, 4);
    const std::vector<double> row0{0, 0.25, 0.75, 1}, row1{2, 2.25, 2.75, 3};
    const double wv[4] = {0, 0.25, 0.75, 1};
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            CHECK(up.at(y, x, 0) == doctest::Approx(row0[x] * (1 - wv[y]) + row1[x] * wv[y]).epsilon(1e-15));

    Image gray(1, 1, 3);
    gray.data = {1.0, 1.0, 1.0};
    CHECK(to_gray255(gray).item() == doctest::Approx(255.0).epsilon(1e-12));
}

TEST_CASE("png and raw round trips") {
    support::TempDir dir("image");
    Rng rng(3);
    Image img(6, 7, 3);
    for (double& v : img.data) v = std::floor(rng.uniform(0, 256)) / 255.0;
    save_image(dir / "a.png", img);
    const Image back = load_image(dir / "a.png");
    CHECK(back.height == 6);
    CHECK(back.width == 7);
    CHECK(back.channels == 3);
    CHECK(support::max_abs_diff(back.data, img.data) <= 1e-12);

    Image f(3, 2, 1);
    f.data = {0.0, 0.25, 0.5, 1.0, 0.125, 0.75};
    save_image(dir / "f.raw", f);
    CHECK(load_image(dir / "f.raw").data == f.data);

    CHECK_THROWS_AS(decode_png({1, 2, 3, 4}), ImageError);
    CHECK_THROWS_AS(load_image(dir / "missing.png"), ImageError);
}

TEST_CASE("canny edge maps") {
    const std::size_t n = 16;
    CHECK(canny_edges(Tensor::full({n, n}, 128.0), 100, 150).count() == 0);

    std::vector<double> step(n * n);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) step[y * n + x] = x < 8 ? 0.0 : 255.0;
    const EdgeMap e = canny_edges(gray_from(step, n, n), 100, 150);
    std::set<std::size_t> cols;
    for (std::size_t y = 0; y < n; ++y) {
        std::size_t row = 0;
        for (std::size_t x = 0; x < n; ++x)
            if (e.at(y, x)) {
                ++row;
                cols.insert(x);
            }
        CHECK(row == 1);
    }
    CHECK(cols.size() == 1);
    CHECK((*cols.begin() == 7 || *cols.begin() == 8));

    auto compare = [&](const std::vector<double>& img, std::size_t h, std::size_t w, double lo, double hi) {
        const EdgeMap got = canny_edges(gray_from(img, h, w), lo, hi);
        const auto ref = oracle::canny(img, static_cast<long>(h), static_cast<long>(w), lo, hi);
        std::size_t diff = 0;
        for (std::size_t i = 0; i < h * w; ++i) diff += got.mask[i] != ref[i];
        return diff;
    };
    std::vector<double> square(24 * 24, 20.0);
    for (std::size_t y = 6; y < 18; ++y)
        for (std::size_t x = 6; x < 18; ++x) square[y * 24 + x] = 220.0;
    CHECK(compare(square, 24, 24, 100, 150) == 0);
    CHECK(canny_edges(gray_from(square, 24, 24), 100, 150).count() > 0);

    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> blobs(32 * 32, 0.0);
        for (int b = 0; b < 4; ++b) {
            const double cy = rng.uniform(4, 28), cx = rng.uniform(4, 28), r = rng.uniform(3, 8), v = rng.uniform(60, 255);
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) < r * r) blobs[y * 32 + x] = v;
        }
        INFO(trial);
        CHECK(compare(blobs, 32, 32, 60, 120) == 0);
    }

    CHECK_THROWS_AS(canny_edges(gray_from(step, n, n), 150, 100), std::invalid_argument);
    const auto k = gaussian_kernel5();
    double total = 0.0;
    for (double v : k) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
}

}  // TEST_SUITE
