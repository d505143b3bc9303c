#pragma once

#include <cmath>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "dvit/image.hpp"
#include "dvit/model.hpp"
#include "dvit/ops.hpp"
#include "dvit/rng.hpp"
#include "dvit/train.hpp"

namespace support {

inline dvit::Tensor random_tensor(dvit::Shape shape, dvit::Rng& rng, double lo = -1.0, double hi = 1.0,
                                  bool requires_grad = false) {
    std::vector<double> v(dvit::shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return dvit::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("dvit-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

/// Class c: a colour and stripe orientation/period unique to the class,
/// plus mild per-image noise. Values in [0, 1].
inline dvit::Image texture_image(int cls, std::size_t size, dvit::Rng& rng) {
    dvit::Image img(size, size, 3);
    const double hue[8][3] = {{0.9, 0.2, 0.2}, {0.2, 0.9, 0.2}, {0.2, 0.2, 0.9}, {0.9, 0.9, 0.2},
                              {0.9, 0.2, 0.9}, {0.2, 0.9, 0.9}, {0.6, 0.6, 0.6}, {0.1, 0.1, 0.1}};
    const std::size_t period = 2 + static_cast<std::size_t>(cls % 4) * 2;
    const bool vertical = cls >= 4;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const bool on = ((vertical ? x : y) / period) % 2 == 0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = hue[cls % 8][c] * (on ? 1.0 : 0.5);
                img.at(y, x, c) = std::clamp(base + rng.uniform(-0.05, 0.05), 0.0, 1.0);
            }
        }
    return img;
}

/// `per_class` textured images for each of `classes` classes, normalized.
inline dvit::InMemoryDataset texture_dataset(int classes, int per_class, std::size_t size, std::uint64_t seed) {
    dvit::Rng rng(seed);
    dvit::NormalizationSpec spec;
    spec.size = size;
    std::vector<dvit::Tensor> images;
    std::vector<int> labels;
    std::vector<std::string> names;
    for (int c = 0; c < classes; ++c) names.push_back("class" + std::to_string(c));
    for (int i = 0; i < per_class; ++i)
        for (int c = 0; c < classes; ++c) {
            images.push_back(dvit::normalize_image(texture_image(c, size, rng), spec));
            labels.push_back(c);
        }
    return dvit::InMemoryDataset(std::move(images), std::move(labels), std::move(names));
}

// Channel r of the activation is the input restricted to quadrant r; the
// logit of class 0 sums channel 0, class 1 sums the rest.
inline dvit::Tensor quadrant_forward(const dvit::Tensor& input, dvit::ActivationCapture& capture) {
    const std::size_t s = input.dim(2), half = s / 2;
    std::vector<dvit::Tensor> channels;
    for (std::size_t q = 0; q < 4; ++q) {
        std::vector<double> mask(s * s, 0.0);
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x)
                if ((y < half) == (q < 2) && (x < half) == (q % 2 == 0)) mask[y * s + x] = 1.0;
        channels.push_back(dvit::mul(input, dvit::Tensor::from({1, 1, s, s}, mask)));
    }
    dvit::Tensor act = dvit::concat(channels, 1);
    capture["quadrants"] = act;
    dvit::Tensor c0 = dvit::reshape(dvit::sum(dvit::slice(act, 1, 0, 1)), {1, 1});
    dvit::Tensor rest = dvit::reshape(dvit::sum(dvit::slice(act, 1, 1, 3)), {1, 1});
    return dvit::concat({c0, rest}, 1);
}

}  // namespace support
