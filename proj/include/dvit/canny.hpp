#pragma once

#include <cstdint>
#include <vector>

#include "dvit/image.hpp"
#include "dvit/tensor.hpp"

namespace dvit {

struct EdgeMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> mask;  // 0 or 1, row-major
    double low = 0.0;
    double high = 0.0;

    std::uint8_t at(std::size_t y, std::size_t x) const { return mask[y * width + x]; }
    std::size_t count() const;
    /// Single-channel image, edges white.
    Image to_image() const;
};

struct CannyConfig {
    double low = 100.0;
    double high = 150.0;
};

/// 5x5 Gaussian (sigma 1.4) -> Sobel -> 4-direction non-maximum suppression
/// -> hysteresis with 8-connectivity. `gray` is H x W on the 0..255 scale;
/// thresholds apply to the Sobel magnitude on that scale. Borders replicate.
EdgeMap canny_edges(const Tensor& gray, double low, double high);
inline EdgeMap canny_edges(const Tensor& gray, const CannyConfig& cfg) { return canny_edges(gray, cfg.low, cfg.high); }

/// Normalized 5x5 Gaussian weights, row-major.
std::vector<double> gaussian_kernel5(double sigma = 1.4);

}  // namespace dvit
