#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvit/tensor.hpp"

namespace dvit {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interleaved H x W x C raster with samples in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
};

// 8-bit PNG. Decoding accepts gray, gray+alpha, RGB, RGBA and palette
// images at 8 bits per sample; samples are returned unconverted except for
// palette expansion.
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Raw sidecar: ASCII line "dvit-raw <height> <width> <channels>\n" followed
// by height*width*channels little-endian float32 samples, row-major HWC.
void write_raw(const std::filesystem::path& path, const Image& image);
Image read_raw(const std::filesystem::path& path);

/// Dispatches on extension: ".png" or ".raw".
Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& image);

/// Bilinear resampling with half-pixel centers and edge clamping. Same-size
/// input is returned unchanged.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);

/// ITU-R BT.601 luma on the 0..255 scale, as an H x W tensor.
Tensor to_gray255(const Image& image);

struct NormalizationSpec {
    double mean[3] = {0.485, 0.456, 0.406};
    double std[3] = {0.229, 0.224, 0.225};
    std::size_t size = 512;

    void validate() const;
};

/// RGB image -> resized 3 x size x size tensor, (x - mean) / std per channel.
Tensor normalize_image(const Image& image, const NormalizationSpec& spec);
Tensor decode_and_normalize(const std::filesystem::path& path, const NormalizationSpec& spec);

}  // namespace dvit
