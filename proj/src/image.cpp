#include "dvit/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dvit {

static_assert(std::endian::native == std::endian::little, "raw images assume a little-endian host");

namespace {

png_uint_32 format_for_channels(std::size_t channels) {
    switch (channels) {
        case 1: return PNG_FORMAT_GRAY;
        case 2: return PNG_FORMAT_GA;
        case 3: return PNG_FORMAT_RGB;
        case 4: return PNG_FORMAT_RGBA;
        default: throw ImageError("PNG supports 1-4 channels, got " + std::to_string(channels));
    }
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open image '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_shape(const Image& image) {
    if (image.height == 0 || image.width == 0 || image.channels == 0 ||
        image.data.size() != image.height * image.width * image.channels)
        throw ImageError("image buffer does not match its " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + "x" + std::to_string(image.channels) + " shape");
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
    check_shape(image);
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = format_for_channels(image.channels);
    std::vector<std::uint8_t> pixels(image.data.size());
    std::transform(image.data.begin(), image.data.end(), pixels.begin(), quantize);

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr))
        throw ImageError(std::string("PNG encode failed: ") + png.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr))
        throw ImageError(std::string("PNG encode failed: ") + png.message);
    out.resize(size);
    return out;
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
        throw ImageError(std::string("not a readable PNG: ") + png.message);
    std::size_t channels = PNG_IMAGE_SAMPLE_CHANNELS(png.format);
    png.format = format_for_channels(channels);
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
        png_image_free(&png);
        throw ImageError(std::string("PNG decode failed: ") + png.message);
    }
    Image image(png.height, png.width, channels);
    for (std::size_t i = 0; i < pixels.size(); ++i) image.data[i] = pixels[i] / 255.0;
    return image;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    const auto bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ImageError("failed writing '" + path.string() + "'");
}

Image read_png(const std::filesystem::path& path) {
    try {
        return decode_png(read_bytes(path));
    } catch (const ImageError& e) {
        throw ImageError(path.string() + ": " + e.what());
    }
}

void write_raw(const std::filesystem::path& path, const Image& image) {
    check_shape(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageError("cannot open '" + path.string() + "' for writing");
    out << "dvit-raw " << image.height << ' ' << image.width << ' ' << image.channels << '\n';
    std::vector<float> narrow(image.data.begin(), image.data.end());
    out.write(reinterpret_cast<const char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    if (!out) throw ImageError("failed writing '" + path.string() + "'");
}

Image read_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open image '" + path.string() + "'");
    std::string header;
    std::getline(in, header);
    std::istringstream fields(header);
    std::string magic;
    std::size_t h = 0, w = 0, c = 0;
    if (!(fields >> magic >> h >> w >> c) || magic != "dvit-raw" || h == 0 || w == 0 || c == 0)
        throw ImageError("malformed raw image header in '" + path.string() + "'");
    std::vector<float> narrow(h * w * c);
    in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * sizeof(float)));
    if (!in) throw ImageError("raw image '" + path.string() + "' is truncated");
    Image image(h, w, c);
    std::copy(narrow.begin(), narrow.end(), image.data.begin());
    return image;
}

Image load_image(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".png" || ext == ".PNG") return read_png(path);
    if (ext == ".raw") return read_raw(path);
    throw ImageError("unsupported image extension '" + ext + "' for '" + path.string() + "'");
}

void save_image(const std::filesystem::path& path, const Image& image) {
    const auto ext = path.extension().string();
    if (ext == ".png" || ext == ".PNG") return write_png(path, image);
    if (ext == ".raw") return write_raw(path, image);
    throw ImageError("unsupported image extension '" + ext + "' for '" + path.string() + "'");
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
    check_shape(image);
    if (height == 0 || width == 0) throw ImageError("resize target must be non-empty");
    if (height == image.height && width == image.width) return image;
    struct Tap {
        std::size_t i0, i1;
        double f;
    };
    auto taps = [](std::size_t out, std::size_t in) {
        std::vector<Tap> t(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in - 1));
            const auto i0 = static_cast<std::size_t>(std::floor(s));
            const std::size_t i1 = std::min(i0 + 1, in - 1);
            t[o] = {i0, i1, s - static_cast<double>(i0)};
        }
        return t;
    };
    const auto ty = taps(height, image.height);
    const auto tx = taps(width, image.width);
    Image out(height, width, image.channels);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const auto& a = ty[y];
            const auto& b = tx[x];
            for (std::size_t c = 0; c < image.channels; ++c) {
                const double top = image.at(a.i0, b.i0, c) * (1.0 - b.f) + image.at(a.i0, b.i1, c) * b.f;
                const double bot = image.at(a.i1, b.i0, c) * (1.0 - b.f) + image.at(a.i1, b.i1, c) * b.f;
                out.at(y, x, c) = top * (1.0 - a.f) + bot * a.f;
            }
        }
    }
    return out;
}

Tensor to_gray255(const Image& image) {
    check_shape(image);
    std::vector<double> gray(image.height * image.width);
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const double* px = image.data.data() + i * image.channels;
        const double v = image.channels >= 3 ? 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2] : px[0];
        gray[i] = 255.0 * v;
    }
    return Tensor::from({image.height, image.width}, std::move(gray));
}

void NormalizationSpec::validate() const {
    for (double s : std)
        if (!(s > 0.0)) throw std::invalid_argument("normalization std components must be positive");
    if (size == 0) throw std::invalid_argument("normalization target size must be positive");
}

Tensor normalize_image(const Image& image, const NormalizationSpec& spec) {
    spec.validate();
    if (image.channels != 3)
        throw ImageError("expected an RGB image, got " + std::to_string(image.channels) + " channel(s)");
    const Image sized = resize_bilinear(image, spec.size, spec.size);
    const std::size_t plane = spec.size * spec.size;
    std::vector<double> out(3 * plane);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = (sized.data[i * 3 + c] - spec.mean[c]) / spec.std[c];
    return Tensor::from({3, spec.size, spec.size}, std::move(out));
}

Tensor decode_and_normalize(const std::filesystem::path& path, const NormalizationSpec& spec) {
    const Image image = load_image(path);
    if (image.channels != 3)
        throw ImageError("'" + path.string() + "' is not RGB (" + std::to_string(image.channels) + " channel(s))");
    return normalize_image(image, spec);
}

}  // namespace dvit
