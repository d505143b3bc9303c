#include "dvit/canny.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dvit {

std::size_t EdgeMap::count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

Image EdgeMap::to_image() const {
    Image image(height, width, 1);
    for (std::size_t i = 0; i < mask.size(); ++i) image.data[i] = mask[i] ? 1.0 : 0.0;
    return image;
}

std::vector<double> gaussian_kernel5(double sigma) {
    std::vector<double> k(25);
    double total = 0.0;
    for (int y = -2; y <= 2; ++y)
        for (int x = -2; x <= 2; ++x) {
            const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
            k[(y + 2) * 5 + (x + 2)] = v;
            total += v;
        }
    for (double& v : k) v /= total;
    return k;
}

namespace {

struct Plane {
    long h, w;
    std::vector<double> v;
    // Replicated border.
    double clamped(long y, long x) const {
        y = std::clamp(y, 0L, h - 1);
        x = std::clamp(x, 0L, w - 1);
        return v[static_cast<std::size_t>(y * w + x)];
    }
    double zero_padded(long y, long x) const {
        if (y < 0 || x < 0 || y >= h || x >= w) return 0.0;
        return v[static_cast<std::size_t>(y * w + x)];
    }
};

}  // namespace

EdgeMap canny_edges(const Tensor& gray, double low, double high) {
    if (gray.rank() != 2) throw ShapeError("canny_edges expects an H x W image, got " + shape_str(gray.shape()));
    if (!(low < high)) throw std::invalid_argument("canny thresholds must satisfy low < high");
    const long h = static_cast<long>(gray.dim(0)), w = static_cast<long>(gray.dim(1));
    const Plane src{h, w, gray.to_vector()};

    const auto kernel = gaussian_kernel5();
    Plane blur{h, w, std::vector<double>(src.v.size())};
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -2; dy <= 2; ++dy)
                for (int dx = -2; dx <= 2; ++dx) acc += kernel[(dy + 2) * 5 + (dx + 2)] * src.clamped(y + dy, x + dx);
            blur.v[static_cast<std::size_t>(y * w + x)] = acc;
        }

    Plane mag{h, w, std::vector<double>(src.v.size())};
    std::vector<double> gx(src.v.size()), gy(src.v.size());
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            auto p = [&](long dy, long dx) { return blur.clamped(y + dy, x + dx); };
            const double sx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
            const double sy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
            const auto i = static_cast<std::size_t>(y * w + x);
            gx[i] = sx;
            gy[i] = sy;
            mag.v[i] = std::hypot(sx, sy);
        }

    static const double tan22 = std::tan(M_PI / 8.0);
    static const double tan67 = std::tan(3.0 * M_PI / 8.0);
    std::vector<double> thin(src.v.size(), 0.0);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            const auto i = static_cast<std::size_t>(y * w + x);
            const double ax = std::abs(gx[i]), ay = std::abs(gy[i]);
            long dy = 1, dx = 1;
            if (ay <= tan22 * ax)
                dy = 0;
            else if (ay > tan67 * ax)
                dx = 0;
            else if (gx[i] * gy[i] <= 0)
                dx = -1;
            const double m = mag.v[i];
            // strict behind, non-strict ahead: a two-pixel plateau keeps one
            if (m > mag.zero_padded(y - dy, x - dx) && m >= mag.zero_padded(y + dy, x + dx)) thin[i] = m;
        }

    EdgeMap edges;
    edges.height = static_cast<std::size_t>(h);
    edges.width = static_cast<std::size_t>(w);
    edges.low = low;
    edges.high = high;
    edges.mask.assign(src.v.size(), 0);
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < thin.size(); ++i) {
        if (thin[i] < high || edges.mask[i]) continue;
        edges.mask[i] = 1;
        stack.push_back(i);
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            const long cy = static_cast<long>(cur) / w, cx = static_cast<long>(cur) % w;
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                    const long ny = cy + dy, nx = cx + dx;
                    if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                    const auto n = static_cast<std::size_t>(ny * w + nx);
                    if (!edges.mask[n] && thin[n] >= low) {
                        edges.mask[n] = 1;
                        stack.push_back(n);
                    }
                }
        }
    }
    return edges;
}

}  // namespace dvit
