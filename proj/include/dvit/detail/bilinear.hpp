#pragma once

#include <cmath>

namespace dvit::detail {

// Bilinear interpolation taps with zero padding. A point contributes only
// when it lies strictly inside (-1, H) x (-1, W); neighbours that fall
// outside the grid read as zero.
struct BilinearTaps {
    bool valid = false;
    long y[4] = {0, 0, 0, 0};
    long x[4] = {0, 0, 0, 0};
    bool inside[4] = {false, false, false, false};
    double w[4] = {0, 0, 0, 0};   // interpolation weights
    double dy[4] = {0, 0, 0, 0};  // d weight / d py
    double dx[4] = {0, 0, 0, 0};  // d weight / d px
};

inline BilinearTaps bilinear_taps(double py, double px, long height, long width) {
    BilinearTaps t;
    if (!(py > -1.0 && px > -1.0 && py < static_cast<double>(height) && px < static_cast<double>(width))) return t;
    t.valid = true;
    const double fy = std::floor(py);
    const double fx = std::floor(px);
    const long y0 = static_cast<long>(fy);
    const long x0 = static_cast<long>(fx);
    const double ly = py - fy, lx = px - fx;
    const double hy = 1.0 - ly, hx = 1.0 - lx;
    const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const double w[4] = {hy * hx, hy * lx, ly * hx, ly * lx};
    const double dy[4] = {-hx, -lx, hx, lx};
    const double dx[4] = {-hy, hy, -ly, ly};
    for (int i = 0; i < 4; ++i) {
        t.y[i] = ys[i];
        t.x[i] = xs[i];
        t.inside[i] = ys[i] >= 0 && ys[i] < height && xs[i] >= 0 && xs[i] < width;
        t.w[i] = w[i];
        t.dy[i] = dy[i];
        t.dx[i] = dx[i];
    }
    return t;
}

}  // namespace dvit::detail
