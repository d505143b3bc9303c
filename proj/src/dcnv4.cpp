#include "dvit/dcnv4.hpp"

#include <cmath>
#include <stdexcept>

#include "dvit/detail/bilinear.hpp"

namespace dvit {

std::size_t Dcnv4Config::default_groups(std::size_t channels) { return std::max<std::size_t>(1, channels / 16); }

Dcnv4Config Dcnv4Config::for_channels(std::size_t channels) {
    Dcnv4Config cfg;
    cfg.channels = channels;
    cfg.groups = default_groups(channels);
    return cfg;
}

std::size_t Dcnv4Config::kernel_side() const {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(kernel_points))));
    return side;
}

void Dcnv4Config::validate() const {
    if (channels == 0 || groups == 0 || channels % groups != 0)
        throw std::invalid_argument("DCNv4 channels (" + std::to_string(channels) + ") must be divisible by groups (" +
                                    std::to_string(groups) + ")");
    const std::size_t side = kernel_side();
    if (kernel_points == 0 || side * side != kernel_points || side % 2 == 0)
        throw std::invalid_argument("DCNv4 kernel_points must be an odd perfect square, got " +
                                    std::to_string(kernel_points));
    if (!(offset_scale > 0.0)) throw std::invalid_argument("DCNv4 offset_scale must be positive");
    if (droppath_rate < 0.0 || droppath_rate >= 1.0) throw std::invalid_argument("DCNv4 droppath_rate must be in [0, 1)");
    if (!(mlp_ratio > 0.0)) throw std::invalid_argument("DCNv4 mlp_ratio must be positive");
}

Dcnv4Params::Dcnv4Params(const Dcnv4Config& cfg, Rng& rng)
    : value(cfg.channels, cfg.channels, rng),
      offset_mod(cfg.channels, cfg.groups * cfg.kernel_points * 3, rng),
      output(cfg.channels, cfg.channels, rng) {}

void Dcnv4Params::collect(const std::string& prefix, ParameterList& out) const {
    value.collect(prefix + ".value", out);
    offset_mod.collect(prefix + ".offset_mod", out);
    output.collect(prefix + ".output", out);
}

std::pair<double, double> reference_point(std::size_t k, std::size_t side) {
    const double half = static_cast<double>(side - 1) / 2.0;
    return {static_cast<double>(k / side) - half, static_cast<double>(k % side) - half};
}

namespace {

struct AggGeometry {
    std::size_t n, h, w, c, groups, k, side;
    double offset_scale;
    std::size_t cg() const { return c / groups; }
    std::size_t om_width() const { return groups * 3 * k; }
};

// Scatters d(out) into values and (offset, modulation) predictions.
void aggregate_backward(const AggGeometry& g, Node& self) {
    Node& vn = *self.parents[0];
    Node& on = *self.parents[1];
    std::span<double> gv = vn.requires_grad ? vn.ensure_grad() : std::span<double>{};
    std::span<double> go = on.requires_grad ? on.ensure_grad() : std::span<double>{};
    const long hh = static_cast<long>(g.h), ww = static_cast<long>(g.w);
    const std::size_t cg = g.cg();
    for (std::size_t b = 0; b < g.n; ++b) {
        const std::size_t vbase = b * g.h * g.w * g.c;
        for (std::size_t py = 0; py < g.h; ++py) {
            for (std::size_t px = 0; px < g.w; ++px) {
                const std::size_t loc = (b * g.h + py) * g.w + px;
                const double* gout = self.grad.data() + loc * g.c;
                for (std::size_t grp = 0; grp < g.groups; ++grp) {
                    const std::size_t gbase = loc * g.om_width() + grp * 3 * g.k;
                    const double* gp = on.data.data() + gbase;
                    for (std::size_t k = 0; k < g.k; ++k) {
                        const auto [ry, rx] = reference_point(k, g.side);
                        const double sy = static_cast<double>(py) + ry + g.offset_scale * gp[2 * k];
                        const double sx = static_cast<double>(px) + rx + g.offset_scale * gp[2 * k + 1];
                        const double m = gp[2 * g.k + k];
                        const auto taps = detail::bilinear_taps(sy, sx, hh, ww);
                        if (!taps.valid) continue;
                        double d_m = 0.0, d_sy = 0.0, d_sx = 0.0;
                        for (int t = 0; t < 4; ++t) {
                            if (!taps.inside[t]) continue;
                            const std::size_t src = vbase + static_cast<std::size_t>(taps.y[t] * ww + taps.x[t]) * g.c + grp * cg;
                            double dot = 0.0;
                            for (std::size_t ch = 0; ch < cg; ++ch) {
                                const double go_ch = gout[grp * cg + ch];
                                dot += go_ch * vn.data[src + ch];
                                if (!gv.empty()) gv[src + ch] += m * taps.w[t] * go_ch;
                            }
                            d_m += taps.w[t] * dot;
                            d_sy += taps.dy[t] * dot;
                            d_sx += taps.dx[t] * dot;
                        }
                        if (!go.empty()) {
                            go[gbase + 2 * k] += m * d_sy * g.offset_scale;
                            go[gbase + 2 * k + 1] += m * d_sx * g.offset_scale;
                            go[gbase + 2 * g.k + k] += d_m;
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor dcn_aggregate(const Tensor& value, const Tensor& offset_mod, std::size_t groups, std::size_t kernel_points,
                     double offset_scale) {
    if (value.rank() != 4) throw ShapeError("dcn_aggregate expects N x H x W x C values, got " + shape_str(value.shape()));
    AggGeometry g{};
    g.n = value.shape()[0];
    g.h = value.shape()[1];
    g.w = value.shape()[2];
    g.c = value.shape()[3];
    g.groups = groups;
    g.k = kernel_points;
    g.offset_scale = offset_scale;
    Dcnv4Config probe;
    probe.channels = g.c;
    probe.groups = groups;
    probe.kernel_points = kernel_points;
    probe.offset_scale = offset_scale;
    probe.validate();
    g.side = probe.kernel_side();
    const Shape expected{g.n, g.h, g.w, g.om_width()};
    if (offset_mod.shape() != expected)
        throw ShapeError("dcn_aggregate offset/modulation shape " + shape_str(offset_mod.shape()) + " does not match " +
                         shape_str(expected));

    const long hh = static_cast<long>(g.h), ww = static_cast<long>(g.w);
    const std::size_t cg = g.cg();
    auto v = value.data();
    auto om = offset_mod.data();
    std::vector<double> y(value.numel(), 0.0);
    for (std::size_t b = 0; b < g.n; ++b) {
        const double* vb = v.data() + b * g.h * g.w * g.c;
        for (std::size_t py = 0; py < g.h; ++py) {
            for (std::size_t px = 0; px < g.w; ++px) {
                const std::size_t loc = (b * g.h + py) * g.w + px;
                const double* params = om.data() + loc * g.om_width();
                double* out = y.data() + loc * g.c;
                for (std::size_t grp = 0; grp < g.groups; ++grp) {
                    const double* gp = params + grp * 3 * g.k;
                    for (std::size_t k = 0; k < g.k; ++k) {
                        const auto [ry, rx] = reference_point(k, g.side);
                        const double sy = static_cast<double>(py) + ry + g.offset_scale * gp[2 * k];
                        const double sx = static_cast<double>(px) + rx + g.offset_scale * gp[2 * k + 1];
                        const double m = gp[2 * g.k + k];
                        const auto taps = detail::bilinear_taps(sy, sx, hh, ww);
                        if (!taps.valid) continue;
                        for (int t = 0; t < 4; ++t) {
                            if (!taps.inside[t]) continue;
                            const double wgt = m * taps.w[t];
                            const double* src = vb + static_cast<std::size_t>(taps.y[t] * ww + taps.x[t]) * g.c + grp * cg;
                            double* dst = out + grp * cg;
                            for (std::size_t ch = 0; ch < cg; ++ch) dst[ch] += wgt * src[ch];
                        }
                    }
                }
            }
        }
    }
    if (!detail::should_record({&value, &offset_mod})) return detail::make_result(value.shape(), std::move(y));
    return detail::make_recorded(value.shape(), std::move(y), "dcn_aggregate", {value.node_ptr(), offset_mod.node_ptr()},
                                 [g](Node& self) { aggregate_backward(g, self); });
}

Tensor dcnv4_tokens(const Tensor& x_nhwc, const Dcnv4Params& params, const Dcnv4Config& cfg) {
    if (x_nhwc.rank() != 4 || x_nhwc.shape()[3] != cfg.channels)
        throw ShapeError("DCNv4 expects N x H x W x " + std::to_string(cfg.channels) + " tokens, got " +
                         shape_str(x_nhwc.shape()));
    Tensor value = params.value.forward(x_nhwc);
    Tensor offset_mod = params.offset_mod.forward(x_nhwc);
    Tensor aggregated = dcn_aggregate(value, offset_mod, cfg.groups, cfg.kernel_points, cfg.offset_scale);
    return params.output.forward(aggregated);
}

Tensor dcnv4_forward(const Tensor& x_nchw, const Dcnv4Params& params, const Dcnv4Config& cfg) {
    cfg.validate();
    if (x_nchw.rank() != 4 || x_nchw.shape()[1] != cfg.channels)
        throw ShapeError("DCNv4 expects N x " + std::to_string(cfg.channels) + " x H x W input, got " +
                         shape_str(x_nchw.shape()));
    Tensor tokens = permute(x_nchw, {0, 2, 3, 1});
    return permute(dcnv4_tokens(tokens, params, cfg), {0, 3, 1, 2});
}

Dcnv4Block::Dcnv4Block(const Dcnv4Config& cfg_, Rng& rng)
    : cfg(cfg_),
      norm1(cfg_.channels),
      dcn(cfg_, rng),
      norm2(cfg_.channels),
      mlp(cfg_.channels, static_cast<std::size_t>(std::lround(cfg_.channels * cfg_.mlp_ratio)), rng) {
    if (cfg.layer_scale_init) {
        gamma1 = Tensor::full({cfg.channels}, *cfg.layer_scale_init, true);
        gamma2 = Tensor::full({cfg.channels}, *cfg.layer_scale_init, true);
    }
}

Tensor Dcnv4Block::forward_tokens(const Tensor& x, const ForwardContext& ctx) const {
    Tensor branch = dcnv4_tokens(norm1.forward(x), dcn, cfg);
    if (gamma1.defined()) branch = mul(branch, gamma1);
    Tensor h = add(x, droppath(branch, cfg.droppath_rate, ctx.training, ctx.rng));
    Tensor branch2 = mlp.forward(norm2.forward(h), ctx);
    if (gamma2.defined()) branch2 = mul(branch2, gamma2);
    return add(h, droppath(branch2, cfg.droppath_rate, ctx.training, ctx.rng));
}

Tensor Dcnv4Block::forward(const Tensor& x_nchw, const ForwardContext& ctx) const {
    Tensor tokens = permute(x_nchw, {0, 2, 3, 1});
    return permute(forward_tokens(tokens, ctx), {0, 3, 1, 2});
}

void Dcnv4Block::collect(const std::string& prefix, ParameterList& out) const {
    norm1.collect(prefix + ".norm1", out);
    dcn.collect(prefix + ".dcn", out);
    if (gamma1.defined()) out.push_back({prefix + ".gamma1", gamma1, false, true});
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
    if (gamma2.defined()) out.push_back({prefix + ".gamma2", gamma2, false, true});
}

}  // namespace dvit
