#include "dvit/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

#include "dvit/detail/bilinear.hpp"

namespace dvit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::span<double> grad_of(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return {};
    return p.ensure_grad();
}

struct ConvGeometry {
    std::size_t n, c, h, w, co, k, stride, pad, ho, wo;
};

// col is (C*k*k) x (Ho*Wo) for one image.
void im2col(const double* img, const ConvGeometry& g, double* col) {
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = col + ((c * g.k + ky) * g.k + kx) * plane;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        const bool in = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w);
                        row[oy * g.wo + ox] = in ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, const ConvGeometry& g, double* img) {
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = col + ((c * g.k + ky) * g.k + kx) * plane;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

Eigen::Index ei(std::size_t v) { return static_cast<Eigen::Index>(v); }

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    if (x.rank() != 4) throw ShapeError("conv2d expects NCHW input, got " + shape_str(x.shape()));
    if (weight.rank() != 4 || weight.shape()[2] != weight.shape()[3])
        throw ShapeError("conv2d expects square (out, in, k, k) weights, got " + shape_str(weight.shape()));
    if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
    ConvGeometry g{};
    g.n = x.shape()[0];
    g.c = x.shape()[1];
    g.h = x.shape()[2];
    g.w = x.shape()[3];
    g.co = weight.shape()[0];
    g.k = weight.shape()[2];
    g.stride = stride;
    g.pad = padding;
    if (weight.shape()[1] != g.c)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
    if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k)
        throw ShapeError("conv2d output would be empty for input " + shape_str(x.shape()) + " and kernel " +
                         std::to_string(g.k));
    const bool has_bias = bias.defined();
    if (has_bias && bias.numel() != g.co) throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " does not match");
    g.ho = (g.h + 2 * padding - g.k) / stride + 1;
    g.wo = (g.w + 2 * padding - g.k) / stride + 1;

    const std::size_t ckk = g.c * g.k * g.k;
    const std::size_t plane = g.ho * g.wo;
    std::vector<double> col(ckk * plane);
    std::vector<double> y(g.n * g.co * plane);
    ConstMap W(weight.data().data(), ei(g.co), ei(ckk));
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(x.data().data() + n * g.c * g.h * g.w, g, col.data());
        MutMap Y(y.data() + n * g.co * plane, ei(g.co), ei(plane));
        Y.noalias() = W * ConstMap(col.data(), ei(ckk), ei(plane));
        if (has_bias)
            Y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), ei(g.co));
    }
    Shape out_shape{g.n, g.co, g.ho, g.wo};
    const bool record = has_bias ? detail::should_record({&x, &weight, &bias}) : detail::should_record({&x, &weight});
    if (!record) return detail::make_result(std::move(out_shape), std::move(y));
    std::vector<std::shared_ptr<Node>> parents{x.node_ptr(), weight.node_ptr()};
    if (has_bias) parents.push_back(bias.node_ptr());
    return detail::make_recorded(std::move(out_shape), std::move(y), "conv2d", std::move(parents), [g, has_bias](Node& self) {
        const std::size_t ckk = g.c * g.k * g.k;
        const std::size_t plane = g.ho * g.wo;
        auto gx = grad_of(self, 0);
        auto gw = grad_of(self, 1);
        std::span<double> gb = has_bias ? grad_of(self, 2) : std::span<double>{};
        const double* xd = self.parents[0]->data.data();
        ConstMap W(self.parents[1]->data.data(), ei(g.co), ei(ckk));
        std::vector<double> col(ckk * plane);
        std::vector<double> dcol(ckk * plane);
        for (std::size_t n = 0; n < g.n; ++n) {
            ConstMap G(self.grad.data() + n * g.co * plane, ei(g.co), ei(plane));
            if (!gw.empty()) {
                im2col(xd + n * g.c * g.h * g.w, g, col.data());
                MutMap(gw.data(), ei(g.co), ei(ckk)).noalias() += G * ConstMap(col.data(), ei(ckk), ei(plane)).transpose();
            }
            if (!gx.empty()) {
                MutMap(dcol.data(), ei(ckk), ei(plane)).noalias() = W.transpose() * G;
                col2im(dcol.data(), g, gx.data() + n * g.c * g.h * g.w);
            }
            if (!gb.empty()) Eigen::Map<Eigen::VectorXd>(gb.data(), ei(g.co)) += G.rowwise().sum();
        }
    });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum, double eps) {
    if (x.rank() != 4) throw ShapeError("batch_norm2d expects NCHW input, got " + shape_str(x.shape()));
    if (!(eps > 0.0)) throw std::invalid_argument("batch_norm2d eps must be positive");
    const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
        throw ShapeError("batch_norm2d parameters do not match " + shape_str(x.shape()));
    if (training && n < 2) throw std::invalid_argument("batch_norm2d needs a batch of at least 2 in training mode");
    const std::size_t m = n * plane;
    auto xd = x.data();
    std::vector<double> mu(c), inv_std(c);
    if (training) {
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < plane; ++i) s += xd[(b * c + ch) * plane + i];
            const double mean = s / static_cast<double>(m);
            double ss = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = xd[(b * c + ch) * plane + i] - mean;
                    ss += d * d;
                }
            const double var = ss / static_cast<double>(m);
            mu[ch] = mean;
            inv_std[ch] = 1.0 / std::sqrt(var + eps);
            rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean;
            rv[ch] = (1.0 - momentum) * rv[ch] + momentum * ss / static_cast<double>(m - 1);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = running_mean.data()[ch];
            inv_std[ch] = 1.0 / std::sqrt(running_var.data()[ch] + eps);
        }
    }
    std::vector<double> xhat(x.numel()), y(x.numel());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t j = (b * c + ch) * plane + i;
                xhat[j] = (xd[j] - mu[ch]) * inv_std[ch];
                y[j] = gamma.data()[ch] * xhat[j] + beta.data()[ch];
            }
    if (!detail::should_record({&x, &gamma, &beta})) return detail::make_result(x.shape(), std::move(y));
    return detail::make_recorded(
        x.shape(), std::move(y), "batch_norm2d", {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
        [n, c, plane, m, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            auto gx = grad_of(self, 0);
            auto gg = grad_of(self, 1);
            auto gb = grad_of(self, 2);
            const auto& gamma = self.parents[1]->data;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t j = (b * c + ch) * plane + i;
                        sum_g += self.grad[j];
                        sum_gx += self.grad[j] * xhat[j];
                    }
                if (!gg.empty()) gg[ch] += sum_gx;
                if (!gb.empty()) gb[ch] += sum_g;
                if (gx.empty()) continue;
                const double scale = gamma[ch] * inv_std[ch];
                const double inv_m = 1.0 / static_cast<double>(m);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t i = 0; i < plane; ++i) {
                        const std::size_t j = (b * c + ch) * plane + i;
                        if (training)
                            gx[j] += scale * (self.grad[j] - inv_m * sum_g - xhat[j] * inv_m * sum_gx);
                        else
                            gx[j] += scale * self.grad[j];
                    }
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("layer_norm eps must be positive");
    const std::size_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm parameters of size " + std::to_string(gamma.numel()) + " do not match " +
                         shape_str(x.shape()));
    const std::size_t rows = x.numel() / d;
    auto xd = x.data();
    std::vector<double> xhat(x.numel()), y(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += row[i];
        const double mean = s / static_cast<double>(d);
        double ss = 0.0;
        for (std::size_t i = 0; i < d; ++i) ss += (row[i] - mean) * (row[i] - mean);
        inv_std[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        for (std::size_t i = 0; i < d; ++i) {
            xhat[r * d + i] = (row[i] - mean) * inv_std[r];
            y[r * d + i] = gamma.data()[i] * xhat[r * d + i] + beta.data()[i];
        }
    }
    if (!detail::should_record({&x, &gamma, &beta})) return detail::make_result(x.shape(), std::move(y));
    return detail::make_recorded(
        x.shape(), std::move(y), "layer_norm", {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            auto gx = grad_of(self, 0);
            auto gg = grad_of(self, 1);
            auto gb = grad_of(self, 2);
            const auto& gamma = self.parents[1]->data;
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    const std::size_t j = r * d + i;
                    const double g = self.grad[j];
                    if (!gg.empty()) gg[i] += g * xhat[j];
                    if (!gb.empty()) gb[i] += g;
                    const double dxh = g * gamma[i];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[j];
                }
                if (gx.empty()) continue;
                for (std::size_t i = 0; i < d; ++i) {
                    const std::size_t j = r * d + i;
                    const double dxh = self.grad[j] * gamma[i];
                    gx[j] += inv_std[r] * (dxh - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
                }
            }
        });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng* rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    if (!rng) throw std::invalid_argument("dropout in training mode needs an Rng");
    std::vector<double> mask(x.numel());
    const double keep = 1.0 - rate;
    for (double& v : mask) v = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor droppath(const Tensor& x, double rate, bool training, Rng* rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("droppath rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    if (!rng) throw std::invalid_argument("droppath in training mode needs an Rng");
    Shape mask_shape(x.rank(), 1);
    mask_shape[0] = x.shape()[0];
    std::vector<double> mask(x.shape()[0]);
    const double keep = 1.0 - rate;
    for (double& v : mask) v = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return mul(x, Tensor::from(std::move(mask_shape), std::move(mask)));
}

Tensor bilinear_sample(const Tensor& feature, const Tensor& points) {
    if (feature.rank() != 3) throw ShapeError("bilinear_sample expects a C x H x W feature, got " + shape_str(feature.shape()));
    if (points.rank() != 2 || points.shape()[1] != 2)
        throw ShapeError("bilinear_sample expects K x 2 points, got " + shape_str(points.shape()));
    const std::size_t c = feature.shape()[0];
    const long h = static_cast<long>(feature.shape()[1]);
    const long w = static_cast<long>(feature.shape()[2]);
    const std::size_t k = points.shape()[0];
    const std::size_t plane = static_cast<std::size_t>(h * w);
    auto f = feature.data();
    auto p = points.data();
    std::vector<double> y(c * k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        const auto taps = detail::bilinear_taps(p[2 * j], p[2 * j + 1], h, w);
        if (!taps.valid) continue;
        for (int t = 0; t < 4; ++t) {
            if (!taps.inside[t]) continue;
            const std::size_t off = static_cast<std::size_t>(taps.y[t] * w + taps.x[t]);
            for (std::size_t ch = 0; ch < c; ++ch) y[ch * k + j] += taps.w[t] * f[ch * plane + off];
        }
    }
    if (!detail::should_record({&feature, &points})) return detail::make_result({c, k}, std::move(y));
    return detail::make_recorded({c, k}, std::move(y), "bilinear_sample", {feature.node_ptr(), points.node_ptr()},
                                 [c, h, w, k, plane](Node& self) {
                                     auto gf = grad_of(self, 0);
                                     auto gp = grad_of(self, 1);
                                     const auto& f = self.parents[0]->data;
                                     const auto& p = self.parents[1]->data;
                                     for (std::size_t j = 0; j < k; ++j) {
                                         const auto taps = detail::bilinear_taps(p[2 * j], p[2 * j + 1], h, w);
                                         if (!taps.valid) continue;
                                         for (int t = 0; t < 4; ++t) {
                                             if (!taps.inside[t]) continue;
                                             const std::size_t off = static_cast<std::size_t>(taps.y[t] * w + taps.x[t]);
                                             for (std::size_t ch = 0; ch < c; ++ch) {
                                                 const double g = self.grad[ch * k + j];
                                                 if (!gf.empty()) gf[ch * plane + off] += taps.w[t] * g;
                                                 if (!gp.empty()) {
                                                     gp[2 * j] += taps.dy[t] * f[ch * plane + off] * g;
                                                     gp[2 * j + 1] += taps.dx[t] * f[ch * plane + off] * g;
                                                 }
                                             }
                                         }
                                     }
                                 });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects N x C logits, got " + shape_str(logits.shape()));
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    if (labels.size() != n) throw ShapeError("cross_entropy label count does not match batch " + shape_str(logits.shape()));
    for (auto l : labels) {
        if (l >= c) throw std::out_of_range("label " + std::to_string(l) + " out of range for " + std::to_string(c) + " classes");
    }
    auto x = logits.data();
    std::vector<double> prob(n * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        loss -= row[labels[i]] - lse;
        for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - lse);
    }
    loss /= static_cast<double>(n);
    if (!detail::should_record({&logits})) return detail::make_result({1}, {loss});
    return detail::make_recorded({1}, {loss}, "cross_entropy", {logits.node_ptr()},
                                 [n, c, labels, prob = std::move(prob)](Node& self) {
                                     auto gl = grad_of(self, 0);
                                     const double g = self.grad[0] / static_cast<double>(n);
                                     for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < c; ++j)
                                             gl[i * c + j] += g * (prob[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
                                 });
}

// ---- layers ---------------------------------------------------------------

void init_truncated_normal(Tensor& t, Rng& rng, double std) {
    for (double& v : t.mutable_data()) v = rng.truncated_normal(std);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : weight(Tensor::zeros({out, in}, true)) {
    init_truncated_normal(weight, rng);
    if (with_bias) bias = Tensor::zeros({out}, true);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight, true, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, false, true});
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_, Rng& rng)
    : weight(Tensor::zeros({out, in, kernel, kernel}, true)),
      bias(Tensor::zeros({out}, true)),
      stride(stride_),
      padding(padding_) {
    init_truncated_normal(weight, rng);
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight, true, true});
    out.push_back({prefix + ".bias", bias, false, true});
}

BatchNorm2d::BatchNorm2d(std::size_t channels, double eps_)
    : gamma(Tensor::ones({channels}, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::ones({channels})),
      eps(eps_) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
}

void BatchNorm2d::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", gamma, false, true});
    out.push_back({prefix + ".bias", beta, false, true});
    out.push_back({prefix + ".running_mean", running_mean, false, false});
    out.push_back({prefix + ".running_var", running_var, false, false});
}

LayerNorm::LayerNorm(std::size_t dim, double eps_)
    : gamma(Tensor::ones({dim}, true)), beta(Tensor::zeros({dim}, true)), eps(eps_) {}

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", gamma, false, true});
    out.push_back({prefix + ".bias", beta, false, true});
}

Mlp::Mlp(std::size_t dim, std::size_t hidden, Rng& rng, double dropout_rate_)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng), dropout_rate(dropout_rate_) {}

Tensor Mlp::forward(const Tensor& x, const ForwardContext& ctx) const {
    Tensor h = dropout(gelu(fc1.forward(x)), dropout_rate, ctx.training, ctx.rng);
    return dropout(fc2.forward(h), dropout_rate, ctx.training, ctx.rng);
}

void Mlp::collect(const std::string& prefix, ParameterList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

MultiheadAttention::MultiheadAttention(std::size_t dim, std::size_t heads_, std::size_t head_dim_, Rng& rng,
                                       double attn_dropout_)
    : qkv(dim, 3 * heads_ * head_dim_, rng),
      proj(heads_ * head_dim_, dim, rng),
      heads(heads_),
      head_dim(head_dim_),
      attn_dropout(attn_dropout_) {}

Tensor MultiheadAttention::forward(const Tensor& tokens, const ForwardContext& ctx) const {
    const bool batched = tokens.rank() == 3;
    if (!batched && tokens.rank() != 2)
        throw ShapeError("attention expects (T, D) or (N, T, D) tokens, got " + shape_str(tokens.shape()));
    const Tensor x = batched ? tokens : reshape(tokens, {1, tokens.shape()[0], tokens.shape()[1]});
    const std::size_t n = x.shape()[0], t = x.shape()[1];
    const std::size_t inner = heads * head_dim;

    // (N, T, 3, H, hd) -> (3, N, H, T, hd)
    Tensor packed = permute(reshape(qkv.forward(x), {n, t, 3, heads, head_dim}), {2, 0, 3, 1, 4});
    auto part = [&](std::size_t i) { return reshape(slice(packed, 0, i, 1), {n * heads, t, head_dim}); };
    Tensor q = part(0), k = part(1), v = part(2);

    Tensor scores = mul_scalar(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    Tensor weights = dropout(softmax(scores, 2), attn_dropout, ctx.training, ctx.rng);
    Tensor mixed = matmul(weights, v);  // (N*H, T, hd)
    mixed = reshape(permute(reshape(mixed, {n, heads, t, head_dim}), {0, 2, 1, 3}), {n, t, inner});
    Tensor out = proj.forward(mixed);
    return batched ? out : reshape(out, {t, out.shape()[2]});
}

void MultiheadAttention::collect(const std::string& prefix, ParameterList& out) const {
    qkv.collect(prefix + ".qkv", out);
    proj.collect(prefix + ".proj", out);
}

// ---- optimizer ------------------------------------------------------------

OptimizerState OptimizerState::for_parameters(const ParameterList& params, AdamWConfig config) {
    OptimizerState state;
    state.config = config;
    for (const auto& p : params) {
        if (!p.trainable) continue;
        state.names.push_back(p.name);
        state.first_moment.emplace_back(p.tensor.numel(), 0.0);
        state.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
    return state;
}

void adamw_step(OptimizerState& state, ParameterList& params) {
    const auto& cfg = state.config;
    std::size_t slot = 0;
    for (auto& p : params) {
        if (!p.trainable) continue;
        if (slot >= state.names.size() || state.names[slot] != p.name)
            throw std::invalid_argument("optimizer state does not match parameter '" + p.name + "'");
        if (!p.tensor.has_grad()) throw std::invalid_argument("missing gradient for parameter '" + p.name + "'");
        if (state.first_moment[slot].size() != p.tensor.numel())
            throw ShapeError("optimizer moment size does not match parameter '" + p.name + "'");
        ++slot;
    }
    if (slot != state.names.size()) throw std::invalid_argument("optimizer state has more entries than parameters");

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    slot = 0;
    for (auto& p : params) {
        if (!p.trainable) continue;
        auto values = p.tensor.mutable_data();
        auto grad = p.tensor.grad();
        auto& m = state.first_moment[slot];
        auto& v = state.second_moment[slot];
        const double decay = p.decay ? cfg.lr * cfg.weight_decay : 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] -= decay * values[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        ++slot;
    }
}

void zero_grads(ParameterList& params) {
    for (auto& p : params) {
        if (p.trainable) p.tensor.zero_grad();
    }
}

std::vector<double> linear_schedule(std::size_t count, double max_rate) {
    std::vector<double> rates(count, 0.0);
    if (count > 1) {
        for (std::size_t i = 0; i < count; ++i)
            rates[i] = max_rate * static_cast<double>(i) / static_cast<double>(count - 1);
    } else if (count == 1) {
        rates[0] = 0.0;
    }
    return rates;
}

}  // namespace dvit
