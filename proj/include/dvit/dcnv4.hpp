#pragma once

#include <optional>
#include <string>

#include "dvit/nn.hpp"

namespace dvit {

struct Dcnv4Config {
    std::size_t channels = 64;
    std::size_t groups = 4;
    std::size_t kernel_points = 9;  // odd perfect square: 1, 9, 25, ...
    double offset_scale = 1.0;
    std::optional<double> layer_scale_init = 1e-5;  // nullopt disables layer scale
    double droppath_rate = 0.0;
    double mlp_ratio = 4.0;

    /// channels / 16, at least 1.
    static std::size_t default_groups(std::size_t channels);
    static Dcnv4Config for_channels(std::size_t channels);

    void validate() const;
    std::size_t kernel_side() const;
};

/// Projections of one DCNv4 operator, all applied per location on
/// channels-last tokens.
///
/// `offset_mod` emits groups * 3K values per location laid out group-major:
/// for each group, K (dy, dx) pairs followed by K modulation scalars.
struct Dcnv4Params {
    Linear value;
    Linear offset_mod;
    Linear output;

    Dcnv4Params() = default;
    Dcnv4Params(const Dcnv4Config& cfg, Rng& rng);
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Reference grid point k of a centered side x side window, as (dy, dx).
std::pair<double, double> reference_point(std::size_t k, std::size_t side);

/// Deformable aggregation on channels-last tensors.
///
/// value is N x H x W x C and offset_mod N x H x W x (groups * 3K). For each
/// location p and group g the result is sum_k m_gk(p) * value_g(p + r_k +
/// offset_scale * delta_gk(p)), sampled bilinearly with zero padding. The
/// modulation scalars are used as-is (no softmax).
Tensor dcn_aggregate(const Tensor& value, const Tensor& offset_mod, std::size_t groups, std::size_t kernel_points,
                     double offset_scale);

/// Full operator on channels-last input: value projection, aggregation with
/// predicted offsets and modulation, output projection.
Tensor dcnv4_tokens(const Tensor& x_nhwc, const Dcnv4Params& params, const Dcnv4Config& cfg);

/// Same operator on an N x C x H x W map; returns N x C x H x W.
Tensor dcnv4_forward(const Tensor& x_nchw, const Dcnv4Params& params, const Dcnv4Config& cfg);

/// x + DropPath(g1 * DCNv4(LN(x))), then + DropPath(g2 * MLP(LN(.))).
struct Dcnv4Block {
    Dcnv4Config cfg;
    LayerNorm norm1;
    Dcnv4Params dcn;
    Tensor gamma1;  // layer scale; undefined when disabled
    LayerNorm norm2;
    Mlp mlp;
    Tensor gamma2;

    Dcnv4Block() = default;
    Dcnv4Block(const Dcnv4Config& cfg, Rng& rng);

    /// Channels-last N x H x W x C in and out.
    Tensor forward_tokens(const Tensor& x_nhwc, const ForwardContext& ctx) const;
    /// NCHW in and out.
    Tensor forward(const Tensor& x_nchw, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace dvit
