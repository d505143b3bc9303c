#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dvit/ops.hpp"
#include "dvit/rng.hpp"
#include "dvit/tensor.hpp"

namespace dvit {

/// A named parameter or buffer. `decay` marks tensors that receive weight
/// decay (matrix/conv weights); `trainable` is false for running statistics.
struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool decay = false;
    bool trainable = true;
};
using ParameterList = std::vector<NamedTensor>;

struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;  // required when training with non-zero dropout rates
};

// ---- functional ops -------------------------------------------------------

/// NCHW convolution; weight is (out, in, k, k), bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding);

/// Batch normalization over (N, H, W) per channel. In training mode the
/// running buffers are updated in place with the unbiased batch variance.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Inverted dropout. Returns `x` itself when not training or rate is zero.
Tensor dropout(const Tensor& x, double rate, bool training, Rng* rng);

/// Stochastic depth: drops whole samples (axis 0) with probability `rate`
/// and rescales survivors by 1/(1 - rate). Identity outside training.
Tensor droppath(const Tensor& x, double rate, bool training, Rng* rng);

/// Samples a C x H x W feature map at K (y, x) points given as a K x 2
/// tensor. Result is C x K. Differentiable in features and coordinates.
Tensor bilinear_sample(const Tensor& feature, const Tensor& points);

/// Mean negative log-likelihood of softmax(logits) at the given labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// ---- layers ---------------------------------------------------------------

void init_truncated_normal(Tensor& t, Rng& rng, double std = 0.02);

struct Linear {
    Tensor weight;  // (out, in)
    Tensor bias;    // (out)

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct Conv2d {
    Tensor weight;  // (out, in, k, k)
    Tensor bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct BatchNorm2d {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t channels, double eps = 1e-5);
    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim, double eps = 1e-5);
    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// fc1 -> GELU -> dropout -> fc2 -> dropout.
struct Mlp {
    Linear fc1, fc2;
    double dropout_rate = 0.0;

    Mlp() = default;
    Mlp(std::size_t dim, std::size_t hidden, Rng& rng, double dropout_rate = 0.0);
    Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Scaled dot-product self-attention over tokens (T, D) or (N, T, D) with a
/// fused QKV projection of width 3 * heads * head_dim.
struct MultiheadAttention {
    Linear qkv;
    Linear proj;
    std::size_t heads = 1;
    std::size_t head_dim = 1;
    double attn_dropout = 0.0;

    MultiheadAttention() = default;
    MultiheadAttention(std::size_t dim, std::size_t heads, std::size_t head_dim, Rng& rng, double attn_dropout = 0.0);
    Tensor forward(const Tensor& tokens, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

// ---- optimizer ------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    AdamWConfig config;
    std::uint64_t step = 0;
    std::vector<std::string> names;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    static OptimizerState for_parameters(const ParameterList& params, AdamWConfig config = {});
};

/// One AdamW update over the trainable entries of `params` (same order the
/// state was created with). Decoupled decay p <- p - lr*wd*p is applied to
/// `decay` tensors before the bias-corrected Adam step.
void adamw_step(OptimizerState& state, ParameterList& params);

/// Clears gradients of every trainable entry.
void zero_grads(ParameterList& params);

/// Linearly spaced rates from 0 to `max_rate` (inclusive) over `count` slots.
std::vector<double> linear_schedule(std::size_t count, double max_rate);

}  // namespace dvit
