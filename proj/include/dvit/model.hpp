#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvit/dcnv4.hpp"
#include "dvit/nn.hpp"
#include "dvit/tensor_io.hpp"

namespace dvit {

/// Architecture hyperparameters. Defaults are the full-size configuration.
struct ModelConfig {
    std::size_t in_channels = 3;
    std::size_t input_size = 512;
    std::vector<std::size_t> stage_channels{80, 160, 320, 640};
    std::vector<std::size_t> stage_depths{3, 4, 16, 6};
    double offset_scale = 1.0;
    std::size_t kernel_points = 9;
    double backbone_droppath_max = 0.20;
    double backbone_mlp_ratio = 4.0;
    std::optional<double> layer_scale_init = 1e-5;
    std::size_t embed_dim = 384;
    std::size_t encoder_depth = 7;
    std::size_t heads = 8;
    std::size_t head_dim = 48;
    std::size_t mlp_dim = 1536;
    double attn_dropout = 0.1;
    double embed_dropout = 0.1;
    double mlp_dropout = 0.0;
    double encoder_droppath_max = 0.15;
    std::size_t num_classes = 8;

    /// Reduced configuration for desk-scale runs; same shape pipeline.
    static ModelConfig tiny(std::size_t num_classes = 8, std::size_t input_size = 32);

    void validate() const;
    std::size_t final_grid() const { return input_size / 32; }
    std::size_t token_count() const { return final_grid() * final_grid() + 1; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

/// Named intermediate activations recorded during forward (Grad-CAM hooks).
using ActivationCapture = std::map<std::string, Tensor>;

struct Stem {
    Conv2d conv1;
    BatchNorm2d norm1;
    Conv2d conv2;
    BatchNorm2d norm2;

    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct Stage {
    bool has_downsample = false;
    Conv2d downsample;
    BatchNorm2d downsample_norm;
    std::vector<Dcnv4Block> blocks;

    Tensor forward(const Tensor& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Pre-norm transformer block: x + DropPath(MHSA(LN(x))), + DropPath(MLP(LN(.))).
struct EncoderBlock {
    LayerNorm norm1;
    MultiheadAttention attn;
    LayerNorm norm2;
    Mlp mlp;
    double droppath_rate = 0.0;

    Tensor forward(const Tensor& x, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Stem, four DCNv4 stages, patch embedding with CLS and positional
/// embeddings, transformer encoder, LayerNorm + linear head on CLS.
class Dvit {
public:
    Dvit(const ModelConfig& cfg, Rng& rng);
    // Parameters are shared handles; a copy would alias them.
    Dvit(const Dvit&) = delete;
    Dvit& operator=(const Dvit&) = delete;
    Dvit(Dvit&&) = default;
    Dvit& operator=(Dvit&&) = default;

    const ModelConfig& config() const { return cfg_; }

    /// N x in x S x S -> N x C4 x S/32 x S/32. Records "stem" and
    /// "stage1".."stage4" when a capture map is supplied.
    Tensor forward_backbone(const Tensor& x, const ForwardContext& ctx, ActivationCapture* capture = nullptr);
    /// N x C4 x g x g -> N x (g*g + 1) x D.
    Tensor patch_embed(const Tensor& fmap, const ForwardContext& ctx) const;
    Tensor encode(const Tensor& tokens, const ForwardContext& ctx) const;
    /// CLS token -> LayerNorm -> linear. Returns N x num_classes logits.
    Tensor classify(const Tensor& tokens) const;
    Tensor forward(const Tensor& x, const ForwardContext& ctx, ActivationCapture* capture = nullptr);

    /// Parameters followed by buffers, in a fixed order.
    ParameterList parameters() const;
    std::size_t parameter_count() const;

    Stem& stem() { return stem_; }
    std::vector<Stage>& stages() { return stages_; }
    std::vector<EncoderBlock>& encoder() { return encoder_; }
    Linear& head() { return head_; }
    Linear& patch_proj() { return patch_proj_; }
    Tensor& cls_token() { return cls_token_; }
    Tensor& pos_embed() { return pos_embed_; }

private:
    ModelConfig cfg_;
    Stem stem_;
    std::vector<Stage> stages_;
    Linear patch_proj_;
    Tensor cls_token_;  // (1, 1, D)
    Tensor pos_embed_;  // (1, T, D)
    std::vector<EncoderBlock> encoder_;
    LayerNorm head_norm_;
    Linear head_;
};

/// Everything needed to restore a run.
struct Checkpoint {
    ModelConfig config;
    TensorDump tensors;
    std::optional<OptimizerState> optimizer;
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Dvit& model, const OptimizerState* optimizer = nullptr,
                     std::size_t epoch = 0, std::uint64_t seed = 0);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint tensors into `model`; the stored config must match.
void load_into(Dvit& model, const Checkpoint& ckpt);
/// Builds a model from the stored config and loads its tensors.
Dvit load_checkpoint(const std::filesystem::path& path);

}  // namespace dvit
