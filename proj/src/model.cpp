#include "dvit/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace dvit {

ModelConfig ModelConfig::tiny(std::size_t num_classes, std::size_t input_size) {
    ModelConfig cfg;
    cfg.input_size = input_size;
    cfg.stage_channels = {16, 32, 64, 128};
    cfg.stage_depths = {1, 1, 2, 1};
    cfg.embed_dim = 64;
    cfg.encoder_depth = 2;
    cfg.heads = 2;
    cfg.head_dim = 32;
    cfg.mlp_dim = 256;
    cfg.num_classes = num_classes;
    return cfg;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid model config: " + msg); };
    if (in_channels == 0) fail("in_channels must be positive");
    if (input_size == 0 || input_size % 32 != 0) fail("input_size must be a positive multiple of 32");
    if (stage_channels.size() != 4 || stage_depths.size() != 4) fail("exactly four stages are required");
    for (std::size_t i = 0; i < 4; ++i) {
        if (stage_channels[i] < 2) fail("stage channels must be at least 2");
        if (stage_depths[i] == 0) fail("stage depths must be positive");
        if (stage_channels[i] % Dcnv4Config::default_groups(stage_channels[i]) != 0)
            fail("stage channels must be divisible by their DCNv4 group count");
    }
    if (stage_channels[0] % 2 != 0) fail("first stage width must be even (stem halves it)");
    if (heads == 0 || head_dim == 0) fail("heads and head_dim must be positive");
    if (heads * head_dim != embed_dim)
        fail("heads x head_dim (" + std::to_string(heads) + " x " + std::to_string(head_dim) +
             ") must equal embed_dim (" + std::to_string(embed_dim) + ")");
    if (encoder_depth == 0 || mlp_dim == 0) fail("encoder depth and mlp_dim must be positive");
    if (num_classes < 2) fail("num_classes must be at least 2");
    for (double r : {attn_dropout, embed_dropout, mlp_dropout, encoder_droppath_max, backbone_droppath_max}) {
        if (r < 0.0 || r >= 1.0) fail("dropout and droppath rates must be in [0, 1)");
    }
    if (!(offset_scale > 0.0)) fail("offset_scale must be positive");
    if (layer_scale_init && !(*layer_scale_init >= 0.0)) fail("layer_scale_init must be non-negative");
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["in_channels"] = in_channels;
    j["input_size"] = input_size;
    j["stage_channels"] = stage_channels;
    j["stage_depths"] = stage_depths;
    j["offset_scale"] = offset_scale;
    j["kernel_points"] = kernel_points;
    j["backbone_droppath_max"] = backbone_droppath_max;
    j["backbone_mlp_ratio"] = backbone_mlp_ratio;
    j["layer_scale_init"] = layer_scale_init ? nlohmann::json(*layer_scale_init) : nlohmann::json(nullptr);
    j["embed_dim"] = embed_dim;
    j["encoder_depth"] = encoder_depth;
    j["heads"] = heads;
    j["head_dim"] = head_dim;
    j["mlp_dim"] = mlp_dim;
    j["attn_dropout"] = attn_dropout;
    j["embed_dropout"] = embed_dropout;
    j["mlp_dropout"] = mlp_dropout;
    j["encoder_droppath_max"] = encoder_droppath_max;
    j["num_classes"] = num_classes;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("in_channels", cfg.in_channels);
    get("input_size", cfg.input_size);
    get("stage_channels", cfg.stage_channels);
    get("stage_depths", cfg.stage_depths);
    get("offset_scale", cfg.offset_scale);
    get("kernel_points", cfg.kernel_points);
    get("backbone_droppath_max", cfg.backbone_droppath_max);
    get("backbone_mlp_ratio", cfg.backbone_mlp_ratio);
    if (j.contains("layer_scale_init")) {
        const auto& v = j.at("layer_scale_init");
        cfg.layer_scale_init = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    get("embed_dim", cfg.embed_dim);
    get("encoder_depth", cfg.encoder_depth);
    get("heads", cfg.heads);
    get("head_dim", cfg.head_dim);
    get("mlp_dim", cfg.mlp_dim);
    get("attn_dropout", cfg.attn_dropout);
    get("embed_dropout", cfg.embed_dropout);
    get("mlp_dropout", cfg.mlp_dropout);
    get("encoder_droppath_max", cfg.encoder_droppath_max);
    get("num_classes", cfg.num_classes);
    return cfg;
}

Tensor Stem::forward(const Tensor& x, bool training) {
    Tensor h = gelu(norm1.forward(conv1.forward(x), training));
    return gelu(norm2.forward(conv2.forward(h), training));
}

void Stem::collect(const std::string& prefix, ParameterList& out) const {
    conv1.collect(prefix + ".conv1", out);
    norm1.collect(prefix + ".norm1", out);
    conv2.collect(prefix + ".conv2", out);
    norm2.collect(prefix + ".norm2", out);
}

Tensor Stage::forward(const Tensor& x, const ForwardContext& ctx) {
    Tensor h = x;
    if (has_downsample) h = downsample_norm.forward(downsample.forward(h), ctx.training);
    Tensor tokens = permute(h, {0, 2, 3, 1});
    for (const auto& block : blocks) tokens = block.forward_tokens(tokens, ctx);
    return permute(tokens, {0, 3, 1, 2});
}

void Stage::collect(const std::string& prefix, ParameterList& out) const {
    if (has_downsample) {
        downsample.collect(prefix + ".downsample", out);
        downsample_norm.collect(prefix + ".downsample_norm", out);
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
}

Tensor EncoderBlock::forward(const Tensor& x, const ForwardContext& ctx) const {
    Tensor h = add(x, droppath(attn.forward(norm1.forward(x), ctx), droppath_rate, ctx.training, ctx.rng));
    return add(h, droppath(mlp.forward(norm2.forward(h), ctx), droppath_rate, ctx.training, ctx.rng));
}

void EncoderBlock::collect(const std::string& prefix, ParameterList& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
}

namespace {

const ModelConfig& validated(const ModelConfig& cfg) {
    cfg.validate();
    return cfg;
}

}  // namespace

Dvit::Dvit(const ModelConfig& cfg, Rng& rng) : cfg_(validated(cfg)) {
    const std::size_t c0 = cfg_.stage_channels[0];
    stem_.conv1 = Conv2d(cfg_.in_channels, c0 / 2, 3, 2, 1, rng);
    stem_.norm1 = BatchNorm2d(c0 / 2);
    stem_.conv2 = Conv2d(c0 / 2, c0, 3, 2, 1, rng);
    stem_.norm2 = BatchNorm2d(c0);

    std::size_t total_blocks = 0;
    for (auto d : cfg_.stage_depths) total_blocks += d;
    const auto backbone_rates = linear_schedule(total_blocks, cfg_.backbone_droppath_max);
    std::size_t block_index = 0;
    for (std::size_t s = 0; s < 4; ++s) {
        Stage stage;
        const std::size_t ch = cfg_.stage_channels[s];
        if (s > 0) {
            stage.has_downsample = true;
            stage.downsample = Conv2d(cfg_.stage_channels[s - 1], ch, 3, 2, 1, rng);
            stage.downsample_norm = BatchNorm2d(ch);
        }
        for (std::size_t b = 0; b < cfg_.stage_depths[s]; ++b) {
            Dcnv4Config bc = Dcnv4Config::for_channels(ch);
            bc.kernel_points = cfg_.kernel_points;
            bc.offset_scale = cfg_.offset_scale;
            bc.layer_scale_init = cfg_.layer_scale_init;
            bc.droppath_rate = backbone_rates[block_index++];
            bc.mlp_ratio = cfg_.backbone_mlp_ratio;
            stage.blocks.emplace_back(bc, rng);
        }
        stages_.push_back(std::move(stage));
    }

    const std::size_t d = cfg_.embed_dim;
    patch_proj_ = Linear(cfg_.stage_channels[3], d, rng);
    cls_token_ = Tensor::zeros({1, 1, d}, true);
    init_truncated_normal(cls_token_, rng);
    pos_embed_ = Tensor::zeros({1, cfg_.token_count(), d}, true);

    const auto encoder_rates = linear_schedule(cfg_.encoder_depth, cfg_.encoder_droppath_max);
    for (std::size_t i = 0; i < cfg_.encoder_depth; ++i) {
        EncoderBlock block;
        block.norm1 = LayerNorm(d);
        block.attn = MultiheadAttention(d, cfg_.heads, cfg_.head_dim, rng, cfg_.attn_dropout);
        block.norm2 = LayerNorm(d);
        block.mlp = Mlp(d, cfg_.mlp_dim, rng, cfg_.mlp_dropout);
        block.droppath_rate = encoder_rates[i];
        encoder_.push_back(std::move(block));
    }
    head_norm_ = LayerNorm(d);
    head_ = Linear(d, cfg_.num_classes, rng);
}

Tensor Dvit::forward_backbone(const Tensor& x, const ForwardContext& ctx, ActivationCapture* capture) {
    if (x.rank() != 4 || x.shape()[1] != cfg_.in_channels || x.shape()[2] != cfg_.input_size ||
        x.shape()[3] != cfg_.input_size)
        throw ShapeError("model expects N x " + std::to_string(cfg_.in_channels) + " x " +
                         std::to_string(cfg_.input_size) + " x " + std::to_string(cfg_.input_size) + " input, got " +
                         shape_str(x.shape()));
    Tensor h = stem_.forward(x, ctx.training);
    if (capture) (*capture)["stem"] = h;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        h = stages_[s].forward(h, ctx);
        if (capture) (*capture)["stage" + std::to_string(s + 1)] = h;
    }
    return h;
}

Tensor Dvit::patch_embed(const Tensor& fmap, const ForwardContext& ctx) const {
    const std::size_t g = cfg_.final_grid();
    const Shape expected{fmap.rank() == 4 ? fmap.shape()[0] : 0, cfg_.stage_channels[3], g, g};
    if (fmap.rank() != 4 || fmap.shape() != expected)
        throw ShapeError("patch_embed expects N x " + std::to_string(cfg_.stage_channels[3]) + " x " +
                         std::to_string(g) + " x " + std::to_string(g) + ", got " + shape_str(fmap.shape()));
    const std::size_t n = fmap.shape()[0];
    const std::size_t d = cfg_.embed_dim;
    // One token per map location, row-major.
    Tensor patches = reshape(permute(fmap, {0, 2, 3, 1}), {n, g * g, cfg_.stage_channels[3]});
    Tensor tokens = patch_proj_.forward(patches);
    std::vector<Tensor> cls_rows(n, cls_token_);
    Tensor cls = n == 1 ? cls_token_ : concat(cls_rows, 0);
    tokens = add(concat({cls, tokens}, 1), pos_embed_);
    (void)d;
    return dropout(tokens, cfg_.embed_dropout, ctx.training, ctx.rng);
}

Tensor Dvit::encode(const Tensor& tokens, const ForwardContext& ctx) const {
    Tensor h = tokens;
    for (const auto& block : encoder_) h = block.forward(h, ctx);
    return h;
}

Tensor Dvit::classify(const Tensor& tokens) const {
    if (tokens.rank() != 3 || tokens.shape()[2] != cfg_.embed_dim)
        throw ShapeError("classify expects N x T x " + std::to_string(cfg_.embed_dim) + " tokens, got " +
                         shape_str(tokens.shape()));
    const std::size_t n = tokens.shape()[0];
    Tensor cls = reshape(slice(tokens, 1, 0, 1), {n, cfg_.embed_dim});
    return head_.forward(head_norm_.forward(cls));
}

Tensor Dvit::forward(const Tensor& x, const ForwardContext& ctx, ActivationCapture* capture) {
    Tensor tokens = patch_embed(forward_backbone(x, ctx, capture), ctx);
    if (capture) (*capture)["tokens"] = tokens;
    Tensor encoded = encode(tokens, ctx);
    if (capture) (*capture)["encoder"] = encoded;
    return classify(encoded);
}

ParameterList Dvit::parameters() const {
    ParameterList all;
    stem_.collect("stem", all);
    for (std::size_t s = 0; s < stages_.size(); ++s) stages_[s].collect("stages." + std::to_string(s), all);
    patch_proj_.collect("patch_embed.proj", all);
    all.push_back({"patch_embed.cls_token", cls_token_, false, true});
    all.push_back({"patch_embed.pos_embed", pos_embed_, false, true});
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect("encoder." + std::to_string(i), all);
    head_norm_.collect("head.norm", all);
    head_.collect("head.fc", all);
    // Buffers last so trainable parameters form a prefix.
    std::stable_partition(all.begin(), all.end(), [](const NamedTensor& t) { return t.trainable; });
    return all;
}

std::size_t Dvit::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters())
        if (p.trainable) total += p.tensor.numel();
    return total;
}

// ---- checkpoints ----------------------------------------------------------

namespace {
constexpr const char* kOptimPrefixM = "optim.m.";
constexpr const char* kOptimPrefixV = "optim.v.";
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Dvit& model, const OptimizerState* optimizer,
                     std::size_t epoch, std::uint64_t seed) {
    TensorDump dump;
    dump.meta.emplace_back("config", model.config().to_json().dump());
    dump.meta.emplace_back("epoch", std::to_string(epoch));
    dump.meta.emplace_back("seed", std::to_string(seed));
    for (const auto& p : model.parameters()) dump.entries.push_back({p.name, p.tensor, DType::f64});
    if (optimizer) {
        const auto& c = optimizer->config;
        nlohmann::json oc{{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1}, {"beta2", c.beta2},
                          {"eps", c.eps}, {"step", optimizer->step}};
        dump.meta.emplace_back("optimizer", oc.dump());
        for (std::size_t i = 0; i < optimizer->names.size(); ++i) {
            const auto& m = optimizer->first_moment[i];
            const auto& v = optimizer->second_moment[i];
            dump.entries.push_back({kOptimPrefixM + optimizer->names[i], Tensor::from({m.size()}, m), DType::f64});
            dump.entries.push_back({kOptimPrefixV + optimizer->names[i], Tensor::from({v.size()}, v), DType::f64});
        }
    }
    write_tensor_dump(path, dump);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    Checkpoint ckpt;
    ckpt.tensors = read_tensor_dump(path);
    const std::string* config = ckpt.tensors.find_meta("config");
    if (!config) throw FormatError("checkpoint '" + path.string() + "' has no config");
    try {
        ckpt.config = ModelConfig::from_json(nlohmann::json::parse(*config));
        if (const auto* e = ckpt.tensors.find_meta("epoch")) ckpt.epoch = std::stoull(*e);
        if (const auto* s = ckpt.tensors.find_meta("seed")) ckpt.seed = std::stoull(*s);
    } catch (const std::exception& e) {
        throw FormatError("corrupt checkpoint metadata in '" + path.string() + "': " + e.what());
    }
    if (const auto* o = ckpt.tensors.find_meta("optimizer")) {
        OptimizerState state;
        const auto oc = nlohmann::json::parse(*o);
        state.config.lr = oc.at("lr");
        state.config.weight_decay = oc.at("weight_decay");
        state.config.beta1 = oc.at("beta1");
        state.config.beta2 = oc.at("beta2");
        state.config.eps = oc.at("eps");
        state.step = oc.at("step");
        const std::string pm = kOptimPrefixM;
        for (const auto& e : ckpt.tensors.entries) {
            if (e.name.rfind(pm, 0) != 0) continue;
            const std::string name = e.name.substr(pm.size());
            const DumpEntry* v = ckpt.tensors.find(kOptimPrefixV + name);
            if (!v) throw FormatError("checkpoint optimizer state missing second moment for '" + name + "'");
            state.names.push_back(name);
            state.first_moment.push_back(e.tensor.to_vector());
            state.second_moment.push_back(v->tensor.to_vector());
        }
        ckpt.optimizer = std::move(state);
    }
    return ckpt;
}

void load_into(Dvit& model, const Checkpoint& ckpt) {
    if (!(ckpt.config == model.config()))
        throw std::invalid_argument("checkpoint config does not match model config: " + ckpt.config.to_json().dump() +
                                    " vs " + model.config().to_json().dump());
    for (auto& p : model.parameters()) {
        const DumpEntry* e = ckpt.tensors.find(p.name);
        if (!e) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
        if (e->tensor.shape() != p.tensor.shape())
            throw FormatError("checkpoint parameter '" + p.name + "' has shape " + shape_str(e->tensor.shape()) +
                              ", expected " + shape_str(p.tensor.shape()));
        auto dst = p.tensor.mutable_data();
        auto src = e->tensor.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

Dvit load_checkpoint(const std::filesystem::path& path) {
    Checkpoint ckpt = read_checkpoint(path);
    Rng rng(ckpt.seed);
    Dvit model(ckpt.config, rng);
    load_into(model, ckpt);
    return model;
}

}  // namespace dvit
