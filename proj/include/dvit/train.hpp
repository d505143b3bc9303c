#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvit/image.hpp"
#include "dvit/manifest.hpp"
#include "dvit/metrics.hpp"
#include "dvit/model.hpp"

namespace dvit {

/// Indexed labeled images producing C x S x S tensors.
class Dataset {
public:
    virtual ~Dataset() = default;
    virtual std::size_t size() const = 0;
    virtual int label(std::size_t i) const = 0;
    /// Must be safe to call concurrently.
    virtual Tensor load(std::size_t i) const = 0;
    virtual std::vector<std::string> class_names() const = 0;
};

class InMemoryDataset : public Dataset {
public:
    InMemoryDataset(std::vector<Tensor> images, std::vector<int> labels, std::vector<std::string> class_names);
    std::size_t size() const override { return images_.size(); }
    int label(std::size_t i) const override { return labels_[i]; }
    Tensor load(std::size_t i) const override { return images_[i]; }
    std::vector<std::string> class_names() const override { return names_; }

private:
    std::vector<Tensor> images_;
    std::vector<int> labels_;
    std::vector<std::string> names_;
};

/// Entries of one split, decoded and normalized on demand.
class ManifestDataset : public Dataset {
public:
    ManifestDataset(const Manifest& manifest, Split split, NormalizationSpec spec, std::filesystem::path root = {});
    std::size_t size() const override { return entries_.size(); }
    int label(std::size_t i) const override { return entries_[i].class_id; }
    Tensor load(std::size_t i) const override;
    std::vector<std::string> class_names() const override { return names_; }

private:
    std::vector<ManifestEntry> entries_;
    std::vector<std::string> names_;
    NormalizationSpec spec_;
    std::filesystem::path root_;
};

/// Stacks samples `indices` into N x C x S x S, decoding on up to `threads`
/// threads. Output order follows `indices`.
Tensor make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t threads = 1);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double weight_decay = 0.05;
    std::uint64_t seed = 0;
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints
    std::size_t eval_every = 1;            // validation cadence in epochs
    std::size_t loader_threads = 1;
    /// Stop after this epoch (for staged runs); 0 runs to `epochs`.
    std::size_t stop_after = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;  // from training-mode forward passes
    std::optional<MetricsReport> valid;
    double wall_seconds = 0.0;
    std::string rng_digest;    // per-epoch shuffle seed
    std::string param_digest;  // FNV-1a over parameter bytes after the epoch
    std::vector<double> batch_losses;

    nlohmann::json to_json() const;
};

struct RunLog {
    std::vector<EpochLog> epochs;
    std::optional<std::size_t> best_epoch;
    double best_macc = -1.0;

    void append_jsonl(const std::filesystem::path& path) const;
};

class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(std::size_t epoch, std::size_t batch, double loss);
    std::size_t epoch, batch;
    double loss;
};

std::string parameter_digest(const Dvit& model);

/// Mini-batch AdamW on cross-entropy. Deterministic given cfg.seed: the
/// epoch-e order is a shuffle seeded by mix_seed(seed, e) and the dropout
/// stream of step s by mix_seed(seed, e, s). A leftover batch of one sample
/// is merged into the previous batch. With a checkpoint dir, "last.ckpt" is
/// written every epoch and "best.ckpt" whenever validation mAcc is >= the
/// best so far; "runlog.jsonl" receives one line per epoch.
RunLog train(Dvit& model, const Dataset& train_set, const Dataset* valid_set, const TrainConfig& cfg);

/// Continues a run from a checkpoint written by train(); restores model,
/// optimizer and epoch and runs the remaining epochs.
RunLog resume(Dvit& model, const std::filesystem::path& checkpoint, const Dataset& train_set, const Dataset* valid_set,
              const TrainConfig& cfg);

struct EvalResult {
    ConfusionMatrix matrix;
    MetricsReport report;
    std::vector<int> predictions;
    std::vector<int> labels;
};

/// Logits for a batch, N x C.
using LogitFn = std::function<Tensor(const Tensor& batch)>;

EvalResult evaluate(const LogitFn& logits, const Dataset& data, std::size_t batch_size = 16, std::size_t threads = 1);
/// Eval mode (no dropout, running batch-norm statistics), argmax prediction.
EvalResult evaluate(Dvit& model, const Dataset& data, std::size_t batch_size = 16, std::size_t threads = 1);

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace dvit
