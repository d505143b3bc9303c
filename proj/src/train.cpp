#include "dvit/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "dvit/rng.hpp"

namespace dvit {

InMemoryDataset::InMemoryDataset(std::vector<Tensor> images, std::vector<int> labels, std::vector<std::string> class_names)
    : images_(std::move(images)), labels_(std::move(labels)), names_(std::move(class_names)) {
    if (images_.size() != labels_.size()) throw std::invalid_argument("dataset needs one label per image");
    for (int l : labels_)
        if (l < 0 || static_cast<std::size_t>(l) >= names_.size())
            throw std::out_of_range("dataset label " + std::to_string(l) + " outside the class list");
}

ManifestDataset::ManifestDataset(const Manifest& manifest, Split split, NormalizationSpec spec, std::filesystem::path root)
    : names_(manifest.class_names()), spec_(spec), root_(std::move(root)) {
    for (const auto& e : manifest.entries)
        if (e.split == split) entries_.push_back(e);
    Manifest ids;
    ids.entries = entries_;
    ids.assign_class_ids(names_);
    entries_ = std::move(ids.entries);
}

Tensor ManifestDataset::load(std::size_t i) const {
    std::filesystem::path p = entries_.at(i).path;
    if (p.is_relative() && !root_.empty()) p = root_ / p;
    return decode_and_normalize(p, spec_);
}

Tensor make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t threads) {
    if (indices.empty()) throw std::invalid_argument("empty batch");
    std::vector<Tensor> samples(indices.size());
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t k = begin; k < indices.size(); k += stride) samples[k] = data.load(indices[k]);
    };
    threads = std::max<std::size_t>(1, std::min(threads, indices.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(work, t, threads);
    work(0, threads);
    for (auto& t : pool) t.join();

    const Shape sample_shape = samples[0].shape();
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    std::vector<double> values;
    values.reserve(shape_numel(shape));
    for (std::size_t k = 0; k < samples.size(); ++k) {
        if (samples[k].shape() != sample_shape)
            throw ShapeError("sample " + std::to_string(indices[k]) + " has shape " + shape_str(samples[k].shape()) +
                             ", expected " + shape_str(sample_shape));
        auto d = samples[k].data();
        values.insert(values.end(), d.begin(), d.end());
    }
    return Tensor::from(shape, std::move(values));
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2 (batch norm trains on batch statistics)");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
    if (eval_every < 1) throw std::invalid_argument("eval_every must be at least 1");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"weight_decay", weight_decay}, {"seed", seed},
            {"checkpoint_dir", checkpoint_dir.string()}, {"eval_every", eval_every}};
}

nlohmann::json EpochLog::to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"train_loss", train_loss}, {"train_accuracy", train_accuracy},
                     {"wall_seconds", wall_seconds}, {"rng_digest", rng_digest}, {"param_digest", param_digest},
                     {"batch_losses", batch_losses}};
    j["valid"] = valid ? valid->to_json() : nlohmann::json(nullptr);
    j["valid_macc"] = valid && valid->mean_accuracy ? nlohmann::json(*valid->mean_accuracy) : nlohmann::json(nullptr);
    return j;
}

void RunLog::append_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "'");
    for (const auto& e : epochs) out << e.to_json().dump() << '\n';
}

NonFiniteLossError::NonFiniteLossError(std::size_t e, std::size_t b, double l)
    : std::runtime_error("non-finite loss " + std::to_string(l) + " at epoch " + std::to_string(e) + ", batch " +
                         std::to_string(b)),
      epoch(e),
      batch(b),
      loss(l) {}

namespace {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, epoch));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += batch_size)
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back()[0]);
        batches.pop_back();
    }
    return batches;
}

std::vector<std::size_t> batch_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> labels;
    for (auto i : idx) labels.push_back(static_cast<std::size_t>(data.label(i)));
    return labels;
}

struct RunState {
    OptimizerState optimizer;
    std::size_t start_epoch = 0;  // last completed epoch
    RunLog log;
};

RunLog run_epochs(Dvit& model, const Dataset& train_set, const Dataset* valid_set, const TrainConfig& cfg, RunState state) {
    cfg.validate();
    if (train_set.size() == 0) throw std::invalid_argument("training split is empty");
    if (train_set.size() < 2) throw std::invalid_argument("training needs at least 2 samples");
    if (valid_set && valid_set->size() == 0) valid_set = nullptr;
    if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);
    const auto log_path = cfg.checkpoint_dir / "runlog.jsonl";

    ParameterList params = model.parameters();
    RunLog log = std::move(state.log);
    OptimizerState& opt = state.optimizer;
    const std::size_t last = cfg.stop_after ? std::min(cfg.stop_after, cfg.epochs) : cfg.epochs;

    for (std::size_t epoch = state.start_epoch + 1; epoch <= last; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochLog entry;
        entry.epoch = epoch;
        entry.rng_digest = hex64(mix_seed(cfg.seed, epoch));
        const auto batches = epoch_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch);
        double loss_sum = 0.0;
        std::size_t seen = 0, correct = 0;
        for (std::size_t step = 0; step < batches.size(); ++step) {
            const auto& idx = batches[step];
            Rng drop(mix_seed(cfg.seed, epoch, step));
            const ForwardContext ctx{true, &drop};
            const Tensor x = make_batch(train_set, idx, cfg.loader_threads);
            const auto labels = batch_labels(train_set, idx);
            const Tensor logits = model.forward(x, ctx);
            const Tensor loss = cross_entropy(logits, labels);
            const double value = loss.item();
            if (!std::isfinite(value)) throw NonFiniteLossError(epoch, step, value);
            loss.backward();
            adamw_step(opt, params);
            zero_grads(params);

            const auto pred = argmax_rows(logits);
            for (std::size_t k = 0; k < idx.size(); ++k) correct += static_cast<std::size_t>(pred[k]) == labels[k];
            loss_sum += value * static_cast<double>(idx.size());
            seen += idx.size();
            entry.batch_losses.push_back(value);
        }
        entry.train_loss = loss_sum / static_cast<double>(seen);
        entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
        if (valid_set && (epoch % cfg.eval_every == 0 || epoch == last))
            entry.valid = evaluate(model, *valid_set, cfg.batch_size, cfg.loader_threads).report;
        entry.param_digest = parameter_digest(model);

        if (!cfg.checkpoint_dir.empty()) {
            save_checkpoint(cfg.checkpoint_dir / "last.ckpt", model, &opt, epoch, cfg.seed);
            if (entry.valid && entry.valid->mean_accuracy && *entry.valid->mean_accuracy >= log.best_macc) {
                log.best_macc = *entry.valid->mean_accuracy;
                log.best_epoch = epoch;
                save_checkpoint(cfg.checkpoint_dir / "best.ckpt", model, &opt, epoch, cfg.seed);
            }
        } else if (entry.valid && entry.valid->mean_accuracy && *entry.valid->mean_accuracy >= log.best_macc) {
            log.best_macc = *entry.valid->mean_accuracy;
            log.best_epoch = epoch;
        }
        entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!cfg.checkpoint_dir.empty()) {
            std::ofstream out(log_path, std::ios::app);
            out << entry.to_json().dump() << '\n';
        }
        log.epochs.push_back(std::move(entry));
    }
    return log;
}

}  // namespace

std::string parameter_digest(const Dvit& model) {
    std::uint64_t h = 0;
    for (const auto& p : model.parameters()) {
        auto d = p.tensor.data();
        h = mix_seed(h, hash_string(p.name));
        h = mix_seed(h, hash_string(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double))));
    }
    return hex64(h);
}

RunLog train(Dvit& model, const Dataset& train_set, const Dataset* valid_set, const TrainConfig& cfg) {
    cfg.validate();
    RunState state;
    AdamWConfig ac;
    ac.lr = cfg.lr;
    ac.weight_decay = cfg.weight_decay;
    state.optimizer = OptimizerState::for_parameters(model.parameters(), ac);
    if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        std::ofstream(cfg.checkpoint_dir / "runlog.jsonl", std::ios::trunc);
    }
    return run_epochs(model, train_set, valid_set, cfg, std::move(state));
}

RunLog resume(Dvit& model, const std::filesystem::path& checkpoint, const Dataset& train_set, const Dataset* valid_set,
              const TrainConfig& cfg) {
    Checkpoint ckpt = read_checkpoint(checkpoint);
    if (ckpt.seed != cfg.seed)
        throw std::invalid_argument("checkpoint was trained with seed " + std::to_string(ckpt.seed) + ", not " +
                                    std::to_string(cfg.seed));
    if (!ckpt.optimizer) throw std::invalid_argument("checkpoint '" + checkpoint.string() + "' has no optimizer state");
    load_into(model, ckpt);
    RunState state;
    state.optimizer = std::move(*ckpt.optimizer);
    state.start_epoch = ckpt.epoch;

    // Keep the log lines up to the resumed epoch and recover the best score.
    if (!cfg.checkpoint_dir.empty()) {
        const auto log_path = cfg.checkpoint_dir / "runlog.jsonl";
        std::vector<std::string> kept;
        if (std::ifstream in(log_path); in) {
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto j = nlohmann::json::parse(line);
                if (j.at("epoch").get<std::size_t>() > ckpt.epoch) continue;
                if (j.contains("valid_macc") && j["valid_macc"].is_number() && j["valid_macc"].get<double>() >= state.log.best_macc) {
                    state.log.best_macc = j["valid_macc"].get<double>();
                    state.log.best_epoch = j["epoch"].get<std::size_t>();
                }
                kept.push_back(line);
            }
        }
        std::filesystem::create_directories(cfg.checkpoint_dir);
        std::ofstream out(log_path, std::ios::trunc);
        for (const auto& l : kept) out << l << '\n';
    }
    return run_epochs(model, train_set, valid_set, cfg, std::move(state));
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows expects N x C logits, got " + shape_str(logits.shape()));
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    auto d = logits.data();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (d[i * c + k] > d[i * c + best]) best = k;
        out[i] = static_cast<int>(best);
    }
    return out;
}

EvalResult evaluate(const LogitFn& logits, const Dataset& data, std::size_t batch_size, std::size_t threads) {
    if (data.size() == 0) throw std::invalid_argument("evaluation split is empty");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    NoGradGuard guard;
    EvalResult result;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        const auto pred = argmax_rows(logits(make_batch(data, idx, threads)));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            result.predictions.push_back(pred[k]);
            result.labels.push_back(data.label(idx[k]));
        }
    }
    const auto names = data.class_names();
    result.matrix = confusion(result.labels, result.predictions, names.size(), names);
    result.report = make_report(result.matrix);
    return result;
}

EvalResult evaluate(Dvit& model, const Dataset& data, std::size_t batch_size, std::size_t threads) {
    const ForwardContext ctx{false, nullptr};
    return evaluate([&](const Tensor& x) { return model.forward(x, ctx); }, data, batch_size, threads);
}

}  // namespace dvit
