#include "dvit/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"

#include "dvit/canny.hpp"
#include "dvit/endpoints.hpp"
#include "dvit/explain.hpp"
#include "dvit/manifest.hpp"
#include "dvit/metrics.hpp"
#include "dvit/model.hpp"
#include "dvit/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dvit::cli {

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
    if (a.is_null()) return b.is_null() || b.is_number_integer();
    return a.type() == b.type();
}

void apply(json& cfg, const std::string& key, const json& value, const std::string& origin) {
    if (!cfg.contains(key)) throw UsageError(origin + ": unknown config key '" + key + "'");
    if (!same_kind(cfg[key], value))
        throw UsageError(origin + ": key '" + key + "' expects " + std::string(cfg[key].type_name()) + ", got " +
                         value.type_name());
    cfg[key] = value;
}

}  // namespace

json default_config() {
    return {
        {"seed", nullptr},
        {"model.preset", "full"},
        {"model.input_size", 512},
        {"model.num_classes", 0},
        {"train.epochs", 30},
        {"train.batch_size", 16},
        {"train.lr", 1e-4},
        {"train.weight_decay", 0.05},
        {"train.eval_every", 1},
        {"train.loader_threads", 1},
        {"eval.batch_size", 16},
        {"data.root", ""},
        {"split.ratios", {0.8, 0.1, 0.1}},
        {"resplit.ratios", {0.8, 0.2}},
        {"canny.low", 100.0},
        {"canny.high", 150.0},
        {"augment.superres", true},
        {"augment.diffusion", true},
        {"augment.per_image", 2},
        {"augment.max_in_flight", 4},
        {"augment.retries", 3},
        {"augment.backoff_ms", 500},
        {"endpoint.caption_url", ""},
        {"endpoint.generation_url", ""},
        {"endpoint.superres_url", ""},
        {"endpoint.judge_url", ""},
        {"endpoint.token_env", "DVIT_ENDPOINT_TOKEN"},
        {"endpoint.timeout_ms", 60000},
        {"kid.subsets", 100},
        {"kid.subset_size", 0},
        {"kid.degree", 3},
        {"gradcam.layer", "stage4"},
    };
}

json resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
    json cfg = default_config();
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw UsageError("cannot open config file '" + file + "'");
        json loaded;
        try {
            loaded = json::parse(in);
        } catch (const json::exception& e) {
            throw UsageError("config file '" + file + "' is not valid JSON: " + e.what());
        }
        if (!loaded.is_object()) throw UsageError("config file '" + file + "' must hold a flat JSON object");
        for (const auto& [key, value] : loaded.items()) apply(cfg, key, value, file);
    }
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        apply(cfg, key, value, "--set");
    }
    return cfg;
}

namespace {

struct Session {
    json cfg;
    fs::path out;
    std::ostream& log;
    std::ostream& console;
    int verbosity = 0;
    json summary = json::object();
    json outputs = json::array();

    void note(const std::string& msg) const {
        if (verbosity > 0) log << msg << '\n';
    }
    fs::path output(const std::string& name) {
        outputs.push_back(name);
        return out / name;
    }
    std::uint64_t seed() {
        if (cfg["seed"].is_null()) {
            std::random_device rd;
            const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
            cfg["seed"] = s;
            summary["seed_source"] = "auto";
        } else if (!summary.contains("seed_source")) {
            summary["seed_source"] = "explicit";
        }
        summary["seed"] = cfg["seed"];
        return cfg["seed"].get<std::uint64_t>();
    }
};

std::vector<double> ratios_from(const json& v, std::size_t arity, const std::string& key) {
    std::vector<double> r;
    for (const auto& x : v) {
        if (!x.is_number()) throw UsageError(key + " must be a list of numbers");
        r.push_back(x.get<double>());
    }
    if (r.size() != arity) throw UsageError(key + " needs " + std::to_string(arity) + " ratios");
    return r;
}

std::vector<double> parse_ratio_list(const std::string& text) {
    std::vector<double> r;
    std::stringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) {
        try {
            std::size_t used = 0;
            r.push_back(std::stod(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw UsageError("invalid ratio list '" + text + "'");
        }
    }
    return r;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
}

ModelConfig model_config(const json& cfg, std::size_t classes) {
    const std::string preset = cfg["model.preset"];
    ModelConfig mc;
    if (preset == "tiny")
        mc = ModelConfig::tiny();
    else if (preset != "full")
        throw UsageError("model.preset must be 'full' or 'tiny', got '" + preset + "'");
    mc.input_size = cfg["model.input_size"];
    const std::size_t configured = cfg["model.num_classes"];
    mc.num_classes = configured ? configured : classes;
    return mc;
}

NormalizationSpec norm_for(const ModelConfig& mc) {
    NormalizationSpec spec;
    spec.size = mc.input_size;
    return spec;
}

RetryPolicy retry_from(const json& cfg) {
    RetryPolicy p;
    p.attempts = cfg["augment.retries"];
    p.initial_backoff = std::chrono::milliseconds(cfg["augment.backoff_ms"].get<long long>());
    return p;
}

std::unique_ptr<Transport> http_transport(const json& cfg, const std::string& url_key) {
    const std::string url = cfg[url_key];
    if (url.empty()) return nullptr;
    HttpEndpointConfig hc;
    hc.url = url;
    hc.token_env = cfg["endpoint.token_env"];
    hc.timeout = std::chrono::milliseconds(cfg["endpoint.timeout_ms"].get<long long>());
    return std::make_unique<HttpTransport>(hc);
}

Tensor read_feature_matrix(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open feature file '" + path.string() + "'");
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    std::string line;
    while (std::getline(in, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream fields(line);
        std::size_t n = 0;
        double v;
        while (fields >> v) {
            values.push_back(v);
            ++n;
        }
        if (!fields.eof()) throw std::runtime_error(path.string() + ": non-numeric value on row " + std::to_string(rows + 1));
        if (n == 0) continue;
        if (cols && n != cols) throw std::runtime_error(path.string() + ": ragged feature rows");
        cols = n;
        ++rows;
    }
    if (rows == 0) throw std::runtime_error(path.string() + ": no feature rows");
    return Tensor::from({rows, cols}, std::move(values));
}

fs::path find_image(const fs::path& dir, const std::string& stem) {
    for (const char* ext : {".png", ".raw"}) {
        const fs::path p = dir / (stem + ext);
        if (fs::exists(p)) return p;
    }
    return {};
}

// ---- subcommands -------------------------------------------------------------

struct SplitArgs {
    std::string manifest;
    std::string ratios;
};

void cmd_split(Session& s, const SplitArgs& a) {
    if (!a.ratios.empty()) s.cfg["split.ratios"] = parse_ratio_list(a.ratios);
    const auto ratios = ratios_from(s.cfg["split.ratios"], 3, "split.ratios");
    const std::uint64_t seed = s.seed();
    const Manifest input = read_manifest(a.manifest);
    Manifest m;
    try {
        m = stratified_split(input, ratios, seed);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    write_manifest(s.output("manifest.tsv"), m);
    s.summary["counts"] = {{"train", m.count(Split::train)}, {"valid", m.count(Split::valid)}, {"test", m.count(Split::test)}};
}

struct AugmentArgs {
    std::string manifest;
    bool mock = false;
    bool ablation = false;
};

void cmd_augment(Session& s, const AugmentArgs& a) {
    const Manifest original = read_manifest(a.manifest);
    const std::uint64_t seed = s.seed();
    AugmentOptions opt;
    opt.superres = s.cfg["augment.superres"];
    opt.diffusion = s.cfg["augment.diffusion"];
    if (a.ablation) opt.superres = opt.diffusion = true;
    opt.diffusion_per_image = s.cfg["augment.per_image"];
    opt.canny = {s.cfg["canny.low"], s.cfg["canny.high"]};
    opt.output_dir = s.out / "generated";
    opt.seed = seed;
    opt.max_in_flight = s.cfg["augment.max_in_flight"];
    opt.retry = retry_from(s.cfg);

    MockCaptionTransport mock_caption;
    MockGenerationTransport mock_generation;
    MockSuperresTransport mock_superres;
    auto caption = http_transport(s.cfg, "endpoint.caption_url");
    auto generation = http_transport(s.cfg, "endpoint.generation_url");
    auto superres = http_transport(s.cfg, "endpoint.superres_url");
    AugmentClients clients;
    clients.caption = caption ? caption.get() : a.mock ? &mock_caption : nullptr;
    clients.generation = generation ? generation.get() : a.mock ? &mock_generation : nullptr;
    clients.superres = superres ? superres.get() : a.mock ? &mock_superres : nullptr;
    if (opt.superres && !clients.superres)
        throw UsageError("super-resolution is enabled but endpoint.superres_url is empty; pass --mock to run offline");
    if (opt.diffusion && (!clients.caption || !clients.generation))
        throw UsageError("diffusion is enabled but caption/generation endpoints are not set; pass --mock to run offline");

    const AugmentResult result = augment(original, clients, opt);
    s.outputs.push_back("generated/");
    Manifest generated;
    generated.entries = result.generated;
    write_manifest(s.output("generated.tsv"), generated);
    write_quarantine(s.output("quarantine.tsv"), result.quarantine);
    const auto ratios = ratios_from(s.cfg["resplit.ratios"], 2, "resplit.ratios");
    if (a.ablation) {
        const auto grid = build_ablation_manifests(original, result, ratios, seed);
        fs::create_directories(s.out / "ablation");
        write_manifest(s.output("ablation/baseline.tsv"), grid.baseline);
        write_manifest(s.output("ablation/superres.tsv"), grid.superres_only);
        write_manifest(s.output("ablation/diffusion.tsv"), grid.diffusion_only);
        write_manifest(s.output("ablation/full.tsv"), grid.full);
    }
    const Manifest final_manifest = merge_and_resplit(original, result.generated, ratios, seed);
    write_manifest(s.output("manifest.tsv"), final_manifest);
    s.summary["generated"] = result.generated.size();
    s.summary["quarantined"] = result.quarantine.size();
    s.summary["counts"] = {{"train", final_manifest.count(Split::train)},
                           {"valid", final_manifest.count(Split::valid)},
                           {"test", final_manifest.count(Split::test)}};
}

struct TrainArgs {
    std::string manifest;
    std::string resume;
    std::size_t stop_after = 0;
    std::size_t repeat = 1;
};

void cmd_train(Session& s, const TrainArgs& a) {
    const Manifest manifest = read_manifest(a.manifest);
    const auto names = manifest.class_names();
    const std::uint64_t seed = s.seed();
    const ModelConfig mc = model_config(s.cfg, names.size());
    const fs::path root = s.cfg["data.root"].get<std::string>();
    ManifestDataset train_set(manifest, Split::train, norm_for(mc), root);
    ManifestDataset valid_set(manifest, Split::valid, norm_for(mc), root);
    if (train_set.size() == 0) throw std::runtime_error("manifest '" + a.manifest + "' has no train entries");

    TrainConfig tc;
    tc.epochs = s.cfg["train.epochs"];
    tc.batch_size = s.cfg["train.batch_size"];
    tc.lr = s.cfg["train.lr"];
    tc.weight_decay = s.cfg["train.weight_decay"];
    tc.eval_every = s.cfg["train.eval_every"];
    tc.loader_threads = s.cfg["train.loader_threads"];
    tc.seed = seed;
    tc.stop_after = a.stop_after;
    tc.checkpoint_dir = s.out / "checkpoints";
    try {
        tc.validate();
        mc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    if (a.repeat == 0) throw UsageError("--repeat must be >= 1");
    if (a.repeat > 1 && !a.resume.empty()) throw UsageError("--repeat cannot be combined with --resume");
    const Dataset* valid = valid_set.size() ? &valid_set : nullptr;
    json runs = json::array();
    for (std::size_t r = 0; r < a.repeat; ++r) {
        const std::string sub = a.repeat == 1 ? "" : "run" + std::to_string(r) + "/";
        TrainConfig rc = tc;
        rc.seed = r == 0 ? seed : mix_seed(seed, r);
        rc.checkpoint_dir = s.out / sub / "checkpoints";
        Rng rng(rc.seed);
        Dvit model(mc, rng);
        s.note("run " + std::to_string(r) + ": " + std::to_string(model.parameter_count()) + " parameters");
        const RunLog log = a.resume.empty() ? train(model, train_set, valid, rc) : resume(model, a.resume, train_set, valid, rc);
        s.outputs.push_back(sub + "checkpoints/last.ckpt");
        if (log.best_epoch) s.outputs.push_back(sub + "checkpoints/best.ckpt");
        s.outputs.push_back(sub + "checkpoints/runlog.jsonl");
        json run{{"seed", rc.seed}, {"parameters", model.parameter_count()}};
        json losses = json::array();
        for (const auto& e : log.epochs) losses.push_back(e.train_loss);
        run["epoch_losses"] = losses;
        if (log.best_epoch) {
            run["best_epoch"] = *log.best_epoch;
            run["best_valid_macc"] = log.best_macc;
        }
        if (!log.epochs.empty()) run["final_train_accuracy"] = log.epochs.back().train_accuracy;
        runs.push_back(run);
    }
    if (runs.size() == 1)
        for (auto& [k, v] : runs[0].items()) {
            if (k != "seed") s.summary[k] = v;
        }
    else
        s.summary["runs"] = runs;
}

struct EvalArgs {
    std::string checkpoint;
    std::string manifest;
    std::string split = "test";
};

void cmd_eval(Session& s, const EvalArgs& a) {
    Dvit model = load_checkpoint(a.checkpoint);
    const Manifest manifest = read_manifest(a.manifest);
    Split split;
    try {
        split = parse_split(a.split);
    } catch (const ManifestError& e) {
        throw UsageError(e.what());
    }
    const fs::path root = s.cfg["data.root"].get<std::string>();
    ManifestDataset data(manifest, split, norm_for(model.config()), root);
    if (data.size() == 0) throw std::runtime_error("split '" + a.split + "' of '" + a.manifest + "' is empty");
    if (data.class_names().size() != model.config().num_classes)
        throw std::runtime_error("manifest has " + std::to_string(data.class_names().size()) + " classes, model has " +
                                 std::to_string(model.config().num_classes));
    const EvalResult r = evaluate(model, data, s.cfg["eval.batch_size"], s.cfg["train.loader_threads"]);
    write_json(s.output("metrics.json"), r.report.to_json());
    write_text(s.output("metrics.txt"), r.report.to_text());
    s.summary["overall_accuracy"] = r.report.overall_accuracy;
    s.summary["mean_accuracy"] = r.report.to_json()["mean_accuracy"];
    s.summary["kappa"] = r.report.to_json()["kappa"];
    s.summary["macro_f1"] = r.report.macro_f1;
}

struct GradcamArgs {
    std::string checkpoint;
    std::string image;
    int target = -1;
};

void cmd_gradcam(Session& s, const GradcamArgs& a) {
    Dvit model = load_checkpoint(a.checkpoint);
    const Image image = load_image(a.image);
    const Tensor input = normalize_image(image, norm_for(model.config()));
    int target = a.target;
    if (target < 0) {
        NoGradGuard guard;
        const Tensor x = reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)});
        target = argmax_rows(model.forward(x, {false, nullptr}))[0];
    }
    const Heatmap map = grad_cam(model, input, target, s.cfg["gradcam.layer"]);
    const Image resized = resize_bilinear(image, map.height, map.width);
    write_png(s.output("heatmap.png"), map.to_image());
    write_raw(s.output("heatmap.raw"), map.to_image());
    write_png(s.output("overlay.png"), render_overlay(resized, map));
    s.summary["target_class"] = target;
    s.summary["layer"] = map.layer;
}

struct KidArgs {
    std::string real;
    std::string gen;
};

void cmd_kid(Session& s, const KidArgs& a) {
    KidConfig kc;
    kc.subsets = s.cfg["kid.subsets"];
    kc.subset_size = s.cfg["kid.subset_size"];
    kc.degree = s.cfg["kid.degree"];
    kc.seed = s.seed();
    const KidEstimate est = kid(read_feature_matrix(a.real), read_feature_matrix(a.gen), kc);
    write_json(s.output("kid.json"), est.to_json());
    s.summary["kid"] = est.value;
    s.summary["kid_x1000"] = est.scaled;
}

struct JudgeArgs {
    std::string heatmaps;
    std::string masks;
    std::string images;
    bool mock = false;
};

void cmd_judge(Session& s, const JudgeArgs& a) {
    std::unique_ptr<Transport> transport = http_transport(s.cfg, "endpoint.judge_url");
    std::unique_ptr<Judge> judge;
    if (transport)
        judge = std::make_unique<HttpJudge>(*transport, retry_from(s.cfg));
    else if (a.mock)
        judge = std::make_unique<MockJudge>();
    else
        throw UsageError("no judge configured: set endpoint.judge_url or pass --mock");
    if (a.mock && a.masks.empty()) throw UsageError("--mock needs --masks");
    if (!fs::is_directory(a.heatmaps)) throw std::runtime_error("heatmap directory '" + a.heatmaps + "' not found");

    std::vector<fs::path> model_dirs;
    for (const auto& d : fs::directory_iterator(a.heatmaps))
        if (d.is_directory()) model_dirs.push_back(d.path());
    std::sort(model_dirs.begin(), model_dirs.end());
    std::vector<JudgeVerdict> verdicts;
    json failures = json::array();
    for (const auto& dir : model_dirs) {
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(dir))
            if (f.is_regular_file() && (f.path().extension() == ".png" || f.path().extension() == ".raw")) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string cls = f.stem().string();
            const fs::path image = a.images.empty() ? fs::path() : find_image(a.images, cls);
            JudgeRequest req{judge_prompt(cls, image.string(), f.string()), ""};
            if (!a.masks.empty()) {
                const fs::path mask = find_image(a.masks, cls);
                if (mask.empty()) throw std::runtime_error("no mask for class '" + cls + "' in '" + a.masks + "'");
                req.mask_ref = mask.string();
            }
            try {
                JudgeVerdict v = parse_verdict(judge->judge(req));
                v.model = dir.filename().string();
                v.class_name = cls;
                v.image_id = image.empty() ? cls : image.filename().string();
                verdicts.push_back(std::move(v));
            } catch (const std::exception& e) {
                failures.push_back({{"model", dir.filename().string()}, {"class", cls}, {"error", e.what()}});
            }
        }
    }
    if (verdicts.empty()) throw std::runtime_error("no verdicts were produced");
    write_verdicts(s.output("verdicts.jsonl"), verdicts);
    const auto scores = aggregate_scores(verdicts);
    write_text(s.output("scores.txt"), scores_to_text(scores));
    write_json(s.output("scores.json"), scores_to_json(scores));
    s.summary["verdicts"] = verdicts.size();
    s.summary["failures"] = failures;
    s.summary["scores"] = scores_to_json(scores);
}

struct ReportArgs {
    std::vector<std::string> metrics;
    std::string verdicts;
};

void cmd_report(Session& s, const ReportArgs& a) {
    if (a.metrics.empty() && a.verdicts.empty()) throw UsageError("report needs --metrics and/or --verdicts");
    std::ostringstream text;
    char buf[256];
    if (!a.metrics.empty()) {
        std::snprintf(buf, sizeof buf, "%-32s %8s %8s %8s %8s %8s %8s\n", "run", "OA", "mAcc", "kappa", "P", "R", "F1");
        text << buf;
        for (const auto& path : a.metrics) {
            std::ifstream in(path);
            if (!in) throw std::runtime_error("cannot open metrics file '" + path + "'");
            const json m = json::parse(in);
            auto num = [&](const char* key) { return m.at(key).is_number() ? m.at(key).get<double>() : std::nan(""); };
            std::snprintf(buf, sizeof buf, "%-32s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n", fs::path(path).parent_path().filename().string().c_str(),
                          num("overall_accuracy"), num("mean_accuracy"), num("kappa"), num("macro_precision"),
                          num("macro_recall"), num("macro_f1"));
            text << buf;
        }
    }
    if (!a.verdicts.empty()) {
        if (!a.metrics.empty()) text << '\n';
        text << scores_to_text(aggregate_scores(read_verdicts(a.verdicts)));
    }
    write_text(s.output("report.txt"), text.str());
    s.console << text.str();
}

std::string prescan_out(const std::vector<std::string>& argv) {
    for (std::size_t i = 1; i < argv.size(); ++i) {
        if (argv[i] == "--out" && i + 1 < argv.size()) return argv[i + 1];
        if (argv[i].rfind("--out=", 0) == 0) return argv[i].substr(6);
    }
    return "dvit-out";
}

void write_summary(const fs::path& out, json summary, std::ostream& err) {
    try {
        fs::create_directories(out);
        std::ofstream f(out / "summary.json", std::ios::trunc);
        f << summary.dump(2) << '\n';
    } catch (const std::exception& e) {
        err << "warning: could not write summary: " << e.what() << '\n';
    }
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Deformable backbone + transformer scene classifier toolkit", "dvit"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_file, out_dir = "dvit-out";
    std::vector<std::string> overrides;
    int verbosity = 0;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_file, "Flat JSON config file");
    app.add_option("--set", overrides, "Config override key=value (repeatable)")->allow_extra_args(false);
    app.add_option("--out", out_dir, "Output directory");
    app.add_option("--seed", seed, "Random seed");
    app.add_flag("-v,--verbose", verbosity, "Verbose progress on stderr");

    SplitArgs split_args;
    auto* split = app.add_subcommand("split", "Stratified train/valid/test split of a manifest");
    split->add_option("--manifest", split_args.manifest, "Input manifest")->required();
    split->add_option("--ratios", split_args.ratios, "train,valid,test ratios");

    AugmentArgs augment_args;
    auto* augment_cmd = app.add_subcommand("augment", "Generate super-resolved and diffusion images, then merge and re-split");
    augment_cmd->add_option("--manifest", augment_args.manifest, "Split manifest")->required();
    augment_cmd->add_flag("--mock", augment_args.mock, "Use offline mock endpoints");
    augment_cmd->add_flag("--ablation", augment_args.ablation, "Also write the four ablation manifests");

    TrainArgs train_args;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<double> lr;
    auto* train_cmd = app.add_subcommand("train", "Train a model on a split manifest");
    train_cmd->add_option("--manifest", train_args.manifest, "Split manifest")->required();
    train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from");
    train_cmd->add_option("--epochs", epochs, "Number of epochs");
    train_cmd->add_option("--batch-size", batch_size, "Batch size");
    train_cmd->add_option("--lr", lr, "Learning rate");
    train_cmd->add_option("--stop-after", train_args.stop_after, "Stop after this epoch");
    train_cmd->add_option("--repeat", train_args.repeat, "Independent runs with derived seeds, under run<k>/");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--manifest", eval_args.manifest, "Manifest")->required();
    eval_cmd->add_option("--split", eval_args.split, "train, valid or test");

    GradcamArgs gradcam_args;
    auto* gradcam_cmd = app.add_subcommand("gradcam", "Grad-CAM heatmap and overlay for one image");
    gradcam_cmd->add_option("--checkpoint", gradcam_args.checkpoint, "Checkpoint file")->required();
    gradcam_cmd->add_option("--image", gradcam_args.image, "Image (.png or .raw)")->required();
    gradcam_cmd->add_option("--class", gradcam_args.target, "Target class id (default: predicted)");
    std::string layer;
    gradcam_cmd->add_option("--layer", layer, "Captured layer name");

    KidArgs kid_args;
    auto* kid_cmd = app.add_subcommand("kid", "Kernel inception distance between two feature files");
    kid_cmd->add_option("--real", kid_args.real, "Real features, one row per sample")->required();
    kid_cmd->add_option("--gen", kid_args.gen, "Generated features")->required();

    JudgeArgs judge_args;
    auto* judge_cmd = app.add_subcommand("judge", "Score heatmaps against the rubric");
    judge_cmd->add_option("--heatmaps", judge_args.heatmaps, "Directory of <model>/<class>.png heatmaps")->required();
    judge_cmd->add_option("--masks", judge_args.masks, "Directory of <class>.png ground-truth masks");
    judge_cmd->add_option("--images", judge_args.images, "Directory of <class>.png source images");
    judge_cmd->add_flag("--mock", judge_args.mock, "Use the offline overlap judge");

    ReportArgs report_args;
    auto* report_cmd = app.add_subcommand("report", "Tabulate metrics and judge scores");
    report_cmd->add_option("--metrics", report_args.metrics, "metrics.json files from eval")->allow_extra_args(false);
    report_cmd->add_option("--verdicts", report_args.verdicts, "verdicts.jsonl from judge");

    json summary{{"command", nullptr}, {"argv", argv}};
    std::vector<const char*> cargv;
    for (const auto& a : argv) cargv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(cargv.size()), const_cast<char**>(cargv.data()));
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        summary["exit_code"] = kUsage;
        summary["error"] = e.what();
        write_summary(prescan_out(argv), summary, err);
        return kUsage;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    summary["command"] = command;
    Session session{json::object(), out_dir, err, out, verbosity};
    int code = kOk;
    try {
        session.cfg = resolve_config(config_file, overrides);
        if (seed) session.cfg["seed"] = *seed;
        if (epochs) session.cfg["train.epochs"] = *epochs;
        if (batch_size) session.cfg["train.batch_size"] = *batch_size;
        if (lr) session.cfg["train.lr"] = *lr;
        if (!layer.empty()) session.cfg["gradcam.layer"] = layer;
        fs::create_directories(session.out);
        if (command == "split") cmd_split(session, split_args);
        else if (command == "augment") cmd_augment(session, augment_args);
        else if (command == "train") cmd_train(session, train_args);
        else if (command == "eval") cmd_eval(session, eval_args);
        else if (command == "gradcam") cmd_gradcam(session, gradcam_args);
        else if (command == "kid") cmd_kid(session, kid_args);
        else if (command == "judge") cmd_judge(session, judge_args);
        else if (command == "report") cmd_report(session, report_args);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        summary["error"] = e.what();
        code = kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        summary["error"] = e.what();
        code = kRuntime;
    }
    for (auto& [k, v] : session.summary.items()) summary[k] = v;
    summary["exit_code"] = code;
    summary["outputs"] = session.outputs;
    summary["config"] = session.cfg;
    write_summary(session.out, summary, err);
    if (code == kOk) out << command << ": wrote " << (session.out / "summary.json").string() << '\n';
    return code;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace dvit::cli
