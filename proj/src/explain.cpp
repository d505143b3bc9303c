#include "dvit/explain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace dvit {

double Heatmap::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }
double Heatmap::min() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }

Image Heatmap::to_image() const {
    Image image(height, width, 1);
    image.data = values;
    return image;
}

Heatmap Heatmap::from_image(const Image& image) {
    Heatmap h;
    h.height = image.height;
    h.width = image.width;
    h.values.resize(image.height * image.width);
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        const double* px = image.data.data() + i * image.channels;
        h.values[i] = image.channels >= 3 ? (px[0] + px[1] + px[2]) / 3.0 : px[0];
    }
    return h;
}

Heatmap cam_from_gradients(const Tensor& activation, const Tensor& gradient, std::size_t out_h, std::size_t out_w) {
    Shape shape = activation.shape();
    if (shape.size() == 4 && shape[0] == 1) shape.erase(shape.begin());
    if (shape.size() != 3)
        throw ShapeError("grad-cam needs a spatial C x h x w activation, got " + shape_str(activation.shape()));
    if (gradient.numel() != activation.numel())
        throw ShapeError("grad-cam gradient " + shape_str(gradient.shape()) + " does not match activation " +
                         shape_str(activation.shape()));
    const std::size_t c = shape[0], h = shape[1], w = shape[2], plane = h * w;
    auto a = activation.data();
    auto g = gradient.data();
    Image raw(h, w, 1);
    for (std::size_t r = 0; r < c; ++r) {
        double alpha = 0.0;
        for (std::size_t i = 0; i < plane; ++i) alpha += g[r * plane + i];
        alpha /= static_cast<double>(plane);
        for (std::size_t i = 0; i < plane; ++i) raw.data[i] += alpha * a[r * plane + i];
    }
    for (double& v : raw.data) v = std::max(0.0, v);

    const Image up = resize_bilinear(raw, out_h, out_w);
    Heatmap map;
    map.height = out_h;
    map.width = out_w;
    map.values = up.data;
    const double lo = map.min(), hi = map.max();
    if (hi > lo) {
        for (double& v : map.values) v = (v - lo) / (hi - lo);
    } else {
        std::fill(map.values.begin(), map.values.end(), hi > 0.0 ? 1.0 : 0.0);
    }
    return map;
}

Heatmap grad_cam(const CapturingForward& forward, const Tensor& input, int target_class, const std::string& layer) {
    Tensor batch = input;
    if (input.rank() == 3) batch = reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)});
    if (batch.rank() != 4 || batch.dim(0) != 1)
        throw ShapeError("grad-cam takes one C x H x W image, got " + shape_str(input.shape()));
    // forwards without trainable parameters still need a recorded graph
    batch = Tensor::from(batch.shape(), batch.to_vector(), true);
    ActivationCapture capture;
    Tensor logits = forward(batch, capture);
    if (logits.rank() != 2 || target_class < 0 || static_cast<std::size_t>(target_class) >= logits.dim(1))
        throw std::out_of_range("grad-cam target class " + std::to_string(target_class) + " outside logits " +
                                shape_str(logits.shape()));
    auto it = capture.find(layer);
    if (it == capture.end()) {
        std::string known;
        for (const auto& [name, _] : capture) known += (known.empty() ? "" : ", ") + name;
        throw std::invalid_argument("unknown grad-cam layer '" + layer + "' (available: " + known + ")");
    }
    const Tensor activation = it->second;
    if (activation.rank() != 4) throw ShapeError("grad-cam layer '" + layer + "' is not spatial: " + shape_str(activation.shape()));

    Tensor target = slice(slice(logits, 0, 0, 1), 1, static_cast<std::size_t>(target_class), 1);
    Tensor gradient = Tensor::zeros(activation.shape());
    if (target.requires_grad()) {
        sum(target).backward();
        if (activation.has_grad()) gradient = activation.grad_tensor();
    }
    Heatmap map = cam_from_gradients(activation.detach(), gradient, batch.dim(2), batch.dim(3));
    map.layer = layer;
    map.target_class = target_class;
    return map;
}

Heatmap grad_cam(Dvit& model, const Tensor& input, int target_class, const std::string& layer) {
    const ForwardContext ctx{false, nullptr};
    auto forward = [&](const Tensor& x, ActivationCapture& capture) { return model.forward(x, ctx, &capture); };
    Heatmap map = grad_cam(forward, input, target_class, layer);
    for (auto& p : model.parameters()) p.tensor.zero_grad();
    return map;
}

void colormap(double v, double rgb[3]) {
    static const double stops[5][3] = {{0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}};
    v = std::clamp(v, 0.0, 1.0);
    const double pos = v * 4.0;
    const auto i = std::min<std::size_t>(3, static_cast<std::size_t>(pos));
    const double f = pos - static_cast<double>(i);
    for (int c = 0; c < 3; ++c) rgb[c] = stops[i][c] * (1.0 - f) + stops[i + 1][c] * f;
}

Image render_overlay(const Image& image, const Heatmap& heatmap) {
    if (image.height != heatmap.height || image.width != heatmap.width)
        throw ShapeError("overlay image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " but heatmap is " + std::to_string(heatmap.height) + "x" + std::to_string(heatmap.width));
    if (image.channels != 3 && image.channels != 1)
        throw ImageError("overlay needs an RGB or gray image, got " + std::to_string(image.channels) + " channels");
    Image out(image.height, image.width, 3);
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x) {
            double rgb[3];
            colormap(heatmap.at(y, x), rgb);
            for (std::size_t c = 0; c < 3; ++c) {
                const double base = image.at(y, x, image.channels == 3 ? c : 0);
                out.at(y, x, c) = 0.5 * base + 0.5 * rgb[c];
            }
        }
    return out;
}

// ---- judging ---------------------------------------------------------------

const char* const kJudgeRubric =
    "Assign an integer score s in {0,1,2,3}:\n"
    "- s=0: attention almost entirely on irrelevant areas, with class-relevant regions largely ignored;\n"
    "- s=1: partial overlap with relevant regions, but a substantial portion of strong attention on irrelevant areas;\n"
    "- s=2: most strong attention on key class regions and structures, with limited spillover to background;\n"
    "- s=3: near-perfect alignment with class-discriminative regions and boundaries, with minimal unnecessary focus.\n";

JudgePrompt judge_prompt(const std::string& class_name, const std::string& image_ref, const std::string& heatmap_ref) {
    JudgePrompt p;
    p.class_name = class_name;
    p.image_ref = image_ref;
    p.heatmap_ref = heatmap_ref;
    std::ostringstream text;
    text << "You are an impartial judge of attention maps for remote-sensing scene classification.\n\n"
         << "Inputs: the ground-truth scene category, the original RGB image, and the corresponding attention "
            "heatmap, where warmer colors indicate higher attention.\n\n"
         << "Ground-truth category: " << class_name << "\n\n"
         << "Evaluation focus: assess only the spatial alignment between high-activation regions and the semantic "
            "regions of the ground-truth class (e.g., water body, shoreline, river course, forest canopy, mountain "
            "ridge, bridge span), ignoring model architecture, training details, and any numerical scores.\n\n"
         << "Scoring rubric. " << kJudgeRubric << '\n'
         << "Answer with a single integer score on the first line as \"Score: <s>\", followed by a brief explanation.\n";
    p.text = text.str();
    return p;
}

nlohmann::json JudgeVerdict::to_json() const {
    return {{"model", model}, {"class", class_name}, {"image", image_id}, {"score", score}, {"explanation", explanation}};
}

JudgeVerdict JudgeVerdict::from_json(const nlohmann::json& j) {
    JudgeVerdict v;
    v.model = j.at("model").get<std::string>();
    v.class_name = j.at("class").get<std::string>();
    v.image_id = j.value("image", "");
    v.score = j.at("score").get<int>();
    v.explanation = j.value("explanation", "");
    if (v.score < 0 || v.score > 3) throw std::out_of_range("verdict score " + std::to_string(v.score) + " outside 0-3");
    return v;
}

VerdictParseError::VerdictParseError(std::string raw)
    : std::runtime_error("no score in 0-3 found in judge response: \"" + raw + "\""), raw_(std::move(raw)) {}

JudgeVerdict parse_verdict(const std::string& response) {
    const std::size_t n = response.size();
    auto is_alnum = [&](std::size_t i) { return std::isalnum(static_cast<unsigned char>(response[i])) != 0; };
    for (std::size_t i = 0; i < n;) {
        if (!std::isdigit(static_cast<unsigned char>(response[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < n && std::isdigit(static_cast<unsigned char>(response[j]))) ++j;
        const bool touches_before = i > 0 && (is_alnum(i - 1) || response[i - 1] == '-' ||
                                              (response[i - 1] == '.' && i > 1 && std::isdigit(static_cast<unsigned char>(response[i - 2]))));
        const bool touches_after =
            j < n && (is_alnum(j) || (response[j] == '.' && j + 1 < n && std::isdigit(static_cast<unsigned char>(response[j + 1]))));
        if (!touches_before && !touches_after && j - i == 1 && response[i] <= '3') {
            JudgeVerdict v;
            v.score = response[i] - '0';
            std::size_t k = j;
            while (k < n && (std::isspace(static_cast<unsigned char>(response[k])) || std::strchr(".:;,-)/", response[k]))) ++k;
            v.explanation = response.substr(k);
            while (!v.explanation.empty() && std::isspace(static_cast<unsigned char>(v.explanation.back()))) v.explanation.pop_back();
            return v;
        }
        i = j;
    }
    throw VerdictParseError(response);
}

int mock_judge_score(const Heatmap& heatmap, const Image& mask) {
    Heatmap h = heatmap;
    if (h.height != mask.height || h.width != mask.width) {
        h.values = resize_bilinear(heatmap.to_image(), mask.height, mask.width).data;
        h.height = mask.height;
        h.width = mask.width;
    }
    double inside = 0.0, total = 0.0;
    for (std::size_t i = 0; i < h.values.size(); ++i) {
        total += h.values[i];
        if (mask.data[i * mask.channels] > 0.5) inside += h.values[i];
    }
    if (total <= 0.0) return 0;
    const double f = inside / total;
    return f < 0.25 ? 0 : f < 0.5 ? 1 : f < 0.75 ? 2 : 3;
}

std::string MockJudge::judge(const JudgeRequest& request) {
    const Heatmap heat = Heatmap::from_image(load_image(request.prompt.heatmap_ref));
    const Image mask = load_image(request.mask_ref);
    const int score = mock_judge_score(heat, mask);
    static const char* const notes[4] = {
        "Attention falls mostly outside the class region.",
        "Attention partly overlaps the class region but much of it is elsewhere.",
        "Most attention lies on the class region with some spillover.",
        "Attention closely follows the class region.",
    };
    return "Score: " + std::to_string(score) + ". " + notes[score];
}

std::string HttpJudge::judge(const JudgeRequest& request) {
    auto b64 = [](const std::string& path) { return base64_encode(encode_png(load_image(path))); };
    nlohmann::json body{{"prompt", request.prompt.text}};
    if (!request.prompt.image_ref.empty()) body["image"] = b64(request.prompt.image_ref);
    body["heatmap"] = b64(request.prompt.heatmap_ref);
    const auto response = post_with_retry(transport_, body, retry_);
    if (!response.is_object() || !response.contains("response") || !response.at("response").is_string())
        throw ResponseParseError("judge response lacks a \"response\" string", response.dump());
    return response.at("response").get<std::string>();
}

std::vector<ModelScore> aggregate_scores(const std::vector<JudgeVerdict>& verdicts) {
    if (verdicts.empty()) throw std::invalid_argument("no verdicts to aggregate");
    std::map<std::string, std::pair<double, std::size_t>> sums;
    for (const auto& v : verdicts) {
        auto& [s, c] = sums[v.model];
        s += v.score;
        ++c;
    }
    std::vector<ModelScore> out;
    for (const auto& [model, sc] : sums) out.push_back({model, sc.first / static_cast<double>(sc.second), sc.second});
    std::stable_sort(out.begin(), out.end(), [](const ModelScore& a, const ModelScore& b) { return a.mean > b.mean; });
    return out;
}

std::string scores_to_text(const std::vector<ModelScore>& scores) {
    std::size_t width = 5;
    for (const auto& s : scores) width = std::max(width, s.model.size());
    std::ostringstream out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s %8s %6s\n", static_cast<int>(width), "model", "mean", "n");
    out << buf;
    for (const auto& s : scores) {
        std::snprintf(buf, sizeof buf, "%-*s %8.3f %6zu\n", static_cast<int>(width), s.model.c_str(), s.mean, s.count);
        out << buf;
    }
    return out.str();
}

nlohmann::json scores_to_json(const std::vector<ModelScore>& scores) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : scores) j.push_back({{"model", s.model}, {"mean", s.mean}, {"count", s.count}});
    return j;
}

void write_verdicts(const std::filesystem::path& path, const std::vector<JudgeVerdict>& verdicts) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    for (const auto& v : verdicts) out << v.to_json().dump() << '\n';
}

std::vector<JudgeVerdict> read_verdicts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::vector<JudgeVerdict> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(JudgeVerdict::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace dvit
