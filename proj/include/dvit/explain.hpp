#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvit/endpoints.hpp"
#include "dvit/image.hpp"
#include "dvit/model.hpp"

namespace dvit {

struct Heatmap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // row-major, in [0, 1]
    std::string layer;
    int target_class = -1;

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    double max() const;
    double min() const;
    /// Single-channel image of the values.
    Image to_image() const;
    static Heatmap from_image(const Image& image);
};

/// ReLU(sum_r alpha_r A_r) with alpha_r the spatial mean of dA_r, bilinearly
/// upsampled to out_h x out_w and min-max normalized. An identically-zero
/// map stays zero. `activation` and `gradient` are C x h x w (or 1 x C x h x w).
Heatmap cam_from_gradients(const Tensor& activation, const Tensor& gradient, std::size_t out_h, std::size_t out_w);

/// Runs a forward that records named activations, backpropagates the
/// target logit, and builds the map from the named layer.
using CapturingForward = std::function<Tensor(const Tensor& input, ActivationCapture& capture)>;
Heatmap grad_cam(const CapturingForward& forward, const Tensor& input, int target_class, const std::string& layer);

/// Grad-CAM on the model in eval mode. `input` is 3 x S x S or 1 x 3 x S x S.
/// Parameter gradients are cleared afterwards.
Heatmap grad_cam(Dvit& model, const Tensor& input, int target_class, const std::string& layer = "stage4");

/// Five-stop map: 0 blue, 0.25 cyan, 0.5 green, 0.75 yellow, 1 red.
void colormap(double v, double rgb[3]);

/// 0.5 * image + 0.5 * colormap(heatmap). Sizes must match.
Image render_overlay(const Image& image, const Heatmap& heatmap);

// ---- judging ---------------------------------------------------------------

/// Rubric text embedded verbatim in every prompt.
extern const char* const kJudgeRubric;

struct JudgePrompt {
    std::string text;
    std::string class_name;
    std::string image_ref;
    std::string heatmap_ref;
};

JudgePrompt judge_prompt(const std::string& class_name, const std::string& image_ref, const std::string& heatmap_ref);

struct JudgeVerdict {
    int score = 0;
    std::string explanation;
    std::string model;
    std::string class_name;
    std::string image_id;

    nlohmann::json to_json() const;
    static JudgeVerdict from_json(const nlohmann::json& j);
    bool operator==(const JudgeVerdict&) const = default;
};

class VerdictParseError : public std::runtime_error {
public:
    explicit VerdictParseError(std::string raw);
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

/// The score is the first standalone integer 0-3: a digit run not touching
/// letters, digits, or a decimal point, and not preceded by '-'. Everything
/// after it, minus leading separators and whitespace, is the explanation.
JudgeVerdict parse_verdict(const std::string& response);

struct JudgeRequest {
    JudgePrompt prompt;
    std::string mask_ref;  // ground-truth mask, used by the offline judge only
};

class Judge {
public:
    virtual ~Judge() = default;
    /// Raw response text.
    virtual std::string judge(const JudgeRequest& request) = 0;
};

/// Scores by the fraction f of heatmap mass inside the mask:
/// f < 0.25 -> 0, < 0.5 -> 1, < 0.75 -> 2, else 3.
int mock_judge_score(const Heatmap& heatmap, const Image& mask);

/// Offline judge reading heatmap_ref and mask_ref from disk.
class MockJudge : public Judge {
public:
    std::string judge(const JudgeRequest& request) override;
};

/// Sends {"prompt", "image": b64png, "heatmap": b64png} and expects
/// {"response": str}.
class HttpJudge : public Judge {
public:
    HttpJudge(Transport& transport, RetryPolicy retry = {}) : transport_(transport), retry_(retry) {}
    std::string judge(const JudgeRequest& request) override;

private:
    Transport& transport_;
    RetryPolicy retry_;
};

struct ModelScore {
    std::string model;
    double mean = 0.0;
    std::size_t count = 0;
};

/// Per-model mean scores, sorted by mean descending then name.
std::vector<ModelScore> aggregate_scores(const std::vector<JudgeVerdict>& verdicts);
std::string scores_to_text(const std::vector<ModelScore>& scores);
nlohmann::json scores_to_json(const std::vector<ModelScore>& scores);

void write_verdicts(const std::filesystem::path& path, const std::vector<JudgeVerdict>& verdicts);
std::vector<JudgeVerdict> read_verdicts(const std::filesystem::path& path);

}  // namespace dvit
