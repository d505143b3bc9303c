#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvit/canny.hpp"
#include "dvit/image.hpp"
#include "dvit/manifest.hpp"

namespace dvit {

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Network failure or timeout; retried.
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Response did not have the documented shape; not retried.
class ResponseParseError : public std::runtime_error {
public:
    ResponseParseError(const std::string& what, std::string raw) : std::runtime_error(what), raw_(std::move(raw)) {}
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

/// JSON request/response channel to one external service.
class Transport {
public:
    virtual ~Transport() = default;
    virtual nlohmann::json post(const nlohmann::json& body) = 0;
};

struct HttpEndpointConfig {
    std::string url;                                 // http[s]://host[:port]/path
    std::string token_env = "DVIT_ENDPOINT_TOKEN";  // bearer token source
    std::chrono::milliseconds timeout{60000};
};

/// POSTs JSON with an optional `Authorization: Bearer` header read from the
/// configured environment variable at call time.
class HttpTransport : public Transport {
public:
    explicit HttpTransport(HttpEndpointConfig cfg);
    nlohmann::json post(const nlohmann::json& body) override;

private:
    HttpEndpointConfig cfg_;
    std::string origin_;
    std::string path_;
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    double multiplier = 2.0;
};

/// Calls `fn`, retrying TransportError with exponential backoff. The last
/// TransportError is rethrown once attempts are exhausted.
nlohmann::json post_with_retry(Transport& transport, const nlohmann::json& body, const RetryPolicy& policy,
                               const std::function<void(std::chrono::milliseconds)>& sleep = {});

// Request shapes:
//   caption:    {"image": b64png}                                  -> {"prompt": str}
//   generation: {"image": b64png, "prompt": str, "edges": b64png,
//                "seed": int}                                      -> {"image": b64png}
//   superres:   {"image": b64png}                                  -> {"image": b64png}
std::string request_caption(const Image& image, Transport& transport, const RetryPolicy& policy = {});
Image request_generation(const std::string& prompt, const EdgeMap& edges, const Image& image, std::uint64_t seed,
                         Transport& transport, const RetryPolicy& policy = {});
Image request_superres(const Image& image, Transport& transport, const RetryPolicy& policy = {});

/// Offline stand-ins. All are deterministic and thread-safe.
class MockCaptionTransport : public Transport {
public:
    /// `template_text` may contain "{mean}", replaced by the image's mean
    /// intensity to two decimals.
    explicit MockCaptionTransport(std::string template_text = "a high-resolution aerial photograph, mean tone {mean}");
    nlohmann::json post(const nlohmann::json& body) override;

private:
    std::string template_;
};

/// Returns the source image blended with its edge map, tinted by seed.
class MockGenerationTransport : public Transport {
public:
    nlohmann::json post(const nlohmann::json& body) override;
};

/// Nearest-neighbour upscaling by `factor`.
class MockSuperresTransport : public Transport {
public:
    explicit MockSuperresTransport(std::size_t factor = 4) : factor_(factor) {}
    nlohmann::json post(const nlohmann::json& body) override;

private:
    std::size_t factor_;
};

/// Fails the first `failures` calls (per process) with a TransportError,
/// then forwards. Useful for exercising retries and quarantine.
class FlakyTransport : public Transport {
public:
    FlakyTransport(Transport& inner, int failures) : inner_(inner), remaining_(failures) {}
    nlohmann::json post(const nlohmann::json& body) override;
    int calls() const;

private:
    Transport& inner_;
    mutable std::mutex mutex_;
    int remaining_;
    int calls_ = 0;
};

struct AugmentOptions {
    bool superres = true;
    bool diffusion = true;
    std::size_t diffusion_per_image = 2;
    CannyConfig canny;
    std::filesystem::path output_dir = "generated";
    std::string image_extension = ".png";
    std::uint64_t seed = 0;
    std::size_t max_in_flight = 4;
    RetryPolicy retry;
};

struct AugmentClients {
    Transport* caption = nullptr;
    Transport* generation = nullptr;
    Transport* superres = nullptr;
};

struct QuarantineRecord {
    std::string path;
    std::string stage;  // caption | generation | superres | load
    std::string error;
};

struct AugmentResult {
    std::vector<ManifestEntry> generated;  // in source order
    std::vector<QuarantineRecord> quarantine;
};

/// Runs the caption / edge / generation and super-resolution requests for
/// every original-train entry of `manifest`. Entries whose requests fail
/// after retries are quarantined and produce no output. Output paths are
/// `<output_dir>/<provenance>/<stem>_<tag><ext>`.
AugmentResult augment(const Manifest& manifest, const AugmentClients& clients, const AugmentOptions& options);

/// The four pipeline variants (neither, super-resolution only, diffusion
/// only, both) built from one augmentation result.
struct AblationManifests {
    Manifest baseline;
    Manifest superres_only;
    Manifest diffusion_only;
    Manifest full;
};

AblationManifests build_ablation_manifests(const Manifest& original, const AugmentResult& augmented,
                                           const std::vector<double>& ratios, std::uint64_t seed);

void write_quarantine(const std::filesystem::path& path, const std::vector<QuarantineRecord>& records);

}  // namespace dvit
