#include "dvit/endpoints.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "httplib.h"

#include "dvit/rng.hpp"

namespace dvit {

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw std::invalid_argument("base64 input length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * text.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0) throw std::invalid_argument("invalid base64 input");
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

HttpTransport::HttpTransport(HttpEndpointConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme_end = cfg_.url.find("://");
    if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint URL needs a scheme: '" + cfg_.url + "'");
    const auto path_start = cfg_.url.find('/', scheme_end + 3);
    origin_ = cfg_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
}

nlohmann::json HttpTransport::post(const nlohmann::json& body) {
    httplib::Client client(origin_);
    if (!client.is_valid()) throw std::invalid_argument("unsupported endpoint URL '" + cfg_.url + "'");
    client.set_connection_timeout(cfg_.timeout);
    client.set_read_timeout(cfg_.timeout);
    client.set_write_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (const char* token = std::getenv(cfg_.token_env.c_str()); token && *token)
        headers.emplace("Authorization", std::string("Bearer ") + token);
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw TransportError("POST " + cfg_.url + " failed: " + httplib::to_string(res.error()));
    if (res->status >= 500 || res->status == 429)
        throw TransportError("POST " + cfg_.url + " returned HTTP " + std::to_string(res->status));
    if (res->status != 200)
        throw ResponseParseError("POST " + cfg_.url + " returned HTTP " + std::to_string(res->status), res->body);
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
        throw ResponseParseError(std::string("response is not JSON: ") + e.what(), res->body);
    }
}

nlohmann::json post_with_retry(Transport& transport, const nlohmann::json& body, const RetryPolicy& policy,
                               const std::function<void(std::chrono::milliseconds)>& sleep) {
    if (policy.attempts < 1) throw std::invalid_argument("retry policy needs at least one attempt");
    auto delay = policy.initial_backoff;
    for (int attempt = 1;; ++attempt) {
        try {
            return transport.post(body);
        } catch (const TransportError&) {
            if (attempt >= policy.attempts) throw;
        }
        if (sleep)
            sleep(delay);
        else
            std::this_thread::sleep_for(delay);
        delay = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(delay.count()) * policy.multiplier));
    }
}

namespace {

std::string image_b64(const Image& image) { return base64_encode(encode_png(image)); }

const nlohmann::json& require_field(const nlohmann::json& response, const char* key, nlohmann::json::value_t type) {
    if (!response.is_object() || !response.contains(key) || response.at(key).type() != type)
        throw ResponseParseError(std::string("response lacks a valid \"") + key + "\" field", response.dump());
    return response.at(key);
}

Image image_field(const nlohmann::json& response) {
    const auto& field = require_field(response, "image", nlohmann::json::value_t::string);
    try {
        return decode_png(base64_decode(field.get<std::string>()));
    } catch (const std::exception& e) {
        throw ResponseParseError(std::string("response image is not a base64 PNG: ") + e.what(), response.dump());
    }
}

Image request_image(const nlohmann::json& request) {
    if (!request.contains("image") || !request.at("image").is_string())
        throw ResponseParseError("request lacks an image", request.dump());
    return decode_png(base64_decode(request.at("image").get<std::string>()));
}

}  // namespace

std::string request_caption(const Image& image, Transport& transport, const RetryPolicy& policy) {
    const auto response = post_with_retry(transport, {{"image", image_b64(image)}}, policy);
    return require_field(response, "prompt", nlohmann::json::value_t::string).get<std::string>();
}

Image request_generation(const std::string& prompt, const EdgeMap& edges, const Image& image, std::uint64_t seed,
                         Transport& transport, const RetryPolicy& policy) {
    nlohmann::json body{{"image", image_b64(image)}, {"prompt", prompt}, {"edges", image_b64(edges.to_image())}, {"seed", seed}};
    return image_field(post_with_retry(transport, body, policy));
}

Image request_superres(const Image& image, Transport& transport, const RetryPolicy& policy) {
    return image_field(post_with_retry(transport, {{"image", image_b64(image)}}, policy));
}

MockCaptionTransport::MockCaptionTransport(std::string template_text) : template_(std::move(template_text)) {}

nlohmann::json MockCaptionTransport::post(const nlohmann::json& body) {
    const Image image = request_image(body);
    double mean = 0.0;
    for (double v : image.data) mean += v;
    mean /= static_cast<double>(image.data.size());
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", mean);
    std::string text = template_;
    if (const auto pos = text.find("{mean}"); pos != std::string::npos) text.replace(pos, 6, buf);
    return {{"prompt", text}};
}

nlohmann::json MockGenerationTransport::post(const nlohmann::json& body) {
    Image image = request_image(body);
    if (!body.contains("edges") || !body.contains("prompt")) throw ResponseParseError("request lacks edges or prompt", body.dump());
    const Image edges = decode_png(base64_decode(body.at("edges").get<std::string>()));
    if (edges.height != image.height || edges.width != image.width)
        throw ResponseParseError("edge map size differs from image", "");
    const std::uint64_t seed = body.value("seed", std::uint64_t{0});
    const std::size_t tint = seed % image.channels;
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < image.channels; ++c) {
                double v = 0.7 * image.at(y, x, c) + 0.3 * edges.at(y, x, 0);
                if (c == tint) v = std::min(1.0, v + 0.05);
                image.at(y, x, c) = v;
            }
    return {{"image", image_b64(image)}};
}

nlohmann::json MockSuperresTransport::post(const nlohmann::json& body) {
    const Image image = request_image(body);
    Image out(image.height * factor_, image.width * factor_, image.channels);
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x)
            for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(y / factor_, x / factor_, c);
    return {{"image", image_b64(out)}};
}

nlohmann::json FlakyTransport::post(const nlohmann::json& body) {
    {
        std::lock_guard lock(mutex_);
        ++calls_;
        if (remaining_ > 0) {
            --remaining_;
            throw TransportError("injected transport failure");
        }
    }
    return inner_.post(body);
}

int FlakyTransport::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

namespace {

struct EntryOutcome {
    std::vector<ManifestEntry> generated;
    std::vector<QuarantineRecord> quarantine;
};

std::string output_stem(const ManifestEntry& e) {
    char hash[17];
    std::snprintf(hash, sizeof hash, "%08llx", static_cast<unsigned long long>(hash_string(e.path) & 0xffffffffULL));
    return std::filesystem::path(e.path).stem().string() + "_" + hash;
}

EntryOutcome augment_entry(const ManifestEntry& e, const AugmentClients& clients, const AugmentOptions& opt) {
    EntryOutcome outcome;
    Image image;
    try {
        image = load_image(e.path);
    } catch (const std::exception& err) {
        outcome.quarantine.push_back({e.path, "load", err.what()});
        return outcome;
    }
    const std::string stem = output_stem(e);
    auto make_entry = [&](Provenance p, const std::filesystem::path& path, std::string prompt) {
        ManifestEntry g;
        g.path = path.string();
        g.class_name = e.class_name;
        g.class_id = e.class_id;
        g.split = Split::unassigned;
        g.provenance = p;
        g.source_id = e.path;
        g.prompt = std::move(prompt);
        return g;
    };

    if (opt.superres) {
        try {
            const Image up = request_superres(image, *clients.superres, opt.retry);
            const auto path = opt.output_dir / "superres" / (stem + "_sr" + opt.image_extension);
            save_image(path, up);
            outcome.generated.push_back(make_entry(Provenance::superres, path, ""));
        } catch (const std::exception& err) {
            outcome.quarantine.push_back({e.path, "superres", err.what()});
        }
    }
    if (opt.diffusion) {
        std::string prompt;
        try {
            prompt = request_caption(image, *clients.caption, opt.retry);
        } catch (const std::exception& err) {
            outcome.quarantine.push_back({e.path, "caption", err.what()});
            return outcome;
        }
        const EdgeMap edges = canny_edges(to_gray255(image), opt.canny);
        for (std::size_t k = 0; k < opt.diffusion_per_image; ++k) {
            try {
                const auto seed = mix_seed(opt.seed, hash_string(e.path), k);
                const Image gen = request_generation(prompt, edges, image, seed, *clients.generation, opt.retry);
                const auto path = opt.output_dir / "diffusion" / (stem + "_d" + std::to_string(k) + opt.image_extension);
                save_image(path, gen);
                outcome.generated.push_back(make_entry(Provenance::diffusion, path, prompt));
            } catch (const std::exception& err) {
                outcome.quarantine.push_back({e.path, "generation", err.what()});
            }
        }
    }
    return outcome;
}

}  // namespace

AugmentResult augment(const Manifest& manifest, const AugmentClients& clients, const AugmentOptions& options) {
    if (options.superres && !clients.superres) throw std::invalid_argument("super-resolution enabled without a client");
    if (options.diffusion && (!clients.caption || !clients.generation))
        throw std::invalid_argument("diffusion enabled without caption and generation clients");
    if (options.superres) std::filesystem::create_directories(options.output_dir / "superres");
    if (options.diffusion) std::filesystem::create_directories(options.output_dir / "diffusion");

    std::vector<const ManifestEntry*> sources;
    for (const auto& e : manifest.entries)
        if (e.split == Split::train && e.provenance == Provenance::original) sources.push_back(&e);

    std::vector<EntryOutcome> outcomes(sources.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < sources.size(); i = next++) outcomes[i] = augment_entry(*sources[i], clients, options);
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(options.max_in_flight, sources.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    AugmentResult result;
    for (auto& o : outcomes) {
        for (auto& g : o.generated) result.generated.push_back(std::move(g));
        for (auto& q : o.quarantine) result.quarantine.push_back(std::move(q));
    }
    return result;
}

AblationManifests build_ablation_manifests(const Manifest& original, const AugmentResult& augmented,
                                           const std::vector<double>& ratios, std::uint64_t seed) {
    auto select = [&](bool sr, bool diff) {
        std::vector<ManifestEntry> chosen;
        for (const auto& g : augmented.generated)
            if ((sr && g.provenance == Provenance::superres) || (diff && g.provenance == Provenance::diffusion))
                chosen.push_back(g);
        return merge_and_resplit(original, chosen, ratios, seed);
    };
    return {select(false, false), select(true, false), select(false, true), select(true, true)};
}

void write_quarantine(const std::filesystem::path& path, const std::vector<QuarantineRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    for (const auto& r : records) {
        std::string err = r.error;
        std::replace_if(err.begin(), err.end(), [](char c) { return c == '\t' || c == '\n'; }, ' ');
        out << r.path << '\t' << r.stage << '\t' << err << '\n';
    }
}

}  // namespace dvit
