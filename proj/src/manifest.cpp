#include "dvit/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "dvit/rng.hpp"

namespace dvit {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
        case Split::unassigned: break;
    }
    return "-";
}

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::superres: return "superres";
        case Provenance::diffusion: return "diffusion";
        case Provenance::original: break;
    }
    return "original";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "valid") return Split::valid;
    if (text == "test") return Split::test;
    if (text == "-" || text.empty()) return Split::unassigned;
    throw ManifestError("unknown split '" + text + "'");
}

Provenance parse_provenance(const std::string& text) {
    if (text == "original") return Provenance::original;
    if (text == "superres") return Provenance::superres;
    if (text == "diffusion") return Provenance::diffusion;
    throw ManifestError("unknown provenance '" + text + "'");
}

std::vector<std::string> Manifest::class_names() const {
    std::set<std::string> names;
    for (const auto& e : entries) names.insert(e.class_name);
    return {names.begin(), names.end()};
}

void Manifest::assign_class_ids() { assign_class_ids(class_names()); }

void Manifest::assign_class_ids(const std::vector<std::string>& vocabulary) {
    std::map<std::string, int> ids;
    for (std::size_t i = 0; i < vocabulary.size(); ++i) ids[vocabulary[i]] = static_cast<int>(i);
    for (auto& e : entries) {
        auto it = ids.find(e.class_name);
        if (it == ids.end()) throw ManifestError("class '" + e.class_name + "' of '" + e.path + "' is not in the vocabulary");
        e.class_id = it->second;
    }
}

std::vector<const ManifestEntry*> Manifest::in_split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(&e);
    return out;
}

std::size_t Manifest::count(Split s) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
}

void Manifest::validate() const {
    std::unordered_map<std::string, const ManifestEntry*> by_path;
    for (const auto& e : entries) {
        if (e.path.empty()) throw ManifestError("manifest entry with empty path");
        if (e.class_name.empty()) throw ManifestError("manifest entry '" + e.path + "' has no class");
        if (!by_path.emplace(e.path, &e).second) throw ManifestError("duplicate manifest path '" + e.path + "'");
    }
    for (const auto& e : entries) {
        if (e.provenance == Provenance::original) continue;
        if (e.split == Split::test) throw ManifestError("generated entry '" + e.path + "' is in the test split");
        auto it = by_path.find(e.source_id);
        if (e.source_id.empty() || (it != by_path.end() && it->second->provenance != Provenance::original))
            throw ManifestError("generated entry '" + e.path + "' must name an original source, got '" + e.source_id + "'");
    }
}

namespace {

std::string sanitize(std::string text) {
    std::replace_if(text.begin(), text.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; }, ' ');
    return text;
}

}  // namespace

std::string format_manifest(const Manifest& manifest) {
    std::ostringstream out;
    for (const auto& e : manifest.entries) {
        for (const auto* field : {&e.path, &e.class_name})
            if (field->find_first_of("\t\n") != std::string::npos)
                throw ManifestError("manifest field contains a tab or newline: '" + *field + "'");
        out << e.path << '\t' << e.class_name << '\t' << to_string(e.split) << '\t' << to_string(e.provenance) << '\t'
            << (e.source_id.empty() ? "-" : e.source_id);
        if (!e.prompt.empty()) out << '\t' << sanitize(e.prompt);
        out << '\n';
    }
    return out.str();
}

Manifest parse_manifest(const std::string& text, const std::string& origin) {
    Manifest manifest;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 5 && fields.size() != 6)
            throw ManifestError(origin + ":" + std::to_string(lineno) + ": expected 5 or 6 tab-separated fields, got " +
                                std::to_string(fields.size()));
        try {
            ManifestEntry e;
            e.path = fields[0];
            e.class_name = fields[1];
            e.split = parse_split(fields[2]);
            e.provenance = parse_provenance(fields[3]);
            e.source_id = fields[4] == "-" ? "" : fields[4];
            if (fields.size() == 6) e.prompt = fields[5];
            if (e.path.empty() || e.class_name.empty()) throw ManifestError("empty path or class");
            manifest.entries.push_back(std::move(e));
        } catch (const ManifestError& err) {
            throw ManifestError(origin + ":" + std::to_string(lineno) + ": " + err.what());
        }
    }
    manifest.assign_class_ids();
    return manifest;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ManifestError("cannot open '" + path.string() + "' for writing");
    out << format_manifest(manifest);
    if (!out) throw ManifestError("failed writing '" + path.string() + "'");
}

Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ManifestError("cannot open manifest '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_manifest(buffer.str(), path.string());
}

std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& ratios) {
    if (ratios.empty()) throw std::invalid_argument("apportion needs at least one ratio");
    double total = 0.0;
    for (double r : ratios) {
        if (!(r > 0.0)) throw std::invalid_argument("split ratios must be positive");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
    std::vector<std::size_t> counts(ratios.size());
    std::vector<double> remainder(ratios.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double quota = static_cast<double>(n) * ratios[i];
        // Snap quotas that are integral up to rounding noise.
        const double snapped = std::abs(quota - std::round(quota)) < 1e-9 ? std::round(quota) : quota;
        counts[i] = static_cast<std::size_t>(std::floor(snapped));
        remainder[i] = snapped - std::floor(snapped);
        assigned += counts[i];
    }
    std::vector<std::size_t> order(ratios.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (std::abs(remainder[a] - remainder[b]) > 1e-12) return remainder[a] > remainder[b];
        return false;
    });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % order.size()]];
    return counts;
}

namespace {

const Split kOrder[3] = {Split::train, Split::valid, Split::test};

void split_class(std::vector<ManifestEntry*>& items, const std::vector<double>& ratios, std::uint64_t seed,
                 const std::string& class_name) {
    std::sort(items.begin(), items.end(), [](const ManifestEntry* a, const ManifestEntry* b) {
        const auto ha = hash_string(a->path), hb = hash_string(b->path);
        return ha != hb ? ha < hb : a->path < b->path;
    });
    Rng rng(mix_seed(seed, hash_string(class_name)));
    rng.shuffle(items);
    const auto counts = apportion(items.size(), ratios);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < counts.size(); ++s)
        for (std::size_t k = 0; k < counts[s]; ++k) items[pos++]->split = kOrder[s];
}

}  // namespace

Manifest stratified_split(const Manifest& manifest, const std::vector<double>& ratios, std::uint64_t seed,
                          const std::vector<std::string>& classes) {
    if (ratios.size() != 2 && ratios.size() != 3)
        throw std::invalid_argument("stratified_split takes 2 (train, valid) or 3 (train, valid, test) ratios");
    apportion(0, ratios);
    if (manifest.entries.empty()) throw ManifestError("cannot split an empty manifest");
    Manifest out = manifest;
    std::map<std::string, std::vector<ManifestEntry*>> by_class;
    for (const auto& c : classes) by_class[c];
    for (auto& e : out.entries) by_class[e.class_name].push_back(&e);
    for (auto& [name, items] : by_class) {
        if (items.empty()) throw ManifestError("class '" + name + "' has no entries");
        split_class(items, ratios, seed, name);
    }
    out.assign_class_ids();
    return out;
}

Manifest merge_and_resplit(const Manifest& original, const std::vector<ManifestEntry>& generated,
                           const std::vector<double>& ratios, std::uint64_t seed) {
    if (ratios.size() != 2) throw std::invalid_argument("merge_and_resplit takes (train, valid) ratios");
    std::unordered_map<std::string, const ManifestEntry*> originals;
    for (const auto& e : original.entries) {
        if (e.provenance != Provenance::original)
            throw ManifestError("original manifest contains generated entry '" + e.path + "'");
        if (e.split == Split::unassigned) throw ManifestError("original entry '" + e.path + "' has no split");
        originals.emplace(e.path, &e);
    }
    for (const auto& g : generated) {
        if (g.provenance == Provenance::original)
            throw ManifestError("generated entry '" + g.path + "' is tagged original");
        auto it = originals.find(g.source_id);
        if (it == originals.end())
            throw ManifestError("generated entry '" + g.path + "' names unknown source '" + g.source_id + "'");
        if (it->second->split != Split::train)
            throw ManifestError("generated entry '" + g.path + "' derives from non-train original '" + g.source_id + "' (" +
                                to_string(it->second->split) + ")");
        if (g.class_name != it->second->class_name)
            throw ManifestError("generated entry '" + g.path + "' changes class of its source");
    }

    Manifest pool;
    Manifest final_test;
    for (const auto& e : original.entries) {
        if (e.split == Split::train) {
            pool.entries.push_back(e);
        } else {
            ManifestEntry t = e;
            t.split = Split::test;
            final_test.entries.push_back(std::move(t));
        }
    }
    for (const auto& g : generated) pool.entries.push_back(g);

    const auto vocabulary = original.class_names();
    Manifest out;
    if (!pool.entries.empty()) out = stratified_split(pool, ratios, seed);
    for (auto& t : final_test.entries) out.entries.push_back(std::move(t));
    out.assign_class_ids(vocabulary);
    out.validate();
    return out;
}

}  // namespace dvit
