#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvit {

enum class Split { unassigned, train, valid, test };
enum class Provenance { original, superres, diffusion };

std::string to_string(Split s);
std::string to_string(Provenance p);
Split parse_split(const std::string& text);
Provenance parse_provenance(const std::string& text);

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ManifestEntry {
    std::string path;
    std::string class_name;
    int class_id = -1;
    Split split = Split::unassigned;
    Provenance provenance = Provenance::original;
    std::string source_id;  // path of the original for generated entries
    std::string prompt;     // caption used for diffusion entries, optional

    bool operator==(const ManifestEntry&) const = default;
};

/// Ordered list of entries. Class ids index the sorted set of class names.
struct Manifest {
    std::vector<ManifestEntry> entries;

    std::vector<std::string> class_names() const;
    /// Reassigns class_id from the sorted class-name vocabulary.
    void assign_class_ids();
    void assign_class_ids(const std::vector<std::string>& vocabulary);
    std::vector<const ManifestEntry*> in_split(Split s) const;
    std::size_t count(Split s) const;
    /// Checks unique paths, source ids of generated entries, and that no
    /// generated entry sits in the test split.
    void validate() const;
};

// TSV, one entry per line:
//   path \t class \t split \t provenance \t source_id [\t prompt]
// Unassigned split and empty source_id are written as "-". Lines starting
// with '#' and blank lines are ignored. Tabs and newlines inside a prompt
// are written as spaces.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
std::string format_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text, const std::string& origin = "<memory>");

/// Largest-remainder apportionment of n items over ratios. Ties on equal
/// remainders go to the earlier position.
std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& ratios);

/// Per-class apportionment of entries into train/valid(/test) for 3 ratios,
/// or train/valid for 2. Within a class, entries are put in a canonical
/// order (path hash, then path) and shuffled by a seed derived from `seed`
/// and the class name before cutting. If `classes` is given, each must have
/// at least one entry.
Manifest stratified_split(const Manifest& manifest, const std::vector<double>& ratios, std::uint64_t seed,
                          const std::vector<std::string>& classes = {});

/// Final test = original valid + original test (never generated entries).
/// Original train + generated entries are re-split per class by `ratios`
/// (train, valid). Generated entries must derive from original-train items.
Manifest merge_and_resplit(const Manifest& original, const std::vector<ManifestEntry>& generated,
                           const std::vector<double>& ratios, std::uint64_t seed);

}  // namespace dvit
