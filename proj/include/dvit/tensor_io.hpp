#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dvit/tensor.hpp"

namespace dvit {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType { f64, f32 };

struct DumpEntry {
    std::string name;
    Tensor tensor;
    DType dtype = DType::f64;
};

/// Named tensors plus free-form metadata.
///
/// On disk: a text header of `#`-prefixed metadata lines and one
/// `name shape dtype byte-offset` line per tensor (shape as comma-separated
/// dims, dtype f64|f32, offset relative to the first blob byte), terminated
/// by `#end`, followed by little-endian IEEE-754 blobs in header order.
struct TensorDump {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<DumpEntry> entries;

    const std::string* find_meta(const std::string& key) const;
    const DumpEntry* find(const std::string& name) const;
};

void write_tensor_dump(const std::filesystem::path& path, const TensorDump& dump);
TensorDump read_tensor_dump(const std::filesystem::path& path);

}  // namespace dvit
