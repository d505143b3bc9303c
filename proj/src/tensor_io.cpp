#include "dvit/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dvit {

static_assert(std::endian::native == std::endian::little, "tensor dumps assume a little-endian host");

namespace {

constexpr const char* kMagic = "#dvit-tensors v1";

const char* dtype_name(DType d) { return d == DType::f64 ? "f64" : "f32"; }

std::size_t dtype_size(DType d) { return d == DType::f64 ? 8 : 4; }

DType parse_dtype(const std::string& s) {
    if (s == "f64") return DType::f64;
    if (s == "f32") return DType::f32;
    throw FormatError("unknown dtype '" + s + "'");
}

Shape parse_shape(const std::string& s) {
    Shape shape;
    std::stringstream in(s);
    std::string part;
    while (std::getline(in, part, ',')) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(part, &used);
            if (used != part.size() || v == 0) throw FormatError("");
            shape.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw FormatError("invalid shape '" + s + "'");
        }
    }
    if (shape.empty()) throw FormatError("empty shape");
    return shape;
}

std::string format_shape(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(shape[i]);
    }
    return out;
}

}  // namespace

const std::string* TensorDump::find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return &v;
    return nullptr;
}

const DumpEntry* TensorDump::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

void write_tensor_dump(const std::filesystem::path& path, const TensorDump& dump) {
    std::ostringstream header;
    header << kMagic << '\n';
    for (const auto& [k, v] : dump.meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
            throw FormatError("metadata key/value must be single-line: " + k);
        header << "#meta " << k << ' ' << v << '\n';
    }
    std::size_t offset = 0;
    for (const auto& e : dump.entries) {
        if (e.name.empty() || e.name.find_first_of(" \n#") != std::string::npos)
            throw FormatError("invalid tensor name '" + e.name + "'");
        header << e.name << ' ' << format_shape(e.tensor.shape()) << ' ' << dtype_name(e.dtype) << ' ' << offset << '\n';
        offset += e.tensor.numel() * dtype_size(e.dtype);
    }
    header << "#end\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    const std::string text = header.str();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : dump.entries) {
        auto data = e.tensor.data();
        if (e.dtype == DType::f64) {
            out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
        } else {
            std::vector<float> narrow(data.begin(), data.end());
            out.write(reinterpret_cast<const char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * 4));
        }
    }
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

TensorDump read_tensor_dump(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != kMagic) throw FormatError("missing tensor dump header in '" + path.string() + "'");

    struct Pending {
        std::string name;
        Shape shape;
        DType dtype;
        std::size_t offset;
    };
    TensorDump dump;
    std::vector<Pending> pending;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "#end") {
            ended = true;
            break;
        }
        if (line.rfind("#meta ", 0) == 0) {
            const std::string rest = line.substr(6);
            const auto space = rest.find(' ');
            if (space == std::string::npos) throw FormatError("malformed metadata line: " + line);
            dump.meta.emplace_back(rest.substr(0, space), rest.substr(space + 1));
            continue;
        }
        std::istringstream fields(line);
        std::string name, shape, dtype, offset, extra;
        if (!(fields >> name >> shape >> dtype >> offset) || (fields >> extra))
            throw FormatError("malformed tensor header line: '" + line + "'");
        std::size_t off = 0;
        try {
            off = std::stoull(offset);
        } catch (const std::exception&) {
            throw FormatError("invalid byte offset in line: '" + line + "'");
        }
        pending.push_back({name, parse_shape(shape), parse_dtype(dtype), off});
    }
    if (!ended) throw FormatError("truncated tensor dump header in '" + path.string() + "'");

    const std::streamoff blob_start = in.tellg();
    in.seekg(0, std::ios::end);
    const std::streamoff file_end = in.tellg();
    const auto blob_size = static_cast<std::size_t>(file_end - blob_start);
    for (const auto& p : pending) {
        const std::size_t n = shape_numel(p.shape);
        const std::size_t bytes = n * dtype_size(p.dtype);
        if (p.offset + bytes > blob_size)
            throw FormatError("tensor '" + p.name + "' extends past end of file (truncated dump?)");
        in.seekg(blob_start + static_cast<std::streamoff>(p.offset));
        std::vector<double> values(n);
        if (p.dtype == DType::f64) {
            in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
        } else {
            std::vector<float> narrow(n);
            in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(bytes));
            values.assign(narrow.begin(), narrow.end());
        }
        if (!in) throw FormatError("failed reading tensor '" + p.name + "'");
        dump.entries.push_back({p.name, Tensor::from(p.shape, std::move(values)), p.dtype});
    }
    return dump;
}

}  // namespace dvit
