#include "lpn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "lpn/error.hpp"

namespace lpn {

namespace {

using nlohmann::json;
using Kind = CheckpointError::Kind;

constexpr const char* kFormat = "lpn-checkpoint";

std::uint64_t fnv1a(const std::vector<char>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t to_little(std::uint64_t x) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t r = 0;
        for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xffu) << (8 * (7 - i));
        return r;
    }
    return x;
}

} // namespace

const Tensor& CheckpointContents::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.tensor;
    }
    throw CheckpointError(Kind::Shape, "checkpoint: no parameter named '" + name + "'");
}

const std::string& CheckpointContents::meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) {
        throw CheckpointError(Kind::Manifest, "checkpoint: manifest lacks '" + key + "'");
    }
    return it->second;
}

void write_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                      const std::map<std::string, std::string>& meta,
                      std::span<const NamedTensor> tensors) {
    std::filesystem::create_directories(dir);
    std::vector<char> blob;
    json params = json::array();
    std::size_t offset = 0;
    for (const auto& t : tensors) {
        params.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
        for (double v : t.tensor.values()) {
            const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
            char bytes[8];
            std::memcpy(bytes, &bits, 8);
            blob.insert(blob.end(), bytes, bytes + 8);
        }
        offset += t.tensor.numel();
    }
    json doc;
    doc["format"] = kFormat;
    doc["version"] = kCheckpointVersion;
    doc["kind"] = kind;
    doc["meta"] = meta;
    doc["params"] = params;
    doc["values"] = offset;
    doc["blob_fnv1a"] = std::to_string(fnv1a(blob));
    {
        std::ofstream out(dir / "params.f64", std::ios::binary | std::ios::trunc);
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw IoError("checkpoint: cannot write " + (dir / "params.f64").string());
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << doc.dump(1) << "\n";
    if (!out) throw IoError("checkpoint: cannot write " + (dir / "manifest.json").string());
}

CheckpointContents read_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        throw IoError("checkpoint: no manifest at " + manifest_path.string());
    }
    std::ifstream in(manifest_path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw CheckpointError(Kind::Manifest, std::string("checkpoint: unreadable manifest: ") + e.what());
    }
    if (!doc.is_object() || doc.value("format", "") != kFormat) {
        throw CheckpointError(Kind::Manifest, "checkpoint: " + manifest_path.string() +
                                                  " is not an lpn checkpoint manifest");
    }
    if (!doc.contains("version") || !doc["version"].is_number_integer()) {
        throw CheckpointError(Kind::Manifest, "checkpoint: manifest lacks a version");
    }
    const int version = doc["version"].get<int>();
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::Version, "checkpoint: format version " + std::to_string(version) +
                                                 " is not supported (expected " +
                                                 std::to_string(kCheckpointVersion) + ")");
    }
    CheckpointContents c;
    std::vector<std::tuple<std::string, Shape, std::size_t>> table;
    std::size_t total = 0;
    std::uint64_t expected_hash = 0;
    try {
        c.kind = doc.at("kind").get<std::string>();
        c.meta = doc.at("meta").get<std::map<std::string, std::string>>();
        for (const auto& p : doc.at("params")) {
            table.emplace_back(p.at("name").get<std::string>(), p.at("shape").get<Shape>(),
                               p.at("offset").get<std::size_t>());
        }
        total = doc.at("values").get<std::size_t>();
        expected_hash = std::stoull(doc.at("blob_fnv1a").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::Manifest, std::string("checkpoint: malformed manifest: ") + e.what());
    }

    std::ifstream bin(dir / "params.f64", std::ios::binary);
    if (!bin) throw CheckpointError(Kind::Corrupt, "checkpoint: missing params.f64 in " + dir.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (blob.size() != total * 8) {
        throw CheckpointError(Kind::Corrupt, "checkpoint: params.f64 holds " +
                                                 std::to_string(blob.size()) + " bytes, manifest declares " +
                                                 std::to_string(total * 8));
    }
    if (fnv1a(blob) != expected_hash) {
        throw CheckpointError(Kind::Corrupt, "checkpoint: params.f64 checksum mismatch");
    }
    for (const auto& [name, shape, offset] : table) {
        const std::size_t n = shape_numel(shape);
        if (offset + n > total) {
            throw CheckpointError(Kind::Manifest, "checkpoint: parameter '" + name + "' overruns the blob");
        }
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, blob.data() + (offset + i) * 8, 8);
            values[i] = std::bit_cast<double>(to_little(bits));
        }
        try {
            c.tensors.push_back({name, Tensor(shape, std::move(values))});
        } catch (const Error& e) {
            throw CheckpointError(Kind::Corrupt, "checkpoint: parameter '" + name + "': " + e.what());
        }
    }
    return c;
}

void assign_parameters(std::span<const NamedTensor> dest, const CheckpointContents& source,
                       const std::string& prefix) {
    std::vector<const Tensor*> found;
    for (const auto& d : dest) {
        const Tensor& src = source.get(prefix + d.name);
        if (src.shape() != d.tensor.shape()) {
            throw CheckpointError(Kind::Shape, "checkpoint: parameter '" + d.name + "' is " +
                                                   shape_str(src.shape()) + " in the checkpoint but " +
                                                   shape_str(d.tensor.shape()) + " in the model");
        }
        found.push_back(&src);
    }
    for (std::size_t i = 0; i < dest.size(); ++i) {
        Tensor t = dest[i].tensor;
        auto out = t.mutable_values();
        auto in = found[i]->values();
        std::copy(in.begin(), in.end(), out.begin());
    }
}

} // namespace lpn
