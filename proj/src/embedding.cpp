#include "lpn/embedding.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "lpn/error.hpp"
#include "lpn/ops.hpp"

namespace lpn {

using nlohmann::json;

EmbeddingTable::EmbeddingTable(std::size_t dim, std::string provenance)
    : dim_(dim), provenance_(std::move(provenance)) {
    if (dim == 0) throw FormatError("embedding table: dim must be positive");
}

void EmbeddingTable::add(const std::string& name, std::vector<double> vector) {
    if (vector.size() != dim_) {
        throw FormatError("embedding table: entry '" + name + "' has " +
                          std::to_string(vector.size()) + " values, expected " +
                          std::to_string(dim_));
    }
    for (double v : vector) {
        if (!std::isfinite(v)) {
            throw FormatError("embedding table: entry '" + name + "' has a non-finite value");
        }
    }
    if (!entries_.emplace(name, std::move(vector)).second) {
        throw FormatError("embedding table: duplicate class name '" + name + "'");
    }
}

const std::vector<double>& EmbeddingTable::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("embedding table: unknown class '" + name + "'");
    return it->second;
}

std::uint64_t EmbeddingTable::content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    feed(&dim_, sizeof dim_);
    for (const auto& [name, vec] : entries_) {
        feed(name.data(), name.size() + 1);
        feed(vec.data(), vec.size() * sizeof(double));
    }
    return h;
}

EmbeddingTable parse_embedding_table(const std::string& text) {
    // nlohmann keeps the last of duplicate keys; track keys per open object so
    // a repeated class name is reported instead of silently dropped.
    std::vector<std::unordered_set<std::string>> open;
    json::parser_callback_t cb = [&open](int, json::parse_event_t event, json& parsed) {
        switch (event) {
        case json::parse_event_t::object_start: open.emplace_back(); break;
        case json::parse_event_t::object_end: open.pop_back(); break;
        case json::parse_event_t::key: {
            const auto& key = parsed.get_ref<const std::string&>();
            if (!open.back().insert(key).second) {
                throw FormatError("embedding table: duplicate class name '" + key + "'");
            }
            break;
        }
        default: break;
        }
        return true;
    };
    json doc;
    try {
        doc = json::parse(text, cb);
    } catch (const json::exception& e) {
        throw FormatError(std::string("embedding table: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("dim") || !doc.contains("entries")) {
        throw FormatError("embedding table: expected an object with 'dim' and 'entries'");
    }
    if (!doc["dim"].is_number_unsigned() || doc["dim"].get<std::size_t>() == 0) {
        throw FormatError("embedding table: 'dim' must be a positive integer");
    }
    const auto& entries = doc["entries"];
    if (!entries.is_object()) throw FormatError("embedding table: 'entries' must be an object");
    std::string provenance;
    if (doc.contains("provenance")) {
        if (!doc["provenance"].is_string()) {
            throw FormatError("embedding table: 'provenance' must be a string");
        }
        provenance = doc["provenance"].get<std::string>();
    }
    EmbeddingTable table(doc["dim"].get<std::size_t>(), provenance);
    for (const auto& [name, value] : entries.items()) {
        if (!value.is_array()) {
            throw FormatError("embedding table: entry '" + name + "' is not an array");
        }
        std::vector<double> vec;
        vec.reserve(value.size());
        for (const auto& x : value) {
            if (!x.is_number()) {
                throw FormatError("embedding table: entry '" + name + "' holds a non-number");
            }
            vec.push_back(x.get<double>());
        }
        table.add(name, std::move(vec));
    }
    return table;
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("embedding table: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_embedding_table(buf.str());
}

std::string serialize_embedding_table(const EmbeddingTable& table) {
    json doc;
    doc["dim"] = table.dim();
    doc["provenance"] = table.provenance();
    doc["entries"] = json::object();
    for (const auto& [name, vec] : table.entries()) doc["entries"][name] = vec;
    return doc.dump(1) + "\n";
}

void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("embedding table: cannot write " + path.string());
    out << serialize_embedding_table(table);
    if (!out) throw IoError("embedding table: write failed for " + path.string());
}

Projector Projector::create(std::size_t raw_dim, std::size_t hidden, std::size_t out, Rng& rng) {
    auto he = [&rng](std::size_t fan_in, std::size_t fan_out) {
        std::vector<double> w(fan_in * fan_out);
        const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& x : w) x = s * rng.normal();
        return Tensor(Shape{fan_in, fan_out}, std::move(w), true);
    };
    Projector p;
    p.w1 = he(raw_dim, hidden);
    p.b1 = Tensor(Shape{hidden}, true);
    p.w2 = he(hidden, out);
    p.b2 = Tensor(Shape{out}, true);
    return p;
}

Tensor Projector::forward(const Tensor& raw) const {
    if (raw.rank() != 2 || raw.dim(1) != raw_dim()) {
        throw DimensionError("projector: expected [n x " + std::to_string(raw_dim()) + "], got " +
                             shape_str(raw.shape()));
    }
    Tensor h = ops::relu(ops::add_row_vector(ops::matmul(raw, w1), b1));
    return ops::add_row_vector(ops::matmul(h, w2), b2);
}

std::vector<NamedTensor> Projector::parameters(const std::string& prefix) const {
    return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
}

Tensor class_level_feature(const EmbeddingTable& table, const Projector& projector,
                           const std::string& class_name) {
    const auto& raw = table.at(class_name);
    Tensor row(Shape{1, raw.size()}, raw);
    return ops::reshape(projector.forward(row), Shape{projector.out_dim()});
}

Tensor episode_class_features(const EmbeddingTable& table, const Projector& projector,
                              std::span<const std::string> class_names) {
    std::vector<double> raw;
    raw.reserve(class_names.size() * table.dim());
    for (const auto& name : class_names) {
        const auto& v = table.at(name);
        raw.insert(raw.end(), v.begin(), v.end());
    }
    return projector.forward(Tensor(Shape{class_names.size(), table.dim()}, std::move(raw)));
}

} // namespace lpn
