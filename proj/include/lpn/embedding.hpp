#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lpn/gradcheck.hpp"
#include "lpn/rng.hpp"
#include "lpn/tensor.hpp"

namespace lpn {

/// Class name -> fixed-length raw text embedding. Entries are kept sorted by
/// name so iteration order never depends on file order.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::size_t dim, std::string provenance);

    // Throws FormatError on wrong length, non-finite value or duplicate name.
    void add(const std::string& name, std::vector<double> vector);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    const std::string& provenance() const { return provenance_; }
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    // LookupError naming the class when absent.
    const std::vector<double>& at(const std::string& name) const;
    const std::map<std::string, std::vector<double>>& entries() const { return entries_; }

    // FNV-1a over names and raw value bytes.
    std::uint64_t content_hash() const;

private:
    std::size_t dim_ = 0;
    std::string provenance_;
    std::map<std::string, std::vector<double>> entries_;
};

EmbeddingTable load_embedding_table(const std::filesystem::path& path);
EmbeddingTable parse_embedding_table(const std::string& text);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);
std::string serialize_embedding_table(const EmbeddingTable& table);

// Two-layer map raw -> hidden -> out with a rectifier in between.
struct Projector {
    Tensor w1, b1, w2, b2;  // [raw,hidden], [hidden], [hidden,out], [out]

    static Projector create(std::size_t raw_dim, std::size_t hidden, std::size_t out, Rng& rng);
    std::size_t raw_dim() const { return w1.dim(0); }
    std::size_t out_dim() const { return w2.dim(1); }

    Tensor forward(const Tensor& raw) const;  // [n,raw] -> [n,out]
    std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

// Projected class-level feature for one class: [d].
Tensor class_level_feature(const EmbeddingTable& table, const Projector& projector,
                           const std::string& class_name);

// Rows follow `class_names`: [N,d].
Tensor episode_class_features(const EmbeddingTable& table, const Projector& projector,
                              std::span<const std::string> class_names);

} // namespace lpn
