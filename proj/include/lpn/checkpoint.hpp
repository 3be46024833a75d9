#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lpn/gradcheck.hpp"

namespace lpn {

inline constexpr int kCheckpointVersion = 1;

// A checkpoint directory: manifest.json (kind, metadata, parameter table with
// name/shape/offset) plus params.f64, the values as little-endian doubles.
struct CheckpointContents {
    std::string kind;
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> tensors;

    const Tensor& get(const std::string& name) const;  // CheckpointError(Shape) if absent
    const std::string& meta_value(const std::string& key) const;
};

void write_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                      const std::map<std::string, std::string>& meta,
                      std::span<const NamedTensor> tensors);

// IoError if the directory or manifest is missing; CheckpointError otherwise.
CheckpointContents read_checkpoint(const std::filesystem::path& dir);

/// Copies stored values into `dest` by name. Every destination must be
/// present with an identical shape (CheckpointError kind Shape); nothing is
/// written unless all of them match.
void assign_parameters(std::span<const NamedTensor> dest, const CheckpointContents& source,
                       const std::string& prefix = "");

} // namespace lpn
