#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lpn/embedding.hpp"
#include "lpn/rng.hpp"

namespace lpn {

struct Geometry {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;

    std::size_t numel() const { return channels * height * width; }
    std::string str() const;
    bool operator==(const Geometry&) const = default;
};

struct Sample {
    std::string sample_id;
    std::string class_id;
    std::vector<double> image;  // channels x height x width, row-major
};

enum class Partition { Base, Val, Novel };

Partition parse_partition(const std::string& name);
std::string partition_name(Partition p);

/// Immutable class partition plus per-class samples. Validated on
/// construction: disjoint partitions, every listed class has samples, images
/// match the geometry and are finite, sample ids are unique.
class DatasetSplit {
public:
    DatasetSplit() = default;
    DatasetSplit(Geometry geometry, std::vector<std::string> base, std::vector<std::string> val,
                 std::vector<std::string> novel, std::map<std::string, std::vector<Sample>> samples);

    const Geometry& geometry() const { return geometry_; }
    const std::vector<std::string>& classes(Partition p) const;
    const std::vector<Sample>& samples(const std::string& class_id) const;
    const std::map<std::string, std::vector<Sample>>& all_samples() const { return samples_; }
    const Sample& find(const std::string& sample_id) const;  // LookupError if absent
    std::size_t min_samples(Partition p) const;

private:
    Geometry geometry_;
    std::vector<std::string> base_, val_, novel_;
    std::map<std::string, std::vector<Sample>> samples_;
    std::unordered_map<std::string, std::pair<std::string, std::size_t>> index_;
};

struct LabeledSample {
    const Sample* sample;
    std::size_t label;
};

// Query as seen by the model: no class information.
struct QuerySample {
    std::string sample_id;
    std::span<const double> image;
};

struct EpisodeTask {
    std::size_t way = 0;
    std::size_t shot = 0;
    std::size_t queries_per_class = 0;
    std::vector<std::string> class_names;  // label i <-> class_names[i]
    std::vector<LabeledSample> support;    // class-major: label = index / shot
    std::vector<QuerySample> query;        // shuffled
};

// Ground truth for the queries of one task, keyed by sample id.
class AnswerKey {
public:
    void set(const std::string& sample_id, std::size_t label);
    std::size_t label(const std::string& sample_id) const;
    // Labels aligned with task.query.
    std::vector<std::size_t> labels_for(const EpisodeTask& task) const;
    std::size_t size() const { return labels_.size(); }

private:
    std::unordered_map<std::string, std::size_t> labels_;
};

struct Episode {
    EpisodeTask task;
    AnswerKey answers;
};

/// Uniform sampling without replacement: N classes from the partition, then
/// K + Q samples per class. CapacityError names the shortfall.
Episode sample_episode(const DatasetSplit& split, Partition partition, std::size_t way,
                       std::size_t shot, std::size_t queries, Rng& rng);

// Fraction of `predictions` (aligned with task.query) that match the key.
double episode_accuracy(const EpisodeTask& task, const AnswerKey& key,
                        std::span<const std::size_t> predictions);

struct SyntheticSpec {
    std::size_t class_count = 100;
    std::size_t feature_dim = 16;
    Geometry geometry{3, 16, 16};
    std::size_t samples_per_class = 40;
    std::size_t tile = 4;  // rendering period in pixels
    // When positive, patterns span the image and mix the f x f lowest cosine
    // frequencies of each channel; tile is used only when this is 0.
    std::size_t frequencies = 3;
    double separation = 4.0;
    double noise = 1.0;
    double anchor_noise = 0.2;
    std::uint64_t seed = 1;
};

struct SyntheticData {
    DatasetSplit split;
    EmbeddingTable table;                                // raw class-level vectors
    std::map<std::string, std::vector<double>> means;    // latent class means
    std::map<std::string, std::vector<double>> latents;  // per sample id
};

/// Classes get latent means; each sample draws latent = mean + noise, and its
/// image is a fixed linear rendering of the latent through orthonormal
/// patterns: smooth low-frequency images by default, or random patterns over a
/// tile x tile patch repeated across the image. The table holds
/// mean + anchor_noise * N(0, I) per class.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Class counts for a 60/20/20 split.
struct SplitCounts {
    std::size_t base, val, novel;
};
SplitCounts split_counts(std::size_t class_count);

struct ConfidenceInterval {
    double mean = 0.0;        // percent
    double half_width = 0.0;  // percent
    std::string str() const;  // "mean+-half_width", two decimals
};

// 95% normal-approximation interval over per-episode accuracies in [0,1].
ConfidenceInterval confidence_interval(std::span<const double> accuracies);

// Directory layout: manifest.json with classes, geometry and optional splits,
// then <class>/<sample_id>.f32 as little-endian float32.
DatasetSplit load_dataset(const std::filesystem::path& dir);
void save_dataset(const DatasetSplit& split, const std::filesystem::path& dir);

} // namespace lpn
