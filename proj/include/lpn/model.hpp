#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lpn/data.hpp"
#include "lpn/decoder.hpp"
#include "lpn/embedding.hpp"
#include "lpn/encoder.hpp"
#include "lpn/heads.hpp"
#include "lpn/losses.hpp"

namespace lpn {

// Module switches in ablation order: decoder, refined head, alignment.
struct ModuleSwitches {
    bool lagd = true;
    bool rph = true;
    bool la = true;

    std::string code() const;  // "111", "100", ...
    static ModuleSwitches parse(const std::string& code);
    // GridError when the refined head is on without the decoder.
    void validate() const;
    bool operator==(const ModuleSwitches&) const = default;
};

std::string align_mode_name(AlignMode m);        // "scalar", "per-channel"
AlignMode parse_align_mode(const std::string& s);  // ConfigError if unknown
std::string contrastive_mode_name(ContrastiveMode m);         // "class", "in-batch"
ContrastiveMode parse_contrastive_mode(const std::string& s);  // ConfigError if unknown

struct ModelConfig {
    Geometry geometry{3, 16, 16};
    std::vector<std::size_t> plan{8, 16, 16};
    std::size_t kernel = 3;
    std::size_t text_dim = 16;          // d
    std::size_t projector_hidden = 0;   // 0 means d
    std::size_t heads = 4;
    std::size_t queries = 4;            // learnable decoder queries
    bool residual = false;
    bool layer_norm = false;
    MetricKind metric = MetricKind::PrototypeCosine;
    std::size_t dn4_k = 3;
    AlignMode align_mode = AlignMode::Scalar;
    ModuleSwitches switches;
    double alpha = 10.0;
    double beta = 0.4;
    double gamma = 0.01;
    bool contrastive = true;            // false removes the contrastive term entirely
    ContrastiveOptions contrastive_options;
    bool finetune_encoder = true;
    std::uint64_t seed = 1;

    void validate() const;
};

// Text-feature projector, decoder and alignment exist only when a switch uses them.
struct LpnModel {
    ModelConfig config;
    std::size_t raw_text_dim = 0;
    ConvEncoder encoder;
    Projector projector;
    LaGDBlock decoder;
    Tensor align_map;  // [d,D], only when alignment is on and d != D
    RelationModule relation;

    static LpnModel create(const ModelConfig& config, std::size_t raw_text_dim);

    std::size_t visual_dim() const { return encoder.channels(); }
    bool uses_text() const { return config.switches.lagd || config.switches.la; }
    std::vector<NamedTensor> parameters() const;
    // parameters() minus the encoder when it is frozen.
    std::vector<NamedTensor> trainable() const;
};

// Replaces the encoder weights; DimensionError if the architectures differ.
void install_encoder(LpnModel& model, const ConvEncoder& encoder);

// One episode's encoded images; supports are class-major.
struct EpisodeMaps {
    std::size_t way = 0;
    std::size_t shot = 0;
    Tensor support;  // [N*K, D, Hf, Wf]
    Tensor query;    // [Q, D, Hf, Wf]
    std::vector<std::string> class_names;
};

struct ForwardResult {
    LogitsPair logits;     // text is all zero when the decoder is off
    bool has_text = false;
    Tensor class_features; // [N,d], when text is used
    Tensor support_text;   // [N*K, d], decoder only
    Tensor query_text;     // [Q, d], decoder only
    std::vector<Tensor> alignment;  // per support, when alignment is on
};

ForwardResult forward(const LpnModel& model, const EpisodeMaps& maps, const EmbeddingTable& table);

struct LossParts {
    Tensor total;
    Tensor classification;
    Tensor contrastive;  // undefined when the term is absent
};

LossParts episode_loss(const LpnModel& model, const ForwardResult& result, std::size_t shot,
                       std::span<const std::size_t> query_labels);

// Encodes a list of images into [B,D,Hf,Wf]. No graph is built for a frozen encoder.
Tensor encode_images(const LpnModel& model, std::span<const std::span<const double>> images);

EpisodeMaps episode_maps(const LpnModel& model, const EpisodeTask& task);

// Encoder outputs for a fixed set of samples, computed once without gradients.
class FeatureCache {
public:
    static FeatureCache build(const LpnModel& model, const DatasetSplit& split, Partition partition);
    bool contains(const std::string& sample_id) const { return index_.count(sample_id) != 0; }
    // [B,D,Hf,Wf] rows in the order of `sample_ids`; LookupError if one is absent.
    Tensor gather(std::span<const std::string> sample_ids) const;
    EpisodeMaps episode(const EpisodeTask& task) const;

private:
    Shape map_shape_;
    Tensor flat_;  // [S, D*Hf*Wf]
    std::unordered_map<std::string, std::size_t> index_;
};

struct EpisodePredictions {
    std::vector<std::size_t> fused;
    std::vector<std::size_t> visual;
    std::vector<std::size_t> text;  // empty when the decoder is off
};

EpisodePredictions predict(const LpnModel& model, const EpisodeTask& task, const EmbeddingTable& table,
                           const FeatureCache* cache = nullptr);

// Model configuration as checkpoint metadata and back.
std::map<std::string, std::string> model_meta(const LpnModel& model);
LpnModel model_from_meta(const std::map<std::string, std::string>& meta);

void save_model(const LpnModel& model, const std::filesystem::path& dir,
                const std::map<std::string, std::string>& extra_meta = {});
LpnModel load_model(const std::filesystem::path& dir);
/// Loads weights into an existing model. CheckpointError (Manifest) if the
/// stored switches, metric or widths differ, (Shape) if a tensor does not fit.
void load_model_into(LpnModel& model, const std::filesystem::path& dir);

} // namespace lpn
