#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lpn/data.hpp"
#include "lpn/gradcheck.hpp"
#include "lpn/optim.hpp"
#include "lpn/rng.hpp"

namespace lpn {

struct ConvBlock {
    Tensor weight;  // [out, in, k, k]
    Tensor bias;    // [out]
};

/// Stack of conv -> ReLU -> 2x2 average pool blocks.
class ConvEncoder {
public:
    static ConvEncoder create(const Geometry& input, std::vector<std::size_t> plan, Rng& rng,
                              std::size_t kernel = 3);

    const Geometry& input() const { return input_; }
    const std::vector<std::size_t>& plan() const { return plan_; }
    std::size_t channels() const { return plan_.back(); }  // D
    std::size_t out_height() const { return out_h_; }
    std::size_t out_width() const { return out_w_; }
    std::size_t tokens() const { return out_h_ * out_w_; }

    // [B,C,H,W] -> [B,D,Hf,Wf]
    Tensor forward(const Tensor& images) const;
    std::vector<NamedTensor> parameters(const std::string& prefix) const;

    std::vector<ConvBlock> blocks;

private:
    Geometry input_;
    std::vector<std::size_t> plan_;
    std::size_t out_h_ = 0, out_w_ = 0;
};

struct FeatureMap {
    Tensor values;  // [D,Hf,Wf]
    std::string sample_id;
};

// Stacks images into [B,C,H,W]; DimensionError on a geometry mismatch.
Tensor image_batch(std::span<const std::span<const double>> images, const Geometry& geometry);

FeatureMap encode(const ConvEncoder& encoder, const Sample& sample);

// Spatial mean per channel: [D,H,W] -> [D] or [B,D,H,W] -> [B,D].
Tensor global_pool(const Tensor& map);

// Spatial cells as rows: [D,H,W] -> [H*W, D].
Tensor map_tokens(const Tensor& map);

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    SgdConfig sgd{0.05, 0.9, 1e-4, {20, 25}, 0.1};
    std::uint64_t seed = 1;
};

// Everything needed to continue pretraining exactly where it stopped.
struct PretrainState {
    ConvEncoder encoder;
    Tensor head;  // [D, classes], bias-free
    OptimizerState optimizer;
    std::size_t epochs_done = 0;
    std::vector<double> epoch_loss;
    std::vector<double> step_loss;

    std::vector<NamedTensor> parameters() const;
};

PretrainState pretrain_begin(ConvEncoder encoder, std::size_t classes, const PretrainConfig& config);

/// Supervised classification over all base classes until `epochs_done`
/// reaches `until_epoch`. Batches are reshuffled per epoch from a seed
/// derived from (config.seed, epoch), so stopping and resuming is exact.
/// TrainingError with the step index if the loss stops being finite.
void pretrain_run(PretrainState& state, const DatasetSplit& split, const PretrainConfig& config,
                  std::size_t until_epoch);

ConvEncoder pretrain(ConvEncoder encoder, const DatasetSplit& split, const PretrainConfig& config);

// Training-set accuracy of the pretraining head over base classes.
double pretrain_accuracy(const PretrainState& state, const DatasetSplit& split);

void save_pretrain_state(const PretrainState& state, const std::filesystem::path& dir);
PretrainState load_pretrain_state(const std::filesystem::path& dir);

} // namespace lpn
