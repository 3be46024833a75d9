#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lpn/model.hpp"
#include "lpn/optim.hpp"

namespace lpn {

struct EvalConfig {
    Partition partition = Partition::Novel;
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries = 15;  // per class
    std::size_t episodes = 2000;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
};

// Per-episode accuracies in [0,1]; text is NaN when the decoder is off.
struct EpisodeRecord {
    double fused = 0.0;
    double visual = 0.0;
    double text = 0.0;
};

struct EvalReport {
    std::vector<EpisodeRecord> episodes;
    bool has_text = false;
    ConfidenceInterval fused, visual, text;
};

/// Episode i is drawn from its own seed, so the report does not depend on the
/// worker count. Builds a feature cache for the partition unless one is given.
EvalReport evaluate(const LpnModel& model, const DatasetSplit& split, const EmbeddingTable& table,
                    const EvalConfig& config, const FeatureCache* cache = nullptr);

// "episode,fused_acc,visual_acc,text_acc" rows plus a "summary" footer.
std::string metrics_csv(const EvalReport& report);

struct MetaTrainConfig {
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries = 15;
    std::size_t epochs = 60;
    std::size_t episodes_per_epoch = 100;
    SgdConfig sgd{5e-4, 0.9, 1e-4, {40, 50}, 0.1};
    std::size_t val_episodes = 200;  // 0 skips validation
    std::uint64_t seed = 1;
    std::size_t workers = 1;
};

struct HistoryRow {
    std::size_t epoch = 0;
    double loss = 0.0;  // mean training loss over the epoch
    ConfidenceInterval val;
    double lr = 0.0;
};

// "epoch,loss,val_acc,val_hw,lr" rows.
std::string history_csv(const std::vector<HistoryRow>& rows);

/// Episodic training on base classes; validation on the val partition after
/// every epoch. TrainingError names the epoch and episode on divergence.
/// With nothing trainable the losses are still recorded but no step is taken.
std::vector<HistoryRow> meta_train(LpnModel& model, const DatasetSplit& split, const EmbeddingTable& table,
                                   const MetaTrainConfig& config,
                                   const std::function<void(const HistoryRow&)>& on_epoch = {});

} // namespace lpn
