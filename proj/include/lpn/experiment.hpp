#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "lpn/config.hpp"
#include "lpn/gradcheck.hpp"
#include "lpn/model.hpp"
#include "lpn/train.hpp"

namespace lpn {

struct Workspace {
    DatasetSplit split;
    EmbeddingTable table;
};

// Synthetic benchmark unless data.dir is set; data.embeddings replaces the table.
Workspace load_workspace(const Config& config);

// The geometry comes from the dataset.
ModelConfig model_config(const Config& config, const Geometry& geometry);
PretrainConfig pretrain_config(const Config& config);
MetaTrainConfig meta_train_config(const Config& config);
EvalConfig eval_config(const Config& config);

// Progress lines; silent when `out` is null.
struct RunLog {
    std::ostream* out = nullptr;
    void line(const std::string& text) const;
};

/// Creates `dir` and writes the resolved config (config.txt) and the seed and
/// config hash (seed.txt) before anything runs.
void prepare_run_dir(const Config& config, const std::filesystem::path& dir);

/// Loads the encoder from pretrain.checkpoint, or pretrains one and saves it
/// under dir/pretrain.
ConvEncoder obtain_encoder(const Config& config, const Workspace& ws, const std::filesystem::path& dir,
                           const RunLog& log);

/// Builds the configured model around `encoder`, meta-trains it, and writes
/// history.csv and the model checkpoint (dir/model).
LpnModel train_model(const Config& config, const Workspace& ws, const ConvEncoder& encoder,
                     const std::filesystem::path& dir, const RunLog& log);

// Pretraining only: dir/pretrain plus pretrain_history.csv and metrics.csv (base accuracy).
void run_pretrain(const Config& config, const std::filesystem::path& dir, const RunLog& log = {});

// Pretrain (or load), meta-train, then evaluate into metrics.csv.
EvalReport run_meta_train(const Config& config, const std::filesystem::path& dir, const RunLog& log = {});

// Evaluates model.checkpoint; IoError if it is unset or missing.
EvalReport run_eval(const Config& config, const std::filesystem::path& dir, const RunLog& log = {});

struct AblationRow {
    ModuleSwitches switches;
    EvalReport report;
};

/// One trained and evaluated model per ablate.rows entry, all sharing one
/// encoder and one seed. GridError before any training if a row is invalid.
std::vector<AblationRow> run_ablation(const Config& config, const std::filesystem::path& dir,
                                      const RunLog& log = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct SweepPoint {
    std::string parameter;
    double value = 0.0;
    EvalReport report;
};

/// sweep.parameter in {gamma, beta, way, shot}. gamma and beta retrain per
/// value; way and shot evaluate one trained model. ConfigError for bad values
/// before any training.
std::vector<SweepPoint> run_sweep(const Config& config, const std::filesystem::path& dir, const RunLog& log = {});
std::string sweep_csv(const std::vector<SweepPoint>& points);

/// Finite differences for every parameter group of the configured (untrained)
/// model on a seeded 3-way 2-shot base episode with 2 queries per class.
/// gradcheck.fault names an op whose backward rule is corrupted for the run.
GradCheckReport run_gradcheck(const Config& config, const std::filesystem::path& dir, const RunLog& log = {});
std::string gradcheck_csv(const GradCheckReport& report);

/// Writes attn_<sample>_visual.csv and attn_<sample>_text.csv (decoder on) and
/// attn_<sample>_la.csv (alignment on) for each sample in attention.samples,
/// or for the supports of evaluation episode 0 when the list is empty. Text
/// attention columns follow the classes of evaluation episode 0, listed in
/// attention_classes.txt. LookupError for unknown samples.
std::vector<std::filesystem::path> dump_attention(const Config& config, const std::filesystem::path& dir,
                                                  const RunLog& log = {});

} // namespace lpn
