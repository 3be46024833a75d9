#include "lpn/train.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "lpn/error.hpp"

namespace lpn {

namespace {

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double accuracy(const EpisodeTask& task, const AnswerKey& key, const std::vector<std::size_t>& predictions) {
    return episode_accuracy(task, key, predictions);
}

ConfidenceInterval interval_of(const std::vector<EpisodeRecord>& records, double EpisodeRecord::*field) {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(r.*field);
    return confidence_interval(v);
}

} // namespace

EvalReport evaluate(const LpnModel& model, const DatasetSplit& split, const EmbeddingTable& table,
                    const EvalConfig& config, const FeatureCache* cache) {
    if (config.episodes < 2) throw StatisticsError("evaluate: need at least 2 episodes for an interval");
    FeatureCache own;
    if (!cache) {
        own = FeatureCache::build(model, split, config.partition);
        cache = &own;
    }
    EvalReport report;
    report.has_text = model.config.switches.lagd;
    report.episodes.resize(config.episodes);

    auto run_one = [&](std::size_t i) {
        Rng rng(derive_seed(config.seed, {0xe7a1, i}));
        const Episode ep = sample_episode(split, config.partition, config.way, config.shot, config.queries, rng);
        const EpisodePredictions p = predict(model, ep.task, table, cache);
        EpisodeRecord& r = report.episodes[i];
        r.fused = accuracy(ep.task, ep.answers, p.fused);
        r.visual = accuracy(ep.task, ep.answers, p.visual);
        r.text = p.text.empty() ? std::nan("") : accuracy(ep.task, ep.answers, p.text);
    };

    const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, config.episodes));
    if (workers == 1) {
        for (std::size_t i = 0; i < config.episodes; ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < config.episodes; i = next++) {
                    try {
                        run_one(i);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) failure = std::current_exception();
                        next = config.episodes;
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    report.fused = interval_of(report.episodes, &EpisodeRecord::fused);
    report.visual = interval_of(report.episodes, &EpisodeRecord::visual);
    if (report.has_text) report.text = interval_of(report.episodes, &EpisodeRecord::text);
    return report;
}

std::string metrics_csv(const EvalReport& report) {
    std::string out = "episode,fused_acc,visual_acc,text_acc\n";
    for (std::size_t i = 0; i < report.episodes.size(); ++i) {
        const auto& r = report.episodes[i];
        out += std::to_string(i) + "," + format_double(r.fused) + "," + format_double(r.visual) + "," +
               format_double(r.text) + "\n";
    }
    out += "summary," + report.fused.str() + "," + report.visual.str() + "," +
           (report.has_text ? report.text.str() : std::string("nan")) + "\n";
    return out;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
    std::string out = "epoch,loss,val_acc,val_hw,lr\n";
    for (const auto& r : rows) {
        out += std::to_string(r.epoch) + "," + format_double(r.loss) + "," + format_double(r.val.mean) + "," +
               format_double(r.val.half_width) + "," + format_double(r.lr) + "\n";
    }
    return out;
}

std::vector<HistoryRow> meta_train(LpnModel& model, const DatasetSplit& split, const EmbeddingTable& table,
                                   const MetaTrainConfig& config,
                                   const std::function<void(const HistoryRow&)>& on_epoch) {
    if (config.episodes_per_epoch == 0) throw ConfigError("meta-train: episodes per epoch must be positive");
    const auto params = model.trainable();
    OptimizerState state = make_optimizer(config.sgd, params);
    std::vector<HistoryRow> history;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        state.lr = lr_at_epoch(config.sgd, epoch);
        double loss_sum = 0.0;
        for (std::size_t e = 0; e < config.episodes_per_epoch; ++e) {
            const auto where = "epoch " + std::to_string(epoch) + " episode " + std::to_string(e);
            Rng rng(derive_seed(config.seed, {0x7a1, epoch, e}));
            const Episode ep = sample_episode(split, Partition::Base, config.way, config.shot, config.queries, rng);
            const auto labels = ep.answers.labels_for(ep.task);
            zero_grads(params);
            try {
                const ForwardResult r = forward(model, episode_maps(model, ep.task), table);
                const Tensor loss = episode_loss(model, r, ep.task.shot, labels).total;
                loss_sum += loss.item();
                if (!params.empty()) {
                    backward(loss);
                    sgd_step(params, state);
                }
            } catch (const NumericError& err) {
                throw TrainingError("meta-train: diverged at " + where + ": " + err.what());
            } catch (const TrainingError& err) {
                throw TrainingError("meta-train: diverged at " + where + ": " + err.what());
            }
        }
        HistoryRow row;
        row.epoch = epoch;
        row.loss = loss_sum / static_cast<double>(config.episodes_per_epoch);
        row.lr = state.lr;
        if (config.val_episodes > 0) {
            EvalConfig ec;
            ec.partition = Partition::Val;
            ec.way = config.way;
            ec.shot = config.shot;
            ec.queries = config.queries;
            ec.episodes = config.val_episodes;
            ec.seed = derive_seed(config.seed, {0x7a1da});
            ec.workers = config.workers;
            row.val = evaluate(model, split, table, ec).fused;
        }
        history.push_back(row);
        if (on_epoch) on_epoch(row);
    }
    return history;
}

} // namespace lpn
