#include "lpn/experiment.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

#include "lpn/error.hpp"
#include "lpn/ops.hpp"

namespace lpn {

namespace {

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    out.close();
    if (!out) throw IoError("cannot write '" + path.string() + "'");
}

Geometry parse_geometry(const Config& c, const std::string& key) {
    const auto g = c.get_sizes(key);
    if (g.size() != 3) throw ConfigError("config: '" + key + "' needs channels,height,width");
    return {g[0], g[1], g[2]};
}

SgdConfig sgd_config(const Config& c, const std::string& prefix) {
    SgdConfig s;
    s.lr = c.get_double(prefix + ".lr");
    s.momentum = c.get_double(prefix + ".momentum");
    s.weight_decay = c.get_double(prefix + ".weight_decay");
    s.decay_epochs = c.get_sizes(prefix + ".decay_epochs");
    s.decay_factor = c.get_double(prefix + ".decay_factor");
    if (!(s.lr > 0.0)) throw ConfigError("config: '" + prefix + ".lr' must be positive");
    return s;
}

std::string report_columns(const EvalReport& r) {
    auto ci = [](const ConfidenceInterval& c) { return num(c.mean) + "," + num(c.half_width); };
    return ci(r.fused) + "," + ci(r.visual) + "," + (r.has_text ? ci(r.text) : std::string("nan,nan"));
}

constexpr const char* kReportHeader = "fused_acc,fused_hw,visual_acc,visual_hw,text_acc,text_hw";

EvalReport evaluate_into(const LpnModel& model, const Workspace& ws, const EvalConfig& ec,
                         const std::filesystem::path& dir, const RunLog& log) {
    EvalReport report = evaluate(model, ws.split, ws.table, ec);
    write_text(dir / "metrics.csv", metrics_csv(report));
    log.line("eval " + std::to_string(ec.way) + "-way " + std::to_string(ec.shot) + "-shot: fused " +
             report.fused.str() + " visual " + report.visual.str() +
             (report.has_text ? " text " + report.text.str() : std::string()));
    return report;
}

LpnModel load_checkpoint_model(const Config& config) {
    const std::string path = config.get("model.checkpoint");
    if (path.empty()) throw IoError("model.checkpoint is not set");
    return load_model(path);
}

std::string matrix_csv(const std::vector<double>& values, std::size_t rows, std::size_t cols) {
    std::string out;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) out += (j ? "," : "") + num(values[i * cols + j]);
        out += "\n";
    }
    return out;
}

} // namespace

Workspace load_workspace(const Config& c) {
    Workspace ws;
    const std::string dir = c.get("data.dir");
    if (dir.empty()) {
        SyntheticSpec s;
        s.class_count = c.get_size("synthetic.classes");
        s.feature_dim = c.get_size("synthetic.feature_dim");
        s.geometry = parse_geometry(c, "synthetic.geometry");
        s.samples_per_class = c.get_size("synthetic.samples_per_class");
        s.frequencies = c.get_size("synthetic.frequencies");
        s.tile = c.get_size("synthetic.tile");
        s.separation = c.get_double("synthetic.separation");
        s.noise = c.get_double("synthetic.noise");
        s.anchor_noise = c.get_double("synthetic.anchor_noise");
        s.seed = c.get_u64("synthetic.seed");
        SyntheticData data = generate_synthetic(s);
        ws.split = std::move(data.split);
        ws.table = std::move(data.table);
    } else {
        ws.split = load_dataset(dir);
        if (c.get("data.embeddings").empty()) throw ConfigError("config: data.dir needs data.embeddings");
    }
    if (!c.get("data.embeddings").empty()) ws.table = load_embedding_table(c.get("data.embeddings"));
    return ws;
}

ModelConfig model_config(const Config& c, const Geometry& geometry) {
    ModelConfig m;
    m.geometry = geometry;
    m.plan = c.get_sizes("model.plan");
    m.kernel = c.get_size("model.kernel");
    m.text_dim = c.get_size("model.text_dim");
    m.projector_hidden = c.get_size("model.projector_hidden");
    m.heads = c.get_size("model.heads");
    m.queries = c.get_size("model.queries");
    m.residual = c.get_bool("model.residual");
    m.layer_norm = c.get_bool("model.layer_norm");
    m.metric = parse_metric(c.get("model.metric"));
    m.dn4_k = c.get_size("model.dn4_k");
    m.align_mode = parse_align_mode(c.get("model.align_mode"));
    m.switches = ModuleSwitches::parse(c.get("model.switches"));
    m.gamma = c.get_double("model.gamma");
    m.finetune_encoder = c.get_bool("model.finetune_encoder");
    m.alpha = c.get_double("loss.alpha");
    m.beta = c.get_double("loss.beta");
    m.contrastive = c.get_bool("loss.contrastive");
    m.contrastive_options.tau = c.get_double("loss.tau");
    m.contrastive_options.normalize = c.get_bool("loss.normalize");
    m.contrastive_options.mode = parse_contrastive_mode(c.get("loss.contrastive_mode"));
    m.seed = c.get_u64("seed");
    m.validate();
    return m;
}

PretrainConfig pretrain_config(const Config& c) {
    PretrainConfig p;
    p.epochs = c.get_size("pretrain.epochs");
    p.batch_size = c.get_size("pretrain.batch_size");
    p.sgd = sgd_config(c, "pretrain");
    p.seed = c.get_u64("seed");
    return p;
}

MetaTrainConfig meta_train_config(const Config& c) {
    MetaTrainConfig t;
    t.way = c.get_size("episode.way");
    t.shot = c.get_size("episode.shot");
    t.queries = c.get_size("episode.queries");
    t.epochs = c.get_size("train.epochs");
    t.episodes_per_epoch = c.get_size("train.episodes_per_epoch");
    t.sgd = sgd_config(c, "train");
    t.val_episodes = c.get_size("train.val_episodes");
    t.seed = c.get_u64("seed");
    t.workers = c.get_size("eval.workers");
    return t;
}

EvalConfig eval_config(const Config& c) {
    EvalConfig e;
    e.partition = parse_partition(c.get("eval.partition"));
    e.way = c.get_size("episode.way");
    e.shot = c.get_size("episode.shot");
    e.queries = c.get_size("episode.queries");
    e.episodes = c.get_size("eval.episodes");
    e.seed = c.get_u64("seed");
    e.workers = c.get_size("eval.workers");
    return e;
}

void RunLog::line(const std::string& text) const {
    if (out) *out << text << std::endl;
}

void prepare_run_dir(const Config& config, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    write_text(dir / "config.txt", config.text());
    write_text(dir / "seed.txt", "seed = " + config.get("seed") + "\nconfig_hash = " + hex64(config.hash()) + "\n");
}

ConvEncoder obtain_encoder(const Config& config, const Workspace& ws, const std::filesystem::path& dir,
                           const RunLog& log) {
    const std::string path = config.get("pretrain.checkpoint");
    if (!path.empty()) {
        log.line("loading pretrained encoder from " + path);
        return load_pretrain_state(path).encoder;
    }
    const ModelConfig mc = model_config(config, ws.split.geometry());
    const PretrainConfig pc = pretrain_config(config);
    Rng rng(derive_seed(mc.seed, {10}));
    PretrainState state = pretrain_begin(ConvEncoder::create(mc.geometry, mc.plan, rng, mc.kernel),
                                         ws.split.classes(Partition::Base).size(), pc);
    for (std::size_t e = 0; e < pc.epochs; ++e) {
        pretrain_run(state, ws.split, pc, e + 1);
        log.line("pretrain epoch " + std::to_string(e) + " loss " + num(state.epoch_loss.back()));
    }
    save_pretrain_state(state, dir / "pretrain");
    std::string history = "epoch,loss\n";
    for (std::size_t e = 0; e < state.epoch_loss.size(); ++e) {
        history += std::to_string(e) + "," + num(state.epoch_loss[e]) + "\n";
    }
    write_text(dir / "pretrain_history.csv", history);
    const double acc = pretrain_accuracy(state, ws.split);
    write_text(dir / "pretrain_metrics.csv", "split,accuracy\nbase," + num(acc) + "\n");
    log.line("pretrain base accuracy " + num(acc));
    return state.encoder;
}

LpnModel train_model(const Config& config, const Workspace& ws, const ConvEncoder& encoder,
                     const std::filesystem::path& dir, const RunLog& log) {
    LpnModel model = LpnModel::create(model_config(config, ws.split.geometry()), ws.table.dim());
    install_encoder(model, encoder);
    const MetaTrainConfig tc = meta_train_config(config);
    auto history = meta_train(model, ws.split, ws.table, tc, [&](const HistoryRow& h) {
        log.line("meta-train epoch " + std::to_string(h.epoch) + " loss " + num(h.loss) + " val " + h.val.str() +
                 " lr " + num(h.lr));
    });
    write_text(dir / "history.csv", history_csv(history));
    save_model(model, dir / "model", {{"config_hash", hex64(config.hash())}});
    return model;
}

void run_pretrain(const Config& config, const std::filesystem::path& dir, const RunLog& log) {
    prepare_run_dir(config, dir);
    const Workspace ws = load_workspace(config);
    Config fresh = config;
    fresh.set("pretrain.checkpoint", "");
    obtain_encoder(fresh, ws, dir, log);
    std::filesystem::copy_file(dir / "pretrain_metrics.csv", dir / "metrics.csv",
                               std::filesystem::copy_options::overwrite_existing);
}

EvalReport run_meta_train(const Config& config, const std::filesystem::path& dir, const RunLog& log) {
    prepare_run_dir(config, dir);
    const Workspace ws = load_workspace(config);
    const ConvEncoder encoder = obtain_encoder(config, ws, dir, log);
    const LpnModel model = train_model(config, ws, encoder, dir, log);
    return evaluate_into(model, ws, eval_config(config), dir, log);
}

EvalReport run_eval(const Config& config, const std::filesystem::path& dir, const RunLog& log) {
    prepare_run_dir(config, dir);
    const LpnModel model = load_checkpoint_model(config);
    const Workspace ws = load_workspace(config);
    return evaluate_into(model, ws, eval_config(config), dir, log);
}

std::vector<AblationRow> run_ablation(const Config& config, const std::filesystem::path& dir, const RunLog& log) {
    std::vector<ModuleSwitches> grid;
    for (const auto& code : config.get_list("ablate.rows")) {
        grid.push_back(ModuleSwitches::parse(code));
        grid.back().validate();
    }
    if (grid.empty()) throw ConfigError("config: ablate.rows is empty");
    prepare_run_dir(config, dir);
    const Workspace ws = load_workspace(config);
    const ConvEncoder encoder = obtain_encoder(config, ws, dir, log);
    std::vector<AblationRow> rows;
    for (const auto& sw : grid) {
        Config cell = config;
        cell.set("model.switches", sw.code());
        const auto sub = dir / ("ablate_" + sw.code());
        prepare_run_dir(cell, sub);
        log.line("ablation row " + sw.code());
        const LpnModel model = train_model(cell, ws, encoder, sub, log);
        rows.push_back({sw, evaluate_into(model, ws, eval_config(cell), sub, log)});
    }
    write_text(dir / "ablation.csv", ablation_csv(rows));
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = std::string("switches,lagd,rph,la,") + kReportHeader + "\n";
    for (const auto& r : rows) {
        out += r.switches.code() + "," + (r.switches.lagd ? "1," : "0,") + (r.switches.rph ? "1," : "0,") +
               (r.switches.la ? "1," : "0,") + report_columns(r.report) + "\n";
    }
    return out;
}

std::vector<SweepPoint> run_sweep(const Config& config, const std::filesystem::path& dir, const RunLog& log) {
    const std::string param = config.get("sweep.parameter");
    const auto values = config.get_doubles("sweep.values");
    if (values.empty()) throw ConfigError("config: sweep.values is empty");
    const bool retrain = param == "gamma" || param == "beta";
    if (!retrain && param != "way" && param != "shot") {
        throw ConfigError("config: sweep.parameter must be gamma, beta, way or shot, got '" + param + "'");
    }
    std::vector<Config> cells;
    for (double v : values) {
        Config cell = config;
        if (param == "gamma") {
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep: gamma " + num(v) + " outside [0,1]");
            cell.set("model.gamma", num(v));
        } else if (param == "beta") {
            if (!(v >= 0.0)) throw ConfigError("sweep: beta " + num(v) + " is negative");
            cell.set("loss.beta", num(v));
        } else {
            if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError("sweep: " + param + " " + num(v) + " is not a positive integer");
            cell.set("episode." + param, num(v));
        }
        cells.push_back(cell);
    }
    prepare_run_dir(config, dir);
    const Workspace ws = load_workspace(config);
    const ConvEncoder encoder = obtain_encoder(config, ws, dir, log);
    std::vector<SweepPoint> points;
    if (retrain) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const auto sub = dir / ("sweep_" + param + "_" + num(values[i]));
            prepare_run_dir(cells[i], sub);
            log.line("sweep " + param + " = " + num(values[i]));
            const LpnModel model = train_model(cells[i], ws, encoder, sub, log);
            points.push_back({param, values[i], evaluate_into(model, ws, eval_config(cells[i]), sub, log)});
        }
    } else {
        const auto sub = dir / "sweep_model";
        prepare_run_dir(config, sub);
        const LpnModel model = train_model(config, ws, encoder, sub, log);
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const auto eval_dir = dir / ("sweep_" + param + "_" + num(values[i]));
            prepare_run_dir(cells[i], eval_dir);
            points.push_back({param, values[i], evaluate_into(model, ws, eval_config(cells[i]), eval_dir, log)});
        }
    }
    write_text(dir / "sweep.csv", sweep_csv(points));
    return points;
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
    std::string out = std::string("parameter,value,") + kReportHeader + "\n";
    for (const auto& p : points) out += p.parameter + "," + num(p.value) + "," + report_columns(p.report) + "\n";
    return out;
}

GradCheckReport run_gradcheck(const Config& config, const std::filesystem::path& dir, const RunLog& log) {
    prepare_run_dir(config, dir);
    const Workspace ws = load_workspace(config);
    const LpnModel model = LpnModel::create(model_config(config, ws.split.geometry()), ws.table.dim());
    Rng rng(derive_seed(config.get_u64("seed"), {0x9c}));
    const Episode ep = sample_episode(ws.split, Partition::Base, 3, 2, 2, rng);
    const auto labels = ep.answers.labels_for(ep.task);
    auto loss = [&] {
        const ForwardResult r = forward(model, episode_maps(model, ep.task), ws.table);
        return episode_loss(model, r, ep.task.shot, labels).total;
    };
    struct FaultScope {
        explicit FaultScope(const std::string& op) {
            if (!op.empty()) testing::set_gradient_fault(op);
        }
        ~FaultScope() { testing::clear_gradient_fault(); }
    } fault(config.get("gradcheck.fault"));
    GradCheckOptions options;
    options.eps = config.get_double("gradcheck.eps");
    options.retry_eps = config.get_doubles("gradcheck.retry_eps");
    options.floor = config.get_double("gradcheck.floor");
    const GradCheckReport report = finite_diff_report(loss, model.parameters(), options);
    write_text(dir / "gradcheck.csv", gradcheck_csv(report));
    const double threshold = config.get_double("gradcheck.threshold");
    for (const auto& g : report.groups) {
        log.line(g.name + " " + num(g.max_rel_error) + (g.max_rel_error < threshold ? "" : "  FAIL"));
    }
    return report;
}

std::string gradcheck_csv(const GradCheckReport& report) {
    std::string out = "group,coordinates,retried,max_rel_error\n";
    for (const auto& g : report.groups) {
        out += g.name + "," + std::to_string(g.coordinates) + "," + std::to_string(g.retried) + "," +
               num(g.max_rel_error) + "\n";
    }
    return out;
}

std::vector<std::filesystem::path> dump_attention(const Config& config, const std::filesystem::path& dir,
                                                  const RunLog& log) {
    const LpnModel model = load_checkpoint_model(config);
    const Workspace ws = load_workspace(config);
    const ModuleSwitches sw = model.config.switches;
    if (!sw.lagd && !sw.la) throw ConfigError("dump-attention: the model has neither decoder nor alignment");
    const EvalConfig ec = eval_config(config);
    Rng rng(derive_seed(ec.seed, {0xe7a1, 0}));
    const Episode ep = sample_episode(ws.split, ec.partition, ec.way, ec.shot, ec.queries, rng);
    std::vector<std::string> ids = config.get_list("attention.samples");
    if (ids.empty()) {
        for (const auto& s : ep.task.support) ids.push_back(s.sample->sample_id);
    }
    std::vector<const Sample*> samples;
    for (const auto& id : ids) samples.push_back(&ws.split.find(id));

    prepare_run_dir(config, dir);
    NoGradGuard guard;
    const Tensor class_features = episode_class_features(ws.table, model.projector, ep.task.class_names);
    std::string classes;
    for (const auto& c : ep.task.class_names) classes += c + "\n";
    write_text(dir / "attention_classes.txt", classes);

    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::string& id, const char* stage, const std::string& text) {
        const auto path = dir / ("attn_" + id + "_" + stage + ".csv");
        write_text(path, text);
        written.push_back(path);
    };
    for (const Sample* s : samples) {
        const std::span<const double> image[1] = {s->image};
        const Tensor map = ops::select(encode_images(model, image), 0);
        if (sw.lagd) {
            const AttentionMaps a = attention_maps(model.decoder, map, class_features);
            emit(s->sample_id, "visual", matrix_csv(a.visual, a.rows, a.tokens));
            emit(s->sample_id, "text", matrix_csv(a.text, a.rows, a.classes));
        }
        if (sw.la) {
            const std::vector<std::string> own = {s->class_id};
            const Tensor feature = episode_class_features(ws.table, model.projector, own);
            const Tensor kernels = class_kernels(feature, model.align_map.defined() ? &model.align_map : nullptr);
            const Alignment al = language_align(map, ops::select(kernels, 0), model.config.align_mode);
            const auto& shape = al.attention.shape();
            const std::size_t cols = shape.back();
            const std::vector<double> values(al.attention.values().begin(), al.attention.values().end());
            emit(s->sample_id, "la", matrix_csv(values, al.attention.numel() / cols, cols));
        }
        log.line("attention maps for " + s->sample_id);
    }
    return written;
}

} // namespace lpn
