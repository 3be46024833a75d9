#include "lpn/model.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "lpn/checkpoint.hpp"
#include "lpn/error.hpp"
#include "lpn/ops.hpp"

namespace lpn {

namespace {

std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("not a number: " + s);
    return v;
}

std::string join(const std::vector<std::size_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
    return out;
}

bool parse_flag(const std::string& s) {
    if (s == "1" || s == "true" || s == "on") return true;
    if (s == "0" || s == "false" || s == "off") return false;
    throw std::invalid_argument("not a flag: " + s);
}

// Batch helpers over the leading axis of a rank-4 tensor.
Tensor batch_rows(const Tensor& maps, std::size_t begin, std::size_t end) {
    Shape s = maps.shape();
    const std::size_t inner = maps.numel() / s[0];
    Tensor part = ops::slice_rows(ops::reshape(maps, {s[0], inner}), begin, end);
    s[0] = end - begin;
    return ops::reshape(part, s);
}

Tensor batch_concat(const Tensor& a, const Tensor& b) {
    Shape s = a.shape();
    const std::size_t inner = a.numel() / s[0];
    const Tensor parts[2] = {ops::reshape(a, {s[0], inner}), ops::reshape(b, {b.dim(0), inner})};
    s[0] += b.dim(0);
    return ops::reshape(ops::concat_rows(parts), s);
}

std::vector<std::span<const double>> episode_images(const EpisodeTask& task) {
    std::vector<std::span<const double>> images;
    images.reserve(task.support.size() + task.query.size());
    for (const auto& s : task.support) images.emplace_back(s.sample->image);
    for (const auto& q : task.query) images.push_back(q.image);
    return images;
}

} // namespace

std::string align_mode_name(AlignMode m) { return m == AlignMode::Scalar ? "scalar" : "per-channel"; }

AlignMode parse_align_mode(const std::string& s) {
    if (s == "scalar") return AlignMode::Scalar;
    if (s == "per-channel") return AlignMode::PerChannel;
    throw ConfigError("unknown alignment mode '" + s + "' (expected scalar or per-channel)");
}

std::string contrastive_mode_name(ContrastiveMode m) { return m == ContrastiveMode::ClassLevel ? "class" : "in-batch"; }

ContrastiveMode parse_contrastive_mode(const std::string& s) {
    if (s == "class") return ContrastiveMode::ClassLevel;
    if (s == "in-batch") return ContrastiveMode::InBatch;
    throw ConfigError("unknown contrastive mode '" + s + "' (expected class or in-batch)");
}

std::string ModuleSwitches::code() const {
    return std::string{lagd ? '1' : '0', rph ? '1' : '0', la ? '1' : '0'};
}

ModuleSwitches ModuleSwitches::parse(const std::string& code) {
    if (code.size() != 3 || code.find_first_not_of("01") != std::string::npos) {
        throw ConfigError("module switches '" + code + "': expected three 0/1 digits (decoder, refined head, alignment)");
    }
    return {code[0] == '1', code[1] == '1', code[2] == '1'};
}

void ModuleSwitches::validate() const {
    if (rph && !lagd) {
        throw GridError("module switches " + code() + ": the refined head needs decoder text features");
    }
}

void ModelConfig::validate() const {
    switches.validate();
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma " + format_double(gamma) + " outside [0,1]");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive, got " + format_double(alpha));
    if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative, got " + format_double(beta));
    if (!(contrastive_options.tau > 0.0)) {
        throw ConfigError("tau must be positive, got " + format_double(contrastive_options.tau));
    }
    if (text_dim == 0) throw ConfigError("text width must be positive");
    if (dn4_k == 0) throw ConfigError("dn4 k must be at least 1");
    if (heads == 0 || queries == 0) throw ConfigError("decoder needs at least one head and one query");
}

LpnModel LpnModel::create(const ModelConfig& config, std::size_t raw_text_dim) {
    config.validate();
    LpnModel m;
    m.config = config;
    m.raw_text_dim = raw_text_dim;
    Rng enc_rng(derive_seed(config.seed, {10}));
    m.encoder = ConvEncoder::create(config.geometry, config.plan, enc_rng, config.kernel);
    const std::size_t D = m.encoder.channels(), d = config.text_dim;
    if (m.uses_text()) {
        if (raw_text_dim == 0) throw ConfigError("text branch needs an embedding table with positive width");
        Rng rng(derive_seed(config.seed, {11}));
        m.projector = Projector::create(raw_text_dim, config.projector_hidden ? config.projector_hidden : d, d, rng);
    }
    if (config.switches.lagd) {
        Rng rng(derive_seed(config.seed, {12}));
        m.decoder = LaGDBlock::create({D, d, config.heads, config.queries, config.residual, config.layer_norm}, rng);
    }
    if (config.switches.la && d != D) {
        Rng rng(derive_seed(config.seed, {13}));
        std::vector<double> v(d * D);
        for (double& x : v) x = rng.normal() / std::sqrt(static_cast<double>(d));
        m.align_map = Tensor({d, D}, std::move(v), true);
    }
    if (config.metric == MetricKind::Relation) {
        Rng rng(derive_seed(config.seed, {14}));
        m.relation = RelationModule::create(D, rng);
    }
    return m;
}

std::vector<NamedTensor> LpnModel::parameters() const {
    auto out = encoder.parameters("encoder");
    auto append = [&](std::vector<NamedTensor> more) { out.insert(out.end(), more.begin(), more.end()); };
    if (uses_text()) append(projector.parameters("projector"));
    if (config.switches.lagd) append(decoder.parameters("decoder"));
    if (align_map.defined()) out.push_back({"align_map", align_map});
    if (config.metric == MetricKind::Relation) append(relation.parameters("relation"));
    return out;
}

std::vector<NamedTensor> LpnModel::trainable() const {
    auto all = parameters();
    if (config.finetune_encoder) return all;
    std::vector<NamedTensor> out;
    for (auto& p : all) {
        if (p.name.rfind("encoder.", 0) != 0) out.push_back(p);
    }
    return out;
}

void install_encoder(LpnModel& model, const ConvEncoder& encoder) {
    if (!(encoder.input() == model.encoder.input()) || encoder.plan() != model.encoder.plan() ||
        encoder.blocks.size() != model.encoder.blocks.size()) {
        throw DimensionError("install_encoder: encoder " + encoder.input().str() + " plan " + join(encoder.plan()) +
                             " does not match the model's " + model.encoder.input().str() + " plan " +
                             join(model.encoder.plan()));
    }
    for (std::size_t i = 0; i < encoder.blocks.size(); ++i) {
        const auto& src = encoder.blocks[i];
        auto& dst = model.encoder.blocks[i];
        if (src.weight.shape() != dst.weight.shape()) {
            throw DimensionError("install_encoder: block " + std::to_string(i) + " kernel " +
                                 shape_str(src.weight.shape()) + " vs " + shape_str(dst.weight.shape()));
        }
        dst.weight = src.weight.clone(true);
        dst.bias = src.bias.clone(true);
    }
}

ForwardResult forward(const LpnModel& model, const EpisodeMaps& maps, const EmbeddingTable& table) {
    const ModelConfig& cfg = model.config;
    const std::size_t N = maps.way, K = maps.shot;
    if (N == 0 || K == 0 || maps.class_names.size() != N || maps.support.rank() != 4 ||
        maps.support.dim(0) != N * K || maps.query.rank() != 4 || maps.query.dim(0) == 0) {
        throw DimensionError("forward: inconsistent episode (way " + std::to_string(N) + ", shot " +
                             std::to_string(K) + ", supports " + shape_str(maps.support.shape()) + ", queries " +
                             shape_str(maps.query.shape()) + ")");
    }
    ForwardResult r;
    if (model.uses_text()) r.class_features = episode_class_features(table, model.projector, maps.class_names);

    std::vector<Tensor> aligned;
    if (cfg.switches.la) {
        Tensor kernels = class_kernels(r.class_features, model.align_map.defined() ? &model.align_map : nullptr);
        for (std::size_t i = 0; i < N * K; ++i) {
            Alignment a = language_align(ops::select(maps.support, i), ops::select(kernels, i / K), cfg.align_mode);
            aligned.push_back(a.aligned);
            r.alignment.push_back(a.attention);
        }
    }

    Tensor visual;
    if (cfg.metric == MetricKind::Dn4) {
        const std::size_t T = maps.support.dim(2) * maps.support.dim(3);
        std::vector<Tensor> per_class;
        for (std::size_t j = 0; j < N; ++j) {
            std::vector<Tensor> rows;
            for (std::size_t s = 0; s < K; ++s) {
                const std::size_t i = j * K + s;
                rows.push_back(map_tokens(cfg.switches.la ? aligned[i] : ops::select(maps.support, i)));
            }
            per_class.push_back(ops::concat_rows(rows));
        }
        std::vector<Tensor> qrows;
        for (std::size_t q = 0; q < maps.query.dim(0); ++q) qrows.push_back(map_tokens(ops::select(maps.query, q)));
        visual = dn4_logits(ops::concat_rows(qrows), T, per_class, cfg.dn4_k);
    } else {
        Tensor pooled;
        if (cfg.switches.la) {
            std::vector<Tensor> rows;
            for (const Tensor& a : aligned) rows.push_back(global_pool(a));
            pooled = ops::stack(rows);
        } else {
            pooled = global_pool(maps.support);
        }
        Tensor prototypes = class_means(pooled, N, K);
        Tensor queries = global_pool(maps.query);
        visual = cfg.metric == MetricKind::Relation ? relation_logits(model.relation, queries, prototypes)
                                                    : prototype_logits(queries, prototypes);
    }

    if (!cfg.switches.lagd) {
        r.logits = {visual, Tensor::full(visual.shape(), 0.0), visual};
        return r;
    }
    Tensor text = decode_many(model.decoder, batch_concat(maps.support, maps.query), r.class_features);
    r.support_text = ops::slice_rows(text, 0, N * K);
    r.query_text = ops::slice_rows(text, N * K, text.dim(0));
    Tensor prototypes = class_means(r.support_text, N, K);
    Tensor refined = cfg.switches.rph ? refine(prototypes, r.class_features, cfg.gamma) : prototypes;
    r.logits = fuse(visual, text_logits(r.query_text, refined));
    r.has_text = true;
    return r;
}

LossParts episode_loss(const LpnModel& model, const ForwardResult& result, std::size_t shot,
                       std::span<const std::size_t> query_labels) {
    const ModelConfig& cfg = model.config;
    LossParts parts;
    parts.classification = classification_loss(result.logits.fused, query_labels, cfg.alpha);
    if (!result.has_text || !cfg.contrastive) {
        parts.total = parts.classification;
        return parts;
    }
    const std::size_t supports = result.support_text.dim(0);
    std::vector<std::size_t> labels(supports);
    for (std::size_t i = 0; i < supports; ++i) labels[i] = i / shot;
    labels.insert(labels.end(), query_labels.begin(), query_labels.end());
    const Tensor features[2] = {result.support_text, result.query_text};
    parts.contrastive = supervised_contrastive(ops::concat_rows(features), labels, result.class_features,
                                               cfg.contrastive_options);
    parts.total = total_loss(parts.classification, parts.contrastive, cfg.beta);
    return parts;
}

Tensor encode_images(const LpnModel& model, std::span<const std::span<const double>> images) {
    if (model.config.finetune_encoder) return model.encoder.forward(image_batch(images, model.encoder.input()));
    NoGradGuard guard;
    return model.encoder.forward(image_batch(images, model.encoder.input()));
}

EpisodeMaps episode_maps(const LpnModel& model, const EpisodeTask& task) {
    const auto images = episode_images(task);
    Tensor all = encode_images(model, images);
    const std::size_t s = task.support.size();
    return {task.way, task.shot, batch_rows(all, 0, s), batch_rows(all, s, all.dim(0)), task.class_names};
}

FeatureCache FeatureCache::build(const LpnModel& model, const DatasetSplit& split, Partition partition) {
    NoGradGuard guard;
    FeatureCache cache;
    const std::size_t D = model.encoder.channels(), H = model.encoder.out_height(), W = model.encoder.out_width();
    cache.map_shape_ = {D, H, W};
    const std::size_t stride = D * H * W;
    std::vector<const Sample*> samples;
    for (const auto& cls : split.classes(partition)) {
        for (const auto& s : split.samples(cls)) samples.push_back(&s);
    }
    std::vector<double> values;
    values.reserve(samples.size() * stride);
    constexpr std::size_t kChunk = 64;
    for (std::size_t b = 0; b < samples.size(); b += kChunk) {
        std::vector<std::span<const double>> images;
        for (std::size_t i = b; i < std::min(samples.size(), b + kChunk); ++i) images.emplace_back(samples[i]->image);
        Tensor maps = model.encoder.forward(image_batch(images, model.encoder.input()));
        values.insert(values.end(), maps.values().begin(), maps.values().end());
    }
    for (std::size_t i = 0; i < samples.size(); ++i) cache.index_.emplace(samples[i]->sample_id, i);
    cache.flat_ = Tensor({samples.size(), stride}, std::move(values));
    return cache;
}

Tensor FeatureCache::gather(std::span<const std::string> sample_ids) const {
    std::vector<std::size_t> rows;
    rows.reserve(sample_ids.size());
    for (const auto& id : sample_ids) {
        auto it = index_.find(id);
        if (it == index_.end()) throw LookupError("feature cache: no sample '" + id + "'");
        rows.push_back(it->second);
    }
    const std::size_t stride = flat_.dim(1);
    std::vector<double> out(rows.size() * stride);
    auto src = flat_.values();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                    out.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return Tensor({rows.size(), map_shape_[0], map_shape_[1], map_shape_[2]}, std::move(out));
}

EpisodeMaps FeatureCache::episode(const EpisodeTask& task) const {
    std::vector<std::string> support_ids, query_ids;
    for (const auto& s : task.support) support_ids.push_back(s.sample->sample_id);
    for (const auto& q : task.query) query_ids.push_back(q.sample_id);
    return {task.way, task.shot, gather(support_ids), gather(query_ids), task.class_names};
}

EpisodePredictions predict(const LpnModel& model, const EpisodeTask& task, const EmbeddingTable& table,
                           const FeatureCache* cache) {
    NoGradGuard guard;
    const EpisodeMaps maps = cache ? cache->episode(task) : episode_maps(model, task);
    const ForwardResult r = forward(model, maps, table);
    EpisodePredictions p;
    p.fused = argmax_rows(r.logits.fused);
    p.visual = argmax_rows(r.logits.visual);
    if (r.has_text) p.text = argmax_rows(r.logits.text);
    return p;
}

std::map<std::string, std::string> model_meta(const LpnModel& model) {
    const ModelConfig& c = model.config;
    return {
        {"geometry", join({c.geometry.channels, c.geometry.height, c.geometry.width})},
        {"plan", join(c.plan)},
        {"kernel", std::to_string(c.kernel)},
        {"text_dim", std::to_string(c.text_dim)},
        {"projector_hidden", std::to_string(c.projector_hidden)},
        {"raw_text_dim", std::to_string(model.raw_text_dim)},
        {"heads", std::to_string(c.heads)},
        {"queries", std::to_string(c.queries)},
        {"residual", c.residual ? "1" : "0"},
        {"layer_norm", c.layer_norm ? "1" : "0"},
        {"metric", metric_name(c.metric)},
        {"dn4_k", std::to_string(c.dn4_k)},
        {"align_mode", align_mode_name(c.align_mode)},
        {"switches", c.switches.code()},
        {"alpha", format_double(c.alpha)},
        {"beta", format_double(c.beta)},
        {"gamma", format_double(c.gamma)},
        {"contrastive", c.contrastive ? "1" : "0"},
        {"tau", format_double(c.contrastive_options.tau)},
        {"normalize", c.contrastive_options.normalize ? "1" : "0"},
        {"contrastive_mode", contrastive_mode_name(c.contrastive_options.mode)},
        {"finetune_encoder", c.finetune_encoder ? "1" : "0"},
        {"seed", std::to_string(c.seed)},
    };
}

LpnModel model_from_meta(const std::map<std::string, std::string>& meta) {
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = meta.find(key);
        if (it == meta.end()) {
            throw CheckpointError(CheckpointError::Kind::Manifest, "checkpoint: metadata lacks '" + key + "'");
        }
        return it->second;
    };
    try {
        ModelConfig c;
        const auto geo = split_sizes(get("geometry"));
        if (geo.size() != 3) throw std::invalid_argument("geometry needs three sizes");
        c.geometry = {geo[0], geo[1], geo[2]};
        c.plan = split_sizes(get("plan"));
        c.kernel = std::stoul(get("kernel"));
        c.text_dim = std::stoul(get("text_dim"));
        c.projector_hidden = std::stoul(get("projector_hidden"));
        c.heads = std::stoul(get("heads"));
        c.queries = std::stoul(get("queries"));
        c.residual = parse_flag(get("residual"));
        c.layer_norm = parse_flag(get("layer_norm"));
        c.metric = parse_metric(get("metric"));
        c.dn4_k = std::stoul(get("dn4_k"));
        c.align_mode = parse_align_mode(get("align_mode"));
        c.switches = ModuleSwitches::parse(get("switches"));
        c.alpha = parse_double(get("alpha"));
        c.beta = parse_double(get("beta"));
        c.gamma = parse_double(get("gamma"));
        c.contrastive = parse_flag(get("contrastive"));
        c.contrastive_options.tau = parse_double(get("tau"));
        c.contrastive_options.normalize = parse_flag(get("normalize"));
        c.contrastive_options.mode = parse_contrastive_mode(get("contrastive_mode"));
        c.finetune_encoder = parse_flag(get("finetune_encoder"));
        c.seed = std::stoull(get("seed"));
        return LpnModel::create(c, std::stoul(get("raw_text_dim")));
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Manifest, std::string("checkpoint: bad model metadata: ") + e.what());
    }
}

void save_model(const LpnModel& model, const std::filesystem::path& dir,
                const std::map<std::string, std::string>& extra_meta) {
    auto meta = model_meta(model);
    for (const auto& [k, v] : extra_meta) meta.emplace(k, v);
    write_checkpoint(dir, "model", meta, model.parameters());
}

namespace {

CheckpointContents read_model_checkpoint(const std::filesystem::path& dir) {
    CheckpointContents c = read_checkpoint(dir);
    if (c.kind != "model") {
        throw CheckpointError(CheckpointError::Kind::Manifest,
                              "checkpoint: expected a model checkpoint, found '" + c.kind + "'");
    }
    return c;
}

} // namespace

LpnModel load_model(const std::filesystem::path& dir) {
    const CheckpointContents c = read_model_checkpoint(dir);
    LpnModel model = model_from_meta(c.meta);
    assign_parameters(model.parameters(), c);
    return model;
}

void load_model_into(LpnModel& model, const std::filesystem::path& dir) {
    const CheckpointContents c = read_model_checkpoint(dir);
    const auto expected = model_meta(model);
    for (const char* key : {"geometry", "plan", "kernel", "text_dim", "projector_hidden", "raw_text_dim", "heads",
                            "queries", "residual", "layer_norm", "metric", "align_mode", "switches"}) {
        auto it = c.meta.find(key);
        if (it == c.meta.end() || it->second != expected.at(key)) {
            throw CheckpointError(CheckpointError::Kind::Manifest,
                                  std::string("checkpoint: ") + key + " is '" +
                                      (it == c.meta.end() ? std::string("<missing>") : it->second) +
                                      "' but the model expects '" + expected.at(key) + "'");
        }
    }
    assign_parameters(model.parameters(), c);
}

} // namespace lpn
