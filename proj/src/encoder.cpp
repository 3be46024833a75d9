#include "lpn/encoder.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "lpn/checkpoint.hpp"
#include "lpn/error.hpp"
#include "lpn/losses.hpp"
#include "lpn/ops.hpp"

namespace lpn {

ConvEncoder ConvEncoder::create(const Geometry& input, std::vector<std::size_t> plan, Rng& rng,
                                std::size_t kernel) {
    if (plan.empty()) throw ConfigError("encoder: channel plan is empty");
    if (kernel % 2 == 0) throw ConfigError("encoder: kernel size must be odd");
    if (input.numel() == 0) throw ConfigError("encoder: degenerate input geometry " + input.str());
    ConvEncoder e;
    e.input_ = input;
    e.plan_ = plan;
    std::size_t h = input.height, w = input.width, in = input.channels;
    for (std::size_t out : plan) {
        if (out == 0) throw ConfigError("encoder: zero channels in plan");
        const std::size_t fan_in = in * kernel * kernel;
        const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::vector<double> wv(out * fan_in);
        for (double& x : wv) x = s * rng.normal();
        e.blocks.push_back({Tensor(Shape{out, in, kernel, kernel}, std::move(wv), true),
                            Tensor(Shape{out}, true)});
        h /= 2;
        w /= 2;
        in = out;
    }
    if (h < 2 || w < 2) {
        throw ConfigError("encoder: " + std::to_string(plan.size()) + " blocks reduce " + input.str() +
                          " to " + std::to_string(h) + "x" + std::to_string(w) +
                          " cells; at least 2x2 are needed");
    }
    e.out_h_ = h;
    e.out_w_ = w;
    return e;
}

Tensor ConvEncoder::forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != input_.channels || images.dim(2) != input_.height ||
        images.dim(3) != input_.width) {
        throw DimensionError("encoder: expected [B x " + input_.str() + "] images, got " +
                             shape_str(images.shape()));
    }
    Tensor x = images;
    for (const auto& b : blocks) x = ops::avg_pool2(ops::relu(ops::conv2d(x, b.weight, b.bias)));
    return x;
}

std::vector<NamedTensor> ConvEncoder::parameters(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = prefix + ".block" + std::to_string(i);
        out.push_back({p + ".weight", blocks[i].weight});
        out.push_back({p + ".bias", blocks[i].bias});
    }
    return out;
}

Tensor image_batch(std::span<const std::span<const double>> images, const Geometry& geometry) {
    std::vector<double> v;
    v.reserve(images.size() * geometry.numel());
    for (const auto& img : images) {
        if (img.size() != geometry.numel()) {
            throw DimensionError("encoder: image with " + std::to_string(img.size()) +
                                 " values does not match geometry " + geometry.str());
        }
        v.insert(v.end(), img.begin(), img.end());
    }
    return Tensor(Shape{images.size(), geometry.channels, geometry.height, geometry.width}, std::move(v));
}

FeatureMap encode(const ConvEncoder& encoder, const Sample& sample) {
    std::span<const double> img = sample.image;
    Tensor out = encoder.forward(image_batch(std::span(&img, 1), encoder.input()));
    return {ops::select(out, 0), sample.sample_id};
}

Tensor global_pool(const Tensor& map) {
    if (map.rank() == 3) {
        const std::size_t d = map.dim(0);
        return ops::row_means(ops::reshape(map, Shape{d, map.dim(1) * map.dim(2)}));
    }
    if (map.rank() == 4) {
        const std::size_t b = map.dim(0), d = map.dim(1);
        Tensor m = ops::row_means(ops::reshape(map, Shape{b * d, map.dim(2) * map.dim(3)}));
        return ops::reshape(m, Shape{b, d});
    }
    throw DimensionError("global_pool: expected [D,H,W] or [B,D,H,W], got " + shape_str(map.shape()));
}

Tensor map_tokens(const Tensor& map) {
    if (map.rank() != 3) throw DimensionError("map_tokens: expected [D,H,W], got " + shape_str(map.shape()));
    return ops::transpose(ops::reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}));
}

std::vector<NamedTensor> PretrainState::parameters() const {
    auto p = encoder.parameters("encoder");
    p.push_back({"pretrain.head", head});
    return p;
}

PretrainState pretrain_begin(ConvEncoder encoder, std::size_t classes, const PretrainConfig& config) {
    if (classes == 0) throw ConfigError("pretrain: no base classes");
    PretrainState s;
    s.encoder = std::move(encoder);
    const std::size_t d = s.encoder.channels();
    Rng rng(derive_seed(config.seed, {0x4ead}));
    std::vector<double> w(d * classes);
    const double scale = std::sqrt(1.0 / static_cast<double>(d));
    for (double& x : w) x = scale * rng.normal();
    s.head = Tensor(Shape{d, classes}, std::move(w), true);
    s.optimizer = make_optimizer(config.sgd, s.parameters());
    return s;
}

namespace {

struct LabeledImage {
    std::span<const double> image;
    std::size_t label;
};

std::vector<LabeledImage> base_images(const DatasetSplit& split) {
    std::vector<LabeledImage> out;
    const auto& classes = split.classes(Partition::Base);
    if (classes.empty()) throw ConfigError("pretrain: base partition is empty");
    for (std::size_t c = 0; c < classes.size(); ++c) {
        for (const auto& s : split.samples(classes[c])) out.push_back({s.image, c});
    }
    return out;
}

} // namespace

void pretrain_run(PretrainState& state, const DatasetSplit& split, const PretrainConfig& config,
                  std::size_t until_epoch) {
    if (config.batch_size == 0) throw ConfigError("pretrain: batch_size must be positive");
    const auto items = base_images(split);
    if (state.head.dim(1) != split.classes(Partition::Base).size()) {
        throw ConfigError("pretrain: head has " + std::to_string(state.head.dim(1)) +
                          " classes, base partition has " +
                          std::to_string(split.classes(Partition::Base).size()));
    }
    const auto params = state.parameters();
    while (state.epochs_done < until_epoch) {
        const std::size_t epoch = state.epochs_done;
        state.optimizer.lr = lr_at_epoch(config.sgd, epoch);
        state.optimizer.momentum = config.sgd.momentum;
        state.optimizer.weight_decay = config.sgd.weight_decay;
        std::vector<std::size_t> order(items.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(config.seed, {0x9e7, epoch}));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        }
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<std::span<const double>> imgs;
            std::vector<std::size_t> labels;
            for (std::size_t k = start; k < end; ++k) {
                imgs.push_back(items[order[k]].image);
                labels.push_back(items[order[k]].label);
            }
            const std::size_t step = state.step_loss.size();
            Tensor loss;
            try {
                Tensor pooled = global_pool(state.encoder.forward(image_batch(imgs, split.geometry())));
                loss = classification_loss(ops::matmul(pooled, state.head), labels, 1.0);
            } catch (const NumericError& e) {
                throw TrainingError("pretrain: diverged at step " + std::to_string(step) + ": " + e.what());
            }
            zero_grads(params);
            backward(loss);
            try {
                sgd_step(params, state.optimizer);
            } catch (const TrainingError& e) {
                throw TrainingError("pretrain: diverged at step " + std::to_string(step) + ": " + e.what());
            }
            state.step_loss.push_back(loss.item());
            total += loss.item();
            ++batches;
        }
        zero_grads(params);
        state.epoch_loss.push_back(total / static_cast<double>(batches));
        state.epochs_done = epoch + 1;
    }
}

ConvEncoder pretrain(ConvEncoder encoder, const DatasetSplit& split, const PretrainConfig& config) {
    PretrainState s = pretrain_begin(std::move(encoder), split.classes(Partition::Base).size(), config);
    pretrain_run(s, split, config, config.epochs);
    return s.encoder;
}

double pretrain_accuracy(const PretrainState& state, const DatasetSplit& split) {
    NoGradGuard guard;
    const auto items = base_images(split);
    std::size_t hits = 0;
    for (std::size_t start = 0; start < items.size(); start += 128) {
        const std::size_t end = std::min(items.size(), start + 128);
        std::vector<std::span<const double>> imgs;
        for (std::size_t k = start; k < end; ++k) imgs.push_back(items[k].image);
        Tensor logits = ops::matmul(global_pool(state.encoder.forward(image_batch(imgs, split.geometry()))),
                                    state.head);
        const std::size_t n = logits.dim(1);
        for (std::size_t r = 0; r < end - start; ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < n; ++c) {
                if (logits.at(r, c) > logits.at(r, best)) best = c;
            }
            hits += best == items[start + r].label;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(items.size());
}

namespace {

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

} // namespace

void save_pretrain_state(const PretrainState& state, const std::filesystem::path& dir) {
    const Geometry& g = state.encoder.input();
    std::map<std::string, std::string> meta{
        {"geometry", join({g.channels, g.height, g.width})},
        {"plan", join(state.encoder.plan())},
        {"kernel", std::to_string(state.encoder.blocks.front().weight.dim(2))},
        {"classes", std::to_string(state.head.dim(1))},
        {"epochs_done", std::to_string(state.epochs_done)},
        {"lr", std::to_string(state.optimizer.lr)},
    };
    auto tensors = state.parameters();
    const auto params = state.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        tensors.push_back({"velocity." + params[i].name,
                           Tensor(params[i].tensor.shape(), state.optimizer.velocity[i])});
    }
    tensors.push_back({"history.epoch_loss", Tensor::vector(state.epoch_loss)});
    tensors.push_back({"history.step_loss", Tensor::vector(state.step_loss)});
    write_checkpoint(dir, "pretrain", meta, tensors);
}

PretrainState load_pretrain_state(const std::filesystem::path& dir) {
    const CheckpointContents c = read_checkpoint(dir);
    if (c.kind != "pretrain") {
        throw CheckpointError(CheckpointError::Kind::Manifest,
                              "checkpoint: expected a pretrain checkpoint, found '" + c.kind + "'");
    }
    PretrainState s;
    try {
        const auto geo = split_sizes(c.meta_value("geometry"));
        if (geo.size() != 3) throw std::invalid_argument("geometry");
        Rng rng(0);
        s.encoder = ConvEncoder::create({geo[0], geo[1], geo[2]}, split_sizes(c.meta_value("plan")), rng,
                                        std::stoul(c.meta_value("kernel")));
        s.head = Tensor(Shape{s.encoder.channels(), std::stoul(c.meta_value("classes"))}, true);
        s.epochs_done = std::stoul(c.meta_value("epochs_done"));
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Manifest,
                              std::string("checkpoint: bad pretrain metadata: ") + e.what());
    }
    const auto params = s.parameters();
    assign_parameters(params, c);
    for (const auto& p : params) {
        const Tensor& v = c.get("velocity." + p.name);
        if (v.shape() != p.tensor.shape()) {
            throw CheckpointError(CheckpointError::Kind::Shape, "checkpoint: velocity shape for " + p.name);
        }
        s.optimizer.velocity.emplace_back(v.values().begin(), v.values().end());
    }
    const auto el = c.get("history.epoch_loss").values();
    const auto sl = c.get("history.step_loss").values();
    s.epoch_loss.assign(el.begin(), el.end());
    s.step_loss.assign(sl.begin(), sl.end());
    return s;
}

} // namespace lpn
