#include "lpn/decoder.hpp"

#include <cmath>

#include "lpn/encoder.hpp"
#include "lpn/error.hpp"
#include "lpn/ops.hpp"

namespace lpn {

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    std::vector<double> v(rows * cols);
    for (double& x : v) x = scale * rng.normal();
    return Tensor(Shape{rows, cols}, std::move(v), true);
}

// Heads over already-projected inputs; returns the concatenated head outputs.
Tensor attend_heads(const Tensor& qp, const Tensor& kp, const Tensor& vp, std::size_t heads,
                    std::vector<double>* mean_weights) {
    const std::size_t width = qp.dim(1);
    const std::size_t dk = width / heads;
    if (heads == 1) {
        Tensor w;
        Tensor out = attention(qp, kp, vp, mean_weights ? &w : nullptr);
        if (mean_weights) mean_weights->assign(w.values().begin(), w.values().end());
        return out;
    }
    std::vector<Tensor> parts;
    parts.reserve(heads);
    if (mean_weights) mean_weights->assign(qp.dim(0) * kp.dim(0), 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor w;
        parts.push_back(attention(ops::slice_cols(qp, h * dk, (h + 1) * dk),
                                  ops::slice_cols(kp, h * dk, (h + 1) * dk),
                                  ops::slice_cols(vp, h * dk, (h + 1) * dk), mean_weights ? &w : nullptr));
        if (mean_weights) {
            auto wv = w.values();
            for (std::size_t i = 0; i < wv.size(); ++i) (*mean_weights)[i] += wv[i] / static_cast<double>(heads);
        }
    }
    return ops::concat_cols(parts);
}

Tensor finish(const Tensor& input, const Tensor& update, const DecoderOptions& o) {
    Tensor x = o.residual ? ops::add(input, update) : update;
    return o.layer_norm ? ops::layer_norm_rows(x) : x;
}

} // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* weights) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw DimensionError("attention: expected matrices, got " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    if (k.dim(0) == 0) throw DimensionError("attention: no keys to attend to");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                             shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor a = ops::softmax_rows(ops::matmul(q, ops::transpose(k)), scale);
    if (weights) *weights = a;
    return ops::matmul(a, v);
}

AttentionWeights AttentionWeights::create(std::size_t width, std::size_t heads, Rng& rng) {
    if (heads == 0 || width == 0 || width % heads != 0) {
        throw ConfigError("attention: width " + std::to_string(width) + " does not split into " +
                          std::to_string(heads) + " heads");
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(width));
    AttentionWeights w;
    w.heads = heads;
    w.wq = random_matrix(width, width, s, rng);
    w.wk = random_matrix(width, width, s, rng);
    w.wv = random_matrix(width, width, s, rng);
    w.wo = random_matrix(width, width, s, rng);
    return w;
}

std::vector<NamedTensor> AttentionWeights::parameters(const std::string& prefix) const {
    return {{prefix + ".wq", wq}, {prefix + ".wk", wk}, {prefix + ".wv", wv}, {prefix + ".wo", wo}};
}

Tensor multi_head(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionWeights& w,
                  std::vector<double>* mean_weights) {
    const std::size_t width = w.wq.dim(0);
    if (w.heads == 0 || width % w.heads != 0) {
        throw ConfigError("multi_head: width " + std::to_string(width) + " does not split into " +
                          std::to_string(w.heads) + " heads");
    }
    for (const Tensor* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
        if (m->shape() != Shape{width, width}) {
            throw ConfigError("multi_head: projection " + shape_str(m->shape()) + " for width " +
                              std::to_string(width));
        }
    }
    if (k.rank() == 2 && k.dim(0) == 0) throw DimensionError("multi_head: no keys to attend to");
    Tensor heads = attend_heads(ops::matmul(q, w.wq), ops::matmul(k, w.wk), ops::matmul(v, w.wv),
                                w.heads, mean_weights);
    return ops::matmul(heads, w.wo);
}

LaGDBlock LaGDBlock::create(const DecoderOptions& options, Rng& rng) {
    if (options.queries == 0) throw ConfigError("decoder: need at least one learnable query");
    const std::size_t D = options.visual_width, d = options.text_width;
    if (D % options.heads != 0 || d % options.heads != 0) {
        throw ConfigError("decoder: widths D=" + std::to_string(D) + " and d=" + std::to_string(d) +
                          " must both split into " + std::to_string(options.heads) + " heads");
    }
    LaGDBlock b;
    b.options = options;
    b.queries = random_matrix(options.queries, D, 1.0, rng);
    b.self_attn = AttentionWeights::create(D, options.heads, rng);
    b.cross_visual = AttentionWeights::create(D, options.heads, rng);
    b.channel_map = random_matrix(D, d, 1.0 / std::sqrt(static_cast<double>(D)), rng);
    b.cross_text = AttentionWeights::create(d, options.heads, rng);
    return b;
}

std::vector<NamedTensor> LaGDBlock::parameters(const std::string& prefix) const {
    std::vector<NamedTensor> out{{prefix + ".queries", queries}};
    for (auto& p : self_attn.parameters(prefix + ".self_attn")) out.push_back(p);
    for (auto& p : cross_visual.parameters(prefix + ".cross_visual")) out.push_back(p);
    out.push_back({prefix + ".channel_map", channel_map});
    for (auto& p : cross_text.parameters(prefix + ".cross_text")) out.push_back(p);
    return out;
}

Tensor decode_many(const LaGDBlock& block, const Tensor& maps, const Tensor& class_features,
                   std::vector<AttentionMaps>* maps_out) {
    const DecoderOptions& o = block.options;
    Tensor batch = maps.rank() == 3 ? ops::reshape(maps, Shape{1, maps.dim(0), maps.dim(1), maps.dim(2)})
                                    : maps;
    if (batch.rank() != 4 || batch.dim(1) != o.visual_width) {
        throw DimensionError("decoder: expected maps with " + std::to_string(o.visual_width) +
                             " channels, got " + shape_str(maps.shape()));
    }
    if (class_features.rank() != 2 || class_features.dim(1) != o.text_width) {
        throw DimensionError("decoder: expected class features [N x " + std::to_string(o.text_width) +
                             "], got " + shape_str(class_features.shape()));
    }
    if (class_features.dim(0) == 0) throw DimensionError("decoder: no class features to attend to");
    const std::size_t B = batch.dim(0), T = batch.dim(2) * batch.dim(3), M = o.queries;
    const std::size_t N = class_features.dim(0);

    Tensor q = block.queries;
    Tensor qs = finish(q, multi_head(q, q, q, block.self_attn), o);

    std::vector<Tensor> token_rows;
    token_rows.reserve(B);
    for (std::size_t b = 0; b < B; ++b) token_rows.push_back(map_tokens(ops::select(batch, b)));
    Tensor tokens = ops::concat_rows(token_rows);  // [B*T, D]

    const AttentionWeights& cv = block.cross_visual;
    Tensor qp = ops::matmul(qs, cv.wq);
    Tensor kp = ops::matmul(tokens, cv.wk);
    Tensor vp = ops::matmul(tokens, cv.wv);
    std::vector<Tensor> per_image;
    per_image.reserve(B);
    std::vector<std::vector<double>> visual_weights(maps_out ? B : 0);
    for (std::size_t b = 0; b < B; ++b) {
        per_image.push_back(attend_heads(qp, ops::slice_rows(kp, b * T, (b + 1) * T),
                                         ops::slice_rows(vp, b * T, (b + 1) * T), cv.heads,
                                         maps_out ? &visual_weights[b] : nullptr));
    }
    Tensor visual = ops::matmul(ops::concat_rows(per_image), cv.wo);  // [B*M, D]
    if (o.residual || o.layer_norm) {
        std::vector<std::size_t> repeat(B * M);
        for (std::size_t i = 0; i < repeat.size(); ++i) repeat[i] = i % M;
        visual = finish(ops::gather_rows(qs, repeat), visual, o);
    }

    Tensor projected = ops::matmul(visual, block.channel_map);  // [B*M, d]
    std::vector<double> text_weights;
    Tensor text = finish(projected,
                         multi_head(projected, class_features, class_features, block.cross_text,
                                    maps_out ? &text_weights : nullptr),
                         o);

    std::vector<double> pool(B * B * M, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t m = 0; m < M; ++m) pool[b * B * M + b * M + m] = 1.0 / static_cast<double>(M);
    }
    Tensor out = ops::matmul(Tensor(Shape{B, B * M}, std::move(pool)), text);

    if (maps_out) {
        maps_out->clear();
        for (std::size_t b = 0; b < B; ++b) {
            AttentionMaps am;
            am.rows = M;
            am.tokens = T;
            am.classes = N;
            am.visual = std::move(visual_weights[b]);
            am.text.assign(text_weights.begin() + static_cast<std::ptrdiff_t>(b * M * N),
                           text_weights.begin() + static_cast<std::ptrdiff_t>((b + 1) * M * N));
            maps_out->push_back(std::move(am));
        }
    }
    return out;
}

Tensor decode(const LaGDBlock& block, const Tensor& map, const Tensor& class_features) {
    if (map.rank() != 3) throw DimensionError("decode: expected one [D,H,W] map, got " + shape_str(map.shape()));
    Tensor out = decode_many(block, map, class_features);
    return ops::reshape(out, Shape{out.dim(1)});
}

AttentionMaps attention_maps(const LaGDBlock& block, const Tensor& map, const Tensor& class_features) {
    NoGradGuard guard;
    std::vector<AttentionMaps> maps;
    decode_many(block, map, class_features, &maps);
    return maps.front();
}

} // namespace lpn
