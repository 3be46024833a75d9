#include "lpn/heads.hpp"

#include <cmath>

#include "lpn/error.hpp"
#include "lpn/ops.hpp"

namespace lpn {

Alignment language_align(const Tensor& map, const Tensor& kernel, AlignMode mode) {
    if (map.rank() != 3) throw DimensionError("language_align: expected [D,H,W], got " + shape_str(map.shape()));
    const std::size_t D = map.dim(0), H = map.dim(1), W = map.dim(2);
    if (kernel.shape() != Shape{D}) {
        throw DimensionError("language_align: kernel " + shape_str(kernel.shape()) + " for a map with " +
                             std::to_string(D) + " channels");
    }
    Tensor flat = ops::reshape(map, {D, H * W});
    if (mode == AlignMode::PerChannel) {
        Tensor a = ops::sigmoid(ops::mul_col_vector(flat, kernel));
        return {ops::reshape(ops::mul(flat, a), {D, H, W}), ops::reshape(a, {D, H, W})};
    }
    Tensor a = ops::reshape(ops::sigmoid(ops::matmul(ops::reshape(kernel, {1, D}), flat)), {H * W});
    return {ops::reshape(ops::mul_row_vector(flat, a), {D, H, W}), ops::reshape(a, {H, W})};
}

Tensor class_kernels(const Tensor& class_features, const Tensor* align_map) {
    if (class_features.rank() != 2) {
        throw DimensionError("class_kernels: expected [N,d], got " + shape_str(class_features.shape()));
    }
    if (!align_map || !align_map->defined()) return class_features;
    if (align_map->rank() != 2 || align_map->dim(0) != class_features.dim(1)) {
        throw DimensionError("class_kernels: align map " + shape_str(align_map->shape()) + " for features " +
                             shape_str(class_features.shape()));
    }
    return ops::matmul(class_features, *align_map);
}

Tensor text_prototype(const Tensor& support_features) {
    if (support_features.rank() != 2) {
        throw DimensionError("text_prototype: expected [K,d], got " + shape_str(support_features.shape()));
    }
    if (support_features.dim(0) == 0) throw DegenerateInputError("text_prototype: empty support");
    return ops::col_means(support_features);
}

Tensor refine(const Tensor& prototype, const Tensor& class_feature, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) {
        throw ConfigError("refine: gamma " + std::to_string(gamma) + " outside [0,1]");
    }
    if (prototype.shape() != class_feature.shape()) {
        throw DimensionError("refine: prototype " + shape_str(prototype.shape()) + " vs class feature " +
                             shape_str(class_feature.shape()));
    }
    if (gamma == 1.0) return prototype;
    if (gamma == 0.0) return class_feature;
    return ops::add(ops::scale(prototype, gamma), ops::scale(class_feature, 1.0 - gamma));
}

MetricKind parse_metric(const std::string& name) {
    if (name == "prototype-cosine" || name == "prototype") return MetricKind::PrototypeCosine;
    if (name == "dn4-local" || name == "dn4") return MetricKind::Dn4;
    if (name == "relation-module" || name == "relation") return MetricKind::Relation;
    throw ConfigError("unknown metric '" + name + "' (expected prototype-cosine, dn4-local or relation-module)");
}

std::string metric_name(MetricKind kind) {
    switch (kind) {
    case MetricKind::PrototypeCosine: return "prototype-cosine";
    case MetricKind::Dn4: return "dn4-local";
    case MetricKind::Relation: return "relation-module";
    }
    return "?";
}

Tensor class_means(const Tensor& rows, std::size_t way, std::size_t shot) {
    if (rows.rank() != 2 || rows.dim(0) != way * shot) {
        throw DimensionError("class_means: expected " + std::to_string(way * shot) + " rows, got " +
                             shape_str(rows.shape()));
    }
    if (shot == 0) throw DegenerateInputError("class_means: empty support");
    if (shot == 1) return rows;
    std::vector<double> avg(way * way * shot, 0.0);
    for (std::size_t j = 0; j < way; ++j) {
        for (std::size_t s = 0; s < shot; ++s) avg[j * way * shot + j * shot + s] = 1.0 / static_cast<double>(shot);
    }
    return ops::matmul(Tensor({way, way * shot}, std::move(avg)), rows);
}

Tensor prototype_logits(const Tensor& query_pooled, const Tensor& prototypes) {
    return ops::cosine_matrix(query_pooled, prototypes);
}

Tensor dn4_logits(const Tensor& query_descriptors, std::size_t descriptors_per_query,
                  const std::vector<Tensor>& support_descriptors, std::size_t k) {
    if (query_descriptors.rank() != 2 || descriptors_per_query == 0 ||
        query_descriptors.dim(0) % descriptors_per_query != 0) {
        throw DimensionError("dn4: query descriptors " + shape_str(query_descriptors.shape()) +
                             " do not split into groups of " + std::to_string(descriptors_per_query));
    }
    if (support_descriptors.empty()) throw DegenerateInputError("dn4: no classes");
    const std::size_t Q = query_descriptors.dim(0) / descriptors_per_query;
    Tensor qn = ops::normalize_rows(query_descriptors);
    std::vector<Tensor> columns;
    columns.reserve(support_descriptors.size());
    for (const Tensor& s : support_descriptors) {
        if (k == 0 || s.rank() != 2 || k > s.dim(0)) {
            throw ConfigError("dn4: k=" + std::to_string(k) + " but class has " +
                              std::to_string(s.rank() == 2 ? s.dim(0) : 0) + " support descriptors");
        }
        Tensor best = ops::topk_sum_rows(ops::matmul(qn, ops::transpose(ops::normalize_rows(s))), k);
        columns.push_back(ops::reshape(ops::row_means(ops::reshape(best, {Q, descriptors_per_query})), {Q, 1}));
    }
    return ops::concat_cols(columns);
}

RelationModule RelationModule::create(std::size_t width, Rng& rng) {
    if (width == 0) throw ConfigError("relation module: zero width");
    const std::size_t in = 2 * width, hidden = 2 * width;
    auto he = [&](std::size_t rows, std::size_t cols) {
        std::vector<double> v(rows * cols);
        const double s = std::sqrt(2.0 / static_cast<double>(rows));
        for (double& x : v) x = s * rng.normal();
        return Tensor({rows, cols}, std::move(v), true);
    };
    RelationModule m;
    m.w1 = he(in, hidden);
    m.b1 = Tensor({hidden}, std::vector<double>(hidden, 0.0), true);
    m.w2 = he(hidden, 1);
    m.b2 = Tensor({1}, std::vector<double>(1, 0.0), true);
    return m;
}

std::vector<NamedTensor> RelationModule::parameters(const std::string& prefix) const {
    return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
}

Tensor relation_logits(const RelationModule& module, const Tensor& query_pooled, const Tensor& prototypes) {
    const std::size_t D = module.width();
    if (query_pooled.rank() != 2 || prototypes.rank() != 2 || query_pooled.dim(1) != D || prototypes.dim(1) != D) {
        throw DimensionError("relation: expected width " + std::to_string(D) + ", got queries " +
                             shape_str(query_pooled.shape()) + " and prototypes " + shape_str(prototypes.shape()));
    }
    const std::size_t Q = query_pooled.dim(0), N = prototypes.dim(0);
    std::vector<std::size_t> qi(Q * N), pi(Q * N);
    for (std::size_t q = 0; q < Q; ++q) {
        for (std::size_t j = 0; j < N; ++j) {
            qi[q * N + j] = q;
            pi[q * N + j] = j;
        }
    }
    const Tensor q = ops::gather_rows(ops::normalize_rows(query_pooled), qi);
    const Tensor p = ops::gather_rows(ops::normalize_rows(prototypes), pi);
    const Tensor diff = ops::sub(q, p);
    const Tensor parts[2] = {ops::mul(q, p), ops::mul(diff, diff)};
    Tensor pairs = ops::concat_cols(parts);
    Tensor hidden = ops::relu(ops::add_row_vector(ops::matmul(pairs, module.w1), module.b1));
    Tensor score = ops::add_row_vector(ops::matmul(hidden, module.w2), module.b2);
    return ops::reshape(ops::sigmoid(score), {Q, N});
}

Tensor text_logits(const Tensor& query_text, const Tensor& refined) {
    return ops::cosine_matrix(query_text, refined);
}

LogitsPair fuse(const Tensor& visual, const Tensor& text) {
    if (visual.shape() != text.shape()) {
        throw DimensionError("fuse: visual " + shape_str(visual.shape()) + " vs text " + shape_str(text.shape()));
    }
    return {visual, text, ops::add(visual, text)};
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 1 && logits.rank() != 2) {
        throw DimensionError("argmax_rows: expected [N] or [Q,N], got " + shape_str(logits.shape()));
    }
    const std::size_t rows = logits.rank() == 1 ? 1 : logits.dim(0);
    const std::size_t n = logits.rank() == 1 ? logits.dim(0) : logits.dim(1);
    if (n == 0) throw DimensionError("argmax_rows: no classes");
    auto v = logits.values();
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (v[r * n + j] > v[r * n + best]) best = j;
        }
        out[r] = best;
    }
    return out;
}

} // namespace lpn
