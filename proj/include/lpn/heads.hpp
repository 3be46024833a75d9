#pragma once

#include <string>
#include <vector>

#include "lpn/gradcheck.hpp"
#include "lpn/rng.hpp"
#include "lpn/tensor.hpp"

namespace lpn {

// Scalar: one sigmoid map per spatial cell, broadcast over channels.
// PerChannel: elementwise sigmoid(f_v[c] * K[c]).
enum class AlignMode { Scalar, PerChannel };

struct Alignment {
    Tensor aligned;    // same shape as the input map
    Tensor attention;  // [H,W] (Scalar) or [D,H,W] (PerChannel), entries in (0,1)
};

/// f_v [D,H,W] gated by sigmoid of a 1x1 convolution with `kernel` [D].
Alignment language_align(const Tensor& map, const Tensor& kernel, AlignMode mode = AlignMode::Scalar);

/// Class kernels [N,D] from class features [N,d]. With d == D the features
/// are used as-is; otherwise `align_map` [d,D] must be given.
Tensor class_kernels(const Tensor& class_features, const Tensor* align_map = nullptr);

// Mean of K support text features [K,d] -> [d].
Tensor text_prototype(const Tensor& support_features);

/// gamma*c + (1-gamma)*f_cl; gamma of exactly 1 or 0 returns the matching
/// operand unchanged. Works on [d] vectors or [N,d] matrices.
Tensor refine(const Tensor& prototype, const Tensor& class_feature, double gamma);

enum class MetricKind { PrototypeCosine, Dn4, Relation };

MetricKind parse_metric(const std::string& name);
std::string metric_name(MetricKind kind);

/// Class means of class-major rows: [N*shot, w] -> [N, w].
Tensor class_means(const Tensor& rows, std::size_t way, std::size_t shot);

// Cosine between pooled queries [Q,D] and class prototypes [N,D] -> [Q,N].
Tensor prototype_logits(const Tensor& query_pooled, const Tensor& prototypes);

/// Image-to-class local descriptor measure. query_descriptors [Q*T, D] holds
/// T descriptors per query; support_descriptors[j] is [K*T, D] for class j.
/// Each query descriptor sums its k best cosines against class j, and the
/// sums are averaged over the query's descriptors -> [Q,N].
Tensor dn4_logits(const Tensor& query_descriptors, std::size_t descriptors_per_query,
                  const std::vector<Tensor>& support_descriptors, std::size_t k);

struct RelationModule {
    Tensor w1, b1;  // [2D, hidden], [hidden]
    Tensor w2, b2;  // [hidden, 1], [1]

    static RelationModule create(std::size_t width, Rng& rng);
    std::size_t width() const { return w1.dim(0) / 2; }
    std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

// sigmoid(MLP([q * p, (q - p)^2])) over unit-normalized queries q and prototypes p -> [Q,N] in [0,1].
Tensor relation_logits(const RelationModule& module, const Tensor& query_pooled, const Tensor& prototypes);

// Cosine between query text features [Q,d] and refined prototypes [N,d].
Tensor text_logits(const Tensor& query_text, const Tensor& refined);

struct LogitsPair {
    Tensor visual;  // V_s [Q,N]
    Tensor text;    // T_s [Q,N]
    Tensor fused;   // V_s + T_s
};

LogitsPair fuse(const Tensor& visual, const Tensor& text);

// Row-wise argmax of [Q,N] (or [N]); ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

} // namespace lpn
