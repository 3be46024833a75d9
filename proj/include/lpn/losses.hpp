#pragma once

#include <span>

#include "lpn/tensor.hpp"

namespace lpn {

// softmax(alpha * s) per row; s is [N] or [M,N].
Tensor posterior(const Tensor& logits, double alpha);

// -mean_i log p[i, y_i] over rows of a probability matrix [M,N].
Tensor cross_entropy(const Tensor& probabilities, std::span<const std::size_t> labels);

// Same value as cross_entropy(posterior(logits, alpha), labels) but computed
// through log-softmax, so it stays finite for confident predictions.
Tensor classification_loss(const Tensor& logits, std::span<const std::size_t> labels, double alpha);

enum class ContrastiveMode {
    ClassLevel,  // positive/negatives are the N class-level features
    InBatch,     // positives are other text features of the same class
};

struct ContrastiveOptions {
    double tau = 0.1;
    bool normalize = true;  // cosine instead of raw dot products
    ContrastiveMode mode = ContrastiveMode::ClassLevel;
};

/// Supervised contrastive loss over text features [M,d] with labels in
/// [0,N) against class-level features [N,d].
///
/// ClassLevel: mean over anchors of -log softmax_j(f_i . g_j / tau)[y_i].
/// InBatch: for each anchor with at least one same-class partner, the mean
/// over partners p of -log(exp(s_ip) / sum_{a != i} exp(s_ia)), averaged over
/// such anchors; class_features is unused.
Tensor supervised_contrastive(const Tensor& text_features, std::span<const std::size_t> labels,
                              const Tensor& class_features, const ContrastiveOptions& options);

// L_c + beta * L_scl.
Tensor total_loss(const Tensor& classification, const Tensor& contrastive, double beta);

} // namespace lpn
