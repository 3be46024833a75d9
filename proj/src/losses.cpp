#include "lpn/losses.hpp"

#include <cmath>

#include "lpn/error.hpp"
#include "lpn/ops.hpp"

namespace lpn {

namespace {

Tensor as_matrix(const Tensor& t) {
    if (t.rank() == 1) return ops::reshape(t, Shape{1, t.dim(0)});
    if (t.rank() != 2) throw DimensionError("loss: expected [N] or [M,N], got " + shape_str(t.shape()));
    return t;
}

void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t classes) {
    if (labels.size() != rows) {
        throw DimensionError("loss: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    for (std::size_t y : labels) {
        if (y >= classes) {
            throw LabelError("loss: label " + std::to_string(y) + " out of range for " +
                             std::to_string(classes) + " classes");
        }
    }
}

} // namespace

Tensor posterior(const Tensor& logits, double alpha) {
    if (logits.rank() == 1) return ops::softmax(logits, alpha);
    return ops::softmax_rows(as_matrix(logits), alpha);
}

Tensor cross_entropy(const Tensor& probabilities, std::span<const std::size_t> labels) {
    Tensor p = as_matrix(probabilities);
    check_labels(labels, p.dim(0), p.dim(1));
    return ops::scale(ops::mean(ops::log(ops::pick(p, labels))), -1.0);
}

Tensor classification_loss(const Tensor& logits, std::span<const std::size_t> labels, double alpha) {
    Tensor s = as_matrix(logits);
    check_labels(labels, s.dim(0), s.dim(1));
    return ops::scale(ops::mean(ops::pick(ops::log_softmax_rows(s, alpha), labels)), -1.0);
}

Tensor supervised_contrastive(const Tensor& text_features, std::span<const std::size_t> labels,
                              const Tensor& class_features, const ContrastiveOptions& options) {
    if (!(options.tau > 0.0)) {
        throw ConfigError("contrastive loss: tau must be positive, got " + std::to_string(options.tau));
    }
    if (text_features.rank() != 2 || text_features.dim(0) == 0) {
        throw DimensionError("contrastive loss: expected non-empty [M,d] features, got " +
                             shape_str(text_features.shape()));
    }
    const std::size_t m = text_features.dim(0);
    Tensor f = options.normalize ? ops::normalize_rows(text_features) : text_features;

    if (options.mode == ContrastiveMode::ClassLevel) {
        if (class_features.rank() != 2 || class_features.dim(1) != text_features.dim(1)) {
            throw DimensionError("contrastive loss: class features " + shape_str(class_features.shape()) +
                                 " do not match text features " + shape_str(text_features.shape()));
        }
        check_labels(labels, m, class_features.dim(0));
        Tensor g = options.normalize ? ops::normalize_rows(class_features) : class_features;
        Tensor sims = ops::matmul(f, ops::transpose(g));
        return ops::scale(ops::mean(ops::pick(ops::log_softmax_rows(sims, 1.0 / options.tau), labels)),
                          -1.0);
    }

    if (labels.size() != m) {
        throw DimensionError("contrastive loss: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(m) + " features");
    }
    // Self-similarity is pushed far below every other logit so it drops out
    // of the denominator without producing an infinity.
    std::vector<double> mask(m * m, 0.0), weight(m * m, 0.0);
    std::size_t anchors = 0;
    for (std::size_t i = 0; i < m; ++i) {
        mask[i * m + i] = -1e4 * options.tau;
        std::size_t positives = 0;
        for (std::size_t j = 0; j < m; ++j) positives += (j != i && labels[j] == labels[i]);
        if (positives == 0) continue;
        ++anchors;
        for (std::size_t j = 0; j < m; ++j) {
            if (j != i && labels[j] == labels[i]) weight[i * m + j] = 1.0 / static_cast<double>(positives);
        }
    }
    if (anchors == 0) return ops::scale(ops::sum(f), 0.0);
    Tensor sims = ops::add(ops::matmul(f, ops::transpose(f)), Tensor(Shape{m, m}, std::move(mask)));
    Tensor logp = ops::log_softmax_rows(sims, 1.0 / options.tau);
    Tensor picked = ops::sum(ops::mul(logp, Tensor(Shape{m, m}, std::move(weight))));
    return ops::scale(picked, -1.0 / static_cast<double>(anchors));
}

Tensor total_loss(const Tensor& classification, const Tensor& contrastive, double beta) {
    return ops::add(classification, ops::scale(contrastive, beta));
}

} // namespace lpn
