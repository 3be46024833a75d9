#pragma once

#include <string>
#include <vector>

#include "lpn/gradcheck.hpp"
#include "lpn/rng.hpp"
#include "lpn/tensor.hpp"

namespace lpn {

/// Single-head scaled dot-product attention:
/// softmax(q k^T / sqrt(width)) v with q [a,w], k [b,w], v [b,w'].
/// If `weights` is non-null it receives the [a,b] attention matrix.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* weights = nullptr);

// Per-head projections stored side by side: head i owns columns
// [i*head_dim, (i+1)*head_dim) of wq/wk/wv.
struct AttentionWeights {
    std::size_t heads = 1;
    Tensor wq, wk, wv, wo;  // [width, width] each

    static AttentionWeights create(std::size_t width, std::size_t heads, Rng& rng);
    std::size_t width() const { return wq.dim(0); }
    std::size_t head_dim() const { return width() / heads; }
    std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

/// Concat_i(attention(q Wq_i, k Wk_i, v Wv_i)) Wo. `mean_weights`, when
/// given, receives the head-averaged [a,b] attention matrix (values only).
Tensor multi_head(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionWeights& w,
                  std::vector<double>* mean_weights = nullptr);

struct DecoderOptions {
    std::size_t visual_width = 16;  // D
    std::size_t text_width = 16;    // d
    std::size_t heads = 4;
    std::size_t queries = 4;        // learnable query count
    bool residual = false;
    bool layer_norm = false;
};

/// Language-guided decoder: learnable queries -> self-attention ->
/// cross-attention over an image's visual tokens (width D) -> linear map to
/// width d -> cross-attention over the episode's class-level features ->
/// mean over queries.
struct LaGDBlock {
    DecoderOptions options;
    Tensor queries;                 // [M_q, D]
    AttentionWeights self_attn;     // width D
    AttentionWeights cross_visual;  // width D
    Tensor channel_map;             // [D, d], no bias
    AttentionWeights cross_text;    // width d

    static LaGDBlock create(const DecoderOptions& options, Rng& rng);
    std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

// Head-averaged attention of the two cross-attention stages for one image.
struct AttentionMaps {
    std::vector<double> visual;  // [M_q x tokens], row-major
    std::vector<double> text;    // [M_q x N]
    std::size_t rows = 0, tokens = 0, classes = 0;
};

/// Text features for a batch of images: maps [B,D,Hf,Wf] (or one map
/// [D,Hf,Wf]), class features [N,d] -> [B,d]. The query self-attention is
/// image independent and computed once per call. `maps_out`, when given,
/// receives one AttentionMaps per image.
Tensor decode_many(const LaGDBlock& block, const Tensor& maps, const Tensor& class_features,
                   std::vector<AttentionMaps>* maps_out = nullptr);

// One image: [D,Hf,Wf] -> [d].
Tensor decode(const LaGDBlock& block, const Tensor& map, const Tensor& class_features);

AttentionMaps attention_maps(const LaGDBlock& block, const Tensor& map, const Tensor& class_features);

} // namespace lpn
