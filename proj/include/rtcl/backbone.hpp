#pragma once

#include <cstdint>
#include <vector>

#include "rtcl/optim.hpp"
#include "rtcl/rng.hpp"
#include "rtcl/tensor.hpp"

namespace rtcl {

struct AdapterContext;

// A token sequence is a [seq_len x dim] tensor whose leading row is the
// class token.
using TokenSequence = Tensor;

struct BackboneConfig {
    int image_h = 28;
    int image_w = 28;
    int channels = 1;
    int patch = 7;
    int dim = 32;
    int layers = 2;
    int heads = 4;
    int mlp_dim = 64;

    int n_patches() const { return (image_h / patch) * (image_w / patch); }
    int seq_len() const { return n_patches() + 1; }
    int patch_dim() const { return patch * patch * channels; }
    int head_dim() const { return dim / heads; }

    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct BlockWeights {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct BackboneWeights {
    BackboneConfig cfg;
    Tensor patch_proj;  // [patch_dim x dim]
    Tensor patch_bias;  // [dim]
    Tensor cls_token;   // [1 x dim]
    Tensor pos_embed;   // [seq_len x dim]
    std::vector<BlockWeights> blocks;

    static BackboneWeights init(const BackboneConfig& cfg, Rng& rng);

    // Fixed serialization/digest order.
    std::vector<Tensor> all_tensors();
    std::vector<Tensor> all_tensors() const;
};

// Weights with requires_grad off everywhere and a content digest taken at
// freeze time. Any later change to the weights is detectable by re-hashing.
struct FrozenBackbone {
    BackboneWeights w;
    uint64_t digest = 0;

    uint64_t compute_digest() const;
    void verify_digest() const;  // throws Error on mismatch
};

FrozenBackbone freeze(BackboneWeights w);

// Splits an [H x W x C] image into non-overlapping flattened patches, one per
// row, in row-major patch order. Lossless: unpatchify inverts it.
Tensor patchify(const Tensor& image, const BackboneConfig& cfg);
Tensor unpatchify(const Tensor& patches, const BackboneConfig& cfg);

// Linear patch projection, class token prepended, positional embeddings added.
TokenSequence embed(GradTape* tape, const Tensor& patches, const BackboneWeights& w);

// Runs the attention blocks. With a context, every Q/K/V/O projection adds the
// gated low-rank delta of the active adapter slot.
TokenSequence backbone_forward(GradTape* tape, const TokenSequence& tokens, const BackboneWeights& w,
                               const AdapterContext* ctx = nullptr);
TokenSequence backbone_forward(GradTape* tape, const TokenSequence& tokens, const FrozenBackbone& fb,
                               const AdapterContext* ctx = nullptr);

// patchify + embed on a raw image, the standard ingestion path.
TokenSequence embed_image(GradTape* tape, const Tensor& image, const BackboneWeights& w);

struct PretrainResult {
    FrozenBackbone backbone;
    real initial_loss = 0;
    real final_loss = 0;
    real train_accuracy = 0;
};

struct PretrainData {
    std::vector<Tensor> images;      // [H x W x C] each
    std::vector<int> labels;         // local 0..n_classes-1
    std::vector<int> class_ids;      // global ids of the pretext classes
    int n_classes = 0;
};

// Supervised pretraining on a pretext class set, then freeze. The pretext
// classes must be disjoint from the continual-task classes.
PretrainResult pretrain(const BackboneConfig& cfg, const PretrainData& pretext,
                        const std::vector<int>& continual_class_ids, int epochs, int batch_size,
                        const AdamWConfig& opt, Rng& rng);

}  // namespace rtcl
