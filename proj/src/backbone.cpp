#include "rtcl/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtcl/adapters.hpp"
#include "rtcl/ops.hpp"

namespace rtcl {

void BackboneConfig::validate() const {
    if (image_h <= 0 || image_w <= 0 || channels <= 0 || patch <= 0 || dim <= 0 || heads <= 0 ||
        mlp_dim <= 0 || layers < 0) {
        throw ConfigError("backbone config fields must be positive (layers may be zero)");
    }
    if (image_h % patch != 0 || image_w % patch != 0) {
        throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " not divisible by patch size " + std::to_string(patch));
    }
    if (dim % heads != 0) {
        throw ConfigError("model dim " + std::to_string(dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
}

namespace {

Tensor gaussian(std::vector<int> shape, real sigma, Rng& rng, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = snap32(sigma * static_cast<real>(rng.normal()));
    return t;
}

}  // namespace

BackboneWeights BackboneWeights::init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneWeights w;
    w.cfg = cfg;
    const real proj_sigma = real(1) / std::sqrt(static_cast<real>(cfg.patch_dim()));
    const real attn_sigma = real(1) / std::sqrt(static_cast<real>(cfg.dim));
    const real mlp_sigma = real(1) / std::sqrt(static_cast<real>(cfg.mlp_dim));
    w.patch_proj = gaussian({cfg.patch_dim(), cfg.dim}, proj_sigma, rng, true);
    w.patch_bias = Tensor::zeros({cfg.dim}, true);
    w.cls_token = gaussian({1, cfg.dim}, real(0.02), rng, true);
    w.pos_embed = gaussian({cfg.seq_len(), cfg.dim}, real(0.02), rng, true);
    for (int l = 0; l < cfg.layers; ++l) {
        BlockWeights b;
        b.ln1_g = Tensor::full({cfg.dim}, real(1), true);
        b.ln1_b = Tensor::zeros({cfg.dim}, true);
        b.wq = gaussian({cfg.dim, cfg.dim}, attn_sigma, rng, true);
        b.bq = Tensor::zeros({cfg.dim}, true);
        b.wk = gaussian({cfg.dim, cfg.dim}, attn_sigma, rng, true);
        b.bk = Tensor::zeros({cfg.dim}, true);
        b.wv = gaussian({cfg.dim, cfg.dim}, attn_sigma, rng, true);
        b.bv = Tensor::zeros({cfg.dim}, true);
        b.wo = gaussian({cfg.dim, cfg.dim}, attn_sigma, rng, true);
        b.bo = Tensor::zeros({cfg.dim}, true);
        b.ln2_g = Tensor::full({cfg.dim}, real(1), true);
        b.ln2_b = Tensor::zeros({cfg.dim}, true);
        b.mlp_w1 = gaussian({cfg.dim, cfg.mlp_dim}, attn_sigma, rng, true);
        b.mlp_b1 = Tensor::zeros({cfg.mlp_dim}, true);
        b.mlp_w2 = gaussian({cfg.mlp_dim, cfg.dim}, mlp_sigma, rng, true);
        b.mlp_b2 = Tensor::zeros({cfg.dim}, true);
        w.blocks.push_back(std::move(b));
    }
    return w;
}

std::vector<Tensor> BackboneWeights::all_tensors() {
    std::vector<Tensor> out{patch_proj, patch_bias, cls_token, pos_embed};
    for (auto& b : blocks) {
        for (const Tensor& t : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                                b.ln2_g, b.ln2_b, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2}) {
            out.push_back(t);
        }
    }
    return out;
}

std::vector<Tensor> BackboneWeights::all_tensors() const {
    return const_cast<BackboneWeights*>(this)->all_tensors();
}

uint64_t FrozenBackbone::compute_digest() const {
    uint64_t h = kFnvBasis;
    for (const auto& t : w.all_tensors()) {
        for (int d : t.shape()) {
            const uint32_t u = static_cast<uint32_t>(d);
            h = fnv1a64(&u, sizeof(u), h);
        }
        for (real v : t.data()) {
            const float f = static_cast<float>(v);
            h = fnv1a64(&f, sizeof(f), h);
        }
    }
    return h;
}

void FrozenBackbone::verify_digest() const {
    if (compute_digest() != digest) {
        throw Error("frozen backbone weights changed: digest mismatch");
    }
}

FrozenBackbone freeze(BackboneWeights w) {
    for (auto& t : w.all_tensors()) {
        t.snap_f32();
        t.set_requires_grad(false);
    }
    FrozenBackbone fb;
    fb.w = std::move(w);
    fb.digest = fb.compute_digest();
    return fb;
}

Tensor patchify(const Tensor& image, const BackboneConfig& cfg) {
    cfg.validate();
    const std::int64_t expect =
        static_cast<std::int64_t>(cfg.image_h) * cfg.image_w * cfg.channels;
    if (image.size() != expect) {
        throw ShapeError("patchify: image " + dims_str(image.shape()) + " does not match configured " +
                         std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                         std::to_string(cfg.channels));
    }
    const int p = cfg.patch, gw = cfg.image_w / p, gh = cfg.image_h / p, c = cfg.channels;
    Tensor out = Tensor::zeros({cfg.n_patches(), cfg.patch_dim()});
    const auto& img = image.data();
    auto& dst = out.data();
    int row = 0;
    for (int py = 0; py < gh; ++py) {
        for (int px = 0; px < gw; ++px, ++row) {
            int k = 0;
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    for (int ch = 0; ch < c; ++ch, ++k) {
                        const std::size_t src =
                            ((static_cast<std::size_t>(py * p + y) * cfg.image_w) + (px * p + x)) * c + ch;
                        dst[static_cast<std::size_t>(row) * cfg.patch_dim() + k] = img[src];
                    }
                }
            }
        }
    }
    return out;
}

Tensor unpatchify(const Tensor& patches, const BackboneConfig& cfg) {
    cfg.validate();
    if (patches.rank() != 2 || patches.dim(0) != cfg.n_patches() || patches.dim(1) != cfg.patch_dim()) {
        throw ShapeError("unpatchify: expected [" + std::to_string(cfg.n_patches()) + "x" +
                         std::to_string(cfg.patch_dim()) + "], got " + dims_str(patches.shape()));
    }
    const int p = cfg.patch, gw = cfg.image_w / p, gh = cfg.image_h / p, c = cfg.channels;
    Tensor out = Tensor::zeros({cfg.image_h, cfg.image_w, cfg.channels});
    int row = 0;
    for (int py = 0; py < gh; ++py) {
        for (int px = 0; px < gw; ++px, ++row) {
            int k = 0;
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    for (int ch = 0; ch < c; ++ch, ++k) {
                        const std::size_t dst =
                            ((static_cast<std::size_t>(py * p + y) * cfg.image_w) + (px * p + x)) * c + ch;
                        out.data()[dst] =
                            patches.data()[static_cast<std::size_t>(row) * cfg.patch_dim() + k];
                    }
                }
            }
        }
    }
    return out;
}

TokenSequence embed(GradTape* tape, const Tensor& patches, const BackboneWeights& w) {
    if (patches.rank() != 2 || patches.dim(1) != w.cfg.patch_dim()) {
        throw ShapeError("embed: patch width " + dims_str(patches.shape()) + " does not match " +
                         std::to_string(w.cfg.patch_dim()));
    }
    Tensor projected = add_rowvec(tape, matmul(tape, patches, w.patch_proj), w.patch_bias);
    const Tensor parts[] = {w.cls_token, projected};
    Tensor tokens = concat_rows(tape, parts);
    return add(tape, tokens, w.pos_embed);
}

namespace {

Tensor projection(GradTape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
                  const AdapterSlot* slot, int layer, Proj p) {
    Tensor y = add_rowvec(tape, matmul(tape, x, w), b);
    if (slot != nullptr) {
        y = add(tape, y, lora_delta(tape, *slot, layer, p, x));
    }
    return y;
}

Tensor attention(GradTape* tape, const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
    const int dim = q.cols();
    const int hd = dim / heads;
    const real inv_sqrt = real(1) / std::sqrt(static_cast<real>(hd));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(tape, q, h * hd, hd);
        Tensor kh = slice_cols(tape, k, h * hd, hd);
        Tensor vh = slice_cols(tape, v, h * hd, hd);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
        Tensor weights = softmax(tape, scores, 1);
        outs.push_back(matmul(tape, weights, vh));
    }
    return concat_cols(tape, outs);
}

}  // namespace

TokenSequence backbone_forward(GradTape* tape, const TokenSequence& tokens, const BackboneWeights& w,
                               const AdapterContext* ctx) {
    if (tokens.rank() != 2 || tokens.dim(1) != w.cfg.dim) {
        throw ShapeError("backbone_forward: tokens " + dims_str(tokens.shape()) + " do not match dim " +
                         std::to_string(w.cfg.dim));
    }
    const AdapterSlot* slot = ctx != nullptr ? ctx->resolve() : nullptr;
    if (slot != nullptr && slot->layers != w.cfg.layers) {
        throw RoutingError("adapter slot covers " + std::to_string(slot->layers) + " layers, backbone has " +
                           std::to_string(w.cfg.layers));
    }
    Tensor x = tokens;
    for (int l = 0; l < w.cfg.layers; ++l) {
        const auto& b = w.blocks[static_cast<std::size_t>(l)];
        Tensor h1 = layer_norm(tape, x, b.ln1_g, b.ln1_b);
        Tensor q = projection(tape, h1, b.wq, b.bq, slot, l, Proj::Q);
        Tensor k = projection(tape, h1, b.wk, b.bk, slot, l, Proj::K);
        Tensor v = projection(tape, h1, b.wv, b.bv, slot, l, Proj::V);
        Tensor att = attention(tape, q, k, v, w.cfg.heads);
        Tensor o = projection(tape, att, b.wo, b.bo, slot, l, Proj::O);
        x = add(tape, x, o);
        Tensor h2 = layer_norm(tape, x, b.ln2_g, b.ln2_b);
        Tensor m1 = gelu(tape, add_rowvec(tape, matmul(tape, h2, b.mlp_w1), b.mlp_b1));
        Tensor m2 = add_rowvec(tape, matmul(tape, m1, b.mlp_w2), b.mlp_b2);
        x = add(tape, x, m2);
    }
    return x;
}

TokenSequence backbone_forward(GradTape* tape, const TokenSequence& tokens, const FrozenBackbone& fb,
                               const AdapterContext* ctx) {
    return backbone_forward(tape, tokens, fb.w, ctx);
}

TokenSequence embed_image(GradTape* tape, const Tensor& image, const BackboneWeights& w) {
    return embed(tape, patchify(image, w.cfg), w);
}

PretrainResult pretrain(const BackboneConfig& cfg, const PretrainData& pretext,
                        const std::vector<int>& continual_class_ids, int epochs, int batch_size,
                        const AdamWConfig& opt, Rng& rng) {
    cfg.validate();
    for (int cid : pretext.class_ids) {
        if (std::find(continual_class_ids.begin(), continual_class_ids.end(), cid) !=
            continual_class_ids.end()) {
            throw ConfigError("pretext class " + std::to_string(cid) +
                              " overlaps the continual task classes");
        }
    }
    if (pretext.images.size() != pretext.labels.size()) {
        throw ConfigError("pretext images and labels differ in length");
    }
    if (epochs > 0 && (pretext.images.empty() || pretext.n_classes < 2)) {
        throw ConfigError("pretraining needs a labeled pretext set with at least two classes");
    }

    BackboneWeights w = BackboneWeights::init(cfg, rng);
    Tensor head_w = gaussian({cfg.dim, pretext.n_classes > 0 ? pretext.n_classes : 1}, real(0.02), rng, true);
    Tensor head_b = Tensor::zeros({pretext.n_classes > 0 ? pretext.n_classes : 1}, true);

    std::vector<Tensor> params = w.all_tensors();
    params.push_back(head_w);
    params.push_back(head_b);
    AdamW optimizer(params, opt);

    PretrainResult result;
    const int n = static_cast<int>(pretext.images.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    auto forward_logits = [&](GradTape* tape, int idx) {
        TokenSequence tokens = embed_image(tape, pretext.images[static_cast<std::size_t>(idx)], w);
        Tensor out = backbone_forward(tape, tokens, w, nullptr);
        Tensor cls = slice_rows(tape, out, 0, 1);
        return add_rowvec(tape, matmul(tape, cls, head_w), head_b);
    };

    bool first_step = true;
    for (int e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += batch_size) {
            const int stop = std::min(n, start + batch_size);
            GradTape tape;
            std::vector<Tensor> rows;
            std::vector<int> batch_labels;
            rows.reserve(static_cast<std::size_t>(stop - start));
            for (int i = start; i < stop; ++i) {
                const int idx = order[static_cast<std::size_t>(i)];
                rows.push_back(forward_logits(&tape, idx));
                batch_labels.push_back(pretext.labels[static_cast<std::size_t>(idx)]);
            }
            Tensor logits = concat_rows(&tape, rows);
            Tensor loss = cross_entropy(&tape, logits, batch_labels);
            if (first_step) {
                result.initial_loss = loss.item();
                first_step = false;
            }
            result.final_loss = loss.item();
            tape.backward(loss);
            optimizer.step();
            optimizer.zero_grad();
        }
    }

    if (n > 0 && pretext.n_classes > 0) {
        int correct = 0;
        for (int i = 0; i < n; ++i) {
            Tensor logits = forward_logits(nullptr, i);
            int best = 0;
            for (int j = 1; j < logits.cols(); ++j)
                if (logits.at(0, j) > logits.at(0, best)) best = j;
            if (best == pretext.labels[static_cast<std::size_t>(i)]) ++correct;
        }
        result.train_accuracy = static_cast<real>(correct) / static_cast<real>(n);
    }

    result.backbone = freeze(std::move(w));
    return result;
}

}  // namespace rtcl
