#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "rtcl/backbone.hpp"
#include "rtcl/dataset.hpp"
#include "rtcl/ops.hpp"

using namespace rtcl;
using namespace rtcl::testing;

TEST_CASE("patchify shapes, constancy, and exact round trip") {
    BackboneConfig cfg;  // 28x28, patch 7
    Rng rng(1);
    Tensor img = random_tensor({28, 28, 1}, rng);
    Tensor patches = patchify(img, cfg);
    CHECK(patches.rows() == 16);
    CHECK(patches.cols() == 49);

    BackboneConfig small;
    small.image_h = small.image_w = 4;
    small.patch = 2;
    small.dim = 8;
    small.heads = 2;
    Tensor constant = Tensor::full({4, 4, 1}, real(0.37));
    Tensor cp = patchify(constant, small);
    CHECK(cp.rows() == 4);
    for (int r = 1; r < 4; ++r)
        for (int c = 0; c < 4; ++c) CHECK(cp.at(r, c) == cp.at(0, c));

    BackboneConfig cfg8;
    cfg8.image_h = cfg8.image_w = 8;
    cfg8.patch = 4;
    cfg8.dim = 8;
    cfg8.heads = 2;
    Tensor img8 = random_tensor({8, 8, 1}, rng);
    Tensor back = unpatchify(patchify(img8, cfg8), cfg8);
    CHECK(max_abs_diff(back, img8) == 0);

    BackboneConfig bad;
    bad.patch = 5;  // 28 % 5 != 0
    CHECK_THROWS_AS(patchify(img, bad), ConfigError);
}

TEST_CASE("embed: zero weights collapse to class token, lengths, and recovery") {
    BackboneConfig cfg;
    Rng rng(2);
    BackboneWeights w = BackboneWeights::init(cfg, rng);

    SUBCASE("zero projection and positions collapse every row to the class token") {
        for (auto& v : w.patch_proj.data()) v = 0;
        for (auto& v : w.patch_bias.data()) v = 0;
        for (auto& v : w.pos_embed.data()) v = 0;
        for (auto& v : w.cls_token.data()) v = 0;
        Tensor img = random_tensor({28, 28, 1}, rng);
        Tensor tokens = embed(nullptr, patchify(img, cfg), w);
        CHECK(tokens.rows() == 17);
        for (int r = 0; r < 17; ++r)
            for (int c = 0; c < cfg.dim; ++c) CHECK(tokens.at(r, c) == w.cls_token.at(0, c));
    }

    SUBCASE("sixteen patches in, seventeen tokens out") {
        Tensor img = random_tensor({28, 28, 1}, rng);
        Tensor patches = patchify(img, cfg);
        CHECK(patches.rows() == 16);
        CHECK(embed(nullptr, patches, w).rows() == 17);
    }

    SUBCASE("identity-like projection recovers one-hot patches in leading coordinates") {
        for (auto& v : w.patch_proj.data()) v = 0;
        for (auto& v : w.patch_bias.data()) v = 0;
        for (auto& v : w.pos_embed.data()) v = 0;
        for (int i = 0; i < cfg.dim; ++i) w.patch_proj.at(i, i) = 1;  // patch_dim >= dim here
        Tensor patches = Tensor::zeros({cfg.n_patches(), cfg.patch_dim()});
        for (int p = 0; p < cfg.n_patches(); ++p) patches.at(p, p % cfg.dim) = 1;
        Tensor tokens = embed(nullptr, patches, w);
        for (int p = 0; p < cfg.n_patches(); ++p) {
            for (int c = 0; c < cfg.dim; ++c) {
                CHECK(tokens.at(p + 1, c) == (c == p % cfg.dim ? 1 : 0));
            }
        }
    }
}

TEST_CASE("backbone_forward: zero-delta equivalence, empty composition, determinism") {
    FrozenBackbone fb = tiny_backbone(3);
    Rng rng(4);
    Tensor tokens = random_tokens(fb.w.cfg, rng);

    SUBCASE("fresh adapter changes nothing") {
        Tensor plain = backbone_forward(nullptr, tokens, fb, nullptr);
        Rng arng(5);
        AdapterSlot slot = new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, arng);
        AdapterContext ctx = AdapterContext::for_slot(slot);
        Tensor adapted = backbone_forward(nullptr, tokens, fb, &ctx);
        CHECK(max_abs_diff(plain, adapted) < 1e-6);
    }

    SUBCASE("zero layers pass tokens through") {
        FrozenBackbone fb0 = tiny_backbone(3, 0);
        Tensor t0 = random_tokens(fb0.w.cfg, rng);
        Tensor out = backbone_forward(nullptr, t0, fb0, nullptr);
        CHECK(max_abs_diff(out, t0) == 0);
    }

    SUBCASE("two calls are bitwise identical and preserve shape") {
        Tensor a = backbone_forward(nullptr, tokens, fb, nullptr);
        Tensor b = backbone_forward(nullptr, tokens, fb, nullptr);
        CHECK(a.shape() == tokens.shape());
        CHECK(a.data() == b.data());
    }
}

TEST_CASE("pretrain: no-op freeze, convergence, digest stability, pretext overlap") {
    BackboneConfig cfg;
    AdamWConfig opt;

    SUBCASE("zero epochs freeze the initialization") {
        PretrainData empty;
        Rng rng(11);
        PretrainResult res = pretrain(cfg, empty, {0, 1}, 0, 32, opt, rng);
        Rng rng2(11);
        BackboneWeights w = BackboneWeights::init(cfg, rng2);
        FrozenBackbone direct = freeze(std::move(w));
        CHECK(res.backbone.digest == direct.digest);
        res.backbone.verify_digest();
    }

    SUBCASE("two-class pretext reaches over 90 percent within 20 epochs") {
        Rng data_rng(12);
        PretrainData pretext;
        pretext.n_classes = 2;
        pretext.class_ids = {10, 11};
        for (int cls : {10, 11}) {
            for (int i = 0; i < 40; ++i) {
                pretext.images.push_back(glyph_image(cls, data_rng));
                pretext.labels.push_back(cls - 10);
            }
        }
        Rng rng(13);
        PretrainResult res = pretrain(cfg, pretext, {0, 1, 2}, 20, 32, opt, rng);
        CHECK(res.train_accuracy > 0.9);
        CHECK(res.final_loss < res.initial_loss);
    }

    SUBCASE("identical seeded runs produce identical digests") {
        Rng data_rng(14);
        PretrainData pretext;
        pretext.n_classes = 2;
        pretext.class_ids = {10, 11};
        for (int cls : {10, 11}) {
            for (int i = 0; i < 12; ++i) {
                pretext.images.push_back(glyph_image(cls, data_rng));
                pretext.labels.push_back(cls - 10);
            }
        }
        Rng r1(15), r2(15);
        PretrainResult a = pretrain(cfg, pretext, {0}, 3, 16, opt, r1);
        PretrainResult b = pretrain(cfg, pretext, {0}, 3, 16, opt, r2);
        CHECK(a.backbone.digest == b.backbone.digest);
    }

    SUBCASE("pretext classes overlapping the stream raise a config error") {
        PretrainData pretext;
        pretext.n_classes = 2;
        pretext.class_ids = {3, 11};
        Rng rng(16);
        CHECK_THROWS_AS(pretrain(cfg, pretext, {0, 1, 2, 3}, 1, 32, opt, rng), ConfigError);
    }
}

TEST_CASE("freeze integrity: digest detects any weight change") {
    FrozenBackbone fb = tiny_backbone(21);
    fb.verify_digest();
    fb.w.blocks[0].wq.data()[5] += real(1e-4);
    CHECK_THROWS_AS(fb.verify_digest(), Error);
}
