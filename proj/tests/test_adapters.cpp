#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "rtcl/adapters.hpp"
#include "rtcl/ops.hpp"

using namespace rtcl;
using namespace rtcl::testing;

namespace {

std::vector<TaskSample> separable_toy(const BackboneConfig& cfg, int per_class, uint64_t seed,
                                      const std::vector<int>& classes) {
    Rng rng(seed);
    Tensor offset = random_tensor({cfg.seq_len(), cfg.dim}, rng);
    std::vector<TaskSample> data;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const real sign = c == 0 ? real(1) : real(-1);
        for (int i = 0; i < per_class; ++i) {
            Tensor tokens = random_tensor({cfg.seq_len(), cfg.dim}, rng, real(0.3));
            for (std::size_t k = 0; k < tokens.data().size(); ++k) {
                tokens.data()[k] += sign * offset.data()[k];
            }
            data.push_back({tokens, classes[c]});
        }
    }
    return data;
}

std::vector<std::vector<real>> param_bytes(const AdapterSlot& slot) {
    std::vector<std::vector<real>> out;
    for (const auto& t : slot.params()) out.push_back(t.data());
    return out;
}

}  // namespace

TEST_CASE("new_adapter: zero delta, parameter arithmetic, seeded determinism") {
    FrozenBackbone fb = tiny_backbone(31);
    Rng data_rng(32);
    Tensor tokens = random_tokens(fb.w.cfg, data_rng);

    Rng r1(33);
    AdapterSlot slot = new_adapter(1, 2, 32, {4, 9}, r1);
    CHECK(adapter_lora_param_count(slot) == 512);       // 4*2*(32*1 + 1*32)
    CHECK(adapter_head_param_count(slot) == 66);        // 32*2 + 2
    CHECK(adapter_param_count(slot) == 578);

    AdapterContext ctx = AdapterContext::for_slot(slot);
    Tensor with = backbone_forward(nullptr, tokens, fb, &ctx);
    Tensor without = backbone_forward(nullptr, tokens, fb, nullptr);
    CHECK(max_abs_diff(with, without) < 1e-6);

    Rng r2(33);
    AdapterSlot again = new_adapter(1, 2, 32, {4, 9}, r2);
    CHECK(param_bytes(slot) == param_bytes(again));

    Rng r3(34);
    CHECK_THROWS_AS(new_adapter(0, 2, 32, {1}, r3), ConfigError);
    CHECK_THROWS_AS(new_adapter(1, 2, 32, {}, r3), ConfigError);
    CHECK_THROWS_AS(new_adapter(1, 2, 32, {1, 1}, r3), ConfigError);
}

TEST_CASE("adapted_projection: frozen path, zero delta, unfused two-step oracle") {
    Rng rng(41);
    const int dim = 8;
    Tensor w = random_tensor({dim, dim}, rng);
    Tensor v = random_tensor({3, dim}, rng);
    AdapterBank bank(-1);
    Rng ar(42);
    AdapterSlot s0 = new_adapter(2, 1, dim, {0}, ar);
    AdapterSlot s1 = new_adapter(2, 1, dim, {1}, ar);
    // give slot 1 a real delta
    for (auto& x : s1.lora[0][0].up.data()) x = static_cast<real>(ar.normal());
    bank.add(std::move(s0));
    bank.add(std::move(s1));

    Tensor frozen = matmul(nullptr, v, w);

    SUBCASE("all-zero gate returns the frozen product exactly") {
        const std::vector<real> gate{0, 0};
        Tensor out = adapted_projection(nullptr, w, v, gate, bank, 0, Proj::Q);
        CHECK(max_abs_diff(out, frozen) == 0);
    }

    SUBCASE("gate on a zero-up slot returns the frozen product exactly") {
        const std::vector<real> gate{1, 0};
        Tensor out = adapted_projection(nullptr, w, v, gate, bank, 0, Proj::Q);
        CHECK(max_abs_diff(out, frozen) == 0);
    }

    SUBCASE("gate on a live slot matches the explicit two-step product") {
        const std::vector<real> gate{0, 1};
        Tensor out = adapted_projection(nullptr, w, v, gate, bank, 0, Proj::Q);
        const auto& pair = bank.at(1).pair(0, Proj::Q);
        Tensor delta = matmul(nullptr, matmul(nullptr, v, pair.down), pair.up);
        Tensor expect = add(nullptr, frozen, delta);
        CHECK(max_abs_diff(out, expect) < 1e-12);
    }

    SUBCASE("gate contract violations") {
        CHECK_THROWS_AS(adapted_projection(nullptr, w, v, std::vector<real>{1, 1}, bank, 0, Proj::Q),
                        RoutingError);
        CHECK_THROWS_AS(adapted_projection(nullptr, w, v, std::vector<real>{0.5, 0.5}, bank, 0, Proj::Q),
                        RoutingError);
        CHECK_THROWS_AS(adapted_projection(nullptr, w, v, std::vector<real>{1}, bank, 0, Proj::Q),
                        RoutingError);
    }
}

TEST_CASE("train_adapter: no-op epochs, separable convergence, frozen backbone") {
    FrozenBackbone fb = tiny_backbone(51);
    const auto data = separable_toy(fb.w.cfg, 30, 52, {0, 1});

    SUBCASE("zero epochs leave the slot unchanged") {
        Rng ar(53);
        AdapterSlot slot = new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
        const auto before = param_bytes(slot);
        Rng tr(54);
        AdapterTrainConfig tc;
        tc.epochs = 0;
        train_adapter(slot, data, fb, tc, tr);
        CHECK(param_bytes(slot) == before);
    }

    SUBCASE("linearly separable task exceeds 95 percent within 50 epochs at lr 0.001") {
        Rng ar(55);
        AdapterSlot slot = new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
        Rng tr(56);
        AdapterTrainConfig tc;
        tc.lr = real(0.001);
        tc.epochs = 50;
        tc.batch = 16;
        const TrainStats stats = train_adapter(slot, data, fb, tc, tr);
        CHECK(stats.final_loss < stats.initial_loss);
        int correct = 0;
        AdapterBank bank(-1);
        const int id = bank.add(std::move(slot));
        const auto gate = one_hot_gate(bank, id);
        for (const auto& sample : data) {
            if (predict(sample.tokens, gate, bank, fb).label == sample.label) ++correct;
        }
        CHECK(static_cast<double>(correct) / static_cast<double>(data.size()) > 0.95);
        fb.verify_digest();
    }

    SUBCASE("labels outside the head raise a label error") {
        Rng ar(57);
        AdapterSlot slot = new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
        auto bad = data;
        bad[0].label = 7;
        Rng tr(58);
        AdapterTrainConfig tc;
        CHECK_THROWS_AS(train_adapter(slot, bad, fb, tc, tr), LabelError);
    }
}

TEST_CASE("predict: saturation, normalization, invariance to non-gated slots") {
    FrozenBackbone fb = tiny_backbone(61);
    Rng rng(62);
    Tensor tokens = random_tokens(fb.w.cfg, rng);

    AdapterBank bank(-1);
    Rng ar(63);
    AdapterSlot slot = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {3, 8}, ar);
    // saturate the head toward the second class
    Tensor cls = slice_rows(nullptr, backbone_forward(nullptr, tokens, fb, nullptr), 0, 1);
    for (auto& v : slot.head_w.data()) v = 0;
    slot.head_b.data()[0] = 0;
    slot.head_b.data()[1] = 40;
    const int id = bank.add(std::move(slot));

    const auto gate = one_hot_gate(bank, id);
    const Prediction p = predict(tokens, gate, bank, fb);
    CHECK(p.label == 8);
    CHECK(p.probs[1] == doctest::Approx(1.0).epsilon(1e-9));
    real total = 0;
    for (real v : p.probs) total += v;
    CHECK(std::abs(total - 1) < 1e-6);

    // adding more, non-gated slots must not change the prediction
    AdapterSlot other = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {1, 2}, ar);
    for (auto& v : other.lora[0][1].up.data()) v = static_cast<real>(ar.normal());
    bank.add(std::move(other));
    const auto gate2 = one_hot_gate(bank, id);
    const Prediction p2 = predict(tokens, gate2, bank, fb);
    CHECK(p2.label == p.label);
    CHECK(p2.probs == p.probs);

    AdapterBank empty(-1);
    CHECK_THROWS_AS(predict(tokens, std::vector<real>{}, empty, fb), RoutingError);
    (void)cls;
}

TEST_CASE("adapter_param_count equals the gradient-touch audit") {
    FrozenBackbone fb = tiny_backbone(71);
    const auto data = separable_toy(fb.w.cfg, 6, 72, {0, 1});
    Rng ar(73);
    AdapterSlot slot = new_adapter(3, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);

    // a few steps first, so the up matrices are nonzero and gradients reach down
    Rng tr(74);
    AdapterTrainConfig tc;
    tc.epochs = 3;
    tc.batch = 4;
    train_adapter(slot, data, fb, tc, tr);

    for (auto& p : slot.params()) p.zero_grad();
    GradTape tape;
    std::vector<Tensor> rows;
    std::vector<int> labels;
    for (const auto& s : data) {
        rows.push_back(slot_logits(&tape, s.tokens, slot, fb));
        labels.push_back(slot.class_index(s.label));
    }
    Tensor loss = cross_entropy(&tape, concat_rows(&tape, rows), labels);
    tape.backward(loss);

    long touched = 0;
    for (const auto& p : slot.params()) {
        for (real g : p.grad()) {
            if (g != real(0)) ++touched;
        }
    }
    CHECK(touched == adapter_param_count(slot));
    CHECK(adapter_param_count(AdapterBank(-1)) == 0);
}

TEST_CASE("task isolation: training one slot leaves others and the backbone bitwise unchanged") {
    FrozenBackbone fb = tiny_backbone(81);
    const uint64_t digest_before = fb.digest;
    const auto data0 = separable_toy(fb.w.cfg, 10, 82, {0, 1});
    const auto data1 = separable_toy(fb.w.cfg, 10, 83, {2, 3});

    AdapterBank bank(-1);
    Rng ar(84);
    const int id0 = bank.add(new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar));
    const int id1 = bank.add(new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, ar));

    Rng tr0(85);
    AdapterTrainConfig tc;
    tc.epochs = 4;
    tc.batch = 8;
    train_adapter(bank.by_id(id0), data0, fb, tc, tr0);
    const auto slot1_bytes = param_bytes(bank.by_id(id1));
    const auto slot0_bytes = param_bytes(bank.by_id(id0));

    Rng tr1(86);
    train_adapter(bank.by_id(id1), data1, fb, tc, tr1);
    CHECK(param_bytes(bank.by_id(id0)) == slot0_bytes);
    CHECK(bank.by_id(id1).id == id1);
    CHECK(param_bytes(bank.by_id(id1)) != slot1_bytes);
    CHECK(fb.compute_digest() == digest_before);

    // retention: per-sample predictions under the forced gate are unchanged
    const auto gate0 = one_hot_gate(bank, id0);
    std::vector<int> preds_before;
    for (const auto& s : data0) preds_before.push_back(predict(s.tokens, gate0, bank, fb).label);
    Rng tr2(87);
    train_adapter(bank.by_id(id1), data1, fb, tc, tr2);
    std::vector<int> preds_after;
    for (const auto& s : data0) preds_after.push_back(predict(s.tokens, gate0, bank, fb).label);
    CHECK(preds_before == preds_after);
}

TEST_CASE("gated forward equals the direct-slot forward") {
    FrozenBackbone fb = tiny_backbone(95);
    Rng rng(96);
    Tensor tokens = random_tokens(fb.w.cfg, rng);
    AdapterBank bank(-1);
    Rng ar(97);
    AdapterSlot slot = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
    for (auto& layer : slot.lora)
        for (auto& pair : layer)
            for (auto& v : pair.up.data()) v = real(0.05) * static_cast<real>(ar.normal());
    AdapterContext direct = AdapterContext::for_slot(slot);
    Tensor expect = backbone_forward(nullptr, tokens, fb, &direct);

    const int id = bank.add(std::move(slot));
    AdapterContext gated = AdapterContext::for_gate(bank, one_hot_gate(bank, id));
    Tensor got = backbone_forward(nullptr, tokens, fb, &gated);
    CHECK(got.data() == expect.data());

    AdapterContext zero = AdapterContext::for_gate(bank, {0});
    Tensor frozen = backbone_forward(nullptr, tokens, fb, &zero);
    Tensor plain = backbone_forward(nullptr, tokens, fb, nullptr);
    CHECK(frozen.data() == plain.data());

    AdapterContext broken;
    broken.gate = {1};
    CHECK_THROWS_AS(backbone_forward(nullptr, tokens, fb, &broken), RoutingError);
}

TEST_CASE("bank capacity and id stability") {
    AdapterBank bank(2);
    Rng ar(91);
    const int a = bank.add(new_adapter(1, 1, 8, {0}, ar));
    const int b = bank.add(new_adapter(1, 1, 8, {1}, ar));
    CHECK(bank.at_capacity());
    CHECK_THROWS_AS(bank.add(new_adapter(1, 1, 8, {2}, ar)), CapacityError);

    const int c = bank.replace(a, new_adapter(1, 1, 8, {0, 2}, ar));
    CHECK(bank.size() == 2);
    CHECK_FALSE(bank.has_id(a));
    CHECK(bank.has_id(b));
    CHECK(bank.has_id(c));
    CHECK(bank.index_of(c) == 0);  // takes the donor's position
    CHECK_THROWS_AS(AdapterBank(0), ConfigError);
}
