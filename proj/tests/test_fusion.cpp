#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "rtcl/dataset.hpp"
#include "rtcl/fusion.hpp"
#include "rtcl/ops.hpp"

using namespace rtcl;
using namespace rtcl::testing;

namespace {

std::vector<std::vector<real>> param_bytes(const AdapterSlot& slot) {
    std::vector<std::vector<real>> out;
    for (const auto& t : slot.params()) out.push_back(t.data());
    return out;
}

std::vector<TaskSample> embed_glyphs(const FrozenBackbone& fb, const std::vector<int>& classes,
                                     int per_class, uint64_t seed) {
    Rng rng(seed);
    std::vector<TaskSample> out;
    for (int cls : classes) {
        for (int i = 0; i < per_class; ++i) {
            out.push_back({embed_image(nullptr, glyph_image(cls, rng), fb.w), cls});
        }
    }
    return out;
}

std::vector<Tensor> tokens_of(const std::vector<TaskSample>& data) {
    std::vector<Tensor> out;
    for (const auto& s : data) out.push_back(s.tokens);
    return out;
}

TaskAutoencoder trained_ae(const std::vector<TaskSample>& data, uint64_t seed, int dim) {
    Rng rng(seed);
    TaskAutoencoder ae = TaskAutoencoder::shallow(dim, 1, rng);
    AeTrainConfig cfg;
    cfg.epochs = 60;
    cfg.lr = real(0.02);
    cfg.batch = 8;
    train_ae(ae, tokens_of(data), cfg, rng);
    return ae;
}

real accuracy_forced(const std::vector<TaskSample>& data, const AdapterBank& bank, int slot_id,
                     const FrozenBackbone& fb) {
    const auto gate = one_hot_gate(bank, slot_id);
    int correct = 0;
    for (const auto& s : data)
        if (predict(s.tokens, gate, bank, fb).label == s.label) ++correct;
    return static_cast<real>(correct) / static_cast<real>(data.size());
}

}  // namespace

TEST_CASE("capacity gate") {
    AdapterBank bank(-1);
    Rng ar(1);
    CHECK(capacity_gate(bank, 1, -1) == CapacityDecision::Grow);
    CHECK(capacity_gate(bank, 999, -1) == CapacityDecision::Grow);
    CHECK(capacity_gate(bank, 3, 3) == CapacityDecision::Grow);
    bank.add(new_adapter(1, 1, 8, {0}, ar));
    CHECK(capacity_gate(bank, 4, 3) == CapacityDecision::Fuse);
    CHECK_THROWS_AS(capacity_gate(bank, 1, 0), ConfigError);
    AdapterBank empty(-1);
    CHECK_THROWS_AS(capacity_gate(empty, 4, 3), CapacityError);
}

TEST_CASE("select_donor: singleton, resampled duplicate, exhaustive oracle") {
    FrozenBackbone fb = tiny_backbone(2);
    const auto task_a = embed_glyphs(fb, {0, 1}, 16, 3);
    const auto task_b = embed_glyphs(fb, {4, 5}, 16, 4);

    RouterBank router;
    router.aes.push_back(trained_ae(task_a, 5, fb.w.cfg.dim));

    SUBCASE("one prior task is always the donor") {
        CHECK(select_donor(router, tokens_of(task_b), 1) == 0);
        CHECK_THROWS_AS(select_donor(router, tokens_of(task_b), 0), RoutingError);
        CHECK_THROWS_AS(select_donor(router, tokens_of(task_b), 2), RoutingError);
    }

    SUBCASE("a resampled copy of an old task selects that task") {
        router.aes.push_back(trained_ae(task_b, 6, fb.w.cfg.dim));
        const auto task_a_again = embed_glyphs(fb, {0, 1}, 16, 7);  // fresh samples, same classes
        CHECK(select_donor(router, tokens_of(task_a_again), 2) == 0);
        const auto task_b_again = embed_glyphs(fb, {4, 5}, 16, 8);
        CHECK(select_donor(router, tokens_of(task_b_again), 2) == 1);
    }

    SUBCASE("equals the brute-force mean-loss argmin") {
        router.aes.push_back(trained_ae(task_b, 6, fb.w.cfg.dim));
        Rng r(9);
        router.aes.push_back(TaskAutoencoder::shallow(fb.w.cfg.dim, 1, r));
        const auto probe = embed_glyphs(fb, {2, 3}, 10, 10);
        int best = 0;
        real best_loss = mean_reconstruction_loss(router.aes[0], tokens_of(probe));
        for (int e = 1; e < 3; ++e) {
            const real l = mean_reconstruction_loss(router.aes[static_cast<std::size_t>(e)], tokens_of(probe));
            if (l < best_loss) {
                best_loss = l;
                best = e;
            }
        }
        CHECK(select_donor(router, tokens_of(probe), 3) == best);
    }
}

TEST_CASE("distill_fuse with alpha=1 matches the plain training trajectory") {
    FrozenBackbone fb = tiny_backbone(20);
    const auto task_a = embed_glyphs(fb, {0, 1}, 12, 21);
    const auto task_b = embed_glyphs(fb, {2, 3}, 12, 22);

    AdapterTrainConfig tc;
    tc.epochs = 3;
    tc.batch = 8;
    tc.lr = real(0.002);

    // a one-slot bank holding the donor
    AdapterBank bank(1);
    GateMap gm;
    Rng ar(23);
    AdapterSlot donor = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
    Rng dtr(24);
    train_adapter(donor, task_a, fb, tc, dtr);
    const auto donor_ids = donor.class_ids;
    const int donor_id = bank.add(std::move(donor));
    gm.push_task(donor_id);

    Rng mem_r(25);
    TaskAutoencoder ae = trained_ae(task_a, 26, fb.w.cfg.dim);
    const auto memory = herd_select(ae, tokens_of(task_a), {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                                                            1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1},
                                    8, {0, 1});

    // control: head extension then plain training, same seeds
    Rng ctrl_init(27);
    AdapterSlot control = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, ctrl_init);
    Rng ctrl_rng(28);
    extend_head(control, donor_ids, ctrl_rng);
    train_adapter(control, task_b, fb, tc, ctrl_rng);

    // fused path with alpha = 1
    Rng cand_init(27);
    AdapterSlot cand = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, cand_init);
    FusionConfig fc;
    fc.alpha = real(1);
    fc.replay_batch = 4;
    fc.train = tc;
    Rng fuse_rng(28);
    const FusionEvent ev =
        distill_fuse(std::move(cand), donor_id, bank, gm, memory, task_b, fb, fc, 1, 0, fuse_rng, 99);

    CHECK(param_bytes(bank.by_id(ev.new_slot_id)) == param_bytes(control));
    CHECK(bank.size() == 1);
    CHECK_FALSE(bank.has_id(donor_id));
    gm.verify(bank);
    CHECK(gm.table == std::vector<int>{ev.new_slot_id, ev.new_slot_id});

    SUBCASE("alpha=1 is independent of the replay memory contents") {
        AdapterBank bank2(1);
        GateMap gm2;
        Rng ar2(23);
        AdapterSlot donor2 = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar2);
        Rng dtr2(24);
        train_adapter(donor2, task_a, fb, tc, dtr2);
        const int donor2_id = bank2.add(std::move(donor2));
        gm2.push_task(donor2_id);

        const auto other_memory = herd_select(ae, tokens_of(task_a),
                                              {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                                               1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1},
                                              4, {0, 1});
        Rng cand2_init(27);
        AdapterSlot cand2 = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, cand2_init);
        Rng fuse_rng2(28);
        const FusionEvent ev2 = distill_fuse(std::move(cand2), donor2_id, bank2, gm2, other_memory,
                                             task_b, fb, fc, 1, 0, fuse_rng2, 1234);
        CHECK(param_bytes(bank2.by_id(ev2.new_slot_id)) == param_bytes(bank.by_id(ev.new_slot_id)));
    }
}

TEST_CASE("soft targets: normalized, frozen teacher, zero self-distillation loss") {
    FrozenBackbone fb = tiny_backbone(30);
    const auto task_a = embed_glyphs(fb, {0, 1}, 10, 31);
    Rng ar(32);
    AdapterSlot donor = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
    AdapterTrainConfig tc;
    tc.epochs = 2;
    tc.batch = 8;
    Rng tr(33);
    train_adapter(donor, task_a, fb, tc, tr);

    TaskAutoencoder ae = trained_ae(task_a, 34, fb.w.cfg.dim);
    std::vector<int> labels;
    for (const auto& s : task_a) labels.push_back(s.label);
    const auto memory = herd_select(ae, tokens_of(task_a), labels, 6, {0, 1});

    const SoftTargets targets = soft_targets(donor, memory, fb);
    CHECK(targets.probs.size() == memory.size());
    for (const auto& row : targets.probs) {
        real s = 0;
        for (real v : row) s += v;
        CHECK(std::abs(s - 1) < 1e-6);
    }

    // teacher equals student at the start: restricted L2 is exactly zero
    std::vector<int> donor_cols;
    for (int cid : donor.class_ids) donor_cols.push_back(donor.class_index(cid));
    real l2 = 0;
    for (std::size_t i = 0; i < memory.size(); ++i) {
        Tensor logits = slot_logits(nullptr, memory[i].tokens, donor, fb);
        Tensor probs = softmax(nullptr, logits, 1);
        for (std::size_t j = 0; j < donor_cols.size(); ++j) {
            const real d = probs.data()[static_cast<std::size_t>(donor_cols[j])] - targets.probs[i][j];
            l2 += d * d;
        }
    }
    CHECK(l2 == 0);
}

TEST_CASE("distillation with replay beats the no-distillation control on the donor task") {
    // two tasks, capacity one: task B must fuse into task A's slot
    FrozenBackbone fb = tiny_backbone(40);
    const auto task_a = embed_glyphs(fb, {0, 1}, 48, 41);
    const auto task_a_test = embed_glyphs(fb, {0, 1}, 32, 42);
    const auto task_b = embed_glyphs(fb, {4, 7}, 48, 43);

    AdapterTrainConfig tc;
    tc.epochs = 12;
    tc.batch = 16;
    tc.lr = real(0.003);

    const auto run_fusion = [&](real alpha) {
        AdapterBank bank(1);
        GateMap gm;
        Rng ar(44);
        AdapterSlot donor = new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar);
        Rng dtr(45);
        train_adapter(donor, task_a, fb, tc, dtr);
        const int donor_id = bank.add(std::move(donor));
        gm.push_task(donor_id);

        TaskAutoencoder ae = trained_ae(task_a, 46, fb.w.cfg.dim);
        std::vector<int> labels;
        for (const auto& s : task_a) labels.push_back(s.label);
        const auto memory = herd_select(ae, tokens_of(task_a), labels, 16, {0, 1});

        Rng cand_init(47);
        AdapterSlot cand = new_adapter(4, fb.w.cfg.layers, fb.w.cfg.dim, {4, 7}, cand_init);
        FusionConfig fc;
        fc.alpha = alpha;
        fc.replay_batch = 8;
        fc.train = tc;
        Rng fr(48);
        const FusionEvent ev =
            distill_fuse(std::move(cand), donor_id, bank, gm, memory, task_b, fb, fc, 1, 0, fr, 49);
        return accuracy_forced(task_a_test, bank, ev.new_slot_id, fb);
    };

    const real with_distillation = run_fusion(real(0.5));
    const real without = run_fusion(real(1));
    INFO("donor-task accuracy with distillation ", with_distillation, " vs control ", without);
    CHECK(with_distillation > without);
}

TEST_CASE("fusion guards") {
    FrozenBackbone fb = tiny_backbone(50);
    const auto task_b = embed_glyphs(fb, {2, 3}, 8, 51);
    AdapterBank bank(1);
    GateMap gm;
    Rng ar(52);
    const int donor_id = bank.add(new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {0, 1}, ar));
    gm.push_task(donor_id);

    SUBCASE("alpha outside [0,1] is rejected") {
        AdapterSlot cand = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, ar);
        FusionConfig fc;
        fc.alpha = real(1.5);
        Rng fr(53);
        CHECK_THROWS_AS(distill_fuse(std::move(cand), donor_id, bank, gm, {}, task_b, fb, fc, 1, 0,
                                     fr, 1),
                        ConfigError);
    }

    SUBCASE("empty replay memory degrades to plain cross-entropy") {
        AdapterSlot cand = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, ar);
        FusionConfig fc;
        fc.alpha = real(0.5);
        fc.train.epochs = 1;
        fc.train.batch = 8;
        Rng fr(54);
        const FusionEvent ev =
            distill_fuse(std::move(cand), donor_id, bank, gm, {}, task_b, fb, fc, 1, 0, fr, 2);
        CHECK(bank.size() == 1);
        CHECK(bank.has_id(ev.new_slot_id));
    }

    SUBCASE("missing donor slot is an error") {
        AdapterSlot cand = new_adapter(2, fb.w.cfg.layers, fb.w.cfg.dim, {2, 3}, ar);
        FusionConfig fc;
        Rng fr(55);
        CHECK_THROWS_AS(distill_fuse(std::move(cand), 777, bank, gm, {}, task_b, fb, fc, 1, 0, fr, 3),
                        RoutingError);
    }
}
