#include "rtcl/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "rtcl/ops.hpp"

namespace rtcl {

CapacityDecision capacity_gate(const AdapterBank& bank, int task_index, int capacity) {
    if (capacity == 0) throw ConfigError("capacity must be >= 1 (negative means unlimited)");
    if (capacity < 0 || task_index <= capacity) return CapacityDecision::Grow;
    if (bank.empty()) throw CapacityError("cannot fuse into an empty adapter bank");
    return CapacityDecision::Fuse;
}

int select_donor(const RouterBank& router, const std::vector<Tensor>& new_task_tokens, int n_prior) {
    if (n_prior < 1 || router.empty()) throw RoutingError("donor selection requires a prior task");
    if (n_prior > static_cast<int>(router.size())) {
        throw RoutingError("donor pool " + std::to_string(n_prior) + " exceeds " +
                           std::to_string(router.size()) + " autoencoders");
    }
    int best = 0;
    real best_loss = mean_reconstruction_loss(router.aes[0], new_task_tokens);
    for (int e = 1; e < n_prior; ++e) {
        const real loss = mean_reconstruction_loss(router.aes[static_cast<std::size_t>(e)], new_task_tokens);
        if (loss < best_loss) {
            best_loss = loss;
            best = e;
        }
    }
    return best;
}

void FusionConfig::validate() const {
    if (alpha < real(0) || alpha > real(1)) {
        throw ConfigError("distillation weight must lie in [0, 1]");
    }
    if (replay_batch < 1) throw ConfigError("replay batch size must be >= 1");
}

SoftTargets soft_targets(const AdapterSlot& donor, const std::vector<ReplayItem>& replay,
                         const FrozenBackbone& fb) {
    SoftTargets targets;
    targets.class_ids = donor.class_ids;
    targets.probs.reserve(replay.size());
    for (const auto& item : replay) {
        Tensor logits = slot_logits(nullptr, item.tokens, donor, fb);
        Tensor probs = softmax(nullptr, logits, 1);
        real s = 0;
        for (real v : probs.data()) s += v;
        if (std::abs(s - real(1)) > real(1e-6)) throw FusionError("teacher probabilities do not normalize");
        targets.probs.push_back(probs.data());
    }
    return targets;
}

namespace {

uint64_t params_digest(const AdapterSlot& slot) {
    uint64_t h = kFnvBasis;
    for (const auto& t : slot.params()) {
        for (real v : t.data()) {
            const float f = static_cast<float>(v);
            h = fnv1a64(&f, sizeof(f), h);
        }
    }
    return h;
}

}  // namespace

FusionEvent distill_fuse(AdapterSlot new_slot, int donor_slot_id, AdapterBank& bank, GateMap& gate_map,
                         const std::vector<ReplayItem>& replay, const std::vector<TaskSample>& new_data,
                         const FrozenBackbone& fb, const FusionConfig& cfg, int task_index,
                         int donor_task, Rng& rng, uint64_t replay_seed) {
    cfg.validate();
    if (new_slot.id == donor_slot_id) throw FusionError("donor and new slot must differ");
    const AdapterSlot& donor = bank.by_id(donor_slot_id);

    FusionEvent event;
    event.task = task_index;
    event.donor_task = donor_task;
    event.donor_slot_id = donor_slot_id;
    event.alpha = cfg.alpha;
    event.replay_size = static_cast<int>(replay.size());
    event.params_before = adapter_param_count(bank);

    const bool distilling = cfg.alpha < real(1) && !replay.empty();
    if (cfg.alpha < real(1) && replay.empty()) {
        std::cerr << "warning: task " << task_index
                  << " fusion has no replay memory; training on cross-entropy only\n";
    }

    SoftTargets targets;
    if (distilling) targets = soft_targets(donor, replay, fb);
    const uint64_t teacher_before = params_digest(donor);

    extend_head(new_slot, donor.class_ids, rng);

    // Column positions of the donor's classes inside the extended head.
    std::vector<int> donor_cols;
    if (distilling) {
        donor_cols.reserve(donor.class_ids.size());
        for (int cid : donor.class_ids) {
            const int col = new_slot.class_index(cid);
            if (col < 0) throw FusionError("extended head is missing donor class " + std::to_string(cid));
            donor_cols.push_back(col);
        }
    }

    std::vector<int> local_labels(new_data.size());
    for (std::size_t i = 0; i < new_data.size(); ++i) {
        const int li = new_slot.class_index(new_data[i].label);
        if (li < 0) {
            throw LabelError("label " + std::to_string(new_data[i].label) +
                             " is not covered by the fused adapter's classes");
        }
        local_labels[i] = li;
    }

    AdamWConfig oc;
    oc.lr = cfg.train.lr;
    AdamW optimizer(new_slot.params(), oc);

    ReplaySampler sampler(distilling ? static_cast<int>(replay.size()) : 1, replay_seed);

    const int n = static_cast<int>(new_data.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < cfg.train.epochs; ++e) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.train.batch) {
            const int stop = std::min(n, start + cfg.train.batch);
            GradTape tape;
            std::vector<Tensor> rows;
            std::vector<int> batch_labels;
            for (int i = start; i < stop; ++i) {
                const int idx = order[static_cast<std::size_t>(i)];
                rows.push_back(slot_logits(&tape, new_data[static_cast<std::size_t>(idx)].tokens,
                                           new_slot, fb));
                batch_labels.push_back(local_labels[static_cast<std::size_t>(idx)]);
            }
            Tensor ce = cross_entropy(&tape, concat_rows(&tape, rows), batch_labels);
            Tensor loss = ce;
            if (distilling) {
                const auto batch_idx = sampler.next_batch(cfg.replay_batch);
                std::vector<Tensor> student_rows;
                std::vector<real> target_data;
                for (int idx : batch_idx) {
                    student_rows.push_back(slot_logits(&tape, replay[static_cast<std::size_t>(idx)].tokens,
                                                       new_slot, fb));
                    const auto& t = targets.probs[static_cast<std::size_t>(idx)];
                    target_data.insert(target_data.end(), t.begin(), t.end());
                }
                Tensor student = softmax(&tape, concat_rows(&tape, student_rows), 1);
                Tensor restricted = gather_cols(&tape, student, donor_cols);
                Tensor target = Tensor::from({static_cast<int>(batch_idx.size()),
                                              static_cast<int>(donor_cols.size())},
                                             std::move(target_data));
                Tensor l2 = mse(&tape, restricted, target);
                loss = add(&tape, scale(&tape, ce, cfg.alpha), scale(&tape, l2, real(1) - cfg.alpha));
            }
            tape.backward(loss);
            optimizer.step();
            optimizer.zero_grad();
        }
    }
    new_slot.snap_f32();

    if (params_digest(donor) != teacher_before) {
        throw FusionError("teacher parameters changed during distillation");
    }

    event.new_slot_id = bank.replace(donor_slot_id, std::move(new_slot));
    remap_gate(gate_map, donor_task, event.new_slot_id, bank);
    gate_map.push_task(event.new_slot_id);
    gate_map.verify(bank);
    event.params_after = adapter_param_count(bank);
    return event;
}

}  // namespace rtcl
