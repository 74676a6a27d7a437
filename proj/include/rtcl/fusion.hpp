#pragma once

#include <cstdint>
#include <vector>

#include "rtcl/adapters.hpp"
#include "rtcl/backbone.hpp"
#include "rtcl/replay.hpp"
#include "rtcl/router.hpp"

namespace rtcl {

enum class CapacityDecision { Grow, Fuse };

// Grow while the 1-based task index fits the capacity, fuse afterwards.
// Negative capacity means unlimited.
CapacityDecision capacity_gate(const AdapterBank& bank, int task_index, int capacity);

// Most relevant prior task: argmin over the first n_prior autoencoders of the
// mean reconstruction loss on the new task's data. Ties break low.
int select_donor(const RouterBank& router, const std::vector<Tensor>& new_task_tokens, int n_prior);

struct FusionConfig {
    real alpha = real(0.5);  // weight on the new-task cross-entropy term
    int replay_batch = 32;
    AdapterTrainConfig train;

    void validate() const;
};

// Teacher probabilities over the donor's classes, computed once per fusion
// and held fixed for the whole distillation.
struct SoftTargets {
    std::vector<std::vector<real>> probs;  // one row per replay item
    std::vector<int> class_ids;            // donor class order
};

SoftTargets soft_targets(const AdapterSlot& donor, const std::vector<ReplayItem>& replay,
                         const FrozenBackbone& fb);

struct FusionEvent {
    int task = -1;
    int donor_task = -1;
    int donor_slot_id = -1;
    int new_slot_id = -1;
    real alpha = 0;
    int replay_size = 0;
    long params_before = 0;
    long params_after = 0;
};

// Distills the donor slot's behavior into new_slot while it learns the new
// task, then atomically swaps the donor out of the bank and remaps the gate
// table. The head of new_slot is extended to cover the donor's classes; the
// L2 term compares the student's probabilities on those classes against the
// fixed soft targets. With an empty replay memory the distillation degrades
// to plain cross-entropy (with a warning).
FusionEvent distill_fuse(AdapterSlot new_slot, int donor_slot_id, AdapterBank& bank, GateMap& gate_map,
                         const std::vector<ReplayItem>& replay, const std::vector<TaskSample>& new_data,
                         const FrozenBackbone& fb, const FusionConfig& cfg, int task_index,
                         int donor_task, Rng& rng, uint64_t replay_seed);

}  // namespace rtcl
