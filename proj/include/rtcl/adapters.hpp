#pragma once

#include <array>
#include <span>
#include <vector>

#include "rtcl/optim.hpp"
#include "rtcl/rng.hpp"
#include "rtcl/tensor.hpp"

namespace rtcl {

struct FrozenBackbone;

// Low-rank delta for one frozen projection: delta(x) = (x @ down) @ up.
// up starts at zero, so a fresh pair contributes nothing.
struct LoraPair {
    Tensor down;  // [dim x rank]
    Tensor up;    // [rank x dim]
    int rank = 0;
};

enum class Proj { Q = 0, K = 1, V = 2, O = 3 };

// One task's trainable state: four LoraPairs per attention layer plus a
// classification head over this slot's global class ids.
struct AdapterSlot {
    int id = -1;  // assigned by the bank; stable across donor removal
    int layers = 0;
    int dim = 0;
    int rank = 0;
    std::vector<std::array<LoraPair, 4>> lora;  // [layer][Q,K,V,O]
    Tensor head_w;                              // [dim x n_classes]
    Tensor head_b;                              // [n_classes]
    std::vector<int> class_ids;                 // ordered global labels

    const LoraPair& pair(int layer, Proj p) const {
        return lora[static_cast<std::size_t>(layer)][static_cast<std::size_t>(p)];
    }

    std::vector<Tensor> params();
    std::vector<Tensor> params() const;
    int class_index(int global_label) const;  // -1 when absent
    void snap_f32();
};

AdapterSlot new_adapter(int rank, int layers, int dim, const std::vector<int>& class_ids, Rng& rng);

// Appends columns for classes the head does not cover yet.
void extend_head(AdapterSlot& slot, const std::vector<int>& extra_class_ids, Rng& rng);

// Ordered list of slots, bounded by a capacity. Slots carry stable ids so
// gate tables survive removals.
class AdapterBank {
public:
    explicit AdapterBank(int capacity);  // capacity < 0 means unlimited

    int add(AdapterSlot slot);                      // returns id; CapacityError when full
    int replace(int old_id, AdapterSlot slot);      // atomic swap at the old slot's position

    std::size_t size() const { return slots_.size(); }
    bool empty() const { return slots_.empty(); }
    int capacity() const { return capacity_; }
    bool unlimited() const { return capacity_ < 0; }
    bool at_capacity() const { return !unlimited() && static_cast<int>(slots_.size()) >= capacity_; }

    const AdapterSlot& at(std::size_t pos) const { return slots_[pos]; }
    AdapterSlot& at(std::size_t pos) { return slots_[pos]; }
    int index_of(int id) const;  // -1 when absent
    const AdapterSlot& by_id(int id) const;
    AdapterSlot& by_id(int id);
    bool has_id(int id) const { return index_of(id) >= 0; }

    std::vector<int> ids() const;

private:
    std::vector<AdapterSlot> slots_;
    int capacity_;
    int next_id_ = 0;

    friend struct CheckpointCodec;
};

// Resolves which slot (if any) is active for a forward pass. Either a direct
// slot pointer (training a slot that may not be in a bank yet) or a one-hot
// gate over bank positions.
struct AdapterContext {
    const AdapterBank* bank = nullptr;
    std::vector<real> gate;                  // one-hot or all-zero over bank slots
    const AdapterSlot* direct = nullptr;

    static AdapterContext for_slot(const AdapterSlot& slot);
    static AdapterContext for_gate(const AdapterBank& bank, std::vector<real> gate);

    // Validates the gate contract and returns the active slot or nullptr.
    const AdapterSlot* resolve() const;
};

std::vector<real> one_hot_gate(const AdapterBank& bank, int slot_id);

// frozen @ v plus the gated low-rank delta: w(x) + sum_e gate(e) * delta_e(x).
Tensor adapted_projection(GradTape* tape, const Tensor& w, const Tensor& v, std::span<const real> gate,
                          const AdapterBank& bank, int layer, Proj p);

// Delta only, for one slot.
Tensor lora_delta(GradTape* tape, const AdapterSlot& slot, int layer, Proj p, const Tensor& v);

struct TaskSample {
    Tensor tokens;  // embedding-layer output
    int label = 0;  // global class id
};

struct TrainStats {
    real initial_loss = 0;
    real final_loss = 0;
    int steps = 0;
};

struct AdapterTrainConfig {
    real lr = real(1e-3);
    int epochs = 20;
    int batch = 128;
};

// Optimizes only the slot's parameters; the backbone stays untouched.
TrainStats train_adapter(AdapterSlot& slot, const std::vector<TaskSample>& data,
                         const FrozenBackbone& fb, const AdapterTrainConfig& cfg, Rng& rng);

struct Prediction {
    int label = -1;                // global class id
    std::vector<real> probs;       // over the routed slot's class_ids
    std::vector<int> class_ids;
};

Prediction predict(const Tensor& tokens, std::span<const real> gate, const AdapterBank& bank,
                   const FrozenBackbone& fb);

// Head logits for one token sequence under a specific slot (training path).
Tensor slot_logits(GradTape* tape, const Tensor& tokens, const AdapterSlot& slot,
                   const FrozenBackbone& fb);

long adapter_param_count(const AdapterSlot& slot);
long adapter_lora_param_count(const AdapterSlot& slot);
long adapter_head_param_count(const AdapterSlot& slot);
long adapter_param_count(const AdapterBank& bank);
long adapter_lora_param_count(const AdapterBank& bank);
long adapter_head_param_count(const AdapterBank& bank);

}  // namespace rtcl
