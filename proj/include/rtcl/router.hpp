#pragma once

#include <vector>

#include "rtcl/adapters.hpp"
#include "rtcl/rng.hpp"
#include "rtcl/tensor.hpp"

namespace rtcl {

// Per-task autoencoder over the sigmoid of the token-mean vector. The shallow
// variant is a bias-free linear encoder/decoder pair; the deep variant is four
// biased linear layers with sigmoids between them.
struct TaskAutoencoder {
    int input_dim = 0;
    int latent = 0;
    int hidden = 0;  // deep variant only
    bool deep = false;
    std::vector<Tensor> ws;
    std::vector<Tensor> bs;  // deep variant only

    static TaskAutoencoder shallow(int input_dim, int latent, Rng& rng);
    static TaskAutoencoder four_layer(int input_dim, int hidden, int latent, Rng& rng);

    // x: [N x input_dim]. encode returns the bottleneck activations [N x latent].
    Tensor encode(GradTape* tape, const Tensor& x) const;
    Tensor reconstruct(GradTape* tape, const Tensor& x) const;

    std::vector<Tensor> params();
    std::vector<Tensor> params() const;
    long param_count() const;
    void snap_f32();
};

// One autoencoder per task seen, in task order. Entries are never removed,
// even after the task's adapter is fused away.
struct RouterBank {
    std::vector<TaskAutoencoder> aes;

    std::size_t size() const { return aes.size(); }
    bool empty() const { return aes.empty(); }
    long param_count() const;
};

// Task index -> adapter slot id. Starts as the identity and is rewritten when
// fusion retires a donor slot.
struct GateMap {
    std::vector<int> table;

    void push_task(int slot_id) { table.push_back(slot_id); }
    int slot_for_task(int task) const;
    std::size_t size() const { return table.size(); }

    // Checks every entry resolves to a live slot and every live slot is reachable.
    void verify(const AdapterBank& bank) const;
};

// Mean over the token axis followed by sigmoid: a [1 x dim] vector in (0,1).
Tensor ae_input(const Tensor& tokens);

// Stacks ae_input rows for a batch of token sequences.
Tensor ae_input_batch(const std::vector<Tensor>& token_seqs);

struct AeTrainConfig {
    int epochs = 10;
    real lr = real(0.005);
    int batch = 128;
};

TrainStats train_ae(TaskAutoencoder& ae, const std::vector<Tensor>& token_seqs,
                    const AeTrainConfig& cfg, Rng& rng);
TrainStats train_ae_on_inputs(TaskAutoencoder& ae, const Tensor& inputs, const AeTrainConfig& cfg,
                              Rng& rng);

// Mean squared reconstruction error of the sigmoid token-mean under this AE.
real reconstruction_loss(const TaskAutoencoder& ae, const Tensor& tokens);
// Mean of per-sequence losses.
real mean_reconstruction_loss(const TaskAutoencoder& ae, const std::vector<Tensor>& token_seqs);

struct RouteResult {
    std::vector<real> gate;  // one-hot over bank positions
    int task = -1;           // argmin autoencoder index
    int slot_id = -1;        // gate target after the task -> slot mapping
};

// Picks the autoencoder with minimum reconstruction loss (ties to the lowest
// index) and emits a one-hot gate at the mapped adapter slot.
RouteResult route(const Tensor& tokens, const RouterBank& router, const GateMap& gate_map,
                  const AdapterBank& bank);

// Redirects every gate entry that pointed at donor_task's slot to new_slot_id.
// Tasks already fused into that slot follow along.
void remap_gate(GateMap& gate_map, int donor_task, int new_slot_id, const AdapterBank& bank);

// Rows are tasks, columns autoencoders; each row holds mean reconstruction
// losses min-max normalized to [0,1] (constant rows normalize to all zeros).
std::vector<std::vector<real>> routing_heatmap(const RouterBank& router,
                                               const std::vector<std::vector<Tensor>>& per_task_tokens);

}  // namespace rtcl
