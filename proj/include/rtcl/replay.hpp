#pragma once

#include <vector>

#include "rtcl/router.hpp"
#include "rtcl/rng.hpp"
#include "rtcl/tensor.hpp"

namespace rtcl {

// One stored exemplar: embedding-layer tokens, its global label, and the
// latent code of the tokens under the owning task's autoencoder.
struct ReplayItem {
    Tensor tokens;
    int label = 0;
    std::vector<real> latent;
};

// Per-task exemplar sets, at most budget_m items each.
struct ReplayMemory {
    int budget_m = 0;
    std::vector<std::vector<ReplayItem>> tasks;

    long total_items() const;
};

// Mean latent code of one class's token sequences under the task AE.
std::vector<real> class_center(const TaskAutoencoder& ae, const std::vector<Tensor>& class_tokens);

// Herding selection: per class, the quota of samples closest (Euclidean, in
// latent space) to the class center. M is split evenly over the classes; the
// remainder goes to the lowest class ids. Ties break by dataset index.
// Classes with no samples contribute nothing, so fewer than m items may return.
std::vector<ReplayItem> herd_select(const TaskAutoencoder& ae, const std::vector<Tensor>& tokens,
                                    const std::vector<int>& labels, int m,
                                    const std::vector<int>& class_ids);

// Uniform sampling without replacement within each epoch pass; reshuffles at
// epoch boundaries so the union of one epoch's batches is the whole set.
class ReplaySampler {
public:
    ReplaySampler(int n, uint64_t seed);

    std::vector<int> next_batch(int batch_size);

private:
    std::vector<int> order_;
    std::size_t pos_ = 0;
    Rng rng_;
};

// First batch of a fresh seeded epoch pass over the memory.
std::vector<const ReplayItem*> replay_batch(const std::vector<ReplayItem>& memory, int batch_size,
                                            uint64_t seed);

}  // namespace rtcl
