#include "rtcl/replay.hpp"

#include <algorithm>
#include <cmath>

namespace rtcl {

long ReplayMemory::total_items() const {
    long n = 0;
    for (const auto& t : tasks) n += static_cast<long>(t.size());
    return n;
}

namespace {

std::vector<real> latent_of(const TaskAutoencoder& ae, const Tensor& tokens) {
    Tensor z = ae.encode(nullptr, ae_input(tokens));
    return z.data();
}

real latent_distance(const std::vector<real>& a, const std::vector<real>& b) {
    real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const real d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace

std::vector<real> class_center(const TaskAutoencoder& ae, const std::vector<Tensor>& class_tokens) {
    if (class_tokens.empty()) throw Error("class_center: empty class");
    std::vector<real> center(static_cast<std::size_t>(ae.latent), real(0));
    for (const auto& t : class_tokens) {
        const auto z = latent_of(ae, t);
        for (std::size_t i = 0; i < center.size(); ++i) center[i] += z[i];
    }
    for (auto& v : center) v /= static_cast<real>(class_tokens.size());
    return center;
}

std::vector<ReplayItem> herd_select(const TaskAutoencoder& ae, const std::vector<Tensor>& tokens,
                                    const std::vector<int>& labels, int m,
                                    const std::vector<int>& class_ids) {
    if (tokens.size() != labels.size()) throw ShapeError("herd_select: tokens/labels length mismatch");
    if (class_ids.empty()) throw ConfigError("herd_select: no classes given");
    const int u = static_cast<int>(class_ids.size());
    if (m < u) throw ConfigError("herd_select: budget " + std::to_string(m) + " below class count " +
                                 std::to_string(u));

    // Quotas: floor(M/U) each, remainder to the lowest class ids.
    std::vector<int> sorted_ids = class_ids;
    std::sort(sorted_ids.begin(), sorted_ids.end());
    std::vector<int> quota(static_cast<std::size_t>(u), m / u);
    for (int i = 0; i < m % u; ++i) quota[static_cast<std::size_t>(i)] += 1;

    // Snap stored copies first so cached latents match the stored tokens exactly.
    std::vector<Tensor> snapped(tokens.size());
    std::vector<std::vector<real>> latents(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        snapped[i] = tokens[i].clone();
        snapped[i].snap_f32();
        latents[i] = latent_of(ae, snapped[i]);
        for (auto& v : latents[i]) v = snap32(v);
    }

    std::vector<ReplayItem> out;
    for (int ci = 0; ci < u; ++ci) {
        const int cls = sorted_ids[static_cast<std::size_t>(ci)];
        std::vector<int> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) members.push_back(static_cast<int>(i));
        if (members.empty()) continue;

        std::vector<real> center(static_cast<std::size_t>(ae.latent), real(0));
        for (int idx : members)
            for (std::size_t k = 0; k < center.size(); ++k)
                center[k] += latents[static_cast<std::size_t>(idx)][k];
        for (auto& v : center) v /= static_cast<real>(members.size());

        std::vector<std::pair<real, int>> ranked;
        ranked.reserve(members.size());
        for (int idx : members)
            ranked.emplace_back(latent_distance(center, latents[static_cast<std::size_t>(idx)]), idx);
        std::sort(ranked.begin(), ranked.end());

        const int take = std::min<int>(quota[static_cast<std::size_t>(ci)],
                                       static_cast<int>(ranked.size()));
        for (int i = 0; i < take; ++i) {
            const int idx = ranked[static_cast<std::size_t>(i)].second;
            ReplayItem item;
            item.tokens = snapped[static_cast<std::size_t>(idx)];
            item.label = cls;
            item.latent = latents[static_cast<std::size_t>(idx)];
            out.push_back(std::move(item));
        }
    }
    return out;
}

ReplaySampler::ReplaySampler(int n, uint64_t seed) : rng_(seed) {
    if (n < 1) throw Error("replay sampler needs a non-empty memory");
    order_.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
    rng_.shuffle(order_);
}

std::vector<int> ReplaySampler::next_batch(int batch_size) {
    if (batch_size < 1) throw Error("replay batch size must be >= 1");
    if (pos_ >= order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
    }
    const std::size_t stop = std::min(order_.size(), pos_ + static_cast<std::size_t>(batch_size));
    std::vector<int> batch(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                           order_.begin() + static_cast<std::ptrdiff_t>(stop));
    pos_ = stop;
    return batch;
}

std::vector<const ReplayItem*> replay_batch(const std::vector<ReplayItem>& memory, int batch_size,
                                            uint64_t seed) {
    if (memory.empty()) throw Error("replay_batch: empty memory");
    ReplaySampler sampler(static_cast<int>(memory.size()), seed);
    std::vector<const ReplayItem*> out;
    for (int idx : sampler.next_batch(batch_size)) {
        out.push_back(&memory[static_cast<std::size_t>(idx)]);
    }
    return out;
}

}  // namespace rtcl
