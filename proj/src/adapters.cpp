#include "rtcl/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtcl/backbone.hpp"
#include "rtcl/ops.hpp"

namespace rtcl {

std::vector<Tensor> AdapterSlot::params() {
    std::vector<Tensor> out;
    for (auto& layer : lora) {
        for (auto& pair : layer) {
            out.push_back(pair.down);
            out.push_back(pair.up);
        }
    }
    out.push_back(head_w);
    out.push_back(head_b);
    return out;
}

std::vector<Tensor> AdapterSlot::params() const {
    return const_cast<AdapterSlot*>(this)->params();
}

int AdapterSlot::class_index(int global_label) const {
    const auto it = std::find(class_ids.begin(), class_ids.end(), global_label);
    return it == class_ids.end() ? -1 : static_cast<int>(it - class_ids.begin());
}

void AdapterSlot::snap_f32() {
    for (auto& t : params()) t.snap_f32();
}

AdapterSlot new_adapter(int rank, int layers, int dim, const std::vector<int>& class_ids, Rng& rng) {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));
    if (layers < 1 || dim < 1) throw ConfigError("adapter needs positive layer count and dim");
    if (class_ids.empty()) throw ConfigError("adapter needs a non-empty class list");
    for (std::size_t i = 0; i < class_ids.size(); ++i)
        for (std::size_t j = i + 1; j < class_ids.size(); ++j)
            if (class_ids[i] == class_ids[j])
                throw ConfigError("duplicate class id " + std::to_string(class_ids[i]) + " in adapter head");

    AdapterSlot slot;
    slot.layers = layers;
    slot.dim = dim;
    slot.rank = rank;
    slot.class_ids = class_ids;
    const real down_sigma = real(1) / std::sqrt(static_cast<real>(rank));
    for (int l = 0; l < layers; ++l) {
        std::array<LoraPair, 4> layer;
        for (auto& pair : layer) {
            pair.rank = rank;
            pair.down = Tensor::zeros({dim, rank}, true);
            for (auto& v : pair.down.data()) v = snap32(down_sigma * static_cast<real>(rng.normal()));
            pair.up = Tensor::zeros({rank, dim}, true);
        }
        slot.lora.push_back(std::move(layer));
    }
    const int n_classes = static_cast<int>(class_ids.size());
    slot.head_w = Tensor::zeros({dim, n_classes}, true);
    for (auto& v : slot.head_w.data()) v = snap32(real(0.02) * static_cast<real>(rng.normal()));
    slot.head_b = Tensor::zeros({n_classes}, true);
    return slot;
}

void extend_head(AdapterSlot& slot, const std::vector<int>& extra_class_ids, Rng& rng) {
    std::vector<int> added;
    for (int cid : extra_class_ids) {
        if (slot.class_index(cid) < 0 &&
            std::find(added.begin(), added.end(), cid) == added.end()) {
            added.push_back(cid);
        }
    }
    if (added.empty()) return;
    const int old_c = static_cast<int>(slot.class_ids.size());
    const int new_c = old_c + static_cast<int>(added.size());
    Tensor w = Tensor::zeros({slot.dim, new_c}, true);
    Tensor b = Tensor::zeros({new_c}, true);
    for (int i = 0; i < slot.dim; ++i)
        for (int j = 0; j < old_c; ++j) w.at(i, j) = slot.head_w.at(i, j);
    for (int j = 0; j < old_c; ++j) b.data()[static_cast<std::size_t>(j)] = slot.head_b.data()[static_cast<std::size_t>(j)];
    for (int i = 0; i < slot.dim; ++i)
        for (int j = old_c; j < new_c; ++j) w.at(i, j) = snap32(real(0.02) * static_cast<real>(rng.normal()));
    for (int j = old_c; j < new_c; ++j)
        b.data()[static_cast<std::size_t>(j)] = snap32(real(0.02) * static_cast<real>(rng.normal()));
    slot.head_w = w;
    slot.head_b = b;
    slot.class_ids.insert(slot.class_ids.end(), added.begin(), added.end());
}

AdapterBank::AdapterBank(int capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("adapter capacity must be >= 1 (negative means unlimited)");
}

int AdapterBank::add(AdapterSlot slot) {
    if (at_capacity()) {
        throw CapacityError("adapter bank is at capacity " + std::to_string(capacity_));
    }
    slot.id = next_id_++;
    slots_.push_back(std::move(slot));
    return slots_.back().id;
}

int AdapterBank::replace(int old_id, AdapterSlot slot) {
    const int pos = index_of(old_id);
    if (pos < 0) throw RoutingError("no adapter slot with id " + std::to_string(old_id));
    slot.id = next_id_++;
    slots_[static_cast<std::size_t>(pos)] = std::move(slot);
    return slots_[static_cast<std::size_t>(pos)].id;
}

int AdapterBank::index_of(int id) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
        if (slots_[i].id == id) return static_cast<int>(i);
    return -1;
}

const AdapterSlot& AdapterBank::by_id(int id) const {
    const int pos = index_of(id);
    if (pos < 0) throw RoutingError("no adapter slot with id " + std::to_string(id));
    return slots_[static_cast<std::size_t>(pos)];
}

AdapterSlot& AdapterBank::by_id(int id) {
    const int pos = index_of(id);
    if (pos < 0) throw RoutingError("no adapter slot with id " + std::to_string(id));
    return slots_[static_cast<std::size_t>(pos)];
}

std::vector<int> AdapterBank::ids() const {
    std::vector<int> out;
    out.reserve(slots_.size());
    for (const auto& s : slots_) out.push_back(s.id);
    return out;
}

AdapterContext AdapterContext::for_slot(const AdapterSlot& slot) {
    AdapterContext ctx;
    ctx.direct = &slot;
    return ctx;
}

AdapterContext AdapterContext::for_gate(const AdapterBank& bank, std::vector<real> gate) {
    AdapterContext ctx;
    ctx.bank = &bank;
    ctx.gate = std::move(gate);
    return ctx;
}

namespace {

// Gate contract: every entry 0 or 1, at most one active, spanning the bank.
const AdapterSlot* resolve_gate(std::span<const real> gate, const AdapterBank& bank) {
    if (gate.size() != bank.size()) {
        throw RoutingError("gate covers " + std::to_string(gate.size()) + " slots, bank has " +
                           std::to_string(bank.size()));
    }
    int active = -1;
    for (std::size_t i = 0; i < gate.size(); ++i) {
        if (gate[i] == real(0)) continue;
        if (gate[i] != real(1)) {
            throw RoutingError("gate entries must be exactly 0 or 1");
        }
        if (active >= 0) throw RoutingError("gate has more than one active entry");
        active = static_cast<int>(i);
    }
    return active < 0 ? nullptr : &bank.at(static_cast<std::size_t>(active));
}

}  // namespace

const AdapterSlot* AdapterContext::resolve() const {
    if (direct != nullptr) return direct;
    if (bank == nullptr) {
        if (!gate.empty()) throw RoutingError("gate given without an adapter bank");
        return nullptr;
    }
    return resolve_gate(gate, *bank);
}

std::vector<real> one_hot_gate(const AdapterBank& bank, int slot_id) {
    const int pos = bank.index_of(slot_id);
    if (pos < 0) throw RoutingError("gate target slot " + std::to_string(slot_id) + " is not live");
    std::vector<real> gate(bank.size(), real(0));
    gate[static_cast<std::size_t>(pos)] = real(1);
    return gate;
}

Tensor lora_delta(GradTape* tape, const AdapterSlot& slot, int layer, Proj p, const Tensor& v) {
    if (layer < 0 || layer >= slot.layers) {
        throw RoutingError("adapter layer " + std::to_string(layer) + " out of range");
    }
    const LoraPair& pair = slot.pair(layer, p);
    return matmul(tape, matmul(tape, v, pair.down), pair.up);
}

Tensor adapted_projection(GradTape* tape, const Tensor& w, const Tensor& v, std::span<const real> gate,
                          const AdapterBank& bank, int layer, Proj p) {
    const AdapterSlot* slot = resolve_gate(gate, bank);
    Tensor y = matmul(tape, v, w);
    if (slot != nullptr) {
        y = add(tape, y, lora_delta(tape, *slot, layer, p, v));
    }
    return y;
}

Tensor slot_logits(GradTape* tape, const TokenSequence& tokens, const AdapterSlot& slot,
                   const FrozenBackbone& fb) {
    AdapterContext ctx = AdapterContext::for_slot(slot);
    Tensor out = backbone_forward(tape, tokens, fb, &ctx);
    Tensor cls = slice_rows(tape, out, 0, 1);
    return add_rowvec(tape, matmul(tape, cls, slot.head_w), slot.head_b);
}

TrainStats train_adapter(AdapterSlot& slot, const std::vector<TaskSample>& data,
                         const FrozenBackbone& fb, const AdapterTrainConfig& cfg, Rng& rng) {
    TrainStats stats;
    if (cfg.epochs <= 0 || data.empty()) return stats;
    std::vector<int> local_labels(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int li = slot.class_index(data[i].label);
        if (li < 0) {
            throw LabelError("label " + std::to_string(data[i].label) +
                             " is not covered by this adapter's classes");
        }
        local_labels[i] = li;
    }

    AdamWConfig oc;
    oc.lr = cfg.lr;
    AdamW optimizer(slot.params(), oc);

    const int n = static_cast<int>(data.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    bool first = true;
    for (int e = 0; e < cfg.epochs; ++e) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.batch) {
            const int stop = std::min(n, start + cfg.batch);
            GradTape tape;
            std::vector<Tensor> rows;
            std::vector<int> batch_labels;
            for (int i = start; i < stop; ++i) {
                const int idx = order[static_cast<std::size_t>(i)];
                rows.push_back(slot_logits(&tape, data[static_cast<std::size_t>(idx)].tokens, slot, fb));
                batch_labels.push_back(local_labels[static_cast<std::size_t>(idx)]);
            }
            Tensor logits = concat_rows(&tape, rows);
            Tensor loss = cross_entropy(&tape, logits, batch_labels);
            if (first) {
                stats.initial_loss = loss.item();
                first = false;
            }
            stats.final_loss = loss.item();
            tape.backward(loss);
            optimizer.step();
            optimizer.zero_grad();
            ++stats.steps;
        }
    }
    slot.snap_f32();
    return stats;
}

Prediction predict(const TokenSequence& tokens, std::span<const real> gate, const AdapterBank& bank,
                   const FrozenBackbone& fb) {
    if (bank.empty()) throw RoutingError("prediction requires at least one adapter slot");
    const AdapterSlot* slot = resolve_gate(gate, bank);
    if (slot == nullptr) throw RoutingError("prediction requires an active gate entry");
    Tensor logits = slot_logits(nullptr, tokens, *slot, fb);
    Tensor probs = softmax(nullptr, logits, 1);
    Prediction pred;
    pred.class_ids = slot->class_ids;
    pred.probs = probs.data();
    int best = 0;
    for (int j = 1; j < probs.cols(); ++j)
        if (probs.at(0, j) > probs.at(0, best)) best = j;
    pred.label = slot->class_ids[static_cast<std::size_t>(best)];
    return pred;
}

long adapter_param_count(const AdapterSlot& slot) {
    return adapter_lora_param_count(slot) + adapter_head_param_count(slot);
}

long adapter_lora_param_count(const AdapterSlot& slot) {
    long n = 0;
    for (const auto& layer : slot.lora)
        for (const auto& pair : layer) n += pair.down.size() + pair.up.size();
    return n;
}

long adapter_head_param_count(const AdapterSlot& slot) {
    return static_cast<long>(slot.head_w.size() + slot.head_b.size());
}

long adapter_param_count(const AdapterBank& bank) {
    long n = 0;
    for (std::size_t i = 0; i < bank.size(); ++i) n += adapter_param_count(bank.at(i));
    return n;
}

long adapter_lora_param_count(const AdapterBank& bank) {
    long n = 0;
    for (std::size_t i = 0; i < bank.size(); ++i) n += adapter_lora_param_count(bank.at(i));
    return n;
}

long adapter_head_param_count(const AdapterBank& bank) {
    long n = 0;
    for (std::size_t i = 0; i < bank.size(); ++i) n += adapter_head_param_count(bank.at(i));
    return n;
}

}  // namespace rtcl
