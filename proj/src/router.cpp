#include "rtcl/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rtcl/ops.hpp"

namespace rtcl {

namespace {

Tensor gaussian(std::vector<int> shape, real sigma, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.data()) v = snap32(sigma * static_cast<real>(rng.normal()));
    return t;
}

}  // namespace

TaskAutoencoder TaskAutoencoder::shallow(int input_dim, int latent, Rng& rng) {
    if (input_dim < 1 || latent < 1) throw ConfigError("autoencoder dims must be >= 1");
    TaskAutoencoder ae;
    ae.input_dim = input_dim;
    ae.latent = latent;
    ae.deep = false;
    const real s_enc = real(1) / std::sqrt(static_cast<real>(input_dim));
    const real s_dec = real(1) / std::sqrt(static_cast<real>(latent));
    ae.ws.push_back(gaussian({input_dim, latent}, s_enc, rng));
    ae.ws.push_back(gaussian({latent, input_dim}, s_dec, rng));
    return ae;
}

TaskAutoencoder TaskAutoencoder::four_layer(int input_dim, int hidden, int latent, Rng& rng) {
    if (input_dim < 1 || hidden < 1 || latent < 1) throw ConfigError("autoencoder dims must be >= 1");
    TaskAutoencoder ae;
    ae.input_dim = input_dim;
    ae.latent = latent;
    ae.hidden = hidden;
    ae.deep = true;
    const int dims[5] = {input_dim, hidden, latent, hidden, input_dim};
    for (int l = 0; l < 4; ++l) {
        const real sigma = real(1) / std::sqrt(static_cast<real>(dims[l]));
        ae.ws.push_back(gaussian({dims[l], dims[l + 1]}, sigma, rng));
        ae.bs.push_back(Tensor::zeros({dims[l + 1]}, true));
    }
    return ae;
}

Tensor TaskAutoencoder::encode(GradTape* tape, const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != input_dim) {
        throw ShapeError("autoencoder expects [N x " + std::to_string(input_dim) + "] input, got " +
                         dims_str(x.shape()));
    }
    if (!deep) return matmul(tape, x, ws[0]);
    Tensor h = sigmoid(tape, add_rowvec(tape, matmul(tape, x, ws[0]), bs[0]));
    return add_rowvec(tape, matmul(tape, h, ws[1]), bs[1]);
}

Tensor TaskAutoencoder::reconstruct(GradTape* tape, const Tensor& x) const {
    Tensor z = encode(tape, x);
    if (!deep) return matmul(tape, z, ws[1]);
    Tensor h = sigmoid(tape, z);
    h = sigmoid(tape, add_rowvec(tape, matmul(tape, h, ws[2]), bs[2]));
    return add_rowvec(tape, matmul(tape, h, ws[3]), bs[3]);
}

std::vector<Tensor> TaskAutoencoder::params() {
    std::vector<Tensor> out = ws;
    out.insert(out.end(), bs.begin(), bs.end());
    return out;
}

std::vector<Tensor> TaskAutoencoder::params() const {
    return const_cast<TaskAutoencoder*>(this)->params();
}

long TaskAutoencoder::param_count() const {
    long n = 0;
    for (const auto& t : ws) n += t.size();
    for (const auto& t : bs) n += t.size();
    return n;
}

void TaskAutoencoder::snap_f32() {
    for (auto& t : params()) t.snap_f32();
}

long RouterBank::param_count() const {
    long n = 0;
    for (const auto& ae : aes) n += ae.param_count();
    return n;
}

int GateMap::slot_for_task(int task) const {
    if (task < 0 || task >= static_cast<int>(table.size())) {
        throw RoutingError("gate map has no entry for task " + std::to_string(task));
    }
    return table[static_cast<std::size_t>(task)];
}

void GateMap::verify(const AdapterBank& bank) const {
    for (std::size_t t = 0; t < table.size(); ++t) {
        if (!bank.has_id(table[t])) {
            throw RoutingError("gate map entry for task " + std::to_string(t) +
                               " points at removed slot " + std::to_string(table[t]));
        }
    }
    for (int id : bank.ids()) {
        if (std::find(table.begin(), table.end(), id) == table.end()) {
            throw RoutingError("live slot " + std::to_string(id) + " is unreachable from the gate map");
        }
    }
}

Tensor ae_input(const Tensor& tokens) {
    if (tokens.rank() != 2 || tokens.rows() < 1) {
        throw ShapeError("ae_input expects a non-empty token sequence, got " + dims_str(tokens.shape()));
    }
    return sigmoid(nullptr, mean_rows(nullptr, tokens));
}

Tensor ae_input_batch(const std::vector<Tensor>& token_seqs) {
    if (token_seqs.empty()) throw ShapeError("ae_input_batch: empty sequence list");
    std::vector<Tensor> rows;
    rows.reserve(token_seqs.size());
    for (const auto& t : token_seqs) rows.push_back(ae_input(t));
    return concat_rows(nullptr, rows);
}

TrainStats train_ae(TaskAutoencoder& ae, const std::vector<Tensor>& token_seqs,
                    const AeTrainConfig& cfg, Rng& rng) {
    return train_ae_on_inputs(ae, ae_input_batch(token_seqs), cfg, rng);
}

TrainStats train_ae_on_inputs(TaskAutoencoder& ae, const Tensor& inputs, const AeTrainConfig& cfg,
                              Rng& rng) {
    TrainStats stats;
    if (cfg.epochs <= 0) return stats;
    const int n = inputs.rows();
    AdamWConfig oc;
    oc.lr = cfg.lr;
    AdamW optimizer(ae.params(), oc);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    bool first = true;
    for (int e = 0; e < cfg.epochs; ++e) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.batch) {
            const int stop = std::min(n, start + cfg.batch);
            std::vector<Tensor> rows;
            rows.reserve(static_cast<std::size_t>(stop - start));
            for (int i = start; i < stop; ++i)
                rows.push_back(slice_rows(nullptr, inputs, order[static_cast<std::size_t>(i)], 1));
            Tensor batch = concat_rows(nullptr, rows);
            GradTape tape;
            Tensor recon = ae.reconstruct(&tape, batch);
            Tensor loss = mse(&tape, recon, batch);
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
    ae.snap_f32();
    return stats;
}

real reconstruction_loss(const TaskAutoencoder& ae, const Tensor& tokens) {
    Tensor x = ae_input(tokens);
    Tensor recon = ae.reconstruct(nullptr, x);
    real s = 0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const real d = x.data()[static_cast<std::size_t>(i)] - recon.data()[static_cast<std::size_t>(i)];
        s += d * d;
    }
    return s / static_cast<real>(x.size());
}

real mean_reconstruction_loss(const TaskAutoencoder& ae, const std::vector<Tensor>& token_seqs) {
    if (token_seqs.empty()) throw Error("mean_reconstruction_loss: empty evaluation set");
    real s = 0;
    for (const auto& t : token_seqs) s += reconstruction_loss(ae, t);
    return s / static_cast<real>(token_seqs.size());
}

RouteResult route(const Tensor& tokens, const RouterBank& router, const GateMap& gate_map,
                  const AdapterBank& bank) {
    if (router.empty()) throw RoutingError("routing requires at least one task autoencoder");
    RouteResult result;
    real best = 0;
    for (std::size_t e = 0; e < router.aes.size(); ++e) {
        const real loss = reconstruction_loss(router.aes[e], tokens);
        if (result.task < 0 || loss < best) {
            best = loss;
            result.task = static_cast<int>(e);
        }
    }
    result.slot_id = gate_map.slot_for_task(result.task);
    result.gate = one_hot_gate(bank, result.slot_id);
    return result;
}

void remap_gate(GateMap& gate_map, int donor_task, int new_slot_id, const AdapterBank& bank) {
    if (!bank.has_id(new_slot_id)) {
        throw RoutingError("gate remap target slot " + std::to_string(new_slot_id) + " is not live");
    }
    const int old_slot = gate_map.slot_for_task(donor_task);
    for (auto& entry : gate_map.table) {
        if (entry == old_slot) entry = new_slot_id;
    }
}

std::vector<std::vector<real>> routing_heatmap(const RouterBank& router,
                                               const std::vector<std::vector<Tensor>>& per_task_tokens) {
    std::vector<std::vector<real>> grid;
    for (const auto& task_tokens : per_task_tokens) {
        if (task_tokens.empty()) throw Error("routing_heatmap: a task has no evaluation data");
        std::vector<real> row;
        row.reserve(router.size());
        for (const auto& ae : router.aes) row.push_back(mean_reconstruction_loss(ae, task_tokens));
        const auto [mn, mx] = std::minmax_element(row.begin(), row.end());
        const real lo = *mn, hi = *mx;
        if (hi > lo) {
            for (auto& v : row) v = (v - lo) / (hi - lo);
        } else {
            for (auto& v : row) v = real(0);
        }
        grid.push_back(std::move(row));
    }
    return grid;
}

}  // namespace rtcl
