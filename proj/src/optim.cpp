#include "rtcl/optim.hpp"

#include <cmath>

namespace rtcl {

void AdamWState::init(std::span<const Tensor> params) {
    m.clear();
    v.clear();
    step = 0;
    for (const auto& p : params) {
        m.emplace_back(p.data().size(), real(0));
        v.emplace_back(p.data().size(), real(0));
    }
}

namespace {

void adamw_apply(std::span<Tensor> params, const std::vector<const std::vector<real>*>& grads,
                 AdamWState& state) {
    if (!state.initialized()) state.init({params.data(), params.size()});
    if (state.m.size() != params.size()) {
        throw ShapeError("optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
    }
    state.step += 1;
    const auto& c = state.cfg;
    const real bc1 = real(1) - std::pow(c.beta1, static_cast<real>(state.step));
    const real bc2 = real(1) - std::pow(c.beta2, static_cast<real>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi].data();
        const auto& g = *grads[pi];
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        if (g.size() != p.size() || m.size() != p.size()) {
            throw ShapeError("adamw_step: buffer size mismatch on parameter " + std::to_string(pi));
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] *= real(1) - c.lr * c.weight_decay;
            m[i] = c.beta1 * m[i] + (real(1) - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (real(1) - c.beta2) * g[i] * g[i];
            const real mhat = m[i] / bc1;
            const real vhat = v[i] / bc2;
            p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

}  // namespace

void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamWState& state) {
    if (params.size() != grads.size()) {
        throw ShapeError("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    }
    std::vector<const std::vector<real>*> g;
    g.reserve(grads.size());
    for (const auto& t : grads) g.push_back(&t.data());
    adamw_apply(params, g, state);
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)) {
    state_.cfg = cfg;
    state_.init(params_);
}

void AdamW::step() {
    std::vector<const std::vector<real>*> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(&p.grad());
    adamw_apply(params_, g, state_);
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace rtcl
