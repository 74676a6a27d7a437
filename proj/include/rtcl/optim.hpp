#pragma once

#include <span>
#include <vector>

#include "rtcl/tensor.hpp"

namespace rtcl {

struct AdamWConfig {
    real lr = real(1e-3);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real weight_decay = real(0.01);
    real eps = real(1e-8);
};

// Per-parameter moment buffers plus the shared step counter.
struct AdamWState {
    AdamWConfig cfg;
    long step = 0;
    std::vector<std::vector<real>> m;
    std::vector<std::vector<real>> v;

    void init(std::span<const Tensor> params);
    bool initialized() const { return !m.empty(); }
};

// Decoupled weight decay applied multiplicatively before the moment step:
// p <- p * (1 - lr * wd), then the bias-corrected Adam update.
void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamWState& state);

// Convenience wrapper that reads gradients straight from the parameters.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    void step();
    void zero_grad();

    const AdamWState& state() const { return state_; }

private:
    std::vector<Tensor> params_;
    AdamWState state_;
};

}  // namespace rtcl
