#pragma once

#include <cmath>
#include <vector>

#include "rtcl/adapters.hpp"
#include "rtcl/backbone.hpp"
#include "rtcl/rng.hpp"
#include "rtcl/router.hpp"
#include "rtcl/tensor.hpp"

namespace rtcl::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, real scale = real(1),
                            bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = scale * static_cast<real>(rng.normal());
    return t;
}

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
    real m = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

// Independent scalar re-implementations used as oracles.

inline std::vector<real> softmax_oracle(const std::vector<real>& xs) {
    real mx = xs[0];
    for (real v : xs) mx = std::max(mx, v);
    real z = 0;
    std::vector<real> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = std::exp(xs[i] - mx);
        z += out[i];
    }
    for (auto& v : out) v /= z;
    return out;
}

inline real cross_entropy_row_oracle(const std::vector<real>& logits, int label) {
    const auto p = softmax_oracle(logits);
    return -std::log(p[static_cast<std::size_t>(label)]);
}

inline real mse_oracle(const std::vector<real>& a, const std::vector<real>& b) {
    real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<real>(a.size());
}

// Reference AdamW update on a single scalar, written from the update equations.
struct AdamWScalarRef {
    real m = 0, v = 0;
    long t = 0;
    real step(real p, real g, real lr, real b1, real b2, real wd, real eps) {
        t += 1;
        p *= real(1) - lr * wd;
        m = b1 * m + (real(1) - b1) * g;
        v = b2 * v + (real(1) - b2) * g * g;
        const real mh = m / (real(1) - std::pow(b1, static_cast<real>(t)));
        const real vh = v / (real(1) - std::pow(b2, static_cast<real>(t)));
        return p - lr * mh / (std::sqrt(vh) + eps);
    }
};

// Small frozen backbone for module tests.
inline FrozenBackbone tiny_backbone(uint64_t seed, int layers = 2, int dim = 32) {
    BackboneConfig cfg;
    cfg.layers = layers;
    cfg.dim = dim;
    Rng rng(seed);
    return freeze(BackboneWeights::init(cfg, rng));
}

inline TokenSequence random_tokens(const BackboneConfig& cfg, Rng& rng, real scale = real(1)) {
    return random_tensor({cfg.seq_len(), cfg.dim}, rng, scale);
}

}  // namespace rtcl::testing
