#include "rtcl/tensor.hpp"

#include <cstdint>
#include <numeric>

namespace rtcl {

namespace {

std::int64_t shape_product(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + dims_str(shape));
        n *= d;
    }
    return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    const auto n = shape_product(shape);
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(static_cast<std::size_t>(n), real(0));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, real value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.node_->data) v = value;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<real> data, bool requires_grad) {
    const auto n = shape_product(shape);
    if (n != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + dims_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

int Tensor::rows() const {
    if (rank() != 2) throw ShapeError("expected 2-D tensor, got " + dims_str(shape()));
    return dim(0);
}

int Tensor::cols() const {
    if (rank() != 2) throw ShapeError("expected 2-D tensor, got " + dims_str(shape()));
    return dim(1);
}

real& Tensor::at(int r, int c) {
    return node_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
                       static_cast<std::size_t>(c)];
}

real Tensor::at(int r, int c) const {
    return node_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
                       static_cast<std::size_t>(c)];
}

void Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
        node_->grad.assign(node_->data.size(), real(0));
    } else {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }
}

std::vector<real>& Tensor::grad() {
    if (!node_->requires_grad) throw Error("gradient requested on a tensor that does not track it");
    return node_->grad;
}

const std::vector<real>& Tensor::grad() const {
    if (!node_->requires_grad) throw Error("gradient requested on a tensor that does not track it");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), real(0));
}

void Tensor::accumulate_grad(std::span<const real> g) const {
    if (!node_->requires_grad) return;
    if (g.size() != node_->grad.size()) {
        throw ShapeError("gradient length mismatch: " + std::to_string(g.size()) + " vs " +
                         std::to_string(node_->grad.size()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
}

real Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a one-element tensor, got " + dims_str(shape()));
    return node_->data[0];
}

void Tensor::snap_f32() {
    for (auto& v : node_->data) v = snap32(v);
}

Tensor Tensor::clone() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    t.set_requires_grad(node_->requires_grad);
    return t;
}

std::size_t GradTape::backward(Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward expects a scalar loss, got " + dims_str(loss.shape()));
    if (loss.requires_grad()) {
        loss.grad()[0] += real(1);
    }
    std::size_t executed = 0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)();
        ++executed;
    }
    ops_.clear();
    return executed;
}

}  // namespace rtcl
