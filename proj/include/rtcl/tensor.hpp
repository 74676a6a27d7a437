#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rtcl/common.hpp"

namespace rtcl {

// Dense row-major tensor with a shared node, so copies alias the same
// storage. Gradient buffers exist only while requires_grad is set; a tensor
// with requires_grad=false never accumulates gradient.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, real value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<real> data, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }

    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    // 2-D conveniences; throw ShapeError on other ranks.
    int rows() const;
    int cols() const;
    real& at(int r, int c);
    real at(int r, int c) const;

    std::vector<real>& data() { return node_->data; }
    const std::vector<real>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);

    std::vector<real>& grad();
    const std::vector<real>& grad() const;
    void zero_grad();

    // Adds g elementwise into the gradient buffer; no-op when grad is untracked.
    // Mutates the shared node, so it is callable through const handles.
    void accumulate_grad(std::span<const real> g) const;

    real item() const;

    // Rounds every element through float32 in place.
    void snap_f32();

    Tensor clone() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    const void* node_id() const { return node_.get(); }

private:
    struct Node {
        std::vector<int> shape;
        std::vector<real> data;
        std::vector<real> grad;
        bool requires_grad = false;
    };

    std::shared_ptr<Node> node_;
};

// Ordered record of backward closures. Replaying runs them in reverse
// recorded order exactly once, then clears the record.
class GradTape {
public:
    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    std::size_t recorded() const { return ops_.size(); }

    // Seeds loss.grad with 1 and replays. Returns the number of ops executed.
    std::size_t backward(Tensor& loss);

    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

}  // namespace rtcl
