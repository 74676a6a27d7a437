#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rtcl/tensor.hpp"

namespace rtcl {

// Differentiable tensor ops. Every op takes the tape as its first argument;
// passing nullptr evaluates forward-only. A backward closure is recorded iff
// a tape is given and at least one input tracks gradients.

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor scale(GradTape* tape, const Tensor& a, real c);

// m: [R x C], v: [C] or [1 x C], broadcast over rows.
Tensor add_rowvec(GradTape* tape, const Tensor& m, const Tensor& v);

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor transpose(GradTape* tape, const Tensor& a);

Tensor sigmoid(GradTape* tape, const Tensor& a);
Tensor gelu(GradTape* tape, const Tensor& a);

// axis 0 normalizes down columns, axis 1 across rows; 1-D tensors use axis 0.
Tensor softmax(GradTape* tape, const Tensor& a, int axis);

Tensor layer_norm(GradTape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  real eps = real(1e-5));

// [R x C] -> [1 x C]
Tensor mean_rows(GradTape* tape, const Tensor& x);
Tensor sum(GradTape* tape, const Tensor& x);

Tensor slice_rows(GradTape* tape, const Tensor& x, int start, int count);
Tensor slice_cols(GradTape* tape, const Tensor& x, int start, int count);
Tensor gather_cols(GradTape* tape, const Tensor& x, const std::vector<int>& cols);
Tensor concat_rows(GradTape* tape, std::span<const Tensor> parts);
Tensor concat_cols(GradTape* tape, std::span<const Tensor> parts);

// Mean negative log-probability of the labeled class, over rows of logits.
Tensor cross_entropy(GradTape* tape, const Tensor& logits, const std::vector<int>& labels);
Tensor mse(GradTape* tape, const Tensor& a, const Tensor& b);

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string detail;
};

// Compares tape gradients of f against central finite differences over every
// element of params. f must be deterministic; it is re-evaluated with a null
// tape for the difference quotients.
GradCheckReport grad_check(const std::function<Tensor(GradTape*)>& f, std::span<Tensor> params,
                           double step = 1e-4, double tol = 1e-3);

}  // namespace rtcl
