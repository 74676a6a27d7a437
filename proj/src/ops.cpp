#include "rtcl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rtcl {

namespace {

constexpr real kInvSqrt2 = real(0.70710678118654752440084436210485);
constexpr real kInvSqrt2Pi = real(0.39894228040143267793994605993438);

bool tracked(GradTape* tape, const Tensor& a) { return tape != nullptr && a.requires_grad(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + dims_str(a.shape()) + " vs " +
                         dims_str(b.shape()));
    }
}

void check_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + dims_str(t.shape()));
    }
}

}  // namespace

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const bool rg = tracked(tape, a) || tracked(tape, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const auto& da = a.data();
    const auto& db = b.data();
    auto& dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = da[i] + db[i];
    if (rg) {
        tape->record([a, b, out]() mutable {
            a.accumulate_grad(out.grad());
            b.accumulate_grad(out.grad());
        });
    }
    return out;
}

Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const bool rg = tracked(tape, a) || tracked(tape, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::int64_t i = 0; i < out.size(); ++i)
        out.data()[static_cast<std::size_t>(i)] =
            a.data()[static_cast<std::size_t>(i)] - b.data()[static_cast<std::size_t>(i)];
    if (rg) {
        tape->record([a, b, out]() mutable {
            a.accumulate_grad(out.grad());
            if (b.requires_grad()) {
                std::vector<real> neg(out.grad().size());
                for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -out.grad()[i];
                b.accumulate_grad(neg);
            }
        });
    }
    return out;
}

Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const bool rg = tracked(tape, a) || tracked(tape, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (rg) {
        tape->record([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                std::vector<real> ga(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b.data()[i];
                a.accumulate_grad(ga);
            }
            if (b.requires_grad()) {
                std::vector<real> gb(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a.data()[i];
                b.accumulate_grad(gb);
            }
        });
    }
    return out;
}

Tensor scale(GradTape* tape, const Tensor& a, real c) {
    const bool rg = tracked(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * c;
    if (rg) {
        tape->record([a, out, c]() mutable {
            std::vector<real> ga(out.grad().size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = out.grad()[i] * c;
            a.accumulate_grad(ga);
        });
    }
    return out;
}

Tensor add_rowvec(GradTape* tape, const Tensor& m, const Tensor& v) {
    check_2d(m, "add_rowvec");
    const int r = m.rows(), c = m.cols();
    if (v.size() != c) {
        throw ShapeError("add_rowvec: row vector " + dims_str(v.shape()) + " does not span " +
                         std::to_string(c) + " columns");
    }
    const bool rg = tracked(tape, m) || tracked(tape, v);
    Tensor out = Tensor::zeros(m.shape(), rg);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(i) * c + j] =
                m.data()[static_cast<std::size_t>(i) * c + j] + v.data()[static_cast<std::size_t>(j)];
    if (rg) {
        tape->record([m, v, out, r, c]() mutable {
            m.accumulate_grad(out.grad());
            if (v.requires_grad()) {
                std::vector<real> gv(static_cast<std::size_t>(c), real(0));
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        gv[static_cast<std::size_t>(j)] += out.grad()[static_cast<std::size_t>(i) * c + j];
                v.accumulate_grad(gv);
            }
        });
    }
    return out;
}

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + dims_str(a.shape()) + " x " +
                         dims_str(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    const bool rg = tracked(tape, a) || tracked(tape, b);
    Tensor out = Tensor::zeros({m, n}, rg);
    const real* pa = a.data().data();
    const real* pb = b.data().data();
    real* po = out.data().data();
    for (int i = 0; i < m; ++i) {
        for (int l = 0; l < k; ++l) {
            const real av = pa[static_cast<std::size_t>(i) * k + l];
            if (av == real(0)) continue;
            const real* brow = pb + static_cast<std::size_t>(l) * n;
            real* orow = po + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (rg) {
        tape->record([a, b, out, m, k, n]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                std::vector<real> ga(static_cast<std::size_t>(m) * k, real(0));
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const real gv = g[static_cast<std::size_t>(i) * n + j];
                        if (gv == real(0)) continue;
                        for (int l = 0; l < k; ++l)
                            ga[static_cast<std::size_t>(i) * k + l] +=
                                gv * b.data()[static_cast<std::size_t>(l) * n + j];
                    }
                a.accumulate_grad(ga);
            }
            if (b.requires_grad()) {
                std::vector<real> gb(static_cast<std::size_t>(k) * n, real(0));
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        const real av = a.data()[static_cast<std::size_t>(i) * k + l];
                        if (av == real(0)) continue;
                        for (int j = 0; j < n; ++j)
                            gb[static_cast<std::size_t>(l) * n + j] +=
                                av * g[static_cast<std::size_t>(i) * n + j];
                    }
                b.accumulate_grad(gb);
            }
        });
    }
    return out;
}

Tensor transpose(GradTape* tape, const Tensor& a) {
    check_2d(a, "transpose");
    const int r = a.rows(), c = a.cols();
    const bool rg = tracked(tape, a);
    Tensor out = Tensor::zeros({c, r}, rg);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(j) * r + i] = a.data()[static_cast<std::size_t>(i) * c + j];
    if (rg) {
        tape->record([a, out, r, c]() mutable {
            std::vector<real> ga(static_cast<std::size_t>(r) * c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    ga[static_cast<std::size_t>(i) * c + j] = out.grad()[static_cast<std::size_t>(j) * r + i];
            a.accumulate_grad(ga);
        });
    }
    return out;
}

Tensor sigmoid(GradTape* tape, const Tensor& a) {
    const bool rg = tracked(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < out.data().size(); ++i) {
        const real x = a.data()[i];
        out.data()[i] = x >= real(0) ? real(1) / (real(1) + std::exp(-x))
                                     : std::exp(x) / (real(1) + std::exp(x));
    }
    if (rg) {
        tape->record([a, out]() mutable {
            std::vector<real> ga(out.grad().size());
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const real y = out.data()[i];
                ga[i] = out.grad()[i] * y * (real(1) - y);
            }
            a.accumulate_grad(ga);
        });
    }
    return out;
}

Tensor gelu(GradTape* tape, const Tensor& a) {
    const bool rg = tracked(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    for (std::size_t i = 0; i < out.data().size(); ++i) {
        const real x = a.data()[i];
        out.data()[i] = real(0.5) * x * (real(1) + std::erf(x * kInvSqrt2));
    }
    if (rg) {
        tape->record([a, out]() mutable {
            std::vector<real> ga(out.grad().size());
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const real x = a.data()[i];
                const real cdf = real(0.5) * (real(1) + std::erf(x * kInvSqrt2));
                const real pdf = kInvSqrt2Pi * std::exp(real(-0.5) * x * x);
                ga[i] = out.grad()[i] * (cdf + x * pdf);
            }
            a.accumulate_grad(ga);
        });
    }
    return out;
}

namespace {

// Shared softmax kernel over generic strided slices.
void softmax_slices(const std::vector<real>& in, std::vector<real>& outv, int n_slices, int slice_len,
                    int stride, int base_stride) {
    for (int s = 0; s < n_slices; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * base_stride;
        real mx = -std::numeric_limits<real>::infinity();
        for (int i = 0; i < slice_len; ++i) mx = std::max(mx, in[base + static_cast<std::size_t>(i) * stride]);
        real z = 0;
        for (int i = 0; i < slice_len; ++i) {
            const real e = std::exp(in[base + static_cast<std::size_t>(i) * stride] - mx);
            outv[base + static_cast<std::size_t>(i) * stride] = e;
            z += e;
        }
        for (int i = 0; i < slice_len; ++i) outv[base + static_cast<std::size_t>(i) * stride] /= z;
    }
}

void softmax_backward_slices(const std::vector<real>& p, const std::vector<real>& g, std::vector<real>& gx,
                             int n_slices, int slice_len, int stride, int base_stride) {
    for (int s = 0; s < n_slices; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * base_stride;
        real dot = 0;
        for (int i = 0; i < slice_len; ++i) {
            const std::size_t k = base + static_cast<std::size_t>(i) * stride;
            dot += g[k] * p[k];
        }
        for (int i = 0; i < slice_len; ++i) {
            const std::size_t k = base + static_cast<std::size_t>(i) * stride;
            gx[k] = p[k] * (g[k] - dot);
        }
    }
}

}  // namespace

Tensor softmax(GradTape* tape, const Tensor& a, int axis) {
    if (a.rank() == 1) {
        if (axis != 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for 1-D input");
        const bool rg = tracked(tape, a);
        Tensor out = Tensor::zeros(a.shape(), rg);
        softmax_slices(a.data(), out.data(), 1, a.dim(0), 1, 0);
        if (rg) {
            tape->record([a, out]() mutable {
                std::vector<real> gx(out.data().size());
                softmax_backward_slices(out.data(), out.grad(), gx, 1, static_cast<int>(out.size()), 1, 0);
                a.accumulate_grad(gx);
            });
        }
        return out;
    }
    check_2d(a, "softmax");
    if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1, got " + std::to_string(axis));
    const int r = a.rows(), c = a.cols();
    const bool rg = tracked(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const int n_slices = axis == 1 ? r : c;
    const int slice_len = axis == 1 ? c : r;
    const int stride = axis == 1 ? 1 : c;
    const int base_stride = axis == 1 ? c : 1;
    softmax_slices(a.data(), out.data(), n_slices, slice_len, stride, base_stride);
    if (rg) {
        tape->record([a, out, n_slices, slice_len, stride, base_stride]() mutable {
            std::vector<real> gx(out.data().size());
            softmax_backward_slices(out.data(), out.grad(), gx, n_slices, slice_len, stride, base_stride);
            a.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor layer_norm(GradTape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
    check_2d(x, "layer_norm");
    const int r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c) {
        throw ShapeError("layer_norm: scale/shift must have " + std::to_string(c) + " elements");
    }
    const bool rg = tracked(tape, x) || tracked(tape, gamma) || tracked(tape, beta);
    Tensor out = Tensor::zeros(x.shape(), rg);
    std::vector<real> xhat(static_cast<std::size_t>(r) * c);
    std::vector<real> inv_std(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        real mean = 0;
        for (int j = 0; j < c; ++j) mean += x.data()[base + j];
        mean /= c;
        real var = 0;
        for (int j = 0; j < c; ++j) {
            const real d = x.data()[base + j] - mean;
            var += d * d;
        }
        var /= c;
        const real is = real(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < c; ++j) {
            const real h = (x.data()[base + j] - mean) * is;
            xhat[base + j] = h;
            out.data()[base + j] = gamma.data()[static_cast<std::size_t>(j)] * h +
                                   beta.data()[static_cast<std::size_t>(j)];
        }
    }
    if (rg) {
        tape->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
                      c]() mutable {
            const auto& g = out.grad();
            if (gamma.requires_grad()) {
                std::vector<real> gg(static_cast<std::size_t>(c), real(0));
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        gg[static_cast<std::size_t>(j)] +=
                            g[static_cast<std::size_t>(i) * c + j] * xhat[static_cast<std::size_t>(i) * c + j];
                gamma.accumulate_grad(gg);
            }
            if (beta.requires_grad()) {
                std::vector<real> gb(static_cast<std::size_t>(c), real(0));
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * c + j];
                beta.accumulate_grad(gb);
            }
            if (x.requires_grad()) {
                std::vector<real> gx(static_cast<std::size_t>(r) * c);
                for (int i = 0; i < r; ++i) {
                    const std::size_t base = static_cast<std::size_t>(i) * c;
                    real mean_dh = 0, mean_dh_xhat = 0;
                    for (int j = 0; j < c; ++j) {
                        const real dh = g[base + j] * gamma.data()[static_cast<std::size_t>(j)];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat[base + j];
                    }
                    mean_dh /= c;
                    mean_dh_xhat /= c;
                    for (int j = 0; j < c; ++j) {
                        const real dh = g[base + j] * gamma.data()[static_cast<std::size_t>(j)];
                        gx[base + j] = (dh - mean_dh - xhat[base + j] * mean_dh_xhat) *
                                       inv_std[static_cast<std::size_t>(i)];
                    }
                }
                x.accumulate_grad(gx);
            }
        });
    }
    return out;
}

Tensor mean_rows(GradTape* tape, const Tensor& x) {
    check_2d(x, "mean_rows");
    const int r = x.rows(), c = x.cols();
    const bool rg = tracked(tape, x);
    Tensor out = Tensor::zeros({1, c}, rg);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(j)] += x.data()[static_cast<std::size_t>(i) * c + j];
    for (int j = 0; j < c; ++j) out.data()[static_cast<std::size_t>(j)] /= r;
    if (rg) {
        tape->record([x, out, r, c]() mutable {
            std::vector<real> gx(static_cast<std::size_t>(r) * c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    gx[static_cast<std::size_t>(i) * c + j] = out.grad()[static_cast<std::size_t>(j)] / r;
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor sum(GradTape* tape, const Tensor& x) {
    const bool rg = tracked(tape, x);
    Tensor out = Tensor::zeros({1}, rg);
    real s = 0;
    for (real v : x.data()) s += v;
    out.data()[0] = s;
    if (rg) {
        tape->record([x, out]() mutable {
            std::vector<real> gx(x.data().size(), out.grad()[0]);
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor slice_rows(GradTape* tape, const Tensor& x, int start, int count) {
    check_2d(x, "slice_rows");
    const int r = x.rows(), c = x.cols();
    if (start < 0 || count < 1 || start + count > r) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + std::to_string(r) + " rows");
    }
    const bool rg = tracked(tape, x);
    Tensor out = Tensor::zeros({count, c}, rg);
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(start) * c,
                static_cast<std::size_t>(count) * c, out.data().begin());
    if (rg) {
        tape->record([x, out, start, c]() mutable {
            std::vector<real> gx(x.data().size(), real(0));
            std::copy(out.grad().begin(), out.grad().end(),
                      gx.begin() + static_cast<std::ptrdiff_t>(start) * c);
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor slice_cols(GradTape* tape, const Tensor& x, int start, int count) {
    check_2d(x, "slice_cols");
    const int r = x.rows(), c = x.cols();
    if (start < 0 || count < 1 || start + count > c) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + std::to_string(c) + " columns");
    }
    const bool rg = tracked(tape, x);
    Tensor out = Tensor::zeros({r, count}, rg);
    for (int i = 0; i < r; ++i)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(i) * c + start,
                    static_cast<std::size_t>(count), out.data().begin() + static_cast<std::ptrdiff_t>(i) * count);
    if (rg) {
        tape->record([x, out, start, r, c, count]() mutable {
            std::vector<real> gx(x.data().size(), real(0));
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < count; ++j)
                    gx[static_cast<std::size_t>(i) * c + start + j] =
                        out.grad()[static_cast<std::size_t>(i) * count + j];
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor gather_cols(GradTape* tape, const Tensor& x, const std::vector<int>& cols) {
    check_2d(x, "gather_cols");
    const int r = x.rows(), c = x.cols();
    const int k = static_cast<int>(cols.size());
    if (k == 0) throw ShapeError("gather_cols: empty column list");
    for (int j : cols) {
        if (j < 0 || j >= c) throw IndexError("gather_cols: column " + std::to_string(j) + " out of range");
    }
    const bool rg = tracked(tape, x);
    Tensor out = Tensor::zeros({r, k}, rg);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < k; ++j)
            out.data()[static_cast<std::size_t>(i) * k + j] =
                x.data()[static_cast<std::size_t>(i) * c + cols[static_cast<std::size_t>(j)]];
    if (rg) {
        tape->record([x, out, cols, r, c, k]() mutable {
            std::vector<real> gx(x.data().size(), real(0));
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < k; ++j)
                    gx[static_cast<std::size_t>(i) * c + cols[static_cast<std::size_t>(j)]] +=
                        out.grad()[static_cast<std::size_t>(i) * k + j];
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor concat_rows(GradTape* tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int c = parts[0].cols();
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        check_2d(p, "concat_rows");
        if (p.cols() != c) throw ShapeError("concat_rows: column mismatch " + dims_str(p.shape()));
        total += p.rows();
        rg = rg || tracked(tape, p);
    }
    Tensor out = Tensor::zeros({total, c}, rg);
    int row = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(row) * c);
        row += p.rows();
    }
    if (rg) {
        std::vector<Tensor> held(parts.begin(), parts.end());
        tape->record([held = std::move(held), out, c]() mutable {
            int row = 0;
            for (auto& p : held) {
                if (p.requires_grad()) {
                    std::vector<real> gp(static_cast<std::size_t>(p.rows()) * c);
                    std::copy_n(out.grad().begin() + static_cast<std::ptrdiff_t>(row) * c, gp.size(),
                                gp.begin());
                    p.accumulate_grad(gp);
                }
                row += p.rows();
            }
        });
    }
    return out;
}

Tensor concat_cols(GradTape* tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int r = parts[0].rows();
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        check_2d(p, "concat_cols");
        if (p.rows() != r) throw ShapeError("concat_cols: row mismatch " + dims_str(p.shape()));
        total += p.cols();
        rg = rg || tracked(tape, p);
    }
    Tensor out = Tensor::zeros({r, total}, rg);
    int col = 0;
    for (const auto& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < r; ++i)
            std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(i) * pc, static_cast<std::size_t>(pc),
                        out.data().begin() + static_cast<std::ptrdiff_t>(i) * total + col);
        col += pc;
    }
    if (rg) {
        std::vector<Tensor> held(parts.begin(), parts.end());
        tape->record([held = std::move(held), out, r, total]() mutable {
            int col = 0;
            for (auto& p : held) {
                const int pc = p.cols();
                if (p.requires_grad()) {
                    std::vector<real> gp(static_cast<std::size_t>(r) * pc);
                    for (int i = 0; i < r; ++i)
                        std::copy_n(out.grad().begin() + static_cast<std::ptrdiff_t>(i) * total + col,
                                    static_cast<std::size_t>(pc),
                                    gp.begin() + static_cast<std::ptrdiff_t>(i) * pc);
                    p.accumulate_grad(gp);
                }
                col += pc;
            }
        });
    }
    return out;
}

Tensor cross_entropy(GradTape* tape, const Tensor& logits, const std::vector<int>& labels) {
    check_2d(logits, "cross_entropy");
    const int b = logits.rows(), c = logits.cols();
    if (static_cast<int>(labels.size()) != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || y >= c) {
            throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(c) + ")");
        }
    }
    const bool rg = tracked(tape, logits);
    Tensor out = Tensor::zeros({1}, rg);
    std::vector<real> probs(static_cast<std::size_t>(b) * c);
    real loss = 0;
    for (int i = 0; i < b; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        real mx = -std::numeric_limits<real>::infinity();
        for (int j = 0; j < c; ++j) mx = std::max(mx, logits.data()[base + j]);
        real z = 0;
        for (int j = 0; j < c; ++j) {
            const real e = std::exp(logits.data()[base + j] - mx);
            probs[base + j] = e;
            z += e;
        }
        for (int j = 0; j < c; ++j) probs[base + j] /= z;
        loss += std::log(z) + mx - logits.data()[base + static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    out.data()[0] = loss / b;
    if (rg) {
        tape->record([logits, out, labels, probs = std::move(probs), b, c]() mutable {
            const real g = out.grad()[0] / b;
            std::vector<real> gx(probs.size());
            for (int i = 0; i < b; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j) gx[base + j] = probs[base + j] * g;
                gx[base + static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] -= g;
            }
            logits.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor mse(GradTape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    const bool rg = tracked(tape, a) || tracked(tape, b);
    Tensor out = Tensor::zeros({1}, rg);
    const std::size_t n = a.data().size();
    real s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const real d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    out.data()[0] = s / static_cast<real>(n);
    if (rg) {
        tape->record([a, b, out, n]() mutable {
            const real g = out.grad()[0] * real(2) / static_cast<real>(n);
            if (a.requires_grad()) {
                std::vector<real> ga(n);
                for (std::size_t i = 0; i < n; ++i) ga[i] = g * (a.data()[i] - b.data()[i]);
                a.accumulate_grad(ga);
            }
            if (b.requires_grad()) {
                std::vector<real> gb(n);
                for (std::size_t i = 0; i < n; ++i) gb[i] = g * (b.data()[i] - a.data()[i]);
                b.accumulate_grad(gb);
            }
        });
    }
    return out;
}

GradCheckReport grad_check(const std::function<Tensor(GradTape*)>& f, std::span<Tensor> params,
                           double step, double tol) {
    GradCheckReport report;
    for (auto& p : params) p.zero_grad();

    GradTape tape;
    Tensor loss = f(&tape);
    if (!std::isfinite(loss.item())) {
        report.pass = false;
        report.detail = "non-finite loss in forward pass";
        return report;
    }
    tape.backward(loss);

    std::vector<std::vector<real>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.requires_grad() ? p.grad() : std::vector<real>(p.data().size(), real(0)));

    double worst = 0.0;
    std::string worst_at;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p.data().size(); ++i) {
            const real saved = p.data()[i];
            p.data()[i] = saved + static_cast<real>(step);
            const real up = f(nullptr).item();
            p.data()[i] = saved - static_cast<real>(step);
            const real down = f(nullptr).item();
            p.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                report.pass = false;
                report.detail = "non-finite loss during finite differences";
                return report;
            }
            const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * step);
            const double a = static_cast<double>(analytic[pi][i]);
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > worst) {
                worst = rel;
                worst_at = "param " + std::to_string(pi) + " elem " + std::to_string(i);
            }
        }
    }
    report.max_rel_err = worst;
    report.pass = worst < tol;
    report.detail = worst_at;
    return report;
}

}  // namespace rtcl
