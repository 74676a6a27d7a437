#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "rtcl/ops.hpp"
#include "rtcl/optim.hpp"

using namespace rtcl;
using namespace rtcl::testing;

TEST_CASE("tensor shape and data invariants") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.at(1, 2) == 6);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);

    Tensor g = Tensor::zeros({2, 2}, true);
    CHECK(g.grad().size() == 4);
    g.set_requires_grad(false);
    CHECK_THROWS_AS(g.grad(), Error);
}

TEST_CASE("untracked tensors never accumulate gradient") {
    GradTape tape;
    Tensor frozen = Tensor::from({2, 2}, {1, 2, 3, 4}, false);
    Tensor live = Tensor::from({2, 2}, {1, 0, 0, 1}, true);
    Tensor out = sum(&tape, matmul(&tape, frozen, live));
    tape.backward(out);
    CHECK_THROWS_AS(frozen.grad(), Error);
    real s = 0;
    for (real v : live.grad()) s += std::abs(v);
    CHECK(s > 0);
}

TEST_CASE("tape replays each op exactly once in reverse and clears") {
    GradTape tape;
    Tensor a = Tensor::from({2}, {1, 2}, true);
    Tensor b = sigmoid(&tape, a);
    Tensor c = sum(&tape, b);
    const std::size_t recorded = tape.recorded();
    CHECK(recorded == 2);
    const std::size_t executed = tape.backward(c);
    CHECK(executed == recorded);
    CHECK(tape.recorded() == 0);
}

TEST_CASE("matmul identity and hand-computed product") {
    Rng rng(7);
    Tensor m = random_tensor({3, 3}, rng);
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor out = matmul(nullptr, eye, m);
    CHECK(max_abs_diff(out, m) == 0);

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {0, 1});
    Tensor p = matmul(nullptr, a, b);
    CHECK(p.at(0, 0) == 2);
    CHECK(p.at(1, 0) == 4);

    CHECK_THROWS_WITH_AS(matmul(nullptr, a, Tensor::zeros({3, 2})), doctest::Contains("[2x2]"),
                         ShapeError);
}

TEST_CASE("matmul gradient of sum(a@b) w.r.t. a equals ones @ b^T") {
    Rng rng(11);
    Tensor a = random_tensor({4, 5}, rng, 1, true);
    Tensor b = random_tensor({5, 3}, rng, 1, true);
    GradTape tape;
    Tensor out = sum(&tape, matmul(&tape, a, b));
    tape.backward(out);
    // d sum / d a[i][l] = sum_j b[l][j]
    for (int i = 0; i < 4; ++i) {
        for (int l = 0; l < 5; ++l) {
            real expect = 0;
            for (int j = 0; j < 3; ++j) expect += b.at(l, j);
            CHECK(a.grad()[static_cast<std::size_t>(i * 5 + l)] == doctest::Approx(expect).epsilon(1e-9));
        }
    }
    // and against central finite differences
    std::vector<Tensor> params{a, b};
    auto f = [&](GradTape* t) { return sum(t, matmul(t, a, b)); };
    const auto report = grad_check(f, params);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("sigmoid values and gradient") {
    Tensor x = Tensor::from({3}, {0, 40, -40});
    Tensor y = sigmoid(nullptr, x);
    CHECK(y.data()[0] == doctest::Approx(0.5));
    CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y.data()[2] > 0);  // strictly inside (0,1)
    CHECK(y.data()[1] < 1.0 + 1e-12);

    Tensor x0 = Tensor::from({1}, {0}, true);
    GradTape tape;
    Tensor out = sum(&tape, sigmoid(&tape, x0));
    tape.backward(out);
    CHECK(x0.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("softmax symmetry, shift invariance, and brute-force oracle") {
    Tensor two = Tensor::from({1, 2}, {0, 0});
    Tensor s2 = softmax(nullptr, two, 1);
    CHECK(s2.at(0, 0) == doctest::Approx(0.5));

    Tensor c3 = Tensor::from({1, 3}, {7.25, 7.25, 7.25});
    Tensor s3 = softmax(nullptr, c3, 1);
    for (int j = 0; j < 3; ++j) CHECK(s3.at(0, j) == doctest::Approx(1.0 / 3));

    Tensor x = Tensor::from({1, 3}, {1, 2, 3});
    Tensor s = softmax(nullptr, x, 1);
    const auto oracle = softmax_oracle({1, 2, 3});
    real total = 0;
    for (int j = 0; j < 3; ++j) {
        CHECK(s.at(0, j) == doctest::Approx(oracle[static_cast<std::size_t>(j)]).epsilon(1e-12));
        total += s.at(0, j);
    }
    CHECK(std::abs(total - 1) < 1e-6);

    // column-axis softmax too
    Rng rng(3);
    Tensor m = random_tensor({4, 2}, rng);
    Tensor sm = softmax(nullptr, m, 0);
    for (int j = 0; j < 2; ++j) {
        real col = 0;
        for (int i = 0; i < 4; ++i) col += sm.at(i, j);
        CHECK(col == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("cross entropy: uniform, saturated, and scalar oracle") {
    const int classes = 5;
    Tensor uniform = Tensor::zeros({1, classes});
    CHECK(cross_entropy(nullptr, uniform, {2}).item() == doctest::Approx(std::log(classes)));

    Tensor hot = Tensor::from({1, 3}, {40, 0, 0});
    CHECK(cross_entropy(nullptr, hot, {0}).item() == doctest::Approx(0.0).epsilon(1e-12));

    Rng rng(5);
    Tensor logits = random_tensor({2, 4}, rng, 2);
    const std::vector<int> labels{3, 1};
    real expect = 0;
    for (int i = 0; i < 2; ++i) {
        std::vector<real> row(4);
        for (int j = 0; j < 4; ++j) row[static_cast<std::size_t>(j)] = logits.at(i, j);
        expect += cross_entropy_row_oracle(row, labels[static_cast<std::size_t>(i)]);
    }
    expect /= 2;
    CHECK(cross_entropy(nullptr, logits, labels).item() == doctest::Approx(expect).epsilon(1e-10));

    CHECK_THROWS_AS(cross_entropy(nullptr, logits, {0, 4}), IndexError);
    CHECK_THROWS_AS(cross_entropy(nullptr, logits, {-1, 0}), IndexError);
}

TEST_CASE("mse identity, hand value, and scalar-loop oracle") {
    Rng rng(9);
    Tensor x = random_tensor({3, 3}, rng);
    CHECK(mse(nullptr, x, x).item() == 0);

    Tensor a = Tensor::from({2}, {0, 0});
    Tensor b = Tensor::from({2}, {1, 1});
    CHECK(mse(nullptr, a, b).item() == doctest::Approx(1.0));

    Tensor u = random_tensor({4, 2}, rng);
    Tensor v = random_tensor({4, 2}, rng);
    CHECK(mse(nullptr, u, v).item() == doctest::Approx(mse_oracle(u.data(), v.data())).epsilon(1e-12));
    CHECK(mse(nullptr, u, v).item() >= 0);

    CHECK_THROWS_AS(mse(nullptr, u, Tensor::zeros({2, 4})), ShapeError);
}

TEST_CASE("adamw: decay-only, lr=0 identity, and reference oracle") {
    AdamWConfig cfg;  // lr 1e-3, wd 0.01
    {
        Tensor p = Tensor::from({2}, {1, -2}, true);
        Tensor g = Tensor::zeros({2});
        AdamWState st;
        st.cfg = cfg;
        std::vector<Tensor> params{p};
        std::vector<Tensor> grads{g};
        adamw_step(params, grads, st);
        CHECK(p.data()[0] == doctest::Approx(1.0 * (1 - 0.001 * 0.01)).epsilon(1e-12));
        CHECK(p.data()[1] == doctest::Approx(-2.0 * (1 - 0.001 * 0.01)).epsilon(1e-12));
        CHECK(st.step == 1);
    }
    {
        AdamWConfig zero = cfg;
        zero.lr = 0;
        Tensor p = Tensor::from({3}, {0.5, -1, 2}, true);
        const auto before = p.data();
        Tensor g = Tensor::from({3}, {1, 2, 3});
        AdamWState st;
        st.cfg = zero;
        std::vector<Tensor> params{p};
        std::vector<Tensor> grads{g};
        adamw_step(params, grads, st);
        adamw_step(params, grads, st);
        CHECK(p.data() == before);
    }
    {
        Tensor p = Tensor::from({1}, {1}, true);
        Tensor g = Tensor::from({1}, {1});
        AdamWState st;
        st.cfg = cfg;
        std::vector<Tensor> params{p};
        std::vector<Tensor> grads{g};
        AdamWScalarRef ref;
        real expect = 1;
        for (int i = 0; i < 3; ++i) {
            adamw_step(params, grads, st);
            expect = ref.step(expect, 1, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps);
            CHECK(p.data()[0] == doctest::Approx(expect).epsilon(1e-14));
        }
    }
}

TEST_CASE("grad_check: linear, sigmoid-mse, and cross-entropy cases") {
    {
        Rng rng(21);
        Tensor p = random_tensor({6}, rng, 1, true);
        std::vector<Tensor> params{p};
        auto f = [&](GradTape* t) { return sum(t, p); };
        const auto rep = grad_check(f, params);
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-9);
    }
    {
        Rng rng(22);
        Tensor w = random_tensor({4, 3}, rng, real(0.5), true);
        Tensor x = random_tensor({2, 4}, rng);
        Tensor y = random_tensor({2, 3}, rng, real(0.3));
        std::vector<Tensor> params{w};
        auto f = [&](GradTape* t) { return mse(t, sigmoid(t, matmul(t, x, w)), y); };
        const auto rep = grad_check(f, params, 1e-4, 1e-3);
        CHECK(rep.pass);
    }
    {
        Rng rng(23);
        Tensor logits = random_tensor({2, 3}, rng, 1, true);
        std::vector<Tensor> params{logits};
        auto f = [&](GradTape* t) { return cross_entropy(t, logits, {0, 2}); };
        const auto rep = grad_check(f, params, 1e-4, 1e-3);
        CHECK(rep.pass);
    }
    {
        // non-finite forward fails the check
        Tensor p = Tensor::from({1}, {1}, true);
        std::vector<Tensor> params{p};
        auto f = [&](GradTape* t) {
            (void)t;
            return Tensor::scalar(std::numeric_limits<real>::quiet_NaN());
        };
        const auto rep = grad_check(f, params);
        CHECK_FALSE(rep.pass);
    }
}

TEST_CASE("finite differences across every differentiable op, 20 seeded trials") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        Tensor a = random_tensor({3, 4}, rng, real(0.8), true);
        Tensor b = random_tensor({3, 4}, rng, real(0.8), true);
        Tensor w = random_tensor({4, 3}, rng, real(0.6), true);
        Tensor vrow = random_tensor({4}, rng, real(0.5), true);
        Tensor gamma = random_tensor({4}, rng, real(0.2), true);
        Tensor beta = random_tensor({4}, rng, real(0.2), true);
        for (auto& g : gamma.data()) g += 1;

        const std::vector<std::pair<const char*, std::function<Tensor(GradTape*)>>> cases{
            {"add", [&](GradTape* t) { return sum(t, add(t, a, b)); }},
            {"sub", [&](GradTape* t) { return sum(t, sub(t, a, b)); }},
            {"mul", [&](GradTape* t) { return sum(t, mul(t, a, b)); }},
            {"scale", [&](GradTape* t) { return sum(t, scale(t, a, real(1.7))); }},
            {"add_rowvec", [&](GradTape* t) { return sum(t, add_rowvec(t, a, vrow)); }},
            {"matmul", [&](GradTape* t) { return sum(t, mul(t, matmul(t, a, w), matmul(t, a, w))); }},
            {"transpose", [&](GradTape* t) { return sum(t, mul(t, transpose(t, a), transpose(t, a))); }},
            {"sigmoid", [&](GradTape* t) { return sum(t, mul(t, sigmoid(t, a), sigmoid(t, a))); }},
            {"gelu", [&](GradTape* t) { return sum(t, mul(t, gelu(t, a), gelu(t, a))); }},
            {"softmax_rows",
             [&](GradTape* t) { return sum(t, mul(t, softmax(t, a, 1), softmax(t, a, 1))); }},
            {"softmax_cols",
             [&](GradTape* t) { return sum(t, mul(t, softmax(t, a, 0), softmax(t, a, 0))); }},
            {"layer_norm",
             [&](GradTape* t) { return sum(t, mul(t, layer_norm(t, a, gamma, beta), a)); }},
            {"mean_rows", [&](GradTape* t) { return sum(t, mul(t, mean_rows(t, a), mean_rows(t, a))); }},
            {"slice_rows", [&](GradTape* t) { return sum(t, mul(t, slice_rows(t, a, 1, 2), slice_rows(t, a, 1, 2))); }},
            {"slice_cols", [&](GradTape* t) { return sum(t, mul(t, slice_cols(t, a, 1, 2), slice_cols(t, a, 1, 2))); }},
            {"gather_cols",
             [&](GradTape* t) {
                 return sum(t, mul(t, gather_cols(t, a, {3, 0, 0}), gather_cols(t, a, {3, 0, 0})));
             }},
            {"concat_rows",
             [&](GradTape* t) {
                 const Tensor parts[] = {a, b};
                 Tensor cat = concat_rows(t, parts);
                 return sum(t, mul(t, cat, cat));
             }},
            {"concat_cols",
             [&](GradTape* t) {
                 const Tensor parts[] = {a, b};
                 Tensor cat = concat_cols(t, parts);
                 return sum(t, mul(t, cat, cat));
             }},
            {"cross_entropy", [&](GradTape* t) { return cross_entropy(t, a, {0, 3, 1}); }},
            {"mse", [&](GradTape* t) { return mse(t, a, b); }},
        };
        for (const auto& [name, f] : cases) {
            std::vector<Tensor> params{a, b, w, vrow, gamma, beta};
            const auto rep = grad_check(f, params, 1e-4, 1e-3);
            INFO(name, " seed ", seed, " max rel err ", rep.max_rel_err, " at ", rep.detail);
            CHECK(rep.pass);
        }
    }
}
