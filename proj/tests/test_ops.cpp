#include <doctest.h>

#include <cmath>

#include "bionas/ops.hpp"
#include "bionas/rng.hpp"
#include "helpers.hpp"

using namespace bionas;
using testutil::max_rel_err;
using testutil::random_tensor;
using testutil::rel_err;

TEST_SUITE_BEGIN("tensor-core");

TEST_CASE("rng stream determinism and independence") {
    RngStream a(42, 7), b(42, 7), c(42, 8);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    // distinct stream ids diverge immediately
    RngStream a2(42, 7);
    bool any_diff = false;
    for (int i = 0; i < 16; ++i) any_diff |= (a2.next_u64() != c.next_u64());
    CHECK(any_diff);

    RngStream u(1, 0);
    double mn = 1.0, mx = 0.0, acc = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = u.uniform();
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        acc += v;
    }
    CHECK(mn >= 0.0);
    CHECK(mx < 1.0);
    CHECK(acc / n == doctest::Approx(0.5).epsilon(0.02));

    RngStream g(3, 1);
    double m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = g.normal();
        m1 += v;
        m2 += v * v;
    }
    CHECK(m1 / n == doctest::Approx(0.0).epsilon(0.05));
    CHECK(m2 / n == doctest::Approx(1.0).epsilon(0.05));

    // counter restore replays the sequence (checkpoint contract)
    RngStream s(5, 5);
    s.next_u64();
    s.next_u64();
    const uint64_t mark = s.counter();
    const uint64_t expect = s.next_u64();
    s.set_counter(mark);
    CHECK(s.next_u64() == expect);
}

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye({3, 3});
    for (index_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    RngStream rng(0, 1);
    Tensor b = random_tensor({3, 4}, rng);
    CHECK(max_rel_err(matmul(eye, b), b) < 1e-15);

    Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
    Tensor v = Tensor::from({1, 1}, {2, 1});
    Tensor r = matmul(a, v);
    CHECK(r[0] == 3.0);
    CHECK(r[1] == 7.0);
}

TEST_CASE("matmul matches nested-loop oracle") {
    RngStream rng(1, 2);
    Tensor a = random_tensor({5, 7}, rng);
    Tensor b = random_tensor({7, 3}, rng);
    CHECK(max_rel_err(matmul(a, b), testutil::matmul_oracle(a, b)) < 1e-12);
    CHECK_THROWS_AS(matmul(a, random_tensor({5, 3}, rng)), ShapeError);
}

TEST_CASE("conv2d identity and zero kernels") {
    RngStream rng(2, 0);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w1({3, 3, 1, 1});
    // 1x1 kernel routing each channel through with weight 1
    for (index_t co = 0; co < 3; ++co) w1[co * 3 + co] = 1.0;
    Conv2dSpec sp;
    CHECK(max_rel_err(conv2d(x, w1, sp), x) < 1e-15);

    Tensor wz({4, 3, 3, 3});
    Conv2dSpec sp3;
    sp3.padding = 1;
    Tensor out = conv2d(x, wz, sp3);
    CHECK(bionas::max_abs(out) == 0.0);
}

TEST_CASE("conv2d matches brute-force loops") {
    RngStream rng(3, 0);
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    Tensor w = random_tensor({2, 1, 3, 3}, rng);
    Conv2dSpec sp;
    sp.padding = 1;
    CHECK(max_rel_err(conv2d(x, w, sp), testutil::conv2d_oracle(x, w, 1, 1, 1)) < 1e-12);

    // stride/dilation variants against the same oracle
    Tensor x2 = random_tensor({2, 3, 8, 8}, rng);
    Tensor w2 = random_tensor({4, 3, 3, 3}, rng);
    for (index_t stride : {1, 2}) {
        for (index_t dil : {1, 2}) {
            Conv2dSpec s2;
            s2.stride = stride;
            s2.dilation = dil;
            s2.padding = dil;
            CHECK(max_rel_err(conv2d(x2, w2, s2), testutil::conv2d_oracle(x2, w2, stride, dil, dil)) <
                  1e-12);
        }
    }

    Conv2dSpec bad;
    CHECK_THROWS_AS(conv2d(random_tensor({1, 1, 2, 2}, rng), random_tensor({1, 1, 5, 5}, rng), bad),
                    ShapeError);
}

TEST_CASE("grouped conv matches per-group oracle") {
    RngStream rng(4, 0);
    const index_t g = 2;
    Tensor x = random_tensor({1, 4, 6, 6}, rng);
    Tensor w = random_tensor({4, 2, 3, 3}, rng);
    Conv2dSpec sp;
    sp.padding = 1;
    sp.groups = g;
    Tensor got = conv2d(x, w, sp);
    // run each group separately through the oracle
    for (index_t gi = 0; gi < g; ++gi) {
        Tensor xg({1, 2, 6, 6});
        for (index_t i = 0; i < xg.numel(); ++i) xg[i] = x[gi * 2 * 36 + i];
        Tensor wg({2, 2, 3, 3});
        for (index_t i = 0; i < wg.numel(); ++i) wg[i] = w[gi * 2 * 2 * 9 + i];
        Tensor ref = testutil::conv2d_oracle(xg, wg, 1, 1, 1);
        for (index_t i = 0; i < ref.numel(); ++i)
            CHECK(rel_err(got[gi * 2 * 36 + i], ref[i]) < 1e-12);
    }
}

TEST_CASE("pool2d basics") {
    Tensor c = Tensor::full({1, 1, 6, 6}, 2.5);
    PoolResult avg = pool2d(c, PoolKind::avg, 3, 1);
    // interior windows see no padding: exactly the constant
    CHECK(avg.y[1 * 6 + 1] == doctest::Approx(2.5));
    // border windows include padded zeros in the divisor
    CHECK(avg.y[0] == doctest::Approx(2.5 * 4.0 / 9.0));

    RngStream rng(5, 0);
    Tensor x = random_tensor({1, 2, 6, 6}, rng, 0.0, 1.0);
    PoolResult mx = pool2d(x, PoolKind::max, 3, 1);
    PoolResult av = pool2d(x, PoolKind::avg, 3, 1);
    for (index_t i = 0; i < mx.y.numel(); ++i) CHECK(mx.y[i] >= av.y[i]);

    // padding never wins max pooling even for all-negative inputs
    Tensor neg = Tensor::full({1, 1, 4, 4}, -3.0);
    PoolResult mneg = pool2d(neg, PoolKind::max, 3, 2);
    for (index_t i = 0; i < mneg.y.numel(); ++i) CHECK(mneg.y[i] == -3.0);

    CHECK_THROWS_AS(pool2d(x, PoolKind::max, 3, 0), ShapeError);
}

TEST_CASE("pool2d matches brute-force window scan") {
    RngStream rng(6, 0);
    Tensor x = random_tensor({1, 1, 6, 6}, rng);
    for (PoolKind kind : {PoolKind::max, PoolKind::avg}) {
        for (index_t stride : {1, 2}) {
            PoolResult got = pool2d(x, kind, 3, stride);
            const index_t ho = got.y.dim(2), wo = got.y.dim(3);
            for (index_t oh = 0; oh < ho; ++oh)
                for (index_t ow = 0; ow < wo; ++ow) {
                    double best = -1e300, acc = 0.0;
                    for (index_t kh = 0; kh < 3; ++kh)
                        for (index_t kw = 0; kw < 3; ++kw) {
                            const index_t ih = oh * stride - 1 + kh;
                            const index_t iw = ow * stride - 1 + kw;
                            if (ih < 0 || ih >= 6 || iw < 0 || iw >= 6) continue;
                            best = std::max(best, x[ih * 6 + iw]);
                            acc += x[ih * 6 + iw];
                        }
                    const double want = kind == PoolKind::max ? best : acc / 9.0;
                    CHECK(rel_err(got.y[oh * wo + ow], want) < 1e-12);
                }
        }
    }
}

TEST_CASE("relu forward and derivative convention") {
    Tensor z0 = Tensor::zeros({2, 3});
    ReluResult r0 = relu_forward(z0);
    CHECK(bionas::max_abs(r0.y) == 0.0);
    CHECK(bionas::max_abs(r0.deriv) == 0.0);

    ReluResult r = relu_forward(Tensor::from({-1, 2}, {1, 2}));
    CHECK(r.y[0] == 0.0);
    CHECK(r.y[1] == 2.0);
    CHECK(r.deriv[0] == 0.0);
    CHECK(r.deriv[1] == 1.0);

    RngStream rng(7, 0);
    Tensor z = random_tensor({4, 4}, rng);
    // keep arguments away from the kink
    for (index_t i = 0; i < z.numel(); ++i)
        if (std::fabs(z[i]) < 1e-2) z[i] = 0.1;
    ReluResult rr = relu_forward(z);
    const double h = 1e-6;
    for (index_t i = 0; i < z.numel(); ++i) {
        const double fd = (std::max(z[i] + h, 0.0) - std::max(z[i] - h, 0.0)) / (2 * h);
        CHECK(std::fabs(rr.deriv[i] - fd) < 1e-6);
    }
}

TEST_CASE("softmax cross entropy analytic values") {
    Tensor uniform = Tensor::zeros({2, 10});
    SoftmaxXentResult u = softmax_cross_entropy(uniform, {3, 7});
    CHECK(u.loss == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    Tensor big = Tensor::zeros({1, 4});
    big[2] = 200.0;
    SoftmaxXentResult b = softmax_cross_entropy(big, {2});
    CHECK(b.loss < 1e-12);

    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {3, 11}), DataError);
    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {-1, 0}), DataError);
}

TEST_CASE("softmax cross entropy gradient matches finite differences") {
    RngStream rng(8, 0);
    Tensor logits = random_tensor({3, 5}, rng);
    std::vector<int> labels{1, 4, 0};
    for (double ls : {0.0, 0.1}) {
        SoftmaxXentResult got = softmax_cross_entropy(logits, labels, ls);
        Tensor fd = testutil::finite_difference(
            [&](const Tensor& t) { return softmax_cross_entropy(t, labels, ls).loss; }, logits);
        CHECK(max_rel_err(got.output_error, fd, 1e-6) < 1e-6);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    RngStream rng(9, 0);
    Tensor x = random_tensor({2, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Conv2dSpec sp;
    sp.padding = 1;
    sp.stride = 2;
    Tensor g = random_tensor(conv2d(x, w, sp).shape(), rng);

    auto loss_x = [&](const Tensor& t) { return dot(conv2d(t, w, sp), g); };
    auto loss_w = [&](const Tensor& t) { return dot(conv2d(x, t, sp), g); };
    Tensor gx = conv2d_input_grad(g, w, sp, x.shape());
    Tensor gw = conv2d_weight_grad(x, g, sp, w.shape());
    CHECK(max_rel_err(gx, testutil::finite_difference(loss_x, x), 1e-6) < 1e-4);
    CHECK(max_rel_err(gw, testutil::finite_difference(loss_w, w), 1e-6) < 1e-4);
}

TEST_CASE("pool2d gradients match finite differences") {
    RngStream rng(10, 0);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    for (PoolKind kind : {PoolKind::max, PoolKind::avg}) {
        PoolResult fw = pool2d(x, kind, 3, 1);
        Tensor g = random_tensor(fw.y.shape(), rng);
        Tensor gx = pool2d_input_grad(g, kind, x.shape(), fw, 3, 1);
        Tensor fd = testutil::finite_difference(
            [&](const Tensor& t) { return dot(pool2d(t, kind, 3, 1).y, g); }, x);
        CHECK(max_rel_err(gx, fd, 1e-6) < 1e-4);
    }
}

TEST_CASE("non-finite op outputs raise") {
    Tensor huge = Tensor::full({2, 2}, 1e200);
    CHECK_THROWS_AS(matmul(huge, huge), NumericError);
}

TEST_CASE("f32 precision mode rounds outputs onto the float grid") {
    set_default_precision(Precision::f32);
    RngStream rng(11, 0);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);
    Tensor r = matmul(a, b);
    for (index_t i = 0; i < r.numel(); ++i)
        CHECK(r[i] == static_cast<double>(static_cast<float>(r[i])));
    set_default_precision(Precision::f64);
}

TEST_CASE("forward determinism across identical runs") {
    auto run = [] {
        RngStream rng(123, 9);
        Tensor x = random_tensor({2, 3, 6, 6}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Conv2dSpec sp;
        sp.padding = 1;
        Tensor y = conv2d(x, w, sp);
        PoolResult p = pool2d(y, PoolKind::avg, 3, 2);
        return p.y;
    };
    Tensor r1 = run(), r2 = run();
    for (index_t i = 0; i < r1.numel(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_SUITE_END();
