#include <cmath>
#include <vector>

#include "doctest.h"
#include "memfof/autodiff.hpp"
#include "memfof/learn.hpp"
#include "memfof/tensor.hpp"

using namespace memfof;

namespace {

Tensor filled(std::vector<int> shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    std::uint64_t s = seed;
    for (long long i = 0; i < t.numel(); ++i) {
        s += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = s;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z ^= z >> 31;
        t[i] = static_cast<float>((z >> 40) * 0x1.0p-24) - 0.5f;
    }
    return t;
}

// Keeps every entry at least `margin` away from the kink location.
Tensor away_from(Tensor t, float kink, float margin) {
    for (long long i = 0; i < t.numel(); ++i) {
        const float d = t[i] - kink;
        if (std::abs(d) < margin) t[i] = kink + (d >= 0 ? margin : -margin) * 2.0f;
    }
    return t;
}

double check_op(const std::function<ad::Var(const std::vector<ad::Var>&)>& build,
                const std::vector<Tensor>& params, double tol = 1e-3) {
    const double worst = learn::grad_check(build, params, 1e-3, 5, 99);
    CHECK(worst <= tol);
    return worst;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("constants build no graph and leaves accumulate") {
    ad::Var c = ad::constant(filled({2, 2}, 1));
    CHECK_FALSE(c->requires_grad);
    CHECK_FALSE(c->tracked);

    ad::Var x = ad::leaf(filled({2, 2}, 2), true);
    ad::Var doubled = ad::add(x, x);
    ad::Var loss = ad::dot_const(doubled, Tensor::full({2, 2}, 1.0f));
    ad::backward(loss);
    for (int i = 0; i < 4; ++i) CHECK(x->grad[i] == doctest::Approx(2.0));
}

TEST_CASE("no-grad guard suppresses tracking") {
    ad::Var x = ad::leaf(filled({2, 2}, 3), true);
    ad::NoGradGuard ng;
    ad::Var y = ad::relu(x);
    CHECK(y->parents.empty());
    CHECK_FALSE(y->tracked);
}

TEST_CASE("ops on untracked inputs drop their graph") {
    ad::Var y = ad::sigmoid(ad::constant(filled({3}, 4)));
    CHECK(y->parents.empty());
    CHECK_FALSE(static_cast<bool>(y->backprop));
}

TEST_CASE("backward requires a scalar root") {
    ad::Var x = ad::leaf(filled({2, 2}, 5), true);
    CHECK_THROWS_AS(ad::backward(ad::relu(x)), ShapeError);
}

TEST_CASE("saturated sigmoid hits the exact endpoints in fp32") {
    Tensor t({2});
    t[0] = 100.0f;
    t[1] = -100.0f;
    const Tensor out = sigmoid(t);
    CHECK(out[0] == 1.0f);
    CHECK(out[1] == 0.0f);
    ad::Var v = ad::sigmoid(ad::constant(t));
    CHECK(v->value[0] == 1.0f);
    CHECK(v->value[1] == 0.0f);
}

TEST_CASE("conv2d gradients") {
    const Tensor x = filled({2, 5, 6}, 11);
    const Tensor k = filled({3, 2, 3, 3}, 12);
    const Tensor b = filled({3}, 13);
    const Tensor proj = filled({3, 5, 6}, 14);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::conv2d(v[0], v[1], v[2], 1, 1), proj);
        },
        {x, k, b});

    const Tensor proj2 = filled({3, 3, 3}, 15);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::conv2d(v[0], v[1], v[2], 2, 1), proj2);
        },
        {x, k, b});

    SUBCASE("no bias") {
        check_op(
            [&](const std::vector<ad::Var>& v) {
                return ad::dot_const(ad::conv2d(v[0], v[1], nullptr, 1, 1), proj);
            },
            {x, k});
    }
}

TEST_CASE("pooling and pointwise gradients") {
    const Tensor x = away_from(filled({2, 5, 6}, 21), 0.0f, 0.03f);
    const Tensor proj = filled({2, 3, 3}, 22);
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::avg_pool2d(v[0]), proj); },
        {x});

    const Tensor projx = filled({2, 5, 6}, 23);
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::relu(v[0]), projx); }, {x});
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::sigmoid(v[0]), projx); },
        {x});
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::tanh_(v[0]), projx); }, {x});
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::affine(v[0], -1.5f, 0.25f), projx);
        },
        {x});
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::scale(v[0], 2.5f), projx); },
        {x});
}

TEST_CASE("binary op gradients") {
    const Tensor a = filled({3, 4}, 31);
    const Tensor b = filled({3, 4}, 32);
    const Tensor proj = filled({3, 4}, 33);
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::add(v[0], v[1]), proj); },
        {a, b});
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::sub(v[0], v[1]), proj); },
        {a, b});
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::mul(v[0], v[1]), proj); },
        {a, b});
}

TEST_CASE("softmax gradients along both axes") {
    const Tensor x = filled({3, 2, 4}, 41);
    const Tensor proj = filled({3, 2, 4}, 42);
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::softmax(v[0], 0), proj); },
        {x});
    check_op(
        [&](const std::vector<ad::Var>& v) { return ad::dot_const(ad::softmax(v[0], 2), proj); },
        {x});
}

TEST_CASE("concat and slice gradients route to the right parents") {
    const Tensor a = filled({2, 3, 4}, 51);
    const Tensor b = filled({1, 3, 4}, 52);
    const Tensor proj = filled({3, 3, 4}, 53);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::concat({v[0], v[1]}), proj);
        },
        {a, b});

    const Tensor projs = filled({1, 3, 4}, 54);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::slice(ad::concat({v[0], v[1]}), 2, 3), projs);
        },
        {a, b});
}

TEST_CASE("correlation volume gradients") {
    const Tensor fa = filled({3, 2, 3}, 61);
    const Tensor fb = filled({3, 2, 3}, 62);
    const Tensor proj = filled({6, 2, 3}, 63);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::corr_base(v[0], v[1], 0.577f), proj);
        },
        {fa, fb});
}

TEST_CASE("attention gradients") {
    const Tensor logits = filled({4, 2, 2}, 71);  // 2x2 grid, all-pairs
    const Tensor values = filled({3, 2, 2}, 72);
    const Tensor proj = filled({3, 2, 2}, 73);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::attn_apply(ad::softmax_last2(v[0]), v[1]), proj);
        },
        {logits, values});
}

TEST_CASE("pyramid lookup gradients flow into volume and flow field") {
    const Tensor fa = filled({4, 3, 4}, 81);
    const Tensor fb = filled({4, 3, 4}, 82);
    Tensor flow = filled({2, 3, 4}, 83);
    // keep sample points off the bilinear lattice and inside the grid
    for (long long i = 0; i < flow.numel(); ++i) flow[i] = 0.3f + 0.2f * flow[i];
    const Tensor proj = filled({2 * 25, 3, 4}, 84);

    check_op(
        [&](const std::vector<ad::Var>& v) {
            ad::Var base = ad::corr_base(v[0], v[1], 0.5f);
            ad::Var pooled = ad::avg_pool2d(base);
            return ad::dot_const(ad::corr_lookup({base, pooled}, v[2], 2), proj);
        },
        {fa, fb, flow}, 2e-3);
}

TEST_CASE("convex upsampling weights are a partition of unity") {
    const Tensor logits = filled({4 * 4 * 9, 3, 4}, 91);
    const Tensor w = ad::convex_weights(logits, 4);
    CHECK(w.same_shape(logits));
    for (int g = 0; g < 16; ++g)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 4; ++x) {
                double total = 0;
                for (int j = 0; j < 9; ++j) total += w.at(g * 9 + j, y, x);
                CHECK(std::abs(total - 1.0) <= 1e-6);
            }
}

TEST_CASE("convex upsampling reproduces constants exactly") {
    const Tensor logits = filled({2 * 2 * 9, 3, 4}, 92);
    Tensor fields({2, 3, 4});
    for (int i = 0; i < 12; ++i) {
        fields[i] = 1.7f;
        fields[12 + i] = -2.3f;
    }
    ad::Var out = ad::upsample_convex(ad::constant(fields), ad::constant(logits), 2, {2.0f, 2.0f});
    CHECK(out->value.dim(1) == 6);
    CHECK(out->value.dim(2) == 8);
    for (int i = 0; i < 48; ++i) {
        CHECK(out->value[i] == 2.0f * 1.7f);
        CHECK(out->value[48 + i] == 2.0f * -2.3f);
    }
}

TEST_CASE("convex upsampling gradients") {
    const Tensor fields = filled({3, 2, 3}, 93);
    const Tensor logits = filled({2 * 2 * 9, 2, 3}, 94);
    const Tensor proj = filled({3, 4, 6}, 95);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::dot_const(ad::upsample_convex(v[0], v[1], 2, {2.0f, 2.0f, 1.0f}), proj);
        },
        {fields, logits});
}

TEST_CASE("mixture loss value matches the double-precision oracle") {
    const Tensor flow = filled({2, 3, 4}, 101);
    const Tensor alpha = sigmoid(filled({1, 3, 4}, 102));
    const Tensor beta = filled({1, 3, 4}, 103);
    const Tensor gt = filled({2, 3, 4}, 104);
    ad::Var loss =
        ad::mol_loss(ad::constant(flow), ad::constant(alpha), ad::constant(beta), gt);
    const double want = learn::mol_frame_loss(flow, alpha, beta, gt);
    CHECK(std::abs(loss->value[0] - want) <= 1e-6 * std::max(1.0, std::abs(want)));
}

TEST_CASE("mixture loss gradients") {
    const Tensor mu = filled({2, 3, 4}, 111);
    const Tensor pre_alpha = filled({1, 3, 4}, 112);
    const Tensor beta = filled({1, 3, 4}, 113);
    const Tensor gt = filled({2, 3, 4}, 114);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::mol_loss(v[0], ad::sigmoid(v[1]), v[2], gt);
        },
        {mu, pre_alpha, beta});
}

TEST_CASE("weighted_sum combines scalars with fixed coefficients") {
    const Tensor a = filled({2, 2}, 121);
    const Tensor b = filled({2, 2}, 122);
    const Tensor pa = filled({2, 2}, 123);
    const Tensor pb = filled({2, 2}, 124);
    check_op(
        [&](const std::vector<ad::Var>& v) {
            return ad::weighted_sum(
                {ad::dot_const(v[0], pa), ad::dot_const(v[1], pb)}, {0.85, -1.25});
        },
        {a, b});

    ad::Var s = ad::weighted_sum({ad::constant(Tensor::full({1}, 2.0f)),
                                  ad::constant(Tensor::full({1}, 3.0f))},
                                 {0.5, 2.0});
    CHECK(s->value[0] == doctest::Approx(7.0));
    CHECK_THROWS_AS(ad::weighted_sum({}, {}), ParamError);
}

}  // TEST_SUITE
