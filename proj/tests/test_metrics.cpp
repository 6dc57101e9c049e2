#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "memfof/metrics.hpp"
#include "memfof/tensor.hpp"

using namespace memfof;

namespace {

// (2,H,W) field with constant displacement.
Tensor const_flow(int h, int w, float u, float v) {
    Tensor f({2, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            f.at(0, y, x) = u;
            f.at(1, y, x) = v;
        }
    return f;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("endpoint error is the euclidean distance per pixel") {
    Tensor pred({2, 1, 2}), gt({2, 1, 2});
    pred.at(0, 0, 0) = 3.0f;
    pred.at(1, 0, 0) = 4.0f;
    pred.at(0, 0, 1) = -1.0f;
    pred.at(1, 0, 1) = 1.0f;
    gt.at(0, 0, 1) = 2.0f;
    gt.at(1, 0, 1) = 5.0f;
    Tensor e = metrics::error_map(pred, gt);
    REQUIRE(e.shape() == std::vector<int>{1, 2});
    CHECK(e[0] == doctest::Approx(5.0).epsilon(1e-7));
    CHECK(e[1] == doctest::Approx(5.0).epsilon(1e-7));
    CHECK(metrics::epe(pred, gt) == doctest::Approx(5.0).epsilon(1e-7));
    CHECK_THROWS_AS(metrics::error_map(pred, Tensor({2, 2, 2})), ShapeError);
    CHECK_THROWS_AS(metrics::error_map(Tensor({3, 1, 2}), Tensor({3, 1, 2})), ShapeError);
}

TEST_CASE("mean endpoint error of a 3-4-5 triangle mix") {
    Tensor pred({2, 1, 2}), gt({2, 1, 2});
    pred.at(0, 0, 0) = 3.0f;  // error 3
    pred.at(0, 0, 1) = 0.0f;
    pred.at(1, 0, 1) = 4.0f;  // error 4... combined with gt offset below
    gt.at(1, 0, 1) = 0.0f;
    CHECK(metrics::epe(pred, gt) == doctest::Approx(3.5).epsilon(1e-7));
}

TEST_CASE("bucketed error splits on the gt magnitude boundaries") {
    // Four pixels with gt magnitudes 0, 9.99, 10, 40: buckets get 2/1/1.
    Tensor gt({2, 1, 4}), pred({2, 1, 4});
    gt.at(0, 0, 1) = 9.99f;
    gt.at(0, 0, 2) = 10.0f;
    gt.at(0, 0, 3) = 40.0f;
    for (int x = 0; x < 4; ++x) pred.at(1, 0, x) = static_cast<float>(x + 1);  // errors 1..4
    for (int x = 0; x < 4; ++x) pred.at(0, 0, x) = gt.at(0, 0, x);
    metrics::BucketedEpe b = metrics::epe_bucketed(pred, gt);
    CHECK(b.all == doctest::Approx(2.5).epsilon(1e-7));
    CHECK(b.n == 4);
    REQUIRE(b.s0_10.has_value());
    REQUIRE(b.s10_40.has_value());
    REQUIRE(b.s40plus.has_value());
    CHECK(*b.s0_10 == doctest::Approx(1.5).epsilon(1e-7));
    CHECK(*b.s10_40 == doctest::Approx(3.0).epsilon(1e-7));
    CHECK(*b.s40plus == doctest::Approx(4.0).epsilon(1e-7));
    CHECK(b.n0_10 == 2);
    CHECK(b.n10_40 == 1);
    CHECK(b.n40plus == 1);
}

TEST_CASE("empty buckets stay absent") {
    Tensor gt = const_flow(2, 2, 1.0f, 0.0f);  // all magnitudes below 10
    metrics::BucketedEpe b = metrics::epe_bucketed(gt, gt);
    CHECK(b.all == 0.0);
    CHECK(b.s0_10.has_value());
    CHECK_FALSE(b.s10_40.has_value());
    CHECK_FALSE(b.s40plus.has_value());
    CHECK(b.n0_10 == 4);
    CHECK(b.n10_40 == 0);
}

TEST_CASE("one-pixel outliers require error strictly above one") {
    Tensor gt({2, 1, 4});
    Tensor pred({2, 1, 4});
    pred.at(0, 0, 0) = 1.0f;    // exactly 1: not an outlier
    pred.at(0, 0, 1) = 1.01f;   // outlier
    pred.at(0, 0, 2) = 0.99f;   // not
    pred.at(1, 0, 3) = -3.0f;   // outlier
    CHECK(metrics::onepx(pred, gt) == doctest::Approx(50.0).epsilon(1e-7));
}

TEST_CASE("fl outliers need both the absolute and the relative threshold") {
    // gt magnitude 100: error 4 fails the 5% bar (5.0); magnitude 60: 4 > 3.0 passes both.
    Tensor gt({2, 1, 2}), pred({2, 1, 2});
    gt.at(0, 0, 0) = 100.0f;
    gt.at(0, 0, 1) = 60.0f;
    pred.at(0, 0, 0) = 100.0f;
    pred.at(1, 0, 0) = 4.0f;
    pred.at(0, 0, 1) = 60.0f;
    pred.at(1, 0, 1) = 4.0f;
    CHECK(metrics::fl_all(pred, gt) == doctest::Approx(50.0).epsilon(1e-7));
    // Error 2.9 everywhere: below the absolute threshold regardless of gt.
    Tensor close = const_flow(1, 2, 0.0f, 2.9f);
    Tensor zero({2, 1, 2});
    CHECK(metrics::fl_all(close, zero) == 0.0);
}

TEST_CASE("error-curve area hits its closed-form anchors") {
    Tensor gt = const_flow(4, 5, 0.0f, 0.0f);
    CHECK(metrics::wauc(gt, gt) == doctest::Approx(100.0).epsilon(1e-9));
    // Constant error 2.5 leaves exactly the tail half of the triangle weight.
    CHECK(metrics::wauc(const_flow(4, 5, 2.5f, 0.0f), gt) == doctest::Approx(25.0).epsilon(1e-7));
    // Constant error above 5 scores zero.
    CHECK(metrics::wauc(const_flow(4, 5, 6.0f, 0.0f), gt) == 0.0);
}

TEST_CASE("masks restrict every aggregate to the valid pixels") {
    Tensor gt({2, 1, 2});
    Tensor pred({2, 1, 2});
    pred.at(0, 0, 0) = 0.5f;   // small error
    pred.at(0, 0, 1) = 50.0f;  // huge error
    Tensor keep_first({1, 1, 2});
    keep_first[0] = 1.0f;
    CHECK(metrics::epe(pred, gt, &keep_first) == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(metrics::onepx(pred, gt, &keep_first) == 0.0);
    CHECK(metrics::fl_all(pred, gt, &keep_first) == 0.0);
    CHECK(metrics::wauc(pred, gt, &keep_first) > 80.0);
    metrics::BucketedEpe b = metrics::epe_bucketed(pred, gt, &keep_first);
    CHECK(b.n == 1);
    CHECK(b.all == doctest::Approx(0.5).epsilon(1e-7));

    Tensor none({1, 1, 2});
    CHECK_THROWS_AS(metrics::epe(pred, gt, &none), ParamError);
    CHECK_THROWS_AS(metrics::wauc(pred, gt, &none), ParamError);
    CHECK_THROWS_AS(metrics::onepx(pred, gt, &none), ParamError);
    Tensor wrong_size({1, 1, 3});
    CHECK_THROWS_AS(metrics::epe(pred, gt, &wrong_size), ShapeError);
}

TEST_CASE("histogram bins displacements into half-open unit cells") {
    metrics::HistogramConfig cfg;
    cfg.u_half = 8;
    cfg.v_half = 4;
    Tensor flow({2, 1, 4});
    flow.at(0, 0, 0) = 2.25f;
    flow.at(1, 0, 0) = -3.5f;  // bin u=2, v=-4
    flow.at(0, 0, 1) = 5.0f;
    flow.at(1, 0, 1) = 0.0f;   // integers land in their own bin
    flow.at(0, 0, 2) = -0.5f;
    flow.at(1, 0, 2) = 0.25f;  // bin u=-1, v=0
    flow.at(0, 0, 3) = 7.999f;
    flow.at(1, 0, 3) = 3.999f; // the last in-range bin
    metrics::MotionHistogram h = metrics::motion_histogram({&flow}, cfg);
    REQUIRE(h.counts.shape() == std::vector<int>{8, 16});
    CHECK(h.total == 4);
    CHECK(h.clipped == 0);
    auto bin = [&](int v, int u) { return h.counts[static_cast<long long>(v + 4) * 16 + (u + 8)]; };
    CHECK(bin(-4, 2) == 1.0f);
    CHECK(bin(0, 5) == 1.0f);
    CHECK(bin(0, -1) == 1.0f);
    CHECK(bin(3, 7) == 1.0f);
}

TEST_CASE("out-of-range and non-finite displacements count as clipped") {
    metrics::HistogramConfig cfg;
    cfg.u_half = 4;
    cfg.v_half = 4;
    Tensor flow({2, 1, 4});
    flow.at(0, 0, 0) = 5000.0f;  // beyond u range
    flow.at(0, 0, 1) = std::numeric_limits<float>::quiet_NaN();
    flow.at(1, 0, 2) = -std::numeric_limits<float>::infinity();
    flow.at(0, 0, 3) = 4.0f;     // == u_half falls outside the half-open range
    metrics::MotionHistogram h = metrics::motion_histogram({&flow}, cfg);
    CHECK(h.total == 4);
    CHECK(h.clipped == 4);
    CHECK(h.counts[static_cast<long long>(0 + 4) * 8 + (3 + 4)] == 0.0f);  // u=4 over the edge

    double binned = 0;
    for (long long i = 0; i < h.counts.numel(); ++i) binned += h.counts[i];
    CHECK(binned + static_cast<double>(h.clipped) == static_cast<double>(h.total));
}

TEST_CASE("histogram accumulates across fields and stays conservative") {
    metrics::HistogramConfig cfg;
    cfg.u_half = 4;
    cfg.v_half = 2;
    metrics::MotionHistogram h = metrics::motion_histogram({}, cfg);
    CHECK(h.total == 0);
    metrics::histogram_add(h, const_flow(3, 5, 1.5f, -1.0f), cfg);
    metrics::histogram_add(h, const_flow(2, 2, 1.5f, -1.0f), cfg);
    metrics::histogram_add(h, const_flow(1, 1, 100.0f, 0.0f), cfg);
    CHECK(h.total == 20);
    CHECK(h.clipped == 1);
    CHECK(h.counts[static_cast<long long>(-1 + 2) * 8 + (1 + 4)] == 19.0f);

    double binned = 0;
    for (long long i = 0; i < h.counts.numel(); ++i) binned += h.counts[i];
    CHECK(binned + static_cast<double>(h.clipped) == static_cast<double>(h.total));
}

TEST_CASE("dataset aggregates are exact pixel-weighted means of file metrics") {
    // Two fields of different sizes; merging their per-file numbers by pixel
    // count must reproduce the metric of the concatenated field.
    Tensor gt_a = const_flow(2, 3, 1.0f, 0.0f);
    Tensor pred_a = const_flow(2, 3, 2.5f, 0.0f);
    Tensor gt_b = const_flow(4, 4, -2.0f, 1.0f);
    Tensor pred_b = const_flow(4, 4, -2.0f, 3.5f);

    Tensor gt_all({2, 1, 22}), pred_all({2, 1, 22});
    int k = 0;
    auto append = [&](const Tensor& g, const Tensor& p) {
        for (int y = 0; y < g.dim(1); ++y)
            for (int x = 0; x < g.dim(2); ++x, ++k) {
                gt_all.at(0, 0, k) = g.at(0, y, x);
                gt_all.at(1, 0, k) = g.at(1, y, x);
                pred_all.at(0, 0, k) = p.at(0, y, x);
                pred_all.at(1, 0, k) = p.at(1, y, x);
            }
    };
    append(gt_a, pred_a);
    append(gt_b, pred_b);
    REQUIRE(k == 22);

    const double na = 6, nb = 16;
    for (auto metric : {metrics::epe, metrics::onepx, metrics::fl_all, metrics::wauc}) {
        const double merged =
            (na * metric(pred_a, gt_a, nullptr) + nb * metric(pred_b, gt_b, nullptr)) / (na + nb);
        CHECK(metric(pred_all, gt_all, nullptr) == doctest::Approx(merged).epsilon(1e-9));
    }
}

}  // TEST_SUITE
