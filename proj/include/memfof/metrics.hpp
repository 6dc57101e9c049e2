#pragma once

// Flow evaluation: endpoint error with magnitude buckets, outlier percentages,
// the weighted area under the error curve, and the full-resolution 2D motion
// histogram used to profile displacement statistics over a dataset.

#include <optional>
#include <vector>

#include "memfof/tensor.hpp"

namespace memfof::metrics {

// Per-pixel endpoint error (H,W) of pred vs gt, both (2,H,W).
Tensor error_map(const Tensor& pred, const Tensor& gt);

// Mask is optional; when given it must have H*W entries, nonzero = evaluate.
// Every aggregate throws ParamError when no pixel is valid.
double epe(const Tensor& pred, const Tensor& gt, const Tensor* mask = nullptr);

struct BucketedEpe {
    double all = 0;
    // Buckets by gt magnitude: [0,10), [10,40), [40,inf). Absent when empty.
    std::optional<double> s0_10;
    std::optional<double> s10_40;
    std::optional<double> s40plus;
    long long n = 0;
    long long n0_10 = 0;
    long long n10_40 = 0;
    long long n40plus = 0;
};
BucketedEpe epe_bucketed(const Tensor& pred, const Tensor& gt, const Tensor* mask = nullptr);

// Percentage of valid pixels with error strictly greater than 1.
double onepx(const Tensor& pred, const Tensor& gt, const Tensor* mask = nullptr);

// Percentage of outliers: error > 3 and error > 5% of the gt magnitude.
double fl_all(const Tensor& pred, const Tensor& gt, const Tensor* mask = nullptr);

// Integral over [0,5] of the fraction (in %) of pixels with error <= x,
// weighted by (5-x)/5 and normalized so an all-zero error field scores 100.
// Evaluated as a 100-bin midpoint rule.
double wauc(const Tensor& pred, const Tensor& gt, const Tensor* mask = nullptr);

struct HistogramConfig {
    int u_half = 1920;  // columns cover u in [-u_half, u_half)
    int v_half = 1080;  // rows cover v in [-v_half, v_half)
};

struct MotionHistogram {
    Tensor counts;           // (2*v_half, 2*u_half)
    long long clipped = 0;   // out of range or non-finite
    long long total = 0;     // all pixels seen
};

// Bins floor(u), floor(v) of every pixel of every flow field; half-open unit
// bins so integer displacements land exactly in their own bin.
MotionHistogram motion_histogram(const std::vector<const Tensor*>& flows,
                                 const HistogramConfig& cfg = {});
void histogram_add(MotionHistogram& h, const Tensor& flow, const HistogramConfig& cfg = {});

}  // namespace memfof::metrics
