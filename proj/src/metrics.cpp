#include "memfof/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace memfof::metrics {

namespace {

void check_pair(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    if (pred.rank() != 3 || pred.dim(0) != 2) throw ShapeError("metrics: pred must be (2,H,W)");
    if (!pred.same_shape(gt)) throw ShapeError("metrics: pred/gt shape mismatch");
    if (mask && mask->numel() != static_cast<long long>(pred.dim(1)) * pred.dim(2))
        throw ShapeError("metrics: mask must have one entry per pixel");
}

// Per-pixel error plus gt magnitude over the valid set.
struct Errors {
    std::vector<double> err;
    std::vector<double> gt_mag;
};

Errors collect(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    check_pair(pred, gt, mask);
    const long long np = static_cast<long long>(pred.dim(1)) * pred.dim(2);
    Errors e;
    e.err.reserve(static_cast<std::size_t>(np));
    e.gt_mag.reserve(static_cast<std::size_t>(np));
    for (long long i = 0; i < np; ++i) {
        if (mask && (*mask)[i] == 0.0f) continue;
        const double du = static_cast<double>(pred[i]) - gt[i];
        const double dv = static_cast<double>(pred[np + i]) - gt[np + i];
        e.err.push_back(std::hypot(du, dv));
        e.gt_mag.push_back(std::hypot(static_cast<double>(gt[i]), static_cast<double>(gt[np + i])));
    }
    if (e.err.empty()) throw ParamError("metrics: no valid pixels");
    return e;
}

}  // namespace

Tensor error_map(const Tensor& pred, const Tensor& gt) {
    check_pair(pred, gt, nullptr);
    const int h = pred.dim(1), w = pred.dim(2);
    const long long np = static_cast<long long>(h) * w;
    Tensor out({h, w});
    for (long long i = 0; i < np; ++i) {
        const double du = static_cast<double>(pred[i]) - gt[i];
        const double dv = static_cast<double>(pred[np + i]) - gt[np + i];
        out[i] = static_cast<float>(std::hypot(du, dv));
    }
    return out;
}

double epe(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    Errors e = collect(pred, gt, mask);
    double total = 0;
    for (double v : e.err) total += v;
    return total / static_cast<double>(e.err.size());
}

BucketedEpe epe_bucketed(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    Errors e = collect(pred, gt, mask);
    BucketedEpe out;
    double sums[4] = {0, 0, 0, 0};
    long long counts[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < e.err.size(); ++i) {
        sums[0] += e.err[i];
        ++counts[0];
        const int b = e.gt_mag[i] < 10.0 ? 1 : (e.gt_mag[i] < 40.0 ? 2 : 3);
        sums[b] += e.err[i];
        ++counts[b];
    }
    out.all = sums[0] / static_cast<double>(counts[0]);
    out.n = counts[0];
    out.n0_10 = counts[1];
    out.n10_40 = counts[2];
    out.n40plus = counts[3];
    if (counts[1]) out.s0_10 = sums[1] / static_cast<double>(counts[1]);
    if (counts[2]) out.s10_40 = sums[2] / static_cast<double>(counts[2]);
    if (counts[3]) out.s40plus = sums[3] / static_cast<double>(counts[3]);
    return out;
}

double onepx(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    Errors e = collect(pred, gt, mask);
    long long bad = 0;
    for (double v : e.err)
        if (v > 1.0) ++bad;
    return 100.0 * static_cast<double>(bad) / static_cast<double>(e.err.size());
}

double fl_all(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    Errors e = collect(pred, gt, mask);
    long long bad = 0;
    for (std::size_t i = 0; i < e.err.size(); ++i)
        if (e.err[i] > 3.0 && e.err[i] > 0.05 * e.gt_mag[i]) ++bad;
    return 100.0 * static_cast<double>(bad) / static_cast<double>(e.err.size());
}

double wauc(const Tensor& pred, const Tensor& gt, const Tensor* mask) {
    Errors e = collect(pred, gt, mask);
    std::sort(e.err.begin(), e.err.end());
    const double n = static_cast<double>(e.err.size());
    double acc = 0;
    for (int i = 0; i < 100; ++i) {
        const double x = (i + 0.5) * 0.05;
        const auto below =
            std::upper_bound(e.err.begin(), e.err.end(), x) - e.err.begin();
        const double f = 100.0 * static_cast<double>(below) / n;
        acc += f * ((5.0 - x) / 5.0) * 0.05;
    }
    return acc * 2.0 / 5.0;
}

void histogram_add(MotionHistogram& h, const Tensor& flow, const HistogramConfig& cfg) {
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("histogram: flow must be (2,H,W)");
    if (h.counts.empty()) h.counts = Tensor({2 * cfg.v_half, 2 * cfg.u_half});
    if (h.counts.dim(0) != 2 * cfg.v_half || h.counts.dim(1) != 2 * cfg.u_half)
        throw ShapeError("histogram: counts shape does not match config");
    const long long np = static_cast<long long>(flow.dim(1)) * flow.dim(2);
    for (long long i = 0; i < np; ++i) {
        const float u = flow[i];
        const float v = flow[np + i];
        ++h.total;
        if (!std::isfinite(u) || !std::isfinite(v)) {
            ++h.clipped;
            continue;
        }
        const double bu = std::floor(static_cast<double>(u));
        const double bv = std::floor(static_cast<double>(v));
        if (bu < -cfg.u_half || bu >= cfg.u_half || bv < -cfg.v_half || bv >= cfg.v_half) {
            ++h.clipped;
            continue;
        }
        const int col = static_cast<int>(bu) + cfg.u_half;
        const int row = static_cast<int>(bv) + cfg.v_half;
        h.counts[static_cast<long long>(row) * h.counts.dim(1) + col] += 1.0f;
    }
}

MotionHistogram motion_histogram(const std::vector<const Tensor*>& flows,
                                 const HistogramConfig& cfg) {
    MotionHistogram h;
    h.counts = Tensor({2 * cfg.v_half, 2 * cfg.u_half});
    for (const Tensor* f : flows) histogram_add(h, *f, cfg);
    return h;
}

}  // namespace memfof::metrics
