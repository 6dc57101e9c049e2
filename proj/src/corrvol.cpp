#include "memfof/corrvol.hpp"

#include <cmath>

namespace memfof::corrvol {

long long Pyramid::bytes() const {
    long long total = 0;
    for (const Tensor& t : levels) total += t.bytes();
    return total;
}

Tensor correlate_scaled(const Tensor& fa, const Tensor& fb, float s) {
    if (fa.rank() != 3 || fb.rank() != 3)
        throw ShapeError("correlate_scaled: features must be (D,H,W)");
    if (fa.dim(0) != fb.dim(0)) throw ShapeError("correlate_scaled: feature depth mismatch");
    const int d = fa.dim(0);
    const long long na = (long long)fa.dim(1) * fa.dim(2);
    const long long nb = (long long)fb.dim(1) * fb.dim(2);
    if (na > (long long)INT32_MAX) throw ShapeError("correlate_scaled: source grid too large");

    Tensor out({(int)na, fb.dim(1), fb.dim(2)});
    float* ov = out.data();
    for (long long u = 0; u < na; ++u) {
        float* row = ov + u * nb;
        for (int dd = 0; dd < d; ++dd) {
            const float av = fa.data()[dd * na + u];
            const float* br = fb.data() + dd * nb;
            for (long long v = 0; v < nb; ++v) row[v] += av * br[v];
        }
        if (s != 1.0f)
            for (long long v = 0; v < nb; ++v) row[v] *= s;
    }
    return out;
}

Tensor build_base(const Tensor& fa, const Tensor& fb, bool normalize) {
    if (fa.rank() != 3) throw ShapeError("build_base: features must be (D,H,W)");
    const float s = normalize ? 1.0f / std::sqrt((float)fa.dim(0)) : 1.0f;
    return correlate_scaled(fa, fb, s);
}

Pyramid build_pyramid(Tensor base, int levels) {
    if (levels < 1) throw ParamError("build_pyramid: need at least one level");
    Pyramid pyr;
    pyr.levels.reserve(levels);
    pyr.levels.push_back(std::move(base));
    for (int l = 1; l < levels; ++l)
        pyr.levels.push_back(memfof::avg_pool2d(pyr.levels.back()));
    return pyr;
}

Pyramid build_pyramid_naive(const Tensor& fa, const Tensor& fb, int levels, bool normalize) {
    if (levels < 1) throw ParamError("build_pyramid_naive: need at least one level");
    Pyramid pyr;
    pyr.levels.reserve(levels);
    Tensor pooled = fb;
    pyr.levels.push_back(build_base(fa, pooled, normalize));
    for (int l = 1; l < levels; ++l) {
        pooled = memfof::avg_pool2d(pooled);
        pyr.levels.push_back(build_base(fa, pooled, normalize));
    }
    return pyr;
}

Tensor reverse_volume(const Tensor& base) {
    if (base.rank() != 3) throw ShapeError("reverse_volume: expected (H*W, H, W)");
    const int h = base.dim(1), w = base.dim(2);
    const long long n = (long long)h * w;
    if (base.dim(0) != n) throw ShapeError("reverse_volume: volume is not square");
    Tensor out(base.shape());
    const float* in = base.data();
    float* ov = out.data();
    for (long long u = 0; u < n; ++u)
        for (long long v = 0; v < n; ++v) ov[v * n + u] = in[u * n + v];
    return out;
}

Tensor lookup_levels(const std::vector<const Tensor*>& levels, const Tensor& flow, int radius) {
    if (levels.empty()) throw ParamError("lookup: empty pyramid");
    if (radius < 0) throw ParamError("lookup: negative radius");
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("lookup: flow must be (2,H,W)");
    const int h = flow.dim(1), w = flow.dim(2);
    const long long np = (long long)h * w;
    const int win = 2 * radius + 1;
    const int nl = (int)levels.size();
    for (const Tensor* lv : levels)
        if (lv->dim(0) != np) throw ShapeError("lookup: pyramid planes do not match the flow grid");

    Tensor out({nl * win * win, h, w});
    const float* fx = flow.data();
    const float* fy = flow.data() + np;
    for (long long s = 0; s < np; ++s) {
        const int sy = (int)(s / w), sx = (int)(s % w);
        for (int l = 0; l < nl; ++l) {
            const Tensor& vol = *levels[l];
            const int lh = vol.dim(1), lw = vol.dim(2);
            const float* plane = vol.data() + s * lh * lw;
            const float inv = 1.0f / (float)(1 << l);
            const float cx = (sx + fx[s]) * inv;
            const float cy = (sy + fy[s]) * inv;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    const float px = cx + dx, py = cy + dy;
                    const int x0 = (int)std::floor(px), y0 = (int)std::floor(py);
                    const float ax = px - x0, ay = py - y0;
                    float acc = 0.0f;
                    for (int corner = 0; corner < 4; ++corner) {
                        const int xi = x0 + (corner & 1), yi = y0 + (corner >> 1);
                        if (xi < 0 || xi >= lw || yi < 0 || yi >= lh) continue;
                        const float wgt = ((corner & 1) ? ax : 1.0f - ax) *
                                          ((corner >> 1) ? ay : 1.0f - ay);
                        acc += wgt * plane[yi * lw + xi];
                    }
                    out.data()[((l * win + dy + radius) * win + dx + radius) * np + s] = acc;
                }
            }
        }
    }
    return out;
}

Tensor lookup(const Pyramid& pyr, const Tensor& flow, int radius) {
    std::vector<const Tensor*> levels;
    levels.reserve(pyr.levels.size());
    for (const Tensor& t : pyr.levels) levels.push_back(&t);
    return lookup_levels(levels, flow, radius);
}

long long memory_bytes(int h, int w, int scale, int levels, int volumes) {
    if (h < 1 || w < 1 || scale < 1 || levels < 1 || volumes < 1)
        throw ParamError("memory_bytes: all arguments must be positive");
    const long long hc = (h + scale - 1) / scale;
    const long long wc = (w + scale - 1) / scale;
    long long cells = 0;
    for (int l = 0; l < levels; ++l) {
        const long long lh = (hc + (1LL << l) - 1) >> l;
        const long long lw = (wc + (1LL << l) - 1) >> l;
        cells += hc * wc * lh * lw;
    }
    return (long long)volumes * 4 * cells;
}

}  // namespace memfof::corrvol
