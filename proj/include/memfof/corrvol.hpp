#pragma once

// All-pairs correlation volumes at the working resolution, their pooled
// lookup pyramids, and the closed-form accounting of what they cost to hold
// in memory. Volumes are the dominant allocation of the whole engine, which
// is why they get their own module and an exact byte model.

#include <vector>

#include "memfof/tensor.hpp"

namespace memfof::corrvol {

struct Pyramid {
    std::vector<Tensor> levels;
    long long bytes() const;
};

// fa (D,Ha,Wa) x fb (D,Hb,Wb) -> (Ha*Wa, Hb, Wb); entry (u,v) is the feature
// dot product times s. Accumulation runs over d in ascending order with the
// scale applied once at the end, so equal inputs always reproduce
// bitwise-equal volumes. Also the attention logit kernel (s = softmax scale).
Tensor correlate_scaled(const Tensor& fa, const Tensor& fb, float s);

// correlate_scaled with s = 1/sqrt(D) when normalize is set, else 1.
Tensor build_base(const Tensor& fa, const Tensor& fb, bool normalize = true);

// Repeated 2x2 average pooling of the target dims; level l has target shape
// ceil(Hb/2^l) x ceil(Wb/2^l). levels counts the base as level 0, which the
// pyramid takes over without copying.
Pyramid build_pyramid(Tensor base, int levels = 4);

// Reference construction: correlate fa against the l-times pooled fb feature
// map instead of pooling the volume. The volume is linear in fb, so this
// agrees with build_pyramid up to float rounding while sharing none of its
// accumulation order. Re-runs the full correlation per level; checking only.
Pyramid build_pyramid_naive(const Tensor& fa, const Tensor& fb, int levels = 4,
                            bool normalize = true);

// Transpose of a square volume: out(v,u) = in(u,v). The correlation of the
// swapped frame pair, bit for bit, without touching the features again.
Tensor reverse_volume(const Tensor& base);

// Samples every level bilinearly on a (2*radius+1)^2 window centred at
// (pixel + flow) / 2^l; out-of-grid taps read zero. Output channel layout is
// level-major, then window row, then window column.
Tensor lookup(const Pyramid& pyr, const Tensor& flow, int radius = 4);

// lookup over borrowed level tensors; the single kernel both lookup paths
// (cached pyramids and freshly built ones) share.
Tensor lookup_levels(const std::vector<const Tensor*>& levels, const Tensor& flow, int radius);

// Bytes of fp32 needed to hold `volumes` full pyramids for an H x W frame
// pair correlated at 1/scale resolution.
long long memory_bytes(int h, int w, int scale, int levels = 4, int volumes = 2);

}  // namespace memfof::corrvol
