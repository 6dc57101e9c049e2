#pragma once

// Reverse-mode differentiation for exactly the ops the flow model uses.
// Dynamic graph of shared nodes; backward() walks it once in reverse
// topological order. No general tape semantics are promised: every op here
// exists because some block of the network needs its gradient.

#include <functional>
#include <memory>
#include <vector>

#include "memfof/tensor.hpp"

namespace memfof::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool tracked = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;
};

Var constant(Tensor v);
Var leaf(Tensor v, bool requires_grad = true);

bool grad_enabled();
struct NoGradGuard {
    bool prev;
    NoGradGuard();
    ~NoGradGuard();
};

// Accumulates `delta` into n's gradient buffer (allocating zeros on first use).
void accumulate(Node& n, const Tensor& delta);
Tensor& ensure_grad(Node& n);

// root must be scalar (numel == 1); seeds d(root)/d(root) = 1.
void backward(const Var& root);

// --- ops ---------------------------------------------------------------

// kernel (OC,IC,KH,KW); bias may be nullptr for no bias.
Var conv2d(const Var& x, const Var& kernel, const Var& bias, int stride, int padding);
Var avg_pool2d(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh_(const Var& x);
Var softmax(const Var& x, int axis);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
// Elementwise a*x + b with scalar coefficients.
Var affine(const Var& x, float a, float b);
Var concat(const std::vector<Var>& parts);
Var slice(const Var& x, int from, int to);

// All-pairs feature correlation: fa, fb are (D,H,W); result (H*W, H, W) with
// entry (u, v) = s * sum_d fa(d,u) * fb(d,v). Doubles as the attention logit
// matmul (queries as fa, keys as fb, s the attention scale).
Var corr_base(const Var& fa, const Var& fb, float s);

// Softmax over the trailing two (spatial) dims of each leading plane.
Var softmax_last2(const Var& volume);

// attn (P,H,W) row-stochastic over (H,W); values (C,H,W).
// out(c, u) = sum_v attn(u, v) * values(c, v).
Var attn_apply(const Var& attn, const Var& values);

// Pyramid lookup: levels[l] is a (H*W, Hl, Wl) volume, flow is (2,H,W) at the
// working resolution. Samples each level on a (2r+1)^2 grid around
// (pixel + flow) / 2^l; output feature is (L*(2r+1)^2, H, W), level-major,
// window rows then columns.
Var corr_lookup(const std::vector<Var>& levels, const Var& flow, int radius);

// Softmax weights of the upsampling mask: same shape as the logits, each 3x3
// group a partition of unity.
Tensor convex_weights(const Tensor& mask_logits, int factor);

// Convex upsampling by `factor`. fields (C,Hc,Wc); mask_logits
// (factor*factor*9, Hc, Wc): for each fine sub-position, 9 logits over the
// 3x3 coarse neighborhood (edge-clamped). The combination is anchored at the
// centre tap, out = f_c + sum_j w_j*(f_j - f_c), so a constant field stays
// exactly constant. Channel c of the output is multiplied by
// channel_scales[c] (the factor for flow channels, 1 for the MoL maps).
Var upsample_convex(const Var& fields, const Var& mask_logits, int factor,
                    std::vector<float> channel_scales);

// Mixture-of-Laplace negative log likelihood, averaged over both coordinates
// and all pixels: flow (2,H,W), alpha/beta (1,H,W), gt (2,H,W). Scalar.
Var mol_loss(const Var& flow, const Var& alpha, const Var& beta, const Tensor& gt);

// Scalar combination sum_i weights[i] * scalars[i].
Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights);

// Scalar projection sum_i x[i] * w[i] against a fixed tensor.
Var dot_const(const Var& x, const Tensor& w);

}  // namespace memfof::ad
