#include "memfof/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "memfof/corrvol.hpp"

namespace memfof::ad {

namespace {

thread_local bool g_grad_enabled = true;

// Wraps a freshly computed value. Parents and the backward closure are kept
// only when gradients are on and at least one parent is tracked; otherwise
// the node degrades to a plain value and the graph stays small.
Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool track = g_grad_enabled;
    if (track) {
        bool any = false;
        for (const auto& p : parents)
            if (p && p->tracked) any = true;
        track = any;
    }
    if (track) {
        n->tracked = true;
        n->parents = std::move(parents);
        n->backprop = std::move(bp);
    }
    return n;
}


}  // namespace

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->tracked = requires_grad;
    return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Tensor& ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void accumulate(Node& n, const Tensor& delta) {
    if (!n.tracked) return;
    Tensor& g = ensure_grad(n);
    if (!g.same_shape(delta)) throw ShapeError("accumulate: gradient shape mismatch");
    float* gd = g.data();
    const float* dd = delta.data();
    for (long long i = 0; i < g.numel(); ++i) gd[i] += dd[i];
}

void backward(const Var& root) {
    if (!root) throw ParamError("backward: null root");
    if (root->value.numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root->tracked) return;

    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p && p->tracked && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    ensure_grad(*root).data()[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

// --- ops ---------------------------------------------------------------

Var conv2d(const Var& x, const Var& kernel, const Var& bias, int stride, int padding) {
    Tensor out = memfof::conv2d(x->value, kernel->value, stride, padding);
    if (bias) out = memfof::add_channel_bias(out, bias->value);
    std::vector<Var> parents{x, kernel};
    if (bias) parents.push_back(bias);
    return make(std::move(out), std::move(parents), [stride, padding](Node& n) {
        const Tensor& xin = n.parents[0]->value;
        const Tensor& k = n.parents[1]->value;
        accumulate(*n.parents[0],
                   memfof::conv2d_grad_input(n.grad, k, stride, padding, xin.dim(1), xin.dim(2)));
        accumulate(*n.parents[1],
                   memfof::conv2d_grad_kernel(n.grad, xin, stride, padding, k.dim(2), k.dim(3)));
        if (n.parents.size() > 2) {
            const int oc = n.grad.dim(0);
            const long long plane = (long long)n.grad.dim(1) * n.grad.dim(2);
            Tensor gb({oc});
            for (int c = 0; c < oc; ++c) {
                const float* g = n.grad.data() + c * plane;
                float acc = 0.0f;
                for (long long i = 0; i < plane; ++i) acc += g[i];
                gb.data()[c] = acc;
            }
            accumulate(*n.parents[2], gb);
        }
    });
}

Var avg_pool2d(const Var& x) {
    Tensor out = memfof::avg_pool2d(x->value);
    const int ih = x->value.dim(1), iw = x->value.dim(2);
    return make(std::move(out), {x}, [ih, iw](Node& n) {
        accumulate(*n.parents[0], memfof::avg_pool2d_grad(n.grad, ih, iw));
    });
}

Var relu(const Var& x) {
    return make(memfof::relu(x->value), {x}, [](Node& n) {
        const float* xv = n.parents[0]->value.data();
        Tensor gx(n.grad.shape());
        const float* g = n.grad.data();
        float* o = gx.data();
        for (long long i = 0; i < gx.numel(); ++i) o[i] = xv[i] > 0.0f ? g[i] : 0.0f;
        accumulate(*n.parents[0], gx);
    });
}

Var sigmoid(const Var& x) {
    return make(memfof::sigmoid(x->value), {x}, [](Node& n) {
        const float* y = n.value.data();
        const float* g = n.grad.data();
        Tensor gx(n.grad.shape());
        float* o = gx.data();
        for (long long i = 0; i < gx.numel(); ++i) o[i] = g[i] * y[i] * (1.0f - y[i]);
        accumulate(*n.parents[0], gx);
    });
}

Var tanh_(const Var& x) {
    return make(memfof::tanh_map(x->value), {x}, [](Node& n) {
        const float* y = n.value.data();
        const float* g = n.grad.data();
        Tensor gx(n.grad.shape());
        float* o = gx.data();
        for (long long i = 0; i < gx.numel(); ++i) o[i] = g[i] * (1.0f - y[i] * y[i]);
        accumulate(*n.parents[0], gx);
    });
}

Var softmax(const Var& x, int axis) {
    Tensor out = memfof::softmax(x->value, axis);
    return make(std::move(out), {x}, [axis](Node& n) {
        const auto& shape = n.value.shape();
        long long outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= shape[i];
        for (size_t i = axis + 1; i < shape.size(); ++i) inner *= (long long)shape[i];
        const long long len = shape[axis];
        const float* y = n.value.data();
        const float* g = n.grad.data();
        Tensor gx(n.value.shape());
        float* o = gx.data();
        for (long long ou = 0; ou < outer; ++ou) {
            for (long long in = 0; in < inner; ++in) {
                const long long base = ou * len * inner + in;
                double dot = 0.0;
                for (long long i = 0; i < len; ++i) {
                    const long long idx = base + i * inner;
                    dot += (double)g[idx] * y[idx];
                }
                for (long long i = 0; i < len; ++i) {
                    const long long idx = base + i * inner;
                    o[idx] = y[idx] * (g[idx] - (float)dot);
                }
            }
        }
        accumulate(*n.parents[0], gx);
    });
}

Var add(const Var& a, const Var& b) {
    return make(memfof::add(a->value, b->value), {a, b}, [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    return make(memfof::sub(a->value, b->value), {a, b}, [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], memfof::scale(n.grad, -1.0f));
    });
}

Var mul(const Var& a, const Var& b) {
    return make(memfof::mul(a->value, b->value), {a, b}, [](Node& n) {
        accumulate(*n.parents[0], memfof::mul(n.grad, n.parents[1]->value));
        accumulate(*n.parents[1], memfof::mul(n.grad, n.parents[0]->value));
    });
}

Var scale(const Var& a, float s) {
    return make(memfof::scale(a->value, s), {a},
                [s](Node& n) { accumulate(*n.parents[0], memfof::scale(n.grad, s)); });
}

Var affine(const Var& x, float a, float b) {
    Tensor out(x->value.shape());
    const float* in = x->value.data();
    float* o = out.data();
    for (long long i = 0; i < out.numel(); ++i) o[i] = a * in[i] + b;
    return make(std::move(out), {x},
                [a](Node& n) { accumulate(*n.parents[0], memfof::scale(n.grad, a)); });
}

Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw ParamError("concat: no inputs");
    std::vector<const Tensor*> vals;
    vals.reserve(parts.size());
    for (const auto& p : parts) vals.push_back(&p->value);
    Tensor out = memfof::concat_channels(vals);
    std::vector<Var> parents(parts.begin(), parts.end());
    return make(std::move(out), std::move(parents), [](Node& n) {
        int c0 = 0;
        for (auto& p : n.parents) {
            const int c = p->value.dim(0);
            if (p->tracked) accumulate(*p, memfof::slice_channels(n.grad, c0, c0 + c));
            c0 += c;
        }
    });
}

Var slice(const Var& x, int from, int to) {
    Tensor out = memfof::slice_channels(x->value, from, to);
    return make(std::move(out), {x}, [from, to](Node& n) {
        Tensor gx(n.parents[0]->value.shape());
        const long long plane = (long long)gx.dim(1) * gx.dim(2);
        std::memcpy(gx.data() + (long long)from * plane, n.grad.data(),
                    sizeof(float) * (size_t)((to - from) * plane));
        accumulate(*n.parents[0], gx);
    });
}

Var corr_base(const Var& fa, const Var& fb, float s) {
    Tensor out = corrvol::correlate_scaled(fa->value, fb->value, s);
    return make(std::move(out), {fa, fb}, [s](Node& n) {
        const Tensor& a = n.parents[0]->value;
        const Tensor& b = n.parents[1]->value;
        const int d = a.dim(0);
        const long long na = (long long)a.dim(1) * a.dim(2);
        const long long nb = (long long)b.dim(1) * b.dim(2);
        const float* g = n.grad.data();
        Tensor ga(a.shape()), gb(b.shape());
        for (long long u = 0; u < na; ++u) {
            const float* grow = g + u * nb;
            for (int dd = 0; dd < d; ++dd) {
                const float* br = b.data() + dd * nb;
                float acc = 0.0f;
                for (long long v = 0; v < nb; ++v) acc += grow[v] * br[v];
                ga.data()[dd * na + u] += s * acc;
                const float sa = s * a.data()[dd * na + u];
                float* gbr = gb.data() + dd * nb;
                for (long long v = 0; v < nb; ++v) gbr[v] += sa * grow[v];
            }
        }
        accumulate(*n.parents[0], ga);
        accumulate(*n.parents[1], gb);
    });
}

Var softmax_last2(const Var& volume) {
    const Tensor& v = volume->value;
    if (v.rank() != 3) throw ShapeError("softmax_last2: expected rank-3 input");
    const long long planes = v.dim(0);
    const long long n = (long long)v.dim(1) * v.dim(2);
    Tensor out(v.shape());
    for (long long p = 0; p < planes; ++p) {
        const float* in = v.data() + p * n;
        float* o = out.data() + p * n;
        float mx = in[0];
        for (long long i = 1; i < n; ++i) mx = std::max(mx, in[i]);
        double denom = 0.0;
        for (long long i = 0; i < n; ++i) denom += std::exp((double)in[i] - mx);
        for (long long i = 0; i < n; ++i) o[i] = (float)(std::exp((double)in[i] - mx) / denom);
    }
    return make(std::move(out), {volume}, [](Node& n_) {
        const long long planes = n_.value.dim(0);
        const long long n = (long long)n_.value.dim(1) * n_.value.dim(2);
        const float* y = n_.value.data();
        const float* g = n_.grad.data();
        Tensor gx(n_.value.shape());
        float* o = gx.data();
        for (long long p = 0; p < planes; ++p) {
            const float* yp = y + p * n;
            const float* gp = g + p * n;
            float* op = o + p * n;
            double dot = 0.0;
            for (long long i = 0; i < n; ++i) dot += (double)gp[i] * yp[i];
            for (long long i = 0; i < n; ++i) op[i] = yp[i] * (gp[i] - (float)dot);
        }
        accumulate(*n_.parents[0], gx);
    });
}

Var attn_apply(const Var& attn, const Var& values) {
    const Tensor& a = attn->value;
    const Tensor& v = values->value;
    if (a.rank() != 3 || v.rank() != 3) throw ShapeError("attn_apply: rank-3 inputs expected");
    const long long nv = (long long)v.dim(1) * v.dim(2);
    const long long nu = a.dim(0);
    if ((long long)a.dim(1) * a.dim(2) != nv)
        throw ShapeError("attn_apply: attention targets do not match value grid");
    if (nu != nv) throw ShapeError("attn_apply: attention must be square over the value grid");
    const int c = v.dim(0);
    Tensor out({c, v.dim(1), v.dim(2)});
    for (int ch = 0; ch < c; ++ch) {
        const float* vr = v.data() + ch * nv;
        float* orow = out.data() + ch * nv;
        for (long long u = 0; u < nu; ++u) {
            const float* ar = a.data() + u * nv;
            float acc = 0.0f;
            for (long long t = 0; t < nv; ++t) acc += ar[t] * vr[t];
            orow[u] = acc;
        }
    }
    return make(std::move(out), {attn, values}, [](Node& n) {
        const Tensor& a = n.parents[0]->value;
        const Tensor& v = n.parents[1]->value;
        const int c = v.dim(0);
        const long long nv = (long long)v.dim(1) * v.dim(2);
        const float* g = n.grad.data();
        Tensor ga(a.shape()), gv(v.shape());
        for (int ch = 0; ch < c; ++ch) {
            const float* vr = v.data() + ch * nv;
            const float* gr = g + ch * nv;
            float* gvr = gv.data() + ch * nv;
            for (long long u = 0; u < nv; ++u) {
                const float gu = gr[u];
                if (gu == 0.0f) continue;
                float* gar = ga.data() + u * nv;
                const float* ar = a.data() + u * nv;
                for (long long t = 0; t < nv; ++t) {
                    gar[t] += gu * vr[t];
                    gvr[t] += gu * ar[t];
                }
            }
        }
        accumulate(*n.parents[0], ga);
        accumulate(*n.parents[1], gv);
    });
}

Var corr_lookup(const std::vector<Var>& levels, const Var& flow, int radius) {
    if (levels.empty()) throw ParamError("corr_lookup: no pyramid levels");
    std::vector<const Tensor*> vals;
    vals.reserve(levels.size());
    for (const auto& lv : levels) vals.push_back(&lv->value);
    Tensor out = corrvol::lookup_levels(vals, flow->value, radius);
    const int nl = (int)levels.size();

    std::vector<Var> parents(levels.begin(), levels.end());
    parents.push_back(flow);
    return make(std::move(out), std::move(parents), [radius, nl](Node& n) {
        const Var& flowp = n.parents[nl];
        const Tensor& f = flowp->value;
        const int h = f.dim(1), w = f.dim(2);
        const long long np = (long long)h * w;
        const int win = 2 * radius + 1;
        const float* fx = f.data();
        const float* fy = f.data() + np;
        const float* g = n.grad.data();

        Tensor gflow(f.shape());
        std::vector<Tensor> glev;
        glev.reserve(nl);
        for (int l = 0; l < nl; ++l) glev.emplace_back(n.parents[l]->value.shape());

        for (long long s = 0; s < np; ++s) {
            const int sy = (int)(s / w), sx = (int)(s % w);
            float dfx = 0.0f, dfy = 0.0f;
            for (int l = 0; l < nl; ++l) {
                const Tensor& vol = n.parents[l]->value;
                const int lh = vol.dim(1), lw = vol.dim(2);
                const float* plane = vol.data() + s * lh * lw;
                float* gplane = glev[l].data() + s * lh * lw;
                const float inv = 1.0f / (float)(1 << l);
                const float cx = (sx + fx[s]) * inv;
                const float cy = (sy + fy[s]) * inv;
                for (int dy = -radius; dy <= radius; ++dy) {
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int ch = (l * win + (dy + radius)) * win + (dx + radius);
                        const float go = g[ch * np + s];
                        if (go == 0.0f) continue;
                        const float px = cx + dx, py = cy + dy;
                        const int x0 = (int)std::floor(px), y0 = (int)std::floor(py);
                        const float ax = px - x0, ay = py - y0;
                        float v[4] = {0, 0, 0, 0};
                        for (int corner = 0; corner < 4; ++corner) {
                            const int xi = x0 + (corner & 1), yi = y0 + (corner >> 1);
                            if (xi < 0 || xi >= lw || yi < 0 || yi >= lh) continue;
                            v[corner] = plane[yi * lw + xi];
                            const float wgt = ((corner & 1) ? ax : 1.0f - ax) *
                                              ((corner >> 1) ? ay : 1.0f - ay);
                            gplane[yi * lw + xi] += go * wgt;
                        }
                        const float dvdx = (1.0f - ay) * (v[1] - v[0]) + ay * (v[3] - v[2]);
                        const float dvdy = (1.0f - ax) * (v[2] - v[0]) + ax * (v[3] - v[1]);
                        dfx += go * dvdx * inv;
                        dfy += go * dvdy * inv;
                    }
                }
            }
            gflow.data()[s] = dfx;
            gflow.data()[np + s] = dfy;
        }
        for (int l = 0; l < nl; ++l) accumulate(*n.parents[l], glev[l]);
        accumulate(*flowp, gflow);
    });
}

Tensor convex_weights(const Tensor& mask_logits, int factor) {
    if (mask_logits.rank() != 3) throw ShapeError("convex_weights: rank-3 logits expected");
    if (factor < 1) throw ParamError("convex_weights: factor must be positive");
    if (mask_logits.dim(0) != factor * factor * 9)
        throw ShapeError("convex_weights: mask must be (factor*factor*9, Hc, Wc)");
    const long long plane = (long long)mask_logits.dim(1) * mask_logits.dim(2);
    Tensor wgt(mask_logits.shape());
    const float* m = mask_logits.data();
    float* w = wgt.data();
    for (int sub = 0; sub < factor * factor; ++sub) {
        for (long long p = 0; p < plane; ++p) {
            const long long base = (long long)sub * 9 * plane + p;
            float mx = m[base];
            for (int j = 1; j < 9; ++j) mx = std::max(mx, m[base + j * plane]);
            double denom = 0.0;
            for (int j = 0; j < 9; ++j) denom += std::exp((double)m[base + j * plane] - mx);
            for (int j = 0; j < 9; ++j)
                w[base + j * plane] = (float)(std::exp((double)m[base + j * plane] - mx) / denom);
        }
    }
    return wgt;
}

Var upsample_convex(const Var& fields, const Var& mask_logits, int factor,
                    std::vector<float> channel_scales) {
    const Tensor& f = fields->value;
    const Tensor& m = mask_logits->value;
    if (f.rank() != 3 || m.rank() != 3) throw ShapeError("upsample_convex: rank-3 inputs expected");
    const int c = f.dim(0), hc = f.dim(1), wc = f.dim(2);
    if ((int)channel_scales.size() != c)
        throw ParamError("upsample_convex: need one scale per field channel");
    if (m.dim(1) != hc || m.dim(2) != wc)
        throw ShapeError("upsample_convex: mask and fields disagree on the coarse grid");
    Tensor wgt = convex_weights(m, factor);

    const long long plane = (long long)hc * wc;
    Tensor out({c, hc * factor, wc * factor});
    const long long fine = (long long)hc * factor * wc * factor;
    for (int ch = 0; ch < c; ++ch) {
        const float vs = channel_scales[ch];
        const float* fp = f.data() + ch * plane;
        float* op = out.data() + ch * fine;
        for (int y = 0; y < hc; ++y) {
            for (int x = 0; x < wc; ++x) {
                float nb[9];
                for (int j = 0; j < 9; ++j) {
                    const int yy = std::clamp(y + j / 3 - 1, 0, hc - 1);
                    const int xx = std::clamp(x + j % 3 - 1, 0, wc - 1);
                    nb[j] = fp[yy * wc + xx];
                }
                const float anchor = nb[4];
                for (int by = 0; by < factor; ++by) {
                    for (int bx = 0; bx < factor; ++bx) {
                        const int sub = by * factor + bx;
                        float acc = anchor;
                        for (int j = 0; j < 9; ++j)
                            acc += wgt.data()[((long long)sub * 9 + j) * plane + y * wc + x] *
                                   (nb[j] - anchor);
                        op[(long long)(y * factor + by) * (wc * factor) + x * factor + bx] =
                            vs * acc;
                    }
                }
            }
        }
    }

    return make(std::move(out), {fields, mask_logits},
                [factor, channel_scales = std::move(channel_scales),
                 wgt = std::move(wgt)](Node& n) {
        const Tensor& f = n.parents[0]->value;
        const int c = f.dim(0), hc = f.dim(1), wc = f.dim(2);
        const long long plane = (long long)hc * wc;
        const long long fine = (long long)hc * factor * wc * factor;
        const float* g = n.grad.data();

        Tensor gf(f.shape());
        Tensor gw(wgt.shape());
        for (int ch = 0; ch < c; ++ch) {
            const float vs = channel_scales[ch];
            const float* fp = f.data() + ch * plane;
            const float* gp = g + ch * fine;
            for (int y = 0; y < hc; ++y) {
                for (int x = 0; x < wc; ++x) {
                    int nyy[9], nxx[9];
                    for (int j = 0; j < 9; ++j) {
                        nyy[j] = std::clamp(y + j / 3 - 1, 0, hc - 1);
                        nxx[j] = std::clamp(x + j % 3 - 1, 0, wc - 1);
                    }
                    const float anchor = fp[y * wc + x];
                    for (int by = 0; by < factor; ++by) {
                        for (int bx = 0; bx < factor; ++bx) {
                            const int sub = by * factor + bx;
                            const float go =
                                vs *
                                gp[(long long)(y * factor + by) * (wc * factor) + x * factor + bx];
                            if (go == 0.0f) continue;
                            for (int j = 0; j < 9; ++j) {
                                const long long wi =
                                    ((long long)sub * 9 + j) * plane + y * wc + x;
                                gf.data()[ch * plane + nyy[j] * wc + nxx[j]] +=
                                    go * wgt.data()[wi];
                                gw.data()[wi] += go * (fp[nyy[j] * wc + nxx[j]] - anchor);
                            }
                        }
                    }
                }
            }
        }

        // Push the weight gradient back through each 3x3 softmax group. The
        // anchor offset cancels inside the softmax Jacobian, so gw may carry it.
        Tensor gm(wgt.shape());
        for (int sub = 0; sub < factor * factor; ++sub) {
            for (long long p = 0; p < plane; ++p) {
                const long long base = (long long)sub * 9 * plane + p;
                double dot = 0.0;
                for (int j = 0; j < 9; ++j)
                    dot += (double)gw.data()[base + j * plane] * wgt.data()[base + j * plane];
                for (int j = 0; j < 9; ++j)
                    gm.data()[base + j * plane] =
                        wgt.data()[base + j * plane] *
                        (gw.data()[base + j * plane] - (float)dot);
            }
        }
        accumulate(*n.parents[0], gf);
        accumulate(*n.parents[1], gm);
    });
}

Var mol_loss(const Var& flow, const Var& alpha, const Var& beta, const Tensor& gt) {
    const Tensor& fv = flow->value;
    if (fv.rank() != 3 || fv.dim(0) != 2) throw ShapeError("mol_loss: flow must be (2,H,W)");
    if (!fv.same_shape(gt)) throw ShapeError("mol_loss: flow and ground truth differ in shape");
    const Tensor& av = alpha->value;
    const Tensor& bv = beta->value;
    const long long np = (long long)fv.dim(1) * fv.dim(2);
    if (av.numel() != np || bv.numel() != np)
        throw ShapeError("mol_loss: alpha/beta must have one value per pixel");

    // -log[(a/2) e^{-|d|} + ((1-a)/2) e^{-b} e^{-|d| e^{-b}}], computed in
    // log space so large residuals cannot underflow the density to zero.
    double total = 0.0;
    for (long long p = 0; p < np; ++p) {
        const double a = av.data()[p];
        const double b = bv.data()[p];
        const double es = std::exp(-b);
        for (int d = 0; d < 2; ++d) {
            const double delta = std::abs((double)fv.data()[d * np + p] - gt.data()[d * np + p]);
            const double t1 = std::log(a / 2.0) - delta;
            const double t2 = std::log((1.0 - a) / 2.0) - b - delta * es;
            const double mx = std::max(t1, t2);
            total += -(mx + std::log(std::exp(t1 - mx) + std::exp(t2 - mx)));
        }
    }
    Tensor out({1});
    out.data()[0] = (float)(total / (double)(2 * np));

    return make(std::move(out), {flow, alpha, beta}, [gt](Node& n) {
        const Tensor& fv = n.parents[0]->value;
        const Tensor& av = n.parents[1]->value;
        const Tensor& bv = n.parents[2]->value;
        const long long np = (long long)fv.dim(1) * fv.dim(2);
        const float gscale = n.grad.data()[0] / (float)(2 * np);

        Tensor gf(fv.shape()), ga(av.shape()), gb(bv.shape());
        for (long long p = 0; p < np; ++p) {
            const double a = av.data()[p];
            const double b = bv.data()[p];
            const double es = std::exp(-b);
            for (int d = 0; d < 2; ++d) {
                const double diff = (double)fv.data()[d * np + p] - gt.data()[d * np + p];
                const double delta = std::abs(diff);
                const double t1 = std::log(a / 2.0) - delta;
                const double t2 = std::log((1.0 - a) / 2.0) - b - delta * es;
                const double mx = std::max(t1, t2);
                const double e1 = std::exp(t1 - mx), e2 = std::exp(t2 - mx);
                const double denom = e1 + e2;
                const double p1 = e1 / denom, p2 = e2 / denom;
                // Branch posteriors divided by their mixture weight stay
                // finite as a -> 0 or 1, so fold the weight in analytically.
                const double r1 = std::exp(std::log(0.5) - delta - mx) / denom;
                const double r2 = std::exp(std::log(0.5) - b - delta * es - mx) / denom;
                const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                gf.data()[d * np + p] += gscale * (float)(sgn * (p1 + p2 * es));
                ga.data()[p] += gscale * (float)(-(r1 - r2));
                gb.data()[p] += gscale * (float)(p2 * (1.0 - delta * es));
            }
        }
        accumulate(*n.parents[0], gf);
        accumulate(*n.parents[1], ga);
        accumulate(*n.parents[2], gb);
    });
}

Var dot_const(const Var& x, const Tensor& w) {
    if (x->value.numel() != w.numel()) throw ShapeError("dot_const: size mismatch");
    double acc = 0.0;
    for (long long i = 0; i < w.numel(); ++i)
        acc += (double)x->value.data()[i] * (double)w.data()[i];
    Tensor out({1});
    out.data()[0] = (float)acc;
    return make(std::move(out), {x}, [w](Node& n) {
        const float g = n.grad.data()[0];
        Tensor gx(n.parents[0]->value.shape());
        for (long long i = 0; i < w.numel(); ++i) gx.data()[i] = g * w.data()[i];
        accumulate(*n.parents[0], gx);
    });
}

Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
    if (scalars.empty() || scalars.size() != weights.size())
        throw ParamError("weighted_sum: need one weight per scalar");
    double acc = 0.0;
    for (size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i]->value.numel() != 1) throw ShapeError("weighted_sum: inputs must be scalars");
        acc += weights[i] * (double)scalars[i]->value.data()[0];
    }
    Tensor out({1});
    out.data()[0] = (float)acc;
    std::vector<Var> parents(scalars.begin(), scalars.end());
    return make(std::move(out), std::move(parents), [weights](Node& n) {
        const float g = n.grad.data()[0];
        for (size_t i = 0; i < n.parents.size(); ++i) {
            Tensor gi({1});
            gi.data()[0] = g * (float)weights[i];
            accumulate(*n.parents[i], gi);
        }
    });
}

}  // namespace memfof::ad
