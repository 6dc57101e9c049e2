#include "memfof/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace memfof {

std::atomic<long long> AllocStats::live{0};
std::atomic<long long> AllocStats::peak{0};

long long Tensor::count(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("tensors: negative dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

bool Tensor::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

static void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    require(input.rank() == 3, "tensors: conv2d input must be rank 3, got " + shape_str(input.shape()));
    require(kernel.rank() == 4, "tensors: conv2d kernel must be rank 4, got " + shape_str(kernel.shape()));
    if (stride < 1) throw ParamError("tensors: conv2d stride must be >= 1");
    if (padding < 0) throw ParamError("tensors: conv2d padding must be >= 0");
    const int ic = input.dim(0), ih = input.dim(1), iw = input.dim(2);
    const int oc = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    require(ic == kc, "tensors: conv2d channel mismatch, input " + shape_str(input.shape()) +
                          " vs kernel " + shape_str(kernel.shape()));
    const int oh = (ih + 2 * padding - kh) / stride + 1;
    const int ow = (iw + 2 * padding - kw) / stride + 1;
    require(oh > 0 && ow > 0, "tensors: conv2d output would be empty");

    Tensor out({oc, oh, ow});
    const float* in = input.data();
    float* o = out.data();
    for (int co = 0; co < oc; ++co) {
        float* oplane = o + static_cast<std::size_t>(co) * oh * ow;
        for (int ci = 0; ci < ic; ++ci) {
            const float* iplane = in + static_cast<std::size_t>(ci) * ih * iw;
            const float* kbase = kernel.data() + ((static_cast<std::size_t>(co) * kc + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const float w = kbase[ky * kw + kx];
                    // adding w*v with w == 0 never changes a finite accumulator
                    if (w == 0.0f) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int y = oy * stride - padding + ky;
                        if (y < 0 || y >= ih) continue;
                        const float* irow = iplane + static_cast<std::size_t>(y) * iw;
                        float* orow = oplane + static_cast<std::size_t>(oy) * ow;
                        int x = -padding + kx;
                        for (int ox = 0; ox < ow; ++ox, x += stride) {
                            if (x < 0 || x >= iw) continue;
                            orow[ox] += w * irow[x];
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernel, int stride, int padding,
                         int in_h, int in_w) {
    const int oc = kernel.dim(0), ic = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);
    Tensor gin({ic, in_h, in_w});
    for (int co = 0; co < oc; ++co) {
        const float* gplane = grad_out.data() + static_cast<std::size_t>(co) * oh * ow;
        for (int ci = 0; ci < ic; ++ci) {
            float* iplane = gin.data() + static_cast<std::size_t>(ci) * in_h * in_w;
            const float* kbase = kernel.data() + ((static_cast<std::size_t>(co) * ic + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const float w = kbase[ky * kw + kx];
                    if (w == 0.0f) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int y = oy * stride - padding + ky;
                        if (y < 0 || y >= in_h) continue;
                        float* irow = iplane + static_cast<std::size_t>(y) * in_w;
                        const float* grow = gplane + static_cast<std::size_t>(oy) * ow;
                        int x = -padding + kx;
                        for (int ox = 0; ox < ow; ++ox, x += stride) {
                            if (x < 0 || x >= in_w) continue;
                            irow[x] += w * grow[ox];
                        }
                    }
                }
            }
        }
    }
    return gin;
}

Tensor conv2d_grad_kernel(const Tensor& grad_out, const Tensor& input, int stride, int padding,
                          int kh, int kw) {
    const int ic = input.dim(0), ih = input.dim(1), iw = input.dim(2);
    const int oc = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
    Tensor gk({oc, ic, kh, kw});
    for (int co = 0; co < oc; ++co) {
        const float* gplane = grad_out.data() + static_cast<std::size_t>(co) * oh * ow;
        for (int ci = 0; ci < ic; ++ci) {
            const float* iplane = input.data() + static_cast<std::size_t>(ci) * ih * iw;
            float* kbase = gk.data() + ((static_cast<std::size_t>(co) * ic + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    float acc = 0.0f;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int y = oy * stride - padding + ky;
                        if (y < 0 || y >= ih) continue;
                        const float* irow = iplane + static_cast<std::size_t>(y) * iw;
                        const float* grow = gplane + static_cast<std::size_t>(oy) * ow;
                        int x = -padding + kx;
                        for (int ox = 0; ox < ow; ++ox, x += stride) {
                            if (x < 0 || x >= iw) continue;
                            acc += grow[ox] * irow[x];
                        }
                    }
                    kbase[ky * kw + kx] = acc;
                }
            }
        }
    }
    return gk;
}

Tensor avg_pool2d(const Tensor& input, int window) {
    if (window != 2) throw ParamError("tensors: avg_pool2d supports window=2 only");
    require(input.rank() >= 2, "tensors: avg_pool2d needs at least 2 dims");
    const int r = input.rank();
    const int ih = input.dim(r - 2), iw = input.dim(r - 1);
    require(ih >= 1 && iw >= 1, "tensors: avg_pool2d empty spatial dims");
    long long planes = 1;
    for (int i = 0; i < r - 2; ++i) planes *= input.dim(i);
    const int oh = (ih + 1) / 2, ow = (iw + 1) / 2;
    std::vector<int> oshape(input.shape());
    oshape[static_cast<std::size_t>(r - 2)] = oh;
    oshape[static_cast<std::size_t>(r - 1)] = ow;
    Tensor out(oshape);
    for (long long p = 0; p < planes; ++p) {
        const float* in = input.data() + p * ih * iw;
        float* o = out.data() + p * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            const int y0 = 2 * oy;
            const int y1 = std::min(2 * oy + 1, ih - 1);  // replicate last row
            for (int ox = 0; ox < ow; ++ox) {
                const int x0 = 2 * ox;
                const int x1 = std::min(2 * ox + 1, iw - 1);  // replicate last col
                o[oy * ow + ox] =
                    (in[y0 * iw + x0] + in[y0 * iw + x1] + in[y1 * iw + x0] + in[y1 * iw + x1]) * 0.25f;
            }
        }
    }
    return out;
}

Tensor avg_pool2d_grad(const Tensor& grad_out, int in_h, int in_w) {
    const int r = grad_out.rank();
    const int oh = grad_out.dim(r - 2), ow = grad_out.dim(r - 1);
    long long planes = 1;
    for (int i = 0; i < r - 2; ++i) planes *= grad_out.dim(i);
    std::vector<int> ishape(grad_out.shape());
    ishape[static_cast<std::size_t>(r - 2)] = in_h;
    ishape[static_cast<std::size_t>(r - 1)] = in_w;
    Tensor gin(ishape);
    for (long long p = 0; p < planes; ++p) {
        const float* g = grad_out.data() + p * oh * ow;
        float* o = gin.data() + p * in_h * in_w;
        for (int oy = 0; oy < oh; ++oy) {
            const int y0 = 2 * oy;
            const int y1 = std::min(2 * oy + 1, in_h - 1);
            for (int ox = 0; ox < ow; ++ox) {
                const int x0 = 2 * ox;
                const int x1 = std::min(2 * ox + 1, in_w - 1);
                const float gv = g[oy * ow + ox] * 0.25f;
                o[y0 * in_w + x0] += gv;
                o[y0 * in_w + x1] += gv;
                o[y1 * in_w + x0] += gv;
                o[y1 * in_w + x1] += gv;
            }
        }
    }
    return gin;
}

Tensor bilinear_sample(const Tensor& input, const Tensor& coords) {
    require(input.rank() == 3, "tensors: bilinear_sample input must be rank 3");
    require(coords.rank() == 3 && coords.dim(0) == 2,
            "tensors: bilinear_sample coords must be (2,Ho,Wo), got " + shape_str(coords.shape()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int oh = coords.dim(1), ow = coords.dim(2);
    Tensor out({c, oh, ow});
    const float* xs = coords.data();
    const float* ys = coords.data() + static_cast<std::size_t>(oh) * ow;
    for (int i = 0; i < oh * ow; ++i) {
        const float x = xs[i], y = ys[i];
        const int x0 = static_cast<int>(std::floor(x));
        const int y0 = static_cast<int>(std::floor(y));
        const float fx = x - static_cast<float>(x0);
        const float fy = y - static_cast<float>(y0);
        const float w00 = (1.0f - fy) * (1.0f - fx);
        const float w01 = (1.0f - fy) * fx;
        const float w10 = fy * (1.0f - fx);
        const float w11 = fy * fx;
        const bool in00 = x0 >= 0 && x0 < w && y0 >= 0 && y0 < h;
        const bool in01 = x0 + 1 >= 0 && x0 + 1 < w && y0 >= 0 && y0 < h;
        const bool in10 = x0 >= 0 && x0 < w && y0 + 1 >= 0 && y0 + 1 < h;
        const bool in11 = x0 + 1 >= 0 && x0 + 1 < w && y0 + 1 >= 0 && y0 + 1 < h;
        for (int ch = 0; ch < c; ++ch) {
            const float* plane = input.data() + static_cast<std::size_t>(ch) * h * w;
            float v = 0.0f;
            if (in00) v += w00 * plane[y0 * w + x0];
            if (in01) v += w01 * plane[y0 * w + x0 + 1];
            if (in10) v += w10 * plane[(y0 + 1) * w + x0];
            if (in11) v += w11 * plane[(y0 + 1) * w + x0 + 1];
            out.data()[static_cast<std::size_t>(ch) * oh * ow + i] = v;
        }
    }
    return out;
}

Tensor softmax(const Tensor& input, int axis) {
    if (axis < 0) axis += input.rank();
    if (axis < 0 || axis >= input.rank()) throw ParamError("tensors: softmax axis out of range");
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= input.dim(i);
    for (int i = axis + 1; i < input.rank(); ++i) inner *= input.dim(i);
    const long long n = input.dim(axis);
    Tensor out(input.shape());
    const float* in = input.data();
    float* o = out.data();
    for (long long ot = 0; ot < outer; ++ot) {
        for (long long it = 0; it < inner; ++it) {
            const float* base = in + ot * n * inner + it;
            float* obase = o + ot * n * inner + it;
            float mx = base[0];
            for (long long k = 1; k < n; ++k) mx = std::max(mx, base[k * inner]);
            float denom = 0.0f;
            for (long long k = 0; k < n; ++k) {
                const float e = std::exp(base[k * inner] - mx);
                obase[k * inner] = e;
                denom += e;
            }
            const float inv = 1.0f / denom;
            for (long long k = 0; k < n; ++k) obase[k * inner] *= inv;
        }
    }
    return out;
}

template <class F>
static Tensor map_unary(const Tensor& in, F f) {
    Tensor out(in.shape());
    const float* a = in.data();
    float* o = out.data();
    const long long n = in.numel();
    for (long long i = 0; i < n; ++i) o[i] = f(a[i]);
    return out;
}

Tensor relu(const Tensor& input) {
    return map_unary(input, [](float v) { return v > 0.0f ? v : 0.0f; });
}
Tensor sigmoid(const Tensor& input) {
    return map_unary(input, [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
}
Tensor tanh_map(const Tensor& input) {
    return map_unary(input, [](float v) { return std::tanh(v); });
}

Tensor resize_bilinear(const Tensor& input, int out_h, int out_w) {
    require(input.rank() == 3, "tensors: resize_bilinear input must be rank 3");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (out_h < 1 || out_w < 1) throw ParamError("tensors: resize_bilinear empty output");
    Tensor out({c, out_h, out_w});
    const float sy = static_cast<float>(h) / static_cast<float>(out_h);
    const float sx = static_cast<float>(w) / static_cast<float>(out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        float y = (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
        y = std::min(std::max(y, 0.0f), static_cast<float>(h - 1));
        const int y0 = static_cast<int>(std::floor(y));
        const int y1 = std::min(y0 + 1, h - 1);
        const float fy = y - static_cast<float>(y0);
        for (int ox = 0; ox < out_w; ++ox) {
            float x = (static_cast<float>(ox) + 0.5f) * sx - 0.5f;
            x = std::min(std::max(x, 0.0f), static_cast<float>(w - 1));
            const int x0 = static_cast<int>(std::floor(x));
            const int x1 = std::min(x0 + 1, w - 1);
            const float fx = x - static_cast<float>(x0);
            for (int ch = 0; ch < c; ++ch) {
                const float* p = input.data() + static_cast<std::size_t>(ch) * h * w;
                const float top = p[y0 * w + x0] * (1.0f - fx) + p[y0 * w + x1] * fx;
                const float bot = p[y1 * w + x0] * (1.0f - fx) + p[y1 * w + x1] * fx;
                out.at(ch, oy, ox) = top * (1.0f - fy) + bot * fy;
            }
        }
    }
    return out;
}

static void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string("tensors: ") + op + " shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    Tensor out(a.shape());
    for (long long i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}
Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    Tensor out(a.shape());
    for (long long i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}
Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    Tensor out(a.shape());
    for (long long i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}
Tensor scale(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (long long i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw ParamError("tensors: concat of nothing");
    const int h = parts[0]->dim(1), w = parts[0]->dim(2);
    int c = 0;
    for (const Tensor* p : parts) {
        require(p->rank() == 3 && p->dim(1) == h && p->dim(2) == w,
                "tensors: concat spatial mismatch");
        c += p->dim(0);
    }
    Tensor out({c, h, w});
    float* o = out.data();
    for (const Tensor* p : parts) {
        std::memcpy(o, p->data(), static_cast<std::size_t>(p->numel()) * sizeof(float));
        o += p->numel();
    }
    return out;
}

Tensor slice_channels(const Tensor& input, int from, int to) {
    require(input.rank() == 3, "tensors: slice_channels input must be rank 3");
    if (from < 0 || to > input.dim(0) || from >= to)
        throw ParamError("tensors: slice_channels bad range");
    const int h = input.dim(1), w = input.dim(2);
    Tensor out({to - from, h, w});
    std::memcpy(out.data(), input.data() + static_cast<std::size_t>(from) * h * w,
                static_cast<std::size_t>(out.numel()) * sizeof(float));
    return out;
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
    require(input.rank() == 3 && bias.rank() == 1 && bias.dim(0) == input.dim(0),
            "tensors: bias must be (C,) matching input channels");
    Tensor out(input.shape());
    const int c = input.dim(0);
    const long long plane = static_cast<long long>(input.dim(1)) * input.dim(2);
    for (int ch = 0; ch < c; ++ch) {
        const float b = bias[ch];
        const float* in = input.data() + ch * plane;
        float* o = out.data() + ch * plane;
        for (long long i = 0; i < plane; ++i) o[i] = in[i] + b;
    }
    return out;
}

double mean(const Tensor& t) {
    return t.numel() ? sum(t) / static_cast<double>(t.numel()) : 0.0;
}
double sum(const Tensor& t) {
    double s = 0.0;
    for (long long i = 0; i < t.numel(); ++i) s += t[i];
    return s;
}
float max_abs(const Tensor& t) {
    float m = 0.0f;
    for (long long i = 0; i < t.numel(); ++i) m = std::max(m, std::fabs(t[i]));
    return m;
}

}  // namespace memfof
