#include "memfof/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

namespace memfof::model {

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Box-Muller over a per-tensor generator; the init must not depend on the
// library's distribution internals so saved goldens stay stable.
struct Gauss {
    std::uint64_t state;
    explicit Gauss(std::uint64_t seed) : state(seed) {}
    double uniform() {
        state = splitmix64(state);
        return (double)(state >> 11) * 0x1.0p-53;
    }
    float next() {
        const double u1 = 1.0 - uniform();  // (0,1], keeps log finite
        const double u2 = uniform();
        return (float)(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2));
    }
};

ad::Var conv(const ad::Var& x, const Weights& w, const std::string& name, int stride, int pad) {
    return ad::conv2d(x, w.at(name + ".w"), w.at(name + ".b"), stride, pad);
}

void check_frame(const Tensor& f, const ModelConfig& cfg, const char* who) {
    if (f.rank() != 3 || f.dim(0) != 3)
        throw ShapeError(std::string(who) + ": frames must be (3,H,W)");
    const int m = cfg.pad_multiple();
    if (f.dim(1) % m != 0 || f.dim(2) % m != 0)
        throw ShapeError(std::string(who) + ": frame dims must be multiples of " +
                         std::to_string(m) + ", got " + memfof::shape_str(f.shape()));
}

void write_u32(std::ofstream& os, std::uint32_t v) { os.write((const char*)&v, 4); }

std::uint32_t read_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read((char*)&v, 4);
    if (!is) throw FormatError("weight file truncated");
    return v;
}

}  // namespace

ModelConfig ModelConfig::paired(int d_c) {
    ModelConfig cfg;
    cfg.d_c = d_c;
    cfg.d_f = 2 * d_c;
    return cfg;
}

int ModelConfig::pad_multiple() const { return std::lcm(16, corr_scale); }

void ModelConfig::validate() const {
    if (d_c < 2 || d_c % 2 != 0) throw ParamError("config: d_c must be a positive even number");
    if (d_f < 1) throw ParamError("config: d_f must be positive");
    if (corr_scale != 8 && corr_scale != 16 && corr_scale != 24)
        throw ParamError("config: corr_scale must be 8, 16 or 24");
    if (radius < 0) throw ParamError("config: radius must be non-negative");
    if (num_levels < 1) throw ParamError("config: need at least one pyramid level");
    if (iters < 0) throw ParamError("config: iters must be non-negative");
    if (frames != 3) throw ParamError("config: only the three-frame model is supported");
    if (enc_channels.size() != 4) throw ParamError("config: enc_channels must list four stages");
    for (int c : enc_channels)
        if (c < 1) throw ParamError("config: encoder channels must be positive");
    if (mask_hidden < 1) throw ParamError("config: mask_hidden must be positive");
}

const ad::Var& Weights::at(const std::string& name) const {
    auto it = p.find(name);
    if (it == p.end()) throw ParamError("missing parameter: " + name);
    return it->second;
}

void Weights::set_trainable(bool trainable) {
    for (auto& [name, v] : p) {
        v->requires_grad = trainable;
        v->tracked = trainable;
    }
}

void Weights::zero_grad() {
    for (auto& [name, v] : p) v->grad = Tensor();
}

long long Weights::param_count() const {
    long long n = 0;
    for (const auto& [name, v] : p) n += v->value.numel();
    return n;
}

Weights Weights::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const int win = 2 * cfg.radius + 1;
    const int corr_ch = 2 * cfg.num_levels * win * win;
    const int factor = cfg.upsample_factor();
    const auto& e = cfg.enc_channels;

    std::vector<std::pair<std::string, std::vector<int>>> specs;
    auto add_conv = [&specs](const std::string& name, int oc, int ic, int k) {
        specs.push_back({name + ".w", {oc, ic, k, k}});
        specs.push_back({name + ".b", {oc}});
    };
    add_conv("enc.0", e[0], 3, 3);
    add_conv("enc.1", e[1], e[0], 3);
    add_conv("enc.2", e[2], e[1], 3);
    add_conv("enc.3", e[3], e[2], 3);
    add_conv("enc.4", cfg.d_f, e[3], 3);
    add_conv("ctx.0", e[0], 9, 3);
    add_conv("ctx.1", e[1], e[0], 3);
    add_conv("ctx.2", e[2], e[1], 3);
    add_conv("ctx.3", e[3], e[2], 3);
    add_conv("ctx.4", 2 * cfg.d_c, e[3], 3);
    add_conv("head.0", cfg.d_c, cfg.d_c, 3);
    add_conv("head.1", 6, cfg.d_c, 3);
    add_conv("mask.0", cfg.mask_hidden, cfg.d_c, 3);
    add_conv("mask.1", factor * factor * 9, cfg.mask_hidden, 1);
    add_conv("cenc.0", cfg.d_c, corr_ch, 1);
    add_conv("cenc.1", cfg.d_c, cfg.d_c, 3);
    add_conv("fenc.0", cfg.d_c / 2, 4, 3);
    add_conv("fenc.1", cfg.d_c / 2, cfg.d_c / 2, 3);
    add_conv("menc.0", cfg.d_c, cfg.d_c + cfg.d_c / 2, 3);
    add_conv("gru.z", cfg.d_c, 3 * cfg.d_c, 3);
    add_conv("gru.r", cfg.d_c, 3 * cfg.d_c, 3);
    add_conv("gru.h", cfg.d_c, 3 * cfg.d_c, 3);
    add_conv("gma.q", cfg.d_c, cfg.d_c, 1);
    add_conv("gma.k", cfg.d_c, cfg.d_c, 1);
    add_conv("gma.v", cfg.d_c, cfg.d_c, 1);
    add_conv("gma.proj", cfg.d_c, 2 * cfg.d_c, 1);

    Weights w;
    for (auto& [name, shape] : specs) {
        Tensor t(shape);
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0) {
            long long fan_in = 1;
            for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
            const float std_dev = 1.0f / std::sqrt((float)fan_in);
            Gauss rng(splitmix64(seed ^ fnv1a(name)));
            float* d = t.data();
            for (long long i = 0; i < t.numel(); ++i) d[i] = std_dev * rng.next();
        }
        w.p.emplace(name, ad::leaf(std::move(t), false));
    }
    return w;
}

void Weights::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open weight file for writing: " + path);
    os.write("MFOF", 4);
    write_u32(os, 1);
    write_u32(os, (std::uint32_t)p.size());
    for (const auto& [name, v] : p) {
        write_u32(os, (std::uint32_t)name.size());
        os.write(name.data(), (std::streamsize)name.size());
        const Tensor& t = v->value;
        write_u32(os, (std::uint32_t)t.rank());
        for (int i = 0; i < t.rank(); ++i) write_u32(os, (std::uint32_t)t.dim(i));
        os.write((const char*)t.data(), (std::streamsize)t.bytes());
    }
    if (!os) throw FormatError("short write to weight file: " + path);
}

Weights Weights::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open weight file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MFOF", 4) != 0)
        throw FormatError("not a weight file (bad magic): " + path);
    const std::uint32_t version = read_u32(is);
    if (version != 1) throw FormatError("unsupported weight file version " + std::to_string(version));
    const std::uint32_t count = read_u32(is);
    Weights w;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(is);
        if (name_len > 4096) throw FormatError("implausible parameter name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t rank = read_u32(is);
        if (rank > 8) throw FormatError("implausible tensor rank in weight file");
        std::vector<int> shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) shape[r] = (int)read_u32(is);
        Tensor t(shape);
        is.read((char*)t.data(), (std::streamsize)t.bytes());
        if (!is) throw FormatError("weight file truncated inside tensor " + name);
        w.p.emplace(std::move(name), ad::leaf(std::move(t), false));
    }
    return w;
}

double attention_scale(long long hw, int d_c) {
    if (hw < 1 || d_c < 1) throw ParamError("attention_scale: positive dims required");
    double e = std::log((double)hw) / std::log(3.0);
    const double r = std::round(e);
    if (r >= 0 && r < 40) {
        long long pw = 1;
        for (int i = 0; i < (int)r; ++i) pw *= 3;
        if (pw == hw) e = r;  // exact powers of three get the exact exponent
    }
    return e / std::sqrt((double)d_c);
}

ad::Var feature_encoder(const ad::Var& frame, const Weights& w, const ModelConfig& cfg) {
    cfg.validate();
    check_frame(frame->value, cfg, "feature_encoder");
    const int strides[5] = {2, 2, 2, 1, cfg.corr_scale / 8};
    ad::Var x = ad::affine(frame, 2.0f, -1.0f);
    for (int i = 0; i < 4; ++i)
        x = ad::relu(conv(x, w, "enc." + std::to_string(i), strides[i], 1));
    return conv(x, w, "enc.4", strides[4], 1);
}

Context context_network(const ad::Var& i_prev, const ad::Var& i_cur, const ad::Var& i_next,
                        const Weights& w, const ModelConfig& cfg) {
    cfg.validate();
    check_frame(i_prev->value, cfg, "context_network");
    if (!i_prev->value.same_shape(i_cur->value) || !i_cur->value.same_shape(i_next->value))
        throw ShapeError("context_network: the three frames must share one shape");
    const int strides[5] = {2, 2, 2, 1, cfg.corr_scale / 8};
    ad::Var x = ad::affine(ad::concat({i_prev, i_cur, i_next}), 2.0f, -1.0f);
    for (int i = 0; i < 4; ++i)
        x = ad::relu(conv(x, w, "ctx." + std::to_string(i), strides[i], 1));
    x = conv(x, w, "ctx.4", strides[4], 1);
    Context ctx;
    ctx.g = ad::relu(ad::slice(x, 0, cfg.d_c));
    ctx.h0 = ad::tanh_(ad::slice(x, cfg.d_c, 2 * cfg.d_c));
    ctx.flow0 = flow_head(ctx.h0, w);
    return ctx;
}

FlowPred flow_head(const ad::Var& h, const Weights& w) {
    ad::Var t = ad::relu(conv(h, w, "head.0", 1, 1));
    ad::Var o = conv(t, w, "head.1", 1, 1);
    FlowPred fp;
    fp.f_prev = ad::slice(o, 0, 2);
    fp.f_next = ad::slice(o, 2, 4);
    fp.alpha = ad::sigmoid(ad::slice(o, 4, 5));
    fp.beta = ad::slice(o, 5, 6);
    return fp;
}

ad::Var motion_features(const ad::Var& c_prev, const ad::Var& c_next, const FlowPred& flow,
                        const Weights& w, const ModelConfig& cfg) {
    const int win = 2 * cfg.radius + 1;
    const int expect = cfg.num_levels * win * win;
    if (c_prev->value.dim(0) != expect || c_next->value.dim(0) != expect)
        throw ShapeError("motion_features: lookup width does not match radius/levels config");
    ad::Var corr = ad::concat({c_prev, c_next});
    corr = ad::relu(conv(corr, w, "cenc.0", 1, 0));
    corr = ad::relu(conv(corr, w, "cenc.1", 1, 1));
    ad::Var flo = ad::concat({flow.f_prev, flow.f_next});
    flo = ad::relu(conv(flo, w, "fenc.0", 1, 1));
    flo = ad::relu(conv(flo, w, "fenc.1", 1, 1));
    return ad::relu(conv(ad::concat({corr, flo}), w, "menc.0", 1, 1));
}

ad::Var gma_attention(const ad::Var& g, const Weights& w, int d_c) {
    ad::Var q = conv(g, w, "gma.q", 1, 0);
    ad::Var k = conv(g, w, "gma.k", 1, 0);
    const long long hw = (long long)g->value.dim(1) * g->value.dim(2);
    const float s = (float)attention_scale(hw, d_c);
    return ad::softmax_last2(ad::corr_base(q, k, s));
}

ad::Var gma_aggregate(const ad::Var& f_m, const ad::Var& g, const Weights& w,
                      const ModelConfig& cfg) {
    ad::Var attn = gma_attention(g, w, cfg.d_c);
    ad::Var v = conv(f_m, w, "gma.v", 1, 0);
    ad::Var agg = ad::attn_apply(attn, v);
    ad::Var proj = conv(ad::concat({f_m, agg}), w, "gma.proj", 1, 0);
    return ad::add(f_m, proj);
}

ad::Var updater(const ad::Var& f_m_agg, const ad::Var& g, const ad::Var& h, const Weights& w) {
    ad::Var x = ad::concat({f_m_agg, g});
    ad::Var hx = ad::concat({h, x});
    ad::Var z = ad::sigmoid(conv(hx, w, "gru.z", 1, 1));
    ad::Var r = ad::sigmoid(conv(hx, w, "gru.r", 1, 1));
    ad::Var cand = ad::tanh_(conv(ad::concat({ad::mul(r, h), x}), w, "gru.h", 1, 1));
    ad::Var one = ad::constant(Tensor::full(z->value.shape(), 1.0f));
    return ad::add(ad::mul(ad::sub(one, z), h), ad::mul(z, cand));
}

RefinementState refine_step(const RefinementState& s, const std::vector<ad::Var>& pyr_prev,
                            const std::vector<ad::Var>& pyr_next, const Weights& w,
                            const ModelConfig& cfg) {
    ad::Var c_prev = ad::corr_lookup(pyr_prev, s.flow.f_prev, cfg.radius);
    ad::Var c_next = ad::corr_lookup(pyr_next, s.flow.f_next, cfg.radius);
    ad::Var f_m = motion_features(c_prev, c_next, s.flow, w, cfg);
    if (cfg.use_gma) f_m = gma_aggregate(f_m, s.g, w, cfg);
    ad::Var h = updater(f_m, s.g, s.h, w);
    FlowPred d = flow_head(h, w);
    RefinementState out;
    out.h = h;
    out.g = s.g;
    out.flow.f_prev = ad::add(s.flow.f_prev, d.f_prev);
    out.flow.f_next = ad::add(s.flow.f_next, d.f_next);
    out.flow.alpha = d.alpha;
    out.flow.beta = d.beta;
    out.k = s.k + 1;
    return out;
}

ad::Var upsample_mask(const ad::Var& h, const Weights& w, const ModelConfig&) {
    ad::Var t = ad::relu(conv(h, w, "mask.0", 1, 1));
    return conv(t, w, "mask.1", 1, 0);
}

FlowPred upsample_pred(const FlowPred& coarse, const ad::Var& mask_logits, int factor) {
    ad::Var fields =
        ad::concat({coarse.f_prev, coarse.f_next, coarse.alpha, coarse.beta});
    const float fs = (float)factor;
    ad::Var up = ad::upsample_convex(fields, mask_logits, factor, {fs, fs, fs, fs, 1.0f, 1.0f});
    FlowPred fp;
    fp.f_prev = ad::slice(up, 0, 2);
    fp.f_next = ad::slice(up, 2, 4);
    fp.alpha = ad::slice(up, 4, 5);
    fp.beta = ad::slice(up, 5, 6);
    return fp;
}

CorrPyramids build_corr_pyramids(const ad::Var& feat_cur, const ad::Var& feat_prev,
                                 const ad::Var& feat_next, const ModelConfig& cfg) {
    const float s =
        cfg.normalize_corr ? 1.0f / std::sqrt((float)feat_cur->value.dim(0)) : 1.0f;
    CorrPyramids pyr;
    pyr.prev.push_back(ad::corr_base(feat_cur, feat_prev, s));
    pyr.next.push_back(ad::corr_base(feat_cur, feat_next, s));
    for (int l = 1; l < cfg.num_levels; ++l) {
        pyr.prev.push_back(ad::avg_pool2d(pyr.prev.back()));
        pyr.next.push_back(ad::avg_pool2d(pyr.next.back()));
    }
    return pyr;
}

std::vector<FlowPred> run_refinement(const Context& ctx, const std::vector<ad::Var>& pyr_prev,
                                     const std::vector<ad::Var>& pyr_next, const Weights& w,
                                     const ModelConfig& cfg, int n, bool only_last) {
    const int factor = cfg.upsample_factor();
    std::vector<FlowPred> preds;
    RefinementState state{ctx.h0, ctx.g, ctx.flow0, 0};
    if (!only_last)
        preds.push_back(upsample_pred(state.flow, upsample_mask(state.h, w, cfg), factor));
    for (int k = 0; k < n; ++k) {
        state = refine_step(state, pyr_prev, pyr_next, w, cfg);
        if (!only_last)
            preds.push_back(upsample_pred(state.flow, upsample_mask(state.h, w, cfg), factor));
    }
    if (only_last)
        preds.push_back(upsample_pred(state.flow, upsample_mask(state.h, w, cfg), factor));
    return preds;
}

std::vector<FlowPred> forward(const ad::Var& i_prev, const ad::Var& i_cur, const ad::Var& i_next,
                              const Weights& w, const ModelConfig& cfg, int n, bool only_last) {
    cfg.validate();
    if (n < 0) throw ParamError("forward: negative iteration count");
    ad::Var f_prev = feature_encoder(i_prev, w, cfg);
    ad::Var f_cur = feature_encoder(i_cur, w, cfg);
    ad::Var f_next = feature_encoder(i_next, w, cfg);
    CorrPyramids pyr = build_corr_pyramids(f_cur, f_prev, f_next, cfg);
    Context ctx = context_network(i_prev, i_cur, i_next, w, cfg);
    return run_refinement(ctx, pyr.prev, pyr.next, w, cfg, n, only_last);
}

}  // namespace memfof::model
