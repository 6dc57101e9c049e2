#include "memfof/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "memfof/corrvol.hpp"

namespace memfof::pipeline {

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double unit(std::uint64_t& state) {
    state = mix64(state);
    return (double)(state >> 11) * 0x1.0p-53;
}

// Drifting band-limited texture; frame k of an endless synthetic pan.
Tensor bench_frame(int h, int w, int k, std::uint64_t seed) {
    struct Wave {
        float kx, ky, phase, drift, amp;
    };
    Wave waves[6];
    std::uint64_t st = seed;
    for (Wave& wv : waves) {
        wv.kx = (float)((unit(st) - 0.5) * 0.8);
        wv.ky = (float)((unit(st) - 0.5) * 0.8);
        wv.phase = (float)(unit(st) * 6.2831853);
        wv.drift = (float)((unit(st) - 0.5) * 1.2);
        wv.amp = (float)(0.06 + 0.06 * unit(st));
    }
    Tensor f({3, h, w});
    for (int c = 0; c < 3; ++c) {
        float* plane = f.data() + (long long)c * h * w;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float v = 0.5f;
                for (int i = 0; i < 6; ++i) {
                    const Wave& wv = waves[i];
                    v += wv.amp * std::sin(wv.kx * x + wv.ky * y + wv.phase +
                                           wv.drift * (float)k + 2.1f * (float)(c + i));
                }
                plane[y * w + x] = std::min(1.0f, std::max(0.0f, v));
            }
        }
    }
    return f;
}

model::FlowPred last_pred(const std::vector<model::FlowPred>& preds) {
    if (preds.empty()) throw ShapeError("inference produced no predictions");
    return preds.back();
}

BidirFlowOut crop_pred(const model::FlowPred& p, const PadSpec& pad) {
    BidirFlowOut out;
    out.f_prev = crop_pad(p.f_prev->value, pad);
    out.f_next = crop_pad(p.f_next->value, pad);
    out.mol_alpha = crop_pad(p.alpha->value, pad);
    out.mol_beta = crop_pad(p.beta->value, pad);
    return out;
}

}  // namespace

std::pair<Tensor, PadSpec> pad_to_multiple(const Tensor& frame, int m) {
    if (frame.rank() != 3) throw ShapeError("pad_to_multiple: expected (C,H,W)");
    if (m < 1) throw ParamError("pad_to_multiple: multiple must be positive");
    const int c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    const int hp = (h + m - 1) / m * m;
    const int wp = (w + m - 1) / m * m;
    PadSpec pad{hp - h, wp - w};
    if (pad.empty()) return {frame, pad};
    Tensor out({c, hp, wp});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::memcpy(out.data() + ((long long)ch * hp + y) * wp,
                        frame.data() + ((long long)ch * h + y) * w, sizeof(float) * (size_t)w);
    return {std::move(out), pad};
}

Tensor crop_pad(const Tensor& field, const PadSpec& pad) {
    if (field.rank() != 3) throw ShapeError("crop_pad: expected (C,H,W)");
    if (pad.empty()) return field;
    const int c = field.dim(0), hp = field.dim(1), wp = field.dim(2);
    const int h = hp - pad.rows, w = wp - pad.cols;
    if (h < 1 || w < 1) throw ParamError("crop_pad: pad spec larger than the field");
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::memcpy(out.data() + ((long long)ch * h + y) * w,
                        field.data() + ((long long)ch * hp + y) * wp, sizeof(float) * (size_t)w);
    return out;
}

VideoSession::VideoSession(const model::Weights& w, const model::ModelConfig& cfg,
                           InferenceOptions opt)
    : w_(w), cfg_(cfg), opt_(opt) {
    cfg_.validate();
}

Tensor VideoSession::encode(const Tensor& padded) {
    ad::NoGradGuard ng;
    ++encoder_calls_;
    return model::feature_encoder(ad::constant(padded), w_, cfg_)->value;
}

void VideoSession::push(const Tensor& frame) {
    if (pushed_ >= 2)
        throw ParamError("session: window already primed, feed further frames through step()");
    if (frame.rank() != 3 || frame.dim(0) != 3)
        throw ShapeError("session: frames must be (3,H,W)");
    if (pushed_ == 0) {
        orig_h_ = frame.dim(1);
        orig_w_ = frame.dim(2);
    } else if (frame.dim(1) != orig_h_ || frame.dim(2) != orig_w_) {
        throw ShapeError("session: all frames must share one resolution");
    }
    auto [padded, pad] = pad_to_multiple(frame, cfg_.pad_multiple());
    pad_ = pad;
    frames_.push_back(std::move(padded));
    ++pushed_;
}

BidirFlowOut VideoSession::step(const Tensor& frame) {
    if (pushed_ < 2) {
        push(frame);
        throw NotReadyError("session: need three buffered frames before stepping");
    }
    if (frame.dim(1) != orig_h_ || frame.dim(2) != orig_w_)
        throw ShapeError("session: all frames must share one resolution");
    auto [padded, pad] = pad_to_multiple(frame, cfg_.pad_multiple());
    frames_.push_back(std::move(padded));
    ++pushed_;
    if (frames_.size() > 3) {
        frames_.pop_front();
        if (!features_.empty()) features_.pop_front();
    }
    return run_center();
}

BidirFlowOut VideoSession::run_center() {
    ad::NoGradGuard ng;

    const Tensor* feats[3];
    std::vector<Tensor> scratch;
    if (opt_.reuse_features) {
        while (features_.size() < frames_.size()) {
            const size_t i = features_.size();
            features_.push_back(encode(frames_[i]));
        }
        for (int i = 0; i < 3; ++i) feats[i] = &features_[i];
    } else {
        scratch.reserve(3);
        for (int i = 0; i < 3; ++i) scratch.push_back(encode(frames_[i]));
        for (int i = 0; i < 3; ++i) feats[i] = &scratch[i];
    }

    corrvol::Pyramid pyr_prev, pyr_next;
    if (opt_.fast_corr) {
        Tensor next_base = corrvol::build_base(*feats[1], *feats[2], cfg_.normalize_corr);
        ++base_builds_;
        Tensor prev_base;
        const bool can_reuse = opt_.reuse_corr && cache_for_center_ == center_ - 1 &&
                               cached_fwd_volume_.numel() > 0;
        if (can_reuse) {
            prev_base = corrvol::reverse_volume(cached_fwd_volume_);
        } else {
            prev_base = corrvol::build_base(*feats[1], *feats[0], cfg_.normalize_corr);
            ++base_builds_;
        }
        if (opt_.reuse_corr) {
            cached_fwd_volume_ = next_base;
            cache_for_center_ = center_;
        }
        pyr_prev = corrvol::build_pyramid(std::move(prev_base), cfg_.num_levels);
        pyr_next = corrvol::build_pyramid(std::move(next_base), cfg_.num_levels);
    } else {
        pyr_prev =
            corrvol::build_pyramid_naive(*feats[1], *feats[0], cfg_.num_levels, cfg_.normalize_corr);
        pyr_next =
            corrvol::build_pyramid_naive(*feats[1], *feats[2], cfg_.num_levels, cfg_.normalize_corr);
        base_builds_ += 2;
    }

    std::vector<ad::Var> lev_prev, lev_next;
    for (Tensor& t : pyr_prev.levels) lev_prev.push_back(ad::constant(std::move(t)));
    for (Tensor& t : pyr_next.levels) lev_next.push_back(ad::constant(std::move(t)));

    model::Context ctx = model::context_network(ad::constant(frames_[0]), ad::constant(frames_[1]),
                                                ad::constant(frames_[2]), w_, cfg_);
    auto preds = model::run_refinement(ctx, lev_prev, lev_next, w_, cfg_, cfg_.iters,
                                       opt_.late_upsample_only);
    ++center_;
    return crop_pred(last_pred(preds), pad_);
}

BidirFlowOut infer_triplet(const Tensor& i_prev, const Tensor& i_cur, const Tensor& i_next,
                           const model::Weights& w, const model::ModelConfig& cfg,
                           bool late_upsample_only) {
    ad::NoGradGuard ng;
    const int m = cfg.pad_multiple();
    auto [p0, pad0] = pad_to_multiple(i_prev, m);
    auto [p1, pad1] = pad_to_multiple(i_cur, m);
    auto [p2, pad2] = pad_to_multiple(i_next, m);
    auto preds = model::forward(ad::constant(std::move(p0)), ad::constant(std::move(p1)),
                                ad::constant(std::move(p2)), w, cfg, cfg.iters,
                                late_upsample_only);
    return crop_pred(last_pred(preds), pad1);
}

BidirFlowOut infer_upscaled2x(const Tensor& i_prev, const Tensor& i_cur, const Tensor& i_next,
                              const model::Weights& w, const model::ModelConfig& cfg) {
    const int h = i_cur.dim(1), w2 = i_cur.dim(2);
    Tensor up_prev = memfof::resize_bilinear(i_prev, 2 * h, 2 * w2);
    Tensor up_cur = memfof::resize_bilinear(i_cur, 2 * h, 2 * w2);
    Tensor up_next = memfof::resize_bilinear(i_next, 2 * h, 2 * w2);
    BidirFlowOut big = infer_triplet(up_prev, up_cur, up_next, w, cfg);
    BidirFlowOut out;
    out.f_prev = memfof::scale(memfof::resize_bilinear(big.f_prev, h, w2), 0.5f);
    out.f_next = memfof::scale(memfof::resize_bilinear(big.f_next, h, w2), 0.5f);
    out.mol_alpha = memfof::resize_bilinear(big.mol_alpha, h, w2);
    out.mol_beta = memfof::resize_bilinear(big.mol_beta, h, w2);
    return out;
}

std::string BenchReport::csv() const {
    std::string s = "variant,runtime_ms_mean,runtime_ms_std,peak_bytes\n";
    char line[160];
    for (const BenchRow& r : rows) {
        std::snprintf(line, sizeof line, "%s,%.3f,%.3f,%lld\n", r.variant.c_str(),
                      r.runtime_ms_mean, r.runtime_ms_std, r.peak_bytes);
        s += line;
    }
    return s;
}

std::string BenchReport::table() const {
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %14s %12s %14s\n", "variant", "mean_ms", "std_ms",
                  "peak_bytes");
    std::string s = line;
    for (const BenchRow& r : rows) {
        std::snprintf(line, sizeof line, "%-18s %14.3f %12.3f %14lld\n", r.variant.c_str(),
                      r.runtime_ms_mean, r.runtime_ms_std, r.peak_bytes);
        s += line;
    }
    std::snprintf(line, sizeof line, "corr_model_bytes %lld\n", corr_model_bytes);
    s += line;
    return s;
}

BenchReport bench(const model::Weights& w, const model::ModelConfig& cfg, int height, int width,
                  int repeats, std::uint64_t seed) {
    if (repeats < 1) throw ParamError("bench: repeats must be positive");
    struct Variant {
        const char* name;
        InferenceOptions opt;
    };
    const Variant variants[5] = {
        {"baseline", {false, false, false, false}},
        {"+late_upsample", {true, false, false, false}},
        {"+feature_reuse", {true, true, false, false}},
        {"+fast_corr", {true, true, true, false}},
        {"+corr_reuse", {true, true, true, true}},
    };

    std::vector<Tensor> frames;
    frames.reserve((size_t)repeats + 3);
    for (int k = 0; k < repeats + 3; ++k) frames.push_back(bench_frame(height, width, k, seed));

    BenchReport report;
    report.corr_model_bytes =
        corrvol::memory_bytes(height, width, cfg.corr_scale, cfg.num_levels, 2);

    struct Lane {
        std::unique_ptr<VideoSession> session;
        std::vector<double> ms;
        long long peak = 0;
    };
    Lane lanes[5];
    for (int i = 0; i < 5; ++i) {
        lanes[i].session = std::make_unique<VideoSession>(w, cfg, variants[i].opt);
        lanes[i].ms.reserve((size_t)repeats);
        lanes[i].session->push(frames[0]);
        lanes[i].session->push(frames[1]);
        lanes[i].session->step(frames[2]);  // cache-cold step, excluded from timing
    }
    // Variants are timed round-robin within each repeat so clock-speed drift
    // over the run lands on all of them equally instead of on the later rows.
    for (int k = 3; k < repeats + 3; ++k) {
        for (Lane& lane : lanes) {
            AllocStats::reset_peak();
            const auto t0 = std::chrono::steady_clock::now();
            lane.session->step(frames[k]);
            const auto t1 = std::chrono::steady_clock::now();
            lane.ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            lane.peak = std::max(lane.peak, AllocStats::peak_bytes());
        }
    }
    for (int i = 0; i < 5; ++i) {
        BenchRow row;
        row.variant = variants[i].name;
        double mean = 0;
        for (double x : lanes[i].ms) mean += x;
        mean /= (double)lanes[i].ms.size();
        double var = 0;
        for (double x : lanes[i].ms) var += (x - mean) * (x - mean);
        row.runtime_ms_mean = mean;
        row.runtime_ms_std =
            lanes[i].ms.size() > 1 ? std::sqrt(var / (double)(lanes[i].ms.size() - 1)) : 0.0;
        row.peak_bytes = lanes[i].peak;
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace memfof::pipeline
