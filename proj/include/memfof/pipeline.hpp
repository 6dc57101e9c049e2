#pragma once

// Video-sequence inference: padding, the sliding three-frame session with
// feature and correlation-volume reuse, the 2x upscale protocol, and the
// runtime/memory bench harness.

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "memfof/model.hpp"
#include "memfof/tensor.hpp"

namespace memfof::pipeline {

struct PadSpec {
    int rows = 0;  // zero rows added at the bottom
    int cols = 0;  // zero cols added at the right
    bool empty() const { return rows == 0 && cols == 0; }
};

// Bottom/right zero padding up to the next multiple of m.
std::pair<Tensor, PadSpec> pad_to_multiple(const Tensor& frame, int m);
// Drops the padded band again (any channel count).
Tensor crop_pad(const Tensor& field, const PadSpec& pad);

struct InferenceOptions {
    bool late_upsample_only = true;
    bool reuse_features = true;
    bool fast_corr = true;
    // Only effective together with fast_corr: the backward volume is the
    // transposed cached forward volume instead of a fresh build.
    bool reuse_corr = true;
};

// One prediction at input resolution, graph-free.
struct BidirFlowOut {
    Tensor f_prev;
    Tensor f_next;
    Tensor mol_alpha;
    Tensor mol_beta;
};

// Sliding-window inference over a video. Frames enter one at a time; each
// step after the third frame yields the prediction for the window centre.
// Feature maps are cached for at most the three live frames, plus at most one
// forward correlation volume carried to the next step.
class VideoSession {
  public:
    VideoSession(const model::Weights& w, const model::ModelConfig& cfg,
                 InferenceOptions opt = {});

    // Buffers a frame without predicting (for the first frames of a video).
    void push(const Tensor& frame);
    // push + predict for the new centre; throws NotReadyError while fewer
    // than three frames are buffered.
    BidirFlowOut step(const Tensor& frame);
    // Index of the frame the next step() will predict for (0-based).
    int next_center() const { return center_; }

    long long encoder_calls() const { return encoder_calls_; }
    long long base_builds() const { return base_builds_; }

  private:
    Tensor encode(const Tensor& padded);
    BidirFlowOut run_center();

    const model::Weights& w_;
    model::ModelConfig cfg_;
    InferenceOptions opt_;
    int orig_h_ = 0, orig_w_ = 0;
    PadSpec pad_;
    std::deque<Tensor> frames_;    // padded, at most 3
    std::deque<Tensor> features_;  // aligned with frames_ when reuse is on
    Tensor cached_fwd_volume_;     // base of C(center, center+1) from last step
    int cache_for_center_ = -2;    // centre index the cached volume was built at
    int center_ = 1;
    int pushed_ = 0;
    long long encoder_calls_ = 0;
    long long base_builds_ = 0;
};

// Stateless single-triplet inference at input resolution (pads, runs the
// model with the given options' upsample mode, crops).
BidirFlowOut infer_triplet(const Tensor& i_prev, const Tensor& i_cur, const Tensor& i_next,
                           const model::Weights& w, const model::ModelConfig& cfg,
                           bool late_upsample_only = true);

// Estimates at twice the resolution, then halves the flow spatially and in
// magnitude. Costs 4x the correlation memory for small-motion accuracy.
BidirFlowOut infer_upscaled2x(const Tensor& i_prev, const Tensor& i_cur, const Tensor& i_next,
                              const model::Weights& w, const model::ModelConfig& cfg);

struct BenchRow {
    std::string variant;
    double runtime_ms_mean = 0;
    double runtime_ms_std = 0;
    long long peak_bytes = 0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    long long corr_model_bytes = 0;  // closed-form pyramid bytes for the run
    std::string csv() const;
    std::string table() const;
};

// Times session steps at the given resolution for each optimization toggled
// cumulatively: baseline, late upsample, feature reuse, fast correlation,
// correlation reuse. Every variant sees the same synthetic frames; the first
// (cache-cold) step is excluded from the statistics.
BenchReport bench(const model::Weights& w, const model::ModelConfig& cfg, int height, int width,
                  int repeats, std::uint64_t seed = 42);

}  // namespace memfof::pipeline
