#pragma once

// The network: feature encoder, three-frame context network, bidirectional
// recurrent update block with optional global motion aggregation, flow head
// with mixture-of-Laplace parameters, and convex upsampling. Everything is
// built from the differentiable substrate so the same code path serves
// training and inference.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "memfof/autodiff.hpp"
#include "memfof/tensor.hpp"

namespace memfof::model {

struct ModelConfig {
    int d_f = 1024;
    int d_c = 512;
    int corr_scale = 16;
    int radius = 4;
    int num_levels = 4;
    bool use_gma = true;
    int iters = 8;
    int frames = 3;
    bool normalize_corr = true;
    // First four encoder stages; the fifth always emits d_f channels.
    std::vector<int> enc_channels = {48, 64, 96, 128};
    int mask_hidden = 256;

    // The feature/context dim pairing the architecture is designed around.
    static ModelConfig paired(int d_c);

    int upsample_factor() const { return corr_scale; }
    // Frames must be padded to a multiple of this before entering the model.
    int pad_multiple() const;
    void validate() const;
};

// Named parameter tensors. Values live in autodiff leaves so one weight set
// serves gradient training and (under NoGradGuard) plain inference.
struct Weights {
    std::map<std::string, ad::Var> p;

    const ad::Var& at(const std::string& name) const;
    void set_trainable(bool trainable);
    void zero_grad();
    long long param_count() const;

    static Weights init(const ModelConfig& cfg, std::uint64_t seed = 42);
    void save(const std::string& path) const;
    static Weights load(const std::string& path);
};

// One bidirectional prediction: flows to the previous and next frame plus the
// per-pixel MoL mixing coefficient (already sigmoid-squashed) and log-scale.
struct FlowPred {
    ad::Var f_prev;  // (2,H,W)
    ad::Var f_next;  // (2,H,W)
    ad::Var alpha;   // (1,H,W) in [0,1]
    ad::Var beta;    // (1,H,W)
};

struct RefinementState {
    ad::Var h;
    ad::Var g;
    FlowPred flow;  // at correlation resolution
    int k = 0;
};

// Attention logit scale log3(hw)/sqrt(d_c); exact powers of three give the
// integer exponent exactly.
double attention_scale(long long hw, int d_c);

ad::Var feature_encoder(const ad::Var& frame, const Weights& w, const ModelConfig& cfg);

struct Context {
    ad::Var g;
    ad::Var h0;
    FlowPred flow0;
};
Context context_network(const ad::Var& i_prev, const ad::Var& i_cur, const ad::Var& i_next,
                        const Weights& w, const ModelConfig& cfg);

FlowPred flow_head(const ad::Var& h, const Weights& w);

ad::Var motion_features(const ad::Var& c_prev, const ad::Var& c_next, const FlowPred& flow,
                        const Weights& w, const ModelConfig& cfg);

// Row-stochastic attention (H*W, Hc, Wc) derived from the context feature.
ad::Var gma_attention(const ad::Var& g, const Weights& w, int d_c);
ad::Var gma_aggregate(const ad::Var& f_m, const ad::Var& g, const Weights& w,
                      const ModelConfig& cfg);

ad::Var updater(const ad::Var& f_m_agg, const ad::Var& g, const ad::Var& h, const Weights& w);

RefinementState refine_step(const RefinementState& s, const std::vector<ad::Var>& pyr_prev,
                            const std::vector<ad::Var>& pyr_next, const Weights& w,
                            const ModelConfig& cfg);

// Mask logits (factor^2*9, Hc, Wc) for convex upsampling, from the hidden state.
ad::Var upsample_mask(const ad::Var& h, const Weights& w, const ModelConfig& cfg);

// Flow values are multiplied by the factor; alpha/beta are combined with the
// same convex weights but keep their scale.
FlowPred upsample_pred(const FlowPred& coarse, const ad::Var& mask_logits, int factor);

// Correlation pyramids built inside the graph (training path).
struct CorrPyramids {
    std::vector<ad::Var> prev;
    std::vector<ad::Var> next;
};
CorrPyramids build_corr_pyramids(const ad::Var& feat_cur, const ad::Var& feat_prev,
                                 const ad::Var& feat_next, const ModelConfig& cfg);

// The shared refinement trunk: N steps from (g, h0, flow0), emitting either
// every upsampled prediction (training) or only the final one (inference).
std::vector<FlowPred> run_refinement(const Context& ctx, const std::vector<ad::Var>& pyr_prev,
                                     const std::vector<ad::Var>& pyr_next, const Weights& w,
                                     const ModelConfig& cfg, int n, bool only_last);

// Full forward pass on padded frames (3,H,W) in [0,1]. Returns n+1 full-
// resolution predictions in training mode, exactly one with only_last.
std::vector<FlowPred> forward(const ad::Var& i_prev, const ad::Var& i_cur, const ad::Var& i_next,
                              const Weights& w, const ModelConfig& cfg, int n, bool only_last);

}  // namespace memfof::model
