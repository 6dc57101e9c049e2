#pragma once

// Mixture-of-Laplace loss, the gamma-weighted sequence loss over refinement
// iterations, finite-difference gradient verification, synthetic training
// clips with exact ground-truth flow, and a small end-to-end training loop.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "memfof/model.hpp"
#include "memfof/tensor.hpp"

namespace memfof::learn {

struct LossConfig {
    double gamma = 0.85;
    int t = 2;  // supervised flow frames per sample: the two directions
    void validate() const;
};

// -log[(a/2) e^{-|d|} + ((1-a)/2) e^{-b} e^{-|d| e^{-b}}] with d = mu_gt - mu,
// evaluated in log space in double precision.
double mix_laplace(double mu_gt, double alpha, double beta, double mu);

// Mean of mix_laplace over both flow coordinates and all pixels of one
// direction; alpha/beta are shared by the two coordinates of a pixel.
double mol_frame_loss(const Tensor& flow, const Tensor& alpha, const Tensor& beta,
                      const Tensor& gt);

// sum_k gamma^(N-k) * per_iter[k] with N = len-1 (per-iteration losses carry
// their own 1/T averaging).
double sequence_loss(const std::vector<double>& per_iter, double gamma);

// The differentiable counterpart over full forward output: both directions of
// every iteration, weighted gamma^(N-k)/T.
ad::Var sequence_loss_var(const std::vector<model::FlowPred>& preds, const Tensor& gt_prev,
                          const Tensor& gt_next, const LossConfig& cfg);

struct SynthSample {
    std::vector<Tensor> frames;  // three (3,H,W) frames
    Tensor gt_prev;              // (2,H,W) centre -> previous
    Tensor gt_next;              // (2,H,W) centre -> next
    std::uint64_t seed = 0;
};

// Band-limited texture advected by smooth random flows; the frames are exact
// samples of one continuous scene, so the ground truth is exact too.
SynthSample make_synth(std::uint64_t seed, int h, int w, double max_disp);

// Compares backprop gradients of the scalar build(leaves) against central
// differences at `probes` random entries of every parameter. Returns the
// worst |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<ad::Var(const std::vector<ad::Var>&)>& build,
                  const std::vector<Tensor>& params, double eps, int probes,
                  std::uint64_t seed = 7);

struct TrainRow {
    int step = 0;
    double loss = 0;
    double epe = 0;
};

struct TrainResult {
    std::vector<TrainRow> log;
    model::Weights weights;
    double held_out_epe_init = 0;
    double held_out_epe_final = 0;
    std::string csv() const;  // step,loss,epe
};

// Adam on the sequence loss over a handful of synthetic clips; logs training
// loss and the EPE of the final prediction each step, and evaluates a
// held-out clip before and after. Aborts with a diagnostic on divergence.
TrainResult train_toy(const model::ModelConfig& cfg, int h, int w, int steps, double lr,
                      std::uint64_t seed = 42);

}  // namespace memfof::learn
