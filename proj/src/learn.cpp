#include "memfof/learn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <utility>

#include "memfof/metrics.hpp"

namespace memfof::learn {

namespace {

std::uint64_t mix64(std::uint64_t& s) {
    s += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double unit(std::uint64_t& s) { return static_cast<double>(mix64(s) >> 11) * 0x1.0p-53; }

struct Wave {
    double kx = 0, ky = 0, ph = 0, amp = 0;
};

double wave_sum(const std::vector<Wave>& ws, double x, double y) {
    double v = 0;
    for (const Wave& w : ws) v += w.amp * std::sin(w.kx * x + w.ky * y + w.ph);
    return v;
}

// Random wave set with |k| in [kmin, kmax] and sum of |amp| scaled to `mass`,
// so the field is bounded by `mass` everywhere.
std::vector<Wave> random_waves(std::uint64_t& s, int count, double kmin, double kmax,
                               double mass) {
    std::vector<Wave> ws(static_cast<std::size_t>(count));
    double total = 0;
    for (Wave& w : ws) {
        double mag = kmin + (kmax - kmin) * unit(s);
        double dir = 2.0 * M_PI * unit(s);
        w.kx = mag * std::cos(dir);
        w.ky = mag * std::sin(dir);
        w.ph = 2.0 * M_PI * unit(s);
        w.amp = 2.0 * unit(s) - 1.0;
        total += std::abs(w.amp);
    }
    const double gain = total > 0 ? mass / total : 0.0;
    for (Wave& w : ws) w.amp *= gain;
    return ws;
}

struct FlowWaves {
    std::vector<Wave> u, v;
};

// Solves x + f(x) = target by fixed point; the flow fields are smooth enough
// (Lipschitz well below 1) that this converges to sub-1e-6 px.
void invert(const FlowWaves& f, double tx, double ty, double& x, double& y) {
    x = tx;
    y = ty;
    for (int it = 0; it < 30; ++it) {
        double nx = tx - wave_sum(f.u, x, y);
        double ny = ty - wave_sum(f.v, x, y);
        x = nx;
        y = ny;
    }
}

}  // namespace

void LossConfig::validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ParamError("LossConfig: gamma must be in (0, 1]");
    if (t < 1) throw ParamError("LossConfig: t must be >= 1");
}

double mix_laplace(double mu_gt, double alpha, double beta, double mu) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParamError("mix_laplace: alpha must be in [0, 1]");
    const double delta = std::abs(mu_gt - mu);
    const double t1 = std::log(alpha / 2.0) - delta;
    const double t2 = std::log((1.0 - alpha) / 2.0) - beta - delta * std::exp(-beta);
    const double mx = std::max(t1, t2);
    return -(mx + std::log(std::exp(t1 - mx) + std::exp(t2 - mx)));
}

double mol_frame_loss(const Tensor& flow, const Tensor& alpha, const Tensor& beta,
                      const Tensor& gt) {
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("mol_frame_loss: flow must be (2,H,W)");
    if (!flow.same_shape(gt)) throw ShapeError("mol_frame_loss: flow/gt shape mismatch");
    const long long np = static_cast<long long>(flow.dim(1)) * flow.dim(2);
    if (alpha.numel() != np || beta.numel() != np)
        throw ShapeError("mol_frame_loss: alpha/beta must have one value per pixel");
    double total = 0;
    for (long long i = 0; i < np; ++i) {
        const double a = alpha[i];
        const double b = beta[i];
        total += mix_laplace(gt[i], a, b, flow[i]);
        total += mix_laplace(gt[np + i], a, b, flow[np + i]);
    }
    return total / static_cast<double>(2 * np);
}

double sequence_loss(const std::vector<double>& per_iter, double gamma) {
    if (per_iter.empty()) throw ParamError("sequence_loss: no iterations");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ParamError("sequence_loss: gamma must be in (0, 1]");
    const int n = static_cast<int>(per_iter.size()) - 1;
    double total = 0;
    for (int k = 0; k <= n; ++k) total += std::pow(gamma, n - k) * per_iter[static_cast<std::size_t>(k)];
    return total;
}

ad::Var sequence_loss_var(const std::vector<model::FlowPred>& preds, const Tensor& gt_prev,
                          const Tensor& gt_next, const LossConfig& cfg) {
    cfg.validate();
    if (preds.empty()) throw ParamError("sequence_loss_var: no predictions");
    const int n = static_cast<int>(preds.size()) - 1;
    std::vector<ad::Var> scalars;
    std::vector<double> weights;
    scalars.reserve(preds.size() * 2);
    weights.reserve(preds.size() * 2);
    for (int k = 0; k <= n; ++k) {
        const model::FlowPred& p = preds[static_cast<std::size_t>(k)];
        const double wgt = std::pow(cfg.gamma, n - k) / static_cast<double>(cfg.t);
        scalars.push_back(ad::mol_loss(p.f_prev, p.alpha, p.beta, gt_prev));
        weights.push_back(wgt);
        scalars.push_back(ad::mol_loss(p.f_next, p.alpha, p.beta, gt_next));
        weights.push_back(wgt);
    }
    return ad::weighted_sum(scalars, weights);
}

SynthSample make_synth(std::uint64_t seed, int h, int w, double max_disp) {
    if (h < 8 || w < 8) throw ParamError("make_synth: frame must be at least 8x8");
    if (max_disp < 0) throw ParamError("make_synth: max_disp must be >= 0");
    if (max_disp >= std::min(h, w) / 4.0)
        throw ParamError("make_synth: max_disp must be below min(h, w)/4");

    std::uint64_t s = seed * 0x9e3779b97f4a7c15ULL + 0x85ebca6bULL;

    // Texture: band-limited so bilinear warping in tests stays faithful, with
    // enough high frequency content that matching is well conditioned.
    std::vector<std::vector<Wave>> tex(3);
    for (int c = 0; c < 3; ++c) tex[static_cast<std::size_t>(c)] = random_waves(s, 10, 0.08, 0.5, 0.45);

    // Flow components: a couple of cycles across the frame, per-component
    // bound max_disp/sqrt(2) so the vector magnitude stays below max_disp.
    const double qmin = 0.5 * 2.0 * M_PI / std::min(h, w);
    const double qmax = 1.5 * 2.0 * M_PI / std::min(h, w);
    const double comp_mass = max_disp / std::sqrt(2.0);
    FlowWaves fprev, fnext;
    fprev.u = random_waves(s, 6, qmin, qmax, comp_mass);
    fprev.v = random_waves(s, 6, qmin, qmax, comp_mass);
    fnext.u = random_waves(s, 6, qmin, qmax, comp_mass);
    fnext.v = random_waves(s, 6, qmin, qmax, comp_mass);

    SynthSample out;
    out.seed = seed;
    out.frames.assign(3, Tensor({3, h, w}));
    out.gt_prev = Tensor({2, h, w});
    out.gt_next = Tensor({2, h, w});

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c)
                out.frames[1].at(c, y, x) =
                    static_cast<float>(0.5 + wave_sum(tex[static_cast<std::size_t>(c)], x, y));
            double sx, sy;
            invert(fprev, x, y, sx, sy);
            for (int c = 0; c < 3; ++c)
                out.frames[0].at(c, y, x) =
                    static_cast<float>(0.5 + wave_sum(tex[static_cast<std::size_t>(c)], sx, sy));
            invert(fnext, x, y, sx, sy);
            for (int c = 0; c < 3; ++c)
                out.frames[2].at(c, y, x) =
                    static_cast<float>(0.5 + wave_sum(tex[static_cast<std::size_t>(c)], sx, sy));
            out.gt_prev.at(0, y, x) = static_cast<float>(wave_sum(fprev.u, x, y));
            out.gt_prev.at(1, y, x) = static_cast<float>(wave_sum(fprev.v, x, y));
            out.gt_next.at(0, y, x) = static_cast<float>(wave_sum(fnext.u, x, y));
            out.gt_next.at(1, y, x) = static_cast<float>(wave_sum(fnext.v, x, y));
        }
    }
    return out;
}

double grad_check(const std::function<ad::Var(const std::vector<ad::Var>&)>& build,
                  const std::vector<Tensor>& params, double eps, int probes, std::uint64_t seed) {
    if (!(eps >= 1e-4 && eps <= 1e-2)) throw ParamError("grad_check: eps must be in [1e-4, 1e-2]");
    if (probes < 1) throw ParamError("grad_check: probes must be >= 1");

    std::vector<ad::Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(ad::leaf(p, true));

    ad::Var root = build(leaves);
    if (root->value.numel() != 1) throw ShapeError("grad_check: build must return a scalar");
    ad::backward(root);

    std::uint64_t s = seed * 0x2545f4914f6cdd1dULL + 1;
    double worst = 0;
    for (auto& leaf : leaves) {
        const long long n = leaf->value.numel();
        for (int p = 0; p < probes; ++p) {
            const long long idx = static_cast<long long>(mix64(s) % static_cast<std::uint64_t>(n));
            const float orig = leaf->value[idx];
            // Round the probe points to float first so the step used in the
            // quotient is the step the forward pass actually saw.
            const float xp = static_cast<float>(orig + eps);
            const float xm = static_cast<float>(orig - eps);
            double fp, fm;
            {
                ad::NoGradGuard ng;
                leaf->value[idx] = xp;
                fp = build(leaves)->value[0];
                leaf->value[idx] = xm;
                fm = build(leaves)->value[0];
            }
            leaf->value[idx] = orig;
            const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
            const double analytic = leaf->grad.empty() ? 0.0 : static_cast<double>(leaf->grad[idx]);
            const double rel = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

std::string TrainResult::csv() const {
    std::string out = "step,loss,epe\n";
    char line[96];
    for (const TrainRow& r : log) {
        std::snprintf(line, sizeof(line), "%d,%.6f,%.6f\n", r.step, r.loss, r.epe);
        out += line;
    }
    return out;
}

namespace {

double eval_epe(const model::Weights& w, const model::ModelConfig& cfg, const SynthSample& s) {
    ad::NoGradGuard ng;
    std::vector<model::FlowPred> preds =
        model::forward(ad::constant(s.frames[0]), ad::constant(s.frames[1]),
                       ad::constant(s.frames[2]), w, cfg, cfg.iters, true);
    const model::FlowPred& p = preds.back();
    return 0.5 * (metrics::epe(p.f_prev->value, s.gt_prev) +
                  metrics::epe(p.f_next->value, s.gt_next));
}

}  // namespace

TrainResult train_toy(const model::ModelConfig& cfg, int h, int w, int steps, double lr,
                      std::uint64_t seed) {
    cfg.validate();
    if (steps < 0) throw ParamError("train_toy: steps must be >= 0");
    if (lr <= 0) throw ParamError("train_toy: lr must be > 0");
    if (h % cfg.pad_multiple() != 0 || w % cfg.pad_multiple() != 0)
        throw ParamError("train_toy: frame dims must be multiples of " +
                         std::to_string(cfg.pad_multiple()));

    const double max_disp = std::min(3.0, std::min(h, w) / 8.0);
    std::vector<SynthSample> train;
    for (int i = 0; i < 4; ++i) train.push_back(make_synth(seed * 1000 + i, h, w, max_disp));
    SynthSample held_out = make_synth(seed * 1000 + 99, h, w, max_disp);

    TrainResult res;
    res.weights = model::Weights::init(cfg, seed);
    res.weights.set_trainable(true);
    res.held_out_epe_init = eval_epe(res.weights, cfg, held_out);

    struct AdamState {
        std::vector<double> m, v;
    };
    std::map<std::string, AdamState> adam;
    const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
    double b1t = 1.0, b2t = 1.0;

    LossConfig loss_cfg;
    for (int step = 0; step < steps; ++step) {
        const SynthSample& s = train[static_cast<std::size_t>(step % 4)];
        res.weights.zero_grad();
        std::vector<model::FlowPred> preds =
            model::forward(ad::constant(s.frames[0]), ad::constant(s.frames[1]),
                           ad::constant(s.frames[2]), res.weights, cfg, cfg.iters, false);
        ad::Var loss = sequence_loss_var(preds, s.gt_prev, s.gt_next, loss_cfg);
        const double lv = loss->value[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("train_toy: non-finite loss at step " + std::to_string(step) +
                                     "; lower the learning rate");
        ad::backward(loss);

        b1t *= b1;
        b2t *= b2;
        for (auto& [name, var] : res.weights.p) {
            if (!var->requires_grad || var->grad.empty()) continue;
            AdamState& st = adam[name];
            const std::size_t n = static_cast<std::size_t>(var->value.numel());
            if (st.m.empty()) {
                st.m.assign(n, 0.0);
                st.v.assign(n, 0.0);
            }
            float* val = var->value.data();
            const float* g = var->grad.data();
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = g[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                const double mhat = st.m[i] / (1.0 - b1t);
                const double vhat = st.v[i] / (1.0 - b2t);
                val[i] = static_cast<float>(val[i] - lr * mhat / (std::sqrt(vhat) + adam_eps));
            }
        }

        const model::FlowPred& last = preds.back();
        const double step_epe = 0.5 * (metrics::epe(last.f_prev->value, s.gt_prev) +
                                       metrics::epe(last.f_next->value, s.gt_next));
        res.log.push_back({step, lv, step_epe});
    }

    res.weights.set_trainable(false);
    res.held_out_epe_final = eval_epe(res.weights, cfg, held_out);
    return res;
}

}  // namespace memfof::learn
