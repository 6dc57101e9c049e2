// Command line front end: flow estimation over image sequences, evaluation
// against ground truth, the optimization bench, dataset motion histograms, a
// toy training loop, and a built-in selfcheck.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "memfof/autodiff.hpp"
#include "memfof/corrvol.hpp"
#include "memfof/flowio.hpp"
#include "memfof/learn.hpp"
#include "memfof/metrics.hpp"
#include "memfof/model.hpp"
#include "memfof/pipeline.hpp"

namespace fs = std::filesystem;
using namespace memfof;

namespace {

struct GlobalOpts {
    std::string weights;
    int iters = 8;
    int scale = 16;
    int d_c = 512;
    bool no_gma = false;
    bool upscale2x = false;
    bool viz = false;
    int jobs = 1;
    std::uint64_t seed = 42;
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

model::ModelConfig config_from(const GlobalOpts& g) {
    model::ModelConfig cfg = model::ModelConfig::paired(g.d_c);
    cfg.corr_scale = g.scale;
    cfg.use_gma = !g.no_gma;
    cfg.iters = g.iters;
    cfg.validate();
    return cfg;
}

model::ModelConfig tiny_bench_config(const GlobalOpts& g) {
    model::ModelConfig cfg = model::ModelConfig::paired(32);
    cfg.enc_channels = {8, 12, 16, 24};
    cfg.mask_hidden = 32;
    cfg.radius = 3;
    cfg.corr_scale = g.scale;
    cfg.use_gma = !g.no_gma;
    cfg.iters = g.iters;
    cfg.validate();
    return cfg;
}

model::Weights load_or_init(const GlobalOpts& g, const model::ModelConfig& cfg) {
    if (!g.weights.empty()) return model::Weights::load(g.weights);
    std::fprintf(stderr, "note: no --weights given, using randomly initialized weights\n");
    return model::Weights::init(cfg, g.seed);
}

std::vector<fs::path> list_sorted(const fs::path& dir, const std::vector<std::string>& exts) {
    if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (std::find(exts.begin(), exts.end(), ext) != exts.end()) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return out;
}

std::string index_name(int center, const char* dir, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d_%s.%s", center, dir, ext);
    return buf;
}

// --- estimate -------------------------------------------------------------

int run_estimate(const GlobalOpts& g, const std::vector<std::string>& inputs,
                 const std::string& out_dir) {
    std::vector<fs::path> frame_paths;
    if (inputs.size() == 1 && fs::is_directory(inputs[0])) {
        frame_paths = list_sorted(inputs[0], {".png", ".ppm", ".pgm", ".pnm"});
    } else {
        for (const auto& p : inputs) frame_paths.emplace_back(p);
    }
    if (frame_paths.size() < 3)
        throw UsageError("estimate needs at least 3 frames, got " +
                         std::to_string(frame_paths.size()));

    std::vector<Tensor> frames;
    frames.reserve(frame_paths.size());
    for (const auto& p : frame_paths) {
        frames.push_back(flowio::read_image(p.string()));
        if (!frames.back().same_shape(frames.front()))
            throw UsageError("frame size mismatch: " + p.string());
    }

    fs::create_directories(out_dir);
    model::ModelConfig cfg = config_from(g);
    model::Weights w = load_or_init(g, cfg);
    const int centers = static_cast<int>(frames.size()) - 2;

    auto write_center = [&](int center, const pipeline::BidirFlowOut& out) {
        const fs::path base(out_dir);
        flowio::write_flo((base / index_name(center, "fwd", "flo")).string(), out.f_next);
        flowio::write_flo((base / index_name(center, "bwd", "flo")).string(), out.f_prev);
        if (g.viz) {
            flowio::write_image((base / index_name(center, "fwd", "png")).string(),
                                flowio::colorize(out.f_next));
            flowio::write_image((base / index_name(center, "bwd", "png")).string(),
                                flowio::colorize(out.f_prev));
        }
    };

    if (g.jobs <= 1 && !g.upscale2x) {
        pipeline::VideoSession session(w, cfg);
        session.push(frames[0]);
        session.push(frames[1]);
        for (std::size_t t = 2; t < frames.size(); ++t)
            write_center(static_cast<int>(t) - 1, session.step(frames[t]));
    } else {
        std::atomic<int> next{1};
        std::mutex err_mutex;
        std::exception_ptr first_error;
        auto worker = [&]() {
            ad::NoGradGuard ng;
            for (;;) {
                const int c = next.fetch_add(1);
                if (c > centers) return;
                try {
                    pipeline::BidirFlowOut out =
                        g.upscale2x
                            ? pipeline::infer_upscaled2x(frames[static_cast<std::size_t>(c) - 1],
                                                         frames[static_cast<std::size_t>(c)],
                                                         frames[static_cast<std::size_t>(c) + 1], w,
                                                         cfg)
                            : pipeline::infer_triplet(frames[static_cast<std::size_t>(c) - 1],
                                                      frames[static_cast<std::size_t>(c)],
                                                      frames[static_cast<std::size_t>(c) + 1], w,
                                                      cfg);
                    write_center(c, out);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        };
        const int n_threads = std::min(std::max(g.jobs, 1), centers);
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    std::printf("estimated %d centre frame(s) into %s\n", centers, out_dir.c_str());
    return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalRow {
    std::string name;
    metrics::BucketedEpe epe;
    double onepx = 0, fl = 0, wauc = 0;
};

void print_eval_row(const EvalRow& r) {
    auto opt = [](const std::optional<double>& v) {
        char buf[24];
        if (v)
            std::snprintf(buf, sizeof(buf), "%10.4f", *v);
        else
            std::snprintf(buf, sizeof(buf), "%10s", "-");
        return std::string(buf);
    };
    std::printf("%-28s %10.4f %s %s %s %9.3f %9.3f %9.3f\n", r.name.c_str(), r.epe.all,
                opt(r.epe.s0_10).c_str(), opt(r.epe.s10_40).c_str(), opt(r.epe.s40plus).c_str(),
                r.onepx, r.fl, r.wauc);
}

int run_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& csv_path) {
    std::vector<fs::path> gt_files = list_sorted(gt_dir, {".flo"});
    if (gt_files.empty()) throw UsageError("no .flo files in " + gt_dir);

    std::vector<std::string> missing;
    std::vector<EvalRow> rows;
    // Pixel-weighted accumulators; every metric here is a mean over pixels,
    // so the dataset aggregate is exact.
    double acc_epe = 0, acc_b0 = 0, acc_b1 = 0, acc_b2 = 0, acc_1px = 0, acc_fl = 0, acc_wauc = 0;
    long long n_all = 0, n_b0 = 0, n_b1 = 0, n_b2 = 0;

    for (const auto& gt_path : gt_files) {
        const fs::path pred_path = fs::path(pred_dir) / gt_path.filename();
        if (!fs::exists(pred_path)) {
            missing.push_back(gt_path.filename().string());
            continue;
        }
        const Tensor gt = flowio::read_flo(gt_path.string());
        const Tensor pred = flowio::read_flo(pred_path.string());
        if (!pred.same_shape(gt))
            throw UsageError("size mismatch for " + gt_path.filename().string());
        EvalRow row;
        row.name = gt_path.filename().string();
        row.epe = metrics::epe_bucketed(pred, gt);
        row.onepx = metrics::onepx(pred, gt);
        row.fl = metrics::fl_all(pred, gt);
        row.wauc = metrics::wauc(pred, gt);
        acc_epe += row.epe.all * static_cast<double>(row.epe.n);
        if (row.epe.s0_10) acc_b0 += *row.epe.s0_10 * static_cast<double>(row.epe.n0_10);
        if (row.epe.s10_40) acc_b1 += *row.epe.s10_40 * static_cast<double>(row.epe.n10_40);
        if (row.epe.s40plus) acc_b2 += *row.epe.s40plus * static_cast<double>(row.epe.n40plus);
        acc_1px += row.onepx * static_cast<double>(row.epe.n);
        acc_fl += row.fl * static_cast<double>(row.epe.n);
        acc_wauc += row.wauc * static_cast<double>(row.epe.n);
        n_all += row.epe.n;
        n_b0 += row.epe.n0_10;
        n_b1 += row.epe.n10_40;
        n_b2 += row.epe.n40plus;
        rows.push_back(std::move(row));
    }

    std::printf("%-28s %10s %10s %10s %10s %9s %9s %9s\n", "file", "epe", "s0-10", "s10-40",
                "s40+", "1px%", "fl%", "wauc");
    for (const EvalRow& r : rows) print_eval_row(r);
    if (n_all > 0) {
        EvalRow total;
        total.name = "TOTAL";
        total.epe.all = acc_epe / static_cast<double>(n_all);
        total.epe.n = n_all;
        if (n_b0) total.epe.s0_10 = acc_b0 / static_cast<double>(n_b0);
        if (n_b1) total.epe.s10_40 = acc_b1 / static_cast<double>(n_b1);
        if (n_b2) total.epe.s40plus = acc_b2 / static_cast<double>(n_b2);
        total.onepx = acc_1px / static_cast<double>(n_all);
        total.fl = acc_fl / static_cast<double>(n_all);
        total.wauc = acc_wauc / static_cast<double>(n_all);
        print_eval_row(total);
        rows.push_back(std::move(total));
    }

    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        if (!csv) throw UsageError("cannot write " + csv_path);
        csv << "file,epe,s0-10,s10-40,s40+,onepx,fl,wauc\n";
        auto opt = [](const std::optional<double>& v) {
            return v ? std::to_string(*v) : std::string();
        };
        for (const EvalRow& r : rows)
            csv << r.name << "," << r.epe.all << "," << opt(r.epe.s0_10) << ","
                << opt(r.epe.s10_40) << "," << opt(r.epe.s40plus) << "," << r.onepx << "," << r.fl
                << "," << r.wauc << "\n";
    }

    if (!missing.empty()) {
        std::fprintf(stderr, "missing predictions for %zu ground-truth file(s):\n", missing.size());
        for (const auto& name : missing) std::fprintf(stderr, "  %s\n", name.c_str());
        return 1;
    }
    return 0;
}

// --- bench ------------------------------------------------------------------

int run_bench(const GlobalOpts& g, int height, int width, int repeats,
              const std::string& csv_path) {
    model::ModelConfig cfg = tiny_bench_config(g);
    model::Weights w =
        g.weights.empty() ? model::Weights::init(cfg, g.seed) : model::Weights::load(g.weights);
    pipeline::BenchReport report = pipeline::bench(w, cfg, height, width, repeats, g.seed);
    std::fputs(report.table().c_str(), stdout);
    std::printf("correlation pyramid model: %lld bytes (%.4f GiB)\n", report.corr_model_bytes,
                static_cast<double>(report.corr_model_bytes) / (1024.0 * 1024.0 * 1024.0));
    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        if (!csv) throw UsageError("cannot write " + csv_path);
        csv << report.csv();
    }
    return 0;
}

// --- histogram ----------------------------------------------------------------

int run_histogram(const std::string& dir, const std::string& out_png,
                  const std::string& csv_path) {
    std::vector<fs::path> files = list_sorted(dir, {".flo"});
    if (files.empty()) throw UsageError("no .flo files in " + dir);

    metrics::MotionHistogram hist;
    for (const auto& p : files) metrics::histogram_add(hist, flowio::read_flo(p.string()));

    double binned = 0;
    float max_count = 0;
    for (long long i = 0; i < hist.counts.numel(); ++i) {
        binned += hist.counts[i];
        max_count = std::max(max_count, hist.counts[i]);
    }
    std::printf("flows: %zu  pixels: %lld  binned: %.0f  clipped: %lld\n", files.size(),
                hist.total, binned, hist.clipped);
    std::printf("conservation: %.0f + %lld = %lld (%s)\n", binned, hist.clipped, hist.total,
                binned + static_cast<double>(hist.clipped) == static_cast<double>(hist.total)
                    ? "exact"
                    : "VIOLATED");

    if (!out_png.empty()) {
        Tensor img({1, hist.counts.dim(0), hist.counts.dim(1)});
        const double denom = std::log1p(static_cast<double>(max_count));
        if (denom > 0)
            for (long long i = 0; i < hist.counts.numel(); ++i)
                img[i] = static_cast<float>(std::log1p(static_cast<double>(hist.counts[i])) / denom);
        flowio::write_image(out_png, img);
        std::printf("wrote %s\n", out_png.c_str());
    }
    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        if (!csv) throw UsageError("cannot write " + csv_path);
        csv << "u,v,count\n";
        const int w2 = hist.counts.dim(1), h2 = hist.counts.dim(0);
        for (int row = 0; row < h2; ++row)
            for (int col = 0; col < w2; ++col) {
                const float c = hist.counts[static_cast<long long>(row) * w2 + col];
                if (c != 0)
                    csv << (col - w2 / 2) << "," << (row - h2 / 2) << "," << c << "\n";
            }
        std::printf("wrote %s\n", csv_path.c_str());
    }
    return 0;
}

// --- train-toy -----------------------------------------------------------------

int run_train_toy(const GlobalOpts& g, int steps, double lr, int height, int width, int d_c,
                  const std::string& out_weights, const std::string& csv_path) {
    model::ModelConfig cfg = model::ModelConfig::paired(d_c);
    cfg.enc_channels = {16, 24, 32, 48};
    cfg.mask_hidden = 64;
    cfg.radius = 3;
    cfg.corr_scale = g.scale;
    cfg.use_gma = !g.no_gma;
    cfg.iters = g.iters;
    cfg.validate();

    learn::TrainResult res = learn::train_toy(cfg, height, width, steps, lr, g.seed);
    if (!res.log.empty())
        std::printf("loss: %.4f -> %.4f over %d steps\n", res.log.front().loss,
                    res.log.back().loss, steps);
    std::printf("held-out EPE: %.4f -> %.4f\n", res.held_out_epe_init, res.held_out_epe_final);
    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        if (!csv) throw UsageError("cannot write " + csv_path);
        csv << res.csv();
    }
    if (!out_weights.empty()) {
        res.weights.save(out_weights);
        std::printf("wrote %s\n", out_weights.c_str());
    }
    return 0;
}

// --- selfcheck -------------------------------------------------------------------

int run_selfcheck(const GlobalOpts& g) {
    int failures = 0;
    auto check = [&](const char* name, bool ok, const std::string& detail = "") {
        if (ok) {
            std::printf("[ok]   %s\n", name);
        } else {
            ++failures;
            std::printf("[FAIL] %s%s%s\n", name, detail.empty() ? "" : ": ", detail.c_str());
        }
    };

    std::uint64_t s = g.seed * 0x9e3779b97f4a7c15ULL + 1;
    auto next_float = [&s]() {
        s += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = s;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return static_cast<float>((z >> 40) * 0x1.0p-24) - 0.5f;
    };
    auto rand_tensor = [&](std::vector<int> shape) {
        Tensor t(std::move(shape));
        for (long long i = 0; i < t.numel(); ++i) t[i] = next_float();
        return t;
    };

    {
        const Tensor fa = rand_tensor({8, 12, 16});
        const Tensor fb = rand_tensor({8, 12, 16});
        corrvol::Pyramid fast = corrvol::build_pyramid(corrvol::build_base(fa, fb), 4);
        corrvol::Pyramid naive = corrvol::build_pyramid_naive(fa, fb, 4);
        float worst = 0;
        for (std::size_t l = 0; l < fast.levels.size(); ++l)
            worst = std::max(worst, max_abs(sub(fast.levels[l], naive.levels[l])));
        check("pooled correlation matches per-level rebuild", worst <= 1e-5f,
              "max abs diff " + std::to_string(worst));

        const Tensor fwd = corrvol::build_base(fa, fb);
        const Tensor rev = corrvol::reverse_volume(fwd);
        const Tensor direct = corrvol::build_base(fb, fa);
        check("reversed volume is bitwise the swapped build", rev.bitwise_equal(direct));
    }

    {
        model::ModelConfig cfg = model::ModelConfig::paired(8);
        cfg.enc_channels = {4, 6, 8, 12};
        cfg.mask_hidden = 8;
        cfg.radius = 2;
        cfg.iters = 2;
        model::Weights w = model::Weights::init(cfg, g.seed);
        std::vector<Tensor> frames;
        for (int i = 0; i < 5; ++i) {
            Tensor f({3, 32, 48});
            for (long long j = 0; j < f.numel(); ++j) f[j] = next_float() + 0.5f;
            frames.push_back(std::move(f));
        }
        pipeline::VideoSession session(w, cfg);
        session.push(frames[0]);
        session.push(frames[1]);
        bool all_equal = true;
        for (int t = 2; t < 5; ++t) {
            pipeline::BidirFlowOut live = session.step(frames[static_cast<std::size_t>(t)]);
            pipeline::BidirFlowOut ref = pipeline::infer_triplet(
                frames[static_cast<std::size_t>(t) - 2], frames[static_cast<std::size_t>(t) - 1],
                frames[static_cast<std::size_t>(t)], w, cfg);
            all_equal = all_equal && live.f_prev.bitwise_equal(ref.f_prev) &&
                        live.f_next.bitwise_equal(ref.f_next);
        }
        check("session with cache reuse is bitwise the stateless path", all_equal);
    }

    {
        const Tensor x = rand_tensor({2, 5, 6});
        const Tensor k = rand_tensor({3, 2, 3, 3});
        const Tensor b = rand_tensor({3});
        const Tensor gt = rand_tensor({2, 5, 6});
        auto build = [&gt](const std::vector<ad::Var>& leaves) {
            ad::Var y = ad::conv2d(leaves[0], leaves[1], leaves[2], 1, 1);
            ad::Var flow = ad::slice(y, 0, 2);
            ad::Var alpha = ad::sigmoid(ad::slice(y, 2, 3));
            ad::Var beta = ad::slice(y, 2, 3);
            return ad::mol_loss(flow, alpha, beta, gt);
        };
        const double worst = learn::grad_check(build, {x, k, b}, 1e-3, 6, g.seed);
        check("gradients match central differences", worst <= 1e-3,
              "worst rel err " + std::to_string(worst));
    }

    {
        Tensor pred({2, 1, 2});
        Tensor gt({2, 1, 2});
        pred.at(0, 0, 0) = 3.0f;
        pred.at(1, 0, 0) = 4.0f;
        const bool epe_ok = std::abs(metrics::epe(pred, gt) - 2.5) < 1e-9;
        Tensor pred2({2, 4, 4});
        Tensor gt2({2, 4, 4});
        for (int i = 0; i < 16; ++i) pred2[i] = 2.5f;
        const bool wauc_ok = std::abs(metrics::wauc(pred2, gt2) - 25.0) < 1e-9;
        Tensor f({2, 2, 2});
        for (int i = 0; i < 4; ++i) {
            f[i] = 2.25f;
            f[4 + i] = -3.5f;
        }
        metrics::MotionHistogram h = metrics::motion_histogram({&f});
        const long long row = -4 + h.counts.dim(0) / 2, col = 2 + h.counts.dim(1) / 2;
        const bool hist_ok =
            h.counts[row * h.counts.dim(1) + col] == 4.0f && h.clipped == 0 && h.total == 4;
        check("metric oracles (epe, wauc, histogram)", epe_ok && wauc_ok && hist_ok);
    }

    if (failures) {
        std::printf("%d selfcheck(s) failed\n", failures);
        return 2;
    }
    std::printf("all selfchecks passed\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memory-efficient multi-frame optical flow"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "Read options from an INI file");
    app.allow_config_extras(false);

    GlobalOpts g;
    app.add_option("--weights", g.weights, "Weight file (.mfof)");
    app.add_option("--iters", g.iters, "Refinement iterations")->check(CLI::NonNegativeNumber);
    app.add_option("--scale", g.scale, "Correlation resolution divisor")
        ->check(CLI::IsMember({8, 16, 24}));
    app.add_option("--dc", g.d_c, "Context feature channels")->check(CLI::PositiveNumber);
    app.add_flag("--no-gma", g.no_gma, "Disable global motion aggregation");
    app.add_flag("--upscale2x", g.upscale2x, "Infer at 2x resolution, halve the result");
    app.add_flag("--viz", g.viz, "Also write color-coded flow images");
    app.add_option("--jobs", g.jobs, "Parallel stateless workers for estimate")
        ->check(CLI::PositiveNumber);
    app.add_option("--seed", g.seed, "RNG seed")->envname("MEMFOF_SEED");

    auto* est = app.add_subcommand("estimate", "Estimate flow for an image sequence");
    std::vector<std::string> est_inputs;
    std::string est_out = "flow_out";
    est->add_option("inputs", est_inputs, "Image directory or >= 3 image files")->required();
    est->add_option("--out", est_out, "Output directory");

    auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
    std::string ev_pred, ev_gt, ev_csv;
    ev->add_option("pred", ev_pred, "Directory of predicted .flo files")->required();
    ev->add_option("gt", ev_gt, "Directory of ground-truth .flo files")->required();
    ev->add_option("--csv", ev_csv, "Also write results as CSV");

    auto* be = app.add_subcommand("bench", "Time the inference optimizations");
    int be_h = 256, be_w = 448, be_repeats = 20;
    std::string be_csv;
    be->add_option("--height", be_h)->check(CLI::PositiveNumber);
    be->add_option("--width", be_w)->check(CLI::PositiveNumber);
    be->add_option("--repeats", be_repeats)->check(CLI::PositiveNumber);
    be->add_option("--csv", be_csv, "Also write results as CSV");

    auto* hi = app.add_subcommand("histogram", "2D motion histogram over a flow directory");
    std::string hi_dir, hi_png, hi_csv;
    hi->add_option("dir", hi_dir, "Directory of .flo files")->required();
    hi->add_option("--out", hi_png, "Write log-intensity histogram image");
    hi->add_option("--csv", hi_csv, "Write nonzero bins as CSV");

    auto* tr = app.add_subcommand("train-toy", "Train a tiny model on synthetic clips");
    int tr_steps = 200, tr_h = 64, tr_w = 96, tr_dc = 64;
    double tr_lr = 1e-3;
    std::string tr_out, tr_csv;
    tr->add_option("--steps", tr_steps)->check(CLI::NonNegativeNumber);
    tr->add_option("--lr", tr_lr)->check(CLI::PositiveNumber);
    tr->add_option("--height", tr_h)->check(CLI::PositiveNumber);
    tr->add_option("--width", tr_w)->check(CLI::PositiveNumber);
    tr->add_option("--train-dc", tr_dc, "Context channels for the toy model")
        ->check(CLI::PositiveNumber);
    tr->add_option("--out", tr_out, "Write final weights here");
    tr->add_option("--csv", tr_csv, "Write the step log here");

    auto* sc = app.add_subcommand("selfcheck", "Run built-in consistency checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (est->parsed()) return run_estimate(g, est_inputs, est_out);
        if (ev->parsed()) return run_eval(ev_pred, ev_gt, ev_csv);
        if (be->parsed()) return run_bench(g, be_h, be_w, be_repeats, be_csv);
        if (hi->parsed()) return run_histogram(hi_dir, hi_png, hi_csv);
        if (tr->parsed()) return run_train_toy(g, tr_steps, tr_lr, tr_h, tr_w, tr_dc, tr_out, tr_csv);
        if (sc->parsed()) return run_selfcheck(g);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ParamError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 2;
    }
    return 0;
}
