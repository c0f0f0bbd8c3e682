// latentdyn command-line tool: synthesize ground-truth scenes, train the
// latent advection model, infer in-between frames, run the OT and
// direct-PDE baselines, and run verification probes.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "latentdyn/baselines.hpp"
#include "latentdyn/gradcheck.hpp"
#include "latentdyn/inference.hpp"
#include "latentdyn/rng.hpp"
#include "lp_oracle.hpp"
#include "train_config.hpp"

namespace fs = std::filesystem;
using namespace latentdyn;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct SizeArg {
    int h = 0, w = 0;
};

SizeArg parse_size(const std::string& s) {
    SizeArg out;
    char sep = 0;
    if (std::sscanf(s.c_str(), "%d%c%d", &out.h, &sep, &out.w) != 3 || (sep != 'x' && sep != 'X') ||
        out.h < 1 || out.w < 1)
        throw config_error("bad size '" + s + "', expected HxW");
    return out;
}

Tensor drop_batch3(const Tensor& t) {
    return Tensor({t.extent(1), t.extent(2), t.extent(3)},
                  std::vector<double>(t.data(), t.data() + t.size()));
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int run_synth(const std::string& kind_s, const std::string& size_s, int steps, double dt,
              std::uint64_t seed, const std::string& out_dir) {
    const SyntheticKind kind = synthetic_kind_from_string(kind_s);
    const SizeArg size = parse_size(size_s);
    if (steps < 1) throw config_error("--steps must be >= 1");

    const SyntheticScene scene = make_synthetic(kind, size.h, size.w, steps, dt, seed);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory: " + out_dir);
    const fs::path base(out_dir);

    save_png16((base / "x0.png").string(), scene.x0);
    save_png16((base / "x1.png").string(), scene.x1);
    for (int s = 0; s < steps; ++s) {
        char name[24];
        std::snprintf(name, sizeof(name), "field_%03d.bin", s);
        write_field_bin((base / name).string(),
                        {drop_batch3(scene.true_fields.fields[static_cast<std::size_t>(s)])});
    }
    Manifest m;
    m.t0 = {"x0.png"};
    m.t1 = {"x1.png"};
    write_manifest(m, (base / "manifest.txt").string());

    std::cout << "synth: " << to_string(kind) << " scene " << size.h << "x" << size.w << ", " << steps
              << " steps -> " << out_dir << " (" << (2 + steps + 1) << " files)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int run_train(const std::string& manifest, const std::string& config, const std::string& out_dir) {
    cli::TrainConfig cfg = cli::parse_train_config(config);
    const ImagePair pair = load_pair(manifest);
    cli::bind_channels(cfg, pair.x0.extent(2));

    const std::vector<PatchPair> dataset =
        scan_patches(pair, cfg.patch_h, cfg.patch_w, cfg.stride_h, cfg.stride_w);
    std::cout << "train: " << dataset.size() << " patch pairs (" << cfg.patch_h << "x" << cfg.patch_w
              << ", stride " << cfg.stride_h << "x" << cfg.stride_w << ")\n";

    ModelBundle bundle =
        ModelBundle::create(cfg.enc, cfg.dec, cfg.field, cfg.n_evolution, cfg.dt, cfg.opts.seed);
    std::cout << "train: " << param_count(bundle) << " parameters, " << cfg.opts.iterations
              << " iterations, batch " << std::min<std::size_t>(static_cast<std::size_t>(cfg.opts.batch_size),
                                                                dataset.size())
              << "\n";

    const TrainResult result = train(bundle, dataset, cfg.weights, cfg.adam, cfg.opts);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory: " + out_dir);
    save_bundle(bundle, (fs::path(out_dir) / "model.bundle").string());
    write_metrics_csv(result.log, (fs::path(out_dir) / "metrics.csv").string());

    if (!result.log.empty())
        std::cout << "train: final loss " << result.log.back().loss.total << " (dynamics "
                  << result.log.back().loss.dynamics << ")\n";
    std::cout << "train: wrote " << out_dir << "/model.bundle and metrics.csv\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int default_patch_extent(int image_extent) {
    const int cap = std::min(image_extent, 256);
    return cap - cap % 8;
}

int run_infer(const std::string& model, const std::string& manifest, const std::string& out_dir,
              const std::string& patch_s, int quiver, int seed_grid) {
    const ModelBundle bundle = load_bundle(model);
    const ImagePair pair = load_pair(manifest);

    int ph = default_patch_extent(pair.x0.extent(0));
    int pw = default_patch_extent(pair.x0.extent(1));
    if (!patch_s.empty()) {
        const SizeArg size = parse_size(patch_s);
        ph = size.h;
        pw = size.w;
    }
    if (ph < 8 || pw < 8) throw config_error("image too small for inference tiles");

    const ImageInference result = infer_image(pair, bundle, ph, pw);
    ExportOptions opts;
    opts.quiver_stride = quiver;
    opts.streamline_grid = seed_grid;
    export_artifacts(result, pair, out_dir, opts);

    std::cout << "infer: " << result.frames.size() << " frames, " << result.fields.size()
              << " fields, tiles " << ph << "x" << pw << " -> " << out_dir << "\n";
    std::cout << "infer: terminal rel-L2 vs x1 = " << relative_l2(result.frames.back(), pair.x1) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

int run_baseline_ot(const ImagePair& pair, const std::string& out_dir, int steps, double epsilon,
                    double tol, int max_iter) {
    if (pair.x0.extent(2) != 1) throw config_error("baseline ot: single-channel images only");
    if (pair.x0.extent(0) > kMaxOtExtent || pair.x0.extent(1) > kMaxOtExtent)
        throw config_error("baseline ot: dense OT is capped at 64x64 images (got " +
                           std::to_string(pair.x0.extent(0)) + "x" + std::to_string(pair.x0.extent(1)) +
                           "); crop or downsample first");

    SinkhornOptions opts;
    opts.epsilon = epsilon;
    opts.tol = tol;
    opts.max_iter = max_iter;
    const std::vector<Tensor> frames = ot_interpolate(pair, steps, opts);

    const fs::path base = fs::path(out_dir) / "baseline_ot";
    std::error_code ec;
    fs::create_directories(base, ec);
    if (ec) throw io_error("cannot create output directory: " + base.string());

    double mass0 = 0.0;
    for (long long i = 0; i < frames.front().size(); ++i) mass0 += frames.front()[i];
    for (std::size_t f = 0; f < frames.size(); ++f) {
        char name[24];
        std::snprintf(name, sizeof(name), "frame_%03d.png", static_cast<int>(f));
        save_png16((base / name).string(), frames[f]);
    }
    std::ofstream js(base / "metrics.json");
    js << "{\n  \"frames\": " << frames.size() << ",\n  \"interpolation\": \"barycentric\",\n"
       << "  \"epsilon\": " << epsilon << ",\n  \"total_mass\": " << mass0 << "\n}\n";

    std::cout << "baseline ot: " << frames.size() << " frames -> " << base.string() << "\n";
    return 0;
}

int run_baseline_direct(const ImagePair& pair, const std::string& out_dir, const std::string& config) {
    if (config.empty()) throw config_error("baseline direct: --config is required");
    if (pair.x0.extent(2) != 1) throw config_error("baseline direct: single-channel images only");
    cli::TrainConfig cfg = cli::parse_train_config(config);
    cli::bind_channels(cfg, 1);

    const std::vector<PatchPair> dataset =
        scan_patches(pair, cfg.patch_h, cfg.patch_w, cfg.stride_h, cfg.stride_w);
    const DirectFitResult fit = direct_pde_fit(dataset, cfg.field, cfg.n_evolution, cfg.dt, cfg.weights,
                                               cfg.adam, cfg.opts, cfg.opts.seed);

    const fs::path base = fs::path(out_dir) / "baseline_direct";
    std::error_code ec;
    fs::create_directories(base, ec);
    if (ec) throw io_error("cannot create output directory: " + base.string());
    save_bundle(fit.bundle, (base / "model.bundle").string());
    write_metrics_csv(fit.train_log.log, (base / "metrics.csv").string());

    const ImageInference result = infer_image(pair, fit.bundle, cfg.patch_h, cfg.patch_w);
    export_artifacts(result, pair, base.string());

    std::cout << "baseline direct: terminal rel-L2 vs x1 = " << relative_l2(result.frames.back(), pair.x1)
              << " -> " << base.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

bool report(const std::string& name, bool ok, double measured, const std::string& bound) {
    std::printf("  [%s] %-44s measured %.3e (bound %s)\n", ok ? "PASS" : "FAIL", name.c_str(), measured,
                bound.c_str());
    return ok;
}

int run_check_grad(std::uint64_t seed) {
    EncoderConfig enc;
    enc.in_channels = 1;
    enc.hidden = {4, 6};
    UNetConfig dec;
    dec.in_channels = 1;
    dec.input_channels = 4;
    dec.down = {4, 6, 8};
    dec.bottleneck = 8;
    dec.up = {8, 6, 4};
    dec.output_channels = 4;
    dec.out_channels = 1;
    UNetConfig field = dec;
    field.kernel = 5;
    field.out_channels = 6;
    ModelBundle bundle = ModelBundle::create(enc, dec, field, 3, 0.1, seed);

    Rng rng(seed + 1);
    Tensor x0({2, 16, 16, 1}), x1({2, 16, 16, 1});
    for (long long i = 0; i < x0.size(); ++i) x0[i] = rng.uniform(-1.0, 1.0);
    for (long long i = 0; i < x1.size(); ++i) x1[i] = rng.uniform(-1.0, 1.0);

    const LossWeights weights{1.0, 0.01, 0.01};
    const GradCheckReport rep = check_gradients(
        bundle,
        [&](Tape& tape, const ModelBundle& watched) {
            return total_loss(tape, watched, x0, x1, weights);
        },
        60, seed + 2);

    std::cout << "check grad: " << rep.checked << " parameters probed\n";
    const bool ok = report("total-loss gradient vs central differences", rep.max_rel_err <= 1e-3,
                           rep.max_rel_err, "1e-3");
    std::cout << (ok ? "check grad: PASS" : "check grad: FAIL") << " (max relative error "
              << rep.max_rel_err << ")\n";
    return ok ? 0 : kExitNumeric;
}

int run_check_advect(std::uint64_t seed) {
    Rng rng(seed);
    bool all = true;

    // Zero-field identity, bitwise.
    {
        Tensor z({1, 33, 29, 1});
        for (long long i = 0; i < z.size(); ++i) z[i] = rng.uniform(-1.0, 1.0);
        Tape tape;
        const Tensor out = advect_step(tape, z, Tensor({1, 33, 29, 2}), 0.1);
        double diff = 0.0;
        for (long long i = 0; i < z.size(); ++i) diff = std::max(diff, std::abs(out[i] - z[i]));
        all &= report("zero-field identity (exact)", diff == 0.0, diff, "0");
    }

    // Constant preservation and maximum principle over random fields.
    {
        double worst = 0.0;
        for (int trial = 0; trial < 1000; ++trial) {
            Tensor z({1, 16, 16, 1});
            Tensor w({1, 16, 16, 2});
            for (long long i = 0; i < z.size(); ++i) z[i] = rng.uniform(-1.0, 1.0);
            for (long long i = 0; i < w.size(); ++i) w[i] = rng.uniform(-3.0, 3.0);
            double lo = z[0], hi = z[0];
            for (long long i = 0; i < z.size(); ++i) {
                lo = std::min(lo, z[i]);
                hi = std::max(hi, z[i]);
            }
            Tape tape;
            const Tensor out = advect_step(tape, z, w, 0.1);
            for (long long i = 0; i < out.size(); ++i)
                worst = std::max({worst, lo - out[i], out[i] - hi});
        }
        all &= report("maximum principle, 1000 random fields", worst <= 0.0, worst, "0");

        Tensor z = Tensor::full({1, 16, 16, 1}, 0.73);
        Tensor w({1, 16, 16, 2});
        for (long long i = 0; i < w.size(); ++i) w[i] = rng.uniform(-3.0, 3.0);
        Tape tape;
        const Tensor out = advect_step(tape, z, w, 0.1);
        double diff = 0.0;
        for (long long i = 0; i < out.size(); ++i) diff = std::max(diff, std::abs(out[i] - 0.73));
        all &= report("constant preservation (exact)", diff == 0.0, diff, "0");
    }

    // Two half steps vs one full step on a smooth Gaussian at 64x64.
    {
        const int n = 64;
        Tensor z({1, n, n, 1});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const double x = static_cast<double>(j) / (n - 1) - 0.45;
                const double y = static_cast<double>(i) / (n - 1) - 0.55;
                z.at({0, i, j, 0}) = std::exp(-(x * x + y * y) / (2.0 * 0.15 * 0.15));
            }
        const double s = 0.2;
        Tape tape;
        const Tensor half = Tensor::full({1, n, n, 2}, 0.0);
        Tensor wh = half.clone();
        for (long long i = 0; i < wh.size(); i += 2) wh[i] = s;
        Tensor wf = half.clone();
        for (long long i = 0; i < wf.size(); i += 2) wf[i] = 2.0 * s;
        const Tensor two = advect_step(tape, advect_step(tape, z, wh, 0.1), wh, 0.1);
        const Tensor one = advect_step(tape, z, wf, 0.1);
        double diff = 0.0;
        for (long long i = 0; i < z.size(); ++i) diff = std::max(diff, std::abs(two[i] - one[i]));
        all &= report("two half steps vs one full step (64x64)", diff <= 1e-3, diff, "1e-3");
    }

    std::cout << (all ? "check advect: PASS" : "check advect: FAIL") << "\n";
    return all ? 0 : kExitNumeric;
}

int run_check_ot(std::uint64_t seed) {
    bool all = true;

    // Transport between two independent random textures: structured mass with
    // nontrivial travel distance, the regime the interpolation baseline runs
    // in.
    const int h = 16, w = 16, n = h * w;
    const Tensor a = make_synthetic(SyntheticKind::translation, h, w, 4, 0.1, seed).x0;
    const Tensor b = make_synthetic(SyntheticKind::rotation, h, w, 4, 0.1, seed + 101).x0;
    const std::vector<double> mu1 = prepare_marginal(a, 1e-8);
    const std::vector<double> mu2 = prepare_marginal(b, 1e-8);

    SinkhornOptions opts;
    opts.epsilon = 1e-3;
    const TransportPlan plan = sinkhorn(mu1, mu2, h, w, opts);
    all &= report("sinkhorn marginal violation", plan.marginal_violation <= 1e-6, plan.marginal_violation,
                  "1e-6");

    const oracle::LpTransportResult lp = oracle::lp_transport(mu1, mu2, oracle::grid_squared_cost(h, w));
    const double gap = std::abs(plan.cost - lp.cost) / std::max(lp.cost, 1e-12);
    all &= report("sinkhorn cost vs exact LP (relative gap)", gap <= 0.02, gap, "0.02");

    ImagePair pair;
    pair.x0 = a;
    pair.x1 = b;
    const std::vector<Tensor> frames = ot_interpolate(pair, 4, opts);
    double mass_err = 0.0, tv0 = 0.0, tv1 = 0.0;
    double total0 = 0.0;
    for (long long i = 0; i < frames.front().size(); ++i) total0 += frames.front()[i];
    for (const Tensor& f : frames) {
        double mass = 0.0;
        for (long long i = 0; i < f.size(); ++i) mass += f[i];
        mass_err = std::max(mass_err, std::abs(mass / total0 - 1.0));
    }
    for (int i = 0; i < n; ++i) {
        tv0 += std::abs(frames.front()[i] / total0 - mu1[static_cast<std::size_t>(i)]);
        tv1 += std::abs(frames.back()[i] / total0 - mu2[static_cast<std::size_t>(i)]);
    }
    tv0 *= 0.5;
    tv1 *= 0.5;
    all &= report("interpolation mass conservation", mass_err <= 1e-6, mass_err, "1e-6");
    all &= report("endpoint s=0 total variation vs mu1", tv0 <= 1e-3, tv0, "1e-3");
    all &= report("endpoint s=1 total variation vs mu2", tv1 <= 1e-3, tv1, "1e-3");

    std::cout << (all ? "check ot: PASS" : "check ot: FAIL") << "\n";
    return all ? 0 : kExitNumeric;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"latentdyn: learn in-between image dynamics through a latent advection model"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic ground-truth scene");
    std::string synth_kind = "translation", synth_size = "64x64", synth_out = "scene";
    int synth_steps = 10;
    double synth_dt = 0.1;
    std::uint64_t synth_seed = 1;
    synth->add_option("--kind", synth_kind, "translation|rotation|source-sink");
    synth->add_option("--size", synth_size, "scene extents HxW");
    synth->add_option("--steps", synth_steps, "number of evolution steps");
    synth->add_option("--dt", synth_dt, "step length");
    synth->add_option("--seed", synth_seed, "RNG seed");
    synth->add_option("--out", synth_out, "output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train the latent advection model");
    std::string tr_data, tr_config, tr_out = "run";
    tr->add_option("--data", tr_data, "dataset manifest")->required();
    tr->add_option("--config", tr_config, "key=value hyperparameter file")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->footer(cli::train_config_help());

    // infer
    auto* inf = app.add_subcommand("infer", "Apply a trained model to an image pair");
    std::string inf_model, inf_data, inf_out = "out", inf_patch;
    int inf_quiver = 8, inf_streamgrid = 8;
    inf->add_option("--model", inf_model, "model bundle")->required();
    inf->add_option("--data", inf_data, "dataset manifest")->required();
    inf->add_option("--out", inf_out, "output directory")->required();
    inf->add_option("--patch", inf_patch, "tile extents HxW (default: up to 256, multiple of 8)");
    inf->add_option("--quiver", inf_quiver, "quiver CSV grid stride");
    inf->add_option("--streamlines", inf_streamgrid, "streamline seeds per axis per tile");

    // baseline
    auto* bl = app.add_subcommand("baseline", "Run a comparison method");
    std::string bl_method, bl_data, bl_out = "out", bl_config;
    int bl_steps = 10, bl_maxiter = 20000;
    double bl_eps = 1e-3, bl_tol = 1e-6;
    bl->add_option("--method", bl_method, "ot|direct")->required();
    bl->add_option("--data", bl_data, "dataset manifest")->required();
    bl->add_option("--out", bl_out, "output directory")->required();
    bl->add_option("--steps", bl_steps, "frames for OT interpolation");
    bl->add_option("--epsilon", bl_eps, "entropic regularization");
    bl->add_option("--tol", bl_tol, "marginal violation target");
    bl->add_option("--max-iter", bl_maxiter, "Sinkhorn iteration cap");
    bl->add_option("--config", bl_config, "training config (direct method)");

    // check
    auto* ck = app.add_subcommand("check", "Run verification probes");
    std::string ck_suite;
    std::uint64_t ck_seed = 1;
    ck->add_option("--suite", ck_suite, "grad|advect|ot")->required();
    ck->add_option("--seed", ck_seed, "RNG seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (synth->parsed()) return run_synth(synth_kind, synth_size, synth_steps, synth_dt, synth_seed, synth_out);
        if (tr->parsed()) return run_train(tr_data, tr_config, tr_out);
        if (inf->parsed()) return run_infer(inf_model, inf_data, inf_out, inf_patch, inf_quiver, inf_streamgrid);
        if (bl->parsed()) {
            if (bl_method != "ot" && bl_method != "direct")
                throw config_error("--method must be ot or direct");
            const ImagePair pair = load_pair(bl_data);
            return bl_method == "ot" ? run_baseline_ot(pair, bl_out, bl_steps, bl_eps, bl_tol, bl_maxiter)
                                     : run_baseline_direct(pair, bl_out, bl_config);
        }
        if (ck->parsed()) {
            if (ck_suite == "grad") return run_check_grad(ck_seed);
            if (ck_suite == "advect") return run_check_advect(ck_seed);
            if (ck_suite == "ot") return run_check_ot(ck_seed);
            throw config_error("--suite must be grad, advect or ot");
        }
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const shape_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const numeric_error& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const io_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    }
    return 0;
}
