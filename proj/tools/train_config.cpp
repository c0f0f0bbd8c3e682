#include "train_config.hpp"

#include <set>

#include "latentdyn/kvconfig.hpp"

namespace latentdyn::cli {

TrainConfig parse_train_config(const std::string& path) {
    const KvMap kv = read_kv_file(path);

    static const std::set<std::string> allowed = {
        // network widths (required)
        "enc_hidden", "unet_input", "unet_down", "unet_bottleneck", "unet_up", "unet_output",
        // evolution and scanning (required)
        "n_evolution", "stride_h", "stride_w",
        // loss weights and optimizer (required)
        "lambda_ae", "lambda_magnitude", "lambda_smooth", "alpha", "gamma",
        // optional
        "dt", "patch_h", "patch_w", "batch", "iterations", "seed", "log_every", "zero_fields",
        "dec_kernel", "field_kernel",
    };
    kv_require_known(kv, allowed);

    TrainConfig cfg;
    cfg.enc.hidden = kv_get_int_list(kv, "enc_hidden");
    cfg.enc.kernel = 3;
    cfg.enc.slope = 0.2;

    const int input_ch = static_cast<int>(kv_get_int(kv, "unet_input"));
    const std::vector<int> down = kv_get_int_list(kv, "unet_down");
    const int bottleneck = static_cast<int>(kv_get_int(kv, "unet_bottleneck"));
    const std::vector<int> up = kv_get_int_list(kv, "unet_up");
    const int output_ch = static_cast<int>(kv_get_int(kv, "unet_output"));
    for (UNetConfig* u : {&cfg.dec, &cfg.field}) {
        u->input_channels = input_ch;
        u->down = down;
        u->bottleneck = bottleneck;
        u->up = up;
        u->output_channels = output_ch;
        u->slope = 0.2;
    }
    cfg.dec.kernel = static_cast<int>(kv_get_int(kv, "dec_kernel", 3));
    cfg.field.kernel = static_cast<int>(kv_get_int(kv, "field_kernel", 5));

    cfg.n_evolution = static_cast<int>(kv_get_int(kv, "n_evolution"));
    if (cfg.n_evolution < 1) throw config_error("key 'n_evolution': must be >= 1");
    cfg.dt = kv_get_double(kv, "dt", 0.1);
    cfg.stride_h = static_cast<int>(kv_get_int(kv, "stride_h"));
    cfg.stride_w = static_cast<int>(kv_get_int(kv, "stride_w"));
    if (cfg.stride_h < 1 || cfg.stride_w < 1) throw config_error("key 'stride_h'/'stride_w': must be >= 1");
    cfg.patch_h = static_cast<int>(kv_get_int(kv, "patch_h", 256));
    cfg.patch_w = static_cast<int>(kv_get_int(kv, "patch_w", 256));
    if (cfg.patch_h % 8 != 0 || cfg.patch_w % 8 != 0)
        throw config_error("key 'patch_h'/'patch_w': must be divisible by 8");

    cfg.weights.ae = kv_get_double(kv, "lambda_ae");
    cfg.weights.magnitude = kv_get_double(kv, "lambda_magnitude");
    cfg.weights.smooth = kv_get_double(kv, "lambda_smooth");
    if (cfg.weights.ae < 0 || cfg.weights.magnitude < 0 || cfg.weights.smooth < 0)
        throw config_error("loss weights must be nonnegative");

    cfg.adam.alpha0 = kv_get_double(kv, "alpha");
    cfg.adam.gamma = kv_get_double(kv, "gamma");

    cfg.opts.batch_size = static_cast<int>(kv_get_int(kv, "batch", 16));
    cfg.opts.iterations = kv_get_int(kv, "iterations", 30000);
    cfg.opts.seed = static_cast<std::uint64_t>(kv_get_int(kv, "seed", 1));
    cfg.opts.log_every = kv_get_int(kv, "log_every", 100);
    cfg.opts.zero_fields = kv_get_int(kv, "zero_fields", 0) != 0;
    if (cfg.opts.batch_size < 1) throw config_error("key 'batch': must be >= 1");
    if (cfg.opts.iterations < 1) throw config_error("key 'iterations': must be >= 1");
    if (cfg.opts.log_every < 1) throw config_error("key 'log_every': must be >= 1");
    return cfg;
}

void bind_channels(TrainConfig& cfg, int channels) {
    cfg.enc.in_channels = channels;
    cfg.enc.out_channels = 1;
    cfg.dec.in_channels = 1;
    cfg.dec.out_channels = channels;
    cfg.field.in_channels = channels;
    cfg.field.out_channels = 2 * cfg.n_evolution;
}

std::string train_config_help() {
    return "Config keys (flat key = value file; defaults follow the transition-dynamics setup):\n"
           "  enc_hidden       = 32,64,128,64,32,16,8   encoder hidden conv widths (required)\n"
           "  unet_input       = 16                     U-net input conv width (required)\n"
           "  unet_down        = 16,32,64               U-net downsampling widths (required)\n"
           "  unet_bottleneck  = 128                    U-net bottleneck width (required)\n"
           "  unet_up          = 64,32,16               U-net upsampling widths, mirror of down (required)\n"
           "  unet_output      = 16                     U-net output conv width (required)\n"
           "  n_evolution      = 10                     evolution steps (required)\n"
           "  stride_h         = 1                      patch scan stride, rows (required)\n"
           "  stride_w         = 1                      patch scan stride, cols (required)\n"
           "  lambda_ae        = 1.0                    autoencoder weight (required)\n"
           "  lambda_magnitude = 0.01                   field magnitude weight (required)\n"
           "  lambda_smooth    = 0.01                   field smoothness weight (required)\n"
           "  alpha            = 0.0001                 initial Adam rate (required)\n"
           "  gamma            = 0.8                    rate decay per 10000 iterations (required)\n"
           "  dt               = 0.1                    step length (optional)\n"
           "  patch_h          = 256                    patch height, multiple of 8 (optional)\n"
           "  patch_w          = 256                    patch width, multiple of 8 (optional)\n"
           "  batch            = 16                     minibatch size (optional)\n"
           "  iterations       = 30000                  training iterations (optional)\n"
           "  seed             = 1                      RNG seed for init and shuffling (optional)\n"
           "  log_every        = 100                    metrics row interval (optional)\n"
           "  zero_fields      = 0                      1 clamps eta to zero fields (optional)\n"
           "  dec_kernel       = 3                      decoder kernel size (optional)\n"
           "  field_kernel     = 5                      field extractor kernel size (optional)\n";
}

} // namespace latentdyn::cli
