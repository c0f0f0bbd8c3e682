#pragma once

#include <string>

#include "latentdyn/networks.hpp"
#include "latentdyn/training.hpp"

namespace latentdyn::cli {

/// Everything a training run needs, parsed from the flat key=value config.
/// Channel counts that depend on the data (encoder input, decoder output,
/// field extractor input) are filled in later via bind_channels().
struct TrainConfig {
    EncoderConfig enc;
    UNetConfig dec;
    UNetConfig field;
    int n_evolution = 10;
    double dt = 0.1;
    int patch_h = 256, patch_w = 256;
    int stride_h = 1, stride_w = 1;
    LossWeights weights;
    AdamConfig adam;
    TrainOptions opts;
};

/// Parses and validates the config file. Unknown keys and missing required
/// keys raise config_error naming the key.
TrainConfig parse_train_config(const std::string& path);

/// Fill data-dependent channel counts.
void bind_channels(TrainConfig& cfg, int channels);

/// The config template with Table-style defaults, printed by --help.
std::string train_config_help();

} // namespace latentdyn::cli
