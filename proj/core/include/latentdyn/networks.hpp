#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "latentdyn/advection.hpp"
#include "latentdyn/tensor.hpp"

namespace latentdyn {

/// Plain convolution stack: same-padded 3x3 convs with leaky-ReLU after each
/// hidden layer and a final linear conv to `out_channels`. No pooling and no
/// dense layers, so every output pixel depends only on its local receptive
/// field and spatial extents are preserved.
struct EncoderConfig {
    int in_channels = 1;
    std::vector<int> hidden;
    int out_channels = 1;
    int kernel = 3;
    double slope = 0.2;
};

/// U-net with three down/up stages of two convs each, max-pool downsampling,
/// resize-convolution upsampling, and skip connections concatenated after a
/// bilinear resize.
struct UNetConfig {
    int in_channels = 1;
    int input_channels = 16;
    std::vector<int> down{16, 32, 64}; // channels per downsampling stage
    int bottleneck = 128;
    std::vector<int> up{64, 32, 16};   // mirror of down
    int output_channels = 16;
    int out_channels = 1;
    int kernel = 3;
    double slope = 0.2;

    void validate() const;
};

struct ConvParams {
    Tensor kernel; // [k,k,Cin,Cout]
    Tensor bias;   // [Cout]
};

struct EncoderParams {
    std::vector<ConvParams> layers; // hidden convs then the output conv
};

struct UNetParams {
    ConvParams input;
    std::vector<std::array<ConvParams, 2>> down;
    ConvParams bottleneck;
    // Per up stage: [0] conv after the x2 resize, [1] conv after skip concat.
    std::vector<std::array<ConvParams, 2>> up;
    ConvParams output;
    ConvParams head; // final linear conv to out_channels
};

/// The three learnable maps plus everything needed to rebuild them: encoder
/// parameters (theta1), decoder (theta2), field extractor (theta3), their
/// configs, and the evolution discretization. With `identity_codecs` set the
/// encode/decode maps are pass-throughs (single-channel only) and only the
/// field extractor carries parameters.
struct ModelBundle {
    EncoderConfig enc_cfg;
    UNetConfig dec_cfg;
    UNetConfig field_cfg;
    EncoderParams encoder;
    UNetParams decoder;
    UNetParams field_net;
    int n_evolution = 10;
    double dt = 0.1;
    bool identity_codecs = false;

    static ModelBundle create(const EncoderConfig& enc, const UNetConfig& dec, const UNetConfig& field,
                              int n_evolution, double dt, std::uint64_t seed);

    /// Identity-codec bundle for fitting the advection model directly in
    /// image space; `field` must have out_channels == 2 * n_evolution.
    static ModelBundle identity(const UNetConfig& field, int n_evolution, double dt, std::uint64_t seed);
};

/// Visit every parameter tensor in declaration order (the serialization and
/// optimizer order).
void for_each_param(ModelBundle& b, const std::function<void(Tensor&)>& fn);
void for_each_param(const ModelBundle& b, const std::function<void(const Tensor&)>& fn);
long long param_count(const ModelBundle& b);

/// Copy of the bundle whose parameter tensors are watched leaves on `tape`
/// (storage is shared with the original).
ModelBundle watch(Tape& tape, const ModelBundle& b);

/// phi: [B,Hp,Wp,C] -> [B,Hp,Wp,1]. Pass-through for identity bundles.
Tensor encode(Tape& tape, const ModelBundle& b, const Tensor& x);

/// psi: [B,H,W,1] -> [B,H,W,C]. Spatial extents must be divisible by 8.
Tensor decode(Tape& tape, const ModelBundle& b, const Tensor& z);

/// eta: [B,Hp,Wp,C] -> N fields of [B,Hp,Wp,2], from the initial image only.
FieldSequence extract_fields(Tape& tape, const ModelBundle& b, const Tensor& x);

/// Receptive-field radius of one encoder output pixel.
int encoder_receptive_field(const EncoderConfig& cfg);

/// Shape-inference check: walks the configs with pure arithmetic and verifies
/// every parameter tensor matches, and that (hp, wp, channels) inputs are
/// accepted. Throws shape_error with a description on any mismatch.
void validate_shapes(const ModelBundle& b, int hp, int wp, int channels);

void save_bundle(const ModelBundle& b, const std::string& path);
ModelBundle load_bundle(const std::string& path);

} // namespace latentdyn
