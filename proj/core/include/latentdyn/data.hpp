#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentdyn/advection.hpp"
#include "latentdyn/tensor.hpp"

namespace latentdyn {

/// Grayscale image I/O. Readers accept 8- and 16-bit PGM (P5) and grayscale
/// PNG and return intensities in [0,1] as [H,W,1] tensors; writers quantize
/// to 16 bits.
Tensor load_image(const std::string& path);
void save_png16(const std::string& path, const Tensor& image);
void save_pgm(const std::string& path, const Tensor& image, int maxval = 255);

/// Channels assembled from one file per channel; extents must agree.
Tensor load_image_channels(const std::vector<std::string>& paths);

struct ImagePair {
    Tensor x0; // [H,W,C]
    Tensor x1;
    double pixel_scale = 1.0; // meters per pixel, informational
};

/// Affine record mapping [lo,hi] <-> [-1,1]. A constant source (hi == lo)
/// maps to all zeros and is flagged degenerate.
struct NormRange {
    double lo = 0.0;
    double hi = 1.0;
    bool degenerate = false;
};

/// Min-max normalization to [-1,1] with one shared range across both patches
/// of a pair, so relative intensity between the endpoints is preserved.
NormRange normalize_pair(const Tensor& x0, const Tensor& x1, Tensor& out0, Tensor& out1);
Tensor denormalize(const Tensor& t, const NormRange& range);

struct PatchPair {
    Tensor x0; // [Hp,Wp,C], normalized to [-1,1]
    Tensor x1;
    int row = 0; // window origin in the source images
    int col = 0;
    NormRange range;
};

/// Windows per axis: max(1, floor((L - P) / S)), starting at offsets
/// 0, S, 2S, ...  The floor drops the final flush window; no window ever
/// leaves the image.
int window_count(int length, int patch, int stride);

/// Pairs scan_patches will produce for this geometry, without materializing
/// them (full-scale dense scans materialize to gigabytes).
long long scan_patch_count(int h, int w, int hp, int wp, int stride_h, int stride_w);

/// Scan both images with the same windows and normalize each pair.
std::vector<PatchPair> scan_patches(const ImagePair& pair, int hp, int wp, int stride_h, int stride_w);

/// Stack [Hp,Wp,C] patches into one [B,Hp,Wp,C] batch. `use_x1` selects the
/// terminal patch of each pair.
Tensor stack_patches(const std::vector<PatchPair>& pairs, const std::vector<int>& indices, bool use_x1);

enum class SyntheticKind { translation, rotation, source_sink };
SyntheticKind synthetic_kind_from_string(const std::string& s);
std::string to_string(SyntheticKind k);

/// Ground-truth scene: a band-limited random texture advected by a known
/// field sequence. x0 is the texture, x1 the terminal state of the rollout,
/// so (x0, x1, true_fields) is self-consistent under the advection module.
struct SyntheticScene {
    Tensor texture;    // [H,W,1] in [0,1]
    FieldSequence true_fields;
    Tensor x0;         // [H,W,1]
    Tensor x1;
    SyntheticKind kind = SyntheticKind::translation;
};

/// Texture: ~20 random Gaussians rescaled to [0,1]. Fields: translation is a
/// uniform field, rotation is rigid about a random interior center,
/// source-sink is the gradient of a random potential; amplitudes are scaled
/// so the largest per-step displacement stays below two grid cells.
SyntheticScene make_synthetic(SyntheticKind kind, int h, int w, int n, double dt, std::uint64_t seed);

/// Dataset manifest: plain text, one line per channel file per endpoint,
///   t0 <path>
///   t1 <path>
/// with paths relative to the manifest location.
struct Manifest {
    std::vector<std::string> t0;
    std::vector<std::string> t1;
    double pixel_scale = 1.0;
};

Manifest read_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);

/// Load both endpoints named by a manifest (paths resolved relative to it).
ImagePair load_pair(const std::string& manifest_path);

} // namespace latentdyn
