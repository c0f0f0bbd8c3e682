#pragma once

#include <string>
#include <vector>

#include "latentdyn/data.hpp"
#include "latentdyn/networks.hpp"

namespace latentdyn {

/// Estimated evolution of one normalized patch: frames[0] = psi(phi(x0)),
/// frames[j] = psi(z_j) for the rolled-out latents, so frame count is
/// n_evolution + 1. Frames stay in normalized units here.
struct PatchInference {
    std::vector<Tensor> frames;  // N+1 tensors [Hp,Wp,C]
    std::vector<Tensor> latents; // N+1 tensors [Hp,Wp,1]
    FieldSequence fields;        // N tensors [1,Hp,Wp,2]
};

PatchInference infer_patch(const Tensor& x0_normalized, const ModelBundle& bundle);

/// Whole-image result from non-overlapping tiles: frames are de-normalized
/// with each tile's stored range and placed disjointly (no blending), fields
/// are stitched into per-step mosaics in tile-domain units.
struct ImageInference {
    std::vector<Tensor> frames; // N+1 tensors [H,W,C], de-normalized
    std::vector<Tensor> fields; // N tensors [H,W,2]
    double dt = 0.1;
    int tile_h = 0;
    int tile_w = 0;
    std::vector<NormRange> tile_ranges; // row-major tile order
};

/// Tiles the pair with patch_h x patch_w windows. Extents that are not
/// multiples of the patch size are reflect-padded and the output cropped
/// back.
ImageInference infer_image(const ImagePair& pair, const ModelBundle& bundle, int patch_h, int patch_w);

/// Per-step advection field file: magic "LADV", u32 version, u32 N, H, W,
/// then little-endian float32 payload, step-major, row-major, components
/// interleaved (wx, wy).
void write_field_bin(const std::string& path, const std::vector<Tensor>& fields);
std::vector<Tensor> read_field_bin(const std::string& path);

struct ExportOptions {
    int quiver_stride = 8;     // every k-th grid point in the quiver CSV
    int streamline_grid = 8;   // seeds per axis per tile
};

/// Writes frame_###.png (clipped to [0,1]), field_###.bin and field_###.csv
/// per step, streamlines.csv, and metrics.json with endpoint errors.
void export_artifacts(const ImageInference& result, const ImagePair& pair, const std::string& out_dir,
                      const ExportOptions& options = {});

/// ||a - b||_2 / ||b||_2 over all pixels.
double relative_l2(const Tensor& a, const Tensor& b);

/// PSNR in dB for signals in [0,1]; `mask` (same extents, nonzero = include)
/// may be empty to use every pixel.
double psnr(const Tensor& a, const Tensor& b, const Tensor& mask = Tensor());

} // namespace latentdyn
