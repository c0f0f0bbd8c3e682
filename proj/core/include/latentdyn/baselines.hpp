#pragma once

#include <vector>

#include "latentdyn/data.hpp"
#include "latentdyn/training.hpp"

namespace latentdyn {

/// Dense coupling over the pixel grid. Feasibility means row sums match mu1
/// and column sums match mu2 within tolerance; entries are nonnegative by
/// construction.
struct TransportPlan {
    int n = 0;                // support size (H*W)
    int h = 0, w = 0;         // grid extents
    std::vector<double> plan; // n x n, row-major (source i -> target k)
    std::vector<double> mu1, mu2;
    double cost = 0.0;        // <c, plan>
    double marginal_violation = 0.0;
    bool converged = false;
    int iterations = 0;
    std::vector<double> dual_trace; // per-iteration dual objective (when logged)
};

struct SinkhornOptions {
    double epsilon = 1e-3;
    double tol = 1e-6;       // max-norm marginal violation target
    int max_iter = 20000;
    double mass_floor = 1e-8;
    bool log_trace = false;
};

/// Floor-and-renormalize a nonnegative image into a strictly positive
/// probability vector. Negative values are shifted up first.
std::vector<double> prepare_marginal(const Tensor& image, double floor);

/// Entropic optimal transport between two distributions on the H x W pixel
/// grid in [0,1]^2 with squared-Euclidean ground cost. Alternating scaling
/// on the Gibbs kernel; switches to log-domain updates when epsilon < 1e-2.
/// Non-convergence returns the best iterate with `converged` false.
TransportPlan sinkhorn(const std::vector<double>& mu1, const std::vector<double>& mu2, int h, int w,
                       const SinkhornOptions& options = {});

/// Largest grid extent accepted by the dense solver (the plan is n^2).
constexpr int kMaxOtExtent = 64;

/// Displacement interpolation: N+1 frames where the plan mass of entry
/// (i -> k) is splatted bilinearly at (1-s) x_i + s x_k for s = j/N, then
/// rescaled by the source total mass. Frames are nonnegative and conserve
/// mass. Single-channel images only.
std::vector<Tensor> ot_interpolate(const ImagePair& pair, int n_steps, const SinkhornOptions& options = {});

struct DirectFitResult {
    ModelBundle bundle; // identity codecs, trained field extractor
    TrainResult train_log;
};

/// The image-space baseline: identity encoder/decoder, only the field
/// extractor is optimized. Reuses the training module verbatim with the
/// autoencoder weight forced to zero, so its loss trace is bit-identical to
/// the main trainer configured the same way.
DirectFitResult direct_pde_fit(const std::vector<PatchPair>& dataset, const UNetConfig& field_cfg,
                               int n_evolution, double dt, const LossWeights& weights, const AdamConfig& adam,
                               const TrainOptions& options, std::uint64_t init_seed);

} // namespace latentdyn
