#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "latentdyn/data.hpp"
#include "latentdyn/networks.hpp"

namespace latentdyn {

/// Weights of the combined objective
///   L = L_dynamics + ae*L_AE + magnitude*L_magnitude + smooth*L_smooth.
struct LossWeights {
    double ae = 1.0;
    double magnitude = 0.01;
    double smooth = 0.01;
};

/// Unweighted per-term values of one evaluation. `total` carries the
/// weights. Terms skipped because their weight is zero report 0 here.
struct LossBreakdown {
    double total = 0.0;
    double dynamics = 0.0;
    double ae = 0.0;
    double magnitude = 0.0;
    double smooth = 0.0;
};

/// Every loss uses the same reduction: sum over pixels, channels and steps,
/// mean over the batch. That keeps the weights transferable across batch
/// sizes.

/// | psi(P(phi(x0); eta(x0))) - x1 |^2.
Tensor loss_dynamics(Tape& tape, const ModelBundle& watched, const Tensor& x0, const Tensor& x1);

/// | x0 - psi(z0) |^2 + | zN - phi(x1) |^2 with zN the rolled-out terminal
/// latent, so the gradient reaches theta3 through the second term as well.
Tensor loss_autoencoder(Tape& tape, const ModelBundle& watched, const Tensor& x0, const Tensor& x1);

/// (sum_t |W_t|^2, sum_{t>=1} |W_t - W_{t-1}|^2); the smooth term is zero
/// when the sequence has a single field.
std::pair<Tensor, Tensor> loss_field_regularizers(Tape& tape, const FieldSequence& fields);

struct TotalLossOptions {
    /// Clamp eta to zero fields: the rollout becomes the identity and theta3
    /// receives no gradient (ablation mode).
    bool zero_fields = false;
    /// When true (default), a term whose weight is exactly zero is never
    /// built. Training with a zero weight is then bit-identical to training
    /// without the term.
    bool skip_zero_weight_terms = true;
};

/// Weighted combination over a shared forward graph (encoder, field
/// extractor and rollout are evaluated once). `breakdown`, when given,
/// receives the unweighted term values.
Tensor total_loss(Tape& tape, const ModelBundle& watched, const Tensor& x0, const Tensor& x1,
                  const LossWeights& weights, LossBreakdown* breakdown = nullptr,
                  const TotalLossOptions& options = {});

struct AdamConfig {
    double alpha0 = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double gamma = 1.0;          // exponential decay factor
    long long decay_interval = 10000;
};

/// alpha0 * gamma^floor(iter / decay_interval).
double effective_lr(const AdamConfig& cfg, long long iter);

/// First/second moment accumulators, one pair per parameter tensor in
/// declaration order.
struct AdamState {
    long long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState init(const ModelBundle& bundle);
};

/// One bias-corrected update with the given rate; `grads` must align with
/// declaration order.
void adam_update(AdamState& state, const AdamConfig& cfg, ModelBundle& bundle,
                 const std::vector<std::vector<double>>& grads, double lr);

struct TrainOptions {
    long long iterations = 30000;
    int batch_size = 16;
    std::uint64_t seed = 1;
    long long log_every = 100;
    bool zero_fields = false;
    bool skip_zero_weight_terms = true;
};

struct MetricsRow {
    long long iter = 0;
    LossBreakdown loss;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<MetricsRow> log;
};

/// Minibatch Adam over the dataset: epochs are seeded shuffles without
/// replacement (a trailing partial batch is dropped and reshuffled into the
/// next epoch). A non-finite loss aborts with a diagnostic dump via
/// numeric_error. A metrics row is emitted every `log_every` iterations and
/// at the final iteration.
TrainResult train(ModelBundle& bundle, const std::vector<PatchPair>& dataset, const LossWeights& weights,
                  const AdamConfig& adam, const TrainOptions& options);

/// CSV with header iter,loss_total,loss_dyn,loss_ae,loss_mag,loss_smooth,lr.
void write_metrics_csv(const std::vector<MetricsRow>& log, const std::string& path);
std::string metrics_csv_text(const std::vector<MetricsRow>& log);

} // namespace latentdyn
