#include "latentdyn/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "latentdyn/kvconfig.hpp"
#include "latentdyn/rng.hpp"

namespace latentdyn {

namespace {

double batch_inv(const Tensor& x0) { return 1.0 / x0.extent(0); }

// Shared forward pieces used by the individual losses and by total_loss.
struct Forward {
    Tensor z0;
    FieldSequence fields;
    Tensor zN;
    bool has_fields = false;
};

Forward run_forward(Tape& tape, const ModelBundle& b, const Tensor& x0, bool zero_fields) {
    Forward f;
    f.z0 = encode(tape, b, x0);
    if (zero_fields) {
        // The zero-field rollout is the exact identity; skip it entirely.
        f.zN = f.z0;
        return f;
    }
    f.fields = extract_fields(tape, b, x0);
    f.zN = advect_rollout(tape, f.z0, f.fields).back();
    f.has_fields = true;
    return f;
}

} // namespace

Tensor loss_dynamics(Tape& tape, const ModelBundle& watched, const Tensor& x0, const Tensor& x1) {
    if (x0.shape() != x1.shape())
        throw shape_error("loss_dynamics: endpoint shapes differ " + shape_str(x0.shape()) + " vs " +
                          shape_str(x1.shape()));
    const Forward f = run_forward(tape, watched, x0, false);
    const Tensor pred = decode(tape, watched, f.zN);
    return tape.scale(tape.sum_squares(tape.sub(pred, x1)), batch_inv(x0));
}

Tensor loss_autoencoder(Tape& tape, const ModelBundle& watched, const Tensor& x0, const Tensor& x1) {
    if (x0.shape() != x1.shape())
        throw shape_error("loss_autoencoder: endpoint shapes differ");
    const Forward f = run_forward(tape, watched, x0, false);
    const Tensor recon0 = decode(tape, watched, f.z0);
    const Tensor z1_enc = encode(tape, watched, x1);
    const Tensor term1 = tape.sum_squares(tape.sub(x0, recon0));
    const Tensor term2 = tape.sum_squares(tape.sub(f.zN, z1_enc));
    return tape.scale(tape.add(term1, term2), batch_inv(x0));
}

std::pair<Tensor, Tensor> loss_field_regularizers(Tape& tape, const FieldSequence& fields) {
    if (fields.steps() < 1) throw shape_error("loss_field_regularizers: empty field sequence");
    const double inv_b = 1.0 / fields.fields.front().extent(0);
    Tensor mag = tape.sum_squares(fields.fields.front());
    for (int s = 1; s < fields.steps(); ++s)
        mag = tape.add(mag, tape.sum_squares(fields.fields[static_cast<std::size_t>(s)]));
    mag = tape.scale(mag, inv_b);

    Tensor smooth = Tensor::scalar(0.0);
    if (fields.steps() > 1) {
        smooth = tape.sum_squares(tape.sub(fields.fields[1], fields.fields[0]));
        for (int s = 2; s < fields.steps(); ++s)
            smooth = tape.add(smooth, tape.sum_squares(tape.sub(fields.fields[static_cast<std::size_t>(s)],
                                                                 fields.fields[static_cast<std::size_t>(s - 1)])));
        smooth = tape.scale(smooth, inv_b);
    }
    return {mag, smooth};
}

Tensor total_loss(Tape& tape, const ModelBundle& watched, const Tensor& x0, const Tensor& x1,
                  const LossWeights& weights, LossBreakdown* breakdown, const TotalLossOptions& options) {
    if (x0.shape() != x1.shape())
        throw shape_error("total_loss: endpoint shapes differ " + shape_str(x0.shape()) + " vs " +
                          shape_str(x1.shape()));
    if (weights.ae < 0 || weights.magnitude < 0 || weights.smooth < 0)
        throw shape_error("total_loss: weights must be nonnegative");

    const double inv_b = batch_inv(x0);
    const Forward f = run_forward(tape, watched, x0, options.zero_fields);

    const Tensor pred1 = decode(tape, watched, f.zN);
    Tensor total = tape.scale(tape.sum_squares(tape.sub(pred1, x1)), inv_b);
    LossBreakdown bd;
    bd.dynamics = total.item();

    const auto active = [&](double w) { return !options.skip_zero_weight_terms || w != 0.0; };

    if (active(weights.ae)) {
        const Tensor recon0 = decode(tape, watched, f.z0);
        const Tensor z1_enc = encode(tape, watched, x1);
        const Tensor ae = tape.scale(
            tape.add(tape.sum_squares(tape.sub(x0, recon0)), tape.sum_squares(tape.sub(f.zN, z1_enc))), inv_b);
        bd.ae = ae.item();
        total = tape.add(total, tape.scale(ae, weights.ae));
    }

    if (f.has_fields && (active(weights.magnitude) || active(weights.smooth))) {
        const auto [mag, smooth] = loss_field_regularizers(tape, f.fields);
        bd.magnitude = mag.item();
        bd.smooth = smooth.item();
        if (active(weights.magnitude)) total = tape.add(total, tape.scale(mag, weights.magnitude));
        if (active(weights.smooth) && smooth.attached()) total = tape.add(total, tape.scale(smooth, weights.smooth));
    }

    bd.total = total.item();
    if (breakdown) *breakdown = bd;
    return total;
}

double effective_lr(const AdamConfig& cfg, long long iter) {
    return cfg.alpha0 * std::pow(cfg.gamma, static_cast<double>(iter / cfg.decay_interval));
}

AdamState AdamState::init(const ModelBundle& bundle) {
    AdamState s;
    for_each_param(bundle, [&](const Tensor& t) {
        s.m.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
        s.v.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
    });
    return s;
}

void adam_update(AdamState& state, const AdamConfig& cfg, ModelBundle& bundle,
                 const std::vector<std::vector<double>>& grads, double lr) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::size_t k = 0;
    for_each_param(bundle, [&](Tensor& t) {
        if (k >= grads.size()) throw shape_error("adam_update: gradient list too short");
        const std::vector<double>& g = grads[k];
        std::vector<double>& m = state.m[k];
        std::vector<double>& v = state.v[k];
        double* p = t.data();
        const std::size_t n = static_cast<std::size_t>(t.size());
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        ++k;
    });
    if (k != grads.size()) throw shape_error("adam_update: gradient list too long");
}

TrainResult train(ModelBundle& bundle, const std::vector<PatchPair>& dataset, const LossWeights& weights,
                  const AdamConfig& adam, const TrainOptions& options) {
    if (dataset.empty()) throw shape_error("train: dataset is empty");
    const Tensor& probe = dataset.front().x0;
    validate_shapes(bundle, probe.extent(0), probe.extent(1), probe.extent(2));

    const int m = static_cast<int>(dataset.size());
    const int batch = std::min<int>(options.batch_size, m);
    if (batch < 1) throw shape_error("train: batch size must be >= 1");

    Rng rng(options.seed);
    std::vector<int> order(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    int cursor = 0;

    AdamState state = AdamState::init(bundle);
    TotalLossOptions loss_opts;
    loss_opts.zero_fields = options.zero_fields;
    loss_opts.skip_zero_weight_terms = options.skip_zero_weight_terms;

    TrainResult result;
    Tape tape;
    std::vector<int> batch_idx(static_cast<std::size_t>(batch));
    for (long long iter = 0; iter < options.iterations; ++iter) {
        if (cursor + batch > m) {
            rng.shuffle(order);
            cursor = 0;
        }
        for (int i = 0; i < batch; ++i) batch_idx[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(cursor + i)];
        cursor += batch;

        const Tensor x0 = stack_patches(dataset, batch_idx, false);
        const Tensor x1 = stack_patches(dataset, batch_idx, true);

        tape.reset();
        const ModelBundle watched = watch(tape, bundle);
        LossBreakdown bd;
        const Tensor loss = total_loss(tape, watched, x0, x1, weights, &bd, loss_opts);
        if (!loss.attached())
            throw shape_error("train: loss does not depend on any parameter "
                              "(identity codecs with clamped fields leave nothing to optimize)");

        if (!std::isfinite(bd.total)) {
            std::cerr << "train: non-finite loss at iteration " << iter << "\n"
                      << "  dynamics=" << bd.dynamics << " ae=" << bd.ae << " magnitude=" << bd.magnitude
                      << " smooth=" << bd.smooth << "\n";
            long long pi = 0;
            for_each_param(bundle, [&](const Tensor& t) {
                if (!t.all_finite()) std::cerr << "  parameter " << pi << " contains non-finite values\n";
                ++pi;
            });
            throw numeric_error("non-finite loss at iteration " + std::to_string(iter));
        }

        tape.backward(loss);
        std::vector<std::vector<double>> grads;
        for_each_param(watched, [&](const Tensor& t) { grads.push_back(tape.grad_or_zeros(t)); });

        const double lr = effective_lr(adam, iter);
        adam_update(state, adam, bundle, grads, lr);

        if (iter % options.log_every == 0 || iter + 1 == options.iterations)
            result.log.push_back({iter, bd, lr});
    }
    return result;
}

std::string metrics_csv_text(const std::vector<MetricsRow>& log) {
    std::string out = "iter,loss_total,loss_dyn,loss_ae,loss_mag,loss_smooth,lr\n";
    for (const MetricsRow& r : log) {
        out += std::to_string(r.iter);
        for (double v : {r.loss.total, r.loss.dynamics, r.loss.ae, r.loss.magnitude, r.loss.smooth, r.lr}) {
            out += ',';
            out += format_double(v);
        }
        out += '\n';
    }
    return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write metrics: " + path);
    out << metrics_csv_text(log);
    if (!out) throw io_error("failed writing metrics: " + path);
}

} // namespace latentdyn
