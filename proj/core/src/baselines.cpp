#include "latentdyn/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace latentdyn {

std::vector<double> prepare_marginal(const Tensor& image, double floor) {
    if (image.rank() != 3 || image.extent(2) != 1)
        throw shape_error("prepare_marginal: expected [H,W,1], got " + shape_str(image.shape()));
    std::vector<double> mu(image.data(), image.data() + image.size());
    double lo = *std::min_element(mu.begin(), mu.end());
    if (lo < 0.0)
        for (double& v : mu) v -= lo;
    for (double& v : mu) v = std::max(v, floor);
    double total = 0.0;
    for (double v : mu) total += v;
    if (!(total > 0.0) || !std::isfinite(total)) throw numeric_error("prepare_marginal: non-normalizable input");
    for (double& v : mu) v /= total;
    return mu;
}

namespace {

// Squared Euclidean distances between pixel centers of the corner-aligned
// grid on [0,1]^2.
std::vector<double> grid_cost(int h, int w) {
    const int n = h * w;
    std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            x[static_cast<std::size_t>(i * w + j)] = w > 1 ? static_cast<double>(j) / (w - 1) : 0.0;
            y[static_cast<std::size_t>(i * w + j)] = h > 1 ? static_cast<double>(i) / (h - 1) : 0.0;
        }
    std::vector<double> c(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double dx = x[static_cast<std::size_t>(i)] - x[static_cast<std::size_t>(k)];
            const double dy = y[static_cast<std::size_t>(i)] - y[static_cast<std::size_t>(k)];
            c[static_cast<std::size_t>(i) * n + k] = dx * dx + dy * dy;
        }
    return c;
}

double logsumexp(const double* vals, int n) {
    double m = vals[0];
    for (int i = 1; i < n; ++i) m = std::max(m, vals[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(vals[i] - m);
    return m + std::log(s);
}

} // namespace

TransportPlan sinkhorn(const std::vector<double>& mu1, const std::vector<double>& mu2, int h, int w,
                       const SinkhornOptions& options) {
    const int n = h * w;
    if (static_cast<int>(mu1.size()) != n || static_cast<int>(mu2.size()) != n)
        throw shape_error("sinkhorn: marginal size does not match grid");
    if (h > kMaxOtExtent || w > kMaxOtExtent)
        throw shape_error("sinkhorn: dense solver is capped at " + std::to_string(kMaxOtExtent) + "x" +
                          std::to_string(kMaxOtExtent) + " grids");
    for (double v : mu1)
        if (!(v > 0.0)) throw numeric_error("sinkhorn: mu1 must be strictly positive (floor first)");
    for (double v : mu2)
        if (!(v > 0.0)) throw numeric_error("sinkhorn: mu2 must be strictly positive (floor first)");

    const std::vector<double> cost = grid_cost(h, w);
    const double eps = options.epsilon;
    if (!(eps > 0.0)) throw shape_error("sinkhorn: epsilon must be positive");
    const bool log_domain = eps < 1e-2;

    TransportPlan out;
    out.n = n;
    out.h = h;
    out.w = w;
    out.mu1 = mu1;
    out.mu2 = mu2;

    // Potentials f, g with plan_ik = exp((f_i + g_k - c_ik) / eps). The
    // scaling path stores u = exp(f/eps), v = exp(g/eps) directly.
    std::vector<double> f(static_cast<std::size_t>(n), 0.0), g(static_cast<std::size_t>(n), 0.0);
    std::vector<double> u(static_cast<std::size_t>(n), 1.0), v(static_cast<std::size_t>(n), 1.0);
    std::vector<double> kernel;
    if (!log_domain) {
        kernel.resize(static_cast<std::size_t>(n) * n);
        for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = std::exp(-cost[i] / eps);
    }
    std::vector<double> scratch(static_cast<std::size_t>(n));

    std::vector<double> best_f, best_g, best_u, best_v;
    double best_violation = std::numeric_limits<double>::infinity();

    auto column_violation = [&]() {
        // After the row update the row marginals are exact; measure columns.
        double worst = 0.0;
        if (log_domain) {
            for (int k = 0; k < n; ++k) {
                for (int i = 0; i < n; ++i)
                    scratch[static_cast<std::size_t>(i)] =
                        (f[static_cast<std::size_t>(i)] + g[static_cast<std::size_t>(k)] -
                         cost[static_cast<std::size_t>(i) * n + k]) /
                        eps;
                const double colsum = std::exp(logsumexp(scratch.data(), n));
                worst = std::max(worst, std::abs(colsum - mu2[static_cast<std::size_t>(k)]));
            }
        } else {
            for (int k = 0; k < n; ++k) {
                double colsum = 0.0;
                for (int i = 0; i < n; ++i)
                    colsum += u[static_cast<std::size_t>(i)] * kernel[static_cast<std::size_t>(i) * n + k];
                colsum *= v[static_cast<std::size_t>(k)];
                worst = std::max(worst, std::abs(colsum - mu2[static_cast<std::size_t>(k)]));
            }
        }
        return worst;
    };

    auto dual_value = [&]() {
        // <f,mu1> + <g,mu2> - eps * sum(plan); block-coordinate ascent makes
        // this monotone non-decreasing, so its negative is the logged
        // regularized objective.
        double d = 0.0;
        for (int i = 0; i < n; ++i)
            d += f[static_cast<std::size_t>(i)] * mu1[static_cast<std::size_t>(i)] +
                 g[static_cast<std::size_t>(i)] * mu2[static_cast<std::size_t>(i)];
        double mass = 0.0;
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k)
                mass += std::exp((f[static_cast<std::size_t>(i)] + g[static_cast<std::size_t>(k)] -
                                  cost[static_cast<std::size_t>(i) * n + k]) /
                                 eps);
        return d - eps * mass;
    };

    int iter = 0;
    for (; iter < options.max_iter; ++iter) {
        if (log_domain) {
            for (int k = 0; k < n; ++k) {
                for (int i = 0; i < n; ++i)
                    scratch[static_cast<std::size_t>(i)] =
                        (f[static_cast<std::size_t>(i)] - cost[static_cast<std::size_t>(i) * n + k]) / eps;
                g[static_cast<std::size_t>(k)] =
                    eps * (std::log(mu2[static_cast<std::size_t>(k)]) - logsumexp(scratch.data(), n));
            }
            for (int i = 0; i < n; ++i) {
                const double* crow = cost.data() + static_cast<std::size_t>(i) * n;
                for (int k = 0; k < n; ++k)
                    scratch[static_cast<std::size_t>(k)] = (g[static_cast<std::size_t>(k)] - crow[k]) / eps;
                f[static_cast<std::size_t>(i)] =
                    eps * (std::log(mu1[static_cast<std::size_t>(i)]) - logsumexp(scratch.data(), n));
            }
        } else {
            for (int k = 0; k < n; ++k) {
                double s = 0.0;
                for (int i = 0; i < n; ++i)
                    s += u[static_cast<std::size_t>(i)] * kernel[static_cast<std::size_t>(i) * n + k];
                v[static_cast<std::size_t>(k)] = mu2[static_cast<std::size_t>(k)] / s;
            }
            for (int i = 0; i < n; ++i) {
                const double* krow = kernel.data() + static_cast<std::size_t>(i) * n;
                double s = 0.0;
                for (int k = 0; k < n; ++k) s += krow[k] * v[static_cast<std::size_t>(k)];
                u[static_cast<std::size_t>(i)] = mu1[static_cast<std::size_t>(i)] / s;
            }
            for (int i = 0; i < n; ++i) {
                f[static_cast<std::size_t>(i)] = eps * std::log(u[static_cast<std::size_t>(i)]);
                g[static_cast<std::size_t>(i)] = eps * std::log(v[static_cast<std::size_t>(i)]);
            }
        }

        const double violation = column_violation();
        if (options.log_trace) out.dual_trace.push_back(dual_value());
        if (violation < best_violation) {
            best_violation = violation;
            best_f = f;
            best_g = g;
            best_u = u;
            best_v = v;
        }
        if (violation <= options.tol) {
            out.converged = true;
            ++iter;
            break;
        }
    }
    out.iterations = iter;
    if (!best_f.empty()) {
        f = best_f;
        g = best_g;
        u = best_u;
        v = best_v;
    }
    out.marginal_violation = best_violation;

    out.plan.resize(static_cast<std::size_t>(n) * n);
    out.cost = 0.0;
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const std::size_t idx = static_cast<std::size_t>(i) * n + k;
            const double p = log_domain
                                 ? std::exp((f[static_cast<std::size_t>(i)] + g[static_cast<std::size_t>(k)] -
                                             cost[idx]) /
                                            eps)
                                 : u[static_cast<std::size_t>(i)] * kernel[idx] * v[static_cast<std::size_t>(k)];
            out.plan[idx] = p;
            out.cost += cost[idx] * p;
        }
    return out;
}

std::vector<Tensor> ot_interpolate(const ImagePair& pair, int n_steps, const SinkhornOptions& options) {
    if (pair.x0.rank() != 3 || pair.x0.extent(2) != 1)
        throw shape_error("ot_interpolate: single-channel images only");
    if (pair.x0.shape() != pair.x1.shape()) throw shape_error("ot_interpolate: endpoint shapes differ");
    if (n_steps < 1) throw shape_error("ot_interpolate: need at least one step");
    const int h = pair.x0.extent(0), w = pair.x0.extent(1);
    if (h > kMaxOtExtent || w > kMaxOtExtent)
        throw shape_error("ot_interpolate: dense OT is capped at " + std::to_string(kMaxOtExtent) + "x" +
                          std::to_string(kMaxOtExtent) + " images");

    const std::vector<double> mu1 = prepare_marginal(pair.x0, options.mass_floor);
    const std::vector<double> mu2 = prepare_marginal(pair.x1, options.mass_floor);
    // Display scale: distributions are splatted, then frames are brought back
    // to the source image's total intensity.
    double source_mass = 0.0;
    {
        double lo = pair.x0[0];
        for (long long i = 0; i < pair.x0.size(); ++i) lo = std::min(lo, pair.x0[i]);
        for (long long i = 0; i < pair.x0.size(); ++i)
            source_mass += std::max(pair.x0[i] - std::min(lo, 0.0), options.mass_floor);
    }

    const TransportPlan plan = sinkhorn(mu1, mu2, h, w, options);

    const int n = plan.n;
    std::vector<Tensor> frames;
    frames.reserve(static_cast<std::size_t>(n_steps) + 1);
    const double sx = w - 1, sy = h - 1;
    for (int j = 0; j <= n_steps; ++j) {
        const double s = static_cast<double>(j) / n_steps;
        Tensor frame({h, w, 1});
        double* fd = frame.data();
        for (int i = 0; i < n; ++i) {
            const double xi = (i % w) / sx, yi = (i / w) / sy;
            const double* prow = plan.plan.data() + static_cast<std::size_t>(i) * n;
            for (int k = 0; k < n; ++k) {
                const double mass = prow[k];
                if (mass == 0.0) continue;
                const double xk = (k % w) / sx, yk = (k / w) / sy;
                const double px = ((1.0 - s) * xi + s * xk) * sx;
                const double py = ((1.0 - s) * yi + s * yk) * sy;
                int x0 = std::min(static_cast<int>(px), w - 2);
                int y0 = std::min(static_cast<int>(py), h - 2);
                x0 = std::max(x0, 0);
                y0 = std::max(y0, 0);
                const double fx = px - x0, fy = py - y0;
                fd[(static_cast<long long>(y0) * w + x0)] += mass * (1.0 - fy) * (1.0 - fx);
                fd[(static_cast<long long>(y0) * w + x0 + 1)] += mass * (1.0 - fy) * fx;
                fd[(static_cast<long long>(y0 + 1) * w + x0)] += mass * fy * (1.0 - fx);
                fd[(static_cast<long long>(y0 + 1) * w + x0 + 1)] += mass * fy * fx;
            }
        }
        for (long long i = 0; i < frame.size(); ++i) fd[i] *= source_mass;
        frames.push_back(std::move(frame));
    }
    return frames;
}

DirectFitResult direct_pde_fit(const std::vector<PatchPair>& dataset, const UNetConfig& field_cfg,
                               int n_evolution, double dt, const LossWeights& weights, const AdamConfig& adam,
                               const TrainOptions& options, std::uint64_t init_seed) {
    DirectFitResult result;
    result.bundle = ModelBundle::identity(field_cfg, n_evolution, dt, init_seed);
    LossWeights w = weights;
    w.ae = 0.0; // identity codecs have nothing to autoencode
    result.train_log = train(result.bundle, dataset, w, adam, options);
    return result;
}

} // namespace latentdyn
