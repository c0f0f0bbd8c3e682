#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "latentdyn/baselines.hpp"
#include "lp_oracle.hpp"
#include "test_util.hpp"

using namespace latentdyn;
using namespace latentdyn::testutil;

namespace {

UNetConfig tiny_field_cfg(int n_steps) {
    UNetConfig cfg;
    cfg.in_channels = 1;
    cfg.input_channels = 4;
    cfg.down = {4, 4, 4};
    cfg.bottleneck = 4;
    cfg.up = {4, 4, 4};
    cfg.output_channels = 4;
    cfg.out_channels = 2 * n_steps;
    cfg.kernel = 5;
    return cfg;
}

Tensor blob(int n, double cx, double cy, double sigma) {
    Tensor t({n, n, 1});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double x = static_cast<double>(j) / (n - 1) - cx;
            const double y = static_cast<double>(i) / (n - 1) - cy;
            t.at({i, j, 0}) = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
        }
    return t;
}

double frame_mass(const Tensor& f) {
    double m = 0.0;
    for (long long i = 0; i < f.size(); ++i) m += f[i];
    return m;
}

} // namespace

TEST_CASE("lp oracle solves hand instances") {
    // 2 sources, 2 sinks; optimum ships on the cheap diagonal.
    const std::vector<double> supply{0.6, 0.4}, demand{0.5, 0.5};
    const std::vector<double> cost{0.0, 1.0, 1.0, 0.0};
    const auto r = oracle::lp_transport(supply, demand, cost);
    CHECK(r.cost == doctest::Approx(0.1)); // forced 0.1 across
    CHECK(r.plan[0] == doctest::Approx(0.5));
    CHECK(r.plan[1] == doctest::Approx(0.1));
    CHECK(r.plan[3] == doctest::Approx(0.4));
}

TEST_CASE("lp oracle reproduces the 1d monotone coupling") {
    // On a line with squared cost the optimal coupling is monotone, which can
    // be built directly; transportation simplex must match its cost.
    Rng rng(4);
    const int n = 8;
    std::vector<double> supply(n), demand(n);
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        supply[static_cast<std::size_t>(i)] = rng.uniform(0.1, 1.0);
        demand[static_cast<std::size_t>(i)] = rng.uniform(0.1, 1.0);
        s1 += supply[static_cast<std::size_t>(i)];
        s2 += demand[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < n; ++i) {
        supply[static_cast<std::size_t>(i)] /= s1;
        demand[static_cast<std::size_t>(i)] /= s2;
    }
    std::vector<double> cost(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double d = (i - j) / static_cast<double>(n - 1);
            cost[static_cast<std::size_t>(i) * n + j] = d * d;
        }

    // Monotone coupling by greedy mass matching.
    double monotone_cost = 0.0;
    {
        std::vector<double> s = supply, d = demand;
        int i = 0, j = 0;
        while (i < n && j < n) {
            const double q = std::min(s[static_cast<std::size_t>(i)], d[static_cast<std::size_t>(j)]);
            monotone_cost += q * cost[static_cast<std::size_t>(i) * n + j];
            s[static_cast<std::size_t>(i)] -= q;
            d[static_cast<std::size_t>(j)] -= q;
            if (s[static_cast<std::size_t>(i)] <= 1e-15) ++i;
            if (d[static_cast<std::size_t>(j)] <= 1e-15) ++j;
        }
    }
    const auto r = oracle::lp_transport(supply, demand, cost);
    CHECK(r.cost == doctest::Approx(monotone_cost).epsilon(1e-9));
}

TEST_CASE("sinkhorn with identical marginals is near-diagonal and near-free") {
    const Tensor img = blob(8, 0.5, 0.5, 0.25);
    const std::vector<double> mu = prepare_marginal(img, 1e-8);
    SinkhornOptions opts;
    opts.epsilon = 1e-3;
    const TransportPlan plan = sinkhorn(mu, mu, 8, 8, opts);
    CHECK(plan.converged);
    CHECK(plan.cost < 1e-3);
    double diag = 0.0;
    for (int i = 0; i < plan.n; ++i) diag += plan.plan[static_cast<std::size_t>(i) * plan.n + i];
    CHECK(diag > 0.95);
}

TEST_CASE("sinkhorn two-point case concentrates mass at the far cell") {
    // 1 x 2 grid: delta at pixel 0 vs delta at pixel 1, softened by the floor.
    const double delta = 1e-6;
    const std::vector<double> mu1{1.0 - delta, delta}, mu2{delta, 1.0 - delta};
    SinkhornOptions opts;
    opts.epsilon = 1e-3;
    const TransportPlan plan = sinkhorn(mu1, mu2, 1, 2, opts);
    CHECK(plan.cost == doctest::Approx(1.0).epsilon(1e-2)); // squared distance 1
    CHECK(plan.plan[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("sinkhorn matches the exact LP within 2% and satisfies the marginals") {
    const Tensor a = make_synthetic(SyntheticKind::translation, 16, 16, 4, 0.1, 1).x0;
    const Tensor b = make_synthetic(SyntheticKind::rotation, 16, 16, 4, 0.1, 102).x0;
    const std::vector<double> mu1 = prepare_marginal(a, 1e-8);
    const std::vector<double> mu2 = prepare_marginal(b, 1e-8);
    SinkhornOptions opts;
    opts.epsilon = 1e-3;
    opts.log_trace = true;
    const TransportPlan plan = sinkhorn(mu1, mu2, 16, 16, opts);
    CHECK(plan.converged);
    CHECK(plan.marginal_violation <= 1e-6);

    double worst_row = 0.0, worst_col = 0.0;
    for (int i = 0; i < plan.n; ++i) {
        double rs = 0.0, cs = 0.0;
        for (int k = 0; k < plan.n; ++k) {
            rs += plan.plan[static_cast<std::size_t>(i) * plan.n + k];
            cs += plan.plan[static_cast<std::size_t>(k) * plan.n + i];
        }
        worst_row = std::max(worst_row, std::abs(rs - mu1[static_cast<std::size_t>(i)]));
        worst_col = std::max(worst_col, std::abs(cs - mu2[static_cast<std::size_t>(i)]));
    }
    CHECK(worst_row <= 1e-6);
    CHECK(worst_col <= 1e-6);
    for (double p : plan.plan) CHECK(p >= 0.0);

    const auto lp = oracle::lp_transport(mu1, mu2, oracle::grid_squared_cost(16, 16));
    CHECK(std::abs(plan.cost - lp.cost) / lp.cost <= 0.02);

    // Block-coordinate ascent: the dual trace never decreases.
    for (std::size_t i = 1; i < plan.dual_trace.size(); ++i)
        CHECK(plan.dual_trace[i] >= plan.dual_trace[i - 1] - 1e-12);
}

TEST_CASE("sinkhorn validates inputs") {
    SinkhornOptions opts;
    CHECK_THROWS_AS(sinkhorn({0.5, 0.5}, {0.5, 0.5}, 1, 3, opts), shape_error);       // size mismatch
    CHECK_THROWS_AS(sinkhorn({1.0, 0.0}, {0.5, 0.5}, 1, 2, opts), numeric_error);     // not strictly positive
    Tensor bad({2, 2, 1});
    for (long long i = 0; i < bad.size(); ++i) bad[i] = 0.0;
    CHECK_THROWS_AS(sinkhorn(prepare_marginal(bad, 0.0), {0.5, 0.5}, 1, 2, opts), numeric_error);
}

TEST_CASE("displacement interpolation hits endpoints and conserves mass") {
    ImagePair pair;
    pair.x0 = make_synthetic(SyntheticKind::translation, 12, 12, 2, 0.1, 3).x0;
    pair.x1 = make_synthetic(SyntheticKind::translation, 12, 12, 2, 0.1, 33).x0;
    SinkhornOptions opts;
    opts.epsilon = 1e-3;
    const std::vector<Tensor> frames = ot_interpolate(pair, 5, opts);
    REQUIRE(frames.size() == 6);

    const double mass = frame_mass(frames.front());
    for (const Tensor& f : frames) {
        CHECK(std::abs(frame_mass(f) / mass - 1.0) <= 1e-6);
        for (long long i = 0; i < f.size(); ++i) CHECK(f[i] >= 0.0);
    }

    const std::vector<double> mu1 = prepare_marginal(pair.x0, opts.mass_floor);
    const std::vector<double> mu2 = prepare_marginal(pair.x1, opts.mass_floor);
    double tv0 = 0.0, tv1 = 0.0;
    for (int i = 0; i < 144; ++i) {
        tv0 += std::abs(frames.front()[i] / mass - mu1[static_cast<std::size_t>(i)]);
        tv1 += std::abs(frames.back()[i] / mass - mu2[static_cast<std::size_t>(i)]);
    }
    CHECK(0.5 * tv0 <= 1e-3);
    CHECK(0.5 * tv1 <= 1e-3);
}

TEST_CASE("translated blob interpolates along the segment") {
    const int n = 16;
    ImagePair pair;
    pair.x0 = blob(n, 0.3, 0.5, 0.1);
    pair.x1 = blob(n, 0.7, 0.5, 0.1);
    SinkhornOptions opts;
    opts.epsilon = 1e-3;
    const std::vector<Tensor> frames = ot_interpolate(pair, 2, opts);

    auto centroid_x = [&](const Tensor& f) {
        double m = 0.0, s = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                m += f.at({i, j, 0});
                s += f.at({i, j, 0}) * j / (n - 1.0);
            }
        return s / m;
    };
    const double c0 = centroid_x(frames[0]), c1 = centroid_x(frames[2]), cm = centroid_x(frames[1]);
    CHECK(std::abs(cm - 0.5 * (c0 + c1)) <= 1.0 / (n - 1)); // within one pixel
}

TEST_CASE("oversized images are refused by the dense solver") {
    ImagePair pair;
    pair.x0 = Tensor({128, 128, 1});
    pair.x1 = Tensor({128, 128, 1});
    CHECK_THROWS_AS(ot_interpolate(pair, 4, SinkhornOptions{}), shape_error);
}

TEST_CASE("direct fit reduces to the shared trainer and stays near zero fields on static pairs") {
    const Tensor img = make_synthetic(SyntheticKind::translation, 16, 16, 2, 0.1, 8).x0;
    ImagePair pair;
    pair.x0 = img;
    pair.x1 = img.clone(); // identical endpoints
    const auto dataset = scan_patches(pair, 16, 16, 1, 1);
    REQUIRE(dataset.size() == 1);

    AdamConfig adam;
    adam.alpha0 = 1e-3;
    TrainOptions opts;
    opts.iterations = 120;
    opts.batch_size = 1;
    opts.seed = 9;
    opts.log_every = 1;
    const LossWeights weights{1.0, 0.01, 0.01};

    const DirectFitResult fit =
        direct_pde_fit(dataset, tiny_field_cfg(2), 2, 0.1, weights, adam, opts, 31);

    // Bit-identical to the main trainer configured with identity codecs and
    // the autoencoder weight off (same seed, same code path).
    ModelBundle manual = ModelBundle::identity(tiny_field_cfg(2), 2, 0.1, 31);
    LossWeights w0 = weights;
    w0.ae = 0.0;
    const TrainResult again = train(manual, dataset, w0, adam, opts);
    CHECK(metrics_csv_text(fit.train_log.log) == metrics_csv_text(again.log));

    // Identical endpoints: zero fields minimize, trained fields stay small.
    Tape tape;
    Tensor batch({1, 16, 16, 1}, std::vector<double>(dataset[0].x0.data(),
                                                     dataset[0].x0.data() + dataset[0].x0.size()));
    const FieldSequence fields = extract_fields(tape, fit.bundle, batch);
    double mean_mag = 0.0;
    long long count = 0;
    for (const Tensor& f : fields.fields)
        for (long long i = 0; i < f.size(); i += 2) {
            mean_mag += std::hypot(f[i], f[i + 1]);
            ++count;
        }
    mean_mag /= static_cast<double>(count);
    CHECK(mean_mag < 0.05);
}

TEST_CASE("direct-fit objective equals total_loss with identity codecs and no AE term") {
    const Tensor img0 = make_synthetic(SyntheticKind::translation, 16, 16, 2, 0.1, 12).x0;
    const Tensor img1 = make_synthetic(SyntheticKind::translation, 16, 16, 2, 0.1, 13).x0;
    ImagePair pair;
    pair.x0 = img0;
    pair.x1 = img1;
    const auto dataset = scan_patches(pair, 16, 16, 1, 1);
    ModelBundle b = ModelBundle::identity(tiny_field_cfg(2), 2, 0.1, 77);

    Tensor x0({1, 16, 16, 1}, std::vector<double>(dataset[0].x0.data(), dataset[0].x0.data() + 256));
    Tensor x1({1, 16, 16, 1}, std::vector<double>(dataset[0].x1.data(), dataset[0].x1.data() + 256));

    Tape tape;
    const ModelBundle w = watch(tape, b);
    LossBreakdown bd;
    const Tensor total = total_loss(tape, w, x0, x1, LossWeights{0.0, 0.01, 0.01}, &bd);

    // Hand-composed objective: |rollout(x0) - x1|^2 + regularizers.
    Tape t2;
    const ModelBundle w2 = watch(t2, b);
    const FieldSequence fields = extract_fields(t2, w2, x0);
    const Tensor zN = advect_rollout(t2, x0, fields).back();
    const double dyn = t2.sum_squares(t2.sub(zN, x1)).item();
    const auto [mag, smooth] = loss_field_regularizers(t2, fields);
    const double want = dyn + 0.01 * mag.item() + 0.01 * smooth.item();
    CHECK(total.item() == doctest::Approx(want).epsilon(1e-12));
}
