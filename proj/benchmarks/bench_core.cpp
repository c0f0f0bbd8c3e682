#include <benchmark/benchmark.h>

#include "latentdyn/advection.hpp"
#include "latentdyn/baselines.hpp"
#include "latentdyn/networks.hpp"
#include "latentdyn/rng.hpp"

using namespace latentdyn;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (long long i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Tensor x = random_tensor({1, n, n, 16}, 1);
    const Tensor k = random_tensor({3, 3, 16, 16}, 2);
    const Tensor b = random_tensor({16}, 3);
    for (auto _ : state) {
        Tape tape;
        benchmark::DoNotOptimize(tape.conv2d(x, k, b));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long long>(n) * n * 9 * 16 * 16);
}
BENCHMARK(BM_Conv2dForward)->Arg(32)->Arg(64)->Arg(128);

void BM_Conv2dBackward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Tensor x = random_tensor({1, n, n, 16}, 1);
    const Tensor k = random_tensor({3, 3, 16, 16}, 2);
    const Tensor b = random_tensor({16}, 3);
    for (auto _ : state) {
        Tape tape;
        Tensor wx = tape.watch(x);
        Tensor wk = tape.watch(k);
        Tensor wb = tape.watch(b);
        tape.backward(tape.sum_squares(tape.conv2d(wx, wk, wb)));
        benchmark::DoNotOptimize(tape.grad_or_zeros(wk));
    }
}
BENCHMARK(BM_Conv2dBackward)->Arg(32)->Arg(64);

void BM_AdvectStep(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Tensor z = random_tensor({1, n, n, 1}, 4);
    const Tensor w = random_tensor({1, n, n, 2}, 5);
    for (auto _ : state) {
        Tape tape;
        benchmark::DoNotOptimize(advect_step(tape, z, w, 0.1));
    }
}
BENCHMARK(BM_AdvectStep)->Arg(64)->Arg(256);

void BM_RolloutBackward(benchmark::State& state) {
    const int n = 64, steps = 10;
    const Tensor z = random_tensor({1, n, n, 1}, 6);
    FieldSequence seq;
    seq.dt = 0.1;
    for (int s = 0; s < steps; ++s) seq.fields.push_back(random_tensor({1, n, n, 2}, 7 + s));
    for (auto _ : state) {
        Tape tape;
        FieldSequence watched;
        watched.dt = seq.dt;
        for (const Tensor& f : seq.fields) watched.fields.push_back(tape.watch(f));
        const auto states = advect_rollout(tape, z, watched);
        tape.backward(tape.sum_squares(states.back()));
        benchmark::DoNotOptimize(tape.grad_or_zeros(watched.fields[0]));
    }
}
BENCHMARK(BM_RolloutBackward);

void BM_EncoderForward(benchmark::State& state) {
    EncoderConfig enc;
    enc.hidden = {8, 16, 16, 8};
    UNetConfig dec;
    dec.input_channels = 8;
    dec.down = {8, 16, 32};
    dec.bottleneck = 64;
    dec.up = {32, 16, 8};
    dec.output_channels = 8;
    dec.out_channels = 1;
    UNetConfig field = dec;
    field.kernel = 5;
    field.out_channels = 20;
    const ModelBundle bundle = ModelBundle::create(enc, dec, field, 10, 0.1, 8);
    const Tensor x = random_tensor({1, 64, 64, 1}, 9);
    for (auto _ : state) {
        Tape tape;
        benchmark::DoNotOptimize(encode(tape, bundle, x));
    }
}
BENCHMARK(BM_EncoderForward);

void BM_Sinkhorn16(benchmark::State& state) {
    const Tensor a = make_synthetic(SyntheticKind::translation, 16, 16, 4, 0.1, 1).x0;
    const Tensor b = make_synthetic(SyntheticKind::rotation, 16, 16, 4, 0.1, 102).x0;
    const std::vector<double> mu1 = prepare_marginal(a, 1e-8);
    const std::vector<double> mu2 = prepare_marginal(b, 1e-8);
    SinkhornOptions opts;
    opts.epsilon = 0.05; // scaling path
    for (auto _ : state) {
        benchmark::DoNotOptimize(sinkhorn(mu1, mu2, 16, 16, opts));
    }
}
BENCHMARK(BM_Sinkhorn16);

} // namespace

BENCHMARK_MAIN();
