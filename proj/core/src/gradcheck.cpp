#include "latentdyn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "latentdyn/rng.hpp"

namespace latentdyn {

GradCheckReport check_gradients(ModelBundle& bundle, const LossBuilder& build, int samples,
                                std::uint64_t seed, double step) {
    // Autodiff pass.
    std::vector<std::vector<double>> grads;
    {
        Tape tape;
        const ModelBundle watched = watch(tape, bundle);
        const Tensor loss = build(tape, watched);
        tape.backward(loss);
        for_each_param(watched, [&](const Tensor& t) { grads.push_back(tape.grad_or_zeros(t)); });
    }

    // Flat index space over all parameters.
    std::vector<Tensor*> params;
    for_each_param(bundle, [&](Tensor& t) { params.push_back(&t); });
    std::vector<long long> offsets{0};
    for (Tensor* t : params) offsets.push_back(offsets.back() + t->size());
    const long long total = offsets.back();

    std::vector<long long> picks;
    if (samples >= total) {
        for (long long i = 0; i < total; ++i) picks.push_back(i);
    } else {
        Rng rng(seed);
        std::vector<char> taken(static_cast<std::size_t>(total), 0);
        while (static_cast<int>(picks.size()) < samples) {
            const long long i = static_cast<long long>(rng.below(static_cast<std::uint64_t>(total)));
            if (!taken[static_cast<std::size_t>(i)]) {
                taken[static_cast<std::size_t>(i)] = 1;
                picks.push_back(i);
            }
        }
    }

    auto eval = [&]() {
        Tape tape;
        const ModelBundle watched = watch(tape, bundle);
        return build(tape, watched).item();
    };

    GradCheckReport report;
    double err_sum = 0.0;
    for (const long long flat : picks) {
        const std::size_t p =
            static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
        const long long i = flat - offsets[p];
        double& slot = (*params[p])[i];
        const double saved = slot;

        slot = saved + step;
        const double lp = eval();
        slot = saved - step;
        const double lm = eval();
        slot = saved;

        const double fd = (lp - lm) / (2.0 * step);
        const double ad = grads[p][static_cast<std::size_t>(i)];
        const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6});
        report.max_rel_err = std::max(report.max_rel_err, rel);
        err_sum += rel;
        ++report.checked;
    }
    if (report.checked > 0) report.mean_rel_err = err_sum / report.checked;
    return report;
}

} // namespace latentdyn
