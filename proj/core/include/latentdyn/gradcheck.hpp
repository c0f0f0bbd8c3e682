#pragma once

#include <cstdint>
#include <functional>

#include "latentdyn/networks.hpp"

namespace latentdyn {

/// Builds the scalar loss under test from a watched bundle. Called once for
/// the autodiff pass and twice per probed parameter for the central
/// differences, always on a fresh tape.
using LossBuilder = std::function<Tensor(Tape&, const ModelBundle&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    int checked = 0;
};

/// Compares reverse-mode gradients against central finite differences at
/// `samples` randomly chosen parameter entries (all entries when the model is
/// small enough). Relative error uses max(|fd|, |ad|, 1e-6) as denominator.
/// The probe only re-evaluates the loss value, so it is independent of the
/// backward pass it checks.
GradCheckReport check_gradients(ModelBundle& bundle, const LossBuilder& build, int samples,
                                std::uint64_t seed, double step = 1e-5);

} // namespace latentdyn
