#pragma once

#include <array>
#include <vector>

#include "latentdyn/tensor.hpp"

namespace latentdyn {

/// One advecting field per step: N tensors of shape [B,H,W,2], components in
/// domain units per unit time (channel 0 = x, channel 1 = y). A field is
/// held constant over its own step of length dt.
struct FieldSequence {
    std::vector<Tensor> fields;
    double dt = 0.1;

    int steps() const { return static_cast<int>(fields.size()); }
};

/// Semi-Lagrangian update z(x, t+dt) = z(x - w(x,t) dt, t): back-trace the
/// grid by w*dt and bilinearly sample, clamping to the domain boundary
/// (constant extrapolation feeds inflow at the edges). Differentiable in
/// both z and w. A zero field is the exact identity.
Tensor advect_step(Tape& tape, const Tensor& z, const Tensor& w, double dt);

/// Composition of advect_step over all fields in order; returns the N+1
/// states [z0, ..., zN] with element 0 the untouched input.
std::vector<Tensor> advect_rollout(Tape& tape, const Tensor& z0, const FieldSequence& ws);

using Point = std::array<double, 2>; // (x, y) in [0,1]^2

struct Polyline {
    std::vector<Point> points;
};

/// Integrate dx/dt = w(x,t) from each seed over the whole field sequence
/// with explicit midpoint steps of size dt/4. Field lookups are bilinear in
/// space and linear in time between consecutive fields; trajectories stop at
/// the domain boundary. Consecutive duplicate points are dropped, so a seed
/// in a zero field yields a single stationary point.
std::vector<Polyline> streamlines(const FieldSequence& ws, const std::vector<Point>& seeds);

} // namespace latentdyn
