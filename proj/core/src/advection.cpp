#include "latentdyn/advection.hpp"

#include <algorithm>
#include <cmath>

namespace latentdyn {

Tensor advect_step(Tape& tape, const Tensor& z, const Tensor& w, double dt) {
    if (z.rank() != 4) throw shape_error("advect_step: state must be [B,H,W,C], got " + shape_str(z.shape()));
    if (w.rank() != 4 || w.extent(3) != 2)
        throw shape_error("advect_step: field must be [B,H,W,2], got " + shape_str(w.shape()));
    if (w.extent(0) != z.extent(0) || w.extent(1) != z.extent(1) || w.extent(2) != z.extent(2))
        throw shape_error("advect_step: field extents " + shape_str(w.shape()) +
                          " do not match state " + shape_str(z.shape()));

    const Tensor grid = domain_grid(z.extent(0), z.extent(1), z.extent(2));
    const Tensor coords = tape.sub(grid, tape.scale(w, dt));
    return tape.grid_sample(z, coords);
}

std::vector<Tensor> advect_rollout(Tape& tape, const Tensor& z0, const FieldSequence& ws) {
    if (ws.steps() < 1) throw shape_error("advect_rollout: need at least one field");
    std::vector<Tensor> states;
    states.reserve(static_cast<std::size_t>(ws.steps()) + 1);
    states.push_back(z0);
    for (const Tensor& w : ws.fields) states.push_back(advect_step(tape, states.back(), w, ws.dt));
    return states;
}

namespace {

// Bilinear lookup of one field component at a domain point, batch entry 0.
Point field_at(const Tensor& w, double x, double y) {
    const int H = w.extent(1), W = w.extent(2);
    const double px = std::clamp(x, 0.0, 1.0) * (W - 1);
    const double py = std::clamp(y, 0.0, 1.0) * (H - 1);
    const int x0 = std::min(static_cast<int>(px), std::max(W - 2, 0));
    const int y0 = std::min(static_cast<int>(py), std::max(H - 2, 0));
    const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double fx = px - x0, fy = py - y0;
    const double* d = w.data();
    auto at = [&](int i, int j, int c) { return d[((static_cast<long long>(i) * W) + j) * 2 + c]; };
    Point out;
    for (int c = 0; c < 2; ++c)
        out[static_cast<std::size_t>(c)] =
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0, c) + fx * at(y0, x1, c)) +
            fy * ((1.0 - fx) * at(y1, x0, c) + fx * at(y1, x1, c));
    return out;
}

// Time interpolation between consecutive fields; the last field extends to
// the end of the horizon.
Point field_at_time(const FieldSequence& ws, double x, double y, double t) {
    const int n = ws.steps();
    const double s = t / ws.dt;
    int k = static_cast<int>(s);
    if (k >= n - 1) return field_at(ws.fields[static_cast<std::size_t>(n - 1)], x, y);
    const double f = s - k;
    const Point a = field_at(ws.fields[static_cast<std::size_t>(k)], x, y);
    const Point b = field_at(ws.fields[static_cast<std::size_t>(k + 1)], x, y);
    return {(1.0 - f) * a[0] + f * b[0], (1.0 - f) * a[1] + f * b[1]};
}

bool on_boundary(const Point& p) {
    return p[0] <= 0.0 || p[0] >= 1.0 || p[1] <= 0.0 || p[1] >= 1.0;
}

} // namespace

std::vector<Polyline> streamlines(const FieldSequence& ws, const std::vector<Point>& seeds) {
    if (ws.steps() < 1) throw shape_error("streamlines: need at least one field");
    const double h = ws.dt / 4.0;
    const double total = ws.dt * ws.steps();

    std::vector<Polyline> out;
    out.reserve(seeds.size());
    for (const Point& seed : seeds) {
        if (seed[0] < 0.0 || seed[0] > 1.0 || seed[1] < 0.0 || seed[1] > 1.0)
            throw shape_error("streamlines: seed outside [0,1]^2");
        Polyline line;
        line.points.push_back(seed);
        Point p = seed;
        for (double t = 0.0; t < total - 1e-12 && !on_boundary(p); t += h) {
            const Point k1 = field_at_time(ws, p[0], p[1], t);
            const Point mid = {p[0] + 0.5 * h * k1[0], p[1] + 0.5 * h * k1[1]};
            const Point k2 = field_at_time(ws, std::clamp(mid[0], 0.0, 1.0), std::clamp(mid[1], 0.0, 1.0),
                                           t + 0.5 * h);
            Point q = {p[0] + h * k2[0], p[1] + h * k2[1]};
            q[0] = std::clamp(q[0], 0.0, 1.0);
            q[1] = std::clamp(q[1], 0.0, 1.0);
            if (q != line.points.back()) line.points.push_back(q);
            p = q;
        }
        out.push_back(std::move(line));
    }
    return out;
}

} // namespace latentdyn
