#pragma once

#include <vector>

namespace latentdyn::oracle {

struct LpTransportResult {
    std::vector<double> plan; // n x m row-major
    double cost = 0.0;
    int pivots = 0;
};

/// Exact solver for the balanced transportation problem
///   min sum c_ij x_ij  s.t.  sum_j x_ij = supply_i, sum_i x_ij = demand_j,
/// via the transportation simplex (northwest-corner start, MODI potentials,
/// Bland's rule for anti-cycling). Independent of the Sinkhorn path: used as
/// the linear-programming oracle in tests and verification probes.
LpTransportResult lp_transport(const std::vector<double>& supply, const std::vector<double>& demand,
                               const std::vector<double>& cost);

/// Squared-Euclidean ground cost on the corner-aligned H x W grid in [0,1]^2
/// (matches the cost used by the Sinkhorn baseline).
std::vector<double> grid_squared_cost(int h, int w);

} // namespace latentdyn::oracle
