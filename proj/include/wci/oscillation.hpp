#pragma once

#include "wci/grid.hpp"
#include "wci/tn_config.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace wci {

/// The requested transition strips do not fit the resolution.
struct ResolutionError : PreconditionError {
    using PreconditionError::PreconditionError;
};

using NodeMask = std::vector<std::uint8_t>;

/// Periodic piecewise-quadratic f with |alpha|^2 f'' = lambda, 0, lambda - 1, 0 on the four pieces of a period.
struct OscillationProfile {
    double lambda = 0.5;
    double alpha_norm = 1.0;
    double transition = 0.0;  // total fraction of a period taken by the two f'' = 0 strips
    int frequency = 1;
    double period = 1.0;
    std::vector<double> breaks;                 // 0 = b_0 < ... < b_4 = period
    std::vector<std::array<double, 3>> coeffs;  // f = c0 + c1 y + c2 y^2 with y = xi - b_k on piece k

    /// 0: lambda piece, 1 and 3: strips, 2: lambda - 1 piece.
    int piece(double xi) const;
    double f(double xi) const;
    double df(double xi) const;
    double d2f(double xi) const;
    double max_abs_f() const;
    double max_abs_df() const;
};

/// Throws ResolutionError when a strip would be narrower than min_width (in xi units).
OscillationProfile oscillation_profile(double lambda, double eps, int frequency, double alpha_norm,
                                       double transition = -1.0, double min_width = 0.0);

/// omega = [(alpha . Dh) p, (beta^i (x) alpha - alpha (x) beta^i) Dh] by central differences with the ghost layer.
GridField potential_field(const GhostedScalar& h, const AdmissibleRankOne& dir);

struct OscillationOptions {
    double transition = -1.0;     // default eps / 2
    int zero_layers = 3;          // cutoff vanishes on this many outer node layers
    double band_nodes = 2.0;      // minimum cutoff ramp width in node spacings
    // For s = 0 and alpha along one spatial axis: fit a whole number of periods across the box on that axis,
    // put the box faces at the centre of the lambda piece and drop the cutoff there. The potential then
    // vanishes on those faces only, not on the inner layers.
    bool aligned_phase = false;
    double mask_tol = -1.0;       // default eps / 4
    double slack_constant = 1.0;  // measure slack c (1/frequency + h)
    double divergence_constant = 10.0;
};

/// Per-application quantities needed by callers that accumulate several oscillations.
struct PatchStats {
    std::size_t nodes = 0;
    std::size_t plus = 0;   // nodes with cutoff 1 on the lambda piece
    std::size_t minus = 0;  // nodes with cutoff 1 on the lambda - 1 piece
    double lipschitz = 0.0; // of the exact gradient over neighbour pairs on one profile piece
    double hessian_sup = 0.0;
    double sup_norm = 0.0;
    int free_axis = -1;     // axis without cutoff under aligned_phase, -1 otherwise
};

/// Adds P[zeta f(alpha . x + s t)] supported in box to field (which must carry the exact channel).
/// label (per grid node, optional) receives +1 / -1 on cutoff-one nodes of the two main pieces and 0 elsewhere in box.
PatchStats apply_oscillation(GridField& field, const NodeBox& box, const AdmissibleRankOne& C, double lambda,
                             double eps, int frequency, const OscillationOptions& opt = {},
                             std::vector<std::int8_t>* label = nullptr);

struct OscillationReport {
    // (a)
    bool supports_inside = false;
    // (b)
    double max_divergence = 0.0;
    double hessian_sup = 0.0;
    double divergence_bound = 0.0;
    double divergence_constant = 0.0;  // measured max_divergence / (h hessian_sup)
    bool divergence_ok = false;
    // (c)
    double slice_mean = 0.0;  // max_t |sum_x phi| h^n / (|phi|_inf |slice|)
    bool slice_mean_ok = false;
    // (d)
    double sup_norm = 0.0;
    double segment_distance = 0.0;
    double lipschitz = 0.0;
    bool sup_ok = false;
    bool inclusion_ok = false;
    // (e)
    double fraction_plus = 0.0;
    double fraction_minus = 0.0;
    double target_plus = 0.0;
    double target_minus = 0.0;
    double slack = 0.0;
    bool measure_ok = false;

    bool success = false;
    std::string message;
};

struct OscillationResult {
    GridField omega;
    NodeMask plus;   // G'
    NodeMask minus;  // G''
    OscillationProfile profile;
    OscillationReport report;
};

OscillationResult build_oscillation(const AdmissibleRankOne& C, double lambda, const GridSpec& cube, double eps,
                                    int frequency, const OscillationOptions& opt = {});

/// Frobenius distance from G to the segment [a C, b C].
double segment_distance(const Mat& G, const Mat& C, double a, double b);

/// Largest |sum_x phi^r(x, t)| h^n over time slices, relative to |phi|_inf times the slice measure.
double slice_mean_audit(const GridField& f);

}  // namespace wci
