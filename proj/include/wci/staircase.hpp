#pragma once

#include "wci/oscillation.hpp"
#include "wci/tn_config.hpp"

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace wci {

struct StaircaseSchedule {
    int N = 0;
    int k = 0;
    double eps = 0.0;
    double eps_inner = 0.0;
    double mu = 0.0;
    std::vector<double> lambda;
    // The three inequalities, re-checked after selection.
    bool depth_ok = false;      // 1 - mu^{k+1} >= sqrt(1 - eps)
    bool amplitude_ok = false;  // (k+1)(N+1) eps' < eps
    bool measure_ok = false;    // (1 - eps')^{(k+2)N} >= sqrt(1 - eps)
};

StaircaseSchedule staircase_schedule(const std::vector<double>& kappa, double eps);

struct StaircaseOptions {
    bool collinear_reduction = true;  // single lamination between the extreme corners when all legs are parallel
    int min_cube = 16;                // smallest dyadic sub-cube edge in nodes
    int shrink_layers = 2;
    int min_nodes_per_period = 8;
    double near_miss_fraction = 0.05;  // per-corner slack as a fraction of nu_i
    double segment_tol = 1e-9;
    OscillationOptions oscillation;
};

/// One application of the oscillation step inside the nested construction.
struct StaircaseLevel {
    int round = 0;        // -1 for the initial split
    int corner = 0;       // corner gained on the + piece
    int anchor_from = 0;  // anchor value P_a before the step
    int anchor_to = 0;
    int frequency = 0;
    std::size_t anchor_nodes = 0;  // before the step
    std::size_t covered_nodes = 0;
    std::size_t cubes = 0;
    std::size_t gained = 0;      // nodes added to V_corner
    std::size_t new_anchor = 0;  // nodes carried to the next step
    double sup_norm = 0.0;
};

struct StaircaseResult {
    GridField omega;
    std::vector<NodeMask> V;
    std::vector<double> fractions;
    Vec nu;
    int segment = 0;
    double lambda = 0.0;
    StaircaseSchedule schedule;
    std::vector<StaircaseLevel> audit;
    std::vector<double> anchor_after_round;  // |anchor| / |G| after each completed round
    bool degenerate = false;
    bool collinear_path = false;
    bool unresolved = false;  // nesting stopped because the doubled frequency fell below resolution

    double sup_norm = 0.0;
    double max_distance = 0.0;  // max over nodes of dist(Y + grad omega, T)
    double lipschitz = 0.0;
    double slice_mean = 0.0;
    bool supports_inside = false;  // outer layers; only the face layer on free_axis
    int free_axis = -1;
    bool disjoint = false;
    bool sup_ok = false;
    bool inclusion_ok = false;
    bool measure_ok = false;  // fraction_i >= (1 - eps) nu_i for every i
    bool near_miss = false;   // measure bound missed by at most the near-miss slack
    bool success = false;
    std::string message;

    double combined_fraction() const;
};

/// Recover (j, lambda) with Y = (1 - lambda) X_j + lambda P_j; smallest j wins ties. Throws when Y is off the segments.
std::pair<int, double> recover_segment(const TNConfig& cfg, const Mat& Y, double tol = 1e-9);

StaircaseResult build_staircase(const TNConfig& cfg, const Mat& Y, const GridSpec& cube, double eps, int frequency,
                                const StaircaseOptions& opt = {});

/// Runs of consecutive node indices, as (start, length).
std::vector<std::pair<std::size_t, std::size_t>> mask_runs(const NodeMask& mask);
/// CSV "corner,start,length", one row per run.
void write_masks_rle(std::ostream& os, const std::vector<NodeMask>& masks);
std::vector<NodeMask> read_masks_rle(std::istream& is, std::size_t nodes);

}  // namespace wci
