#pragma once

#include "wci/grid.hpp"
#include "wci/staircase.hpp"
#include "wci/tau_search.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace wci {

// ---------------------------------------------------------------------------
// Divergence inversion and rescaling

struct DivInverse {
    Mat v;                  // n x nodes, v = 0 on boundary nodes
    double residual = 0.0;  // max |div_h v - u|
    double grad_sup = 0.0;  // max |Du| by differences
    double time_ratio = 0.0;  // |v_t|_inf / |u_t|_inf, the measured constant C_n
};

/// Right inverse of the spatial divergence on a unit space-time grid (last axis is time).
/// u must vanish on boundary nodes and have zero trapezoid mean on every time slice.
DivInverse div_inverse(const GridSpec& g, const Vec& u, double mean_tol = 1e-10);

/// Largest |sum_x u| h^n over time slices relative to max(1, |u|_inf), and the slice where it occurs.
std::pair<double, int> worst_slice_mean(const GridSpec& g, const Vec& u);

/// (L f)(y) = l f((y - ybar) / l) sampled on target, zero outside the cube ybar + l [0, 1]^{n+1}.
/// f lives on a unit cube grid; values and the exact channel are interpolated multilinearly.
/// Throws std::out_of_range when the cube leaves the target domain.
GridField rescale(const GridField& f, const Vec& ybar, double l, const GridSpec& target);

// ---------------------------------------------------------------------------
// Subsolutions

struct Subsolution {
    GridField field;                 // u, v and the exact gradient channel
    std::vector<std::int32_t> cell;  // partition label per node, 0 is the base cell
    int cell_count = 1;
    std::vector<std::size_t> boundary_nodes;
    Vec boundary_u;                  // trace of the base u at boundary_nodes (m values per node)
    double a = 1.0;                  // time-derivative bound of the admissible class
    double eps_perturb = 0.0;

    const GridSpec& domain() const { return field.grid; }
    std::vector<NodeMask> partition() const;
    /// Boundary trace equal to the stored base trace bit for bit.
    bool traces_match() const;
};

/// Seed data for m = n = 1 on (0, 1) in space.
struct SubsolutionSeed {
    std::function<double(double)> u0, du0;
    std::function<double(double)> v0;
    std::function<double(double)> f0;
    std::function<double(double)> h, dh, d2h;  // g = h', Dg = h''
};

/// The demo seed: u0 = 1.25 x, v0 = 0.625 x^2, f0 = 0.4, h = psi(x) (x - 1/2) with psi = 1 on [0.4, 0.6].
SubsolutionSeed pm_demo_seed();

/// Perona-Malik provider with Delta^+ = (0.1, 0.9) and Delta^- = (1.1, 5).
SigmaSet pm_demo_sigma();

struct MakeSubsolutionResult {
    Subsolution sub;
    double eps_used = 0.0;
    int halvings = 0;
};

/// ubar = u0 + eps g t, vbar = v0 + f0 t + eps h t; eps is halved until [D ubar, vbar_t] lies in Sigma at every node.
MakeSubsolutionResult make_subsolution(const SigmaSet& provider, const GridSpec& domain, const SubsolutionSeed& seed,
                                       double eps_perturb, double a = 1.0, int max_halvings = 30);

/// Nodal trapezoid quadrature of sum_i |v^i_t - sigma^i(Du)|^2 over the domain, square-rooted.
double residual_l2(const Subsolution& sub, const FluxFunction& sigma);
/// Largest nodal |v_t - sigma(Du)|.
double residual_sup(const Subsolution& sub, const FluxFunction& sigma);
/// max |div_h v^i - u^i| over nodes.
double divergence_defect(const Subsolution& sub);
/// residual_l2 as the certified H^{-1} proxy; throws when the divergence defect exceeds tol_constant h (1 + |Du|).
double residual_hminus1_bound(const Subsolution& sub, const FluxFunction& sigma, double tol_constant = 10.0);

// ---------------------------------------------------------------------------
// Parameters

struct ParameterInputs {
    double a = 1.0;
    double ut_sup = 0.0;     // |u_t|_inf of the current subsolution
    double delta_tau = 0.0;  // tube radius
    double M = 1.0;
    double M_tilde = 1.0;
    double C_n = 1.0;
    double eps = 0.1;
    double rho = 0.05;
    double measure = 1.0;    // |Omega_T|
};

struct RefineParams {
    double eps = 0.0;
    double rho = 0.0;
    double eps_prime = 0.0;
    double s = 0.0;
    double tau = 0.0;
    double delta_tau = 0.0;
    double l_max = 0.0;
    double a = 0.0;

    double eps_prime_cap = 0.0;         // 0.9 min{1, rho, (a - |u_t|)/2, delta_tau / (3 (1 + C_n))}
    double eps_prime_sqrt_bound = 0.0;  // root of (1 + 3M + M~) x + C_n x^2 = eps / (16 sqrt|Omega|), squared
    double s_bound = 0.0;               // min{(a - |u_t|)/(4M), eps/(32 sqrt|Omega| C_n M), delta_tau/(6 C_n M)}
    std::vector<std::pair<std::string, bool>> checks;
    ParameterInputs inputs;  // echo, filled by refine_step
    bool ok() const;
};

RefineParams select_parameters(const ParameterInputs& in);

// ---------------------------------------------------------------------------
// Cubes

/// Node boxes of closed dyadic cubes inside mask with pairwise disjoint interiors, edge <= l_max,
/// added level by level until the uncovered part of the mask is at most delta |mask|.
std::vector<NodeBox> vitali_cover(const GridSpec& g, const NodeMask& mask, double delta, double l_max,
                                  int min_cells = 16);
/// Measure of the grid cells whose corners all lie in mask.
double mask_measure(const GridSpec& g, const NodeMask& mask);

struct Certificate {
    std::string name;
    double target = 0.0;
    double achieved = 0.0;
    bool pass = false;
    bool hard = false;  // hard certificates reject the update
};

struct CubeOptions {
    int nodes_per_period = 8;
    double band_nodes = 8.0;
    int zero_layers = 2;
    bool aligned_phase = true;
    int tube_segment_samples = 5;
    int tube_directions = 8;
    std::uint64_t seed = 7;
};

struct CubeUpdate {
    NodeBox box;
    Vec ybar;      // lower corner
    double l = 0.0;
    bool applied = false;
    std::string message;

    // Deltas on the box nodes (box-local order, axis 0 fastest).
    Mat du, dv, dgrad;
    std::vector<NodeMask> V;  // box-local corner masks

    int frequency = 0;
    double tau = 0.0;
    double delta_tau = 0.0;
    double corner_graph_distance = 0.0;
    double modulus = 0.0;        // m(l)
    double modulus_sigma = 0.0;  // alpha(m(l))
    double C_n = 0.0;
    double M_prime = 0.0;        // |phi_t|_inf on the unit cube over |s| + eps', measured
    double residual_sq = 0.0;    // integral of the squared residual over the cube
    double target_sq = 0.0;      // (eps / (2 sqrt|Omega|))^2 |Q|
    double max_distance = 0.0;   // dist to the projected shrunk segments
    double sup_change = 0.0;
    double ut_sup = 0.0;
    std::size_t sigma_failures = 0;
    std::vector<double> fractions;
    std::vector<Certificate> certificates;
};

/// Steps 1-5 for one cube of the domain grid. Throws PreconditionError when the box leaves one partition cell.
CubeUpdate cube_update(const Subsolution& sub, const NodeBox& box, const SigmaSet& provider,
                       const RefineParams& params, const CubeOptions& opt = {});

// ---------------------------------------------------------------------------
// Refinement

struct RefineOptions {
    double l_max = 0.25;
    int min_cube_cells = 16;
    double delta = -1.0;  // uncovered budget; default from M^2 delta |Omega| = eps^2 / 4
    double div_tol_constant = 10.0;
    CubeOptions cube;
};

struct RefineResult {
    bool success = false;
    bool vacuous = false;  // the input already certified, nothing was changed
    Subsolution output;    // the input itself on failure
    RefineParams params;
    std::vector<CubeUpdate> cubes;  // deltas released, certificates kept
    std::vector<int> rejected;      // indices into cubes

    double residual_before = 0.0;
    double residual_after = 0.0;
    double hminus1_bound = 0.0;
    double residual_sup_before = 0.0;  // M in the uncovered term
    double delta = 0.0;
    double covered_measure = 0.0;
    double uncovered_measure = 0.0;
    double audit_sum = 0.0;  // sum_Q residual_Q^2 + M^2 |uncovered|
    double sup_change = 0.0;
    double ut_sup = 0.0;
    double divergence_defect = 0.0;
    double seam_jump = 0.0;  // largest gradient jump between the one-sided values on shared cube faces
    std::vector<Certificate> certificates;
    std::string message;
};

RefineResult refine_step(const Subsolution& sub, double eps, double rho, const SigmaSet& provider,
                         const RefineOptions& opt = {});

struct ScheduleOptions {
    RefineOptions refine;
    bool adaptive_edge = true;  // try cube edges from the smallest upward, keep the first that certifies
    double l_min = 1.0 / 16.0;
    double l_max = 1.0;
};

struct ScheduleStep {
    double eps = 0.0;
    double rho = 0.0;
    double edge = 0.0;
    int attempts = 0;
    RefineResult result;
};

/// One refinement of base per (eps_k, rho_k).
std::vector<ScheduleStep> refine_schedule(const Subsolution& base, const std::vector<double>& eps,
                                          const std::vector<double>& rho, const SigmaSet& provider,
                                          const ScheduleOptions& opt = {});

/// Distance from a diagonal point to the flux graph {[A, sigma(A)]}.
double graph_distance(const FluxFunction& sigma, const DiagPoint& y);

}  // namespace wci
