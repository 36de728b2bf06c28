#pragma once

#include "wci/core_linalg.hpp"
#include "wci/tn_config.hpp"

#include <json.hpp>

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace wci {

struct TauLeg {
    Vec p;                  // m
    Vec alpha;              // n
    double s = 0.0;
    std::vector<Vec> beta;  // m vectors of length n
    double kappa = 2.0;
};

/// xi_j = rho + gamma_1 + ... + gamma_{j-1} + kappa_j gamma_j with gamma_j = [p_j (x) alpha_j, (s_j beta_j^i)].
struct TauNConfig {
    DiagPoint rho;
    std::vector<TauLeg> legs;
    std::vector<DiagPoint> xi;
    std::vector<DiagPoint> anchors;
    bool degenerate_time_scaling = false;

    int N() const { return static_cast<int>(legs.size()); }
    ProblemDims dims() const { return rho.dims(); }
    DiagPoint gamma(int j) const;
    /// Rebuild corners and anchors from rho and legs.
    void refresh();
};

TauNConfig make_tau(const DiagPoint& rho, std::vector<TauLeg> legs);

/// Distance from a diagonal point to the union of closed segments [xi_j, rho_j].
double tau_segment_distance(const TauNConfig& cfg, const DiagPoint& y);

struct TauResidual {
    Vec all;          // rk1 | rk2 | rk3 | closure | graph
    double rk1 = 0.0; // infinity norms per group
    double rk2 = 0.0;
    double rk3 = 0.0;
    double closure = 0.0;
    double graph = 0.0;
    double max() const;
};

TauResidual tau_residual(const TauNConfig& cfg, const FluxFunction* sigma);
inline TauResidual tau_residual(const TauNConfig& cfg, const FluxFunction& sigma) { return tau_residual(cfg, &sigma); }

struct TauSolveOptions {
    int max_iter = 200;
    double tol = 1e-10;
    bool fix_time_scale = false;  // pins sum_j s_j^2 to its initial value
    double fd_step = 1e-7;
};

struct TauSolveResult {
    bool success = false;
    TauNConfig config;
    double residual = 0.0;  // infinity norm of tau_residual
    int iterations = 0;
    std::string message;
};

/// Levenberg-Marquardt on tau_residual with |alpha_j| = 1 and the total leg norm fixed from init.
TauSolveResult solve_tau(const FluxFunction& sigma, const TauNConfig& init, const TauSolveOptions& opt = {});

/// Admissible T_N configuration in the space-time matrix space with base [[A,0],[0,b]] and legs C_j^s.
TNConfig lift_tau(const TauNConfig& cfg, double s = 1.0);

// Single unknown function (m = 1). Points p are n-vectors, sigma acts on 1 x n matrices.
double m1_G(const FluxFunction& sigma, const Vec& p, const Vec& q);
/// Throws PreconditionError when sigma has no Jacobian and allow_fd is false.
double m1_delta(const FluxFunction& sigma, const Vec& p, const Vec& q, bool allow_fd = true);
Vec m1_sigma(const FluxFunction& sigma, const Vec& p);
Mat m1_dsigma(const FluxFunction& sigma, const Vec& p);

struct EqualFluxOptions {
    std::optional<Vec> direction;  // unit search direction, default e_1
    int samples = 400;
    double delta_min = 1e-6;
    double tol = 1e-13;
};

struct EqualFluxPair {
    Vec p_plus;
    Vec p_minus;
    double level = 0.0;   // common value of sigma(t e) . e
    double G = 0.0;
    double delta = 0.0;
    std::array<double, 2> range_overlap{0.0, 0.0};
};

/// Root-finds G(p_+, p_-) = 0 with p_+ = t_+ e, p_- = t_- e, t_+ in seeds[0], t_- in seeds[1].
EqualFluxPair find_equal_flux_pair(const FluxFunction& sigma, std::array<double, 2> seed_plus,
                                   std::array<double, 2> seed_minus, const EqualFluxOptions& opt = {});

struct Decomposition {
    bool success = false;
    double lambda = 0.0;
    Vec p_plus;
    Vec p_minus;
    double residual = 0.0;       // |F|_inf
    double recombination = 0.0;  // |lambda xi_+ + (1 - lambda) xi_- - [p, beta]|
    int iterations = 0;
    std::string message;
};

struct DecomposeOptions {
    int max_iter = 60;
    double tol = 1e-12;
    double min_separation = 1e-8;
};

/// Newton on F(p_+, lambda) with q = (p - lambda p_+) / (1 - lambda).
Decomposition decompose_sigma_point(const FluxFunction& sigma, const Vec& p, const Vec& beta, const Vec& seed_plus,
                                    double seed_lambda, const DecomposeOptions& opt = {});

/// Two-corner configuration on the flux graph with kappa = (2, 2) whose segments cover the open segment [xi_-, xi_+].
TauNConfig tau2_from_pair(const FluxFunction& sigma, const Vec& p_plus, const Vec& p_minus);

/// Generator-based open set for m = 1: membership is a constructive decomposition with p_+ in Delta^+, p_- in Delta^-.
class SigmaSet {
public:
    using Region = std::function<bool(const Vec&)>;

    SigmaSet(FluxFunction sigma, Region delta_plus, Region delta_minus, EqualFluxPair witness, double eta = 1e-3);
    /// Delta^+ and Delta^- as open intervals (times a direction) for n = 1 style searches.
    static SigmaSet from_intervals(const FluxFunction& sigma, std::array<double, 2> plus, std::array<double, 2> minus,
                                   const EqualFluxOptions& opt = {});

    std::optional<Decomposition> decompose(const DiagPoint& y) const;
    bool contains(const DiagPoint& y) const { return decompose(y).has_value(); }
    /// Uncached membership starting Newton from a nearby decomposition; falls back to the witness seeds.
    std::optional<Decomposition> decompose_near(const DiagPoint& y, const Decomposition& seed) const;
    /// Configuration on the graph whose segment set contains y, or nothing when y is outside.
    std::optional<TauNConfig> generate(const DiagPoint& y) const;
    /// Largest r such that sampled points within r of sampled segment points stay inside.
    double estimate_tube_radius(const TauNConfig& cfg, int segment_samples = 9, int directions = 16,
                                std::uint64_t seed = 7) const;

    void clear_cache() const;

    const FluxFunction& sigma() const { return sigma_; }
    const EqualFluxPair& witness() const { return witness_; }
    double eta() const { return eta_; }

private:
    FluxFunction sigma_;
    Region plus_, minus_;
    EqualFluxPair witness_;
    double eta_;
    struct Cache {
        std::mutex mutex;
        std::map<std::vector<double>, Decomposition> entries;
    };
    std::shared_ptr<Cache> cache_;
};

// n = 2 special configurations.
/// [A; B J] with J (a, b) = (b, -a).
Mat map_L(const DiagPoint& x);
DiagPoint map_L_inverse(const Mat& M, int m);

struct PQKernel {
    Mat p_basis;  // (mN) x m(N-2), column blocks stack (p_1, ..., p_N)
    Mat q_basis;  // (mN) x m(N-3)
    int rank_p = 0;
    int rank_q = 0;
};
PQKernel solve_pq_kernel(const std::vector<Vec>& alphas, int m);

/// Legs (p_j; (alpha_j . delta) q_j) (x) alpha_j under map_L, with beta_j^i = q_j^i (-y_j, x_j).
TauNConfig special_tau_n2(const std::vector<Vec>& alphas, const Vec& delta, const std::vector<Vec>& ps,
                          const std::vector<Vec>& qs, const std::vector<double>& kappa, const DiagPoint& base);
TauNConfig special_tau_n2(const std::vector<Vec>& alphas, const Vec& delta, const PQKernel& kernel,
                          const Vec& p_coeffs, const Vec& q_coeffs, const std::vector<double>& kappa,
                          const DiagPoint& base);

struct DimensionReport {
    int parameters = 0;
    int jacobian_rank = 0;
    int nullity = 0;
    int gauge = 0;        // N + 1
    int observed = 0;     // parameters - nullity
    int formula = 0;      // (2m + 2) N + 1 - m
    int attempts = 0;
};
DimensionReport dimension_check(int m, int N, std::uint64_t seed = 1, int retries = 5);

nlohmann::json to_json(const TauNConfig& cfg);
nlohmann::json to_json(const DiagPoint& x);

}  // namespace wci
