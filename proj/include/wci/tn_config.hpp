#pragma once

#include "wci/core_linalg.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace wci {

/// Structured rank-one direction [[p (x) alpha, s p], [(beta^i (x) alpha), (s beta^i)]].
struct AdmissibleRankOne {
    Vec p;
    Vec alpha;
    double s = 0.0;
    std::vector<Vec> beta;

    ProblemDims dims() const { return {static_cast<int>(p.size()), static_cast<int>(alpha.size())}; }
    Mat dense() const;
    /// Largest |beta^i . alpha|.
    double orthogonality_defect() const;
};

struct TNConfig {
    Mat P;
    std::vector<Mat> C;
    std::vector<double> kappa;
    std::vector<Mat> X;        // corners X_j = P_j + kappa_j C_j
    std::vector<Mat> anchors;  // P_1 = P, P_{j+1} = P_j + C_j
    std::optional<ProblemDims> structured;

    int N() const { return static_cast<int>(C.size()); }
    double lambda(int j) const { return 1.0 - 1.0 / kappa[j]; }
    double mu() const;
    /// All legs are parallel, so every corner lies on one line (always the case for N = 2).
    bool has_collinear_legs(double tol = 1e-9) const;
};

/// Build from base P and legs (C_j, kappa_j). Indices are 0-based throughout.
TNConfig build_tn(const Mat& P, const std::vector<std::pair<Mat, double>>& legs,
                  std::optional<ProblemDims> structured = std::nullopt, double tol = 1e-9);

/// nu^j with P_j = sum_i nu_i X_i.
Vec convex_coeffs(const TNConfig& cfg, int j);

double dist_to_segments(const TNConfig& cfg, const Mat& X);

TNConfig shrink(const TNConfig& cfg, const std::vector<double>& kappa_new);

struct LegReport {
    bool admissible = false;
    double rank_defect = 0.0;          // second singular value / first
    double orthogonality_defect = 0.0; // max |beta^i . alpha|
    double alpha_norm = 0.0;           // before normalization, relative to leg norm
    AdmissibleRankOne leg;
    std::string message;
};

struct AdmissibleReport {
    bool admissible = false;
    std::vector<LegReport> legs;
};

/// Recover (p, alpha, s, beta) per leg with |alpha| = 1 and first nonzero alpha entry positive.
AdmissibleReport admissible_check(const TNConfig& cfg, double tol = 1e-9);
LegReport factor_admissible(const Mat& C, ProblemDims d, double tol = 1e-9);

/// Base [[A,0],[0,b]] and legs [[p (x) alpha, s s_j p], [(1/s) beta (x) alpha, s_j beta]].
TNConfig scale_family(const TNConfig& cfg, double s, double tol = 1e-9);

struct TartarFixture {
    std::vector<Mat> points;
    TNConfig config;
};
TartarFixture tartar_fixture();

nlohmann::json to_json(const TNConfig& cfg);
TNConfig tn_from_json(const nlohmann::json& j);

nlohmann::json mat_to_json(const Mat& M);
Mat mat_from_json(const nlohmann::json& j);

}  // namespace wci
