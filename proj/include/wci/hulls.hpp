#pragma once

#include "wci/core_linalg.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace wci {

struct PointCloud {
    std::vector<Mat> points;
    std::vector<int> depth;   // 0 for original points, i for points added at lamination depth i
    /// Generating pair and weight of each added point, (-1, -1, 0) for originals.
    std::vector<std::pair<int, int>> parents;
    std::vector<double> weight;
    /// Pairs whose segment has already been sampled; sub-segments of these are not laminated again.
    std::vector<std::pair<int, int>> laminated;

    PointCloud() = default;
    explicit PointCloud(std::vector<Mat> pts);
    std::size_t size() const { return points.size(); }
};

bool rank_one_connected(const Mat& X, const Mat& Y, double tol = 1e-9);

struct LaminationOptions {
    int lambda_samples = 7;
    double rank_tol = 1e-9;
    double dedup_tol = 1e-9;
};

/// Appends lambda X + (1 - lambda) Y for rank-one connected pairs at interior grid points of (0, 1).
PointCloud lamination_step(const PointCloud& cloud, const LaminationOptions& opt = {});

struct HullResult {
    PointCloud cloud;
    int depth_reached = 0;  // number of steps that added points
    bool fixed_point = false;
};
HullResult lamination_hull(const PointCloud& cloud, int depth, const LaminationOptions& opt = {});

struct ConvexMembership {
    bool member = false;
    Vec coefficients;
    double residual = 0.0;
};
ConvexMembership convex_membership(const Mat& Y, const PointCloud& cloud, double tol = 1e-9);

/// Lawson-Hanson active-set solver for min |M x - y| subject to x >= 0.
Vec nnls(const Mat& M, const Vec& y, int max_iter = 0);

struct RankOneFinding {
    Mat A;
    Vec p;
    Vec alpha;
    double s = 0.0;
    std::vector<Vec> beta;
    double residual = 0.0;
};

struct RankOneSearchOptions {
    std::uint64_t seed = 1;
    int samples = 1000;
    double scale = 2.0;     // A, p, alpha entries uniform in [-scale, scale]
    double min_norm = 0.1;  // lower bound for |p| and |alpha|
    double box = 10.0;      // findings must keep |A|_inf within this box
    int iterations = 20;
    double tol = 1e-6;
    std::size_t max_findings = 50;
};

struct RankOneSearchReport {
    int samples = 0;
    double best_residual = 0.0;
    int finding_count = 0;
    std::vector<RankOneFinding> findings;  // at most max_findings kept
};

/// Searches for solutions of beta^i . alpha = 0, sigma(A + p (x) alpha) = sigma(A) + s beta with p, alpha nonzero.
RankOneSearchReport search_rank_one_in_K(const FluxFunction& sigma, const RankOneSearchOptions& opt);

void write_csv(std::ostream& os, const PointCloud& cloud);

}  // namespace wci
