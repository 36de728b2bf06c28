#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace wci {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Shape mismatch between blocks or operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Violated operation precondition.
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A numerical procedure did not reach its certificate.
struct SolverFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ProblemDims {
    int m = 1;
    int n = 1;

    ProblemDims() = default;
    ProblemDims(int m_, int n_);

    int rows() const { return m + n * m; }
    int cols() const { return n + 1; }
    bool operator==(const ProblemDims&) const = default;
};

/// Point [A, (b^i)] of M^{m x n} x (R^n)^m.
struct DiagPoint {
    Mat A;                 // m x n
    std::vector<Vec> b;    // m vectors of length n

    ProblemDims dims() const { return {static_cast<int>(A.rows()), static_cast<int>(A.cols())}; }
    /// Flattened as [vec_row(A), b^1, ..., b^m].
    Vec flatten() const;
    static DiagPoint unflatten(const Vec& x, ProblemDims d);
    static DiagPoint zero(ProblemDims d);
    /// b stacked as an m x n matrix, row i = b^i.
    Mat b_matrix() const;
};

DiagPoint operator+(const DiagPoint& x, const DiagPoint& y);
DiagPoint operator-(const DiagPoint& x, const DiagPoint& y);
DiagPoint operator*(double s, const DiagPoint& x);
double norm(const DiagPoint& x);

/// Space-time block matrix [[A, a], [(B^i), (b^i)]] of shape (m+nm) x (n+1).
struct BlockMatrix {
    Mat A;                 // m x n
    Vec a;                 // m
    std::vector<Mat> B;    // m blocks, n x n
    std::vector<Vec> b;    // m vectors, length n

    ProblemDims dims() const { return {static_cast<int>(A.rows()), static_cast<int>(A.cols())}; }
    Mat dense() const;
    static BlockMatrix from_dense(const Mat& X, ProblemDims d);
    static BlockMatrix zero(ProblemDims d);
};

BlockMatrix block_compose(const Mat& A, const Vec& a, const std::vector<Mat>& B, const std::vector<Vec>& b);

int numeric_rank(const Mat& M, double tol = 1e-9);

DiagPoint project_diag(const BlockMatrix& X);
/// Diagonal projection applied to a dense (m+nm) x (n+1) matrix.
DiagPoint project_diag(const Mat& X, ProblemDims d);
/// Embed [A, (b^i)] with zero a and B blocks.
Mat lift_diag(const DiagPoint& p);

struct FluxFunction {
    std::function<Mat(const Mat&)> evaluate;
    /// Derivative of vec_row(sigma) with respect to vec_row(A), (mn) x (mn).
    std::function<Mat(const Mat&)> jacobian_fn;
    std::string label;
    ProblemDims dims;

    Mat operator()(const Mat& A) const { return evaluate(A); }
    bool has_jacobian() const { return static_cast<bool>(jacobian_fn); }
    /// Analytic Jacobian if available, else central differences with step 1e-6 (1 + |A|_inf).
    Mat jacobian(const Mat& A) const;
};

Mat fd_jacobian(const std::function<Mat(const Mat&)>& f, const Mat& A);
Vec vec_row(const Mat& A);
Mat unvec_row(const Vec& v, int rows, int cols);

namespace flux {
FluxFunction identity(ProblemDims d);
/// sigma(A) = M A with M of size m x m.
FluxFunction linear(const Mat& M, int n);
/// sigma(A) = A / (1 + |A|^2); for m = n = 1 this is p / (1 + p^2).
FluxFunction perona_malik(ProblemDims d = {1, 1});
/// sigma(A) = |A|^2 A - A; for m = n = 1 this is p^3 - p.
FluxFunction cubic(ProblemDims d = {1, 1});
/// Catalog lookup: "identity", "heat", "linear", "perona-malik", "pm", "cubic".
FluxFunction by_label(const std::string& label, ProblemDims d, const std::optional<Mat>& M = std::nullopt);
}  // namespace flux

DiagPoint graph_point(const FluxFunction& sigma, const Mat& A);

struct ConstraintReport {
    bool member = false;
    double flux_residual = 0.0;
    double trace_residual = 0.0;
};

ConstraintReport in_constraint_set(const BlockMatrix& X, const FluxFunction& sigma, const Vec& z, double tol);

struct Sampler {
    std::uint64_t seed = 1;
    int count = 1000;
    double scale = 2.0;    // entries uniform in [-scale, scale]
    /// Explicit samples evaluated before the random ones: (A, p, alpha) for rank-one, (A, B) for full.
    std::vector<std::tuple<Mat, Vec, Vec>> rank_one_extra;
    std::vector<std::pair<Mat, Mat>> full_extra;
};

struct MonotonicityReport {
    int samples = 0;
    double nu = 0.0;
    double min_margin = 0.0;
    int violations = 0;
    bool passed = true;
    std::optional<Mat> witness_A;
    std::optional<Mat> witness_direction;   // p (x) alpha or B
};

MonotonicityReport parabolicity_sample(const FluxFunction& sigma, const Sampler& sampler, double nu);
MonotonicityReport monotonicity_sample(const FluxFunction& sigma, const Sampler& sampler, double nu);

}  // namespace wci
