#include "wci/core_linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace wci {

ProblemDims::ProblemDims(int m_, int n_) : m(m_), n(n_) {
    if (m < 1 || n < 1) throw DimensionError("problem dimensions must satisfy m >= 1 and n >= 1");
}

Vec DiagPoint::flatten() const {
    const auto d = dims();
    Vec x(2 * d.m * d.n);
    x.head(d.m * d.n) = vec_row(A);
    for (int i = 0; i < d.m; ++i) x.segment(d.m * d.n + i * d.n, d.n) = b[i];
    return x;
}

DiagPoint DiagPoint::unflatten(const Vec& x, ProblemDims d) {
    if (x.size() != 2 * d.m * d.n) throw DimensionError("flattened diagonal point has wrong length");
    DiagPoint p;
    p.A = unvec_row(x.head(d.m * d.n), d.m, d.n);
    p.b.resize(d.m);
    for (int i = 0; i < d.m; ++i) p.b[i] = x.segment(d.m * d.n + i * d.n, d.n);
    return p;
}

DiagPoint DiagPoint::zero(ProblemDims d) {
    DiagPoint p;
    p.A = Mat::Zero(d.m, d.n);
    p.b.assign(d.m, Vec::Zero(d.n));
    return p;
}

Mat DiagPoint::b_matrix() const {
    Mat M(b.size(), A.cols());
    for (std::size_t i = 0; i < b.size(); ++i) M.row(i) = b[i].transpose();
    return M;
}

DiagPoint operator+(const DiagPoint& x, const DiagPoint& y) {
    return DiagPoint::unflatten(x.flatten() + y.flatten(), x.dims());
}
DiagPoint operator-(const DiagPoint& x, const DiagPoint& y) {
    return DiagPoint::unflatten(x.flatten() - y.flatten(), x.dims());
}
DiagPoint operator*(double s, const DiagPoint& x) { return DiagPoint::unflatten(s * x.flatten(), x.dims()); }
double norm(const DiagPoint& x) { return x.flatten().norm(); }

Mat BlockMatrix::dense() const {
    const auto d = dims();
    Mat X = Mat::Zero(d.rows(), d.cols());
    X.block(0, 0, d.m, d.n) = A;
    X.block(0, d.n, d.m, 1) = a;
    for (int i = 0; i < d.m; ++i) {
        X.block(d.m + i * d.n, 0, d.n, d.n) = B[i];
        X.block(d.m + i * d.n, d.n, d.n, 1) = b[i];
    }
    return X;
}

BlockMatrix BlockMatrix::from_dense(const Mat& X, ProblemDims d) {
    if (X.rows() != d.rows() || X.cols() != d.cols())
        throw DimensionError("dense matrix is not of shape (m+nm) x (n+1)");
    BlockMatrix Y;
    Y.A = X.block(0, 0, d.m, d.n);
    Y.a = X.block(0, d.n, d.m, 1);
    for (int i = 0; i < d.m; ++i) {
        Y.B.push_back(X.block(d.m + i * d.n, 0, d.n, d.n));
        Y.b.push_back(X.block(d.m + i * d.n, d.n, d.n, 1));
    }
    return Y;
}

BlockMatrix BlockMatrix::zero(ProblemDims d) {
    return from_dense(Mat::Zero(d.rows(), d.cols()), d);
}

BlockMatrix block_compose(const Mat& A, const Vec& a, const std::vector<Mat>& B, const std::vector<Vec>& b) {
    const auto m = A.rows();
    const auto n = A.cols();
    if (m < 1 || n < 1) throw DimensionError("block A must be nonempty");
    if (a.size() != m) throw DimensionError("block a must have length m");
    if (static_cast<Eigen::Index>(B.size()) != m) throw DimensionError("block B must hold m matrices");
    if (static_cast<Eigen::Index>(b.size()) != m) throw DimensionError("block b must hold m vectors");
    for (const auto& Bi : B)
        if (Bi.rows() != n || Bi.cols() != n) throw DimensionError("block B^i must be n x n");
    for (const auto& bi : b)
        if (bi.size() != n) throw DimensionError("block b^i must have length n");
    return BlockMatrix{A, a, B, b};
}

int numeric_rank(const Mat& M, double tol) {
    if (M.size() == 0) return 0;
    Eigen::JacobiSVD<Mat> svd(M);
    const Vec& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    int r = 0;
    for (int i = 0; i < s.size(); ++i)
        if (s(i) > tol * s(0)) ++r;
    return r;
}

DiagPoint project_diag(const BlockMatrix& X) { return DiagPoint{X.A, X.b}; }

DiagPoint project_diag(const Mat& X, ProblemDims d) { return project_diag(BlockMatrix::from_dense(X, d)); }

Mat lift_diag(const DiagPoint& p) {
    const auto d = p.dims();
    auto X = BlockMatrix::zero(d);
    X.A = p.A;
    X.b = p.b;
    return X.dense();
}

Vec vec_row(const Mat& A) {
    Vec v(A.size());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j) v(i * A.cols() + j) = A(i, j);
    return v;
}

Mat unvec_row(const Vec& v, int rows, int cols) {
    Mat A(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) A(i, j) = v(i * cols + j);
    return A;
}

Mat fd_jacobian(const std::function<Mat(const Mat&)>& f, const Mat& A) {
    const double h = 1e-6 * (1.0 + A.cwiseAbs().maxCoeff());
    const Eigen::Index k = A.size();
    Mat J(k, k);
    Mat Ap = A, Am = A;
    for (Eigen::Index idx = 0; idx < k; ++idx) {
        const Eigen::Index i = idx / A.cols(), j = idx % A.cols();
        Ap(i, j) += h;
        Am(i, j) -= h;
        J.col(idx) = (vec_row(f(Ap)) - vec_row(f(Am))) / (2.0 * h);
        Ap(i, j) = A(i, j);
        Am(i, j) = A(i, j);
    }
    return J;
}

Mat FluxFunction::jacobian(const Mat& A) const {
    if (jacobian_fn) return jacobian_fn(A);
    return fd_jacobian(evaluate, A);
}

namespace flux {

FluxFunction identity(ProblemDims d) {
    FluxFunction f;
    f.dims = d;
    f.label = "identity";
    f.evaluate = [](const Mat& A) { return A; };
    const int k = d.m * d.n;
    f.jacobian_fn = [k](const Mat&) { return Mat(Mat::Identity(k, k)); };
    return f;
}

FluxFunction linear(const Mat& M, int n) {
    if (M.rows() != M.cols()) throw DimensionError("linear flux matrix must be square");
    FluxFunction f;
    f.dims = ProblemDims(static_cast<int>(M.rows()), n);
    f.label = "linear";
    f.evaluate = [M](const Mat& A) { return Mat(M * A); };
    f.jacobian_fn = [M, n](const Mat&) {
        const auto m = M.rows();
        Mat J = Mat::Zero(m * n, m * n);
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index k = 0; k < m; ++k)
                for (int j = 0; j < n; ++j) J(i * n + j, k * n + j) = M(i, k);
        return J;
    };
    return f;
}

FluxFunction perona_malik(ProblemDims d) {
    FluxFunction f;
    f.dims = d;
    f.label = "perona-malik";
    f.evaluate = [](const Mat& A) { return Mat(A / (1.0 + A.squaredNorm())); };
    f.jacobian_fn = [](const Mat& A) {
        const Vec v = vec_row(A);
        const double q = 1.0 + v.squaredNorm();
        Mat J = Mat::Identity(v.size(), v.size()) / q - 2.0 * v * v.transpose() / (q * q);
        return J;
    };
    return f;
}

FluxFunction cubic(ProblemDims d) {
    FluxFunction f;
    f.dims = d;
    f.label = "cubic";
    f.evaluate = [](const Mat& A) { return Mat(A.squaredNorm() * A - A); };
    f.jacobian_fn = [](const Mat& A) {
        const Vec v = vec_row(A);
        Mat J = (v.squaredNorm() - 1.0) * Mat::Identity(v.size(), v.size()) + 2.0 * v * v.transpose();
        return J;
    };
    return f;
}

FluxFunction by_label(const std::string& label, ProblemDims d, const std::optional<Mat>& M) {
    if (label == "identity" || label == "heat") {
        auto f = identity(d);
        f.label = label;
        return f;
    }
    if (label == "linear") {
        if (!M) throw PreconditionError("linear flux requires a matrix M");
        if (M->rows() != d.m) throw DimensionError("linear flux matrix must be m x m");
        return linear(*M, d.n);
    }
    if (label == "perona-malik" || label == "pm") return perona_malik(d);
    if (label == "cubic") return cubic(d);
    throw PreconditionError("unknown flux label: " + label);
}

}  // namespace flux

DiagPoint graph_point(const FluxFunction& sigma, const Mat& A) {
    const Mat S = sigma(A);
    DiagPoint p;
    p.A = A;
    for (Eigen::Index i = 0; i < S.rows(); ++i) p.b.push_back(S.row(i).transpose());
    return p;
}

ConstraintReport in_constraint_set(const BlockMatrix& X, const FluxFunction& sigma, const Vec& z, double tol) {
    if (!(tol > 0)) throw PreconditionError("tolerance must be positive");
    const auto d = X.dims();
    if (z.size() != d.m) throw DimensionError("z must have length m");
    const Mat S = sigma(X.A);
    ConstraintReport r;
    for (int i = 0; i < d.m; ++i) {
        r.flux_residual = std::max(r.flux_residual, (X.b[i] - S.row(i).transpose()).cwiseAbs().maxCoeff());
        r.trace_residual = std::max(r.trace_residual, std::abs(X.B[i].trace() - z(i)));
    }
    r.member = r.flux_residual <= tol && r.trace_residual <= tol;
    return r;
}

namespace {

Mat random_matrix(std::mt19937_64& rng, int r, int c, double scale) {
    std::uniform_real_distribution<double> U(-scale, scale);
    Mat M(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) M(i, j) = U(rng);
    return M;
}

void record(MonotonicityReport& rep, double margin, const Mat& A, const Mat& dir) {
    ++rep.samples;
    if (rep.samples == 1 || margin < rep.min_margin) rep.min_margin = margin;
    if (margin < 0) {
        if (rep.violations == 0 || margin <= rep.min_margin) {
            rep.witness_A = A;
            rep.witness_direction = dir;
        }
        ++rep.violations;
    }
}

}  // namespace

MonotonicityReport parabolicity_sample(const FluxFunction& sigma, const Sampler& sampler, double nu) {
    if (sampler.count < 1 && sampler.rank_one_extra.empty())
        throw PreconditionError("sample count must be at least one");
    if (!(nu > 0)) throw PreconditionError("nu must be positive");
    const auto d = sigma.dims;
    MonotonicityReport rep;
    rep.nu = nu;
    auto eval = [&](const Mat& A, const Vec& p, const Vec& alpha) {
        const Mat D = p * alpha.transpose();
        const double margin = ((sigma(A + D) - sigma(A)).cwiseProduct(D)).sum() -
                              nu * p.squaredNorm() * alpha.squaredNorm();
        record(rep, margin, A, D);
    };
    for (const auto& [A, p, alpha] : sampler.rank_one_extra) eval(A, p, alpha);
    std::mt19937_64 rng(sampler.seed);
    for (int k = 0; k < sampler.count; ++k) {
        const Mat A = random_matrix(rng, d.m, d.n, sampler.scale);
        const Vec p = random_matrix(rng, d.m, 1, sampler.scale);
        const Vec alpha = random_matrix(rng, d.n, 1, sampler.scale);
        eval(A, p, alpha);
    }
    rep.passed = rep.violations == 0;
    return rep;
}

MonotonicityReport monotonicity_sample(const FluxFunction& sigma, const Sampler& sampler, double nu) {
    if (sampler.count < 1 && sampler.full_extra.empty() && sampler.rank_one_extra.empty())
        throw PreconditionError("sample count must be at least one");
    if (!(nu > 0)) throw PreconditionError("nu must be positive");
    const auto d = sigma.dims;
    MonotonicityReport rep;
    rep.nu = nu;
    auto eval = [&](const Mat& A, const Mat& B) {
        const double margin = ((sigma(A + B) - sigma(A)).cwiseProduct(B)).sum() - nu * B.squaredNorm();
        record(rep, margin, A, B);
    };
    for (const auto& [A, p, alpha] : sampler.rank_one_extra) eval(A, p * alpha.transpose());
    for (const auto& [A, B] : sampler.full_extra) eval(A, B);
    std::mt19937_64 rng(sampler.seed);
    for (int k = 0; k < sampler.count; ++k) {
        const Mat A = random_matrix(rng, d.m, d.n, sampler.scale);
        const Mat B = random_matrix(rng, d.m, d.n, sampler.scale);
        eval(A, B);
    }
    rep.passed = rep.violations == 0;
    return rep;
}

}  // namespace wci
