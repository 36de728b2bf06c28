#include "wci/hulls.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>

namespace wci {

PointCloud::PointCloud(std::vector<Mat> pts) : points(std::move(pts)) {
    if (points.empty()) throw PreconditionError("point cloud must be nonempty");
    for (const auto& X : points)
        if (X.rows() != points[0].rows() || X.cols() != points[0].cols())
            throw DimensionError("point cloud shapes differ");
    depth.assign(points.size(), 0);
    parents.assign(points.size(), {-1, -1});
    weight.assign(points.size(), 0.0);
}

bool rank_one_connected(const Mat& X, const Mat& Y, double tol) {
    if (X.rows() != Y.rows() || X.cols() != Y.cols()) throw DimensionError("shape mismatch");
    return numeric_rank(X - Y, tol) == 1;
}

namespace {

bool on_segment(const Mat& Z, const Mat& a, const Mat& b, double tol) {
    const Mat d = b - a;
    const double dd = d.squaredNorm();
    if (dd == 0.0) return (Z - a).norm() <= tol;
    const double t = std::clamp((Z - a).cwiseProduct(d).sum() / dd, 0.0, 1.0);
    return (Z - a - t * d).norm() <= tol;
}

bool lex_less(const Mat& x, const Mat& y) {
    const Vec a = vec_row(x), b = vec_row(y);
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

}  // namespace

PointCloud lamination_step(const PointCloud& cloud, const LaminationOptions& opt) {
    if (opt.lambda_samples < 1) throw PreconditionError("lambda samples must be at least one");
    PointCloud out = cloud;
    const int n0 = static_cast<int>(cloud.size());
    const int next_depth = cloud.depth.empty() ? 1 : *std::max_element(cloud.depth.begin(), cloud.depth.end()) + 1;

    auto covered = [&](int i, int j) {
        for (const auto& [a, b] : cloud.laminated) {
            const Mat& A = cloud.points[a];
            const Mat& B = cloud.points[b];
            if (on_segment(cloud.points[i], A, B, opt.dedup_tol) && on_segment(cloud.points[j], A, B, opt.dedup_tol))
                return true;
        }
        return false;
    };

    struct Candidate {
        Mat X;
        int i, j;
        double lambda;
    };
    std::vector<Candidate> cand;
    for (int i = 0; i < n0; ++i)
        for (int j = i + 1; j < n0; ++j) {
            if (!rank_one_connected(cloud.points[i], cloud.points[j], opt.rank_tol)) continue;
            if (covered(i, j)) continue;
            out.laminated.emplace_back(i, j);
            for (int k = 1; k <= opt.lambda_samples; ++k) {
                const double lam = static_cast<double>(k) / (opt.lambda_samples + 1);
                cand.push_back({lam * cloud.points[i] + (1 - lam) * cloud.points[j], i, j, lam});
            }
        }
    std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return lex_less(a.X, b.X); });
    for (auto& c : cand) {
        bool dup = false;
        for (const auto& Z : out.points)
            if ((Z - c.X).norm() <= opt.dedup_tol) {
                dup = true;
                break;
            }
        if (dup) continue;
        out.points.push_back(std::move(c.X));
        out.depth.push_back(next_depth);
        out.parents.emplace_back(c.i, c.j);
        out.weight.push_back(c.lambda);
    }
    return out;
}

HullResult lamination_hull(const PointCloud& cloud, int depth, const LaminationOptions& opt) {
    if (depth < 0) throw PreconditionError("depth must be nonnegative");
    HullResult r;
    r.cloud = cloud;
    for (int d = 0; d < depth; ++d) {
        auto next = lamination_step(r.cloud, opt);
        const bool grew = next.size() > r.cloud.size();
        r.cloud = std::move(next);
        if (!grew) {
            r.fixed_point = true;
            return r;
        }
        ++r.depth_reached;
    }
    r.fixed_point = r.cloud.size() == lamination_step(r.cloud, opt).size();
    return r;
}

Vec nnls(const Mat& M, const Vec& y, int max_iter) {
    const Eigen::Index n = M.cols();
    if (max_iter <= 0) max_iter = static_cast<int>(3 * n + 10);
    Vec x = Vec::Zero(n);
    std::vector<bool> passive(n, false);
    const double eps = 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff()) * std::max(1.0, y.norm());

    auto solve_passive = [&](Vec& z) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index k = 0; k < n; ++k)
            if (passive[k]) idx.push_back(k);
        z = Vec::Zero(n);
        if (idx.empty()) return;
        Mat Mp(M.rows(), idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) Mp.col(k) = M.col(idx[k]);
        const Vec zp = Mp.colPivHouseholderQr().solve(y);
        for (std::size_t k = 0; k < idx.size(); ++k) z(idx[k]) = zp(k);
    };

    for (int outer = 0; outer < max_iter; ++outer) {
        const Vec w = M.transpose() * (y - M * x);
        Eigen::Index t = -1;
        double best = eps;
        for (Eigen::Index k = 0; k < n; ++k)
            if (!passive[k] && w(k) > best) {
                best = w(k);
                t = k;
            }
        if (t < 0) break;
        passive[t] = true;
        for (int inner = 0; inner < max_iter; ++inner) {
            Vec z;
            solve_passive(z);
            bool feasible = true;
            for (Eigen::Index k = 0; k < n; ++k)
                if (passive[k] && z(k) <= 0) feasible = false;
            if (feasible) {
                x = z;
                break;
            }
            double alpha = 1.0;
            for (Eigen::Index k = 0; k < n; ++k)
                if (passive[k] && z(k) <= 0) alpha = std::min(alpha, x(k) / (x(k) - z(k)));
            x += alpha * (z - x);
            for (Eigen::Index k = 0; k < n; ++k)
                if (passive[k] && x(k) <= 1e-15) {
                    passive[k] = false;
                    x(k) = 0.0;
                }
        }
    }
    return x;
}

ConvexMembership convex_membership(const Mat& Y, const PointCloud& cloud, double tol) {
    if (cloud.points.empty()) throw PreconditionError("point cloud must be nonempty");
    const auto& P0 = cloud.points[0];
    if (Y.rows() != P0.rows() || Y.cols() != P0.cols()) throw DimensionError("shape mismatch");
    ConvexMembership r;
    const Eigen::Index k = static_cast<Eigen::Index>(cloud.size());
    const Eigen::Index d = Y.size();
    // Quick rejection by coordinate bounds.
    const Vec y = vec_row(Y);
    Vec lo = vec_row(P0), hi = lo;
    for (const auto& X : cloud.points) {
        const Vec v = vec_row(X);
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
    }
    if (((y - hi).array() > tol).any() || ((lo - y).array() > tol).any()) {
        r.residual = std::max((y - hi).maxCoeff(), (lo - y).maxCoeff());
        r.coefficients = Vec::Zero(k);
        return r;
    }
    double scale = 1.0;
    for (const auto& X : cloud.points) scale = std::max(scale, X.norm());
    const double w = 1e3 * scale;
    Mat M(d + 1, k);
    for (Eigen::Index i = 0; i < k; ++i) {
        M.col(i).head(d) = vec_row(cloud.points[i]);
        M(d, i) = w;
    }
    Vec rhs(d + 1);
    rhs.head(d) = y;
    rhs(d) = w;
    Vec nu = nnls(M, rhs);
    if (nu.sum() > 0) nu /= nu.sum();
    Mat R = -Y;
    for (Eigen::Index i = 0; i < k; ++i) R += nu(i) * cloud.points[i];
    r.residual = R.norm();
    r.coefficients = nu;
    r.member = r.residual <= tol;
    return r;
}

namespace {

// Orthonormal basis of alpha^perp as columns, n x (n-1).
Mat perp_basis(const Vec& alpha) {
    const auto n = alpha.size();
    if (n == 1) return Mat::Zero(1, 0);
    Eigen::HouseholderQR<Mat> qr(alpha);
    const Mat Q = qr.householderQ();
    return Q.rightCols(n - 1);
}

}  // namespace

RankOneSearchReport search_rank_one_in_K(const FluxFunction& sigma, const RankOneSearchOptions& opt) {
    if (opt.samples < 1) throw PreconditionError("sample count must be at least one");
    const auto dm = sigma.dims;
    const int m = dm.m, n = dm.n;
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> U(-opt.scale, opt.scale);
    RankOneSearchReport rep;
    rep.best_residual = std::numeric_limits<double>::infinity();
    const int nb = m * (n - 1);
    const int nunk = m * n + nb + 1;

    for (int k = 0; k < opt.samples; ++k) {
        Mat A = Mat::NullaryExpr(m, n, [&] { return U(rng); });
        Vec p, alpha;
        do p = Vec::NullaryExpr(m, [&] { return U(rng); }); while (p.norm() < opt.min_norm);
        do alpha = Vec::NullaryExpr(n, [&] { return U(rng); }); while (alpha.norm() < opt.min_norm);
        const Mat D = p * alpha.transpose();
        const Mat E = perp_basis(alpha);
        Vec c = Vec::NullaryExpr(nb, [&] { return U(rng); });
        double s = U(rng);

        auto beta_of = [&](const Vec& cc) {
            Mat Bt(m, n);
            for (int i = 0; i < m; ++i) Bt.row(i) = (E * cc.segment(i * (n - 1), n - 1)).transpose();
            return Bt;
        };
        auto residual = [&](const Mat& AA, const Vec& cc, double ss) {
            return Vec(vec_row(sigma(AA + D) - sigma(AA) - ss * beta_of(cc)));
        };

        Vec r = residual(A, c, s);
        double lm = 1e-3;
        for (int it = 0; it < opt.iterations && r.norm() >= opt.tol; ++it) {
            Mat J(m * n, nunk);
            J.leftCols(m * n) = sigma.jacobian(A + D) - sigma.jacobian(A);
            const Mat Bt = beta_of(c);
            for (int u = 0; u < nb; ++u) {
                Vec e = Vec::Zero(nb);
                e(u) = 1.0;
                J.col(m * n + u) = -s * vec_row(beta_of(e));
            }
            J.col(nunk - 1) = -vec_row(Bt);
            const Mat H = J.transpose() * J;
            const Vec g = J.transpose() * r;
            bool improved = false;
            for (int tries = 0; tries < 8 && !improved; ++tries) {
                const Vec step = (H + lm * Mat::Identity(nunk, nunk)).ldlt().solve(-g);
                const Mat A2 = A + unvec_row(step.head(m * n), m, n);
                const Vec c2 = c + step.segment(m * n, nb);
                const double s2 = s + step(nunk - 1);
                const Vec r2 = residual(A2, c2, s2);
                if (r2.norm() < r.norm()) {
                    A = A2;
                    c = c2;
                    s = s2;
                    r = r2;
                    lm = std::max(lm / 3, 1e-12);
                    improved = true;
                } else {
                    lm *= 10;
                }
            }
            if (!improved) break;
            if (A.cwiseAbs().maxCoeff() > opt.box) break;
        }
        ++rep.samples;
        const double res = r.norm();
        if (A.cwiseAbs().maxCoeff() > opt.box) continue;
        rep.best_residual = std::min(rep.best_residual, res);
        if (res < opt.tol) {
            ++rep.finding_count;
            if (rep.findings.size() < opt.max_findings) {
                RankOneFinding f{A, p, alpha, s, {}, res};
                const Mat Bt = beta_of(c);
                for (int i = 0; i < m; ++i) f.beta.push_back(Bt.row(i).transpose());
                rep.findings.push_back(std::move(f));
            }
        }
    }
    return rep;
}

void write_csv(std::ostream& os, const PointCloud& cloud) {
    if (cloud.points.empty()) return;
    const auto sz = cloud.points[0].size();
    os << "depth";
    for (Eigen::Index k = 0; k < sz; ++k) os << ",x" << k;
    os << "\n";
    os.precision(17);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        os << (i < cloud.depth.size() ? cloud.depth[i] : 0);
        const Vec v = vec_row(cloud.points[i]);
        for (Eigen::Index k = 0; k < sz; ++k) os << "," << v(k);
        os << "\n";
    }
}

}  // namespace wci
