#include "wci/tn_config.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace wci {

Mat AdmissibleRankOne::dense() const {
    const auto d = dims();
    Vec u(d.rows());
    u.head(d.m) = p;
    for (int i = 0; i < d.m; ++i) u.segment(d.m + i * d.n, d.n) = beta[i];
    Vec w(d.cols());
    w.head(d.n) = alpha;
    w(d.n) = s;
    return u * w.transpose();
}

double AdmissibleRankOne::orthogonality_defect() const {
    double worst = 0.0;
    for (const auto& bi : beta) worst = std::max(worst, std::abs(bi.dot(alpha)));
    return worst;
}

double TNConfig::mu() const {
    double m = 1.0;
    for (int j = 0; j < N(); ++j) m *= lambda(j);
    return m;
}

bool TNConfig::has_collinear_legs(double tol) const {
    Mat span(P.size(), N());
    for (int j = 0; j < N(); ++j) span.col(j) = vec_row(C[j]);
    return numeric_rank(span, tol) < 2;
}

TNConfig build_tn(const Mat& P, const std::vector<std::pair<Mat, double>>& legs,
                  std::optional<ProblemDims> structured, double tol) {
    if (legs.size() < 2) throw PreconditionError("a T_N configuration needs N >= 2 legs");
    if (structured && (P.rows() != structured->rows() || P.cols() != structured->cols()))
        throw DimensionError("base does not have the structured shape");
    TNConfig cfg;
    cfg.P = P;
    cfg.structured = structured;
    Mat total = Mat::Zero(P.rows(), P.cols());
    double scale = 1.0;
    for (std::size_t j = 0; j < legs.size(); ++j) {
        const auto& [Cj, kj] = legs[j];
        if (Cj.rows() != P.rows() || Cj.cols() != P.cols())
            throw DimensionError("leg " + std::to_string(j) + " shape differs from base");
        if (!(kj > 1.0)) throw PreconditionError("factor not greater than one (leg " + std::to_string(j) + ")");
        if (numeric_rank(Cj, tol) != 1) throw PreconditionError("leg not rank-one (leg " + std::to_string(j) + ")");
        total += Cj;
        scale = std::max(scale, Cj.norm());
        cfg.C.push_back(Cj);
        cfg.kappa.push_back(kj);
    }
    if (total.norm() > tol * scale) throw PreconditionError("legs do not close");
    Mat Pj = P;
    for (int j = 0; j < cfg.N(); ++j) {
        cfg.anchors.push_back(Pj);
        cfg.X.push_back(Pj + cfg.kappa[j] * cfg.C[j]);
        Pj += cfg.C[j];
    }
    return cfg;
}

Vec convex_coeffs(const TNConfig& cfg, int j) {
    const int N = cfg.N();
    if (j < 0 || j >= N) throw PreconditionError("leg index out of range");
    const double mu = cfg.mu();
    Vec nu(N);
    // Closed form for the anchor starting the cycle, applied to the relabeling that starts at leg j.
    for (int r = 0; r < N; ++r) {
        const int i = (j + r) % N;
        double tail = 1.0;
        for (int q = r + 1; q < N; ++q) tail *= cfg.lambda((j + q) % N);
        nu(i) = tail / cfg.kappa[i] / (1.0 - mu);
    }
    return nu;
}

namespace {

double dist_to_segment(const Mat& X, const Mat& a, const Mat& b) {
    const Mat d = b - a;
    const double dd = d.squaredNorm();
    double t = dd > 0 ? (X - a).cwiseProduct(d).sum() / dd : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (X - a - t * d).norm();
}

}  // namespace

double dist_to_segments(const TNConfig& cfg, const Mat& X) {
    if (X.rows() != cfg.P.rows() || X.cols() != cfg.P.cols()) throw DimensionError("shape mismatch");
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < cfg.N(); ++j) best = std::min(best, dist_to_segment(X, cfg.X[j], cfg.anchors[j]));
    return best;
}

TNConfig shrink(const TNConfig& cfg, const std::vector<double>& kappa_new) {
    if (static_cast<int>(kappa_new.size()) != cfg.N()) throw DimensionError("need one factor per leg");
    std::vector<std::pair<Mat, double>> legs;
    for (int j = 0; j < cfg.N(); ++j) {
        if (!(kappa_new[j] > 1.0 && kappa_new[j] < cfg.kappa[j]))
            throw PreconditionError("shrunk factor must satisfy 1 < kappa' < kappa (leg " + std::to_string(j) + ")");
        legs.emplace_back(cfg.C[j], kappa_new[j]);
    }
    return build_tn(cfg.P, legs, cfg.structured);
}

LegReport factor_admissible(const Mat& C, ProblemDims d, double tol) {
    if (C.rows() != d.rows() || C.cols() != d.cols()) throw DimensionError("leg is not of shape (m+nm) x (n+1)");
    LegReport rep;
    Eigen::JacobiSVD<Mat> svd(C, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vec& sv = svd.singularValues();
    if (sv(0) == 0.0) {
        rep.message = "zero leg";
        return rep;
    }
    rep.rank_defect = sv.size() > 1 ? sv(1) / sv(0) : 0.0;
    Vec u = svd.matrixU().col(0);
    Vec w = sv(0) * svd.matrixV().col(0);
    Vec alpha = w.head(d.n);
    rep.alpha_norm = alpha.norm() / w.norm();
    auto& leg = rep.leg;
    if (rep.alpha_norm <= tol) {
        leg.p = Vec::Zero(d.m);
        leg.alpha = Vec::Zero(d.n);
        rep.message = "alpha vanishes (time-like rank-one leg)";
        return rep;
    }
    const double r = alpha.norm();
    w /= r;
    u *= r;
    Eigen::Index first = 0;
    while (first < d.n && std::abs(w(first)) <= tol) ++first;
    if (w(first) < 0) {
        w = -w;
        u = -u;
    }
    leg.alpha = w.head(d.n);
    leg.s = w(d.n);
    leg.p = u.head(d.m);
    for (int i = 0; i < d.m; ++i) leg.beta.push_back(u.segment(d.m + i * d.n, d.n));
    rep.orthogonality_defect = leg.orthogonality_defect();
    const double scale = std::max(1.0, u.norm());
    std::ostringstream msg;
    if (rep.rank_defect > tol) msg << "leg not rank-one (ratio " << rep.rank_defect << ")";
    else if (rep.orthogonality_defect > tol * scale)
        msg << "beta . alpha = " << rep.orthogonality_defect << " violates orthogonality";
    rep.message = msg.str();
    rep.admissible = rep.message.empty();
    return rep;
}

AdmissibleReport admissible_check(const TNConfig& cfg, double tol) {
    if (!cfg.structured) throw DimensionError("configuration has no structured (m+nm) x (n+1) shape");
    AdmissibleReport rep;
    rep.admissible = true;
    for (int j = 0; j < cfg.N(); ++j) {
        auto leg = factor_admissible(cfg.C[j], *cfg.structured, tol);
        if (!leg.admissible) {
            leg.message = "leg " + std::to_string(j) + ": " + leg.message;
            rep.admissible = false;
        }
        rep.legs.push_back(std::move(leg));
    }
    return rep;
}

TNConfig scale_family(const TNConfig& cfg, double s, double tol) {
    if (s == 0.0) throw PreconditionError("scale parameter must be nonzero");
    const auto rep = admissible_check(cfg, tol);
    if (!rep.admissible) throw PreconditionError("configuration is not admissible");
    const auto d = *cfg.structured;
    const auto base = BlockMatrix::from_dense(cfg.P, d);
    const Mat Pt = lift_diag(project_diag(base));
    std::vector<std::pair<Mat, double>> legs;
    for (int j = 0; j < cfg.N(); ++j) {
        AdmissibleRankOne leg = rep.legs[j].leg;
        for (auto& bi : leg.beta) bi /= s;
        leg.s *= s;
        legs.emplace_back(leg.dense(), cfg.kappa[j]);
    }
    return build_tn(Pt, legs, d);
}

TartarFixture tartar_fixture() {
    auto diag = [](double x, double y) {
        Mat M = Mat::Zero(2, 2);
        M(0, 0) = x;
        M(1, 1) = y;
        return M;
    };
    auto cfg = build_tn(diag(-1, -1), {{diag(1, 0), 2.0}, {diag(0, 1), 2.0}, {diag(-1, 0), 2.0}, {diag(0, -1), 2.0}});
    return {cfg.X, cfg};
}

nlohmann::json mat_to_json(const Mat& M) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        auto row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(row);
    }
    return rows;
}

Mat mat_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw DimensionError("matrix must be a nonempty array of rows");
    const auto r = j.size(), c = j[0].size();
    Mat M(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        if (j[i].size() != c) throw DimensionError("ragged matrix rows");
        for (std::size_t k = 0; k < c; ++k) M(i, k) = j[i][k].get<double>();
    }
    return M;
}

nlohmann::json to_json(const TNConfig& cfg) {
    nlohmann::json j;
    j["P"] = mat_to_json(cfg.P);
    j["legs"] = nlohmann::json::array();
    for (int k = 0; k < cfg.N(); ++k) j["legs"].push_back({{"C", mat_to_json(cfg.C[k])}, {"kappa", cfg.kappa[k]}});
    if (cfg.structured) j["structured"] = {{"m", cfg.structured->m}, {"n", cfg.structured->n}};
    return j;
}

TNConfig tn_from_json(const nlohmann::json& j) {
    std::vector<std::pair<Mat, double>> legs;
    for (const auto& leg : j.at("legs")) legs.emplace_back(mat_from_json(leg.at("C")), leg.at("kappa").get<double>());
    std::optional<ProblemDims> d;
    if (j.contains("structured")) d = ProblemDims(j["structured"].at("m").get<int>(), j["structured"].at("n").get<int>());
    return build_tn(mat_from_json(j.at("P")), legs, d);
}

}  // namespace wci
