#include <doctest.h>

#include "fixtures.hpp"
#include "wci/tn_config.hpp"

#include <cmath>

using namespace wci;
using wci::testing::diag2;

namespace {

// Solve W_{j+1} - lambda_j W_j = e_j / kappa_j cyclically as one (N^2 x N^2) linear system.
std::vector<Vec> recursion_weights(const TNConfig& cfg) {
    const int N = cfg.N();
    Mat M = Mat::Zero(N * N, N * N);
    Vec rhs = Vec::Zero(N * N);
    for (int j = 0; j < N; ++j) {
        const int nxt = (j + 1) % N;
        for (int i = 0; i < N; ++i) {
            M(nxt * N + i, nxt * N + i) += 1.0;
            M(nxt * N + i, j * N + i) -= cfg.lambda(j);
        }
        rhs(nxt * N + j) = 1.0 / cfg.kappa[j];
    }
    Vec W = M.fullPivLu().solve(rhs);
    std::vector<Vec> out;
    for (int j = 0; j < N; ++j) out.push_back(W.segment(j * N, N));
    return out;
}

}  // namespace

TEST_CASE("Tartar square corners and anchors") {
    auto fx = tartar_fixture();
    const auto& cfg = fx.config;
    REQUIRE(cfg.N() == 4);
    const Mat Xe[4] = {diag2(1, -1), diag2(0, 1), diag2(-2, 0), diag2(-1, -2)};
    const Mat Pe[4] = {diag2(-1, -1), diag2(0, -1), diag2(0, 0), diag2(-1, 0)};
    for (int j = 0; j < 4; ++j) {
        CHECK((cfg.X[j] - Xe[j]).norm() == 0.0);
        CHECK((cfg.anchors[j] - Pe[j]).norm() == 0.0);
    }
    const double dets[4][4] = {{0, -2, -3, 2}, {0, 0, 2, 3}, {0, 0, 0, -2}, {0, 0, 0, 0}};
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
            const Mat D = fx.points[i] - fx.points[j];
            CHECK(D.determinant() == doctest::Approx(dets[i][j]));
            CHECK(numeric_rank(D) == 2);
        }
    for (int j = 0; j < 4; ++j) {
        const Vec nu = convex_coeffs(cfg, j);
        Mat R = Mat::Zero(2, 2);
        for (int i = 0; i < 4; ++i) R += nu(i) * cfg.X[i];
        CHECK((R - cfg.anchors[j]).norm() < 1e-10);
    }
}

TEST_CASE("two-leg configuration") {
    Vec p(2), a(2);
    p << 1, 2;
    a << 0.5, -1;
    const Mat C1 = p * a.transpose();
    const Mat P = Mat::Identity(2, 2);
    auto cfg = build_tn(P, {{C1, 2.0}, {-C1, 2.0}});
    CHECK((cfg.X[0] - (P + 2 * C1)).norm() < 1e-15);
    CHECK((cfg.X[1] - (P - C1)).norm() < 1e-15);
    CHECK(cfg.has_collinear_legs());
    const Vec nu = convex_coeffs(cfg, 0);
    CHECK(nu(0) == doctest::Approx(1.0 / 3.0));
    CHECK(nu(1) == doctest::Approx(2.0 / 3.0));
    CHECK_FALSE(tartar_fixture().config.has_collinear_legs());
}

TEST_CASE("build_tn errors") {
    const Mat C = diag2(1, 0);
    CHECK_THROWS_WITH_AS(build_tn(Mat::Zero(2, 2), {{C, 2.0}, {diag2(0, 1), 2.0}}), "legs do not close",
                         PreconditionError);
    CHECK_THROWS_WITH_AS(build_tn(Mat::Zero(2, 2), {{C, 1.0}, {-C, 2.0}}), doctest::Contains("factor not greater"),
                         PreconditionError);
    CHECK_THROWS_WITH_AS(build_tn(Mat::Zero(2, 2), {{Mat::Identity(2, 2), 2.0}, {-Mat::Identity(2, 2), 2.0}}),
                         doctest::Contains("leg not rank-one"), PreconditionError);
    CHECK_THROWS_AS(build_tn(Mat::Zero(2, 2), {{C, 2.0}}), PreconditionError);
}

TEST_CASE("convex coefficients against the recursion oracle on random configurations") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 40; ++trial) {
        const int N = 2 + trial % 5;
        auto cfg = testing::random_tn(rng, N, 3, 2);
        const auto W = recursion_weights(cfg);
        for (int j = 0; j < N; ++j) {
            const Vec nu = convex_coeffs(cfg, j);
            CHECK((nu - W[j]).cwiseAbs().maxCoeff() < 1e-10);
            CHECK(nu.sum() == doctest::Approx(1.0).epsilon(1e-13));
            CHECK(nu.minCoeff() > 0.0);
            CHECK(nu.maxCoeff() < 1.0);
            Mat R = Mat::Zero(3, 2);
            for (int i = 0; i < N; ++i) R += nu(i) * cfg.X[i];
            CHECK((R - cfg.anchors[j]).norm() < 1e-9);
            const int nx = (j + 1) % N;
            const Mat step = cfg.X[j] / cfg.kappa[j] + cfg.lambda(j) * cfg.anchors[j];
            CHECK((step - cfg.anchors[nx]).norm() < 1e-10);
        }
    }
}

TEST_CASE("dist_to_segments") {
    auto cfg = tartar_fixture().config;
    CHECK(dist_to_segments(cfg, cfg.X[0]) == 0.0);
    CHECK(dist_to_segments(cfg, 0.5 * (cfg.X[1] + cfg.anchors[1])) < 1e-15);
    // Per-segment projections by hand: sqrt(52), sqrt(41), sqrt(50), sqrt(61).
    CHECK(dist_to_segments(cfg, diag2(5, 5)) == doctest::Approx(std::sqrt(41.0)).epsilon(1e-14));
    CHECK_THROWS_AS(dist_to_segments(cfg, Mat::Zero(3, 3)), DimensionError);
}

TEST_CASE("shrink keeps corners on the original segments") {
    auto cfg = tartar_fixture().config;
    auto s = shrink(cfg, {1.5, 1.5, 1.5, 1.5});
    for (int j = 0; j < 4; ++j) CHECK(dist_to_segments(cfg, s.X[j]) < 1e-12);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> U(0, 1);
    for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 25; ++k) {
            const double t = U(rng);
            CHECK(dist_to_segments(cfg, t * s.X[j] + (1 - t) * s.anchors[j]) < 1e-12);
        }
    std::vector<double> mid;
    for (double k : cfg.kappa) mid.push_back((1 + k) / 2);
    auto m = shrink(cfg, mid);
    for (int j = 0; j < 4; ++j) {
        CHECK(dist_to_segments(cfg, m.X[j]) < 1e-12);
        CHECK((m.X[j] - cfg.X[j]).norm() > 0.1);
        CHECK((m.X[j] - cfg.anchors[j]).norm() > 0.1);
    }
    CHECK_THROWS_AS(shrink(cfg, {1.0, 1.5, 1.5, 1.5}), PreconditionError);
    CHECK_THROWS_AS(shrink(cfg, {2.0, 1.5, 1.5, 1.5}), PreconditionError);
}

namespace {
AdmissibleRankOne leg11(double p, double alpha, double s) {
    AdmissibleRankOne l;
    l.p = Vec::Constant(1, p);
    l.alpha = Vec::Constant(1, alpha);
    l.s = s;
    l.beta = {Vec::Zero(1)};
    return l;
}
}  // namespace

TEST_CASE("admissible_check") {
    const ProblemDims d(1, 1);
    auto l = leg11(1.5, 1.0, 0.3);
    auto cfg = build_tn(Mat::Zero(2, 2), {{l.dense(), 2.0}, {-l.dense(), 2.0}}, d);
    auto rep = admissible_check(cfg);
    CHECK(rep.admissible);
    CHECK(rep.legs[0].leg.alpha(0) == doctest::Approx(1.0));
    CHECK(rep.legs[0].leg.p(0) == doctest::Approx(1.5));
    CHECK(rep.legs[0].leg.s == doctest::Approx(0.3));
    CHECK(rep.legs[1].leg.p(0) == doctest::Approx(-1.5));

    // beta . alpha = 0.5 for m = 1, n = 2.
    const ProblemDims d2(1, 2);
    AdmissibleRankOne bad;
    bad.p = Vec::Constant(1, 1.0);
    bad.alpha = Vec::Zero(2);
    bad.alpha(0) = 1.0;
    bad.s = 0.0;
    bad.beta = {Vec::Zero(2)};
    bad.beta[0](0) = 0.5;
    auto cfg2 = build_tn(Mat::Zero(3, 3), {{bad.dense(), 2.0}, {-bad.dense(), 2.0}}, d2);
    auto rep2 = admissible_check(cfg2);
    CHECK_FALSE(rep2.admissible);
    CHECK(rep2.legs[0].orthogonality_defect == doctest::Approx(0.5));
    CHECK(rep2.legs[0].message.find("leg 0") != std::string::npos);

    // alpha = 0 with s != 0 is rank-one but not admissible.
    Mat T = Mat::Zero(2, 2);
    T(0, 1) = 1.0;
    auto cfg3 = build_tn(Mat::Zero(2, 2), {{T, 2.0}, {-T, 2.0}}, d);
    CHECK_FALSE(admissible_check(cfg3).admissible);

    CHECK_THROWS_AS(admissible_check(tartar_fixture().config), DimensionError);
}

TEST_CASE("scale_family preserves the diagonal projection") {
    const ProblemDims d(2, 2);
    // Two admissible legs with beta . alpha = 0 and a nontrivial base.
    AdmissibleRankOne l1;
    l1.p = Vec(2);
    l1.p << 1.0, -0.5;
    l1.alpha = Vec(2);
    l1.alpha << 0.6, 0.8;
    l1.s = 0.7;
    l1.beta = {Vec(2), Vec(2)};
    l1.beta[0] << -0.8, 0.6;
    l1.beta[1] << 1.6, -1.2;
    AdmissibleRankOne l2 = l1;
    l2.p = -l1.p;
    for (auto& b : l2.beta) b = -b;
    Mat P = Mat::Random(d.rows(), d.cols());
    auto cfg = build_tn(P, {{l1.dense(), 3.0}, {l2.dense(), 1.5}}, d);
    REQUIRE(admissible_check(cfg).admissible);

    auto s1 = scale_family(cfg, 1.0);
    const Mat Pt = lift_diag(project_diag(P, d));
    auto zero_based = build_tn(Pt, {{cfg.C[0], 3.0}, {cfg.C[1], 1.5}}, d);
    for (int j = 0; j < 2; ++j) CHECK((s1.X[j] - zero_based.X[j]).norm() < 1e-12);

    for (double s : {2.0, -0.3, 17.0}) {
        auto sc = scale_family(cfg, s);
        CHECK(admissible_check(sc).admissible);
        for (int j = 0; j < 2; ++j) {
            CHECK((project_diag(sc.X[j], d).flatten() - project_diag(cfg.X[j], d).flatten()).norm() < 1e-12);
            CHECK((project_diag(sc.anchors[j], d).flatten() - project_diag(cfg.anchors[j], d).flatten()).norm() <
                  1e-12);
            auto blk = BlockMatrix::from_dense(sc.C[j], d);
            for (const auto& Bi : blk.B) CHECK(std::abs(Bi.trace()) < 1e-12);
            auto orig = BlockMatrix::from_dense(cfg.C[j], d);
            CHECK((blk.a - s * orig.a).norm() < 1e-12);
            for (int i = 0; i < 2; ++i) CHECK((blk.B[i] - orig.B[i] / s).norm() < 1e-12);
        }
    }
    CHECK_THROWS_AS(scale_family(cfg, 0.0), PreconditionError);
}

TEST_CASE("scale_family keeps graph-lift corners in K(0)") {
    // m = n = 1 two-state configuration on the Perona-Malik graph: corners (2, 0.4) and (0.5, 0.4).
    const ProblemDims d(1, 1);
    auto pm = flux::perona_malik();
    const Mat X1 = lift_diag(graph_point(pm, Mat::Constant(1, 1, 2.0)));
    const Mat X2 = lift_diag(graph_point(pm, Mat::Constant(1, 1, 0.5)));
    auto l = leg11(0.5, 1.0, 0.0);
    const Mat P = X2 + l.dense();
    auto cfg = build_tn(P, {{l.dense(), 2.0}, {-l.dense(), 2.0}}, d);
    CHECK((cfg.X[0] - X1).norm() < 1e-15);
    CHECK((cfg.X[1] - X2).norm() < 1e-15);
    auto sc = scale_family(cfg, 5.0);
    for (const auto& X : sc.X)
        CHECK(in_constraint_set(BlockMatrix::from_dense(X, d), pm, Vec::Zero(1), 1e-12).member);
}

TEST_CASE("JSON round trip") {
    auto cfg = tartar_fixture().config;
    auto back = tn_from_json(nlohmann::json::parse(to_json(cfg).dump()));
    REQUIRE(back.N() == 4);
    for (int j = 0; j < 4; ++j) CHECK((back.X[j] - cfg.X[j]).norm() == 0.0);
    CHECK_FALSE(back.structured);
}
