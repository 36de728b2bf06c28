#include <doctest.h>

#include "fixtures.hpp"
#include "wci/hulls.hpp"
#include "wci/tn_config.hpp"

#include <sstream>

using namespace wci;
using wci::testing::diag2;

namespace {
PointCloud rank_one_pair() {
    Vec p(2), a(2);
    p << 1, 2;
    a << -1, 0.5;
    return PointCloud({Mat::Zero(2, 2), p * a.transpose()});
}
}  // namespace

TEST_CASE("rank_one_connected") {
    const Mat X = Mat::Random(3, 2);
    CHECK_FALSE(rank_one_connected(X, X));
    Vec p(3), a(2);
    p << 1, 0, -2;
    a << 0.5, 3;
    CHECK(rank_one_connected(X, X + p * a.transpose()));
    auto fx = tartar_fixture();
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) CHECK_FALSE(rank_one_connected(fx.points[i], fx.points[j]));
}

TEST_CASE("lamination_step counting and fixed points") {
    LaminationOptions opt;
    opt.lambda_samples = 3;
    auto two = rank_one_pair();
    auto s = lamination_step(two, opt);
    CHECK(s.size() == 5);
    for (std::size_t i = 0; i < two.size(); ++i) CHECK((s.points[i] - two.points[i]).norm() == 0.0);
    for (std::size_t i = 2; i < s.size(); ++i) {
        const auto [a, b] = s.parents[i];
        const Mat expect = s.weight[i] * s.points[a] + (1 - s.weight[i]) * s.points[b];
        CHECK((s.points[i] - expect).norm() < 1e-15);
        CHECK(rank_one_connected(s.points[a], s.points[b]));
        CHECK(s.depth[i] == 1);
    }

    PointCloud single({Mat::Identity(2, 2)});
    CHECK(lamination_step(single, opt).size() == 1);

    auto tartar = PointCloud(tartar_fixture().points);
    CHECK(lamination_step(tartar, opt).size() == 4);

    LaminationOptions one;
    one.lambda_samples = 1;
    auto h1 = lamination_hull(two, 1, one);
    auto h2 = lamination_hull(two, 2, one);
    CHECK(h1.cloud.size() == 3);
    CHECK(h2.cloud.size() == h1.cloud.size());
    CHECK(h2.fixed_point);

    auto ht = lamination_hull(tartar, 5);
    CHECK(ht.depth_reached == 0);
    CHECK(ht.fixed_point);
    CHECK(ht.cloud.size() == 4);
    CHECK_THROWS_AS(lamination_hull(tartar, -1), PreconditionError);
}

TEST_CASE("lamination keeps its input on a three-point cloud with two rank-one pairs") {
    // 0 -- e1 e1^T and 0 -- e2 e2^T are rank-one; e1e1^T -- e2e2^T is not.
    PointCloud c({Mat::Zero(2, 2), diag2(1, 0), diag2(0, 1)});
    auto h = lamination_hull(c, 3);
    CHECK(h.fixed_point);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK((h.cloud.points[i] - c.points[i]).norm() == 0.0);
    CHECK(h.cloud.size() > c.size());
    for (std::size_t i = c.size(); i < h.cloud.size(); ++i) {
        const auto [a, b] = h.cloud.parents[i];
        CHECK(rank_one_connected(h.cloud.points[a], h.cloud.points[b]));
    }
}

TEST_CASE("convex_membership") {
    auto fx = tartar_fixture();
    PointCloud c(fx.points);
    auto v = convex_membership(fx.points[2], c);
    CHECK(v.member);
    CHECK(v.coefficients(2) == doctest::Approx(1.0));
    for (int j = 0; j < 4; ++j) {
        auto r = convex_membership(fx.config.anchors[j], c);
        CHECK(r.member);
        CHECK(r.coefficients.minCoeff() >= 0.0);
        CHECK(r.coefficients.sum() == doctest::Approx(1.0));
        Mat R = Mat::Zero(2, 2);
        for (int i = 0; i < 4; ++i) R += r.coefficients(i) * fx.points[i];
        CHECK((R - fx.config.anchors[j]).norm() < 1e-9);
    }
    CHECK_FALSE(convex_membership(diag2(50, 50), c).member);
    // Inside the bounding box but outside the hull.
    CHECK_FALSE(convex_membership(diag2(0.9, 0.9), c).member);
}

TEST_CASE("nnls matches a hand-solved problem") {
    Mat M(3, 2);
    M << 1, 0, 0, 1, 1, 1;
    Vec y(3);
    y << 1, -1, 0;
    // Unconstrained optimum (1, -1) is infeasible; with x2 = 0 the optimum is x1 = 1/2.
    Vec x = nnls(M, y);
    CHECK(x(0) == doctest::Approx(0.5));
    CHECK(x(1) == doctest::Approx(0.0));
}

TEST_CASE("rank-one search in K") {
    RankOneSearchOptions opt;
    opt.samples = 2000;
    auto heat = search_rank_one_in_K(flux::identity({2, 2}), opt);
    CHECK(heat.finding_count == 0);
    CHECK(heat.best_residual >= 0.01 * 0.999);

    opt.samples = 200;
    auto pm = search_rank_one_in_K(flux::perona_malik(), opt);
    CHECK(pm.finding_count > 0);
    auto sig = flux::perona_malik();
    for (const auto& f : pm.findings) {
        const double a = f.A(0, 0), b = a + f.p(0) * f.alpha(0);
        CHECK(std::abs(sig(Mat::Constant(1, 1, a))(0, 0) - sig(Mat::Constant(1, 1, b))(0, 0)) < 1e-6);
        CHECK(std::abs(b - a) > 0.0099);
    }
    RankOneSearchOptions zero;
    zero.samples = 0;
    CHECK_THROWS_AS(search_rank_one_in_K(sig, zero), PreconditionError);
}

TEST_CASE("CSV export") {
    std::ostringstream os;
    write_csv(os, rank_one_pair());
    const auto s = os.str();
    CHECK(s.rfind("depth,x0,x1,x2,x3\n", 0) == 0);
    CHECK(std::count(s.begin(), s.end(), '\n') == 3);
}
