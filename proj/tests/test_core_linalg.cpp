#include <doctest.h>

#include "wci/core_linalg.hpp"

#include <random>

using namespace wci;

namespace {
Mat m1(double x) { return Mat::Constant(1, 1, x); }
Vec v1(double x) { return Vec::Constant(1, x); }
}  // namespace

TEST_CASE("block_compose assembles and round-trips") {
    auto X = block_compose(m1(2), v1(0), {m1(0)}, {v1(0.4)});
    Mat D = X.dense();
    Mat expect(2, 2);
    expect << 2, 0, 0, 0.4;
    CHECK((D - expect).norm() == 0.0);

    auto Z = BlockMatrix::zero({2, 3});
    CHECK(Z.dense().rows() == 8);
    CHECK(Z.dense().cols() == 4);
    CHECK(Z.dense().norm() == 0.0);

    CHECK_THROWS_AS(block_compose(m1(1), v1(0), {Mat::Zero(2, 2)}, {v1(0)}), DimensionError);
    CHECK_THROWS_AS(ProblemDims(0, 1), DimensionError);
}

TEST_CASE("project_diag recovers the diagonal blocks for random inputs") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 1 + trial % 3, n = 1 + (trial / 3) % 3;
        auto rnd = [&](int r, int c) {
            Mat M(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) M(i, j) = g(rng);
            return M;
        };
        Mat A = rnd(m, n);
        Vec a = rnd(m, 1);
        std::vector<Mat> B;
        std::vector<Vec> b;
        for (int i = 0; i < m; ++i) {
            B.push_back(rnd(n, n));
            b.push_back(rnd(n, 1));
        }
        auto X = block_compose(A, a, B, b);
        auto back = BlockMatrix::from_dense(X.dense(), {m, n});
        CHECK((back.dense() - X.dense()).norm() == 0.0);
        auto p = project_diag(X);
        CHECK((p.A - A).norm() == 0.0);
        for (int i = 0; i < m; ++i) CHECK((p.b[i] - b[i]).norm() == 0.0);
        auto q = project_diag(lift_diag(p), {m, n});
        CHECK((q.flatten() - p.flatten()).norm() == 0.0);
    }
}

TEST_CASE("numeric_rank basics and invariance") {
    CHECK(numeric_rank(Mat::Zero(3, 2)) == 0);
    Vec p(3), al(2);
    p << 1, -2, 0.5;
    al << 0.3, 4;
    CHECK(numeric_rank(p * al.transpose()) == 1);
    CHECK(numeric_rank(Mat::Identity(3, 3)) == 3);

    std::mt19937_64 rng(11);
    std::normal_distribution<double> g;
    for (int t = 0; t < 10; ++t) {
        Mat M = Mat::Zero(5, 4);
        const int r = 1 + t % 4;
        for (int k = 0; k < r; ++k) {
            Vec u(5), w(4);
            for (auto& x : u) x = g(rng);
            for (auto& x : w) x = g(rng);
            M += u * w.transpose();
        }
        Mat Q1 = Eigen::HouseholderQR<Mat>(Mat::Random(5, 5)).householderQ();
        Mat Q2 = Eigen::HouseholderQR<Mat>(Mat::Random(4, 4)).householderQ();
        CHECK(numeric_rank(M, 1e-10) == r);
        CHECK(numeric_rank(M.transpose(), 1e-10) == r);
        CHECK(numeric_rank(Q1 * M * Q2, 1e-10) == r);
    }
}

TEST_CASE("graph_point for the catalog fluxes") {
    auto pm = flux::perona_malik();
    CHECK(graph_point(pm, m1(2)).b[0](0) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(graph_point(pm, m1(0.5)).b[0](0) == doctest::Approx(0.4).epsilon(1e-15));
    auto id = flux::identity({2, 2});
    auto gp = graph_point(id, Mat::Identity(2, 2));
    CHECK(gp.b[0](0) == 1.0);
    CHECK(gp.b[0](1) == 0.0);
    CHECK(gp.b[1](1) == 1.0);
    auto cu = flux::cubic();
    CHECK(cu(m1(2))(0, 0) == doctest::Approx(6.0));
    CHECK_THROWS_AS(flux::by_label("nope", {1, 1}), PreconditionError);
    CHECK(flux::by_label("pm", {1, 1}).label == "perona-malik");
}

TEST_CASE("analytic Jacobians agree with finite differences") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-1.5, 1.5);
    Mat M(2, 2);
    M << 2, 1, 0, 3;
    for (const auto& f : {flux::perona_malik({2, 3}), flux::cubic({2, 3}), flux::identity({2, 3}),
                          flux::linear(M, 3)}) {
        Mat A(2, 3);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) A(i, j) = U(rng);
        CHECK((f.jacobian(A) - fd_jacobian(f.evaluate, A)).cwiseAbs().maxCoeff() < 1e-7);
    }
    auto pm = flux::perona_malik();
    CHECK(pm.jacobian(m1(2))(0, 0) == doctest::Approx(-0.12));
    CHECK(pm.jacobian(m1(0.5))(0, 0) == doctest::Approx(0.48));
}

TEST_CASE("in_constraint_set") {
    auto pm = flux::perona_malik();
    const double tol = 1e-8;
    auto X = block_compose(m1(2), v1(0), {m1(0)}, {v1(0.4)});
    auto r = in_constraint_set(X, pm, v1(0), tol);
    CHECK(r.member);
    X.b[0](0) += 10 * tol;
    r = in_constraint_set(X, pm, v1(0), tol);
    CHECK_FALSE(r.member);
    CHECK(r.flux_residual == doctest::Approx(10 * tol).epsilon(1e-6));
    auto Y = block_compose(m1(0.5), v1(3), {m1(0.7)}, {v1(0.4)});
    CHECK(in_constraint_set(Y, pm, v1(0.7), tol).member);
    CHECK_FALSE(in_constraint_set(Y, pm, v1(0.0), tol).member);
    CHECK_THROWS_AS(in_constraint_set(Y, pm, v1(0.7), 0.0), PreconditionError);
}

TEST_CASE("graph lifts with traceless B lie in K(0) for every tolerance") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    auto pm = flux::perona_malik({2, 2});
    for (int t = 0; t < 20; ++t) {
        Mat A(2, 2);
        A << g(rng), g(rng), g(rng), g(rng);
        const Mat S = pm(A);
        std::vector<Mat> B;
        std::vector<Vec> b;
        for (int i = 0; i < 2; ++i) {
            Mat Bi(2, 2);
            Bi << g(rng), g(rng), g(rng), 0;
            Bi(1, 1) = -Bi(0, 0);
            B.push_back(Bi);
            b.push_back(S.row(i).transpose());
        }
        auto X = block_compose(A, Vec::Random(2), B, b);
        CHECK(in_constraint_set(X, pm, Vec::Zero(2), 1e-14).member);
    }
}

TEST_CASE("parabolicity and monotonicity sampling") {
    Sampler s;
    s.count = 500;
    auto id = flux::identity({2, 2});
    CHECK(parabolicity_sample(id, s, 1.0).min_margin >= -1e-12);
    CHECK(monotonicity_sample(id, s, 1.0).min_margin >= -1e-12);
    Mat two = 2.0 * Mat::Identity(2, 2);
    CHECK(monotonicity_sample(flux::linear(two, 2), s, 2.0).min_margin >= -1e-12);

    Sampler w;
    w.count = 0;
    w.rank_one_extra.emplace_back(m1(2), v1(1), v1(1));
    auto pm = flux::perona_malik();
    auto rep = parabolicity_sample(pm, w, 1e-3);
    CHECK_FALSE(rep.passed);
    CHECK(rep.min_margin == doctest::Approx(-0.1 - 1e-3));
    REQUIRE(rep.witness_A);
    CHECK((*rep.witness_A)(0, 0) == 2.0);
    CHECK_FALSE(monotonicity_sample(pm, w, 1e-3).passed);

    Sampler none;
    none.count = 0;
    CHECK_THROWS_AS(parabolicity_sample(pm, none, 1.0), PreconditionError);
    CHECK_THROWS_AS(monotonicity_sample(pm, none, 1.0), PreconditionError);
}

TEST_CASE("monotone flux passing implies rank-one passing on the same samples") {
    Mat M(2, 2);
    M << 3, 1, 1, 2;
    auto f = flux::linear(M, 2);
    Sampler s;
    s.count = 0;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g;
    for (int k = 0; k < 200; ++k) {
        Mat A = Mat::NullaryExpr(2, 2, [&] { return g(rng); });
        Vec p = Vec::NullaryExpr(2, [&] { return g(rng); });
        Vec al = Vec::NullaryExpr(2, [&] { return g(rng); });
        s.rank_one_extra.emplace_back(A, p, al);
    }
    const double nu = 0.5 * (3 + 2 - std::sqrt(5.0));
    auto mono = monotonicity_sample(f, s, nu * 0.999);
    auto para = parabolicity_sample(f, s, nu * 0.999);
    CHECK(mono.passed);
    CHECK(para.passed);
}
