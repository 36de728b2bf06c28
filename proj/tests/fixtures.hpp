#pragma once

#include "wci/tn_config.hpp"

#include <random>

namespace wci::testing {

// Closed rank-one legs: each leg is c e_k (x) e_k in a diagonal coordinate k, with the values of every
// coordinate group summing to zero, then mixed by random invertible L and R.
inline TNConfig random_tn(std::mt19937_64& rng, int N, int rows, int cols) {
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> kap(1.2, 4.0);
    const int groups = std::max(1, std::min({N / 2, rows, cols}));
    std::vector<int> group(N);
    for (int j = 0; j < N; ++j) group[j] = j % groups;
    std::vector<double> val(N);
    for (int k = 0; k < groups; ++k) {
        double sum = 0.0;
        int last = -1;
        for (int j = 0; j < N; ++j)
            if (group[j] == k) {
                val[j] = g(rng);
                if (std::abs(val[j]) < 0.3) val[j] = val[j] < 0 ? -0.3 : 0.3;
                sum += val[j];
                last = j;
            }
        val[last] -= sum;
        if (std::abs(val[last]) < 0.3) {
            val[last] += val[last] < 0 ? -0.5 : 0.5;
            for (int j = 0; j < N; ++j)
                if (group[j] == k && j != last) {
                    val[j] -= val[last] < 0 ? -0.5 : 0.5;
                    break;
                }
        }
    }
    Mat L = Mat::NullaryExpr(rows, rows, [&] { return g(rng); }) + 3.0 * Mat::Identity(rows, rows);
    Mat R = Mat::NullaryExpr(cols, cols, [&] { return g(rng); }) + 3.0 * Mat::Identity(cols, cols);
    std::vector<std::pair<Mat, double>> legs;
    for (int j = 0; j < N; ++j) {
        Mat C = Mat::Zero(rows, cols);
        C(group[j], group[j]) = val[j];
        legs.emplace_back(L * C * R, kap(rng));
    }
    Mat P = Mat::NullaryExpr(rows, cols, [&] { return g(rng); });
    return build_tn(P, legs);
}

inline Mat diag2(double x, double y) {
    Mat M = Mat::Zero(2, 2);
    M(0, 0) = x;
    M(1, 1) = y;
    return M;
}

}  // namespace wci::testing
