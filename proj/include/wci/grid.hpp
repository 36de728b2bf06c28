#pragma once

#include "wci/core_linalg.hpp"

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace wci {

using Index = std::vector<int>;

/// Uniform node grid on an axis-aligned cube in space-time.
/// Axes 0..n-1 are space, axis n is time; axis 0 varies fastest in storage.
struct GridSpec {
    Vec origin;
    double edge = 1.0;
    std::vector<int> resolution;  // nodes per axis

    GridSpec() = default;
    GridSpec(Vec origin_, double edge_, std::vector<int> resolution_);
    static GridSpec cube(int axes, int nodes, double edge = 1.0);

    int axes() const { return static_cast<int>(resolution.size()); }
    double spacing(int k) const { return edge / (resolution[k] - 1); }
    /// Largest spacing over axes.
    double h() const;
    std::size_t node_count() const;
    std::size_t stride(int k) const;
    std::size_t index(const Index& i) const;
    Index multi(std::size_t node) const;
    Vec coord(const Index& i) const;
    Vec coord(std::size_t node) const { return coord(multi(node)); }
    double measure() const;
};

/// Half-open node box [lo_k, hi_k) inside a grid.
struct NodeBox {
    Index lo;
    Index hi;

    static NodeBox full(const GridSpec& g);
    int size(int k) const { return hi[k] - lo[k]; }
    std::size_t count() const;
    bool contains(const Index& i) const;
    template <class F>
    void for_each(F&& f) const {
        const int d = static_cast<int>(lo.size());
        Index i = lo;
        if (count() == 0) return;
        while (true) {
            f(static_cast<const Index&>(i));
            int k = 0;
            while (k < d && ++i[k] == hi[k]) {
                i[k] = lo[k];
                ++k;
            }
            if (k == d) return;
        }
    }
};

/// omega = [u, (v^i)] sampled at nodes, with an optional exact gradient channel.
struct GridField {
    GridSpec grid;
    ProblemDims dims;
    Mat u;  // m x nodes
    Mat v;  // (m n) x nodes, row i n + k holds component k of v^i
    /// Row-major entries of the (m + nm) x (n + 1) gradient block per node.
    std::optional<Mat> exact_gradient;

    static GridField zero(const GridSpec& g, ProblemDims d, bool with_exact = false);

    int channels() const { return dims.m + dims.m * dims.n; }
    double channel(int c, std::size_t node) const { return c < dims.m ? u(c, node) : v(c - dims.m, node); }
    /// dchannel/daxis_k: central inside, one-sided at the boundary.
    double fd_partial(int c, int k, std::size_t node) const;
    Mat fd_gradient(std::size_t node) const;
    /// Exact channel when present, otherwise fd_gradient.
    Mat gradient(std::size_t node) const;
    void set_exact_gradient(std::size_t node, const Mat& G);
    /// Spatial divergence of v^i by fd_partial.
    double divergence(int i, std::size_t node) const;
    double sup_norm() const;
};

/// Scalar samples on a grid plus one ghost layer on every side.
struct GhostedScalar {
    GridSpec grid;
    std::vector<double> values;

    static GhostedScalar sample(const GridSpec& g, const std::function<double(const Vec&)>& fn);
    std::size_t ghost_index(const Index& i) const;  // i may range over [-1, res]
    double at(const Index& i) const { return values[ghost_index(i)]; }
    /// Central difference along k at an interior or boundary node.
    double central(int k, const Index& i) const;
    /// Largest second difference (all mixed and pure entries) over grid nodes.
    double hessian_sup() const;
};

// Binary block: 32-byte header "WCIF", uint16 m, uint16 n, uint32 res[4], double spacing,
// then node-major doubles (u then v per node).
void write_wcif(std::ostream& os, const GridField& f);
GridField read_wcif(std::istream& is);

/// Node coordinates and channel values; stride subsamples every axis.
void write_field_csv(std::ostream& os, const GridField& f, int stride = 1);

}  // namespace wci
