#include "wci/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace wci {

GridSpec::GridSpec(Vec origin_, double edge_, std::vector<int> resolution_)
    : origin(std::move(origin_)), edge(edge_), resolution(std::move(resolution_)) {
    if (origin.size() != static_cast<Eigen::Index>(resolution.size()))
        throw DimensionError("grid origin and resolution disagree");
    if (!(edge > 0.0)) throw PreconditionError("grid edge must be positive");
    for (int r : resolution)
        if (r < 8) throw PreconditionError("grid resolution below 8 nodes per axis");
}

GridSpec GridSpec::cube(int axes, int nodes, double edge) {
    return GridSpec(Vec::Zero(axes), edge, std::vector<int>(axes, nodes));
}

double GridSpec::h() const {
    double s = 0.0;
    for (int k = 0; k < axes(); ++k) s = std::max(s, spacing(k));
    return s;
}

std::size_t GridSpec::node_count() const {
    std::size_t c = 1;
    for (int r : resolution) c *= static_cast<std::size_t>(r);
    return c;
}

std::size_t GridSpec::stride(int k) const {
    std::size_t s = 1;
    for (int j = 0; j < k; ++j) s *= static_cast<std::size_t>(resolution[j]);
    return s;
}

std::size_t GridSpec::index(const Index& i) const {
    std::size_t idx = 0;
    for (int k = axes() - 1; k >= 0; --k) idx = idx * resolution[k] + i[k];
    return idx;
}

Index GridSpec::multi(std::size_t node) const {
    Index i(axes());
    for (int k = 0; k < axes(); ++k) {
        i[k] = static_cast<int>(node % resolution[k]);
        node /= resolution[k];
    }
    return i;
}

Vec GridSpec::coord(const Index& i) const {
    Vec x(axes());
    for (int k = 0; k < axes(); ++k) x(k) = origin(k) + i[k] * spacing(k);
    return x;
}

double GridSpec::measure() const { return std::pow(edge, axes()); }

NodeBox NodeBox::full(const GridSpec& g) { return {Index(g.axes(), 0), g.resolution}; }

std::size_t NodeBox::count() const {
    std::size_t c = 1;
    for (std::size_t k = 0; k < lo.size(); ++k) c *= static_cast<std::size_t>(std::max(0, hi[k] - lo[k]));
    return c;
}

bool NodeBox::contains(const Index& i) const {
    for (std::size_t k = 0; k < lo.size(); ++k)
        if (i[k] < lo[k] || i[k] >= hi[k]) return false;
    return true;
}

GridField GridField::zero(const GridSpec& g, ProblemDims d, bool with_exact) {
    if (g.axes() != d.n + 1) throw DimensionError("grid axes must equal n + 1");
    GridField f;
    f.grid = g;
    f.dims = d;
    const auto N = static_cast<Eigen::Index>(g.node_count());
    f.u = Mat::Zero(d.m, N);
    f.v = Mat::Zero(d.m * d.n, N);
    if (with_exact) f.exact_gradient = Mat::Zero(d.rows() * d.cols(), N);
    return f;
}

double GridField::fd_partial(int c, int k, std::size_t node) const {
    const int r = grid.resolution[k];
    const int ik = static_cast<int>((node / grid.stride(k)) % r);
    const std::size_t s = grid.stride(k);
    const double hk = grid.spacing(k);
    if (ik == 0) return (channel(c, node + s) - channel(c, node)) / hk;
    if (ik == r - 1) return (channel(c, node) - channel(c, node - s)) / hk;
    return (channel(c, node + s) - channel(c, node - s)) / (2.0 * hk);
}

Mat GridField::fd_gradient(std::size_t node) const {
    Mat G(dims.rows(), dims.cols());
    for (int c = 0; c < channels(); ++c)
        for (int k = 0; k < grid.axes(); ++k) G(c, k) = fd_partial(c, k, node);
    return G;
}

Mat GridField::gradient(std::size_t node) const {
    if (!exact_gradient) return fd_gradient(node);
    const int R = dims.rows(), C = dims.cols();
    Mat G(R, C);
    for (int a = 0; a < R; ++a)
        for (int b = 0; b < C; ++b) G(a, b) = (*exact_gradient)(a * C + b, node);
    return G;
}

void GridField::set_exact_gradient(std::size_t node, const Mat& G) {
    if (!exact_gradient) exact_gradient = Mat::Zero(dims.rows() * dims.cols(), grid.node_count());
    const int R = dims.rows(), C = dims.cols();
    for (int a = 0; a < R; ++a)
        for (int b = 0; b < C; ++b) (*exact_gradient)(a * C + b, node) = G(a, b);
}

double GridField::divergence(int i, std::size_t node) const {
    double d = 0.0;
    for (int k = 0; k < dims.n; ++k) d += fd_partial(dims.m + i * dims.n + k, k, node);
    return d;
}

double GridField::sup_norm() const {
    double s = 0.0;
    if (u.size()) s = std::max(s, u.cwiseAbs().maxCoeff());
    if (v.size()) s = std::max(s, v.cwiseAbs().maxCoeff());
    return s;
}

GhostedScalar GhostedScalar::sample(const GridSpec& g, const std::function<double(const Vec&)>& fn) {
    GhostedScalar s;
    s.grid = g;
    std::vector<int> ext(g.resolution);
    std::size_t total = 1;
    for (int& e : ext) total *= static_cast<std::size_t>(e += 2);
    s.values.resize(total);
    Index lo(g.axes(), -1), hi(g.resolution);
    for (int& e : hi) ++e;
    NodeBox{lo, hi}.for_each([&](const Index& i) { s.values[s.ghost_index(i)] = fn(g.coord(i)); });
    return s;
}

std::size_t GhostedScalar::ghost_index(const Index& i) const {
    std::size_t idx = 0;
    for (int k = grid.axes() - 1; k >= 0; --k) idx = idx * (grid.resolution[k] + 2) + (i[k] + 1);
    return idx;
}

double GhostedScalar::central(int k, const Index& i) const {
    Index a = i, b = i;
    ++a[k];
    --b[k];
    return (at(a) - at(b)) / (2.0 * grid.spacing(k));
}

double GhostedScalar::hessian_sup() const {
    const int d = grid.axes();
    double s = 0.0;
    NodeBox::full(grid).for_each([&](const Index& i) {
        for (int k = 0; k < d; ++k) {
            Index p = i, q = i;
            ++p[k];
            --q[k];
            const double hk = grid.spacing(k);
            s = std::max(s, std::abs(at(p) - 2.0 * at(i) + at(q)) / (hk * hk));
            for (int l = k + 1; l < d; ++l) {
                Index pp = i, pm = i, mp = i, mm = i;
                ++pp[k], ++pp[l];
                ++pm[k], --pm[l];
                --mp[k], ++mp[l];
                --mm[k], --mm[l];
                const double hl = grid.spacing(l);
                s = std::max(s, std::abs(at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * hk * hl));
            }
        }
    });
    return s;
}

namespace {
template <class T>
void put(std::ostream& os, T x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(T));
}
template <class T>
T get(std::istream& is) {
    T x{};
    is.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!is) throw PreconditionError("truncated WCIF stream");
    return x;
}
}  // namespace

void write_wcif(std::ostream& os, const GridField& f) {
    if (f.grid.axes() > 4) throw DimensionError("WCIF supports at most 4 axes");
    os.write("WCIF", 4);
    put<std::uint16_t>(os, static_cast<std::uint16_t>(f.dims.m));
    put<std::uint16_t>(os, static_cast<std::uint16_t>(f.dims.n));
    for (int k = 0; k < 4; ++k) put<std::uint32_t>(os, k < f.grid.axes() ? f.grid.resolution[k] : 0u);
    put<double>(os, f.grid.spacing(0));
    const std::size_t N = f.grid.node_count();
    for (std::size_t node = 0; node < N; ++node)
        for (int c = 0; c < f.channels(); ++c) put<double>(os, f.channel(c, node));
}

GridField read_wcif(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "WCIF", 4) != 0) throw PreconditionError("not a WCIF stream");
    const int m = get<std::uint16_t>(is);
    const int n = get<std::uint16_t>(is);
    std::vector<int> res;
    for (int k = 0; k < 4; ++k) {
        const auto r = get<std::uint32_t>(is);
        if (r) res.push_back(static_cast<int>(r));
    }
    const double h = get<double>(is);
    GridSpec g(Vec::Zero(static_cast<Eigen::Index>(res.size())), h * (res[0] - 1), res);
    GridField f = GridField::zero(g, {m, n});
    const std::size_t N = g.node_count();
    for (std::size_t node = 0; node < N; ++node) {
        for (int c = 0; c < m; ++c) f.u(c, node) = get<double>(is);
        for (int c = 0; c < m * n; ++c) f.v(c, node) = get<double>(is);
    }
    return f;
}

void write_field_csv(std::ostream& os, const GridField& f, int stride) {
    if (stride < 1) throw PreconditionError("csv stride must be positive");
    const int n = f.dims.n, m = f.dims.m;
    for (int k = 0; k < n; ++k) os << 'x' << k << ',';
    os << 't';
    for (int i = 0; i < m; ++i) os << ",u" << i;
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < n; ++k) os << ",v" << i << '_' << k;
    os << '\n';
    const auto old = os.precision(17);
    NodeBox::full(f.grid).for_each([&](const Index& i) {
        for (int k = 0; k < f.grid.axes(); ++k)
            if (i[k] % stride) return;
        const std::size_t node = f.grid.index(i);
        const Vec x = f.grid.coord(i);
        for (int k = 0; k < x.size(); ++k) os << (k ? "," : "") << x(k);
        for (int c = 0; c < f.channels(); ++c) os << ',' << f.channel(c, node);
        os << '\n';
    });
    os.precision(old);
}

}  // namespace wci
