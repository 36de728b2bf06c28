#include "wci/refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace wci {

namespace {

// Trapezoid weight of a node on its grid.
double node_weight(const GridSpec& g, const Index& i) {
    double w = 1.0;
    for (int k = 0; k < g.axes(); ++k) {
        w *= g.spacing(k);
        if (i[k] == 0 || i[k] == g.resolution[k] - 1) w *= 0.5;
    }
    return w;
}

bool on_boundary(const GridSpec& g, const Index& i) {
    for (int k = 0; k < g.axes(); ++k)
        if (i[k] == 0 || i[k] == g.resolution[k] - 1) return true;
    return false;
}

// Cumulative trapezoid along the fastest axis of every line; the last node of a line is pinned to zero.
void cumulative(const std::vector<double>& r, int n0, double h0, std::vector<double>& out) {
    const std::size_t lines = r.size() / n0;
    for (std::size_t line = 0; line < lines; ++line) {
        const std::size_t base = line * n0;
        out[base] = 0.0;
        for (int i = 1; i < n0; ++i) out[base + i] = out[base + i - 1] + 0.5 * h0 * (r[base + i - 1] + r[base + i]);
        out[base + n0 - 1] = 0.0;
    }
}

// Antiderivative in x_1 against a unit-mass profile, recursing on the remaining space axes.
std::vector<std::vector<double>> invert(const std::vector<int>& res, const std::vector<double>& hs,
                                        const std::vector<double>& u) {
    const int ns = static_cast<int>(res.size()) - 1;
    const int n0 = res[0];
    const double h0 = hs[0];
    const std::size_t lines = u.size() / n0;
    std::vector<std::vector<double>> v(ns, std::vector<double>(u.size(), 0.0));
    if (ns == 1) {
        cumulative(u, n0, h0, v[0]);
        return v;
    }
    std::vector<double> w(n0);
    double mass = 0.0;
    for (int i = 0; i < n0; ++i) {
        const double s = std::sin(M_PI * i / (n0 - 1));
        w[i] = s * s;
        mass += w[i] * h0;  // boundary weights vanish, so this is the trapezoid sum
    }
    for (auto& x : w) x /= mass;
    std::vector<double> U(lines, 0.0), r(u.size());
    for (std::size_t line = 0; line < lines; ++line) {
        const std::size_t base = line * n0;
        double s = 0.0;
        for (int i = 0; i < n0; ++i) s += u[base + i] * h0 * ((i == 0 || i == n0 - 1) ? 0.5 : 1.0);
        U[line] = s;
        for (int i = 0; i < n0; ++i) r[base + i] = u[base + i] - w[i] * s;
    }
    cumulative(r, n0, h0, v[0]);
    const auto V = invert(std::vector<int>(res.begin() + 1, res.end()), std::vector<double>(hs.begin() + 1, hs.end()), U);
    for (int k = 1; k < ns; ++k)
        for (std::size_t line = 0; line < lines; ++line)
            for (int i = 0; i < n0; ++i) v[k][line * n0 + i] = w[i] * V[k - 1][line];
    return v;
}

Mat block_at(const Mat& E, std::size_t col, int R, int C) {
    Mat G(R, C);
    for (int a = 0; a < R; ++a)
        for (int b = 0; b < C; ++b) G(a, b) = E(a * C + b, col);
    return G;
}

double diag_residual_sq(const FluxFunction& sigma, const DiagPoint& y) {
    const Mat S = sigma(y.A);
    double r = 0.0;
    for (int i = 0; i < static_cast<int>(y.b.size()); ++i) r += (y.b[i] - S.row(i).transpose()).squaredNorm();
    return r;
}

struct Shrunk {
    TauNConfig cfg;
    double tau = 0.0;
    double corner_distance = 0.0;
    bool ok = false;
};

// Largest tau = 2^-k below 1/2 whose shrunk corners stay within target of the graph, inside Sigma,
// and keep y on the shrunk segments.
Shrunk shrink_toward_anchors(const SigmaSet& provider, const TauNConfig& cfg, const DiagPoint& y, double target) {
    Shrunk out;
    double tau = 0.5;
    for (int it = 0; it < 40; ++it, tau *= 0.5) {
        TauNConfig c = cfg;
        bool valid = true;
        for (auto& leg : c.legs) {
            leg.kappa *= 1.0 - tau;
            valid = valid && leg.kappa > 1.0;
        }
        if (!valid) continue;
        c.refresh();
        double dist = 0.0;
        for (const auto& x : c.xi) dist = std::max(dist, graph_distance(provider.sigma(), x));
        if (dist > target) continue;
        if (tau_segment_distance(c, y) > 1e-9) continue;
        bool inside = true;
        for (const auto& x : c.xi) inside = inside && provider.decompose_near(x, Decomposition{}).has_value();
        if (!inside) break;  // smaller tau only moves the corners closer to the boundary of Sigma
        out = {c, tau, dist, true};
        return out;
    }
    return out;
}

double sigma_modulus(const FluxFunction& sigma, double radius, double m, std::uint64_t seed) {
    if (m <= 0.0) return 0.0;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-radius, radius);
    const auto d = sigma.dims;
    double lip = 0.0;
    for (int k = 0; k < 400; ++k) {
        Mat A(d.m, d.n);
        for (int a = 0; a < d.m; ++a)
            for (int b = 0; b < d.n; ++b) A(a, b) = U(rng);
        if (A.norm() > radius) A *= radius / A.norm();
        lip = std::max(lip, Eigen::JacobiSVD<Mat>(sigma.jacobian(A)).singularValues()(0));
    }
    return lip * m;
}

double flux_sup(const FluxFunction& sigma, double radius, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N01;
    const auto d = sigma.dims;
    double best = 0.0;
    for (int k = 0; k < 2000; ++k) {
        Mat A(d.m, d.n);
        for (int a = 0; a < d.m; ++a)
            for (int b = 0; b < d.n; ++b) A(a, b) = N01(rng);
        const double r = radius * (k % 50 + 1) / 50.0;
        A *= r / std::max(A.norm(), 1e-300);
        best = std::max(best, sigma(A).norm());
    }
    return best;
}

double diag_size(const FluxFunction& sigma, const DiagPoint& y) {
    double s = y.A.norm() + sigma(y.A).norm();
    for (const auto& b : y.b) s += b.norm();
    return s;
}

Certificate cert(std::string name, double target, double achieved, bool pass, bool hard) {
    return {std::move(name), target, achieved, pass, hard};
}

}  // namespace

// ---------------------------------------------------------------------------

std::pair<double, int> worst_slice_mean(const GridSpec& g, const Vec& u) {
    const int d = g.axes();
    const int nt = g.resolution[d - 1];
    const std::size_t per = g.node_count() / nt;
    const double scale = std::max(1.0, u.cwiseAbs().maxCoeff());
    double worst = 0.0;
    int at = 0;
    for (int t = 0; t < nt; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < per; ++j) {
            const std::size_t node = t * per + j;
            Index i = g.multi(node);
            double w = 1.0;
            for (int k = 0; k + 1 < d; ++k) {
                w *= g.spacing(k);
                if (i[k] == 0 || i[k] == g.resolution[k] - 1) w *= 0.5;
            }
            s += w * u(node);
        }
        if (std::abs(s) / scale > worst) worst = std::abs(s) / scale, at = t;
    }
    return {worst, at};
}

DivInverse div_inverse(const GridSpec& g, const Vec& u, double mean_tol) {
    const int d = g.axes();
    if (d < 2) throw DimensionError("div_inverse needs at least one space axis and time");
    if (static_cast<std::size_t>(u.size()) != g.node_count()) throw DimensionError("field size does not match grid");
    const int n = d - 1;
    const double scale = std::max(1.0, u.cwiseAbs().maxCoeff());
    for (std::size_t node = 0; node < g.node_count(); ++node)
        if (u(node) != 0.0 && on_boundary(g, g.multi(node)) && std::abs(u(node)) > 1e-12 * scale)
            throw PreconditionError("div_inverse: u does not vanish on the boundary");
    const auto [mean, slice] = worst_slice_mean(g, u);
    if (mean > mean_tol) {
        std::ostringstream os;
        os << "div_inverse: slice mean " << mean << " at time slice " << slice << " exceeds " << mean_tol;
        throw PreconditionError(os.str());
    }
    std::vector<double> hs(d);
    for (int k = 0; k < d; ++k) hs[k] = g.spacing(k);
    const auto comps = invert(g.resolution, hs, std::vector<double>(u.data(), u.data() + u.size()));

    // v vanishes on the boundary up to the round-off admitted in u; pin it.
    DivInverse out;
    out.v.resize(n, g.node_count());
    for (std::size_t node = 0; node < g.node_count(); ++node) {
        const bool edge = on_boundary(g, g.multi(node));
        for (int k = 0; k < n; ++k) out.v(k, node) = edge ? 0.0 : comps[k][node];
    }

    GridField f = GridField::zero(g, ProblemDims{1, n});
    f.u.row(0) = u.transpose();
    f.v = out.v;
    double ut = 0.0, vt = 0.0;
    for (std::size_t node = 0; node < g.node_count(); ++node) {
        out.residual = std::max(out.residual, std::abs(f.divergence(0, node) - u(node)));
        for (int k = 0; k < d; ++k) out.grad_sup = std::max(out.grad_sup, std::abs(f.fd_partial(0, k, node)));
        ut = std::max(ut, std::abs(f.fd_partial(0, n, node)));
        for (int k = 0; k < n; ++k) vt = std::max(vt, std::abs(f.fd_partial(1 + k, n, node)));
    }
    out.time_ratio = ut > 0.0 ? vt / ut : 0.0;
    return out;
}

GridField rescale(const GridField& f, const Vec& ybar, double l, const GridSpec& target) {
    const int d = target.axes();
    if (f.grid.axes() != d || ybar.size() != d) throw DimensionError("rescale: axis count mismatch");
    if (!(l > 0.0)) throw PreconditionError("rescale: l must be positive");
    const double tol = 1e-12 * std::max(1.0, target.edge);
    for (int k = 0; k < d; ++k)
        if (ybar(k) < target.origin(k) - tol || ybar(k) + l > target.origin(k) + target.edge + tol)
            throw std::out_of_range("rescale: cube leaves the target domain");

    GridField out = GridField::zero(target, f.dims, f.exact_gradient.has_value());
    const int R = f.dims.rows() * f.dims.cols();
    for (std::size_t node = 0; node < target.node_count(); ++node) {
        const Vec y = target.coord(node);
        std::vector<int> i0(d);
        std::vector<double> frac(d);
        bool inside = true;
        for (int k = 0; k < d && inside; ++k) {
            const double z = f.grid.origin(k) + (y(k) - ybar(k)) / l * f.grid.edge;
            double q = (z - f.grid.origin(k)) / f.grid.spacing(k);
            const double qr = std::round(q);
            if (std::abs(q - qr) < 1e-9) q = qr;
            if (q < 0.0 || q > f.grid.resolution[k] - 1) inside = false;
            i0[k] = std::min(static_cast<int>(std::floor(q)), f.grid.resolution[k] - 2);
            frac[k] = q - i0[k];
        }
        if (!inside) continue;
        for (int corner = 0; corner < (1 << d); ++corner) {
            double w = 1.0;
            Index j(d);
            for (int k = 0; k < d; ++k) {
                const bool up = corner >> k & 1;
                w *= up ? frac[k] : 1.0 - frac[k];
                j[k] = i0[k] + (up ? 1 : 0);
            }
            if (w == 0.0) continue;
            const std::size_t src = f.grid.index(j);
            out.u.col(node) += w * l * f.u.col(src);
            out.v.col(node) += w * l * f.v.col(src);
            if (out.exact_gradient) out.exact_gradient->col(node) += w * f.exact_gradient->col(src);
        }
        (void)R;
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<NodeMask> Subsolution::partition() const {
    std::vector<NodeMask> cells(cell_count, NodeMask(cell.size(), 0));
    for (std::size_t node = 0; node < cell.size(); ++node) cells[cell[node]][node] = 1;
    return cells;
}

bool Subsolution::traces_match() const {
    const int m = field.dims.m;
    for (std::size_t k = 0; k < boundary_nodes.size(); ++k)
        for (int i = 0; i < m; ++i)
            if (field.u(i, boundary_nodes[k]) != boundary_u(k * m + i)) return false;
    return true;
}

SubsolutionSeed pm_demo_seed() {
    auto S = [](double r) { return r <= 0 ? 0.0 : r >= 1 ? 1.0 : r * r * r * (10 - 15 * r + 6 * r * r); };
    auto S1 = [](double r) { return r <= 0 || r >= 1 ? 0.0 : 30 * r * r * (1 - r) * (1 - r); };
    auto S2 = [](double r) { return r <= 0 || r >= 1 ? 0.0 : 60 * r * (1 - r) * (1 - 2 * r); };
    constexpr double w = 0.15;
    auto psi = [=](double x, int order) {
        const double a = (x - 0.25) / w, b = (0.75 - x) / w;
        const double A = S(a), A1 = S1(a) / w, A2 = S2(a) / (w * w);
        const double B = S(b), B1 = -S1(b) / w, B2 = S2(b) / (w * w);
        if (order == 0) return A * B;
        if (order == 1) return A1 * B + A * B1;
        return A2 * B + 2 * A1 * B1 + A * B2;
    };
    SubsolutionSeed s;
    s.u0 = [](double x) { return 1.25 * x; };
    s.du0 = [](double) { return 1.25; };
    s.v0 = [](double x) { return 0.625 * x * x; };
    s.f0 = [](double) { return 0.4; };
    s.h = [=](double x) { return psi(x, 0) * (x - 0.5); };
    s.dh = [=](double x) { return psi(x, 1) * (x - 0.5) + psi(x, 0); };
    s.d2h = [=](double x) { return psi(x, 2) * (x - 0.5) + 2 * psi(x, 1); };
    return s;
}

SigmaSet pm_demo_sigma() { return SigmaSet::from_intervals(flux::perona_malik(), {0.1, 0.9}, {1.1, 5.0}); }

namespace {
GridField seed_field(const GridSpec& g, const SubsolutionSeed& s, double eps) {
    GridField f = GridField::zero(g, ProblemDims{1, 1}, true);
    for (std::size_t node = 0; node < g.node_count(); ++node) {
        const Vec y = g.coord(node);
        const double x = y(0), t = y(1);
        const double gx = s.dh(x);
        f.u(0, node) = s.u0(x) + eps * gx * t;
        f.v(0, node) = s.v0(x) + s.f0(x) * t + eps * s.h(x) * t;
        Mat G(2, 2);
        G << s.du0(x) + eps * t * s.d2h(x), eps * gx, f.u(0, node), s.f0(x) + eps * s.h(x);
        f.set_exact_gradient(node, G);
    }
    return f;
}

std::size_t sigma_failures(const SigmaSet& provider, const GridField& f) {
    std::size_t bad = 0;
    Decomposition seed;
    for (std::size_t node = 0; node < f.grid.node_count(); ++node) {
        auto d = provider.decompose_near(project_diag(f.gradient(node), f.dims), seed);
        if (d) seed = *d;
        else ++bad;
    }
    return bad;
}
}  // namespace

MakeSubsolutionResult make_subsolution(const SigmaSet& provider, const GridSpec& domain, const SubsolutionSeed& seed,
                                       double eps_perturb, double a, int max_halvings) {
    if (domain.axes() != 2) throw DimensionError("make_subsolution supports m = n = 1");
    const int nx = domain.resolution[0];
    const double hx = domain.spacing(0);
    double div_v0 = 0.0, div_f0 = 0.0, g_err = 0.0, du = 0.0;
    for (int i = 1; i + 1 < nx; ++i) {
        const double x = domain.origin(0) + i * hx;
        div_v0 = std::max(div_v0, std::abs((seed.v0(x + hx) - seed.v0(x - hx)) / (2 * hx) - seed.u0(x)));
        div_f0 = std::max(div_f0, std::abs((seed.f0(x + hx) - seed.f0(x - hx)) / (2 * hx)));
        const double e = 1e-6;
        g_err = std::max(g_err, std::abs((seed.h(x + e) - seed.h(x - e)) / (2 * e) - seed.dh(x)));
        du = std::max(du, std::abs(seed.du0(x)));
    }
    if (div_v0 > 10.0 * hx * (1.0 + du)) throw PreconditionError("make_subsolution: div v0 != u0");
    if (div_f0 > 1e-8) throw PreconditionError("make_subsolution: div f0 != 0");
    if (g_err > 1e-5) throw PreconditionError("make_subsolution: g is not div h");

    MakeSubsolutionResult out;
    if (sigma_failures(provider, seed_field(domain, seed, 0.0)) > 0)
        throw PreconditionError("make_subsolution: seed data not in Sigma");
    double eps = eps_perturb;
    GridField f;
    for (;;) {
        if (out.halvings >= max_halvings) eps = 0.0;
        f = seed_field(domain, seed, eps);
        if (eps == 0.0 || sigma_failures(provider, f) == 0) break;
        eps *= 0.5;
        ++out.halvings;
    }
    Subsolution& s = out.sub;
    s.field = std::move(f);
    s.cell.assign(domain.node_count(), 0);
    s.cell_count = 1;
    s.a = a;
    s.eps_perturb = eps;
    for (std::size_t node = 0; node < domain.node_count(); ++node)
        if (on_boundary(domain, domain.multi(node))) s.boundary_nodes.push_back(node);
    s.boundary_u.resize(s.boundary_nodes.size());
    for (std::size_t k = 0; k < s.boundary_nodes.size(); ++k) s.boundary_u(k) = s.field.u(0, s.boundary_nodes[k]);
    double ut = 0.0;
    for (std::size_t node = 0; node < domain.node_count(); ++node)
        ut = std::max(ut, std::abs(s.field.gradient(node)(0, 1)));
    if (!(a > ut)) throw PreconditionError("make_subsolution: a must exceed |u_t|");
    out.eps_used = eps;
    return out;
}

double residual_l2(const Subsolution& sub, const FluxFunction& sigma) {
    const GridSpec& g = sub.domain();
    double s = 0.0;
    for (std::size_t node = 0; node < g.node_count(); ++node)
        s += node_weight(g, g.multi(node)) *
             diag_residual_sq(sigma, project_diag(sub.field.gradient(node), sub.field.dims));
    return std::sqrt(s);
}

double residual_sup(const Subsolution& sub, const FluxFunction& sigma) {
    double s = 0.0;
    for (std::size_t node = 0; node < sub.domain().node_count(); ++node)
        s = std::max(s, diag_residual_sq(sigma, project_diag(sub.field.gradient(node), sub.field.dims)));
    return std::sqrt(s);
}

double divergence_defect(const Subsolution& sub) {
    double e = 0.0;
    for (std::size_t node = 0; node < sub.domain().node_count(); ++node)
        for (int i = 0; i < sub.field.dims.m; ++i)
            e = std::max(e, std::abs(sub.field.divergence(i, node) - sub.field.u(i, node)));
    return e;
}

double residual_hminus1_bound(const Subsolution& sub, const FluxFunction& sigma, double tol_constant) {
    double grad = 0.0;
    const int m = sub.field.dims.m, n = sub.field.dims.n;
    for (std::size_t node = 0; node < sub.domain().node_count(); ++node)
        grad = std::max(grad, sub.field.gradient(node).topLeftCorner(m, n).norm());
    const double defect = divergence_defect(sub);
    const double tol = tol_constant * sub.domain().h() * (1.0 + grad);
    if (defect > tol) {
        std::ostringstream os;
        os << "divergence constraint uncertified: defect " << defect << " > " << tol;
        throw PreconditionError(os.str());
    }
    return residual_l2(sub, sigma);
}

// ---------------------------------------------------------------------------

bool RefineParams::ok() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.second; });
}

RefineParams select_parameters(const ParameterInputs& in) {
    if (!(in.a > in.ut_sup)) throw PreconditionError("select_parameters: a must exceed |u_t|");
    if (!(in.delta_tau > 0 && in.M > 0 && in.eps > 0 && in.rho > 0 && in.measure > 0 && in.C_n >= 0))
        throw PreconditionError("select_parameters: inputs must be positive");
    RefineParams p;
    p.eps = in.eps;
    p.rho = in.rho;
    p.a = in.a;
    p.delta_tau = in.delta_tau;
    const double gap = in.a - in.ut_sup;
    const double root = std::sqrt(in.measure);
    p.eps_prime_cap = 0.9 * std::min({1.0, in.rho, gap / 2.0, in.delta_tau / (3.0 * (1.0 + in.C_n))});
    const double K = 1.0 + 3.0 * in.M + in.M_tilde;
    const double target = in.eps / (16.0 * root);
    const double x = in.C_n > 0 ? (-K + std::sqrt(K * K + 4.0 * in.C_n * target)) / (2.0 * in.C_n) : target / K;
    p.eps_prime_sqrt_bound = x * x;
    auto sqrt_constraint = [&](double e) { return K * std::sqrt(e) + in.C_n * e; };
    double e = p.eps_prime_cap;
    while (sqrt_constraint(e) >= target) e *= 0.9;
    p.eps_prime = e;
    p.s_bound = std::min({gap / (4.0 * in.M), in.eps / (32.0 * root * in.C_n * in.M),
                          in.delta_tau / (6.0 * in.C_n * in.M)});
    p.s = 0.9 * p.s_bound;
    p.checks = {
        {"0 < eps' < min{1, rho, (a - |u_t|)/2, delta_tau/(3(1 + C_n))}", e > 0 && e < p.eps_prime_cap / 0.9},
        {"(1 + 3M + M~) sqrt(eps') + C_n eps' < eps/(16 sqrt|Omega|)", sqrt_constraint(e) < target},
        {"0 < s < min{(a - |u_t|)/(4M), eps/(32 sqrt|Omega| C_n M), delta_tau/(6 C_n M)}",
         p.s > 0 && p.s < p.s_bound},
    };
    return p;
}

// ---------------------------------------------------------------------------

double mask_measure(const GridSpec& g, const NodeMask& mask) {
    const int d = g.axes();
    NodeBox cells;
    cells.lo.assign(d, 0);
    cells.hi.resize(d);
    for (int k = 0; k < d; ++k) cells.hi[k] = g.resolution[k] - 1;
    double vol = 1.0;
    for (int k = 0; k < d; ++k) vol *= g.spacing(k);
    std::size_t count = 0;
    cells.for_each([&](const Index& c) {
        for (int corner = 0; corner < (1 << d); ++corner) {
            Index j = c;
            for (int k = 0; k < d; ++k) j[k] += corner >> k & 1;
            if (!mask[g.index(j)]) return;
        }
        ++count;
    });
    return count * vol;
}

std::vector<NodeBox> vitali_cover(const GridSpec& g, const NodeMask& mask, double delta, double l_max,
                                  int min_cells) {
    if (!(delta > 0.0 && delta < 1.0)) throw PreconditionError("vitali_cover: delta must lie in (0, 1)");
    if (mask.size() != g.node_count()) throw DimensionError("vitali_cover: mask size does not match grid");
    const int d = g.axes();
    std::vector<NodeBox> out;
    const double total = mask_measure(g, mask);
    if (total == 0.0) return out;
    std::vector<int> cells(d);
    std::vector<std::size_t> cstride(d, 1);
    for (int k = 0; k < d; ++k) {
        cells[k] = g.resolution[k] - 1;
        if (k > 0) cstride[k] = cstride[k - 1] * cells[k - 1];
    }
    std::vector<std::uint8_t> taken(cstride[d - 1] * cells[d - 1], 0);
    auto cell_index = [&](const Index& c) {
        std::size_t s = 0;
        for (int k = 0; k < d; ++k) s += c[k] * cstride[k];
        return s;
    };
    double covered = 0.0;
    for (int c = cells[0]; c >= min_cells; c /= 2) {
        bool fits = true;
        for (int k = 0; k < d; ++k) fits = fits && cells[k] % c == 0;
        if (!fits) {
            if (c % 2) break;
            continue;
        }
        double edge = c * g.spacing(0);
        if (edge > l_max * (1.0 + 1e-12)) {
            if (c % 2) break;
            continue;
        }
        NodeBox pos;
        pos.lo.assign(d, 0);
        pos.hi.resize(d);
        for (int k = 0; k < d; ++k) pos.hi[k] = cells[k] / c;
        pos.for_each([&](const Index& p) {
            NodeBox cube;
            cube.lo.resize(d);
            cube.hi.resize(d);
            for (int k = 0; k < d; ++k) cube.lo[k] = p[k] * c, cube.hi[k] = p[k] * c + c + 1;
            if (taken[cell_index(cube.lo)]) return;
            bool inside = true;
            cube.for_each([&](const Index& i) { inside = inside && mask[g.index(i)]; });
            if (!inside) return;
            NodeBox cc = cube;
            for (int k = 0; k < d; ++k) cc.hi[k] -= 1;
            cc.for_each([&](const Index& i) { taken[cell_index(i)] = 1; });
            double vol = 1.0;
            for (int k = 0; k < d; ++k) vol *= c * g.spacing(k);
            covered += vol;
            out.push_back(cube);
        });
        if (covered >= (1.0 - delta) * total) break;
        if (c % 2) break;
    }
    return out;
}

// ---------------------------------------------------------------------------

double graph_distance(const FluxFunction& sigma, const DiagPoint& y) {
    const auto d = y.dims();
    const Vec a0 = vec_row(y.A);
    const Vec b0 = vec_row(y.b_matrix());
    const int k = static_cast<int>(a0.size());
    auto resid = [&](const Vec& a) {
        Vec r(2 * k);
        r.head(k) = a - a0;
        r.tail(k) = vec_row(sigma(unvec_row(a, d.m, d.n))) - b0;
        return r;
    };
    Vec a = a0;
    Vec r = resid(a);
    for (int it = 0; it < 50; ++it) {
        Mat J(2 * k, k);
        J.topRows(k) = Mat::Identity(k, k);
        J.bottomRows(k) = sigma.jacobian(unvec_row(a, d.m, d.n));
        const Vec step = (J.transpose() * J).ldlt().solve(-J.transpose() * r);
        double t = 1.0;
        bool moved = false;
        for (int h = 0; h < 30; ++h, t *= 0.5) {
            const Vec a2 = a + t * step;
            const Vec r2 = resid(a2);
            if (r2.norm() < r.norm()) {
                a = a2;
                r = r2;
                moved = true;
                break;
            }
        }
        if (!moved || step.norm() < 1e-14) break;
    }
    return r.norm();
}

CubeUpdate cube_update(const Subsolution& sub, const NodeBox& box, const SigmaSet& provider,
                       const RefineParams& params, const CubeOptions& opt) {
    const GridSpec& G = sub.domain();
    const int d = G.axes();
    const auto dims = sub.field.dims;
    const int R = dims.rows(), C = dims.cols(), m = dims.m, n = dims.n;
    const FluxFunction& sigma = provider.sigma();
    CubeUpdate up;
    up.box = box;
    const int K = box.size(0);
    for (int k = 0; k < d; ++k) {
        if (box.lo[k] < 0 || box.hi[k] > G.resolution[k]) throw PreconditionError("cube_update: box leaves the grid");
        if (box.size(k) != K) throw PreconditionError("cube_update: box is not a cube");
    }
    const int c0 = sub.cell[G.index(box.lo)];
    box.for_each([&](const Index& i) {
        if (sub.cell[G.index(i)] != c0) throw PreconditionError("cube_update: cube straddles two partition cells");
    });
    up.l = (K - 1) * G.spacing(0);
    up.ybar = G.coord(box.lo);
    const double l = up.l;
    const double root = std::sqrt(G.measure());
    double Q = 1.0;
    for (int k = 0; k < d; ++k) Q *= (K - 1) * G.spacing(k);
    up.target_sq = std::pow(params.eps / (2.0 * root), 2) * Q;

    Index centre = box.lo;
    for (int k = 0; k < d; ++k) centre[k] += (K - 1) / 2;
    const DiagPoint y0 = project_diag(sub.field.gradient(G.index(centre)), dims);

    // Step 1: configuration through the centre value, shrunk toward its anchors.
    auto dec = provider.decompose(y0);
    if (!dec) {
        up.message = "provider failure: centre value not in Sigma";
        return up;
    }
    const TauNConfig tcfg = tau2_from_pair(sigma, dec->p_plus, dec->p_minus);
    const Shrunk sh = shrink_toward_anchors(provider, tcfg, y0, params.eps / (8.0 * root));
    provider.clear_cache();
    if (!sh.ok) {
        up.message = "provider failure: no shrink keeps the corners inside Sigma";
        return up;
    }
    up.tau = sh.tau;
    up.corner_graph_distance = sh.corner_distance;
    up.delta_tau = provider.estimate_tube_radius(sh.cfg, opt.tube_segment_samples, opt.tube_directions, opt.seed);
    provider.clear_cache();

    // Step 2: staircase on the unit cube.
    const TNConfig cfg = lift_tau(sh.cfg, params.s);
    const Mat Y = lift_diag(y0);
    const GridSpec unit = GridSpec::cube(d, K);
    StaircaseOptions so;
    so.oscillation.zero_layers = opt.zero_layers;
    so.oscillation.band_nodes = opt.band_nodes;
    so.oscillation.aligned_phase = opt.aligned_phase;
    // nodes_per_period counts along the fastest leg of the configuration.
    double speed = 0.0;
    for (int i = 0; i < cfg.N(); ++i)
        for (int j = 0; j < cfg.N(); ++j) {
            if (i == j) continue;
            const LegReport r = factor_admissible(cfg.X[i] - cfg.X[j], dims);
            if (r.admissible) speed = std::max(speed, std::hypot(r.leg.alpha.norm(), r.leg.s));
        }
    up.frequency = std::max(1, static_cast<int>((K - 1) / (opt.nodes_per_period * std::max(speed, 1e-12))));
    StaircaseResult st;
    try {
        st = build_staircase(cfg, Y, unit, params.eps_prime, up.frequency, so);
    } catch (const std::exception& e) {
        up.message = std::string("staircase failed: ") + e.what();
        return up;
    }
    up.fractions = st.fractions;

    // Step 3: rescale and add the divergence correction R_{ybar,l} phi = l^2 (R phi)((y - ybar)/l).
    const std::size_t Nl = unit.node_count();
    up.du = l * st.omega.u;
    up.dv = l * st.omega.v;
    up.dgrad = *st.omega.exact_gradient;
    GridField gfield = GridField::zero(unit, dims);
    double phi_t = 0.0;
    for (int i = 0; i < m; ++i) {
        DivInverse inv;
        try {
            inv = div_inverse(unit, st.omega.u.row(i).transpose());
        } catch (const std::exception& e) {
            up.message = std::string("divergence inversion failed: ") + e.what();
            up.du.resize(0, 0), up.dv.resize(0, 0), up.dgrad.resize(0, 0);
            return up;
        }
        up.C_n = std::max(up.C_n, inv.time_ratio);
        for (int k = 0; k < n; ++k) gfield.v.row(i * n + k) = inv.v.row(k);
    }
    up.dv += l * l * gfield.v;
    for (std::size_t node = 0; node < Nl; ++node) {
        for (int i = 0; i < m; ++i) phi_t = std::max(phi_t, std::abs(st.omega.gradient(node)(i, n)));
        for (int r = m; r < R; ++r)
            for (int k = 0; k < C; ++k) up.dgrad(r * C + k, node) += l * gfield.fd_partial(r, k, node);
    }
    up.M_prime = std::max(0.0, phi_t - params.eps_prime) / std::max(std::abs(params.s), 1e-300);

    // Steps 4-5: nodewise audit on the cube.
    const ParameterInputs& in = params.inputs;
    up.V = st.V;
    Decomposition seed = *dec;
    std::size_t local = 0;
    box.for_each([&](const Index& i) {
        const std::size_t node = G.index(i);
        const Mat base = sub.field.gradient(node);
        const Mat Gn = base + block_at(up.dgrad, local, R, C);
        const DiagPoint yn = project_diag(Gn, dims);
        if (auto dd = provider.decompose_near(yn, seed)) seed = *dd;
        else ++up.sigma_failures;
        double w = 1.0;
        for (int k = 0; k < d; ++k) {
            w *= G.spacing(k);
            if (i[k] == box.lo[k] || i[k] == box.hi[k] - 1) w *= 0.5;
        }
        up.residual_sq += w * diag_residual_sq(sigma, yn);
        up.max_distance = std::max(up.max_distance, tau_segment_distance(sh.cfg, yn));
        up.modulus = std::max(up.modulus, norm(project_diag(base, dims) - y0));
        up.sup_change = std::max(up.sup_change, up.du.col(local).cwiseAbs().maxCoeff());
        for (int a = 0; a < m; ++a) up.ut_sup = std::max(up.ut_sup, std::abs(Gn(a, n)));
        ++local;
    });
    up.modulus_sigma = sigma_modulus(sigma, 1.0 + 3.0 * in.M, up.modulus, opt.seed);

    const double lhs_l2 = std::sqrt(up.residual_sq);
    const double s = std::abs(params.s), ep = params.eps_prime;
    const double l2_est = ((1.0 + 3.0 * in.M + in.M_tilde) * std::sqrt(ep) + up.C_n * l * ep + up.modulus +
                           up.modulus_sigma + 2.0 * in.M * up.C_n * l * s + params.eps / (4.0 * root)) *
                          std::sqrt(Q);
    const double dist_est = (1.0 + up.C_n * l) * ep + 2.0 * up.modulus + 2.0 * in.M * up.C_n * l * s;
    up.certificates = {
        cert("sigma_membership_failures", 0.0, static_cast<double>(up.sigma_failures), up.sigma_failures == 0, true),
        cert("sup_change_lt_rho", params.rho, up.sup_change, up.sup_change < params.rho, true),
        cert("ut_lt_a", params.a, up.ut_sup, up.ut_sup < params.a, true),
        cert("supports_inside", 1.0, st.supports_inside ? 1.0 : 0.0, st.supports_inside, true),
        cert("slice_mean", 1e-10, st.slice_mean, st.slice_mean <= 1e-10, true),
        cert("pf8_cube_residual", std::sqrt(up.target_sq), lhs_l2, lhs_l2 < std::sqrt(up.target_sq), false),
        cert("d1_phi_sup", ep, st.sup_norm, st.sup_norm < ep, false),
        cert("d1_phi_t", ep + up.M_prime * s, phi_t, phi_t <= ep + up.M_prime * s + 1e-15, false),
        cert("L2_est", l2_est, lhs_l2, lhs_l2 <= l2_est, false),
        cert("dist_est", dist_est, up.max_distance, up.max_distance <= dist_est, false),
        cert("eps_prime_tube", up.delta_tau / (3.0 * (1.0 + up.C_n)), ep, ep < up.delta_tau / (3.0 * (1.0 + up.C_n)),
             false),
        cert("modulus_tube", up.delta_tau / 6.0, up.modulus, up.modulus < up.delta_tau / 6.0, false),
    };
    up.applied = true;
    std::ostringstream msg;
    for (const auto& c : up.certificates)
        if (c.hard && !c.pass) {
            up.applied = false;
            msg << c.name << " (" << c.achieved << " vs " << c.target << ") ";
        }
    up.message = up.applied ? "ok" : "rejected: " + msg.str();
    return up;
}

// ---------------------------------------------------------------------------

RefineResult refine_step(const Subsolution& sub, double eps, double rho, const SigmaSet& provider,
                         const RefineOptions& opt) {
    if (!(eps > 0.0) || !(rho > 0.0)) throw PreconditionError("refine_step: eps and rho must be positive");
    if (!sub.field.exact_gradient) throw PreconditionError("refine_step: the subsolution needs the exact gradient channel");
    const GridSpec& G = sub.domain();
    const int d = G.axes();
    const auto dims = sub.field.dims;
    const int R = dims.rows(), C = dims.cols(), m = dims.m, n = dims.n;
    const FluxFunction& sigma = provider.sigma();
    const double measure = G.measure();
    const double root = std::sqrt(measure);

    RefineResult res;
    res.output = sub;
    res.residual_before = residual_l2(sub, sigma);
    res.residual_sup_before = residual_sup(sub, sigma);
    const double M_res = res.residual_sup_before;
    double ut0 = 0.0, size = 0.0;
    for (std::size_t node = 0; node < G.node_count(); ++node) {
        const Mat g = sub.field.gradient(node);
        for (int a = 0; a < m; ++a) ut0 = std::max(ut0, std::abs(g(a, n)));
        size = std::max(size, diag_size(sigma, project_diag(g, dims)));
    }

    if (M_res * root < eps) {
        res.success = true;
        res.vacuous = true;
        res.residual_after = res.residual_before;
        res.audit_sum = M_res * M_res * measure;
        res.uncovered_measure = measure;
        res.ut_sup = ut0;
        res.divergence_defect = divergence_defect(sub);
        res.hminus1_bound = res.residual_after;
        res.certificates = {cert("residual_l2_lt_eps", eps, res.residual_after, true, true),
                            cert("sup_residual_bound", eps, M_res * root, true, true)};
        res.message = "input already certifies; unchanged";
        return res;
    }
    res.delta = opt.delta > 0 ? opt.delta : std::min(0.5, eps * eps / (4.0 * M_res * M_res * measure));

    // Step-6 parameters from a probe at the domain centre.
    Index mid(d);
    for (int k = 0; k < d; ++k) mid[k] = (G.resolution[k] - 1) / 2;
    const DiagPoint yc = project_diag(sub.field.gradient(G.index(mid)), dims);
    auto dec = provider.decompose(yc);
    if (!dec) {
        res.message = "provider failure at the domain centre";
        return res;
    }
    const Shrunk probe = shrink_toward_anchors(provider, tau2_from_pair(sigma, dec->p_plus, dec->p_minus), yc,
                                               eps / (8.0 * root));
    provider.clear_cache();
    if (!probe.ok) {
        res.message = "provider failure: no admissible shrink at the domain centre";
        return res;
    }
    ParameterInputs in;
    in.a = sub.a;
    in.ut_sup = ut0;
    in.delta_tau = provider.estimate_tube_radius(probe.cfg, opt.cube.tube_segment_samples, opt.cube.tube_directions,
                                                 opt.cube.seed);
    provider.clear_cache();
    for (const auto& x : probe.cfg.xi) size = std::max(size, diag_size(sigma, x));
    in.M = size;
    in.M_tilde = flux_sup(sigma, 1.0 + 3.0 * size, opt.cube.seed);
    {
        // C_n measured on a reference oscillation at the cube resolution.
        const int cells = std::min(256, static_cast<int>(std::lround(opt.l_max / G.spacing(0))));
        const int K = std::max(cells, 4 * opt.cube.zero_layers + 8) + 1;
        AdmissibleRankOne dir;
        dir.p = Vec::Constant(m, 1.0);
        dir.alpha = Vec::Unit(n, 0);
        dir.s = 0.0;
        dir.beta.assign(m, Vec::Zero(n));
        OscillationOptions oo;
        oo.zero_layers = opt.cube.zero_layers;
        oo.band_nodes = opt.cube.band_nodes;
        const auto osc = build_oscillation(dir, 0.5, GridSpec::cube(d, K), 0.1,
                                           std::max(1, (K - 1) / opt.cube.nodes_per_period), oo);
        in.C_n = std::max(div_inverse(osc.omega.grid, osc.omega.u.row(0).transpose()).time_ratio, 1e-3);
    }
    in.eps = eps;
    in.rho = rho;
    in.measure = measure;
    if (!(in.delta_tau > 0.0)) {
        res.message = "tube radius vanished at the domain centre";
        return res;
    }
    res.params = select_parameters(in);
    res.params.inputs = in;
    res.params.tau = probe.tau;
    res.params.l_max = opt.l_max;

    // Step 7: cover every partition cell and update every cube.
    std::vector<NodeBox> boxes;
    double cell_measure = 0.0;
    for (const auto& mask : sub.partition()) {
        cell_measure += mask_measure(G, mask);
        const auto cover = vitali_cover(G, mask, res.delta, opt.l_max, opt.min_cube_cells);
        boxes.insert(boxes.end(), cover.begin(), cover.end());
    }
    Subsolution& out = res.output;
    std::vector<std::int32_t> new_cell = sub.cell;
    int cell_count = sub.cell_count;
    // Gradients jump across shared faces; a face node keeps the one-sided gradient of the first cube applied.
    std::vector<char> owned(G.node_count(), 0);
    for (const auto& box : boxes) {
        CubeUpdate up = cube_update(sub, box, provider, res.params, opt.cube);
        if (up.applied) {
            std::size_t local = 0;
            box.for_each([&](const Index& i) {
                const std::size_t node = G.index(i);
                out.field.u.col(node) += up.du.col(local);
                out.field.v.col(node) += up.dv.col(local);
                if (!owned[node])
                    out.field.exact_gradient->col(node) += up.dgrad.col(local);
                else
                    res.seam_jump = std::max(res.seam_jump, (up.dgrad.col(local) - out.field.exact_gradient->col(node) +
                                                             sub.field.exact_gradient->col(node)).norm());
                owned[node] = 1;
                ++local;
            });
            for (const auto& V : up.V) {
                bool any = false;
                local = 0;
                box.for_each([&](const Index& i) {
                    if (V[local]) new_cell[G.index(i)] = cell_count, any = true;
                    ++local;
                });
                if (any) ++cell_count;
            }
            res.covered_measure += std::pow(up.l, d);
            res.audit_sum += up.residual_sq;
            res.sup_change = std::max(res.sup_change, up.sup_change);
        } else {
            res.rejected.push_back(static_cast<int>(res.cubes.size()));
        }
        up.du.resize(0, 0), up.dv.resize(0, 0), up.dgrad.resize(0, 0);
        res.cubes.push_back(std::move(up));
    }
    out.cell = std::move(new_cell);
    out.cell_count = cell_count;
    res.uncovered_measure = std::max(0.0, measure - res.covered_measure);
    res.audit_sum += M_res * M_res * res.uncovered_measure;

    res.residual_after = residual_l2(out, sigma);
    res.divergence_defect = divergence_defect(out);
    for (std::size_t node = 0; node < G.node_count(); ++node) {
        const Mat g = out.field.gradient(node);
        for (int a = 0; a < m; ++a) res.ut_sup = std::max(res.ut_sup, std::abs(g(a, n)));
    }
    bool div_ok = true;
    try {
        res.hminus1_bound = residual_hminus1_bound(out, sigma, opt.div_tol_constant);
    } catch (const PreconditionError&) {
        div_ok = false;
    }
    std::size_t sigma_bad = 0;
    for (const auto& c : res.cubes)
        if (c.applied) sigma_bad += c.sigma_failures;
    const bool traces = out.traces_match();
    const double budget = res.delta * cell_measure;
    res.certificates = {
        cert("sup_change_lt_rho", rho, res.sup_change, res.sup_change < rho, true),
        cert("ut_lt_a", sub.a, res.ut_sup, res.ut_sup < sub.a, true),
        cert("sigma_membership_failures", 0.0, static_cast<double>(sigma_bad), sigma_bad == 0, true),
        cert("residual_l2_lt_eps", eps, res.residual_after, res.residual_after < eps, true),
        cert("cell_sum_lt_eps_sq", eps * eps, res.audit_sum, res.audit_sum < eps * eps, true),
        cert("traces_bit_exact", 1.0, traces ? 1.0 : 0.0, traces, true),
        cert("divergence_constraint", 1.0, res.divergence_defect, div_ok, true),
        cert("rejected_cubes", 0.0, static_cast<double>(res.rejected.size()), res.rejected.empty(), true),
        cert("uncovered_within_budget", budget, res.uncovered_measure, res.uncovered_measure <= budget + 1e-12,
             false),
        cert("parameters_consistent", 1.0, res.params.ok() ? 1.0 : 0.0, res.params.ok(), false),
    };
    res.success = true;
    std::ostringstream msg;
    for (const auto& c : res.certificates)
        if (c.hard && !c.pass) {
            res.success = false;
            msg << c.name << " (" << c.achieved << " vs " << c.target << ") ";
        }
    if (!res.rejected.empty()) {
        msg << "offending cubes:";
        for (int k : res.rejected) msg << " " << k << " [" << res.cubes[k].message << "]";
    }
    res.message = res.success ? "certified" : msg.str();
    if (!res.success) res.output = sub;
    (void)R;
    (void)C;
    return res;
}

std::vector<ScheduleStep> refine_schedule(const Subsolution& base, const std::vector<double>& eps,
                                          const std::vector<double>& rho, const SigmaSet& provider,
                                          const ScheduleOptions& opt) {
    if (eps.size() != rho.size()) throw PreconditionError("refine_schedule: eps and rho lists differ in length");
    for (std::size_t k = 1; k < eps.size(); ++k)
        if (!(eps[k] < eps[k - 1])) throw PreconditionError("refine_schedule: eps schedule must decrease strictly");
    std::vector<ScheduleStep> steps;
    for (std::size_t k = 0; k < eps.size(); ++k) {
        ScheduleStep st;
        st.eps = eps[k];
        st.rho = rho[k];
        RefineOptions ro = opt.refine;
        const double first = opt.adaptive_edge ? opt.l_min : ro.l_max;
        for (double l = first; l <= opt.l_max * (1.0 + 1e-12); l *= 2.0) {
            ro.l_max = l;
            st.edge = l;
            ++st.attempts;
            st.result = refine_step(base, eps[k], rho[k], provider, ro);
            if (st.result.success || !opt.adaptive_edge) break;
        }
        steps.push_back(std::move(st));
    }
    return steps;
}

}  // namespace wci
