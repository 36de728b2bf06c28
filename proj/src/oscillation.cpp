#include "wci/oscillation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace wci {

namespace {

void check_open_unit(double x, const char* what) {
    if (!(x > 0.0 && x < 1.0)) throw PreconditionError(std::string(what) + " must lie in (0, 1)");
}

// Quintic smoothstep and its derivatives.
double S0(double r) { return r <= 0 ? 0.0 : r >= 1 ? 1.0 : r * r * r * (10.0 - 15.0 * r + 6.0 * r * r); }
double S1(double r) { return r <= 0 || r >= 1 ? 0.0 : 30.0 * r * r * (1 - r) * (1 - r); }
double S2(double r) { return r <= 0 || r >= 1 ? 0.0 : 60.0 * r * (1 - r) * (1 - 2 * r); }

// Node offsets are integers, so the zero layers vanish exactly.
struct AxisCutoff {
    int lo, hi, zero;
    double h, band;
    bool off = false;
    void eval(int i, double& z, double& dz, double& d2z) const {
        if (off) {
            z = 1.0, dz = d2z = 0.0;
            return;
        }
        const double rl = (i - lo - zero) * h / band, ru = (hi - i - zero) * h / band;
        const double sl = S0(rl), su = S0(ru), dl = S1(rl), du = S1(ru);
        z = sl * su;
        dz = (dl * su - sl * du) / band;
        d2z = (S2(rl) * su - 2.0 * dl * du + sl * S2(ru)) / (band * band);
    }
};

std::vector<Mat> antisym(const AdmissibleRankOne& C) {
    std::vector<Mat> M;
    for (const auto& b : C.beta) M.push_back(b * C.alpha.transpose() - C.alpha * b.transpose());
    return M;
}

void check_direction(const AdmissibleRankOne& C) {
    const auto d = C.dims();
    if (static_cast<int>(C.beta.size()) != d.m) throw DimensionError("direction needs m beta vectors");
    for (const auto& b : C.beta)
        if (b.size() != d.n) throw DimensionError("beta length must equal n");
    if (C.alpha.norm() == 0.0) throw PreconditionError("alpha vanishes");
}

}  // namespace

int OscillationProfile::piece(double xi) const {
    const double y = xi - period * std::floor(xi / period);
    for (int k = 0; k < 3; ++k)
        if (y < breaks[k + 1]) return k;
    return 3;
}

double OscillationProfile::f(double xi) const {
    const int k = piece(xi);
    const double y = xi - period * std::floor(xi / period) - breaks[k];
    const auto& c = coeffs[k];
    return c[0] + y * (c[1] + y * c[2]);
}

double OscillationProfile::df(double xi) const {
    const int k = piece(xi);
    const double y = xi - period * std::floor(xi / period) - breaks[k];
    return coeffs[k][1] + 2.0 * coeffs[k][2] * y;
}

double OscillationProfile::d2f(double xi) const { return 2.0 * coeffs[piece(xi)][2]; }

double OscillationProfile::max_abs_f() const {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) {
        const auto& c = coeffs[k];
        const double L = breaks[k + 1] - breaks[k];
        auto val = [&](double y) { return std::abs(c[0] + y * (c[1] + y * c[2])); };
        s = std::max({s, val(0.0), val(L)});
        if (c[2] != 0.0) {
            const double y = -c[1] / (2.0 * c[2]);
            if (y > 0 && y < L) s = std::max(s, val(y));
        }
    }
    return s;
}

double OscillationProfile::max_abs_df() const {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) {
        const double L = breaks[k + 1] - breaks[k];
        s = std::max({s, std::abs(coeffs[k][1]), std::abs(coeffs[k][1] + 2.0 * coeffs[k][2] * L)});
    }
    return s;
}

OscillationProfile oscillation_profile(double lambda, double eps, int frequency, double alpha_norm, double transition,
                                       double min_width) {
    check_open_unit(lambda, "lambda");
    check_open_unit(eps, "eps");
    if (frequency < 1) throw PreconditionError("frequency must be at least 1");
    if (!(alpha_norm > 0.0)) throw PreconditionError("alpha norm must be positive");
    if (transition < 0.0) transition = eps / 2.0;
    if (!(transition > 0.0 && transition <= eps / 2.0)) throw PreconditionError("transition fraction outside (0, eps/2]");

    OscillationProfile P;
    P.lambda = lambda;
    P.alpha_norm = alpha_norm;
    P.transition = transition;
    P.frequency = frequency;
    P.period = 1.0 / frequency;
    const double T = P.period, w = transition * T / 2.0;
    if (w < min_width) {
        std::ostringstream os;
        os << "transition strip " << w << " narrower than " << min_width;
        throw ResolutionError(os.str());
    }
    const double a2 = alpha_norm * alpha_norm;
    const double L1 = (1.0 - lambda) * (T - 2.0 * w), L2 = lambda * (T - 2.0 * w);
    P.breaks = {0.0, L1, L1 + w, L1 + w + L2, T};
    const double f2[4] = {lambda / a2, 0.0, (lambda - 1.0) / a2, 0.0};

    // Integrate from f(0) = f'(0) = 0, then shift so that f' and f have zero mean.
    P.coeffs.resize(4);
    double F = 0.0, dF = 0.0;
    for (int k = 0; k < 4; ++k) {
        const double L = P.breaks[k + 1] - P.breaks[k];
        P.coeffs[k] = {F, dF, 0.5 * f2[k]};
        F += dF * L + 0.5 * f2[k] * L * L;
        dF += f2[k] * L;
    }
    const double shift1 = -F / T;
    double integral = 0.0;
    for (int k = 0; k < 4; ++k) {
        auto& c = P.coeffs[k];
        c[0] += shift1 * P.breaks[k];
        c[1] += shift1;
        const double L = P.breaks[k + 1] - P.breaks[k];
        integral += c[0] * L + c[1] * L * L / 2.0 + c[2] * L * L * L / 3.0;
    }
    for (auto& c : P.coeffs) c[0] -= integral / T;
    return P;
}

GridField potential_field(const GhostedScalar& h, const AdmissibleRankOne& dir) {
    check_direction(dir);
    const auto d = dir.dims();
    GridField f = GridField::zero(h.grid, d);
    const auto M = antisym(dir);
    Vec Dh(d.n);
    NodeBox::full(h.grid).for_each([&](const Index& i) {
        const std::size_t node = h.grid.index(i);
        for (int l = 0; l < d.n; ++l) Dh(l) = h.central(l, i);
        f.u.col(node) = dir.alpha.dot(Dh) * dir.p;
        for (int r = 0; r < d.m; ++r) f.v.block(r * d.n, node, d.n, 1) = M[r] * Dh;
    });
    return f;
}

PatchStats apply_oscillation(GridField& field, const NodeBox& box, const AdmissibleRankOne& C, double lambda,
                             double eps, int frequency, const OscillationOptions& opt,
                             std::vector<std::int8_t>* label) {
    check_direction(C);
    const auto dims = C.dims();
    if (!(field.dims == dims)) throw DimensionError("field and direction dimensions differ");
    const GridSpec& g = field.grid;
    const int D = g.axes(), n = dims.n, m = dims.m;
    for (int k = 0; k < D; ++k)
        if (box.lo[k] < 0 || box.hi[k] > g.resolution[k] || box.size(k) < 2 * opt.zero_layers + 2)
            throw PreconditionError("oscillation box outside the grid or too small");
    if (!field.exact_gradient) field.exact_gradient = Mat::Zero(dims.rows() * dims.cols(), g.node_count());
    if (label && label->size() != g.node_count()) throw DimensionError("label size differs from node count");

    int free_axis = -1;
    if (opt.aligned_phase && C.s == 0.0) {
        int nonzero = 0;
        for (int k = 0; k < n; ++k)
            if (C.alpha(k) != 0.0) ++nonzero, free_axis = k;
        if (nonzero != 1) free_axis = -1;
    }
    // Stretch of the phase so that a whole number of periods fits across the free axis.
    // Among nearby period counts, take the one that puts the fewest nodes on transition strips.
    double stretch = 1.0;
    if (free_axis >= 0) {
        const OscillationProfile B = oscillation_profile(lambda, eps, frequency, 1.0, opt.transition);
        const int cells = box.size(free_axis) - 1;
        const double E = cells * g.spacing(free_axis);
        const double periods = E * std::abs(C.alpha(free_axis)) * frequency;
        const long q0 = std::max(1L, std::lround(periods));
        int best = cells + 2;
        for (long q : {q0, q0 - 1, q0 + 1, q0 - 2, q0 + 2, q0 - 3, q0 + 3}) {
            if (q < 1) continue;
            const double step = static_cast<double>(q) * B.period / cells;
            int hits = 0;
            for (int j = 0; j <= cells; ++j) hits += B.piece(0.5 * B.breaks[1] + j * step) % 2;
            if (hits < best) {
                best = hits;
                stretch = static_cast<double>(q) / periods;
            }
        }
    }
    const OscillationProfile P =
        oscillation_profile(lambda, eps, frequency, stretch * C.alpha.norm(), opt.transition);
    std::vector<AxisCutoff> cut(D);
    Vec centre(D), xi_hat(D), a_bar = Vec::Zero(D);
    double xi_offset = 0.0;
    for (int k = 0; k < D; ++k) {
        const double hk = g.spacing(k);
        const double a = g.origin(k) + box.lo[k] * hk, b = g.origin(k) + (box.hi[k] - 1) * hk;
        cut[k] = {box.lo[k], box.hi[k] - 1, opt.zero_layers - 1, hk, std::max(eps / 8.0 * (b - a), opt.band_nodes * hk)};
        centre(k) = 0.5 * (a + b);
        xi_hat(k) = k < n ? stretch * C.alpha(k) : C.s;
        if (k < n) a_bar(k) = C.alpha(k);
        if (k == free_axis) {
            cut[k].off = true;
            centre(k) = a;
            xi_offset = 0.5 * P.breaks[1];
        }
    }
    const auto M = antisym(C);
    const int R = dims.rows(), Cc = dims.cols();

    // Local arrays over box plus one ghost layer.
    std::vector<int> ext(D);
    std::vector<std::size_t> est(D);
    std::size_t total = 1;
    for (int k = 0; k < D; ++k) {
        ext[k] = box.size(k) + 2;
        est[k] = total;
        total *= static_cast<std::size_t>(ext[k]);
    }
    auto local = [&](const Index& i) {
        std::size_t idx = 0;
        for (int k = 0; k < D; ++k) idx += static_cast<std::size_t>(i[k] - box.lo[k] + 1) * est[k];
        return idx;
    };
    std::vector<double> hval(total, 0.0);
    std::vector<double> grad(box.count() * R * Cc, 0.0);
    std::vector<std::int8_t> piece(box.count(), -1);
    auto inner = [&](const Index& i) {
        std::size_t idx = 0, s = 1;
        for (int k = 0; k < D; ++k) {
            idx += static_cast<std::size_t>(i[k] - box.lo[k]) * s;
            s *= static_cast<std::size_t>(box.size(k));
        }
        return idx;
    };

    PatchStats st;
    st.nodes = box.count();
    st.free_axis = free_axis;
    std::vector<double> z(D), dz(D), d2z(D);
    Vec grad_zeta(D);
    Mat Hz(D, D), H(D, D);
    Vec Ha(D);
    box.for_each([&](const Index& i) {
        const Vec x = g.coord(i);
        for (int k = 0; k < D; ++k) cut[k].eval(i[k], z[k], dz[k], d2z[k]);
        double zeta = 1.0;
        for (int k = 0; k < D; ++k) zeta *= z[k];
        for (int k = 0; k < D; ++k) {
            double gk = dz[k];
            for (int j = 0; j < D; ++j)
                if (j != k) gk *= z[j];
            grad_zeta(k) = gk;
            for (int l = 0; l < D; ++l) {
                double hkl = k == l ? d2z[k] : dz[k] * dz[l];
                for (int j = 0; j < D; ++j)
                    if (j != k && j != l) hkl *= z[j];
                Hz(k, l) = hkl;
            }
        }
        const double xi = xi_hat.dot(x - centre) + xi_offset;
        const double F = P.f(xi), F1 = P.df(xi), F2 = P.d2f(xi);
        const int pc = P.piece(xi);
        hval[local(i)] = zeta * F;
        H = F * Hz + F1 * (grad_zeta * xi_hat.transpose() + xi_hat * grad_zeta.transpose()) +
            zeta * F2 * xi_hat * xi_hat.transpose();
        st.hessian_sup = std::max(st.hessian_sup, H.cwiseAbs().maxCoeff());
        Ha = H * a_bar;
        const std::size_t li = inner(i);
        double* G = &grad[li * R * Cc];
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < Cc; ++c) G[r * Cc + c] = C.p(r) * Ha(c);
        for (int r = 0; r < m; ++r) {
            const Mat MH = M[r] * H.topRows(n);
            for (int k = 0; k < n; ++k)
                for (int c = 0; c < Cc; ++c) G[(m + r * n + k) * Cc + c] = MH(k, c);
        }
        piece[li] = static_cast<std::int8_t>(pc);
        const std::size_t node = g.index(i);
        auto& E = *field.exact_gradient;
        for (int e = 0; e < R * Cc; ++e) E(e, node) += G[e];
        std::int8_t lab = 0;
        if (zeta == 1.0 && pc == 0) {
            lab = 1;
            ++st.plus;
        } else if (zeta == 1.0 && pc == 2) {
            lab = -1;
            ++st.minus;
        }
        if (label) (*label)[node] = lab;
    });

    // Potential by central differences of the sampled h.
    Vec Dh(n);
    box.for_each([&](const Index& i) {
        const std::size_t li = local(i);
        for (int l = 0; l < n; ++l) Dh(l) = (hval[li + est[l]] - hval[li - est[l]]) / (2.0 * g.spacing(l));
        // Zero by symmetry of the profile about the face; pin the rounding residue.
        if (free_axis >= 0 && (i[free_axis] == box.lo[free_axis] || i[free_axis] == box.hi[free_axis] - 1))
            Dh(free_axis) = 0.0;
        const std::size_t node = g.index(i);
        const double ad = C.alpha.dot(Dh);
        for (int r = 0; r < m; ++r) {
            const double du = ad * C.p(r);
            field.u(r, node) += du;
            st.sup_norm = std::max(st.sup_norm, std::abs(du));
            const Vec dv = M[r] * Dh;
            for (int k = 0; k < n; ++k) {
                field.v(r * n + k, node) += dv(k);
                st.sup_norm = std::max(st.sup_norm, std::abs(dv(k)));
            }
        }
    });

    // Lipschitz constant of the exact gradient away from profile jumps.
    std::vector<std::size_t> bst(D);
    {
        std::size_t s = 1;
        for (int k = 0; k < D; ++k) {
            bst[k] = s;
            s *= static_cast<std::size_t>(box.size(k));
        }
    }
    box.for_each([&](const Index& i) {
        const std::size_t li = inner(i);
        for (int k = 0; k < D; ++k) {
            if (i[k] + 1 >= box.hi[k]) continue;
            const std::size_t lj = li + bst[k];
            if (piece[li] != piece[lj]) continue;
            double s2 = 0.0;
            for (int e = 0; e < R * Cc; ++e) {
                const double dgrad = grad[lj * R * Cc + e] - grad[li * R * Cc + e];
                s2 += dgrad * dgrad;
            }
            st.lipschitz = std::max(st.lipschitz, std::sqrt(s2) / g.spacing(k));
        }
    });
    return st;
}

double segment_distance(const Mat& G, const Mat& C, double a, double b) {
    const double cc = C.squaredNorm();
    if (cc == 0.0) return G.norm();
    const double t = std::clamp((G.array() * C.array()).sum() / cc, std::min(a, b), std::max(a, b));
    return (G - t * C).norm();
}

double slice_mean_audit(const GridField& f) {
    const int n = f.dims.n;
    const std::size_t slice = f.grid.stride(n), T = static_cast<std::size_t>(f.grid.resolution[n]);
    const double phi_inf = f.u.size() ? f.u.cwiseAbs().maxCoeff() : 0.0;
    if (phi_inf == 0.0) return 0.0;
    double cell = 1.0;
    for (int k = 0; k < n; ++k) cell *= f.grid.spacing(k);
    const double measure = std::pow(f.grid.edge, n);
    double worst = 0.0;
    for (std::size_t t = 0; t < T; ++t)
        for (int r = 0; r < f.dims.m; ++r) {
            const double s = f.u.row(r).segment(static_cast<Eigen::Index>(t * slice), static_cast<Eigen::Index>(slice)).sum();
            worst = std::max(worst, std::abs(s) * cell / (phi_inf * measure));
        }
    return worst;
}

OscillationResult build_oscillation(const AdmissibleRankOne& C, double lambda, const GridSpec& cube, double eps,
                                    int frequency, const OscillationOptions& opt) {
    check_open_unit(lambda, "lambda");
    check_open_unit(eps, "eps");
    check_direction(C);
    const auto dims = C.dims();
    if (cube.axes() != dims.n + 1) throw DimensionError("cube axes must equal n + 1");

    OscillationResult res;
    res.profile = oscillation_profile(lambda, eps, frequency, C.alpha.norm(), opt.transition);
    res.omega = GridField::zero(cube, dims, true);
    const std::size_t N = cube.node_count();
    std::vector<std::int8_t> label(N, 0);
    const PatchStats st = apply_oscillation(res.omega, NodeBox::full(cube), C, lambda, eps, frequency, opt, &label);

    const Mat Cd = C.dense();
    const double tol = opt.mask_tol < 0 ? eps / 4.0 : opt.mask_tol;
    const double h = cube.h();
    res.plus.assign(N, 0);
    res.minus.assign(N, 0);
    auto& rep = res.report;
    std::size_t np = 0, nm = 0;
    rep.supports_inside = true;
    const int D = cube.axes();
    for (std::size_t node = 0; node < N; ++node) {
        const Mat G = res.omega.gradient(node);
        if (label[node] == 1 && (G - lambda * Cd).norm() <= tol) res.plus[node] = 1, ++np;
        if (label[node] == -1 && (G - (lambda - 1.0) * Cd).norm() <= tol) res.minus[node] = 1, ++nm;
        rep.segment_distance = std::max(rep.segment_distance, segment_distance(G, Cd, lambda - 1.0, lambda));
        for (int i = 0; i < dims.m; ++i)
            rep.max_divergence = std::max(rep.max_divergence, std::abs(res.omega.divergence(i, node)));
        const Index ix = cube.multi(node);
        bool outer = false;
        for (int k = 0; k < D; ++k) outer = outer || ix[k] < 2 || ix[k] >= cube.resolution[k] - 2;
        if (outer && (res.omega.u.col(node).cwiseAbs().maxCoeff() != 0.0 ||
                      (res.omega.v.rows() && res.omega.v.col(node).cwiseAbs().maxCoeff() != 0.0)))
            rep.supports_inside = false;
    }
    rep.hessian_sup = st.hessian_sup;
    rep.divergence_bound = opt.divergence_constant * h * st.hessian_sup;
    rep.divergence_constant = st.hessian_sup > 0 ? rep.max_divergence / (h * st.hessian_sup) : 0.0;
    rep.divergence_ok = rep.max_divergence <= rep.divergence_bound;
    rep.slice_mean = slice_mean_audit(res.omega);
    rep.slice_mean_ok = rep.slice_mean <= 1e-10;
    rep.sup_norm = res.omega.sup_norm();
    rep.sup_ok = rep.sup_norm < eps;
    rep.lipschitz = st.lipschitz;
    rep.inclusion_ok = rep.segment_distance <= eps + 5.0 * h * st.lipschitz;
    rep.fraction_plus = static_cast<double>(np) / N;
    rep.fraction_minus = static_cast<double>(nm) / N;
    rep.target_plus = (1.0 - eps) * (1.0 - lambda);
    rep.target_minus = (1.0 - eps) * lambda;
    rep.slack = opt.slack_constant * (1.0 / frequency + h);
    rep.measure_ok = rep.fraction_plus >= rep.target_plus - rep.slack && rep.fraction_minus >= rep.target_minus - rep.slack;
    rep.success = rep.supports_inside && rep.divergence_ok && rep.slice_mean_ok && rep.sup_ok && rep.inclusion_ok &&
                  rep.measure_ok;
    std::ostringstream msg;
    if (!rep.supports_inside) msg << "support reaches the outer layers; ";
    if (!rep.divergence_ok) msg << "divergence bound exceeded; ";
    if (!rep.slice_mean_ok) msg << "slice mean audit failed; ";
    if (!rep.sup_ok) msg << "sup norm " << rep.sup_norm << " not below eps; ";
    if (!rep.inclusion_ok) msg << "gradient leaves the segment neighbourhood; ";
    if (!rep.measure_ok)
        msg << "measure bound missed: fractions " << rep.fraction_plus << ", " << rep.fraction_minus << "; ";
    rep.message = msg.str();
    if (rep.message.empty()) rep.message = "ok";
    return res;
}

}  // namespace wci
