#include "wci/tau_search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace wci {

DiagPoint TauNConfig::gamma(int j) const {
    const auto& l = legs[j];
    DiagPoint g;
    g.A = l.p * l.alpha.transpose();
    for (const auto& bi : l.beta) g.b.push_back(l.s * bi);
    return g;
}

void TauNConfig::refresh() {
    xi.clear();
    anchors.clear();
    DiagPoint r = rho;
    for (int j = 0; j < N(); ++j) {
        const DiagPoint g = gamma(j);
        anchors.push_back(r);
        xi.push_back(r + legs[j].kappa * g);
        r = r + g;
    }
}

TauNConfig make_tau(const DiagPoint& rho, std::vector<TauLeg> legs) {
    if (legs.size() < 2) throw PreconditionError("a tau_N configuration needs N >= 2 legs");
    const auto d = rho.dims();
    for (std::size_t j = 0; j < legs.size(); ++j) {
        const auto& l = legs[j];
        const std::string tag = " (leg " + std::to_string(j) + ")";
        if (l.p.size() != d.m || l.alpha.size() != d.n || static_cast<int>(l.beta.size()) != d.m)
            throw DimensionError("leg shape mismatch" + tag);
        for (const auto& bi : l.beta)
            if (bi.size() != d.n) throw DimensionError("beta shape mismatch" + tag);
        if (!(l.kappa > 1.0)) throw PreconditionError("factor not greater than one" + tag);
        if (l.alpha.norm() == 0.0) throw PreconditionError("alpha must be nonzero" + tag);
    }
    TauNConfig cfg;
    cfg.rho = rho;
    cfg.legs = std::move(legs);
    cfg.refresh();
    return cfg;
}

double tau_segment_distance(const TauNConfig& cfg, const DiagPoint& y) {
    const Vec v = y.flatten();
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < cfg.N(); ++j) {
        const Vec a = cfg.xi[j].flatten(), b = cfg.anchors[j].flatten();
        const Vec d = b - a;
        const double dd = d.squaredNorm();
        const double t = dd > 0 ? std::clamp((v - a).dot(d) / dd, 0.0, 1.0) : 0.0;
        best = std::min(best, (v - a - t * d).norm());
    }
    return best;
}

double TauResidual::max() const { return std::max({rk1, rk2, rk3, closure, graph}); }

TauResidual tau_residual(const TauNConfig& cfg, const FluxFunction* sigma) {
    const auto d = cfg.dims();
    const int m = d.m, n = d.n, N = cfg.N();
    std::vector<double> rk1, rk2, rk3, clo, gr;
    Vec sp = Vec::Zero(m);
    std::vector<Vec> sb(m, Vec::Zero(n));
    Mat pa = Mat::Zero(m, n);
    std::vector<Mat> ba(m, Mat::Zero(n, n));
    DiagPoint total = DiagPoint::zero(d);
    for (int j = 0; j < N; ++j) {
        const auto& l = cfg.legs[j];
        sp += l.s * l.p;
        pa += l.p * l.alpha.transpose();
        for (int i = 0; i < m; ++i) {
            sb[i] += l.s * l.beta[i];
            ba[i] += l.beta[i] * l.alpha.transpose();
            rk3.push_back(l.beta[i].dot(l.alpha));
        }
        total = total + cfg.gamma(j);
    }
    for (int i = 0; i < m; ++i) rk1.push_back(sp(i));
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < n; ++k) rk1.push_back(sb[i](k));
    const Vec pav = vec_row(pa);
    rk2.assign(pav.data(), pav.data() + pav.size());
    for (int i = 0; i < m; ++i) {
        const Vec v = vec_row(ba[i]);
        rk2.insert(rk2.end(), v.data(), v.data() + v.size());
    }
    const Vec tv = total.flatten();
    clo.assign(tv.data(), tv.data() + tv.size());
    if (sigma) {
        for (int j = 0; j < N; ++j) {
            const Mat S = (*sigma)(cfg.xi[j].A);
            for (int i = 0; i < m; ++i)
                for (int k = 0; k < n; ++k) gr.push_back(cfg.xi[j].b[i](k) - S(i, k));
        }
    }
    TauResidual r;
    auto inf = [](const std::vector<double>& v) {
        double x = 0.0;
        for (double e : v) x = std::max(x, std::abs(e));
        return x;
    };
    r.rk1 = inf(rk1);
    r.rk2 = inf(rk2);
    r.rk3 = inf(rk3);
    r.closure = inf(clo);
    r.graph = inf(gr);
    std::vector<double> all;
    for (const auto* v : {&rk1, &rk2, &rk3, &clo, &gr}) all.insert(all.end(), v->begin(), v->end());
    r.all = Eigen::Map<Vec>(all.data(), static_cast<Eigen::Index>(all.size()));
    return r;
}

namespace {

Vec pack(const TauNConfig& c) {
    const auto d = c.dims();
    std::vector<double> z;
    const Vec r = c.rho.flatten();
    z.insert(z.end(), r.data(), r.data() + r.size());
    for (const auto& l : c.legs) {
        z.insert(z.end(), l.p.data(), l.p.data() + d.m);
        z.insert(z.end(), l.alpha.data(), l.alpha.data() + d.n);
        z.push_back(l.s);
        for (const auto& bi : l.beta) z.insert(z.end(), bi.data(), bi.data() + d.n);
    }
    return Eigen::Map<Vec>(z.data(), static_cast<Eigen::Index>(z.size()));
}

TauNConfig unpack(const Vec& z, const TauNConfig& shape) {
    const auto d = shape.dims();
    TauNConfig c = shape;
    Eigen::Index k = 0;
    c.rho = DiagPoint::unflatten(z.head(2 * d.m * d.n), d);
    k += 2 * d.m * d.n;
    for (auto& l : c.legs) {
        l.p = z.segment(k, d.m);
        k += d.m;
        l.alpha = z.segment(k, d.n);
        k += d.n;
        l.s = z(k++);
        for (auto& bi : l.beta) {
            bi = z.segment(k, d.n);
            k += d.n;
        }
    }
    c.refresh();
    return c;
}

double leg_norm(const TauNConfig& c) {
    double s = 0.0;
    for (const auto& l : c.legs) {
        s += l.p.squaredNorm();
        for (const auto& bi : l.beta) s += bi.squaredNorm();
    }
    return s;
}

double time_scale(const TauNConfig& c) {
    double s = 0.0;
    for (const auto& l : c.legs) s += l.s * l.s;
    return s;
}

}  // namespace

TauSolveResult solve_tau(const FluxFunction& sigma, const TauNConfig& init, const TauSolveOptions& opt) {
    const double norm0 = leg_norm(init);
    const double time0 = time_scale(init);
    auto full = [&](const Vec& z, double* tau_inf) {
        const TauNConfig c = unpack(z, init);
        const auto tr = tau_residual(c, sigma);
        if (tau_inf) *tau_inf = tr.max();
        std::vector<double> g(tr.all.data(), tr.all.data() + tr.all.size());
        for (const auto& l : c.legs) g.push_back(l.alpha.squaredNorm() - 1.0);
        g.push_back(leg_norm(c) - norm0);
        if (opt.fix_time_scale) g.push_back(time_scale(c) - time0);
        return Vec(Eigen::Map<Vec>(g.data(), static_cast<Eigen::Index>(g.size())));
    };

    TauSolveResult res;
    Vec z = pack(init);
    // Normalize alpha_j into the gauge before iterating.
    {
        TauNConfig c = init;
        for (auto& l : c.legs) {
            const double r = l.alpha.norm();
            l.alpha /= r;
            l.p *= r;
            l.s /= r;
            for (auto& bi : l.beta) bi *= r;
        }
        c.refresh();
        if (tau_residual(c, sigma).max() <= tau_residual(init, sigma).max() * (1 + 1e-12) + 1e-300) z = pack(c);
    }
    double tau_inf = 0.0;
    Vec r = full(z, &tau_inf);
    double mu = 1e-3;
    const Eigen::Index nz = z.size();
    int it = 0;
    for (; it < opt.max_iter && tau_inf > opt.tol; ++it) {
        Mat J(r.size(), nz);
        for (Eigen::Index k = 0; k < nz; ++k) {
            const double h = opt.fd_step * (1.0 + std::abs(z(k)));
            Vec zp = z, zm = z;
            zp(k) += h;
            zm(k) -= h;
            J.col(k) = (full(zp, nullptr) - full(zm, nullptr)) / (2 * h);
        }
        const Mat H = J.transpose() * J;
        const Vec g = J.transpose() * r;
        bool accepted = false;
        for (int tries = 0; tries < 12; ++tries) {
            const Vec step = (H + mu * Mat::Identity(nz, nz)).ldlt().solve(-g);
            const Vec z2 = z + step;
            double t2 = 0.0;
            const Vec r2 = full(z2, &t2);
            if (r2.allFinite() && r2.squaredNorm() < r.squaredNorm()) {
                z = z2;
                r = r2;
                tau_inf = t2;
                mu = std::max(mu / 5, 1e-15);
                accepted = true;
                break;
            }
            mu *= 8;
        }
        if (!accepted) break;
    }
    res.config = unpack(z, init);
    res.residual = tau_residual(res.config, sigma).max();
    res.iterations = it;
    res.success = res.residual <= opt.tol;
    if (!res.success) {
        std::ostringstream os;
        os << "tau solve stalled at residual " << res.residual << " after " << it << " iterations";
        res.message = os.str();
    }
    return res;
}

TNConfig lift_tau(const TauNConfig& cfg, double s) {
    if (s == 0.0) throw PreconditionError("scale parameter must be nonzero");
    const auto d = cfg.dims();
    std::vector<std::pair<Mat, double>> legs;
    for (const auto& l : cfg.legs) {
        AdmissibleRankOne c;
        c.p = l.p;
        c.alpha = l.alpha;
        c.s = s * l.s;
        for (const auto& bi : l.beta) c.beta.push_back(bi / s);
        legs.emplace_back(c.dense(), l.kappa);
    }
    return build_tn(lift_diag(cfg.rho), legs, d);
}

Vec m1_sigma(const FluxFunction& sigma, const Vec& p) {
    if (sigma.dims.m != 1) throw DimensionError("single-function routines require m = 1");
    return sigma(p.transpose()).transpose();
}

Mat m1_dsigma(const FluxFunction& sigma, const Vec& p) {
    if (sigma.dims.m != 1) throw DimensionError("single-function routines require m = 1");
    return sigma.jacobian(p.transpose());
}

double m1_G(const FluxFunction& sigma, const Vec& p, const Vec& q) {
    return (m1_sigma(sigma, p) - m1_sigma(sigma, q)).dot(p - q);
}

double m1_delta(const FluxFunction& sigma, const Vec& p, const Vec& q, bool allow_fd) {
    if (!sigma.has_jacobian() && !allow_fd)
        throw PreconditionError("flux has no Jacobian and finite differences are disabled");
    const auto n = p.size();
    const Mat Sp = m1_dsigma(sigma, p), Sq = m1_dsigma(sigma, q);
    const Vec sp = m1_sigma(sigma, p), sq = m1_sigma(sigma, q);
    Mat M = Mat::Zero(n + 1, n + 1);
    M.topLeftCorner(n, n) = Sp - Sq;
    M.topRightCorner(n, 1) = sp - sq - Sq * (p - q);
    M.bottomLeftCorner(1, n) = (sp - sq + Sp.transpose() * (p - q)).transpose();
    return M.determinant();
}

EqualFluxPair find_equal_flux_pair(const FluxFunction& sigma, std::array<double, 2> seed_plus,
                                   std::array<double, 2> seed_minus, const EqualFluxOptions& opt) {
    if (sigma.dims.m != 1) throw DimensionError("single-function routines require m = 1");
    const int n = sigma.dims.n;
    Vec e = opt.direction ? opt.direction->normalized() : Vec(Vec::Unit(n, 0));
    auto sort2 = [](std::array<double, 2>& a) {
        if (a[0] > a[1]) std::swap(a[0], a[1]);
    };
    sort2(seed_plus);
    sort2(seed_minus);
    if (!(seed_plus[1] <= seed_minus[0] || seed_minus[1] <= seed_plus[0]))
        throw PreconditionError("seed intervals must be disjoint");
    auto g = [&](double t) { return m1_sigma(sigma, t * e).dot(e); };
    const int K = std::max(8, opt.samples);
    auto sample = [&](std::array<double, 2> I) {
        std::vector<std::pair<double, double>> s;
        for (int k = 0; k <= K; ++k) {
            const double t = I[0] + (I[1] - I[0]) * (k + 0.5) / (K + 1.0);
            s.emplace_back(t, g(t));
        }
        return s;
    };
    const auto s1 = sample(seed_plus), s2 = sample(seed_minus);
    auto range = [](const std::vector<std::pair<double, double>>& s) {
        double lo = s[0].second, hi = s[0].second;
        for (const auto& [t, v] : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return std::array<double, 2>{lo, hi};
    };
    const auto r1 = range(s1), r2 = range(s2);
    const double lo = std::max(r1[0], r2[0]), hi = std::min(r1[1], r2[1]);
    if (!(lo < hi)) {
        std::ostringstream os;
        os << "no equal-flux level: flux ranges [" << r1[0] << ", " << r1[1] << "] and [" << r2[0] << ", " << r2[1]
           << "] on the seed intervals do not overlap";
        throw SolverFailure(os.str());
    }
    const double c = 0.5 * (lo + hi);
    auto root = [&](const std::vector<std::pair<double, double>>& s) {
        for (std::size_t k = 0; k + 1 < s.size(); ++k) {
            double a = s[k].first, b = s[k + 1].first;
            double fa = s[k].second - c, fb = s[k + 1].second - c;
            if (fa == 0.0) return a;
            if (fa * fb > 0) continue;
            for (int it = 0; it < 200 && b - a > opt.tol; ++it) {
                const double mid = 0.5 * (a + b);
                const double fm = g(mid) - c;
                if ((fm < 0) == (fa < 0)) {
                    a = mid;
                    fa = fm;
                } else {
                    b = mid;
                }
            }
            return 0.5 * (a + b);
        }
        throw SolverFailure("no bracket for the equal-flux level on a seed interval");
    };
    EqualFluxPair out;
    out.p_plus = root(s1) * e;
    out.p_minus = root(s2) * e;
    out.level = c;
    out.range_overlap = {lo, hi};
    out.G = m1_G(sigma, out.p_plus, out.p_minus);
    out.delta = m1_delta(sigma, out.p_plus, out.p_minus);
    if (!(std::abs(out.delta) > opt.delta_min)) {
        std::ostringstream os;
        os << "equal-flux pair found but delta = " << out.delta << " is not certified nonzero";
        throw SolverFailure(os.str());
    }
    return out;
}

Decomposition decompose_sigma_point(const FluxFunction& sigma, const Vec& p, const Vec& beta, const Vec& seed_plus,
                                    double seed_lambda, const DecomposeOptions& opt) {
    const auto n = p.size();
    Decomposition out;
    if (!(seed_lambda > 0 && seed_lambda < 1)) {
        out.message = "lambda seed outside (0, 1)";
        return out;
    }
    Vec pp = seed_plus;
    double lam = seed_lambda;
    auto q_of = [&](const Vec& a, double l) { return Vec((p - l * a) / (1 - l)); };
    auto F = [&](const Vec& a, double l) {
        const Vec q = q_of(a, l);
        const Vec sa = m1_sigma(sigma, a);
        Vec f(n + 1);
        f.head(n) = l * sa + (1 - l) * m1_sigma(sigma, q) - beta;
        f(n) = (sa - beta).dot(a - p);
        return f;
    };
    Vec f = F(pp, lam);
    int it = 0;
    for (; it < opt.max_iter && f.cwiseAbs().maxCoeff() > opt.tol; ++it) {
        const Vec q = q_of(pp, lam);
        if ((pp - q).norm() < opt.min_separation) break;
        const Mat Sa = m1_dsigma(sigma, pp), Sq = m1_dsigma(sigma, q);
        const Vec sa = m1_sigma(sigma, pp), sq = m1_sigma(sigma, q);
        Mat J = Mat::Zero(n + 1, n + 1);
        J.topLeftCorner(n, n) = lam * (Sa - Sq);
        J.topRightCorner(n, 1) = sa - sq - Sq * (pp - q);
        J.bottomLeftCorner(1, n) = (Sa.transpose() * (pp - p) + sa - beta).transpose();
        const Vec step = J.fullPivLu().solve(-f);
        if (!step.allFinite()) break;
        double t = 1.0;
        bool moved = false;
        for (int h = 0; h < 30; ++h, t *= 0.5) {
            const Vec a2 = pp + t * step.head(n);
            const double l2 = lam + t * step(n);
            if (!(l2 > 0 && l2 < 1)) continue;
            const Vec f2 = F(a2, l2);
            if (f2.allFinite() && f2.norm() < f.norm()) {
                pp = a2;
                lam = l2;
                f = f2;
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }
    out.iterations = it;
    out.lambda = lam;
    out.p_plus = pp;
    out.p_minus = q_of(pp, lam);
    out.residual = f.cwiseAbs().maxCoeff();
    const Vec xp = m1_sigma(sigma, out.p_plus), xm = m1_sigma(sigma, out.p_minus);
    out.recombination = std::sqrt((lam * out.p_plus + (1 - lam) * out.p_minus - p).squaredNorm() +
                                  (lam * xp + (1 - lam) * xm - beta).squaredNorm());
    if ((out.p_plus - out.p_minus).norm() < opt.min_separation) out.message = "decomposition collapsed (p_+ = p_-)";
    else if (!(lam > 0 && lam < 1)) out.message = "lambda left (0, 1)";
    else if (out.residual > opt.tol) out.message = "Newton did not converge";
    out.success = out.message.empty();
    return out;
}

TauNConfig tau2_from_pair(const FluxFunction& sigma, const Vec& p_plus, const Vec& p_minus) {
    const auto n = p_plus.size();
    const Vec d = p_plus - p_minus;
    if (d.norm() == 0.0) throw PreconditionError("pair points must differ");
    const Vec sp = m1_sigma(sigma, p_plus), sm = m1_sigma(sigma, p_minus);
    const double kappa = 2.0;
    const double w = 2 * kappa - 1;
    TauLeg l1;
    l1.alpha = d.normalized();
    l1.p = Vec::Constant(1, d.norm() / w);
    l1.kappa = kappa;
    const Vec db = (sp - sm) / w;
    if (n == 1 || db.norm() == 0.0) {
        l1.s = 0.0;
        l1.beta = {Vec::Zero(n)};
    } else {
        l1.s = 1.0;
        l1.beta = {db};
    }
    TauLeg l2 = l1;
    l2.p = -l1.p;
    l2.beta = {-l1.beta[0]};
    DiagPoint xm;
    xm.A = p_minus.transpose();
    xm.b = {sm};
    DiagPoint g;
    g.A = l1.p * l1.alpha.transpose();
    g.b = {l1.s * l1.beta[0]};
    return make_tau(xm + (kappa - 1) * g, {l1, l2});
}

SigmaSet::SigmaSet(FluxFunction sigma, Region delta_plus, Region delta_minus, EqualFluxPair witness, double eta)
    : sigma_(std::move(sigma)),
      plus_(std::move(delta_plus)),
      minus_(std::move(delta_minus)),
      witness_(std::move(witness)),
      eta_(eta),
      cache_(std::make_shared<Cache>()) {
    if (sigma_.dims.m != 1) throw DimensionError("SigmaSet requires m = 1");
}

SigmaSet SigmaSet::from_intervals(const FluxFunction& sigma, std::array<double, 2> plus, std::array<double, 2> minus,
                                  const EqualFluxOptions& opt) {
    const auto pair = find_equal_flux_pair(sigma, plus, minus, opt);
    const Vec e = opt.direction ? opt.direction->normalized() : Vec(Vec::Unit(sigma.dims.n, 0));
    auto region = [e](std::array<double, 2> I) {
        const double lo = std::min(I[0], I[1]), hi = std::max(I[0], I[1]);
        return [e, lo, hi](const Vec& x) {
            const double t = x.dot(e);
            return t > lo && t < hi && (x - t * e).norm() < 0.5 * (hi - lo);
        };
    };
    return SigmaSet(sigma, region(plus), region(minus), pair);
}

std::optional<Decomposition> SigmaSet::decompose(const DiagPoint& y) const {
    if (y.dims() != sigma_.dims) throw DimensionError("point shape does not match the flux");
    const Vec key = y.flatten();
    const std::vector<double> k(key.data(), key.data() + key.size());
    {
        std::lock_guard<std::mutex> lock(cache_->mutex);
        auto hit = cache_->entries.find(k);
        if (hit != cache_->entries.end()) {
            if (hit->second.success) return hit->second;
            return std::nullopt;
        }
    }
    const Vec p = y.A.transpose();
    const Vec beta = y.b[0];
    const Vec& a = witness_.p_plus;
    const Vec& b = witness_.p_minus;
    const double dd = (a - b).squaredNorm();
    const double proj = std::clamp((p - b).dot(a - b) / dd, 0.05, 0.95);
    Decomposition best;
    for (double lam : {proj, 0.5, 0.25, 0.75, 0.1, 0.9}) {
        auto d = decompose_sigma_point(sigma_, p, beta, a, lam);
        if (d.success && d.lambda > eta_ && d.lambda < 1 - eta_ && plus_(d.p_plus) && minus_(d.p_minus)) {
            best = d;
            break;
        }
        if (!best.success && best.message.empty()) best = d;
    }
    if (best.success && !(best.lambda > eta_ && best.lambda < 1 - eta_ && plus_(best.p_plus) && minus_(best.p_minus)))
        best.success = false;
    {
        std::lock_guard<std::mutex> lock(cache_->mutex);
        cache_->entries[k] = best;
    }
    if (best.success) return best;
    return std::nullopt;
}

void SigmaSet::clear_cache() const {
    std::lock_guard<std::mutex> lock(cache_->mutex);
    cache_->entries.clear();
}

std::optional<Decomposition> SigmaSet::decompose_near(const DiagPoint& y, const Decomposition& seed) const {
    if (y.dims() != sigma_.dims) throw DimensionError("point shape does not match the flux");
    const Vec p = y.A.transpose();
    const Vec beta = y.b[0];
    auto accept = [&](const Decomposition& d) {
        return d.success && d.lambda > eta_ && d.lambda < 1 - eta_ && plus_(d.p_plus) && minus_(d.p_minus);
    };
    if (seed.success) {
        const double lam = std::clamp(seed.lambda, 1e-6, 1 - 1e-6);
        auto d = decompose_sigma_point(sigma_, p, beta, seed.p_plus, lam);
        if (accept(d)) return d;
    }
    const Vec& a = witness_.p_plus;
    const Vec& b = witness_.p_minus;
    const double proj = std::clamp((p - b).dot(a - b) / (a - b).squaredNorm(), 0.05, 0.95);
    for (double lam : {proj, 0.5, 0.25, 0.75}) {
        auto d = decompose_sigma_point(sigma_, p, beta, a, lam);
        if (accept(d)) return d;
    }
    return std::nullopt;
}

std::optional<TauNConfig> SigmaSet::generate(const DiagPoint& y) const {
    auto d = decompose(y);
    if (!d) return std::nullopt;
    return tau2_from_pair(sigma_, d->p_plus, d->p_minus);
}

double SigmaSet::estimate_tube_radius(const TauNConfig& cfg, int segment_samples, int directions,
                                      std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    const auto d = cfg.dims();
    std::vector<Vec> centers;
    for (int j = 0; j < cfg.N(); ++j) {
        const Vec a = cfg.xi[j].flatten(), b = cfg.anchors[j].flatten();
        for (int k = 0; k < segment_samples; ++k) {
            const double t = segment_samples == 1 ? 0.5 : static_cast<double>(k) / (segment_samples - 1);
            centers.push_back((1 - t) * a + t * b);
        }
    }
    std::vector<Vec> dirs;
    for (int k = 0; k < directions; ++k) {
        Vec v(2 * d.m * d.n);
        for (auto& x : v) x = g(rng);
        dirs.push_back(v.normalized());
    }
    auto ok = [&](double r) {
        for (const auto& c : centers) {
            if (!contains(DiagPoint::unflatten(c, d))) return false;
            for (const auto& v : dirs)
                if (!contains(DiagPoint::unflatten(c + r * v, d))) return false;
        }
        return true;
    };
    if (!ok(0.0)) return 0.0;
    double lo = 0.0, hi = 1.0;
    if (ok(hi)) return hi;
    for (int it = 0; it < 30; ++it) {
        const double mid = 0.5 * (lo + hi);
        (ok(mid) ? lo : hi) = mid;
    }
    return lo;
}

namespace {
const Mat& J2() {
    static const Mat J = (Mat(2, 2) << 0, -1, 1, 0).finished();
    return J;
}
}  // namespace

Mat map_L(const DiagPoint& x) {
    const auto d = x.dims();
    if (d.n != 2) throw DimensionError("map_L is defined for n = 2");
    Mat M(2 * d.m, 2);
    M.topRows(d.m) = x.A;
    M.bottomRows(d.m) = x.b_matrix() * J2();
    return M;
}

DiagPoint map_L_inverse(const Mat& M, int m) {
    if (M.rows() != 2 * m || M.cols() != 2) throw DimensionError("map_L inverse expects a 2m x 2 matrix");
    DiagPoint x;
    x.A = M.topRows(m);
    const Mat B = M.bottomRows(m) * J2().transpose();
    for (int i = 0; i < m; ++i) x.b.push_back(B.row(i).transpose());
    return x;
}

namespace {

bool noncollinear(const Vec& a, const Vec& b, double tol = 1e-9) {
    return std::abs(a(0) * b(1) - a(1) * b(0)) > tol * a.norm() * b.norm();
}

Mat null_space(const Mat& M, int& rank) {
    Eigen::JacobiSVD<Mat> svd(M, Eigen::ComputeFullV);
    rank = 0;
    const Vec& s = svd.singularValues();
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > 1e-10 * std::max(1.0, s(0))) ++rank;
    return svd.matrixV().rightCols(M.cols() - rank);
}

}  // namespace

PQKernel solve_pq_kernel(const std::vector<Vec>& alphas, int m) {
    const int N = static_cast<int>(alphas.size());
    if (N < 3) throw PreconditionError("need N >= 3 directions");
    if (m < 1) throw DimensionError("m must be positive");
    for (const auto& a : alphas)
        if (a.size() != 2) throw DimensionError("directions must be 2-vectors");
    bool found = false;
    for (int i = 0; i < N && !found; ++i)
        for (int j = i + 1; j < N && !found; ++j)
            for (int k = j + 1; k < N && !found; ++k)
                found = noncollinear(alphas[i], alphas[j]) && noncollinear(alphas[j], alphas[k]) &&
                        noncollinear(alphas[i], alphas[k]);
    if (!found) {
        std::ostringstream os;
        os << "no three mutually noncollinear directions; offending triple (0, 1, 2)";
        throw PreconditionError(os.str());
    }
    Mat Sp = Mat::Zero(2 * m, m * N), Sq = Mat::Zero(3 * m, m * N);
    for (int j = 0; j < N; ++j) {
        const double x = alphas[j](0), y = alphas[j](1);
        for (int i = 0; i < m; ++i) {
            Sp(i, j * m + i) = x;
            Sp(m + i, j * m + i) = y;
            Sq(i, j * m + i) = x * x;
            Sq(m + i, j * m + i) = y * y;
            Sq(2 * m + i, j * m + i) = x * y;
        }
    }
    PQKernel k;
    k.p_basis = null_space(Sp, k.rank_p);
    k.q_basis = null_space(Sq, k.rank_q);
    if (k.rank_p != 2 * m || k.rank_q != 3 * m) throw PreconditionError("kernel rank identities violated");
    return k;
}

TauNConfig special_tau_n2(const std::vector<Vec>& alphas, const Vec& delta, const std::vector<Vec>& ps,
                          const std::vector<Vec>& qs, const std::vector<double>& kappa, const DiagPoint& base) {
    const int N = static_cast<int>(alphas.size());
    if (static_cast<int>(kappa.size()) != N || static_cast<int>(ps.size()) != N || static_cast<int>(qs.size()) != N)
        throw DimensionError("need one kappa, p and q per direction");
    if (delta.size() != 2) throw DimensionError("delta must be a 2-vector");
    const int m = base.dims().m;
    std::vector<TauLeg> legs;
    for (int j = 0; j < N; ++j) {
        TauLeg l;
        l.alpha = alphas[j];
        l.p = ps[j];
        l.s = alphas[j].dot(delta);
        l.kappa = kappa[j];
        Vec perp(2);
        perp << -alphas[j](1), alphas[j](0);
        for (int i = 0; i < m; ++i) l.beta.push_back(qs[j](i) * perp);
        legs.push_back(std::move(l));
    }
    auto cfg = make_tau(base, std::move(legs));
    cfg.degenerate_time_scaling = delta.norm() == 0.0;
    return cfg;
}

TauNConfig special_tau_n2(const std::vector<Vec>& alphas, const Vec& delta, const PQKernel& kernel,
                          const Vec& p_coeffs, const Vec& q_coeffs, const std::vector<double>& kappa,
                          const DiagPoint& base) {
    const int N = static_cast<int>(alphas.size());
    const int m = base.dims().m;
    if (p_coeffs.size() != kernel.p_basis.cols() || q_coeffs.size() != kernel.q_basis.cols())
        throw DimensionError("kernel coefficient length mismatch");
    const Vec P = kernel.p_basis * p_coeffs;
    const Vec Q = kernel.q_basis.cols() > 0 ? Vec(kernel.q_basis * q_coeffs) : Vec(Vec::Zero(m * N));
    std::vector<Vec> ps, qs;
    for (int j = 0; j < N; ++j) {
        ps.push_back(P.segment(j * m, m));
        qs.push_back(Q.segment(j * m, m));
    }
    return special_tau_n2(alphas, delta, ps, qs, kappa, base);
}

DimensionReport dimension_check(int m, int N, std::uint64_t seed, int retries) {
    if (N < 3) throw PreconditionError("dimension count needs N >= 3");
    if (m < 1) throw DimensionError("m must be positive");
    DimensionReport rep;
    rep.parameters = 4 * m + N + 2 * N + 2 + m * (N - 2) + m * (N - 3);
    rep.gauge = N + 1;
    rep.formula = (2 * m + 2) * N + 1 - m;

    auto corners = [&](const Vec& th) {
        Eigen::Index k = 0;
        DiagPoint base;
        base.A = unvec_row(th.segment(k, 2 * m), m, 2);
        k += 2 * m;
        for (int i = 0; i < m; ++i) {
            base.b.push_back(th.segment(k, 2));
            k += 2;
        }
        std::vector<double> kappa(N);
        for (int j = 0; j < N; ++j) kappa[j] = th(k++);
        std::vector<Vec> al(N);
        for (int j = 0; j < N; ++j) {
            al[j] = th.segment(k, 2);
            k += 2;
        }
        const Vec delta = th.segment(k, 2);
        k += 2;
        std::vector<Vec> ps(N, Vec::Zero(m)), qs(N, Vec::Zero(m));
        for (int j = 2; j < N; ++j) {
            ps[j] = th.segment(k, m);
            k += m;
        }
        for (int j = 3; j < N; ++j) {
            qs[j] = th.segment(k, m);
            k += m;
        }
        Mat A2(2, 2);
        A2 << al[0](0), al[1](0), al[0](1), al[1](1);
        Mat A3(3, 3);
        for (int j = 0; j < 3; ++j) {
            A3(0, j) = al[j](0) * al[j](0);
            A3(1, j) = al[j](1) * al[j](1);
            A3(2, j) = al[j](0) * al[j](1);
        }
        for (int i = 0; i < m; ++i) {
            Vec rp = Vec::Zero(2), rq = Vec::Zero(3);
            for (int j = 2; j < N; ++j) rp -= ps[j](i) * al[j];
            for (int j = 3; j < N; ++j) {
                rq(0) -= qs[j](i) * al[j](0) * al[j](0);
                rq(1) -= qs[j](i) * al[j](1) * al[j](1);
                rq(2) -= qs[j](i) * al[j](0) * al[j](1);
            }
            const Vec sp = A2.partialPivLu().solve(rp);
            const Vec sq = A3.partialPivLu().solve(rq);
            for (int j = 0; j < 2; ++j) ps[j](i) = sp(j);
            for (int j = 0; j < 3; ++j) qs[j](i) = sq(j);
        }
        const auto cfg = special_tau_n2(al, delta, ps, qs, kappa, base);
        Vec out(4 * m * N);
        for (int j = 0; j < N; ++j) out.segment(4 * m * j, 4 * m) = vec_row(map_L(cfg.xi[j]));
        return out;
    };

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> U(1.5, 3.0);
    for (int attempt = 0; attempt < std::max(1, retries); ++attempt) {
        Vec th(rep.parameters);
        for (auto& x : th) x = g(rng);
        for (int j = 0; j < N; ++j) th(4 * m + j) = U(rng);
        const Vec y0 = corners(th);
        Mat J(y0.size(), th.size());
        for (Eigen::Index k = 0; k < th.size(); ++k) {
            const double h = 1e-6 * (1 + std::abs(th(k)));
            Vec tp = th, tm = th;
            tp(k) += h;
            tm(k) -= h;
            J.col(k) = (corners(tp) - corners(tm)) / (2 * h);
        }
        Eigen::JacobiSVD<Mat> svd(J);
        const Vec& s = svd.singularValues();
        int rank = 0;
        for (Eigen::Index i = 0; i < s.size(); ++i)
            if (s(i) > 1e-7 * s(0)) ++rank;
        ++rep.attempts;
        if (rank > rep.jacobian_rank) rep.jacobian_rank = rank;
    }
    rep.nullity = rep.parameters - rep.jacobian_rank;
    rep.observed = rep.jacobian_rank;
    return rep;
}

nlohmann::json to_json(const DiagPoint& x) {
    nlohmann::json b = nlohmann::json::array();
    for (const auto& bi : x.b) b.push_back(std::vector<double>(bi.data(), bi.data() + bi.size()));
    return {{"A", mat_to_json(x.A)}, {"b", b}};
}

nlohmann::json to_json(const TauNConfig& cfg) {
    auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json j;
    j["rho"] = to_json(cfg.rho);
    j["legs"] = nlohmann::json::array();
    for (const auto& l : cfg.legs) {
        nlohmann::json beta = nlohmann::json::array();
        for (const auto& bi : l.beta) beta.push_back(vec(bi));
        j["legs"].push_back({{"p", vec(l.p)}, {"alpha", vec(l.alpha)}, {"s", l.s}, {"beta", beta}, {"kappa", l.kappa}});
    }
    j["xi"] = nlohmann::json::array();
    for (const auto& x : cfg.xi) j["xi"].push_back(to_json(x));
    j["anchors"] = nlohmann::json::array();
    for (const auto& x : cfg.anchors) j["anchors"].push_back(to_json(x));
    j["degenerate_time_scaling"] = cfg.degenerate_time_scaling;
    return j;
}

}  // namespace wci
