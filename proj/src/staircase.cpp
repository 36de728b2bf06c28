#include "wci/staircase.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace wci {

StaircaseSchedule staircase_schedule(const std::vector<double>& kappa, double eps) {
    if (kappa.empty()) throw PreconditionError("schedule needs at least one factor");
    if (!(eps > 0.0 && eps < 1.0)) throw PreconditionError("eps must lie in (0, 1)");
    StaircaseSchedule s;
    s.N = static_cast<int>(kappa.size());
    s.eps = eps;
    s.mu = 1.0;
    for (double k : kappa) {
        if (!(k > 1.0)) throw PreconditionError("all factors must exceed one");
        s.lambda.push_back(1.0 - 1.0 / k);
        s.mu *= s.lambda.back();
    }
    const double root = std::sqrt(1.0 - eps);
    while (1.0 - std::pow(s.mu, s.k + 1) < root) ++s.k;

    const int N = s.N, k = s.k;
    auto feasible = [&](double e) {
        return (k + 1) * (N + 1) * e < eps && std::pow(1.0 - e, (k + 2) * N) >= root;
    };
    double lo = 0.0, hi = eps;
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        (feasible(mid) ? lo : hi) = mid;
    }
    s.eps_inner = lo;
    s.depth_ok = 1.0 - std::pow(s.mu, k + 1) >= root;
    s.amplitude_ok = (k + 1) * (N + 1) * lo < eps;
    s.measure_ok = std::pow(1.0 - lo, (k + 2) * N) >= root;
    return s;
}

double StaircaseResult::combined_fraction() const {
    double s = 0.0;
    for (double f : fractions) s += f;
    return s;
}

std::pair<int, double> recover_segment(const TNConfig& cfg, const Mat& Y, double tol) {
    const double scale = std::max(1.0, Y.norm());
    for (int j = 0; j < cfg.N(); ++j) {
        const Mat D = cfg.anchors[j] - cfg.X[j];
        const double dd = D.squaredNorm();
        const double lam = dd > 0 ? std::clamp(((Y - cfg.X[j]).array() * D.array()).sum() / dd, 0.0, 1.0) : 0.0;
        if ((Y - cfg.X[j] - lam * D).norm() <= tol * scale) return {j, lam};
    }
    std::ostringstream os;
    os << "Y is off the segment set (distance " << dist_to_segments(cfg, Y) << ")";
    throw PreconditionError(os.str());
}

namespace {

NodeMask erode(const GridSpec& g, const NodeMask& in, int layers) {
    NodeMask cur = in, next(in.size());
    const int D = g.axes();
    for (int k = 0; k < D; ++k) {
        const std::size_t s = g.stride(k);
        const int r = g.resolution[k];
        for (std::size_t node = 0; node < cur.size(); ++node) {
            const int ik = static_cast<int>((node / s) % r);
            std::uint8_t keep = cur[node];
            for (int d = 1; d <= layers && keep; ++d) {
                if (ik - d < 0 || ik + d >= r || !cur[node - d * s] || !cur[node + d * s]) keep = 0;
            }
            next[node] = keep;
        }
        std::swap(cur, next);
    }
    return cur;
}

void dyadic_cover(const GridSpec& g, const NodeMask& mask, const NodeBox& box, int min_cube, std::vector<NodeBox>& out) {
    std::size_t inside = 0;
    box.for_each([&](const Index& i) { inside += mask[g.index(i)]; });
    if (inside == 0) return;
    if (inside == box.count()) {
        out.push_back(box);
        return;
    }
    const int D = g.axes();
    for (int k = 0; k < D; ++k)
        if (box.size(k) < 2 * min_cube) return;
    for (int c = 0; c < (1 << D); ++c) {
        NodeBox child = box;
        for (int k = 0; k < D; ++k) {
            const int mid = box.lo[k] + box.size(k) / 2;
            if (c >> k & 1)
                child.lo[k] = mid;
            else
                child.hi[k] = mid;
        }
        dyadic_cover(g, mask, child, min_cube, out);
    }
}

AdmissibleRankOne factor_leg(const Mat& C, ProblemDims d) {
    const LegReport r = factor_admissible(C, d);
    if (!r.admissible) throw PreconditionError("leg not admissible: " + r.message);
    return r.leg;
}

double nodes_per_period(const GridSpec& g, const AdmissibleRankOne& C, int frequency) {
    const double speed = std::sqrt(C.alpha.squaredNorm() + C.s * C.s);
    return 1.0 / (frequency * g.h() * speed);
}

}  // namespace

StaircaseResult build_staircase(const TNConfig& cfg, const Mat& Y, const GridSpec& cube, double eps, int frequency,
                                const StaircaseOptions& opt) {
    if (!cfg.structured) throw PreconditionError("staircase needs a structured configuration");
    const ProblemDims dims = *cfg.structured;
    if (cube.axes() != dims.n + 1) throw DimensionError("cube axes must equal n + 1");
    if (!admissible_check(cfg).admissible) throw PreconditionError("configuration is not admissible");
    if (!(frequency >= 1)) throw PreconditionError("frequency must be at least 1");
    auto [seg, lam] = recover_segment(cfg, Y, opt.segment_tol);
    const int N = cfg.N();

    StaircaseResult res;
    res.schedule = staircase_schedule(cfg.kappa, eps);
    const double eps_in = res.schedule.eps_inner;
    const std::size_t nodes = cube.node_count();
    res.omega = GridField::zero(cube, dims, true);
    res.V.assign(N, NodeMask(nodes, 0));
    res.fractions.assign(N, 0.0);

    // An anchor P_j = (1/kappa_{j-1}) X_{j-1} + lambda_{j-1} P_{j-1} is handled on segment j-1.
    const double tol = opt.segment_tol;
    if (lam >= 1.0 - tol) {
        seg = (seg + N - 1) % N;
        lam = cfg.lambda(seg);
    }
    res.segment = seg;
    res.lambda = lam;
    res.nu = (1.0 - lam) * Vec::Unit(N, seg) + lam * convex_coeffs(cfg, seg);

    const double node_tol = opt.oscillation.mask_tol < 0 ? eps / 4.0 : opt.oscillation.mask_tol;
    std::vector<std::int8_t> label(nodes, 0);
    auto total = [&](std::size_t node) { return Mat(Y + res.omega.gradient(node)); };

    int free_axis = -1;
    if (lam <= tol) {
        res.degenerate = true;
        std::fill(res.V[seg].begin(), res.V[seg].end(), 1);
    } else if (opt.collinear_reduction && cfg.has_collinear_legs()) {
        // All corners on one line: laminate once between the extreme corners.
        res.collinear_path = true;
        const Mat dir = cfg.C[0] / cfg.C[0].norm();
        auto coord = [&](const Mat& M) { return ((M - cfg.X[0]).array() * dir.array()).sum(); };
        int a = 0, b = 0;
        for (int i = 1; i < N; ++i) {
            if (coord(cfg.X[i]) > coord(cfg.X[a])) a = i;
            if (coord(cfg.X[i]) < coord(cfg.X[b])) b = i;
        }
        const double theta = (coord(cfg.X[a]) - coord(Y)) / (coord(cfg.X[a]) - coord(cfg.X[b]));
        if (theta <= tol || theta >= 1.0 - tol) {
            res.degenerate = true;
            std::fill(res.V[theta <= tol ? a : b].begin(), res.V[theta <= tol ? a : b].end(), 1);
        } else {
            const auto C = factor_leg(cfg.X[a] - cfg.X[b], dims);
            const PatchStats st = apply_oscillation(res.omega, NodeBox::full(cube), C, theta, eps_in, frequency,
                                                    opt.oscillation, &label);
            res.lipschitz = st.lipschitz;
            free_axis = st.free_axis;
            StaircaseLevel lv;
            lv.round = -1;
            lv.corner = a;
            lv.anchor_from = seg;
            lv.anchor_to = b;
            lv.frequency = frequency;
            lv.anchor_nodes = lv.covered_nodes = nodes;
            lv.cubes = 1;
            lv.sup_norm = st.sup_norm;
            for (std::size_t node = 0; node < nodes; ++node) {
                if (label[node] == 1 && (total(node) - cfg.X[a]).norm() <= node_tol) res.V[a][node] = 1, ++lv.gained;
                if (label[node] == -1 && (total(node) - cfg.X[b]).norm() <= node_tol)
                    res.V[b][node] = 1, ++lv.new_anchor;
            }
            res.audit.push_back(lv);
        }
    } else {
        // Initial split on segment seg, then k + 1 rounds of the N-step cycle.
        NodeMask anchor(nodes, 0);
        int a = seg;
        int level = 0;
        {
            const auto C = factor_leg(cfg.X[seg] - cfg.anchors[seg], dims);
            const PatchStats st = apply_oscillation(res.omega, NodeBox::full(cube), C, lam, eps_in, frequency,
                                                    opt.oscillation, &label);
            res.lipschitz = std::max(res.lipschitz, st.lipschitz);
            StaircaseLevel lv;
            lv.round = -1;
            lv.corner = seg;
            lv.anchor_from = lv.anchor_to = seg;
            lv.frequency = frequency;
            lv.anchor_nodes = lv.covered_nodes = nodes;
            lv.cubes = 1;
            lv.sup_norm = st.sup_norm;
            for (std::size_t node = 0; node < nodes; ++node) {
                if (label[node] == 1 && (total(node) - cfg.X[seg]).norm() <= node_tol)
                    res.V[seg][node] = 1, ++lv.gained;
                if (label[node] == -1 && (total(node) - cfg.anchors[seg]).norm() <= node_tol)
                    anchor[node] = 1, ++lv.new_anchor;
            }
            res.audit.push_back(lv);
        }
        for (int round = 0; round <= res.schedule.k && !res.unresolved; ++round) {
            for (int step = 0; step < N; ++step) {
                const int c = (a + N - 1) % N;
                const auto C = factor_leg(cfg.X[c] - cfg.anchors[c], dims);
                const int freq = frequency << std::min(level + 1, 30);
                if (nodes_per_period(cube, C, freq) < opt.min_nodes_per_period) {
                    res.unresolved = true;
                    break;
                }
                ++level;
                StaircaseLevel lv;
                lv.round = round;
                lv.corner = c;
                lv.anchor_from = a;
                lv.anchor_to = c;
                lv.frequency = freq;
                lv.anchor_nodes = static_cast<std::size_t>(std::count(anchor.begin(), anchor.end(), 1));
                std::vector<NodeBox> cubes;
                dyadic_cover(cube, erode(cube, anchor, opt.shrink_layers), NodeBox::full(cube), opt.min_cube, cubes);
                lv.cubes = cubes.size();
                NodeMask next(nodes, 0);
                for (const auto& box : cubes) {
                    const PatchStats st =
                        apply_oscillation(res.omega, box, C, cfg.lambda(c), eps_in, freq, opt.oscillation, &label);
                    res.lipschitz = std::max(res.lipschitz, st.lipschitz);
                    lv.sup_norm = std::max(lv.sup_norm, st.sup_norm);
                    lv.covered_nodes += box.count();
                    box.for_each([&](const Index& i) {
                        const std::size_t node = cube.index(i);
                        if (label[node] == 1 && (total(node) - cfg.X[c]).norm() <= node_tol)
                            res.V[c][node] = 1, ++lv.gained;
                        if (label[node] == -1 && (total(node) - cfg.anchors[c]).norm() <= node_tol)
                            next[node] = 1, ++lv.new_anchor;
                    });
                }
                anchor.swap(next);
                a = c;
                res.audit.push_back(lv);
            }
            res.anchor_after_round.push_back(static_cast<double>(std::count(anchor.begin(), anchor.end(), 1)) /
                                             nodes);
        }
    }

    // Certificates.
    const double h = cube.h();
    res.sup_norm = res.omega.sup_norm();
    res.sup_ok = res.sup_norm < eps;
    res.disjoint = true;
    res.supports_inside = true;
    res.free_axis = free_axis;
    const int D = cube.axes();
    const int outer_layers = std::max(1, opt.oscillation.zero_layers - 1);
    for (std::size_t node = 0; node < nodes; ++node) {
        int owners = 0;
        for (int i = 0; i < N; ++i) owners += res.V[i][node];
        res.disjoint = res.disjoint && owners <= 1;
        res.max_distance = std::max(res.max_distance, dist_to_segments(cfg, total(node)));
        const Index ix = cube.multi(node);
        bool outer = false;
        for (int k = 0; k < D; ++k) {
            const int layers = k == free_axis ? 1 : outer_layers;
            outer = outer || ix[k] < layers || ix[k] >= cube.resolution[k] - layers;
        }
        if (outer && (res.omega.u.col(node).cwiseAbs().maxCoeff() != 0.0 ||
                      (res.omega.v.rows() && res.omega.v.col(node).cwiseAbs().maxCoeff() != 0.0)))
            res.supports_inside = false;
    }
    // The degenerate result has omega = 0 and V covering the cube, including the outer layers.
    res.inclusion_ok = res.max_distance <= eps + 5.0 * h * res.lipschitz;
    res.slice_mean = slice_mean_audit(res.omega);
    res.measure_ok = true;
    bool within_slack = true;
    for (int i = 0; i < N; ++i) {
        res.fractions[i] = static_cast<double>(std::count(res.V[i].begin(), res.V[i].end(), 1)) / nodes;
        const double target = (1.0 - eps) * res.nu(i);
        if (res.fractions[i] < target) res.measure_ok = false;
        if (res.fractions[i] < target - opt.near_miss_fraction * res.nu(i)) within_slack = false;
    }
    res.near_miss = !res.measure_ok && within_slack;
    const bool audits = res.sup_ok && res.inclusion_ok && res.disjoint && res.supports_inside && res.slice_mean <= 1e-10;
    res.success = audits && res.measure_ok;

    std::ostringstream msg;
    if (res.collinear_path) msg << "collinear reduction; ";
    if (res.unresolved) msg << "nesting stopped: doubled frequency unresolved; ";
    if (!res.sup_ok) msg << "sup norm " << res.sup_norm << " not below eps; ";
    if (!res.inclusion_ok) msg << "gradient leaves the neighbourhood of T; ";
    if (!res.disjoint) msg << "masks overlap; ";
    if (!res.supports_inside) msg << "support reaches the outer layers; ";
    if (res.slice_mean > 1e-10) msg << "slice mean audit failed; ";
    if (!res.measure_ok) msg << (res.near_miss ? "measure bound near miss; " : "measure bound missed; ");
    res.message = msg.str().empty() ? "ok" : msg.str();
    return res;
}

std::vector<std::pair<std::size_t, std::size_t>> mask_runs(const NodeMask& mask) {
    std::vector<std::pair<std::size_t, std::size_t>> runs;
    std::size_t i = 0;
    while (i < mask.size()) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < mask.size() && mask[j]) ++j;
        runs.emplace_back(i, j - i);
        i = j;
    }
    return runs;
}

void write_masks_rle(std::ostream& os, const std::vector<NodeMask>& masks) {
    os << "corner,start,length\n";
    for (std::size_t c = 0; c < masks.size(); ++c)
        for (const auto& [s, l] : mask_runs(masks[c])) os << c << ',' << s << ',' << l << '\n';
}

std::vector<NodeMask> read_masks_rle(std::istream& is, std::size_t nodes) {
    std::string line;
    if (!std::getline(is, line) || line != "corner,start,length") throw PreconditionError("not a mask RLE stream");
    std::vector<NodeMask> masks;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::size_t c, s, l;
        char d1, d2;
        if (!(ls >> c >> d1 >> s >> d2 >> l) || d1 != ',' || d2 != ',') throw PreconditionError("bad RLE row");
        if (s + l > nodes) throw PreconditionError("RLE run beyond node count");
        if (masks.size() <= c) masks.resize(c + 1, NodeMask(nodes, 0));
        std::fill(masks[c].begin() + s, masks[c].begin() + s + l, 1);
    }
    return masks;
}

}  // namespace wci
