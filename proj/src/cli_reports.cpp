#include "wci/cli_reports.hpp"

#include "wci/hulls.hpp"
#include "wci/oscillation.hpp"
#include "wci/staircase.hpp"
#include "wci/tau_search.hpp"
#include "wci/tn_config.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

namespace wci {

namespace fs = std::filesystem;
using json = nlohmann::json;

const std::vector<std::string>& known_commands() {
    static const std::vector<std::string> cmds = {"verify-tn", "tartar-demo", "hulls",    "search-tau",
                                                  "oscillate", "staircase",   "refine",   "demo-pm1d"};
    return cmds;
}

std::string usage_text() {
    std::ostringstream os;
    os << "usage: wci_cli COMMAND [--config PATH] [--flux LABEL] [--grid N] [--eps LIST] [--rho LIST]\n"
          "                       [--seed INT] [--out DIR] [--threads INT] [--csv]\n"
          "commands:";
    for (const auto& c : known_commands()) os << ' ' << c;
    os << "\nlists are comma separated and strictly decreasing; N is a power of two in [64, 4096]\n";
    return os.str();
}

json RunConfig::to_json() const {
    json j;
    j["command"] = command;
    j["flux"] = flux;
    if (flux_matrix) j["flux_matrix"] = mat_to_json(*flux_matrix);
    j["grid"] = grid;
    j["eps"] = eps;
    j["rho"] = rho;
    j["seed"] = seed;
    j["out"] = out;
    j["threads"] = threads;
    j["csv"] = csv;
    j["params"] = params;
    if (!tn.is_null()) j["tn"] = tn;
    return j;
}

namespace {

template <class T>
T config_value(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("config key '") + key + "': " + e.what());
    }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file " + path);
    json doc;
    try {
        doc = json::parse(is);
    } catch (const json::exception& e) {
        throw UsageError("config file " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw UsageError("config file must hold a JSON object");
    // A bare configuration document is accepted as the verify-tn input.
    if (doc.contains("legs") && doc.contains("P")) {
        cfg.tn = doc;
        return;
    }
    static const std::set<std::string> keys = {"command", "flux", "flux_matrix", "grid", "eps", "rho", "seed",
                                               "out",     "threads", "csv",      "params", "tn"};
    for (const auto& [k, v] : doc.items())
        if (!keys.count(k)) throw UsageError("unknown config key '" + k + "'");
    if (doc.contains("command")) cfg.command = config_value<std::string>(doc, "command");
    if (doc.contains("flux")) cfg.flux = config_value<std::string>(doc, "flux");
    if (doc.contains("flux_matrix")) {
        try {
            cfg.flux_matrix = mat_from_json(doc["flux_matrix"]);
        } catch (const std::exception& e) {
            throw UsageError(std::string("config key 'flux_matrix': ") + e.what());
        }
    }
    if (doc.contains("grid")) cfg.grid = config_value<int>(doc, "grid");
    if (doc.contains("eps")) cfg.eps = config_value<std::vector<double>>(doc, "eps");
    if (doc.contains("rho")) cfg.rho = config_value<std::vector<double>>(doc, "rho");
    if (doc.contains("seed")) cfg.seed = config_value<std::uint64_t>(doc, "seed");
    if (doc.contains("out")) cfg.out = config_value<std::string>(doc, "out");
    if (doc.contains("threads")) cfg.threads = config_value<int>(doc, "threads");
    if (doc.contains("csv")) cfg.csv = config_value<bool>(doc, "csv");
    if (doc.contains("params")) {
        cfg.params = doc["params"];
        if (!cfg.params.is_object()) throw UsageError("config key 'params' must be an object");
    }
    if (doc.contains("tn")) cfg.tn = doc["tn"];
}

void check_schedule(const std::vector<double>& s, const char* name) {
    for (double x : s)
        if (!(x > 0.0 && x < 1.0)) throw UsageError(std::string(name) + " values must lie in (0,1)");
    for (std::size_t k = 1; k < s.size(); ++k)
        if (!(s[k] < s[k - 1])) throw UsageError(std::string(name) + " schedule must decrease strictly");
}

}  // namespace

RunConfig parse_run_config(const std::vector<std::string>& args) {
    CLI::App app{"wci_cli"};
    app.set_help_flag();
    std::string command, config_path, flux, out;
    int grid = 0, threads = 1;
    std::vector<double> eps, rho;
    std::uint64_t seed = 0;
    bool csv = false;
    app.add_option("command", command);
    app.add_option("--config", config_path);
    app.add_option("--flux", flux);
    app.add_option("--grid", grid);
    app.add_option("--eps", eps)->delimiter(',');
    app.add_option("--rho", rho)->delimiter(',');
    app.add_option("--seed", seed);
    app.add_option("--out", out);
    app.add_option("--threads", threads);
    app.add_flag("--csv", csv);
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        throw UsageError(e.what());
    }

    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    if (!command.empty()) cfg.command = command;
    if (app.count("--flux")) cfg.flux = flux;
    if (app.count("--grid")) cfg.grid = grid;
    if (app.count("--eps")) cfg.eps = eps;
    if (app.count("--rho")) cfg.rho = rho;
    if (app.count("--seed")) cfg.seed = seed;
    if (app.count("--out")) cfg.out = out;
    if (app.count("--threads")) cfg.threads = threads;
    if (csv) cfg.csv = true;
    return cfg;
}

void finalize_config(RunConfig& cfg) {
    const auto& cmds = known_commands();
    if (cfg.command.empty()) throw UsageError("missing command");
    if (std::find(cmds.begin(), cmds.end(), cfg.command) == cmds.end())
        throw UsageError("unknown command '" + cfg.command + "'");
    if (cfg.grid == 0) cfg.grid = cfg.command == "demo-pm1d" ? 1024 : 256;
    if (cfg.grid < 64 || cfg.grid > 4096 || (cfg.grid & (cfg.grid - 1)))
        throw UsageError("grid must be a power of two in [64, 4096]");
    if (cfg.eps.empty()) {
        if (cfg.command == "oscillate" || cfg.command == "staircase") cfg.eps = {0.1};
        if (cfg.command == "refine") cfg.eps = {0.05};
        if (cfg.command == "demo-pm1d") cfg.eps = {0.1, 0.05, 0.025};
    }
    check_schedule(cfg.eps, "eps");
    if (cfg.rho.empty())
        for (double e : cfg.eps) cfg.rho.push_back(e / 2);
    check_schedule(cfg.rho, "rho");
    if ((cfg.command == "refine" || cfg.command == "demo-pm1d") && cfg.rho.size() != cfg.eps.size())
        throw UsageError("rho and eps schedules differ in length");
    if (cfg.threads < 1) throw UsageError("threads must be positive");
    if (cfg.out.empty()) throw UsageError("output directory must be nonempty");
    if (!cfg.params.is_object()) throw UsageError("params must be an object");
}

bool CommandOutcome::pass() const {
    return std::all_of(certificates.begin(), certificates.end(), [](const Certificate& c) { return c.pass || !c.hard; });
}

json certificate_json(const Certificate& c) {
    return {{"name", c.name}, {"target", c.target}, {"achieved", c.achieved}, {"pass", c.pass}, {"hard", c.hard}};
}

json emit_report(const RunConfig& cfg, const std::optional<CommandOutcome>& outcome) {
    json doc;
    doc["command"] = cfg.command;
    doc["config"] = cfg.to_json();
    doc["seed"] = cfg.seed;
    if (!outcome) return doc;
    doc["certificates"] = json::array();
    for (const auto& c : outcome->certificates) doc["certificates"].push_back(certificate_json(c));
    doc["result"] = outcome->result;
    doc["pass"] = outcome->pass();
    return doc;
}

namespace {

void dump_value(std::string& s, const json& j, int indent) {
    const std::string pad(2 * (indent + 1), ' '), close(2 * indent, ' ');
    switch (j.type()) {
        case json::value_t::object: {
            if (j.empty()) {
                s += "{}";
                return;
            }
            s += "{\n";
            bool first = true;
            for (const auto& [k, v] : j.items()) {
                if (!first) s += ",\n";
                first = false;
                s += pad + json(k).dump() + ": ";
                dump_value(s, v, indent + 1);
            }
            s += "\n" + close + "}";
            return;
        }
        case json::value_t::array: {
            if (j.empty()) {
                s += "[]";
                return;
            }
            s += "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) s += ",\n";
                s += pad;
                dump_value(s, j[i], indent + 1);
            }
            s += "\n" + close + "]";
            return;
        }
        case json::value_t::number_float: {
            const double x = j.get<double>();
            if (!std::isfinite(x)) {
                s += "null";
                return;
            }
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", x);
            s += buf;
            return;
        }
        default:
            s += j.dump();
    }
}

template <class T>
T param(const RunConfig& cfg, const char* key, T def) {
    if (!cfg.params.contains(key)) return def;
    try {
        return cfg.params.at(key).get<T>();
    } catch (const json::exception& e) {
        throw UsageError(std::string("param '") + key + "': " + e.what());
    }
}

Certificate certify(std::string name, double target, double achieved, bool pass, bool hard = true) {
    return {std::move(name), target, achieved, pass, hard};
}

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
}

std::string write_field(const fs::path& dir, const std::string& stem, const GridField& f, bool csv) {
    const fs::path p = dir / (stem + (csv ? ".csv" : ".wcif"));
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    if (csv)
        write_field_csv(os, f);
    else
        write_wcif(os, f);
    return p.filename().string();
}

std::string write_masks(const fs::path& dir, const std::vector<NodeMask>& masks) {
    const fs::path p = dir / "masks.csv";
    std::ofstream os(p);
    write_masks_rle(os, masks);
    return p.filename().string();
}

json rank_matrix(const std::vector<Mat>& X, double tol) {
    json r = json::array();
    for (std::size_t i = 0; i < X.size(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < X.size(); ++j) row.push_back(i == j ? 0 : numeric_rank(X[i] - X[j], tol));
        r.push_back(row);
    }
    return r;
}

// ---------------------------------------------------------------------------

CommandOutcome run_verify_tn(const RunConfig& cfg) {
    CommandOutcome oc;
    const TNConfig tn = cfg.tn.is_null() ? tartar_fixture().config : tn_from_json(cfg.tn);
    const double rank_tol = param(cfg, "rank_tol", 1e-10);
    json& r = oc.result;
    r["N"] = tn.N();
    r["kappa"] = tn.kappa;
    r["mu"] = tn.mu();
    r["corners"] = json::array();
    r["anchors"] = json::array();
    for (int j = 0; j < tn.N(); ++j) {
        r["corners"].push_back(mat_to_json(tn.X[j]));
        r["anchors"].push_back(mat_to_json(tn.anchors[j]));
    }
    r["pairwise_rank"] = rank_matrix(tn.X, rank_tol);
    r["rank_tol"] = rank_tol;
    r["collinear_legs"] = tn.has_collinear_legs();
    double worst = 0.0, neg = 0.0, unity = 0.0;
    r["nu"] = json::array();
    r["reconstruction_error"] = json::array();
    for (int j = 0; j < tn.N(); ++j) {
        const Vec nu = convex_coeffs(tn, j);
        Mat S = Mat::Zero(tn.P.rows(), tn.P.cols());
        for (int i = 0; i < tn.N(); ++i) S += nu(i) * tn.X[i];
        const double err = (tn.anchors[j] - S).norm();
        worst = std::max(worst, err);
        neg = std::max(neg, -nu.minCoeff());
        unity = std::max(unity, std::abs(nu.sum() - 1.0));
        r["nu"].push_back(std::vector<double>(nu.data(), nu.data() + nu.size()));
        r["reconstruction_error"].push_back(err);
    }
    oc.certificates.push_back(certify("nu_reconstruction", 1e-9, worst, worst <= 1e-9));
    oc.certificates.push_back(certify("nu_nonnegative", 1e-12, neg, neg <= 1e-12));
    oc.certificates.push_back(certify("nu_partition_of_unity", 1e-12, unity, unity <= 1e-12));
    if (tn.structured) {
        const auto adm = admissible_check(tn);
        r["admissible"] = adm.admissible;
        oc.certificates.push_back(certify("legs_admissible", 1.0, adm.admissible ? 1.0 : 0.0, adm.admissible));
    }
    return oc;
}

CommandOutcome run_tartar_demo(const RunConfig& cfg) {
    CommandOutcome oc;
    const auto fx = tartar_fixture();
    const int depth = param(cfg, "depth", 5);
    const double rank_tol = param(cfg, "rank_tol", 1e-10);
    json& r = oc.result;
    r["pairwise_rank"] = rank_matrix(fx.points, rank_tol);
    int min_rank = 4;
    for (std::size_t i = 0; i < fx.points.size(); ++i)
        for (std::size_t j = i + 1; j < fx.points.size(); ++j)
            min_rank = std::min(min_rank, numeric_rank(fx.points[i] - fx.points[j], rank_tol));
    const PointCloud E(fx.points);
    const auto hull = lamination_hull(E, depth);
    r["hull"] = {{"depth", depth}, {"depth_reached", hull.depth_reached}, {"fixed_point", hull.fixed_point},
                 {"size", hull.cloud.size()}};
    double worst = 0.0;
    bool members = true;
    r["anchor_membership"] = json::array();
    for (int j = 0; j < fx.config.N(); ++j) {
        const auto cm = convex_membership(fx.config.anchors[j], E);
        members = members && cm.member;
        worst = std::max(worst, cm.residual);
        double dist = INFINITY;
        for (const auto& X : fx.points) dist = std::min(dist, (X - fx.config.anchors[j]).norm());
        r["anchor_membership"].push_back({{"member", cm.member},
                                          {"residual", cm.residual},
                                          {"coefficients", std::vector<double>(cm.coefficients.data(),
                                                                               cm.coefficients.data() +
                                                                                   cm.coefficients.size())},
                                          {"distance_to_points", dist}});
    }
    oc.certificates.push_back(certify("pairwise_rank_two", 2, min_rank, min_rank == 2));
    oc.certificates.push_back(certify("lamination_fixed_point_depth", 0, hull.depth_reached,
                                      hull.fixed_point && hull.depth_reached == 0));
    oc.certificates.push_back(certify("anchors_in_convex_hull", 1e-10, worst, members && worst <= 1e-10));
    std::ofstream os(fs::path(cfg.out) / "hull.csv");
    write_csv(os, hull.cloud);
    r["files"] = {"hull.csv"};
    return oc;
}

CommandOutcome run_hulls(const RunConfig& cfg) {
    CommandOutcome oc;
    std::vector<Mat> pts;
    if (cfg.params.contains("points")) {
        try {
            for (const auto& p : cfg.params["points"]) pts.push_back(mat_from_json(p));
        } catch (const std::exception& e) {
            throw UsageError(std::string("param 'points': ") + e.what());
        }
    } else {
        pts = tartar_fixture().points;
    }
    const int depth = param(cfg, "depth", 3);
    LaminationOptions lo;
    lo.lambda_samples = param(cfg, "lambda_samples", lo.lambda_samples);
    lo.rank_tol = param(cfg, "rank_tol", lo.rank_tol);
    const auto hull = lamination_hull(PointCloud(pts), depth, lo);
    std::vector<int> per_depth(depth + 1, 0);
    for (int d : hull.cloud.depth) ++per_depth.at(d);
    oc.result = {{"input_size", pts.size()},        {"size", hull.cloud.size()},
                 {"depth", depth},                  {"depth_reached", hull.depth_reached},
                 {"fixed_point", hull.fixed_point}, {"points_per_depth", per_depth},
                 {"rank_one_pairs", hull.cloud.laminated.size()}, {"lambda_samples", lo.lambda_samples},
                 {"files", {"hull.csv"}}};
    oc.certificates.push_back(certify("fixed_point", depth, hull.depth_reached, hull.fixed_point));
    std::ofstream os(fs::path(cfg.out) / "hull.csv");
    write_csv(os, hull.cloud);
    return oc;
}

CommandOutcome run_search_tau(const RunConfig& cfg) {
    CommandOutcome oc;
    const ProblemDims d{param(cfg, "m", 1), param(cfg, "n", 1)};
    const FluxFunction sigma = flux::by_label(cfg.flux, d, cfg.flux_matrix);
    json& r = oc.result;
    r["dims"] = {d.m, d.n};
    if (d.m == 1 && d.n == 1 && param(cfg, "pair", true)) {
        const auto sp = param(cfg, "seed_plus", std::array<double, 2>{0.1, 0.9});
        const auto sm = param(cfg, "seed_minus", std::array<double, 2>{1.1, 5.0});
        const double delta_min = param(cfg, "delta_min", 0.1);
        try {
            const auto pr = find_equal_flux_pair(sigma, sp, sm);
            const double gap = (m1_sigma(sigma, pr.p_plus) - m1_sigma(sigma, pr.p_minus)).norm();
            const auto tau = tau2_from_pair(sigma, pr.p_plus, pr.p_minus);
            const double tres = tau_residual(tau, sigma).max();
            r["pair"] = {{"p_plus", pr.p_plus(0)}, {"p_minus", pr.p_minus(0)}, {"level", pr.level},
                         {"G", pr.G},              {"delta", pr.delta},     {"flux_gap", gap},
                         {"tau_residual", tres},   {"seed_plus", sp},       {"seed_minus", sm}};
            oc.certificates.push_back(certify("flux_gap", 1e-12, gap, gap <= 1e-12));
            oc.certificates.push_back(
                certify("delta_magnitude", delta_min, std::abs(pr.delta), std::abs(pr.delta) >= delta_min));
            oc.certificates.push_back(certify("tau2_residual", 1e-10, tres, tres <= 1e-10));

            const int samples = param(cfg, "samples", 100);
            const double spread = param(cfg, "spread", 0.02);
            const auto S = SigmaSet::from_intervals(sigma, sp, sm);
            std::mt19937_64 rng(cfg.seed);
            std::uniform_real_distribution<double> L(0.05, 0.95), B(-spread, spread);
            int fails = 0, bad_lambda = 0;
            double worst = 0.0;
            for (int t = 0; t < samples; ++t) {
                const double lam = L(rng), db = B(rng);
                DiagPoint y;
                y.A = Mat::Constant(1, 1, lam * pr.p_plus(0) + (1 - lam) * pr.p_minus(0));
                y.b = {Vec::Constant(1, pr.level + db)};
                const auto dec = S.decompose(y);
                if (!dec) {
                    ++fails;
                    continue;
                }
                worst = std::max(worst, dec->recombination);
                if (!(dec->lambda > 0.0 && dec->lambda < 1.0)) ++bad_lambda;
            }
            r["decompositions"] = {{"samples", samples},       {"spread", spread},  {"failures", fails},
                                   {"lambda_outside", bad_lambda}, {"max_recombination", worst}};
            oc.certificates.push_back(
                certify("decomposition_roundtrip", 1e-8, worst, fails == 0 && bad_lambda == 0 && worst <= 1e-8));
        } catch (const SolverFailure& e) {
            r["pair"] = {{"error", e.what()}};
            oc.certificates.push_back(certify("equal_flux_pair", 1.0, 0.0, false));
        }
    }
    const int rk_samples = param(cfg, "rank_one_samples", d.m == 1 && d.n == 1 ? 0 : 1000);
    if (rk_samples > 0) {
        RankOneSearchOptions ro;
        ro.seed = cfg.seed;
        ro.samples = rk_samples;
        ro.tol = param(cfg, "rank_one_tol", ro.tol);
        const auto rep = search_rank_one_in_K(sigma, ro);
        json f = json::array();
        for (std::size_t k = 0; k < std::min<std::size_t>(10, rep.findings.size()); ++k)
            f.push_back({{"residual", rep.findings[k].residual}, {"s", rep.findings[k].s},
                         {"A", mat_to_json(rep.findings[k].A)}});
        r["rank_one"] = {{"samples", rep.samples}, {"finding_count", rep.finding_count},
                         {"best_residual", rep.best_residual}, {"tol", ro.tol}, {"findings", f}};
        const std::string expect = param(cfg, "expect_findings", std::string("any"));
        if (expect == "none")
            oc.certificates.push_back(certify("rank_one_findings", 0, rep.finding_count, rep.finding_count == 0));
        else if (expect == "some")
            oc.certificates.push_back(certify("rank_one_findings", 1, rep.finding_count, rep.finding_count > 0));
        else if (expect != "any")
            throw UsageError("param 'expect_findings' must be none, some or any");
    }
    return oc;
}

json oscillation_report_json(const OscillationReport& rep) {
    return {{"supports_inside", rep.supports_inside},   {"max_divergence", rep.max_divergence},
            {"hessian_sup", rep.hessian_sup},           {"divergence_bound", rep.divergence_bound},
            {"divergence_constant", rep.divergence_constant}, {"slice_mean", rep.slice_mean},
            {"sup_omega", rep.sup_norm},                {"segment_distance", rep.segment_distance},
            {"lipschitz", rep.lipschitz},               {"fraction_plus", rep.fraction_plus},
            {"fraction_minus", rep.fraction_minus},     {"target_plus", rep.target_plus},
            {"target_minus", rep.target_minus},         {"slack", rep.slack},
            {"success", rep.success},                   {"message", rep.message}};
}

CommandOutcome run_oscillate(const RunConfig& cfg) {
    CommandOutcome oc;
    AdmissibleRankOne C;
    C.p = Vec::Constant(1, param(cfg, "p", 1.0));
    C.alpha = Vec::Constant(1, param(cfg, "alpha", 1.0));
    C.s = 0.0;
    C.beta = {Vec::Zero(1)};
    const double lambda = param(cfg, "lambda", 0.5);
    const int frequency = param(cfg, "frequency", cfg.grid / 8);
    const double grid_slack = param(cfg, "grid_slack", 0.1);
    OscillationOptions oo;
    oo.aligned_phase = param(cfg, "aligned_phase", false);
    const double eps = cfg.eps.front();
    const GridSpec g = GridSpec::cube(2, cfg.grid + 1);
    const auto res = build_oscillation(C, lambda, g, eps, frequency, oo);
    const auto& rep = res.report;
    oc.result = oscillation_report_json(rep);
    oc.result["eps"] = eps;
    oc.result["lambda"] = lambda;
    oc.result["frequency"] = frequency;
    oc.result["h"] = g.h();
    oc.result["grid_slack"] = grid_slack;
    const double tp = (1.0 - grid_slack) * rep.target_plus, tm = (1.0 - grid_slack) * rep.target_minus;
    oc.certificates = {
        certify("fraction_plus", tp, rep.fraction_plus, rep.fraction_plus >= tp),
        certify("fraction_minus", tm, rep.fraction_minus, rep.fraction_minus >= tm),
        certify("sup_omega_lt_eps", eps, rep.sup_norm, rep.sup_ok),
        certify("slice_mean", 1e-10, rep.slice_mean, rep.slice_mean_ok),
        certify("divergence", rep.divergence_bound, rep.max_divergence, rep.divergence_ok),
        certify("supports_inside", 1.0, rep.supports_inside ? 1.0 : 0.0, rep.supports_inside),
        certify("segment_inclusion", eps + 5.0 * g.h() * rep.lipschitz, rep.segment_distance, rep.inclusion_ok),
    };
    const fs::path dir(cfg.out);
    oc.result["files"] = {write_field(dir, "omega", res.omega, cfg.csv), write_masks(dir, {res.plus, res.minus})};
    return oc;
}

CommandOutcome run_staircase(const RunConfig& cfg) {
    CommandOutcome oc;
    const FluxFunction sigma = flux::by_label(cfg.flux, {1, 1}, cfg.flux_matrix);
    const double pp = param(cfg, "p_plus", 0.5), pm = param(cfg, "p_minus", 2.0);
    const TNConfig tn = lift_tau(tau2_from_pair(sigma, Vec::Constant(1, pp), Vec::Constant(1, pm)), 1.0);
    const double theta = param(cfg, "theta", 0.5);
    const Mat Y = (1.0 - theta) * tn.X[0] + theta * tn.anchors[0];
    const int frequency = param(cfg, "frequency", cfg.grid / 8);
    const double slack = param(cfg, "measure_slack", 0.05);
    const double eps = cfg.eps.front();
    const GridSpec g = GridSpec::cube(2, cfg.grid + 1);
    const auto res = build_staircase(tn, Y, g, eps, frequency);
    const double bound = eps + 5.0 * g.h() * res.lipschitz;
    oc.result = {{"fractions", res.fractions},
                 {"eps", eps},
                 {"k", res.schedule.k},
                 {"eps_prime", res.schedule.eps_inner},
                 {"sup_omega", res.sup_norm},
                 {"pass", false},
                 {"nu", std::vector<double>(res.nu.data(), res.nu.data() + res.nu.size())},
                 {"combined_fraction", res.combined_fraction()},
                 {"max_distance", res.max_distance},
                 {"lipschitz", res.lipschitz},
                 {"distance_bound", bound},
                 {"slice_mean", res.slice_mean},
                 {"frequency", frequency},
                 {"collinear_path", res.collinear_path},
                 {"degenerate", res.degenerate},
                 {"h", g.h()},
                 {"measure_slack", slack},
                 {"message", res.message}};
    const double target = (1.0 - eps) - slack;
    oc.certificates = {
        certify("combined_fraction", target, res.combined_fraction(), res.combined_fraction() >= target),
        certify("inclusion", bound, res.max_distance, res.inclusion_ok),
        certify("masks_disjoint", 1.0, res.disjoint ? 1.0 : 0.0, res.disjoint),
        certify("sup_omega_lt_eps", eps, res.sup_norm, res.sup_ok),
        certify("slice_mean", 1e-10, res.slice_mean, res.slice_mean <= 1e-10),
        certify("supports_inside", 1.0, res.supports_inside ? 1.0 : 0.0, res.supports_inside),
        certify("schedule_inequalities", 1.0,
                res.schedule.depth_ok && res.schedule.amplitude_ok && res.schedule.measure_ok ? 1.0 : 0.0,
                res.schedule.depth_ok && res.schedule.amplitude_ok && res.schedule.measure_ok),
    };
    oc.result["pass"] = oc.pass();
    const fs::path dir(cfg.out);
    oc.result["files"] = {write_field(dir, "omega", res.omega, cfg.csv), write_masks(dir, res.V)};
    return oc;
}

json params_json(const RefineParams& p) {
    json checks = json::object();
    for (const auto& [k, v] : p.checks) checks[k] = v;
    const auto& in = p.inputs;
    return {{"eps", p.eps},
            {"rho", p.rho},
            {"eps_prime", p.eps_prime},
            {"s", p.s},
            {"tau", p.tau},
            {"delta_tau", p.delta_tau},
            {"l_max", p.l_max},
            {"a", p.a},
            {"eps_prime_cap", p.eps_prime_cap},
            {"eps_prime_sqrt_bound", p.eps_prime_sqrt_bound},
            {"s_bound", p.s_bound},
            {"checks", checks},
            {"inputs",
             {{"a", in.a},
              {"ut_sup", in.ut_sup},
              {"delta_tau", in.delta_tau},
              {"M", in.M},
              {"M_tilde", in.M_tilde},
              {"C_n", in.C_n},
              {"eps", in.eps},
              {"rho", in.rho},
              {"measure", in.measure}}}};
}

json cubes_json(const std::vector<CubeUpdate>& cubes) {
    json a = json::array();
    for (const auto& c : cubes)
        a.push_back({{"lo", c.box.lo},
                     {"l", c.l},
                     {"applied", c.applied},
                     {"frequency", c.frequency},
                     {"tau", c.tau},
                     {"delta_tau", c.delta_tau},
                     {"modulus", c.modulus},
                     {"modulus_sigma", c.modulus_sigma},
                     {"residual_sq", c.residual_sq},
                     {"target_sq", c.target_sq},
                     {"sup_change", c.sup_change},
                     {"max_distance", c.max_distance},
                     {"sigma_failures", c.sigma_failures},
                     {"message", c.message}});
    return a;
}

json certificates_json(const std::vector<Certificate>& certs) {
    json a = json::array();
    for (const auto& c : certs) a.push_back(certificate_json(c));
    return a;
}

// Boundary trace of it equal to that of base, bit for bit.
bool same_boundary(const Subsolution& it, const Subsolution& base) {
    for (std::size_t node : base.boundary_nodes)
        for (Eigen::Index c = 0; c < base.field.u.rows(); ++c)
            if (std::bit_cast<std::uint64_t>(it.field.u(c, node)) != std::bit_cast<std::uint64_t>(base.field.u(c, node)))
                return false;
    return true;
}

struct RefineRun {
    MakeSubsolutionResult base;
    double base_residual = 0.0;
    std::vector<ScheduleStep> steps;
};

RefineRun refine_pipeline(const RunConfig& cfg, std::size_t steps, json& timings) {
    if (cfg.flux != "perona-malik" && cfg.flux != "pm")
        throw UsageError("the refinement demo is built on the perona-malik flux");
    const auto t0 = Clock::now();
    const SigmaSet provider = pm_demo_sigma();
    RefineRun run;
    run.base = make_subsolution(provider, GridSpec::cube(2, cfg.grid + 1), pm_demo_seed(),
                                param(cfg, "eps_perturb", 1e-6));
    run.base_residual = residual_l2(run.base.sub, provider.sigma());
    timings["base"] = seconds_since(t0);
    ScheduleOptions so;
    so.adaptive_edge = param(cfg, "adaptive_edge", true);
    so.l_min = param(cfg, "l_min", 1.0 / 16.0);
    so.l_max = param(cfg, "l_max", 1.0);
    so.refine.l_max = param(cfg, "edge", 0.25);
    so.refine.cube.seed = cfg.seed;
    const auto t1 = Clock::now();
    const std::vector<double> eps(cfg.eps.begin(), cfg.eps.begin() + steps);
    const std::vector<double> rho(cfg.rho.begin(), cfg.rho.begin() + steps);
    run.steps = refine_schedule(run.base.sub, eps, rho, provider, so);
    timings["schedule"] = seconds_since(t1);
    return run;
}

json step_json(const ScheduleStep& st, bool traces) {
    const auto& r = st.result;
    return {{"eps", st.eps},
            {"rho", st.rho},
            {"edge", st.edge},
            {"attempts", st.attempts},
            {"success", r.success},
            {"vacuous", r.vacuous},
            {"residual_before", r.residual_before},
            {"residual_l2", r.residual_after},
            {"hminus1_bound", r.hminus1_bound},
            {"residual_sup_before", r.residual_sup_before},
            {"rho_used", r.params.rho > 0 ? r.params.rho : st.rho},
            {"delta", r.delta},
            {"covered_measure", r.covered_measure},
            {"uncovered_measure", r.uncovered_measure},
            {"audit_sum", r.audit_sum},
            {"sup_change", r.sup_change},
            {"ut_sup", r.ut_sup},
            {"divergence_defect", r.divergence_defect},
            {"seam_jump", r.seam_jump},
            {"traces_bit_exact", traces},
            {"rejected", r.rejected},
            {"params", params_json(r.params)},
            {"cubes", cubes_json(r.cubes)},
            {"message", r.message}};
}

void step_certificates(CommandOutcome& oc, const std::string& prefix, const ScheduleStep& st, bool traces) {
    for (auto c : st.result.certificates) {
        c.name = prefix + c.name;
        oc.certificates.push_back(c);
    }
    oc.certificates.push_back(certify(prefix + "step_certified", 1.0, st.result.success ? 1.0 : 0.0, st.result.success));
    oc.certificates.push_back(certify(prefix + "boundary_trace_vs_base", 1.0, traces ? 1.0 : 0.0, traces));
}

json checkpoint_manifest(const RunConfig& cfg, const RefineRun& run, const ScheduleStep& st, std::size_t k) {
    return {{"step", k + 1},
            {"eps", st.eps},
            {"rho", st.rho},
            {"edge", st.edge},
            {"seed", cfg.seed},
            {"grid", cfg.grid},
            {"eps_perturb", run.base.eps_used},
            {"residual_l2", st.result.residual_after},
            {"params", params_json(st.result.params)}};
}

CommandOutcome run_refine(const RunConfig& cfg) {
    CommandOutcome oc;
    const RefineRun run = refine_pipeline(cfg, 1, oc.timings);
    const auto& st = run.steps.front();
    const bool traces = st.result.output.traces_match() && same_boundary(st.result.output, run.base.sub);
    oc.result = step_json(st, traces);
    oc.result["base_residual_l2"] = run.base_residual;
    oc.result["eps_perturb"] = run.base.eps_used;
    step_certificates(oc, "", st, traces);
    oc.result["pass"] = oc.pass();
    const fs::path dir = fs::path(cfg.out) / "checkpoint";
    write_checkpoint(dir.string(), st.result.output, certificates_json(oc.certificates),
                     checkpoint_manifest(cfg, run, st, 0), cfg.csv);
    oc.result["files"] = {"checkpoint"};
    return oc;
}

CommandOutcome run_demo(const RunConfig& cfg) {
    CommandOutcome oc;
    const RefineRun run = refine_pipeline(cfg, cfg.eps.size(), oc.timings);
    json steps = json::array();
    std::vector<double> residuals;
    for (std::size_t k = 0; k < run.steps.size(); ++k) {
        const auto& st = run.steps[k];
        const bool traces = st.result.output.traces_match() && same_boundary(st.result.output, run.base.sub);
        const std::string prefix = "step" + std::to_string(k + 1) + ":";
        const std::size_t first = oc.certificates.size();
        step_certificates(oc, prefix, st, traces);
        const std::vector<Certificate> mine(oc.certificates.begin() + first, oc.certificates.end());
        steps.push_back(step_json(st, traces));
        residuals.push_back(st.result.residual_after);
        const std::string name = "step_" + std::to_string(k + 1);
        write_checkpoint((fs::path(cfg.out) / name).string(), st.result.output, certificates_json(mine),
                         checkpoint_manifest(cfg, run, st, k), cfg.csv);
    }
    bool decreasing = true;
    for (std::size_t k = 1; k < residuals.size(); ++k) decreasing = decreasing && residuals[k] < residuals[k - 1];
    const double last = cfg.eps.back();
    oc.certificates.push_back(certify("residuals_decreasing", 1.0, decreasing ? 1.0 : 0.0, decreasing));
    oc.certificates.push_back(
        certify("base_residual_floor", last, run.base_residual, run.base_residual > last && run.base_residual > 0.0));
    json files = json::array();
    for (std::size_t k = 0; k < run.steps.size(); ++k) files.push_back("step_" + std::to_string(k + 1));
    oc.result = {{"steps", steps},
                 {"residuals", residuals},
                 {"base_residual_l2", run.base_residual},
                 {"eps_perturb", run.base.eps_used},
                 {"halvings", run.base.halvings},
                 {"files", files}};
    return oc;
}

}  // namespace

std::string dump_json(const json& doc) {
    std::string s;
    dump_value(s, doc, 0);
    s += '\n';
    return s;
}

void write_checkpoint(const std::string& dir, const Subsolution& sub, const json& certificates,
                      const json& manifest, bool csv) {
    const fs::path p(dir);
    fs::create_directories(p);
    const std::string field = write_field(p, "field", sub.field, csv);
    {
        std::ofstream os(p / "partition.csv");
        os << "cell,start,length\n";
        const auto& cell = sub.cell;
        for (std::size_t i = 0; i < cell.size();) {
            std::size_t j = i;
            while (j < cell.size() && cell[j] == cell[i]) ++j;
            os << cell[i] << ',' << i << ',' << j - i << '\n';
            i = j;
        }
    }
    write_text(p / "partition.json", dump_json({{"cell_count", sub.cell_count},
                                                {"runs", "partition.csv"},
                                                {"nodes", sub.cell.size()},
                                                {"certificates", certificates}}));
    json m = manifest;
    m["files"] = {field, "partition.json", "partition.csv"};
    m["traces_match"] = sub.traces_match();
    write_text(p / "manifest.json", dump_json(m));
}

CommandOutcome execute(const RunConfig& cfg) {
    fs::create_directories(cfg.out);
    const auto t0 = Clock::now();
    CommandOutcome oc;
    const std::string& c = cfg.command;
    if (c == "verify-tn")
        oc = run_verify_tn(cfg);
    else if (c == "tartar-demo")
        oc = run_tartar_demo(cfg);
    else if (c == "hulls")
        oc = run_hulls(cfg);
    else if (c == "search-tau")
        oc = run_search_tau(cfg);
    else if (c == "oscillate")
        oc = run_oscillate(cfg);
    else if (c == "staircase")
        oc = run_staircase(cfg);
    else if (c == "refine")
        oc = run_refine(cfg);
    else if (c == "demo-pm1d")
        oc = run_demo(cfg);
    else
        throw UsageError("unknown command '" + c + "'");
    oc.timings["total"] = seconds_since(t0);
    return oc;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (std::find(args.begin(), args.end(), "--help") != args.end() ||
        std::find(args.begin(), args.end(), "-h") != args.end()) {
        out << usage_text();
        return 0;
    }
    RunConfig cfg;
    try {
        cfg = parse_run_config(args);
        finalize_config(cfg);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << usage_text();
        return 2;
    }
    CommandOutcome oc;
    try {
        oc = execute(cfg);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "failure: " << e.what() << "\n";
        return 1;
    }
    const fs::path dir(cfg.out);
    write_text(dir / "report.json", dump_json(emit_report(cfg, oc)));
    write_text(dir / "timings.json", dump_json(oc.timings));
    for (const auto& c : oc.certificates)
        out << (c.pass ? "PASS " : (c.hard ? "FAIL " : "WARN ")) << c.name << " achieved " << c.achieved << " target "
            << c.target << "\n";
    out << cfg.command << ": " << (oc.pass() ? "pass" : "fail") << " (" << (dir / "report.json").string() << ")\n";
    return oc.pass() ? 0 : 1;
}

int run_command(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run_command(args, std::cout, std::cerr);
}

}  // namespace wci
