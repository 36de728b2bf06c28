#include <doctest.h>

#include "wci/cli_reports.hpp"
#include "wci/tn_config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace wci;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {
fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("wci_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

int run(std::vector<std::string> args, std::string* err = nullptr) {
    std::ostringstream out, e;
    const int code = run_command(args, out, e);
    if (err) *err = e.str();
    return code;
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }
}  // namespace

TEST_CASE("dump_json: sorted keys and 17 significant digits") {
    const json doc = {{"b", 0.1}, {"a", {1, 2.5, "x"}}, {"c", {{"z", true}, {"y", nullptr}}}, {"d", INFINITY}};
    const std::string s = dump_json(doc);
    CHECK(s.find("0.10000000000000001") != std::string::npos);
    CHECK(s.find("\"a\"") < s.find("\"b\""));
    CHECK(s.find("\"y\"") < s.find("\"z\""));
    CHECK(s.find("\"d\": null") != std::string::npos);
    const json back = json::parse(s);
    CHECK(back["b"].get<double>() == 0.1);
    CHECK(back["a"][1].get<double>() == 2.5);
    CHECK(dump_json(json::object()) == "{}\n");
}

TEST_CASE("emit_report: minimal document and certificate fields") {
    RunConfig cfg;
    cfg.command = "hulls";
    finalize_config(cfg);
    const json empty = emit_report(cfg, std::nullopt);
    CHECK(empty.size() == 3);
    CHECK(empty["config"]["command"] == "hulls");
    CHECK(empty["seed"] == 7);

    CommandOutcome oc;
    oc.certificates.push_back({"soft", 1.0, 2.0, false, false});
    oc.certificates.push_back({"hard", 1.0, 0.5, true, true});
    const json full = emit_report(cfg, oc);
    CHECK(full["pass"] == true);
    CHECK(full["certificates"][0]["name"] == "soft");
    for (const char* k : {"name", "target", "achieved", "pass", "hard"}) CHECK(full["certificates"][1].contains(k));
    oc.certificates[1].pass = false;
    CHECK_FALSE(oc.pass());
}

TEST_CASE("parse_run_config: config file, flag overrides and invariants") {
    const auto dir = scratch("parse");
    const auto file = dir / "cfg.json";
    write_json(file, {{"command", "refine"}, {"grid", 128}, {"eps", {0.2, 0.1}}, {"seed", 3}, {"params", {{"edge", 0.5}}}});
    auto cfg = parse_run_config({"--config", file.string(), "--eps", "0.05,0.02", "--seed", "11"});
    finalize_config(cfg);
    CHECK(cfg.command == "refine");
    CHECK(cfg.grid == 128);
    CHECK(cfg.eps == std::vector<double>{0.05, 0.02});
    CHECK(cfg.rho == std::vector<double>{0.025, 0.01});
    CHECK(cfg.seed == 11);
    CHECK(cfg.params["edge"] == 0.5);

    auto demo = parse_run_config({"demo-pm1d"});
    finalize_config(demo);
    CHECK(demo.grid == 1024);
    CHECK(demo.eps == std::vector<double>{0.1, 0.05, 0.025});

    auto bad = [](std::vector<std::string> a) {
        auto c = parse_run_config(a);
        finalize_config(c);
    };
    CHECK_THROWS_AS(bad({"staircase", "--eps", "1.5"}), UsageError);
    CHECK_THROWS_AS(bad({"refine", "--eps", "0.05,0.1"}), UsageError);
    CHECK_THROWS_AS(bad({"refine", "--eps", "0.1,0.05", "--rho", "0.01"}), UsageError);
    CHECK_THROWS_AS(bad({"oscillate", "--grid", "100"}), UsageError);
    CHECK_THROWS_AS(bad({"oscillate", "--grid", "8192"}), UsageError);
    CHECK_THROWS_AS(bad({"frobnicate"}), UsageError);
    CHECK_THROWS_AS(bad({"hulls", "--threads", "0"}), UsageError);
    CHECK_THROWS_AS(bad({"hulls", "--nope"}), UsageError);
    write_json(file, {{"command", "hulls"}, {"colour", "red"}});
    CHECK_THROWS_AS(bad({"--config", file.string()}), UsageError);
    CHECK_THROWS_AS(bad({"--config", (dir / "missing.json").string()}), UsageError);
}

TEST_CASE("run_command exit codes") {
    const auto dir = scratch("exit");
    std::string err;
    CHECK(run({"staircase", "--eps", "1.5", "--out", dir.string()}, &err) == 2);
    CHECK(err.find("usage") != std::string::npos);
    CHECK(run({"frobnicate"}, &err) == 2);
    CHECK(err.find("unknown command") != std::string::npos);
    CHECK(run({}) == 2);
    CHECK(run({"--help"}) == 0);
    CHECK(run({"search-tau", "--flux", "no-such-flux", "--out", dir.string()}) == 2);

    // Three pairwise rank-one connected points keep growing after one lamination step: certified failure.
    const auto file = dir / "pts.json";
    write_json(file, {{"command", "hulls"},
                      {"params", {{"depth", 1}, {"points", {{{0.0, 0.0}, {0.0, 0.0}}, {{1.0, 0.0}, {0.0, 0.0}}, {{1.0, 1.0}, {0.0, 0.0}}}}}}});
    CHECK(run({"--config", file.string(), "--out", (dir / "h").string()}) == 1);
    const json rep = json::parse(slurp(dir / "h" / "report.json"));
    CHECK(rep["pass"] == false);
    CHECK(rep["result"]["fixed_point"] == false);
}

TEST_CASE("verify-tn on the fixture file") {
    const auto dir = scratch("tn");
    const auto file = dir / "t4.json";
    write_json(file, {{"command", "verify-tn"}, {"tn", to_json(tartar_fixture().config)}});
    REQUIRE(run({"--config", file.string(), "--out", dir.string()}) == 0);
    const json rep = json::parse(slurp(dir / "report.json"));
    CHECK(rep["result"]["N"] == 4);
    const auto ranks = rep["result"]["pairwise_rank"];
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(ranks[i][j] == (i == j ? 0 : 2));
    // Reports carry the inputs: the reconstruction certificate is re-derivable from corners and nu.
    const auto& r = rep["result"];
    double worst = 0.0;
    for (int j = 0; j < 4; ++j) {
        Mat S = Mat::Zero(2, 2);
        for (int i = 0; i < 4; ++i) S += r["nu"][j][i].get<double>() * mat_from_json(r["corners"][i]);
        worst = std::max(worst, (S - mat_from_json(r["anchors"][j])).norm());
    }
    CHECK(worst <= 1e-9);
    CHECK(rep["certificates"][0]["achieved"].get<double>() == doctest::Approx(worst).epsilon(1e-6).scale(1e-12));

    // A bare configuration document is accepted as the config file.
    write_json(file, to_json(tartar_fixture().config));
    CHECK(run({"verify-tn", "--config", file.string(), "--out", dir.string()}) == 0);
}

TEST_CASE("reports are byte-identical for identical config and seed") {
    const auto a = scratch("det_a"), b = scratch("det_b");
    for (const char* cmd : {"tartar-demo", "search-tau"}) {
        REQUIRE(run({cmd, "--out", a.string()}) == 0);
        REQUIRE(run({cmd, "--out", b.string()}) == 0);
        // The output directory is echoed, so compare with it normalized.
        auto ra = json::parse(slurp(a / "report.json")), rb = json::parse(slurp(b / "report.json"));
        ra["config"]["out"] = rb["config"]["out"] = "";
        CHECK(dump_json(ra) == dump_json(rb));
    }
    REQUIRE(run({"oscillate", "--grid", "128", "--out", a.string()}) == 0);
    const std::string first = slurp(a / "report.json");
    REQUIRE(run({"oscillate", "--grid", "128", "--out", a.string()}) == 0);
    CHECK(first == slurp(a / "report.json"));
    CHECK(fs::exists(a / "timings.json"));
    CHECK(first.find("timings") == std::string::npos);
}

TEST_CASE("staircase and refine report schemas") {
    const auto dir = scratch("schema");
    REQUIRE(run({"staircase", "--grid", "128", "--out", (dir / "s").string()}) != 2);
    const json s = json::parse(slurp(dir / "s" / "report.json"));
    for (const char* k : {"fractions", "eps", "k", "eps_prime", "sup_omega", "pass"}) CHECK(s["result"].contains(k));
    CHECK(s["result"]["k"] == 2);
    CHECK(fs::exists(dir / "s" / "omega.wcif"));
    CHECK(fs::exists(dir / "s" / "masks.csv"));

    REQUIRE(run({"refine", "--grid", "64", "--eps", "0.05", "--csv", "--out", (dir / "r").string()}) != 2);
    const json r = json::parse(slurp(dir / "r" / "report.json"));
    for (const char* k : {"residual_l2", "rho_used", "cubes", "uncovered_measure", "pass"}) CHECK(r["result"].contains(k));
    const auto cp = dir / "r" / "checkpoint";
    for (const char* f : {"field.csv", "partition.json", "partition.csv", "manifest.json"}) CHECK(fs::exists(cp / f));
    const json man = json::parse(slurp(cp / "manifest.json"));
    CHECK(man["params"].contains("eps_prime"));
    CHECK(man["params"]["inputs"].contains("C_n"));
    CHECK(man["residual_l2"].get<double>() == r["result"]["residual_l2"].get<double>());
}
