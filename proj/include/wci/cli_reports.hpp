#pragma once

#include "wci/refine.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace wci {

/// Bad flags, config files or values; maps to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

const std::vector<std::string>& known_commands();
std::string usage_text();

struct RunConfig {
    std::string command;
    std::string flux = "perona-malik";
    std::optional<Mat> flux_matrix;  // for the linear flux
    int grid = 0;                    // cells per axis, 0 picks the command default; grids carry grid + 1 nodes
    std::vector<double> eps;
    std::vector<double> rho;
    std::uint64_t seed = 7;
    std::string out = "wci_out";
    int threads = 1;
    bool csv = false;
    nlohmann::json params = nlohmann::json::object();  // per-command options
    nlohmann::json tn;                                 // verify-tn input, null when absent

    nlohmann::json to_json() const;
};

/// Flags override the config file. Throws UsageError.
RunConfig parse_run_config(const std::vector<std::string>& args);
/// Fills command defaults and checks the invariants. Throws UsageError.
void finalize_config(RunConfig& cfg);

struct CommandOutcome {
    nlohmann::json result = nlohmann::json::object();
    std::vector<Certificate> certificates;
    nlohmann::json timings = nlohmann::json::object();
    bool pass() const;  // every hard certificate passes
};

/// Runs the pipeline of cfg.command and writes field dumps and checkpoints under cfg.out.
CommandOutcome execute(const RunConfig& cfg);

/// Report document; without an outcome only the config echo and seed are present.
nlohmann::json emit_report(const RunConfig& cfg, const std::optional<CommandOutcome>& outcome);
/// Sorted keys, two-space indent, doubles at 17 significant digits.
std::string dump_json(const nlohmann::json& doc);

nlohmann::json certificate_json(const Certificate& c);

/// Writes field, partition with certificates, and a manifest into dir.
void write_checkpoint(const std::string& dir, const Subsolution& sub, const nlohmann::json& certificates,
                      const nlohmann::json& manifest, bool csv);

/// Exit code: 0 all certificates pass, 1 certified failure, 2 usage or config error.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

}  // namespace wci
