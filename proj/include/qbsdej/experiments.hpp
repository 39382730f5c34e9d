#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

namespace qbsdej {

struct RunOptions {
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed_override;
    bool quiet = false;
};

struct StudyOutcome {
    std::string study;
    bool pass = false;
    nlohmann::json summary;
    int exit_code = 1;  // 0 pass, 1 property failure
};

/// Validates the whole configuration, runs the named study, writes
/// <out>/<study>.csv and <out>/<study>_summary.json, and returns the outcome.
/// Configuration problems throw ConfigError (exit 2 at the CLI); numerical
/// divergence is embedded in the summary with exit code 1.
StudyOutcome run_experiment(const nlohmann::json& config, const RunOptions& options);

}  // namespace qbsdej
