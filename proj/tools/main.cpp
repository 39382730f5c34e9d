#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "qbsdej/errors.hpp"
#include "qbsdej/experiments.hpp"

namespace {

struct SubcommandArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool quiet = false;
};

int run_study(const std::string& study, const SubcommandArgs& args) {
    std::ifstream in(args.config_path);
    if (!in) {
        std::cerr << "error: cannot open config file " << args.config_path << "\n";
        return 2;
    }
    nlohmann::json config;
    try {
        in >> config;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << args.config_path << ": " << e.what() << "\n";
        return 2;
    }
    if (config.contains("study") && config.at("study") != study) {
        std::cerr << "error: config.study: config declares '"
                  << config.at("study").get<std::string>() << "' but the subcommand is '" << study
                  << "'\n";
        return 2;
    }
    config["study"] = study;

    qbsdej::RunOptions options;
    options.out_dir = args.out_dir;
    options.quiet = args.quiet;
    if (args.seed_set) options.seed_override = args.seed;
    if (config.contains("out") && args.out_dir == ".") {
        options.out_dir = config.at("out").get<std::string>();
    }

    try {
        const qbsdej::StudyOutcome outcome = qbsdej::run_experiment(config, options);
        if (!args.quiet) {
            std::cout << outcome.summary.dump(2) << "\n";
            std::cout << (outcome.pass ? "PASS" : "FAIL") << " " << study << "\n";
        }
        return outcome.exit_code;
    } catch (const qbsdej::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const qbsdej::ModelError& e) {
        // Model validation failures at this level come from the config.
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const qbsdej::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Exact-lattice solver and verification harness for quadratic drivers with jumps"};
    app.require_subcommand(1);

    const std::vector<std::string> studies = {"entropic-convergence", "contraction", "splitting",
                                              "comparison", "stability"};
    const std::vector<std::string> descriptions = {
        "Convergence of the solved root value to the entropic closed form",
        "Fixed-point iteration trace for a small terminal condition",
        "Split-and-paste solve against the direct backward induction",
        "Ordering of solutions across seeded terminal/driver pairs",
        "Norm deltas against terminal perturbations across seeded trials"};

    SubcommandArgs args;
    std::string chosen;
    for (std::size_t i = 0; i < studies.size(); ++i) {
        CLI::App* sub = app.add_subcommand(studies[i], descriptions[i]);
        sub->add_option("--config", args.config_path, "Path to the JSON experiment config")
            ->required();
        sub->add_option("--out", args.out_dir, "Output directory for CSV and summary JSON");
        sub->add_option("--seed", args.seed, "Seed override (64-bit)")
            ->each([&args](const std::string&) { args.seed_set = true; });
        sub->add_flag("--quiet", args.quiet, "Suppress the summary on stdout");
        sub->callback([&chosen, name = studies[i]]() { chosen = name; });
    }

    CLI11_PARSE(app, argc, argv);
    return run_study(chosen, args);
}
