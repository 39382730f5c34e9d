#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbsdej/analysis.hpp"
#include "qbsdej/generators.hpp"
#include "qbsdej/lattice.hpp"
#include "qbsdej/markov.hpp"
#include "qbsdej/rng.hpp"
#include "qbsdej/solver.hpp"

namespace qbsdej {

/// Parsed model description {"T", "N", "d", "marks": [{"x", "lambda"}]}.
struct ModelSpec {
    TimeGrid grid;
    MarkSpace marks;
    std::size_t brownian_dims = 1;

    LatticeModel build_lattice(std::uint64_t budget = LatticeModel::kDefaultBudget) const {
        return LatticeModel::build(grid, marks, brownian_dims, budget);
    }
    StateModel build_state_model() const {
        return StateModel::build(grid, marks, brownian_dims);
    }
};

ModelSpec parse_model(const nlohmann::json& j, const std::string& path = "model");

/// Builtin generator from {"kind": "entropic" | "linear" | "royer", ...}.
Generator parse_generator(const nlohmann::json& j, const ModelSpec& spec,
                          const std::string& path = "generator");

/// Terminal condition description. Kinds:
///   constant         {"value"}
///   clipped-brownian {"scale", "lo", "hi"}: clip(scale * sum_i W_i, lo, hi)
///   state-affine     {"intercept", "a": per dim, "b": per mark, "lo", "hi"}:
///                    clip(intercept + a . W + b . (count - lambda T), lo, hi)
///   leaf-vector      {"values": one per leaf}
///   random           {"amplitude"}: i.i.d. uniform in [-amplitude, amplitude]
struct TerminalSpec {
    enum class Kind { Constant, ClippedBrownian, StateAffine, LeafVector, Random };
    Kind kind = Kind::Constant;
    double value = 0.0;
    double scale = 1.0;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    double intercept = 0.0;
    std::vector<double> a;
    std::vector<double> b;
    std::vector<double> values;
    double amplitude = 0.0;
};

TerminalSpec parse_terminal(const nlohmann::json& j, const ModelSpec& spec,
                            const std::string& path = "terminal");

std::vector<double> realize_terminal(const LatticeModel& model, const TerminalSpec& spec,
                                     Rng* rng = nullptr);

/// State-function view of the terminal; rejects leaf-vector and random kinds,
/// which are not functions of the recombined state.
StateTerminalFn terminal_state_fn(const StateModel& model, const TerminalSpec& spec);

/// Overrides {"scheme", "tol", "max_iters", "D"} applied on top of a config
/// derived from the generator constants.
void apply_solver_config(const nlohmann::json& j, PicardConfig& config,
                         const std::string& path = "solver");

nlohmann::json to_json(const NormReport& rep);
nlohmann::json to_json(const EnergyReport& rep);
nlohmann::json to_json(const StabilityReport& rep);
nlohmann::json to_json(const PriorBoundReport& rep);

/// Floating values serialized with 17 significant digits.
std::string csv_double(double v);

/// Minimal CSV emitter: header row on construction, UTF-8, '\n' endings.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header);
    void write_row(const std::vector<std::string>& fields);
    void close();

private:
    std::ofstream out_;
};

// Path-qualified JSON field access; every failure throws ConfigError naming
// the offending path.
const nlohmann::json& require_field(const nlohmann::json& j, const char* key,
                                    const std::string& path);
double require_number(const nlohmann::json& j, const char* key, const std::string& path);
std::int64_t require_int(const nlohmann::json& j, const char* key, const std::string& path);
double number_or(const nlohmann::json& j, const char* key, double fallback,
                 const std::string& path);

}  // namespace qbsdej
