#include "qbsdej/io.hpp"

#include <cmath>
#include <cstdio>

namespace qbsdej {

const nlohmann::json& require_field(const nlohmann::json& j, const char* key,
                                    const std::string& path) {
    if (!j.is_object() || !j.contains(key)) {
        throw ConfigError(path + "." + key + ": missing");
    }
    return j.at(key);
}

double require_number(const nlohmann::json& j, const char* key, const std::string& path) {
    const nlohmann::json& v = require_field(j, key, path);
    if (!v.is_number()) throw ConfigError(path + "." + key + ": must be a number");
    return v.get<double>();
}

std::int64_t require_int(const nlohmann::json& j, const char* key, const std::string& path) {
    const nlohmann::json& v = require_field(j, key, path);
    if (!v.is_number_integer()) throw ConfigError(path + "." + key + ": must be an integer");
    return v.get<std::int64_t>();
}

double number_or(const nlohmann::json& j, const char* key, double fallback,
                 const std::string& path) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    const nlohmann::json& v = j.at(key);
    if (!v.is_number()) throw ConfigError(path + "." + key + ": must be a number");
    return v.get<double>();
}

ModelSpec parse_model(const nlohmann::json& j, const std::string& path) {
    ModelSpec spec;
    spec.grid.horizon = require_number(j, "T", path);
    const std::int64_t n = require_int(j, "N", path);
    if (n < 1) throw ConfigError(path + ".N: must be >= 1");
    spec.grid.steps = static_cast<std::size_t>(n);
    const std::int64_t d = j.contains("d") ? require_int(j, "d", path) : 1;
    if (d < 0) throw ConfigError(path + ".d: must be >= 0");
    spec.brownian_dims = static_cast<std::size_t>(d);
    if (j.contains("marks")) {
        const nlohmann::json& marks = j.at("marks");
        if (!marks.is_array()) throw ConfigError(path + ".marks: must be an array");
        for (std::size_t i = 0; i < marks.size(); ++i) {
            const std::string mp = path + ".marks[" + std::to_string(i) + "]";
            Mark mk;
            mk.x = require_number(marks[i], "x", mp);
            mk.lambda = require_number(marks[i], "lambda", mp);
            if (mk.lambda <= 0.0) throw ConfigError(mp + ".lambda: must be > 0");
            spec.marks.marks.push_back(mk);
        }
    }
    return spec;
}

namespace {

std::vector<double> number_array(const nlohmann::json& j, const char* key, std::size_t want,
                                 const std::string& path, double fallback) {
    if (!j.contains(key)) return std::vector<double>(want, fallback);
    const nlohmann::json& v = j.at(key);
    if (!v.is_array() || v.size() != want) {
        throw ConfigError(path + "." + key + ": must be an array of " + std::to_string(want) +
                          " numbers");
    }
    std::vector<double> out(want);
    for (std::size_t i = 0; i < want; ++i) {
        if (!v[i].is_number()) throw ConfigError(path + "." + key + ": must contain numbers");
        out[i] = v[i].get<double>();
    }
    return out;
}

}  // namespace

Generator parse_generator(const nlohmann::json& j, const ModelSpec& spec,
                          const std::string& path) {
    const nlohmann::json& kind_field = require_field(j, "kind", path);
    if (!kind_field.is_string()) throw ConfigError(path + ".kind: must be a string");
    const std::string kind = kind_field.get<std::string>();
    const std::size_t d = spec.brownian_dims;
    const std::size_t m = spec.marks.size();
    if (kind == "entropic") {
        return make_entropic(d, spec.marks, require_number(j, "gamma", path));
    }
    if (kind == "linear") {
        const double a = number_or(j, "a", 0.0, path);
        auto b = number_array(j, "b", d, path, 0.0);
        auto c = number_array(j, "c", m, path, 0.0);
        return make_linear(d, spec.marks, a, std::move(b), std::move(c),
                           number_or(j, "gamma", 1.0, path));
    }
    if (kind == "royer") {
        const double a = number_or(j, "a", 0.0, path);
        auto b = number_array(j, "b", d, path, 0.0);
        const double constant = number_or(j, "const", 0.0, path);
        auto slopes = number_array(j, "jump_slopes", m, path, 0.0);
        const double c1 = number_or(j, "c1", -0.5, path);
        const double c2 = number_or(j, "c2", 1.0, path);
        return make_royer(d, spec.marks, a, std::move(b), constant, std::move(slopes), c1, c2,
                          number_or(j, "gamma", 1.0, path));
    }
    throw ConfigError(path + ".kind: unknown generator kind '" + kind + "'");
}

TerminalSpec parse_terminal(const nlohmann::json& j, const ModelSpec& spec,
                            const std::string& path) {
    const nlohmann::json& kind_field = require_field(j, "kind", path);
    if (!kind_field.is_string()) throw ConfigError(path + ".kind: must be a string");
    const std::string kind = kind_field.get<std::string>();
    TerminalSpec t;
    if (kind == "constant") {
        t.kind = TerminalSpec::Kind::Constant;
        t.value = require_number(j, "value", path);
        return t;
    }
    if (kind == "clipped-brownian") {
        t.kind = TerminalSpec::Kind::ClippedBrownian;
        t.scale = number_or(j, "scale", 1.0, path);
        t.lo = number_or(j, "lo", -std::numeric_limits<double>::infinity(), path);
        t.hi = number_or(j, "hi", std::numeric_limits<double>::infinity(), path);
        return t;
    }
    if (kind == "state-affine") {
        t.kind = TerminalSpec::Kind::StateAffine;
        t.intercept = number_or(j, "intercept", 0.0, path);
        t.a = number_array(j, "a", spec.brownian_dims, path, 0.0);
        t.b = number_array(j, "b", spec.marks.size(), path, 0.0);
        t.lo = number_or(j, "lo", -std::numeric_limits<double>::infinity(), path);
        t.hi = number_or(j, "hi", std::numeric_limits<double>::infinity(), path);
        return t;
    }
    if (kind == "leaf-vector") {
        t.kind = TerminalSpec::Kind::LeafVector;
        const nlohmann::json& v = require_field(j, "values", path);
        if (!v.is_array()) throw ConfigError(path + ".values: must be an array");
        for (const auto& x : v) {
            if (!x.is_number()) throw ConfigError(path + ".values: must contain numbers");
            t.values.push_back(x.get<double>());
        }
        return t;
    }
    if (kind == "random") {
        t.kind = TerminalSpec::Kind::Random;
        t.amplitude = require_number(j, "amplitude", path);
        return t;
    }
    throw ConfigError(path + ".kind: unknown terminal kind '" + kind + "'");
}

namespace {

double clip(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

std::vector<double> realize_terminal(const LatticeModel& model, const TerminalSpec& spec,
                                     Rng* rng) {
    const double t_end = model.grid().horizon;
    switch (spec.kind) {
        case TerminalSpec::Kind::Constant:
            return std::vector<double>(model.level_size(model.steps()), spec.value);
        case TerminalSpec::Kind::ClippedBrownian:
            return make_terminal(model, [&spec](std::span<const double> sums,
                                                std::span<const int>) {
                double w = 0.0;
                for (double s : sums) w += s;
                return clip(spec.scale * w, spec.lo, spec.hi);
            });
        case TerminalSpec::Kind::StateAffine:
            return make_terminal(model, [&spec, &model, t_end](std::span<const double> sums,
                                                               std::span<const int> counts) {
                double v = spec.intercept;
                for (std::size_t i = 0; i < sums.size(); ++i) v += spec.a[i] * sums[i];
                for (std::size_t j = 0; j < counts.size(); ++j) {
                    v += spec.b[j] * (counts[j] - model.marks().marks[j].lambda * t_end);
                }
                return clip(v, spec.lo, spec.hi);
            });
        case TerminalSpec::Kind::LeafVector:
            if (spec.values.size() != model.level_size(model.steps())) {
                throw ConfigError("terminal.values: need one value per leaf (" +
                                  std::to_string(model.level_size(model.steps())) + ")");
            }
            return spec.values;
        case TerminalSpec::Kind::Random: {
            if (rng == nullptr) {
                throw ConfigError("terminal: random terminal requires a seeded run");
            }
            std::vector<double> out(model.level_size(model.steps()));
            for (double& v : out) v = rng->range(-spec.amplitude, spec.amplitude);
            return out;
        }
    }
    throw ConfigError("terminal: unhandled kind");
}

StateTerminalFn terminal_state_fn(const StateModel& model, const TerminalSpec& spec) {
    const double t_end = model.grid.horizon;
    switch (spec.kind) {
        case TerminalSpec::Kind::Constant: {
            const double v = spec.value;
            return [v](std::span<const double>, std::span<const int>) { return v; };
        }
        case TerminalSpec::Kind::ClippedBrownian: {
            const TerminalSpec s = spec;
            return [s](std::span<const double> sums, std::span<const int>) {
                double w = 0.0;
                for (double x : sums) w += x;
                return clip(s.scale * w, s.lo, s.hi);
            };
        }
        case TerminalSpec::Kind::StateAffine: {
            const TerminalSpec s = spec;
            MarkSpace marks = model.marks;
            return [s, marks, t_end](std::span<const double> sums, std::span<const int> counts) {
                double v = s.intercept;
                for (std::size_t i = 0; i < sums.size(); ++i) v += s.a[i] * sums[i];
                for (std::size_t j = 0; j < counts.size(); ++j) {
                    v += s.b[j] * (counts[j] - marks.marks[j].lambda * t_end);
                }
                return clip(v, s.lo, s.hi);
            };
        }
        default:
            throw ConfigError("terminal: kind is not a function of the recombined state");
    }
}

void apply_solver_config(const nlohmann::json& j, PicardConfig& config,
                         const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + ": must be an object");
    if (j.contains("scheme")) {
        const nlohmann::json& s = j.at("scheme");
        if (!s.is_string()) throw ConfigError(path + ".scheme: must be a string");
        const std::string scheme = s.get<std::string>();
        if (scheme == "implicit") {
            config.scheme = Scheme::Implicit;
        } else if (scheme == "explicit") {
            config.scheme = Scheme::Explicit;
        } else {
            throw ConfigError(path + ".scheme: unknown scheme '" + scheme + "'");
        }
    }
    config.tol = number_or(j, "tol", config.tol, path);
    if (j.contains("max_iters")) {
        const std::int64_t n = require_int(j, "max_iters", path);
        if (n < 1) throw ConfigError(path + ".max_iters: must be >= 1");
        config.max_iters = static_cast<std::size_t>(n);
    }
    config.d_const = number_or(j, "D", config.d_const, path);
}

nlohmann::json to_json(const NormReport& rep) {
    return {{"s_inf", rep.s_inf},
            {"h2_bmo", rep.h2_bmo},
            {"j2_bmo", rep.j2_bmo},
            {"linf_nu", rep.linf_nu},
            {"ball", rep.ball}};
}

nlohmann::json to_json(const EnergyReport& rep) {
    return {{"p", rep.p},         {"z_lhs", rep.z_lhs}, {"z_rhs", rep.z_rhs},
            {"u_lhs", rep.u_lhs}, {"u_rhs", rep.u_rhs}, {"pass", rep.pass}};
}

nlohmann::json to_json(const StabilityReport& rep) {
    return {{"dxi_sup", rep.dxi_sup},   {"dy_sup", rep.dy_sup},   {"du_linf", rep.du_linf},
            {"dz_bmo2", rep.dz_bmo2},   {"du_bmo2", rep.du_bmo2}, {"ratio", rep.ratio},
            {"bmo_ratio", rep.bmo_ratio}};
}

nlohmann::json to_json(const PriorBoundReport& rep) {
    return {{"m_const", rep.m_const},
            {"worst_envelope_slack", rep.worst_envelope_slack},
            {"envelope_pass", rep.envelope_pass},
            {"worst_envelope_slack_literal", rep.worst_envelope_slack_literal},
            {"u_linf", rep.u_linf},
            {"two_y_sup", rep.two_y_sup},
            {"u_jump_bound_pass", rep.u_jump_bound_pass},
            {"h2_bmo", rep.h2_bmo},
            {"j2_bmo", rep.j2_bmo},
            {"bmo_constant", rep.bmo_constant},
            {"pass", rep.pass}};
}

std::string csv_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header) {
    out_.open(path, std::ios::binary);
    if (!out_) throw ConfigError("cannot open output file " + path);
    write_row(header);
}

void CsvWriter::write_row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) out_ << ',';
        out_ << fields[i];
    }
    out_ << '\n';
}

void CsvWriter::close() { out_.close(); }

}  // namespace qbsdej
