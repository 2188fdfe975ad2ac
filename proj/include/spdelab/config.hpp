#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "spdelab/error.hpp"
#include "spdelab/io.hpp"

namespace spdelab {

enum class Recipe { reduction, normal_deviation, ldp_tail, rate_function, diagnostics };

inline std::string to_string(Recipe r) {
    switch (r) {
    case Recipe::reduction: return "reduction";
    case Recipe::normal_deviation: return "normal_deviation";
    case Recipe::ldp_tail: return "ldp_tail";
    case Recipe::rate_function: return "rate_function";
    case Recipe::diagnostics: return "diagnostics";
    }
    return "?";
}

struct MeshSection {
    int dimension = 1;
    std::size_t nodes = 129; ///< 1D
    double length = 1.0;     ///< 1D
    std::size_t nx = 33, ny = 33;
    double lx = 1.0, ly = 1.0;
    bool lumped_mass = false;
    bool operator==(const MeshSection&) const = default;
};

struct SystemSection {
    double epsilon = 0.1;
    double T = 1.0;
    double dt = 1e-3;
    double f_a = 1.0, f_b = 0.0, f_c = 0.0;
    bool zero_forcing = false;
    std::string initial = "default"; ///< default | zero
    double blowup_threshold = 1e6;
    bool operator==(const SystemSection&) const = default;
};

struct NoiseSection {
    double sigma1 = 0.5, sigma2 = 0.5;
    double q1_scale = 1.0, q1_exponent = 3.0;
    std::size_t modes = 32;
    double q2 = 1.0;
    double q2_exponent = 2.0;        ///< 2D only
    std::size_t boundary_modes = 16; ///< 2D only
    double tail_tol = 1e-6;
    bool operator==(const NoiseSection&) const = default;
};

struct EnsembleSection {
    std::vector<double> eps_grid;
    std::size_t n_paths = 200;
    std::vector<std::string> quantities;
    std::size_t workers = 1;
    std::size_t save_paths = 0;
    std::size_t path_stride = 1;
    bool operator==(const EnsembleSection&) const = default;
};

struct LdpSection {
    double kappa = 0.25;
    std::optional<double> delta;
    double calibration_probability = 0.05;
    std::size_t calibration_paths = 1000;
    double level = 0.95;
    bool operator==(const LdpSection&) const = default;
};

struct RateSection {
    double tolerance = 1e-8;
    std::string target_control = "sine"; ///< constant | sine
    double target_amplitude = 1.0;
    std::optional<double> M_bound;
    bool operator==(const RateSection&) const = default;
};

struct ExperimentSpec {
    Recipe recipe = Recipe::reduction;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    MeshSection mesh;
    SystemSection system;
    NoiseSection noise;
    EnsembleSection ensemble;
    LdpSection ldp;
    RateSection rate;
    /// Dotted keys that were filled from defaults (echoed into the manifest).
    std::vector<std::string> applied_defaults;

    bool operator==(const ExperimentSpec& o) const {
        return recipe == o.recipe && seed == o.seed && output_dir == o.output_dir && mesh == o.mesh && system == o.system &&
               noise == o.noise && ensemble == o.ensemble && ldp == o.ldp && rate == o.rate;
    }
};

namespace detail {

inline std::string where(const YAML::Node& n) {
    const auto m = n.Mark();
    if (m.line < 0) return "";
    return " (line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1) + ")";
}

class SectionReader {
public:
    SectionReader(YAML::Node node, std::string prefix, std::vector<std::string>& defaults)
        : node_(std::move(node)), prefix_(std::move(prefix)), defaults_(defaults) {
        if (node_ && !node_.IsMap() && !node_.IsNull())
            throw ConfigError("section '" + prefix_ + "' must be a mapping" + where(node_));
    }

    template <class T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        if (!has(key)) {
            defaults_.push_back(dotted(key));
            return;
        }
        const YAML::Node v = node_[key];
        try {
            out = v.as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError("key '" + dotted(key) + "' has the wrong type" + where(v));
        }
    }

    template <class T>
    void read(const std::string& key, std::optional<T>& out) {
        seen_.insert(key);
        if (!has(key)) return;
        const YAML::Node v = node_[key];
        if (v.IsNull()) return;
        try {
            out = v.as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError("key '" + dotted(key) + "' has the wrong type" + where(v));
        }
    }

    bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }

    /// Sub-section, or an undefined node when absent.
    YAML::Node node(const std::string& key) const {
        seen_.insert(key);
        return has(key) ? node_[key] : YAML::Node(YAML::NodeType::Undefined);
    }

    void reject_unknown() const {
        if (!node_ || !node_.IsMap()) return;
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!seen_.count(key)) throw ConfigError("unknown key '" + dotted(key) + "'" + where(kv.first));
        }
    }

private:
    std::string dotted(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

    YAML::Node node_;
    std::string prefix_;
    std::vector<std::string>& defaults_;
    mutable std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& msg, const YAML::Node& at = YAML::Node(YAML::NodeType::Undefined)) {
    if (!ok) throw ConfigError(msg + (at ? where(at) : std::string()));
}

} // namespace detail

/// Recipe-dependent defaults for keys that have no single global default.
inline std::vector<double> default_eps_grid(Recipe r) {
    if (r == Recipe::ldp_tail) return {0.04, 0.01};
    return {0.1, std::pow(10.0, -1.5), 0.01, std::pow(10.0, -2.5)};
}

inline std::vector<std::string> default_quantities(Recipe r) {
    switch (r) {
    case Recipe::normal_deviation: return {"deviation_gap", "limit_norm", "error_l2l2_sq"};
    case Recipe::ldp_tail: return {"kappa_deviation"};
    default: return {"error_l2l2_sq", "sup_energy", "h1_integral"};
    }
}

inline void validate_spec(const ExperimentSpec& s, const YAML::Node& root = YAML::Node(YAML::NodeType::Undefined)) {
    using detail::require;
    auto at = [&](const char* section, const char* key) {
        if (!root || !root[section] || !root[section].IsMap()) return YAML::Node(YAML::NodeType::Undefined);
        return root[section][key] ? root[section][key] : YAML::Node(YAML::NodeType::Undefined);
    };
    require(s.mesh.dimension == 1 || s.mesh.dimension == 2, "mesh.dimension must be 1 or 2", at("mesh", "dimension"));
    require(s.mesh.nodes >= 3, "mesh.nodes must be >= 3", at("mesh", "nodes"));
    require(s.mesh.length > 0.0, "mesh.length must be positive", at("mesh", "length"));
    require(s.mesh.nx >= 3 && s.mesh.ny >= 3, "mesh.nx and mesh.ny must be >= 3");
    require(s.mesh.lx > 0.0 && s.mesh.ly > 0.0, "mesh.lx and mesh.ly must be positive");
    require(s.system.epsilon > 0.0 && s.system.epsilon <= 1.0, "epsilon out of (0,1]: require 0 < epsilon <= 1",
            at("system", "epsilon"));
    require(s.system.T > 0.0, "system.T must be positive", at("system", "T"));
    require(s.system.dt > 0.0 && s.system.dt < s.system.T, "system.dt must satisfy 0 < dt < T", at("system", "dt"));
    require(std::abs(std::round(s.system.T / s.system.dt) * s.system.dt - s.system.T) <= 1e-9 * s.system.T,
            "system.T must be an integer multiple of system.dt", at("system", "dt"));
    require(s.system.zero_forcing || s.system.f_a > 0.0, "system.f_a must be positive (dissipativity of f)",
            at("system", "f_a"));
    require(s.system.initial == "default" || s.system.initial == "zero", "system.initial must be 'default' or 'zero'",
            at("system", "initial"));
    require(s.system.blowup_threshold > 0.0, "system.blowup_threshold must be positive", at("system", "blowup_threshold"));
    require(s.noise.sigma1 >= 0.0 && s.noise.sigma2 >= 0.0, "noise.sigma1 and noise.sigma2 must be >= 0");
    require(s.noise.modes >= 1, "noise.modes (K_trunc) must be >= 1", at("noise", "modes"));
    require(s.noise.q1_scale > 0.0 && s.noise.q2 > 0.0, "noise.q1_scale and noise.q2 must be positive");
    require(s.noise.tail_tol > 0.0, "noise.tail_tol must be positive", at("noise", "tail_tol"));
    require(!s.ensemble.eps_grid.empty(), "ensemble.eps_grid must not be empty", at("ensemble", "eps_grid"));
    for (std::size_t i = 0; i < s.ensemble.eps_grid.size(); ++i) {
        const double e = s.ensemble.eps_grid[i];
        require(e > 0.0 && e <= 1.0, "epsilon out of (0,1]: require 0 < epsilon <= 1 in ensemble.eps_grid",
                at("ensemble", "eps_grid"));
        require(i == 0 || e < s.ensemble.eps_grid[i - 1], "ensemble.eps_grid must be strictly decreasing",
                at("ensemble", "eps_grid"));
    }
    require(s.ensemble.n_paths >= 1, "ensemble.n_paths must be >= 1", at("ensemble", "n_paths"));
    require(s.ensemble.workers >= 1, "ensemble.workers must be >= 1", at("ensemble", "workers"));
    require(s.ensemble.path_stride >= 1, "ensemble.path_stride must be >= 1", at("ensemble", "path_stride"));
    for (const auto& q : s.ensemble.quantities) {
        static const std::set<std::string> known{"error_l2l2_sq", "sup_energy", "h1_integral",
                                                 "deviation_gap", "limit_norm", "kappa_deviation"};
        require(known.count(q) > 0, "unknown quantity '" + q + "' in ensemble.quantities", at("ensemble", "quantities"));
    }
    if (s.recipe == Recipe::ldp_tail)
        require(s.ldp.kappa > 0.0 && s.ldp.kappa < 0.5, "ldp.kappa must lie in (0, 1/2)", at("ldp", "kappa"));
    else
        require(s.ldp.kappa > 0.0 && s.ldp.kappa <= 0.5, "ldp.kappa must lie in (0, 1/2]", at("ldp", "kappa"));
    require(!s.ldp.delta || *s.ldp.delta >= 0.0, "ldp.delta must be >= 0", at("ldp", "delta"));
    require(s.ldp.calibration_probability > 0.0 && s.ldp.calibration_probability < 1.0,
            "ldp.calibration_probability must lie in (0,1)", at("ldp", "calibration_probability"));
    require(s.ldp.calibration_paths >= 1, "ldp.calibration_paths must be >= 1", at("ldp", "calibration_paths"));
    require(s.ldp.level > 0.0 && s.ldp.level < 1.0, "ldp.level must lie in (0,1)", at("ldp", "level"));
    require(s.rate.tolerance > 0.0, "rate.tolerance must be positive", at("rate", "tolerance"));
    require(s.rate.target_control == "constant" || s.rate.target_control == "sine",
            "rate.target_control must be 'constant' or 'sine'", at("rate", "target_control"));
}

/// Parses and validates a YAML experiment document. Unknown keys are
/// rejected; every default applied is recorded in `applied_defaults`.
inline ExperimentSpec parse_config(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError("parse error at line " + std::to_string(e.mark.line + 1) + ", column " +
                          std::to_string(e.mark.column + 1) + ": " + e.msg);
    }
    if (!root || !root.IsMap()) throw ConfigError("config must be a mapping of keys and sections");

    ExperimentSpec s;
    auto& defaults = s.applied_defaults;
    detail::SectionReader top(root, "", defaults);
    std::string recipe;
    top.read("recipe", recipe);
    if (!root["recipe"]) throw ConfigError("missing required key 'recipe'");
    if (recipe == "reduction") s.recipe = Recipe::reduction;
    else if (recipe == "normal_deviation") s.recipe = Recipe::normal_deviation;
    else if (recipe == "ldp_tail") s.recipe = Recipe::ldp_tail;
    else if (recipe == "rate_function") s.recipe = Recipe::rate_function;
    else if (recipe == "diagnostics") s.recipe = Recipe::diagnostics;
    else throw ConfigError("unknown recipe '" + recipe + "'" + detail::where(root["recipe"]));
    top.read("seed", s.seed);
    if (!root["seed"]) throw ConfigError("missing required key 'seed'");
    top.read("output_dir", s.output_dir);

    {
        detail::SectionReader r(top.node("mesh"), "mesh", defaults);
        r.read("dimension", s.mesh.dimension);
        r.read("nodes", s.mesh.nodes);
        r.read("length", s.mesh.length);
        r.read("nx", s.mesh.nx);
        r.read("ny", s.mesh.ny);
        r.read("lx", s.mesh.lx);
        r.read("ly", s.mesh.ly);
        r.read("lumped_mass", s.mesh.lumped_mass);
        r.reject_unknown();
    }
    {
        detail::SectionReader r(top.node("system"), "system", defaults);
        r.read("epsilon", s.system.epsilon);
        r.read("T", s.system.T);
        r.read("dt", s.system.dt);
        r.read("f_a", s.system.f_a);
        r.read("f_b", s.system.f_b);
        r.read("f_c", s.system.f_c);
        r.read("zero_forcing", s.system.zero_forcing);
        r.read("initial", s.system.initial);
        r.read("blowup_threshold", s.system.blowup_threshold);
        r.reject_unknown();
    }
    {
        detail::SectionReader r(top.node("noise"), "noise", defaults);
        r.read("sigma1", s.noise.sigma1);
        r.read("sigma2", s.noise.sigma2);
        r.read("q1_scale", s.noise.q1_scale);
        r.read("q1_exponent", s.noise.q1_exponent);
        r.read("modes", s.noise.modes);
        r.read("q2", s.noise.q2);
        r.read("q2_exponent", s.noise.q2_exponent);
        r.read("boundary_modes", s.noise.boundary_modes);
        r.read("tail_tol", s.noise.tail_tol);
        r.reject_unknown();
    }
    {
        detail::SectionReader r(top.node("ensemble"), "ensemble", defaults);
        s.ensemble.eps_grid = default_eps_grid(s.recipe);
        s.ensemble.quantities = default_quantities(s.recipe);
        r.read("eps_grid", s.ensemble.eps_grid);
        r.read("n_paths", s.ensemble.n_paths);
        r.read("quantities", s.ensemble.quantities);
        r.read("workers", s.ensemble.workers);
        r.read("save_paths", s.ensemble.save_paths);
        r.read("path_stride", s.ensemble.path_stride);
        r.reject_unknown();
    }
    {
        detail::SectionReader r(top.node("ldp"), "ldp", defaults);
        r.read("kappa", s.ldp.kappa);
        r.read("delta", s.ldp.delta);
        r.read("calibration_probability", s.ldp.calibration_probability);
        r.read("calibration_paths", s.ldp.calibration_paths);
        r.read("level", s.ldp.level);
        r.reject_unknown();
    }
    {
        detail::SectionReader r(top.node("rate"), "rate", defaults);
        r.read("tolerance", s.rate.tolerance);
        r.read("target_control", s.rate.target_control);
        r.read("target_amplitude", s.rate.target_amplitude);
        r.read("M_bound", s.rate.M_bound);
        r.reject_unknown();
    }
    top.reject_unknown();
    validate_spec(s, root);
    return s;
}

/// Emits the fully applied spec; parse_config(serialize_config(s)) == s.
inline std::string serialize_config(const ExperimentSpec& s) {
    YAML::Emitter out;
    auto num = [](double v) { return format_double(v); };
    auto seq = [&](const std::vector<double>& xs) {
        out << YAML::Flow << YAML::BeginSeq;
        for (double x : xs) out << num(x);
        out << YAML::EndSeq;
    };
    out << YAML::BeginMap;
    out << YAML::Key << "recipe" << YAML::Value << to_string(s.recipe);
    out << YAML::Key << "seed" << YAML::Value << s.seed;
    out << YAML::Key << "output_dir" << YAML::Value << YAML::DoubleQuoted << s.output_dir;

    out << YAML::Key << "mesh" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "dimension" << YAML::Value << s.mesh.dimension;
    out << YAML::Key << "nodes" << YAML::Value << s.mesh.nodes;
    out << YAML::Key << "length" << YAML::Value << num(s.mesh.length);
    out << YAML::Key << "nx" << YAML::Value << s.mesh.nx;
    out << YAML::Key << "ny" << YAML::Value << s.mesh.ny;
    out << YAML::Key << "lx" << YAML::Value << num(s.mesh.lx);
    out << YAML::Key << "ly" << YAML::Value << num(s.mesh.ly);
    out << YAML::Key << "lumped_mass" << YAML::Value << s.mesh.lumped_mass;
    out << YAML::EndMap;

    out << YAML::Key << "system" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "epsilon" << YAML::Value << num(s.system.epsilon);
    out << YAML::Key << "T" << YAML::Value << num(s.system.T);
    out << YAML::Key << "dt" << YAML::Value << num(s.system.dt);
    out << YAML::Key << "f_a" << YAML::Value << num(s.system.f_a);
    out << YAML::Key << "f_b" << YAML::Value << num(s.system.f_b);
    out << YAML::Key << "f_c" << YAML::Value << num(s.system.f_c);
    out << YAML::Key << "zero_forcing" << YAML::Value << s.system.zero_forcing;
    out << YAML::Key << "initial" << YAML::Value << s.system.initial;
    out << YAML::Key << "blowup_threshold" << YAML::Value << num(s.system.blowup_threshold);
    out << YAML::EndMap;

    out << YAML::Key << "noise" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "sigma1" << YAML::Value << num(s.noise.sigma1);
    out << YAML::Key << "sigma2" << YAML::Value << num(s.noise.sigma2);
    out << YAML::Key << "q1_scale" << YAML::Value << num(s.noise.q1_scale);
    out << YAML::Key << "q1_exponent" << YAML::Value << num(s.noise.q1_exponent);
    out << YAML::Key << "modes" << YAML::Value << s.noise.modes;
    out << YAML::Key << "q2" << YAML::Value << num(s.noise.q2);
    out << YAML::Key << "q2_exponent" << YAML::Value << num(s.noise.q2_exponent);
    out << YAML::Key << "boundary_modes" << YAML::Value << s.noise.boundary_modes;
    out << YAML::Key << "tail_tol" << YAML::Value << num(s.noise.tail_tol);
    out << YAML::EndMap;

    out << YAML::Key << "ensemble" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "eps_grid" << YAML::Value;
    seq(s.ensemble.eps_grid);
    out << YAML::Key << "n_paths" << YAML::Value << s.ensemble.n_paths;
    out << YAML::Key << "quantities" << YAML::Value << YAML::Flow << s.ensemble.quantities;
    out << YAML::Key << "workers" << YAML::Value << s.ensemble.workers;
    out << YAML::Key << "save_paths" << YAML::Value << s.ensemble.save_paths;
    out << YAML::Key << "path_stride" << YAML::Value << s.ensemble.path_stride;
    out << YAML::EndMap;

    out << YAML::Key << "ldp" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "kappa" << YAML::Value << num(s.ldp.kappa);
    if (s.ldp.delta) out << YAML::Key << "delta" << YAML::Value << num(*s.ldp.delta);
    out << YAML::Key << "calibration_probability" << YAML::Value << num(s.ldp.calibration_probability);
    out << YAML::Key << "calibration_paths" << YAML::Value << s.ldp.calibration_paths;
    out << YAML::Key << "level" << YAML::Value << num(s.ldp.level);
    out << YAML::EndMap;

    out << YAML::Key << "rate" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "tolerance" << YAML::Value << num(s.rate.tolerance);
    out << YAML::Key << "target_control" << YAML::Value << s.rate.target_control;
    out << YAML::Key << "target_amplitude" << YAML::Value << num(s.rate.target_amplitude);
    if (s.rate.M_bound) out << YAML::Key << "M_bound" << YAML::Value << num(*s.rate.M_bound);
    out << YAML::EndMap;

    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

} // namespace spdelab
