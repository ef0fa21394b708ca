#include "clmtt/cli_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>

#include "clmtt/fokker_planck.hpp"
#include "clmtt/tt.hpp"

namespace clmtt {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::array<std::string, 3> kStates = {"v_d", "v_q", "s"};

bool is_state_label(const std::string& label) {
    return std::find(kStates.begin(), kStates.end(), label) != kStates.end();
}

[[noreturn]] void fail(const std::string& field, const std::string& what) {
    throw ConfigError(field + ": " + what);
}

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) fail(where, "expected an object");
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) fail(where.empty() ? key : where + "." + key, "unknown field");
    }
}

std::string join(const std::string& where, const std::string& key) { return where.empty() ? key : where + "." + key; }

double number(const json& j, const std::string& field) {
    if (!j.is_number()) fail(field, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(field, "must be finite");
    return v;
}

void read_number(const json& obj, const std::string& where, const char* key, double& out) {
    if (obj.contains(key)) out = number(obj.at(key), join(where, key));
}

void read_positive(const json& obj, const std::string& where, const char* key, double& out) {
    if (!obj.contains(key)) return;
    out = number(obj.at(key), join(where, key));
    if (!(out > 0.0)) fail(join(where, key), "must be positive");
}

void read_count(const json& obj, const std::string& where, const char* key, std::size_t& out) {
    if (!obj.contains(key)) return;
    const json& j = obj.at(key);
    if (!j.is_number_integer() || j.get<long long>() < 0) fail(join(where, key), "expected a non-negative integer");
    out = j.get<std::size_t>();
}

void read_bool(const json& obj, const std::string& where, const char* key, bool& out) {
    if (!obj.contains(key)) return;
    if (!obj.at(key).is_boolean()) fail(join(where, key), "expected true or false");
    out = obj.at(key).get<bool>();
}

std::string string_field(const json& j, const std::string& field) {
    if (!j.is_string()) fail(field, "expected a string");
    return j.get<std::string>();
}

void read_params(const json& obj, const std::string& where, CompositeLoadParams& p) {
    if (!obj.is_object()) fail(where, "expected an object of parameter values");
    for (const auto& [key, value] : obj.items()) {
        if (!CompositeLoadParams::is_label(key)) fail(join(where, key), "unknown parameter label");
        p.set(key, number(value, join(where, key)));
    }
    try {
        p.validate();
    } catch (const DomainError& e) {
        fail(where, e.what());
    }
}

DimensionSpec read_dimension(const json& j, const std::string& where) {
    check_keys(j, where, {"label", "lower", "upper", "nodes", "kind"});
    DimensionSpec d;
    if (!j.contains("label")) fail(where + ".label", "missing");
    d.label = string_field(j.at("label"), where + ".label");
    const std::string at = where + " (" + d.label + ")";
    const bool state = is_state_label(d.label);
    if (!state && !CompositeLoadParams::is_label(d.label)) fail(at, "unknown label");
    d.kind = state ? DimensionKind::State : DimensionKind::Parameter;
    if (j.contains("kind")) {
        const std::string kind = string_field(j.at("kind"), at + ".kind");
        if (kind != "state" && kind != "parameter") fail(at + ".kind", "expected \"state\" or \"parameter\"");
        if ((kind == "state") != state) fail(at + ".kind", "does not match the label");
    }
    for (const char* key : {"lower", "upper", "nodes"}) {
        if (!j.contains(key)) fail(at + "." + key, "missing");
    }
    d.lower = number(j.at("lower"), at + ".lower");
    d.upper = number(j.at("upper"), at + ".upper");
    if (!(d.lower < d.upper)) fail(at, "lower bound must be below upper bound");
    read_count(j, at, "nodes", d.nodes);
    if (d.nodes < 2) fail(at + ".nodes", "needs at least 2 nodes");
    if (!state && d.label == "omega" && (d.lower < 0.0 || d.upper > 1.0)) fail(at, "omega range must lie in [0, 1]");
    return d;
}

// A list entry is either a full dimension object or a label taken from the grid.
std::vector<DimensionSpec> read_dimension_list(const json& j, const std::string& where, const GridSpec& grid) {
    if (!j.is_array()) fail(where, "expected an array");
    std::vector<DimensionSpec> out;
    for (std::size_t k = 0; k < j.size(); ++k) {
        const std::string at = where + "[" + std::to_string(k) + "]";
        if (j[k].is_string()) {
            const std::string label = j[k].get<std::string>();
            auto it = std::find_if(grid.dims.begin(), grid.dims.end(), [&](const auto& d) { return d.label == label; });
            if (it == grid.dims.end()) fail(at, "label '" + label + "' is not on the grid");
            out.push_back(*it);
        } else {
            out.push_back(read_dimension(j[k], at));
        }
        if (out.back().kind != DimensionKind::Parameter) fail(at, "'" + out.back().label + "' is not a parameter");
    }
    return out;
}

void read_solver(const json& j, SolverConfig& s) {
    const std::string w = "solver";
    check_keys(j, w,
               {"method", "sigma", "split_epsilon", "round_tolerance", "cross_tolerance", "max_rank", "shift",
                "tolerance", "amen_max_rank", "max_iterations", "amen_tolerance"});
    if (j.contains("method")) {
        s.method = string_field(j.at("method"), "solver.method");
        if (s.method != "block" && s.method != "amen") fail("solver.method", "expected \"block\" or \"amen\"");
    }
    if (j.contains("sigma")) {
        const json& sg = j.at("sigma");
        if (sg.is_number()) {
            s.sigma.assign(3, number(sg, "solver.sigma"));
        } else if (sg.is_array() && sg.size() == 3) {
            s.sigma.clear();
            for (std::size_t k = 0; k < 3; ++k) s.sigma.push_back(number(sg[k], "solver.sigma[" + std::to_string(k) + "]"));
        } else {
            fail("solver.sigma", "expected a number or an array of 3 numbers");
        }
        for (double v : s.sigma) {
            if (v < 0.0) fail("solver.sigma", "must be non-negative");
        }
    }
    read_number(j, w, "split_epsilon", s.split_epsilon);
    if (s.split_epsilon < 0.0) fail("solver.split_epsilon", "must be non-negative");
    read_positive(j, w, "round_tolerance", s.round_tolerance);
    read_positive(j, w, "cross_tolerance", s.cross_tolerance);
    read_count(j, w, "max_rank", s.max_rank);
    read_number(j, w, "shift", s.shift);
    read_positive(j, w, "tolerance", s.tolerance);
    read_count(j, w, "amen_max_rank", s.amen_max_rank);
    read_count(j, w, "max_iterations", s.max_iterations);
    read_positive(j, w, "amen_tolerance", s.amen_tolerance);
    if (s.max_rank == 0) fail("solver.max_rank", "must be positive");
    if (s.amen_max_rank == 0) fail("solver.amen_max_rank", "must be positive");
}

void read_synthetic(const json& j, SyntheticConfig& s) {
    const std::string w = "synthetic";
    check_keys(j, w, {"shape", "duration", "dt", "event_time", "v_before", "v_after", "event_duration", "P0", "Q0",
                      "truth", "file"});
    if (j.contains("shape")) {
        s.shape = string_field(j.at("shape"), "synthetic.shape");
        if (s.shape != "step" && s.shape != "ramp" && s.shape != "sag") {
            fail("synthetic.shape", "expected \"step\", \"ramp\" or \"sag\"");
        }
    }
    read_positive(j, w, "duration", s.duration);
    read_positive(j, w, "dt", s.dt);
    read_number(j, w, "event_time", s.event_time);
    read_positive(j, w, "v_before", s.v_before);
    read_positive(j, w, "v_after", s.v_after);
    read_positive(j, w, "event_duration", s.event_duration);
    read_number(j, w, "P0", s.initial.P);
    read_number(j, w, "Q0", s.initial.Q);
    if (j.contains("truth")) read_params(j.at("truth"), "synthetic.truth", s.truth);
    if (j.contains("file")) {
        s.file = string_field(j.at("file"), "synthetic.file");
        const fs::path f(s.file);
        if (s.file.empty() || f.has_parent_path() || f.is_absolute() || s.file == "." || s.file == "..") {
            fail("synthetic.file", "must be a plain file name");
        }
    }
    if (s.duration < s.dt) fail("synthetic.duration", "shorter than one sample");
}

void require_trace(const RunConfig& cfg) {
    if (cfg.trace.empty()) fail("trace", "required in " + to_string(cfg.mode) + " mode");
    if (!fs::is_regular_file(cfg.trace)) fail("trace", "file '" + cfg.trace.string() + "' not found");
}

void require_clm_grid(const RunConfig& cfg) {
    for (const auto& s : kStates) {
        const bool found = std::any_of(cfg.grid.dims.begin(), cfg.grid.dims.end(),
                                       [&](const auto& d) { return d.label == s; });
        if (!found) fail("grid", "state '" + s + "' is missing (" + to_string(cfg.mode) + " needs v_d, v_q and s)");
    }
    if (cfg.grid.parameter_count() == 0) fail("grid", "no parameter dimension to estimate");
}

}  // namespace

std::string to_string(RunMode mode) {
    switch (mode) {
        case RunMode::Simulate: return "simulate";
        case RunMode::Estimate: return "estimate";
        case RunMode::Sensitivity: return "sensitivity";
        case RunMode::Oracle: return "oracle";
        case RunMode::Synth: return "synth";
    }
    return "estimate";
}

RunMode parse_mode(const std::string& name) {
    for (RunMode m : {RunMode::Simulate, RunMode::Estimate, RunMode::Sensitivity, RunMode::Oracle, RunMode::Synth}) {
        if (to_string(m) == name) return m;
    }
    throw ConfigError("mode: unknown mode '" + name + "'");
}

RunConfig parse_config(const json& doc, const fs::path& base_dir) {
    check_keys(doc, "",
               {"mode", "trace", "output", "seed", "verbose", "parameters", "initial_state", "grid", "solver",
                "measurement", "estimate", "oracle", "sensitivity", "simulation", "synthetic", "outputs"});
    RunConfig cfg;
    auto resolve = [&](const fs::path& p) { return (p.is_absolute() || base_dir.empty() ? p : base_dir / p).lexically_normal(); };

    if (doc.contains("mode")) cfg.mode = parse_mode(string_field(doc.at("mode"), "mode"));
    if (doc.contains("trace")) cfg.trace = resolve(string_field(doc.at("trace"), "trace"));
    if (doc.contains("output")) {
        const std::string out = string_field(doc.at("output"), "output");
        if (out.empty()) fail("output", "must not be empty");
        cfg.output_dir = resolve(out);
    } else {
        cfg.output_dir = resolve(cfg.output_dir);
    }
    if (doc.contains("seed")) {
        const json& s = doc.at("seed");
        if (!s.is_number_integer() || s.get<long long>() < 0) fail("seed", "expected a non-negative integer");
        cfg.seed = s.get<std::uint64_t>();
    }
    read_bool(doc, "", "verbose", cfg.verbose);
    if (doc.contains("parameters")) read_params(doc.at("parameters"), "parameters", cfg.parameters);

    if (doc.contains("initial_state")) {
        const json& x = doc.at("initial_state");
        check_keys(x, "initial_state", {"v_d", "v_q", "s"});
        MotorState m;
        read_number(x, "initial_state", "v_d", m.v_d);
        read_number(x, "initial_state", "v_q", m.v_q);
        read_number(x, "initial_state", "s", m.s);
        cfg.initial_state = m;
    }

    if (doc.contains("grid")) {
        const json& g = doc.at("grid");
        if (!g.is_array()) fail("grid", "expected an array of dimensions");
        for (std::size_t k = 0; k < g.size(); ++k) cfg.grid.dims.push_back(read_dimension(g[k], "grid[" + std::to_string(k) + "]"));
        try {
            cfg.grid.validate();
        } catch (const DomainError& e) {
            fail("grid", e.what());
        }
    }

    if (doc.contains("solver")) read_solver(doc.at("solver"), cfg.solver);

    if (doc.contains("measurement")) {
        const json& m = doc.at("measurement");
        check_keys(m, "measurement", {"settle_time", "tau"});
        if (m.contains("settle_time")) cfg.measurement.settle_time = number(m.at("settle_time"), "measurement.settle_time");
        read_positive(m, "measurement", "tau", cfg.measurement.tau);
    }

    if (doc.contains("estimate")) {
        const json& e = doc.at("estimate");
        check_keys(e, "estimate", {"refine", "min_prominence", "joint_pairs"});
        read_bool(e, "estimate", "refine", cfg.estimate.refine);
        read_number(e, "estimate", "min_prominence", cfg.estimate.min_prominence);
        if (cfg.estimate.min_prominence < 0.0) fail("estimate.min_prominence", "must be non-negative");
        if (e.contains("joint_pairs")) {
            const json& jp = e.at("joint_pairs");
            if (!jp.is_array()) fail("estimate.joint_pairs", "expected an array of label pairs");
            for (std::size_t k = 0; k < jp.size(); ++k) {
                const std::string at = "estimate.joint_pairs[" + std::to_string(k) + "]";
                if (!jp[k].is_array() || jp[k].size() != 2) fail(at, "expected two labels");
                const std::string a = string_field(jp[k][0], at);
                const std::string b = string_field(jp[k][1], at);
                for (const auto& l : {a, b}) {
                    const bool on_grid = std::any_of(cfg.grid.dims.begin(), cfg.grid.dims.end(),
                                                     [&](const auto& d) { return d.label == l; });
                    if (!on_grid) fail(at, "label '" + l + "' is not on the grid");
                }
                if (a == b) fail(at, "labels must differ");
                cfg.estimate.joint_pairs.emplace_back(a, b);
            }
        }
    }

    if (doc.contains("oracle")) {
        const json& o = doc.at("oracle");
        check_keys(o, "oracle", {"dims", "tau", "truth", "max_step"});
        if (o.contains("dims")) cfg.oracle.dims = read_dimension_list(o.at("dims"), "oracle.dims", cfg.grid);
        if (o.contains("tau")) {
            double t = 0.0;
            read_positive(o, "oracle", "tau", t);
            cfg.oracle.tau = t;
        }
        if (o.contains("truth")) {
            CompositeLoadParams t = cfg.parameters;
            read_params(o.at("truth"), "oracle.truth", t);
            cfg.oracle.truth = t;
        }
        read_positive(o, "oracle", "max_step", cfg.oracle.max_step);
    }
    if (cfg.oracle.dims.empty()) {
        for (const auto& d : cfg.grid.dims) {
            if (d.kind == DimensionKind::Parameter) cfg.oracle.dims.push_back(d);
        }
    }

    if (doc.contains("sensitivity")) {
        const json& s = doc.at("sensitivity");
        check_keys(s, "sensitivity", {"sweep"});
        if (s.contains("sweep")) cfg.sensitivity.sweep = read_dimension_list(s.at("sweep"), "sensitivity.sweep", cfg.grid);
        if (cfg.sensitivity.sweep.size() > 3) {
            fail("sensitivity.sweep", "at most 3 dimensions can be enumerated; the concentration index covers larger sets");
        }
    }

    if (doc.contains("simulation")) {
        const json& s = doc.at("simulation");
        check_keys(s, "simulation", {"max_step"});
        read_positive(s, "simulation", "max_step", cfg.simulation.max_step);
    }
    if (doc.contains("synthetic")) read_synthetic(doc.at("synthetic"), cfg.synthetic);

    if (doc.contains("outputs")) {
        const json& o = doc.at("outputs");
        check_keys(o, "outputs", {"tt_dump", "gnuplot"});
        read_bool(o, "outputs", "tt_dump", cfg.outputs.tt_dump);
        read_bool(o, "outputs", "gnuplot", cfg.outputs.gnuplot);
    }

    switch (cfg.mode) {
        case RunMode::Synth: break;
        case RunMode::Simulate: require_trace(cfg); break;
        case RunMode::Oracle:
            require_trace(cfg);
            if (cfg.oracle.dims.empty()) fail("oracle.dims", "no free parameter (give oracle.dims or grid parameters)");
            if (cfg.oracle.dims.size() > 3) {
                fail("oracle.dims", "at most 3 dimensions can be enumerated; the concentration index covers larger sets");
            }
            break;
        case RunMode::Estimate:
        case RunMode::Sensitivity:
            require_trace(cfg);
            require_clm_grid(cfg);
            break;
    }
    return cfg;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
    }
    return parse_config(doc, path.parent_path());
}

std::string describe_grid(const GridSpec& grid) {
    std::ostringstream os;
    double total = 1.0;
    bool first = true;
    for (auto kind : {DimensionKind::State, DimensionKind::Parameter}) {
        // Runs of equal node counts are written as powers.
        std::vector<std::size_t> counts;
        for (const auto& d : grid.dims) {
            if (d.kind == kind) counts.push_back(d.nodes);
        }
        for (std::size_t i = 0; i < counts.size();) {
            std::size_t j = i;
            while (j < counts.size() && counts[j] == counts[i]) ++j;
            if (!first) os << " x ";
            os << counts[i];
            if (j - i > 1) os << '^' << (j - i);
            first = false;
            i = j;
        }
    }
    for (const auto& d : grid.dims) total *= static_cast<double>(d.nodes);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.0f", total);
    os << " = " << buf << " points";
    return os.str();
}

std::vector<BusMeasurement> generate_synthetic(const SyntheticConfig& cfg, const SimulationOptions& options) {
    const auto samples = static_cast<std::size_t>(std::floor(cfg.duration / cfg.dt + 1e-9)) + 1;
    std::vector<VoltageSample> prof;
    prof.reserve(samples);
    for (std::size_t k = 0; k < samples; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;
        double v = cfg.v_before;
        // a small tolerance keeps the event on the sample that nominally hits it
        const double since = t - cfg.event_time + 1e-9 * cfg.dt;
        if (since >= 0.0) {
            if (cfg.shape == "step") {
                v = cfg.v_after;
            } else if (cfg.shape == "ramp") {
                v = since >= cfg.event_duration ? cfg.v_after
                                                : cfg.v_before + (cfg.v_after - cfg.v_before) * since / cfg.event_duration;
            } else if (cfg.shape == "sag") {
                v = since < cfg.event_duration ? cfg.v_after : cfg.v_before;
            } else {
                throw DomainError("generate_synthetic: unknown shape '" + cfg.shape + "'");
            }
        }
        prof.push_back({t, v, 0.0});
    }
    return synthesize_trace(prof, cfg.truth, cfg.initial, options);
}

// ---------------------------------------------------------------------------
// Writers

namespace {

std::FILE* open_for_write(const fs::path& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw Error("cannot write '" + path.string() + "'");
    return f;
}

void close_checked(std::FILE* f, const fs::path& path) {
    if (std::fclose(f) != 0) throw Error("error while writing '" + path.string() + "'");
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json params_json(const CompositeLoadParams& p) {
    json j = json::object();
    const auto values = p.to_array();
    for (std::size_t i = 0; i < CompositeLoadParams::kCount; ++i) j[std::string(CompositeLoadParams::labels()[i])] = values[i];
    return j;
}

json diagnostics_json(const SolverDiagnostics& d, bool with_time) {
    json j = {{"method", d.method},     {"residual", number_or_null(d.residual)},
              {"eigenvalue", number_or_null(d.eigenvalue)}, {"iterations", d.iterations},
              {"max_rank", d.max_rank}, {"sigma", d.sigma},
              {"tau", d.tau}};
    if (with_time) j["seconds"] = d.seconds;
    return j;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw Error("error while writing '" + path.string() + "'");
}

}  // namespace

json to_json(const EstimationResult& r) {
    json j;
    j["estimate"] = params_json(r.estimate);
    j["parameters"] = json::array();
    for (std::size_t k = 0; k < r.parameters.size(); ++k) {
        const auto& p = r.parameters[k];
        json e = {{"label", p.label}, {"node", p.node}, {"value", p.value}, {"density", p.density}};
        e["local_optima"] = json::array();
        if (k < r.local_optima.size()) {
            for (const auto& m : r.local_optima[k]) {
                e["local_optima"].push_back(
                    {{"node", m.node}, {"coordinate", m.coordinate}, {"density", m.density}, {"prominence", m.prominence}});
            }
        }
        auto it = std::find_if(r.marginals.begin(), r.marginals.end(), [&](const auto& m) { return m.label == p.label; });
        if (it != r.marginals.end()) e["concentration"] = concentration_index(*it);
        j["parameters"].push_back(e);
    }
    j["joint_mode"] = json::object();
    for (std::size_t k = 0; k < r.joint_mode.size() && k < r.parameters.size(); ++k) {
        j["joint_mode"][r.parameters[k].label] = r.joint_mode[k];
    }
    j["marginals"] = json::array();
    for (const auto& m : r.marginals) {
        j["marginals"].push_back({{"label", m.label}, {"step", m.step}, {"coordinates", m.coordinates}, {"density", m.density}});
    }
    j["fit_rmse"] = {{"P", number_or_null(r.fit_rmse.P)}, {"Q", number_or_null(r.fit_rmse.Q)}};
    j["diagnostics"] = diagnostics_json(r.diagnostics, false);
    return j;
}

void write_marginal_csv(const fs::path& path, const MarginalPdf& m) {
    std::FILE* f = open_for_write(path);
    std::fprintf(f, "coordinate,density\n");
    for (std::size_t i = 0; i < m.density.size(); ++i) std::fprintf(f, "%.17g,%.17g\n", m.coordinates[i], m.density[i]);
    close_checked(f, path);
}

void write_joint_csv(const fs::path& path, const JointTable& j) {
    std::FILE* f = open_for_write(path);
    std::fprintf(f, "coord_a,coord_b,density\n");
    for (std::size_t a = 0; a < j.coord_a.size(); ++a) {
        for (std::size_t b = 0; b < j.coord_b.size(); ++b) {
            std::fprintf(f, "%.17g,%.17g,%.17g\n", j.coord_a[a], j.coord_b[b], j.at(a, b));
        }
    }
    close_checked(f, path);
}

MarginalPdf read_marginal_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != "coordinate,density") throw Error(path.string() + ": expected header 'coordinate,density'");
    MarginalPdf m;
    m.label = path.stem().string();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error(path.string() + ": malformed row '" + line + "'");
        m.coordinates.push_back(std::stod(line.substr(0, comma)));
        m.density.push_back(std::stod(line.substr(comma + 1)));
    }
    if (m.coordinates.size() >= 2) m.step = m.coordinates[1] - m.coordinates[0];
    return m;
}

void write_marginal_dat(const fs::path& path, const MarginalPdf& m) {
    std::FILE* f = open_for_write(path);
    std::fprintf(f, "# %s density\n", m.label.c_str());
    for (std::size_t i = 0; i < m.density.size(); ++i) std::fprintf(f, "%.10g %.10g\n", m.coordinates[i], m.density[i]);
    close_checked(f, path);
}

void write_joint_dat(const fs::path& path, const JointTable& j) {
    std::FILE* f = open_for_write(path);
    std::fprintf(f, "# %s %s density\n", j.label_a.c_str(), j.label_b.c_str());
    for (std::size_t a = 0; a < j.coord_a.size(); ++a) {
        for (std::size_t b = 0; b < j.coord_b.size(); ++b) {
            std::fprintf(f, "%.10g %.10g %.10g\n", j.coord_a[a], j.coord_b[b], j.at(a, b));
        }
        std::fprintf(f, "\n");
    }
    close_checked(f, path);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

using Clock = std::chrono::steady_clock;

class Run {
public:
    explicit Run(const RunConfig& cfg) : cfg_(cfg), start_(Clock::now()) {}

    ~Run() {
        if (!committed_) cleanup();
    }

    template <typename F>
    auto stage(const std::string& name, F&& f) -> decltype(f()) {
        log("stage " + name);
        try {
            return f();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
    }

    void open_output() {
        const fs::path dir = cfg_.output_dir;
        if (!fs::exists(dir)) {
            fs::create_directories(dir);
            created_dir_ = true;
        } else if (!fs::is_directory(dir)) {
            throw Error("output path '" + dir.string() + "' is not a directory");
        }
        root_ = fs::weakly_canonical(dir);
    }

    /// Registers an artifact and returns its full path.
    fs::path artifact(const std::string& name) {
        const fs::path full = (root_ / name).lexically_normal();
        if (full.parent_path() != root_) throw Error("artifact '" + name + "' would leave the output directory");
        if (fs::exists(full) && !fs::is_regular_file(full)) throw Error("'" + full.string() + "' exists and is not a file");
        artifacts_.push_back(name);
        return full;
    }

    void log(const std::string& msg) const {
        if (!cfg_.verbose) return;
        const double t = std::chrono::duration<double>(Clock::now() - start_).count();
        std::fprintf(stderr, "[%8.2f s] %s\n", t, msg.c_str());
    }

    double elapsed() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }
    const std::vector<std::string>& artifacts() const { return artifacts_; }
    void commit() { committed_ = true; }

private:
    void cleanup() noexcept {
        std::error_code ec;
        for (const auto& a : artifacts_) {
            if (fs::is_regular_file(root_ / a, ec)) fs::remove(root_ / a, ec);
        }
        if (created_dir_ && fs::is_empty(root_, ec)) fs::remove(root_, ec);
    }

    const RunConfig& cfg_;
    Clock::time_point start_;
    fs::path root_;
    std::vector<std::string> artifacts_;
    bool created_dir_ = false;
    bool committed_ = false;
};

std::vector<BusMeasurement> load_trace(const RunConfig& cfg) {
    auto trace = read_trace_csv(cfg.trace.string());
    validate_trace(trace);
    if (trace.size() < 2) throw DomainError("trace needs at least two samples");
    return trace;
}

void write_response(const fs::path& path, std::span<const BusMeasurement> trace, std::span<const PowerPair> out) {
    std::FILE* f = open_for_write(path);
    std::fprintf(f, "t,P,Q,P_hat,Q_hat\n");
    for (std::size_t k = 0; k < trace.size(); ++k) {
        std::fprintf(f, "%.17g,%.17g,%.17g,%.17g,%.17g\n", trace[k].t, trace[k].P, trace[k].Q, out[k].P, out[k].Q);
    }
    close_checked(f, path);
}

void write_posterior(const fs::path& path, const BruteForcePosterior& b) {
    std::FILE* f = open_for_write(path);
    for (const auto& l : b.labels) std::fprintf(f, "%s,", l.c_str());
    std::fprintf(f, "rmse,density\n");
    std::vector<std::size_t> at(b.labels.size(), 0);
    for (std::size_t lin = 0; lin < b.size(); ++lin) {
        for (std::size_t d = 0; d < at.size(); ++d) std::fprintf(f, "%.17g,", b.coordinates[d][at[d]]);
        if (std::isfinite(b.rmse[lin])) {
            std::fprintf(f, "%.17g,%.17g\n", b.rmse[lin], b.density[lin]);
        } else {
            std::fprintf(f, "nan,%.17g\n", b.density[lin]);
        }
        for (std::size_t d = at.size(); d-- > 0;) {
            if (++at[d] < b.coordinates[d].size()) break;
            at[d] = 0;
        }
    }
    close_checked(f, path);
}

JointTable posterior_joint(const BruteForcePosterior& b) {
    JointTable j;
    j.label_a = b.labels[0];
    j.label_b = b.labels[1];
    j.coord_a = b.coordinates[0];
    j.coord_b = b.coordinates[1];
    j.step_a = b.steps[0];
    j.step_b = b.steps[1];
    j.density = b.density;
    return j;
}

struct DensityStage {
    std::unique_ptr<DiscretizedDomain> domain;
    tt::TtVector density;
    SolverDiagnostics diagnostics;
};

tt::TtVector initial_bump(const DiscretizedDomain& dom, const MotorState& x0) {
    std::vector<tt::Vector> f;
    const std::array<double, 3> c{x0.v_d, x0.v_q, x0.s};
    for (std::size_t d = 0; d < dom.dim_count(); ++d) {
        tt::Vector v = tt::Vector::Ones(static_cast<Eigen::Index>(dom.size(d)));
        const auto it = std::find(kStates.begin(), kStates.end(), dom.dim(d).label);
        if (it != kStates.end()) {
            const double center = c[static_cast<std::size_t>(it - kStates.begin())];
            const double w = 3.0 * dom.step(d);
            for (std::size_t k = 0; k < dom.size(d); ++k) {
                const double z = (dom.coordinate(d, k) - center) / w;
                v(static_cast<Eigen::Index>(k)) = std::exp(-0.5 * z * z) + 1e-12;
            }
        }
        f.push_back(v);
    }
    return tt::TtVector::rank_one(f);
}

// Conditioned joint density of states and grid parameters.
DensityStage solve_density(Run& run, const RunConfig& cfg, std::span<const BusMeasurement> trace) {
    DensityStage out;
    out.domain = run.stage("grid", [&] { return std::make_unique<DiscretizedDomain>(build_grid(cfg.grid)); });
    const DiscretizedDomain& dom = *out.domain;
    run.log("grid " + describe_grid(dom.spec()));

    const double t_end = trace.back().t;
    const double t_from = cfg.measurement.settle_time.value_or(trace.front().t + (t_end - trace.front().t) * 5.0 / 6.0);
    const PowerPair target = run.stage("initialize", [&] { return trailing_mean(trace, t_from); });
    BusMeasurement op = trace.back();
    op.P = target.P;
    op.Q = target.Q;
    const ClmGridModel model = run.stage("model", [&] { return ClmGridModel(dom, cfg.parameters, trace.front(), op); });

    tt::CrossOptions cross;
    cross.tolerance = cfg.solver.cross_tolerance;
    cross.seed = cfg.seed;
    const auto t0 = Clock::now();
    const auto drifts = run.stage("drift", [&] { return build_clm_drift_fields(model, cross); });

    StationaryResult st = run.stage("solve", [&] {
        if (cfg.solver.method == "block") {
            BlockSolveOptions o;
            o.split_epsilon = cfg.solver.split_epsilon;
            o.round_tolerance = cfg.solver.round_tolerance;
            o.max_rank = cfg.solver.max_rank;
            o.verbose = cfg.verbose;
            return block_stationary_density(drifts, dom, cfg.solver.sigma, o);
        }
        AssemblyOptions a;
        a.split_epsilon = cfg.solver.split_epsilon;
        a.cross_tolerance = cfg.solver.cross_tolerance;
        a.max_rank = cfg.solver.max_rank;
        a.seed = cfg.seed;
        const FpOperator op_a = assemble_fp_operator(drifts, dom, cfg.solver.sigma, a);
        StationarySolveConfig s;
        s.sigma = cfg.solver.sigma;
        s.shift = cfg.solver.shift;
        s.tolerance = cfg.solver.tolerance;
        s.max_rank = cfg.solver.amen_max_rank;
        s.max_iterations = cfg.solver.max_iterations;
        s.amen.tolerance = cfg.solver.amen_tolerance;
        s.amen.seed = cfg.seed;
        s.verbose = cfg.verbose;
        if (cfg.initial_state) {
            const tt::TtVector start = initial_bump(dom, *cfg.initial_state);
            return stationary_density(op_a, dom, s, &start);
        }
        return stationary_density(op_a, dom, s);
    });
    run.log("stationary residual " + std::to_string(st.residual));

    ConditionedDensity c = run.stage("condition", [&] {
        const auto fields = output_fields(model, op, cross);
        ConditioningOptions co;
        co.tau = cfg.measurement.tau;
        co.round_tolerance = cfg.solver.round_tolerance;
        co.cross = cross;
        return condition_on_output(st.density, dom, fields.first, fields.second, target, co);
    });

    out.density = std::move(c.density);
    auto& d = out.diagnostics;
    d.method = cfg.solver.method;
    d.residual = st.residual;
    d.eigenvalue = st.eigenvalue;
    d.iterations = st.iterations;
    d.max_rank = out.density.max_rank();
    d.sigma = *std::max_element(cfg.solver.sigma.begin(), cfg.solver.sigma.end());
    d.tau = cfg.measurement.tau;
    d.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return out;
}

std::vector<MarginalPdf> all_marginals(const DensityStage& ds) {
    std::vector<MarginalPdf> out;
    for (std::size_t d = 0; d < ds.domain->dim_count(); ++d) out.push_back(marginal(ds.density, *ds.domain, d));
    return out;
}

void emit_marginals(Run& run, const RunConfig& cfg, const std::vector<MarginalPdf>& ms, const std::string& prefix) {
    for (const auto& m : ms) {
        write_marginal_csv(run.artifact(prefix + m.label + ".csv"), m);
        if (cfg.outputs.gnuplot) write_marginal_dat(run.artifact(prefix + m.label + ".dat"), m);
    }
}

BruteForcePosterior run_oracle(Run& run, const RunConfig& cfg, std::span<const BusMeasurement> trace,
                               const std::vector<DimensionSpec>& dims) {
    return run.stage("oracle", [&] {
        GridSpec g;
        g.dims = dims;
        BruteForceOptions o;
        o.tau = cfg.oracle.tau;
        o.truth = cfg.oracle.truth;
        o.simulation = cfg.simulation;
        o.simulation.max_step = cfg.oracle.max_step;
        return brute_force_posterior(g, trace, cfg.parameters, o);
    });
}

json report_json(const RunReport& r, const RunConfig& cfg) {
    json j;
    j["mode"] = to_string(r.mode);
    j["seconds"] = r.seconds;
    j["seed"] = cfg.seed;
    if (!cfg.grid.dims.empty()) j["grid"] = describe_grid(cfg.grid);
    if (r.diagnostics) j["diagnostics"] = diagnostics_json(*r.diagnostics, true);
    if (r.fit_rmse) j["fit_rmse"] = {{"P", number_or_null(r.fit_rmse->P)}, {"Q", number_or_null(r.fit_rmse->Q)}};
    j["artifacts"] = r.artifacts;
    return j;
}

}  // namespace

RunReport run_pipeline(const RunConfig& cfg) {
    Run run(cfg);
    RunReport report;
    report.mode = cfg.mode;
    run.stage("output", [&] { run.open_output(); });

    std::vector<BusMeasurement> trace;
    if (cfg.mode != RunMode::Synth) trace = run.stage("trace", [&] { return load_trace(cfg); });

    switch (cfg.mode) {
        case RunMode::Synth: {
            const auto tr = run.stage("simulate", [&] { return generate_synthetic(cfg.synthetic, cfg.simulation); });
            run.stage("write", [&] { write_trace_csv(run.artifact(cfg.synthetic.file).string(), tr); });
            break;
        }
        case RunMode::Simulate: {
            const ResponseFit fit = run.stage("simulate", [&] { return response_from_estimate(cfg.parameters, trace, cfg.simulation); });
            report.fit_rmse = fit.rmse;
            run.stage("write", [&] {
                write_response(run.artifact("response.csv"), trace, fit.response);
                json j = {{"parameters", params_json(cfg.parameters)},
                          {"samples", trace.size()},
                          {"fit_rmse", {{"P", fit.rmse.P}, {"Q", fit.rmse.Q}}}};
                write_json(run.artifact("simulation_result.json"), j);
            });
            break;
        }
        case RunMode::Estimate: {
            DensityStage ds = solve_density(run, cfg, trace);
            const DiscretizedDomain& dom = *ds.domain;
            EstimationResult result;
            run.stage("extract", [&] {
                result.marginals = all_marginals(ds);
                std::vector<MarginalPdf> params(result.marginals.begin() + static_cast<std::ptrdiff_t>(dom.state_count()),
                                                result.marginals.end());
                result.parameters = argmax_params(params, cfg.estimate.refine);
                for (const auto& m : params) result.local_optima.push_back(local_maxima(m, cfg.estimate.min_prominence));
                result.estimate = cfg.parameters;
                for (const auto& e : result.parameters) result.estimate.set(e.label, e.value);
                try {
                    const auto mode = joint_parameter_mode(ds.density, dom);
                    for (std::size_t k = 0; k < mode.size(); ++k) {
                        result.joint_mode.push_back(dom.coordinate(dom.state_count() + k, mode[k]));
                    }
                } catch (const SizeGuardError& e) {
                    run.log(std::string("joint mode skipped: ") + e.what());
                }
                result.diagnostics = ds.diagnostics;
            });
            std::optional<ResponseFit> fit;
            try {
                fit = response_from_estimate(result.estimate, trace, cfg.simulation);
                result.fit_rmse = fit->rmse;
            } catch (const Error& e) {
                // The estimate may sit where the motor cannot be initialized.
                run.log(std::string("fit skipped: ") + e.what());
                result.fit_rmse = {std::nan(""), std::nan("")};
            }
            report.fit_rmse = result.fit_rmse;
            report.diagnostics = ds.diagnostics;
            run.stage("write", [&] {
                emit_marginals(run, cfg, result.marginals, "marginal_");
                for (const auto& [a, b] : cfg.estimate.joint_pairs) {
                    const JointTable j = joint_marginal_2d(ds.density, dom, dom.find(a), dom.find(b));
                    write_joint_csv(run.artifact("joint_" + a + "_" + b + ".csv"), j);
                    if (cfg.outputs.gnuplot) write_joint_dat(run.artifact("joint_" + a + "_" + b + ".dat"), j);
                }
                write_json(run.artifact("estimation_result.json"), to_json(result));
                if (fit) write_response(run.artifact("response.csv"), trace, fit->response);
                if (cfg.outputs.tt_dump) tt::write_binary(run.artifact("density.tt").string(), ds.density);
            });
            break;
        }
        case RunMode::Sensitivity: {
            DensityStage ds = solve_density(run, cfg, trace);
            const DiscretizedDomain& dom = *ds.domain;
            report.diagnostics = ds.diagnostics;
            json j;
            j["concentration"] = json::object();
            std::vector<std::pair<double, std::string>> by_conc;
            const auto ms = run.stage("extract", [&] { return all_marginals(ds); });
            for (std::size_t d = dom.state_count(); d < dom.dim_count(); ++d) {
                const double c = concentration_index(ms[d]);
                j["concentration"][ms[d].label] = c;
                by_conc.emplace_back(-c, ms[d].label);
            }
            std::stable_sort(by_conc.begin(), by_conc.end(), [](auto& a, auto& b) { return a.first < b.first; });
            j["ranking_concentration"] = json::array();
            for (const auto& e : by_conc) j["ranking_concentration"].push_back(e.second);

            std::optional<BruteForcePosterior> sweep;
            if (!cfg.sensitivity.sweep.empty()) {
                sweep = run_oracle(run, cfg, trace, cfg.sensitivity.sweep);
                const auto idx = run.stage("oracle", [&] { return variance_indices(*sweep); });
                std::vector<std::pair<double, std::string>> by_var;
                j["variance_index"] = json::object();
                for (std::size_t k = 0; k < idx.size(); ++k) {
                    j["variance_index"][sweep->labels[k]] = number_or_null(idx[k]);
                    by_var.emplace_back(-idx[k], sweep->labels[k]);
                }
                std::stable_sort(by_var.begin(), by_var.end(), [](auto& a, auto& b) { return a.first < b.first; });
                j["ranking_variance"] = json::array();
                for (const auto& e : by_var) j["ranking_variance"].push_back(e.second);
                j["sweep_tau"] = sweep->tau;
            }
            j["diagnostics"] = diagnostics_json(ds.diagnostics, false);
            run.stage("write", [&] {
                emit_marginals(run, cfg, ms, "marginal_");
                if (sweep) write_posterior(run.artifact("sweep.csv"), *sweep);
                write_json(run.artifact("sensitivity.json"), j);
            });
            break;
        }
        case RunMode::Oracle: {
            const BruteForcePosterior b = run_oracle(run, cfg, trace, cfg.oracle.dims);
            run.stage("write", [&] {
                write_posterior(run.artifact("posterior.csv"), b);
                std::vector<MarginalPdf> ms;
                for (std::size_t d = 0; d < b.labels.size(); ++d) ms.push_back(b.marginal(d));
                emit_marginals(run, cfg, ms, "oracle_marginal_");
                if (b.labels.size() == 2) {
                    const JointTable jt = posterior_joint(b);
                    write_joint_csv(run.artifact("oracle_joint_" + jt.label_a + "_" + jt.label_b + ".csv"), jt);
                    if (cfg.outputs.gnuplot) {
                        write_joint_dat(run.artifact("oracle_joint_" + jt.label_a + "_" + jt.label_b + ".dat"), jt);
                    }
                }
                const auto mode = b.mode();
                json j;
                j["labels"] = b.labels;
                j["tau"] = b.tau;
                j["mode"] = json::object();
                j["marginal_mode"] = json::object();
                std::size_t feasible = 0;
                for (double r : b.rmse) feasible += std::isfinite(r) ? 1 : 0;
                j["nodes"] = b.size();
                j["feasible_nodes"] = feasible;
                const auto marg = argmax_params(ms);
                for (std::size_t d = 0; d < b.labels.size(); ++d) {
                    j["mode"][b.labels[d]] = b.coordinates[d][mode[d]];
                    j["marginal_mode"][b.labels[d]] = marg[d].value;
                }
                write_json(run.artifact("oracle_result.json"), j);
            });
            break;
        }
    }

    report.seconds = run.elapsed();
    run.stage("report", [&] {
        const fs::path path = run.artifact("run_report.json");
        report.artifacts = run.artifacts();
        write_json(path, report_json(report, cfg));
    });
    run.commit();
    run.log("done");
    return report;
}

}  // namespace clmtt
