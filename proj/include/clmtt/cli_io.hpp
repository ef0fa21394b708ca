#pragma once

// Run configuration, synthetic traces and the end-to-end pipeline behind the
// command-line tool.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clmtt/error.hpp"
#include "clmtt/estimate.hpp"
#include "clmtt/grid.hpp"
#include "clmtt/load_model.hpp"

namespace clmtt {

enum class RunMode { Simulate, Estimate, Sensitivity, Oracle, Synth };

std::string to_string(RunMode mode);
/// Throws ConfigError on an unknown name.
RunMode parse_mode(const std::string& name);

/// Failure of one pipeline stage.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what) : Error(what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct SyntheticConfig {
    /// "step" holds v_after from event_time on, "ramp" reaches it linearly
    /// over event_duration, "sag" returns to v_before after event_duration.
    std::string shape = "step";
    double duration = 120.0;
    double dt = 0.01;
    double event_time = 1.0;
    double v_before = 1.0;
    double v_after = 0.95;
    double event_duration = 0.5;
    PowerPair initial{1.0, 0.5};
    CompositeLoadParams truth;
    /// Output file name inside the output directory.
    std::string file = "trace.csv";
};

struct SolverConfig {
    /// "block" or "amen".
    std::string method = "block";
    /// Diffusion per state dimension.
    std::vector<double> sigma{1e-3, 1e-3, 1e-3};
    double split_epsilon = 0.0;
    double round_tolerance = 1e-10;
    double cross_tolerance = 1e-8;
    std::size_t max_rank = 400;
    // shifted inverse iteration
    double shift = 1e-2;
    double tolerance = 1e-8;
    std::size_t amen_max_rank = 60;
    std::size_t max_iterations = 30;
    double amen_tolerance = 1e-6;
};

struct MeasurementConfig {
    /// Start of the averaging window for the operating point; defaults to the
    /// last sixth of the trace.
    std::optional<double> settle_time;
    double tau = 3e-3;
};

struct EstimateConfig {
    bool refine = false;
    double min_prominence = 0.0;
    std::vector<std::pair<std::string, std::string>> joint_pairs;
};

struct OracleConfig {
    /// Free dimensions; empty means the parameter dimensions of the grid.
    std::vector<DimensionSpec> dims;
    std::optional<double> tau;
    std::optional<CompositeLoadParams> truth;
    double max_step = 0.01;
};

struct SensitivityConfig {
    /// Brute-force sweep dimensions (at most three).
    std::vector<DimensionSpec> sweep;
};

struct OutputConfig {
    bool tt_dump = true;
    bool gnuplot = true;
};

struct RunConfig {
    RunMode mode = RunMode::Estimate;
    std::filesystem::path trace;
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 20240611;
    bool verbose = false;
    /// Initial guess and frozen values for parameters off the grid.
    CompositeLoadParams parameters;
    /// Center of the starting density of the inverse iteration.
    std::optional<MotorState> initial_state;
    GridSpec grid;
    SolverConfig solver;
    MeasurementConfig measurement;
    EstimateConfig estimate;
    OracleConfig oracle;
    SensitivityConfig sensitivity;
    SimulationOptions simulation;
    SyntheticConfig synthetic;
    OutputConfig outputs;
};

/// Relative paths in the document resolve against `base_dir`. Throws
/// ConfigError naming the offending field.
RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// "17^3 x 33^2 = 5306625 points" style summary, states first.
std::string describe_grid(const GridSpec& grid);

std::vector<BusMeasurement> generate_synthetic(const SyntheticConfig& cfg, const SimulationOptions& options = {});

struct RunReport {
    RunMode mode = RunMode::Estimate;
    double seconds = 0.0;
    std::optional<SolverDiagnostics> diagnostics;
    /// File names relative to the output directory.
    std::vector<std::string> artifacts;
    std::optional<PowerPair> fit_rmse;
};

/// Runs one mode end to end and writes its artifacts, plus run_report.json,
/// into the output directory. On failure every file written so far is
/// removed and a StageError is thrown.
RunReport run_pipeline(const RunConfig& cfg);

nlohmann::json to_json(const EstimationResult& result);

void write_marginal_csv(const std::filesystem::path& path, const MarginalPdf& m);
void write_joint_csv(const std::filesystem::path& path, const JointTable& j);
MarginalPdf read_marginal_csv(const std::filesystem::path& path);

/// Whitespace-separated tables with a blank line between rows of a joint
/// table, as read by gnuplot's plot and splot.
void write_marginal_dat(const std::filesystem::path& path, const MarginalPdf& m);
void write_joint_dat(const std::filesystem::path& path, const JointTable& j);

}  // namespace clmtt
