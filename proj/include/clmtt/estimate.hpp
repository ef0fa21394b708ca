#pragma once

// Marginals, point estimates and sensitivity indices extracted from a joint
// state/parameter density, plus a brute-force enumeration oracle.

#include <optional>
#include <string>
#include <vector>

#include "clmtt/fokker_planck.hpp"
#include "clmtt/grid.hpp"
#include "clmtt/load_model.hpp"
#include "clmtt/tt.hpp"

namespace clmtt {

struct MarginalPdf {
    std::string label;
    std::vector<double> coordinates;
    std::vector<double> density;
    double step = 1.0;

    /// Midpoint-rule integral.
    double integral() const;
};

struct JointTable {
    std::string label_a;
    std::string label_b;
    std::vector<double> coord_a;
    std::vector<double> coord_b;
    /// density[i * coord_b.size() + j] at (coord_a[i], coord_b[j]).
    std::vector<double> density;
    double step_a = 1.0;
    double step_b = 1.0;

    double at(std::size_t i, std::size_t j) const { return density[i * coord_b.size() + j]; }
};

/// Contracts every other dimension with midpoint weights and renormalizes.
/// Small negative values left by rounding are clipped to zero first.
MarginalPdf marginal(const tt::TtVector& p, const DiscretizedDomain& domain, std::size_t dim);

JointTable joint_marginal_2d(const tt::TtVector& p, const DiscretizedDomain& domain, std::size_t dim_a,
                             std::size_t dim_b);

struct ParameterEstimate {
    std::string label;
    std::size_t node = 0;
    /// Node coordinate, or the parabolic vertex when refinement is on.
    double value = 0.0;
    double density = 0.0;
};

/// Node of maximal density per marginal; ties go to the lower coordinate.
/// With `refine`, a parabola through the mode and its two neighbors moves
/// the value inside the mode's cell. Throws DomainError on an all-zero
/// marginal.
std::vector<ParameterEstimate> argmax_params(const std::vector<MarginalPdf>& marginals, bool refine = false);

struct LocalMaximum {
    std::size_t node = 0;
    double coordinate = 0.0;
    double density = 0.0;
    double prominence = 0.0;
};

/// Interior nodes strictly above both neighbors whose topographic prominence
/// reaches `min_prominence`, by decreasing density.
std::vector<LocalMaximum> local_maxima(const MarginalPdf& m, double min_prominence = 0.0);

/// 1 - H(p) / log(n) for the node probabilities of a marginal.
double concentration_index(const MarginalPdf& m);

/// Node multi-index of the largest entry of the density contracted onto its
/// parameter dimensions (lowest linear index on ties). Throws SizeGuardError
/// when the parameter grid has more than `max_points` nodes.
std::vector<std::size_t> joint_parameter_mode(const tt::TtVector& p, const DiscretizedDomain& domain,
                                              std::size_t max_points = 1u << 22);

// ---------------------------------------------------------------------------
// Measurement conditioning

struct ConditioningOptions {
    /// Width of the Gaussian agreement between expected and measured output.
    double tau = 3e-3;
    double round_tolerance = 1e-10;
    tt::CrossOptions cross;
};

struct ConditionedDensity {
    /// p(x | pi) L(pi) / m(pi), unit integral.
    tt::TtVector density;
    /// Over the parameter dimensions only.
    tt::TtVector expected_P;
    tt::TtVector expected_Q;
    tt::TtVector likelihood;
    PowerPair target;
};

/// Output of the model on every grid node, as two TT vectors (P, Q).
std::pair<tt::TtVector, tt::TtVector> output_fields(const ClmGridModel& model, const BusMeasurement& meas,
                                                    const tt::CrossOptions& options = {});

/// Weights each parameter node of a stationary density by how well its
/// expected output matches the measured operating point:
/// L(pi) = exp(-((E[P|pi] - P)^2 + (E[Q|pi] - Q)^2) / (2 tau^2)).
/// Parameter dimensions must follow the states.
ConditionedDensity condition_on_output(const tt::TtVector& p, const DiscretizedDomain& domain,
                                       const tt::TtVector& out_P, const tt::TtVector& out_Q,
                                       const PowerPair& target, const ConditioningOptions& options = {});

/// Mean of P and Q over the samples with t >= t_from.
PowerPair trailing_mean(std::span<const BusMeasurement> trace, double t_from);

// ---------------------------------------------------------------------------
// Fit and enumeration

struct ResponseFit {
    std::vector<PowerPair> response;
    PowerPair rmse;
};

ResponseFit response_from_estimate(const CompositeLoadParams& params, std::span<const BusMeasurement> trace,
                                   const SimulationOptions& options = {});

struct BruteForcePosterior {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> coordinates;
    std::vector<double> steps;
    /// Row-major over the free dimensions, last fastest. Infeasible nodes
    /// carry NaN RMSE and zero density.
    std::vector<double> rmse;
    std::vector<double> density;
    double tau = 0.0;

    std::size_t size() const { return rmse.size(); }
    MarginalPdf marginal(std::size_t dim) const;
    /// Multi-index of the largest density (lowest index on ties).
    std::vector<std::size_t> mode() const;
};

struct BruteForceOptions {
    /// Likelihood width; defaults to the RMSE of `truth` plus 0.01 when a
    /// truth is given, 0.01 otherwise.
    std::optional<double> tau;
    std::optional<CompositeLoadParams> truth;
    SimulationOptions simulation;
};

/// Scores exp(-rmse^2 / (2 tau^2)) with rmse = sqrt(rmse_P^2 + rmse_Q^2) on
/// every node of the parameter grid. At most three dimensions.
BruteForcePosterior brute_force_posterior(const GridSpec& params, std::span<const BusMeasurement> trace,
                                          const CompositeLoadParams& frozen,
                                          const BruteForceOptions& options = {});

/// First-order variance index of the RMSE over each free dimension:
/// Var(E[rmse | pi_j]) / Var(rmse), over the feasible nodes.
std::vector<double> variance_indices(const BruteForcePosterior& sweep);

// ---------------------------------------------------------------------------

struct SolverDiagnostics {
    std::string method;
    double residual = 0.0;
    double eigenvalue = 0.0;
    std::size_t iterations = 0;
    std::size_t max_rank = 0;
    double sigma = 0.0;
    double tau = 0.0;
    double seconds = 0.0;
};

struct EstimationResult {
    CompositeLoadParams estimate;
    std::vector<ParameterEstimate> parameters;
    /// Per estimated parameter, local maxima of its marginal.
    std::vector<std::vector<LocalMaximum>> local_optima;
    std::vector<MarginalPdf> marginals;
    /// Joint-argmax over the parameter grid, in parameter order.
    std::vector<double> joint_mode;
    PowerPair fit_rmse;
    SolverDiagnostics diagnostics;
};

}  // namespace clmtt
