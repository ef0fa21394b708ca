#pragma once

// Discretized parametric Fokker-Planck operator over a joint state/parameter
// grid, and its stationary and transient densities.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "clmtt/amen.hpp"
#include "clmtt/grid.hpp"
#include "clmtt/load_model.hpp"
#include "clmtt/tt.hpp"
#include "clmtt/tt_cross.hpp"

namespace clmtt {

/// Drift component of one state dimension sampled on the full grid.
struct DriftField {
    std::string label;
    /// Index of the state dimension within the domain.
    std::size_t dim = 0;
    tt::TtVector values;
    double sampled_error = 0.0;
};

struct FpOperator {
    tt::TtMatrix matrix;
    std::vector<double> sigma;  ///< diffusion per state dimension
    std::string boundary = "reflecting";
    double split_epsilon = 0.0;
};

struct AssemblyOptions {
    /// Smoothing of the upwind split mu = mu+ + mu-; 0 gives the sharp split.
    double split_epsilon = 0.0;
    double cross_tolerance = 1e-8;
    double round_tolerance = 1e-12;
    std::size_t max_rank = 400;
    std::uint64_t seed = 20240611;
};

struct StationarySolveConfig {
    std::vector<double> sigma;
    /// Inverse iteration solves (A - shift I) y = p.
    double shift = 1e-2;
    double tolerance = 1e-8;
    std::size_t max_rank = 60;
    std::size_t max_iterations = 30;
    tt::AmenOptions amen;
    /// Clamp small negative entries after the final iteration.
    bool clamp_negative = true;
    /// Progress lines on stderr.
    bool verbose = false;
};

struct StationaryResult {
    tt::TtVector density;
    double eigenvalue = 0.0;
    /// ||A p|| / ||p|| of the returned density.
    double residual = 0.0;
    std::size_t iterations = 0;
    std::size_t max_rank = 0;
    std::vector<tt::SolveReport> solves;
};

/// Drift of one state dimension as a function of node coordinates, state
/// coordinates first.
using PointFunction = std::function<double(std::span<const double>)>;

/// Samples `f` on the grid by cross approximation.
DriftField build_drift_field(const PointFunction& f, const DiscretizedDomain& domain,
                             std::size_t dim, const tt::CrossOptions& options = {});

/// Composite load model evaluated on grid nodes. Parameters not on the grid
/// are frozen at `base`. The motor is initialized on `initial` and the drift
/// is evaluated with the algebraic relations frozen at `operating`.
class ClmGridModel {
public:
    ClmGridModel(const DiscretizedDomain& domain, CompositeLoadParams base,
                 BusMeasurement initial, BusMeasurement operating);

    static const std::array<std::string, 3>& state_labels();

    /// Parameters at the node given by the parameter part of the multi-index.
    CompositeLoadParams params_at(std::span<const std::size_t> index) const;
    MotorState state_at(std::span<const std::size_t> index) const;

    struct NodeData {
        CompositeLoadParams params;
        BaselineOperatingPoint baseline;
        /// False when the motor cannot draw the initial power; the baseline
        /// then uses the slip of maximal motor power.
        bool feasible = true;
    };
    /// Cached initialization for the parameter node of a full multi-index.
    const NodeData& node(std::span<const std::size_t> index) const;

    double drift(std::size_t state, std::span<const std::size_t> index) const;
    PowerPair output(std::span<const std::size_t> index, const BusMeasurement& meas) const;

    const BusMeasurement& operating() const { return operating_; }
    const BusMeasurement& initial() const { return initial_; }
    const DiscretizedDomain& domain() const { return domain_; }

private:
    const DiscretizedDomain& domain_;
    CompositeLoadParams base_;
    BusMeasurement initial_;
    BusMeasurement operating_;
    std::array<std::size_t, 3> state_dims_{};
    std::vector<std::pair<std::size_t, std::string>> param_dims_;
    mutable std::map<std::vector<std::size_t>, NodeData> cache_;
};

/// Best-effort initialization used on grid nodes: as find_equilibrium, but
/// falls back to the slip of maximal motor power instead of throwing.
ClmGridModel::NodeData initialize_node(const BusMeasurement& meas0, const CompositeLoadParams& params);

std::vector<DriftField> build_clm_drift_fields(const ClmGridModel& model,
                                               const tt::CrossOptions& options = {});

/// One-dimensional generators on n cell-centered nodes with step h. Applied
/// to mu+ p (mu+ >= 0), upwind_right moves mass one node to the right;
/// applied to mu- p (mu- <= 0), upwind_left moves it to the left. Nothing
/// crosses the outer faces, so every column sums to zero.
tt::Matrix upwind_right(std::size_t n, double h);
tt::Matrix upwind_left(std::size_t n, double h);
tt::Matrix second_difference(std::size_t n, double h);

/// A = sum_i [ R_i diag(mu+_i) + L_i diag(mu-_i) + sigma_i D_i ] with R, L
/// the upwind generators and D the second difference of state dimension i;
/// parameter dimensions carry identity factors.
FpOperator assemble_fp_operator(const std::vector<DriftField>& drifts, const DiscretizedDomain& domain,
                                const std::vector<double>& sigma, const AssemblyOptions& options = {});

/// Midpoint-rule weights per dimension.
std::vector<tt::Vector> quadrature_weights(const DiscretizedDomain& domain);
double integral(const tt::TtVector& p, const DiscretizedDomain& domain);

/// Shifted inverse iteration for the density annihilated by A.
StationaryResult stationary_density(const FpOperator& op, const DiscretizedDomain& domain,
                                    const StationarySolveConfig& cfg,
                                    const tt::TtVector* initial = nullptr);

struct BlockSolveOptions {
    double split_epsilon = 0.0;
    /// Relative tolerance of the TT compression of each block and of the sum.
    double round_tolerance = 1e-10;
    std::size_t max_rank = 400;
    /// Largest state grid solved by a sparse factorization.
    std::size_t max_state_points = 250000;
    bool verbose = false;
};

/// Parameter dimensions on which no drift field depends, up to a relative
/// difference of 1e-10.
std::vector<bool> inert_parameters(const std::vector<DriftField>& drifts, const DiscretizedDomain& domain);

/// Sparse generator on the state grid of one parameter node, with the same
/// stencil as assemble_fp_operator. Drift values are given in row-major grid
/// order of the state dimensions.
Eigen::SparseMatrix<double> state_generator(const std::vector<std::vector<double>>& drift,
                                            const DiscretizedDomain& domain, const std::vector<double>& sigma,
                                            double split_epsilon = 0.0);

/// Stationary density of the same operator computed one parameter node at a
/// time. The operator never couples parameter nodes, so each block holds the
/// null vector of its state generator, found by a sparse LU with the
/// normalization in place of one balance row. Blocks repeat along inert
/// parameter dimensions. Each block carries mass 1 / (parameter volume).
StationaryResult block_stationary_density(const std::vector<DriftField>& drifts,
                                          const DiscretizedDomain& domain, const std::vector<double>& sigma,
                                          const BlockSolveOptions& options = {});

struct EvolveOptions {
    tt::AmenOptions amen;
    std::size_t max_rank = 60;
    double round_tolerance = 1e-10;
};

/// Implicit Euler steps (I - dt A) p_{k+1} = p_k, renormalized each step.
tt::TtVector evolve_density(const FpOperator& op, const tt::TtVector& p0, const DiscretizedDomain& domain,
                            double dt, std::size_t steps, const EvolveOptions& options = {});

}  // namespace clmtt
