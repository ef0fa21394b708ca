#pragma once

#include <cstdint>
#include <vector>

#include "clmtt/tt.hpp"

namespace clmtt::tt {

struct AmenOptions {
    double tolerance = 1e-6;
    std::size_t max_sweeps = 20;
    std::size_t max_rank = 64;
    /// Rank of the residual approximation used to enrich the solution.
    std::size_t kick_rank = 4;
    /// Local systems up to this size are solved by dense LU; larger ones by
    /// restarted GMRES with a Jacobi preconditioner.
    std::size_t local_dense_limit = 1200;
    std::size_t gmres_restart = 40;
    std::size_t gmres_max_iterations = 600;
    std::uint64_t seed = 20240611;
    /// Throw ConvergenceError when the rank cap is hit and the final residual
    /// exceeds 100 x tolerance.
    bool throw_on_rank_cap = true;
};

struct SolveReport {
    double residual = 0.0;
    std::size_t sweeps = 0;
    std::size_t max_rank = 0;
    bool converged = false;
    /// Residual of the returned iterate after each sweep (never increases,
    /// since the best iterate is kept).
    std::vector<double> residual_history;
};

struct AmenResult {
    TtVector x;
    SolveReport report;
};

/// Solves A x = b by alternating minimal energy sweeps with residual-based
/// enrichment. `x0` seeds the iteration when given.
AmenResult amen_solve(const TtMatrix& a, const TtVector& b, const AmenOptions& options = {},
                      const TtVector* x0 = nullptr);

/// x^T A y without forming A y.
double bilinear(const TtVector& x, const TtMatrix& a, const TtVector& y);

/// ||A x - b|| / ||b||, evaluated in TT arithmetic.
double relative_residual(const TtMatrix& a, const TtVector& x, const TtVector& b);

}  // namespace clmtt::tt
