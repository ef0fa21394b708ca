#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "clmtt/tt.hpp"

namespace clmtt::tt {

/// Black-box tensor entry as a function of a grid multi-index.
using IndexFunction = std::function<double(std::span<const std::size_t>)>;

struct CrossOptions {
    double tolerance = 1e-8;
    std::size_t max_rank = 64;
    std::size_t max_sweeps = 12;
    std::size_t initial_rank = 2;
    /// Directions kept beyond the truncation rank at each supercore.
    std::size_t kick_rank = 2;
    std::size_t verify_samples = 1000;
    std::uint64_t seed = 20240611;
};

struct CrossResult {
    TtVector tensor;
    /// ||f - t|| / ||f|| over the verification sample.
    double sampled_error = 0.0;
    std::size_t evaluations = 0;
    std::size_t sweeps = 0;
};

/// Row indices of a quasi-maximal-volume r x r submatrix of a tall m x r
/// matrix.
std::vector<std::size_t> maxvol(const Matrix& a, double tolerance = 1.02,
                                std::size_t max_iterations = 200);

/// Alternating two-site cross interpolation: each supercore is sampled on the
/// current index sets, truncated by SVD, and new nested index sets are chosen
/// by maxvol. Stops once the sampled error on random entries drops below the
/// tolerance. Throws EvaluationError on a non-finite sample.
CrossResult cross(const IndexFunction& f, std::span<const std::size_t> modes,
                  const CrossOptions& options = {});

/// Relative Frobenius error of `t` against `f` over `samples` random entries.
double sampled_error(const IndexFunction& f, const TtVector& t, std::size_t samples,
                     std::uint64_t seed);

}  // namespace clmtt::tt
