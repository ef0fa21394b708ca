#pragma once

// Tensor-product discretization of the joint state/parameter domain.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace clmtt {

enum class DimensionKind { State, Parameter };

struct DimensionSpec {
    std::string label;
    double lower = 0.0;
    double upper = 1.0;
    std::size_t nodes = 2;
    DimensionKind kind = DimensionKind::Parameter;
};

struct GridSpec {
    std::vector<DimensionSpec> dims;

    std::size_t state_count() const;
    std::size_t parameter_count() const;

    /// Throws DomainError on empty or reversed ranges, too few nodes, duplicate
    /// labels or more than 11 parameter dimensions.
    void validate() const;
};

/// Cell-centered grid: node k of a dimension sits at l + (k + 1/2) h with
/// h = (u - l) / nodes. States precede parameters.
class DiscretizedDomain {
public:
    DiscretizedDomain() = default;
    explicit DiscretizedDomain(GridSpec spec);

    std::size_t dim_count() const { return spec_.dims.size(); }
    std::size_t state_count() const { return state_count_; }
    std::size_t parameter_count() const { return dim_count() - state_count_; }

    const GridSpec& spec() const { return spec_; }
    const DimensionSpec& dim(std::size_t d) const { return spec_.dims.at(d); }
    std::span<const double> nodes(std::size_t d) const { return nodes_.at(d); }
    std::size_t size(std::size_t d) const { return nodes_.at(d).size(); }
    std::vector<std::size_t> mode_sizes() const;
    double step(std::size_t d) const { return steps_.at(d); }
    double coordinate(std::size_t d, std::size_t k) const { return nodes_.at(d).at(k); }

    /// Dimension index for a label; throws IndexError if absent.
    std::size_t find(const std::string& label) const;
    bool contains(const std::string& label) const;

    /// Product of node counts. Saturates at SIZE_MAX.
    std::size_t total_points() const;
    /// Product of node counts as a floating value, for reporting huge grids.
    double total_points_real() const;
    double volume() const;

    std::size_t linear_index(std::span<const std::size_t> multi) const;
    std::vector<std::size_t> multi_index(std::size_t linear) const;

private:
    GridSpec spec_;
    std::size_t state_count_ = 0;
    std::vector<std::vector<double>> nodes_;
    std::vector<double> steps_;
};

DiscretizedDomain build_grid(const GridSpec& spec);

/// Midpoint-rule weight of one node in dimension `dim`.
double quadrature_weight(const DiscretizedDomain& domain, std::size_t dim);

}  // namespace clmtt
