#include "clmtt/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "clmtt/error.hpp"

namespace clmtt {

std::size_t GridSpec::state_count() const {
    return static_cast<std::size_t>(std::count_if(
        dims.begin(), dims.end(), [](const auto& d) { return d.kind == DimensionKind::State; }));
}

std::size_t GridSpec::parameter_count() const { return dims.size() - state_count(); }

void GridSpec::validate() const {
    if (dims.empty()) throw DomainError("grid has no dimensions");
    std::set<std::string> seen;
    for (const auto& d : dims) {
        if (d.label.empty()) throw DomainError("grid dimension without label");
        if (!seen.insert(d.label).second) {
            throw DomainError("duplicate grid label '" + d.label + "'");
        }
        if (!std::isfinite(d.lower) || !std::isfinite(d.upper) || !(d.lower < d.upper)) {
            throw DomainError("invalid range for '" + d.label + "': lower bound must be below upper");
        }
        if (d.nodes < 2) throw DomainError("dimension '" + d.label + "' needs at least 2 nodes");
    }
    if (parameter_count() > 11) throw DomainError("at most 11 parameter dimensions are supported");
}

DiscretizedDomain::DiscretizedDomain(GridSpec spec) {
    spec.validate();
    std::stable_partition(spec.dims.begin(), spec.dims.end(),
                          [](const auto& d) { return d.kind == DimensionKind::State; });
    spec_ = std::move(spec);
    state_count_ = spec_.state_count();
    for (const auto& d : spec_.dims) {
        const double h = (d.upper - d.lower) / static_cast<double>(d.nodes);
        std::vector<double> x(d.nodes);
        for (std::size_t k = 0; k < d.nodes; ++k) {
            x[k] = d.lower + (static_cast<double>(k) + 0.5) * h;
        }
        nodes_.push_back(std::move(x));
        steps_.push_back(h);
    }
}

std::vector<std::size_t> DiscretizedDomain::mode_sizes() const {
    std::vector<std::size_t> n;
    n.reserve(nodes_.size());
    for (const auto& x : nodes_) n.push_back(x.size());
    return n;
}

std::size_t DiscretizedDomain::find(const std::string& label) const {
    for (std::size_t d = 0; d < spec_.dims.size(); ++d) {
        if (spec_.dims[d].label == label) return d;
    }
    throw IndexError("grid has no dimension '" + label + "'");
}

bool DiscretizedDomain::contains(const std::string& label) const {
    return std::any_of(spec_.dims.begin(), spec_.dims.end(),
                       [&](const auto& d) { return d.label == label; });
}

std::size_t DiscretizedDomain::total_points() const {
    std::size_t total = 1;
    for (const auto& x : nodes_) {
        if (total > std::numeric_limits<std::size_t>::max() / x.size()) {
            return std::numeric_limits<std::size_t>::max();
        }
        total *= x.size();
    }
    return total;
}

double DiscretizedDomain::total_points_real() const {
    double total = 1.0;
    for (const auto& x : nodes_) total *= static_cast<double>(x.size());
    return total;
}

double DiscretizedDomain::volume() const {
    double v = 1.0;
    for (const auto& d : spec_.dims) v *= d.upper - d.lower;
    return v;
}

std::size_t DiscretizedDomain::linear_index(std::span<const std::size_t> multi) const {
    if (multi.size() != nodes_.size()) throw IndexError("multi-index has wrong length");
    std::size_t linear = 0;
    for (std::size_t d = 0; d < multi.size(); ++d) {
        if (multi[d] >= nodes_[d].size()) {
            throw IndexError("index " + std::to_string(multi[d]) + " out of range in dimension '" +
                             spec_.dims[d].label + "'");
        }
        linear = linear * nodes_[d].size() + multi[d];
    }
    return linear;
}

std::vector<std::size_t> DiscretizedDomain::multi_index(std::size_t linear) const {
    if (linear >= total_points()) throw IndexError("linear index out of range");
    std::vector<std::size_t> multi(nodes_.size());
    for (std::size_t d = nodes_.size(); d-- > 0;) {
        multi[d] = linear % nodes_[d].size();
        linear /= nodes_[d].size();
    }
    return multi;
}

DiscretizedDomain build_grid(const GridSpec& spec) { return DiscretizedDomain(spec); }

double quadrature_weight(const DiscretizedDomain& domain, std::size_t dim) {
    if (dim >= domain.dim_count()) throw IndexError("quadrature_weight: dimension out of range");
    return domain.step(dim);
}

}  // namespace clmtt
