#include "clmtt/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "clmtt/error.hpp"

namespace clmtt {

using tt::TtVector;
using tt::Vector;

namespace {

std::vector<Vector> midpoint_weights(const DiscretizedDomain& domain) { return quadrature_weights(domain); }

std::vector<double> normalized(std::vector<double> v, double cell) {
    for (double& x : v) x = std::max(x, 0.0);
    const double total = std::accumulate(v.begin(), v.end(), 0.0) * cell;
    if (total > 0.0) {
        for (double& x : v) x /= total;
    }
    return v;
}

std::vector<double> node_coordinates(const DiscretizedDomain& domain, std::size_t d) {
    const auto n = domain.nodes(d);
    return {n.begin(), n.end()};
}

}  // namespace

double MarginalPdf::integral() const { return std::accumulate(density.begin(), density.end(), 0.0) * step; }

MarginalPdf marginal(const TtVector& p, const DiscretizedDomain& domain, std::size_t dim) {
    if (dim >= domain.dim_count()) throw IndexError("marginal: dimension out of range");
    if (p.mode_sizes() != domain.mode_sizes()) throw DimensionError("marginal: density does not match the grid");
    std::vector<bool> keep(domain.dim_count(), false);
    keep[dim] = true;
    const TtVector m = tt::contract(p, midpoint_weights(domain), keep);
    const tt::Core& c = m.core(0);
    std::vector<double> v(c.n());
    for (std::size_t i = 0; i < c.n(); ++i) v[i] = c(0, i, 0);
    MarginalPdf out;
    out.label = domain.dim(dim).label;
    out.coordinates = node_coordinates(domain, dim);
    out.step = domain.step(dim);
    out.density = normalized(std::move(v), out.step);
    return out;
}

JointTable joint_marginal_2d(const TtVector& p, const DiscretizedDomain& domain, std::size_t dim_a,
                             std::size_t dim_b) {
    if (dim_a >= domain.dim_count() || dim_b >= domain.dim_count()) {
        throw IndexError("joint_marginal_2d: dimension out of range");
    }
    if (dim_a == dim_b) throw DomainError("joint_marginal_2d: dimensions must differ");
    if (p.mode_sizes() != domain.mode_sizes()) throw DimensionError("joint_marginal_2d: density does not match the grid");
    std::vector<bool> keep(domain.dim_count(), false);
    keep[dim_a] = keep[dim_b] = true;
    const tt::DenseTensor t = tt::to_dense(tt::contract(p, midpoint_weights(domain), keep));
    const std::size_t na = domain.size(dim_a);
    const std::size_t nb = domain.size(dim_b);
    std::vector<double> v(na * nb);
    for (std::size_t i = 0; i < na; ++i) {
        for (std::size_t j = 0; j < nb; ++j) {
            // Contraction keeps the dimensions in grid order.
            v[i * nb + j] = dim_a < dim_b ? t.data[i * nb + j] : t.data[j * na + i];
        }
    }
    JointTable out;
    out.label_a = domain.dim(dim_a).label;
    out.label_b = domain.dim(dim_b).label;
    out.coord_a = node_coordinates(domain, dim_a);
    out.coord_b = node_coordinates(domain, dim_b);
    out.step_a = domain.step(dim_a);
    out.step_b = domain.step(dim_b);
    out.density = normalized(std::move(v), out.step_a * out.step_b);
    return out;
}

std::vector<ParameterEstimate> argmax_params(const std::vector<MarginalPdf>& marginals, bool refine) {
    if (marginals.empty()) throw DomainError("argmax_params: no marginals");
    std::vector<ParameterEstimate> out;
    for (const auto& m : marginals) {
        if (m.density.empty() || m.density.size() != m.coordinates.size()) {
            throw DimensionError("argmax_params: marginal '" + m.label + "' is malformed");
        }
        std::size_t best = 0;
        for (std::size_t i = 1; i < m.density.size(); ++i) {
            if (m.density[i] > m.density[best]) best = i;
        }
        if (!(m.density[best] > 0.0)) {
            throw DomainError("argmax_params: marginal '" + m.label + "' is degenerate (no positive density)");
        }
        ParameterEstimate e{m.label, best, m.coordinates[best], m.density[best]};
        if (refine && best > 0 && best + 1 < m.density.size()) {
            const double l = m.density[best - 1];
            const double c = m.density[best];
            const double r = m.density[best + 1];
            const double den = l - 2.0 * c + r;
            if (den < 0.0) e.value += std::clamp(0.5 * (l - r) / den, -0.5, 0.5) * m.step;
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<LocalMaximum> local_maxima(const MarginalPdf& m, double min_prominence) {
    if (!(min_prominence >= 0.0)) throw DomainError("local_maxima: prominence must be nonnegative");
    const auto& f = m.density;
    std::vector<LocalMaximum> out;
    for (std::size_t i = 1; i + 1 < f.size(); ++i) {
        if (!(f[i] > f[i - 1] && f[i] > f[i + 1])) continue;
        double left = f[i];
        for (std::size_t k = i; k-- > 0;) {
            if (f[k] > f[i]) break;
            left = std::min(left, f[k]);
        }
        double right = f[i];
        for (std::size_t k = i + 1; k < f.size(); ++k) {
            if (f[k] > f[i]) break;
            right = std::min(right, f[k]);
        }
        const double prominence = f[i] - std::max(left, right);
        if (prominence >= min_prominence) out.push_back({i, m.coordinates[i], f[i], prominence});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const LocalMaximum& a, const LocalMaximum& b) { return a.density > b.density; });
    return out;
}

double concentration_index(const MarginalPdf& m) {
    const std::size_t n = m.density.size();
    if (n <= 1) return 1.0;
    const double total = std::accumulate(m.density.begin(), m.density.end(), 0.0);
    if (!(total > 0.0)) throw DomainError("concentration_index: marginal '" + m.label + "' has no mass");
    double h = 0.0;
    for (double v : m.density) {
        const double q = std::max(v, 0.0) / total;
        if (q > 0.0) h -= q * std::log(q);
    }
    return std::clamp(1.0 - h / std::log(static_cast<double>(n)), 0.0, 1.0);
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> joint_parameter_mode(const TtVector& p, const DiscretizedDomain& domain,
                                              std::size_t max_points) {
    if (p.mode_sizes() != domain.mode_sizes()) throw DimensionError("joint_parameter_mode: density does not match the grid");
    const std::size_t first = domain.state_count();
    if (first == domain.dim_count()) throw DomainError("joint_parameter_mode: grid has no parameter dimension");
    std::size_t points = 1;
    for (std::size_t d = first; d < domain.dim_count(); ++d) {
        points *= domain.size(d);
        if (points > max_points) throw SizeGuardError("joint_parameter_mode: parameter grid too large to scan");
    }
    std::vector<bool> keep(domain.dim_count(), false);
    for (std::size_t d = first; d < domain.dim_count(); ++d) keep[d] = true;
    const tt::DenseTensor dense = tt::to_dense(tt::contract(p, midpoint_weights(domain), keep));
    const auto best = static_cast<std::size_t>(std::max_element(dense.data.begin(), dense.data.end()) - dense.data.begin());
    std::vector<std::size_t> out(dense.shape.size());
    std::size_t rest = best;
    for (std::size_t d = out.size(); d-- > 0;) {
        out[d] = rest % dense.shape[d];
        rest /= dense.shape[d];
    }
    return out;
}

std::pair<TtVector, TtVector> output_fields(const ClmGridModel& model, const BusMeasurement& meas,
                                            const tt::CrossOptions& options) {
    const auto modes = model.domain().mode_sizes();
    auto fp = [&](std::span<const std::size_t> i) { return model.output(i, meas).P; };
    auto fq = [&](std::span<const std::size_t> i) { return model.output(i, meas).Q; };
    return {tt::cross(fp, modes, options).tensor, tt::cross(fq, modes, options).tensor};
}

ConditionedDensity condition_on_output(const TtVector& p, const DiscretizedDomain& domain, const TtVector& out_P,
                                       const TtVector& out_Q, const PowerPair& target,
                                       const ConditioningOptions& options) {
    const std::size_t ns = domain.state_count();
    const std::size_t dc = domain.dim_count();
    if (ns == dc) throw DomainError("condition_on_output: the grid has no parameter dimension");
    if (!(options.tau > 0.0)) throw DomainError("condition_on_output: tau must be positive");
    const auto modes = domain.mode_sizes();
    if (p.mode_sizes() != modes || out_P.mode_sizes() != modes || out_Q.mode_sizes() != modes) {
        throw DimensionError("condition_on_output: tensors do not match the grid");
    }
    const auto w = midpoint_weights(domain);
    std::vector<bool> keep(dc, false);
    for (std::size_t d = ns; d < dc; ++d) keep[d] = true;
    const TtVector mass = tt::contract(p, w, keep);
    const TtVector sum_P = tt::contract_product(p, out_P, w, keep);
    const TtVector sum_Q = tt::contract_product(p, out_Q, w, keep);
    const std::vector<std::size_t> pmodes(modes.begin() + static_cast<std::ptrdiff_t>(ns), modes.end());

    double peak = 0.0;
    {
        const double total = tt::weighted_sum(p, w);
        double vol = 1.0;
        for (std::size_t d = ns; d < dc; ++d) vol *= domain.dim(d).upper - domain.dim(d).lower;
        peak = total / vol;
    }
    const double floor = 1e-12 * std::abs(peak);
    auto ratio = [&](const TtVector& num) {
        return [&](std::span<const std::size_t> i) {
            const double m = mass.entry(i);
            return m > floor ? num.entry(i) / m : 0.0;
        };
    };
    tt::CrossOptions copt = options.cross;
    ConditionedDensity out;
    out.target = target;
    out.expected_P = tt::cross(ratio(sum_P), pmodes, copt).tensor;
    out.expected_Q = tt::cross(ratio(sum_Q), pmodes, copt).tensor;
    const double two_tau2 = 2.0 * options.tau * options.tau;
    auto like = [&](std::span<const std::size_t> i) {
        if (!(mass.entry(i) > floor)) return 0.0;
        const double dp = out.expected_P.entry(i) - target.P;
        const double dq = out.expected_Q.entry(i) - target.Q;
        return std::exp(-(dp * dp + dq * dq) / two_tau2);
    };
    out.likelihood = tt::cross(like, pmodes, copt).tensor;
    auto weight = [&](std::span<const std::size_t> i) {
        const double m = mass.entry(i);
        return m > floor ? std::max(out.likelihood.entry(i), 0.0) / m : 0.0;
    };
    const TtVector wt = tt::cross(weight, pmodes, copt).tensor;

    std::vector<tt::Core> cores;
    for (std::size_t d = 0; d < ns; ++d) {
        tt::Core c(1, modes[d], 1);
        for (std::size_t i = 0; i < modes[d]; ++i) c(0, i, 0) = 1.0;
        cores.push_back(c);
    }
    for (const auto& c : wt.cores()) cores.push_back(c);
    TtVector q = tt::round(tt::hadamard(p, TtVector(cores)), options.round_tolerance);
    const double total = integral(q, domain);
    if (!(total > 0.0) || !std::isfinite(total)) {
        throw DomainError("condition_on_output: no parameter node explains the measured output (increase tau)");
    }
    out.density = tt::scale(q, 1.0 / total);
    return out;
}

PowerPair trailing_mean(std::span<const BusMeasurement> trace, double t_from) {
    double sp = 0.0;
    double sq = 0.0;
    std::size_t n = 0;
    for (const auto& m : trace) {
        if (m.t + 1e-12 < t_from) continue;
        sp += m.P;
        sq += m.Q;
        ++n;
    }
    if (n == 0) throw DomainError("trailing_mean: no samples after t = " + std::to_string(t_from));
    return {sp / static_cast<double>(n), sq / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------

ResponseFit response_from_estimate(const CompositeLoadParams& params, std::span<const BusMeasurement> trace,
                                   const SimulationOptions& options) {
    ResponseFit fit;
    fit.response = simulate_response(trace, params, options);
    fit.rmse = response_rmse(fit.response, trace);
    return fit;
}

MarginalPdf BruteForcePosterior::marginal(std::size_t dim) const {
    if (dim >= labels.size()) throw IndexError("brute force marginal: dimension out of range");
    std::vector<std::size_t> shape;
    for (const auto& c : coordinates) shape.push_back(c.size());
    std::vector<double> v(shape[dim], 0.0);
    double cell = 1.0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (d != dim) cell *= steps[d];
    }
    std::vector<std::size_t> at(shape.size(), 0);
    for (std::size_t lin = 0; lin < density.size(); ++lin) {
        v[at[dim]] += density[lin] * cell;
        for (std::size_t d = shape.size(); d-- > 0;) {
            if (++at[d] < shape[d]) break;
            at[d] = 0;
        }
    }
    MarginalPdf m;
    m.label = labels[dim];
    m.coordinates = coordinates[dim];
    m.step = steps[dim];
    m.density = normalized(std::move(v), m.step);
    return m;
}

std::vector<std::size_t> BruteForcePosterior::mode() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < density.size(); ++i) {
        if (density[i] > density[best]) best = i;
    }
    std::vector<std::size_t> out(coordinates.size());
    for (std::size_t d = coordinates.size(); d-- > 0;) {
        out[d] = best % coordinates[d].size();
        best /= coordinates[d].size();
    }
    return out;
}

BruteForcePosterior brute_force_posterior(const GridSpec& params, std::span<const BusMeasurement> trace,
                                          const CompositeLoadParams& frozen, const BruteForceOptions& options) {
    if (params.dims.empty()) throw DomainError("brute_force_posterior: no free parameter");
    if (params.dims.size() > 3) {
        throw DomainError("brute_force_posterior: " + std::to_string(params.dims.size()) +
                          " free parameters; enumeration is limited to 3, use the density-based "
                          "concentration index for larger sets");
    }
    for (const auto& d : params.dims) {
        if (d.kind != DimensionKind::Parameter) throw DomainError("brute_force_posterior: '" + d.label + "' is not a parameter");
        if (!CompositeLoadParams::is_label(d.label)) throw DomainError("brute_force_posterior: unknown parameter '" + d.label + "'");
    }
    const DiscretizedDomain grid = build_grid(params);
    validate_trace(trace);

    BruteForcePosterior out;
    for (std::size_t d = 0; d < grid.dim_count(); ++d) {
        out.labels.push_back(grid.dim(d).label);
        out.coordinates.push_back(node_coordinates(grid, d));
        out.steps.push_back(grid.step(d));
    }
    auto score = [&](const CompositeLoadParams& q) {
        try {
            const PowerPair r = response_rmse(simulate_response(trace, q, options.simulation), trace);
            return std::hypot(r.P, r.Q);
        } catch (const Error&) {
            return std::numeric_limits<double>::quiet_NaN();
        }
    };
    if (options.tau) {
        out.tau = *options.tau;
    } else if (options.truth) {
        const double r = score(*options.truth);
        if (!std::isfinite(r)) throw DomainError("brute_force_posterior: the truth cannot be simulated on this trace");
        out.tau = r + 0.01;
    } else {
        out.tau = 0.01;
    }
    if (!(out.tau > 0.0)) throw DomainError("brute_force_posterior: tau must be positive");

    const std::size_t total = grid.total_points();
    out.rmse.resize(total);
    out.density.resize(total);
    double cell = 1.0;
    for (double h : out.steps) cell *= h;
    double mass = 0.0;
    for (std::size_t lin = 0; lin < total; ++lin) {
        const auto at = grid.multi_index(lin);
        CompositeLoadParams q = frozen;
        for (std::size_t d = 0; d < at.size(); ++d) q.set(out.labels[d], out.coordinates[d][at[d]]);
        const double r = score(q);
        out.rmse[lin] = r;
        out.density[lin] = std::isfinite(r) ? std::exp(-r * r / (2.0 * out.tau * out.tau)) : 0.0;
        mass += out.density[lin] * cell;
    }
    if (!(mass > 0.0)) throw DomainError("brute_force_posterior: every grid node failed to simulate");
    for (double& v : out.density) v /= mass;
    return out;
}

std::vector<double> variance_indices(const BruteForcePosterior& sweep) {
    const std::size_t nd = sweep.coordinates.size();
    std::vector<std::size_t> shape;
    for (const auto& c : sweep.coordinates) shape.push_back(c.size());
    double sum = 0.0;
    double sum2 = 0.0;
    std::size_t count = 0;
    for (double r : sweep.rmse) {
        if (!std::isfinite(r)) continue;
        sum += r;
        sum2 += r * r;
        ++count;
    }
    std::vector<double> out(nd, 0.0);
    if (count < 2) return out;
    const double mean = sum / static_cast<double>(count);
    const double var = sum2 / static_cast<double>(count) - mean * mean;
    if (!(var > 0.0)) return out;
    for (std::size_t j = 0; j < nd; ++j) {
        std::vector<double> s(shape[j], 0.0);
        std::vector<std::size_t> c(shape[j], 0);
        std::vector<std::size_t> at(nd, 0);
        for (std::size_t lin = 0; lin < sweep.rmse.size(); ++lin) {
            const double r = sweep.rmse[lin];
            if (std::isfinite(r)) {
                s[at[j]] += r;
                ++c[at[j]];
            }
            for (std::size_t d = nd; d-- > 0;) {
                if (++at[d] < shape[d]) break;
                at[d] = 0;
            }
        }
        double between = 0.0;
        for (std::size_t k = 0; k < shape[j]; ++k) {
            if (c[k] == 0) continue;
            const double m = s[k] / static_cast<double>(c[k]);
            between += static_cast<double>(c[k]) * (m - mean) * (m - mean);
        }
        out[j] = std::clamp(between / static_cast<double>(count) / var, 0.0, 1.0);
    }
    return out;
}

}  // namespace clmtt
