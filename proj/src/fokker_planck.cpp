#include "clmtt/fokker_planck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/SparseLU>

#include "clmtt/error.hpp"

namespace clmtt {

using tt::Matrix;
using tt::TtMatrix;
using tt::TtVector;
using tt::Vector;

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

double motor_torque(const MotorState& x, const MotorCurrents& i) { return x.v_d * i.i_d + x.v_q * i.i_q; }

}  // namespace

// ---------------------------------------------------------------------------

ClmGridModel::NodeData initialize_node(const BusMeasurement& meas0, const CompositeLoadParams& params) {
    ClmGridModel::NodeData out;
    out.params = params;
    try {
        const Equilibrium eq = find_equilibrium(meas0, params);
        out.baseline = eq.baseline;
        return out;
    } catch (const InfeasibleInitializationError&) {
        out.feasible = false;
    }
    const DqVoltage dq = dq_transform(meas0, params.r_s, params.X_s);
    const double xp = transient_reactance(params);
    double best_s = 0.0;
    double best_p = -std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 2000; ++k) {
        const double s = 0.999 * k / 2000.0;
        const MotorState x = flux_equilibrium(s, dq, params);
        const double p = im_power(dq, im_currents(x, dq, params.r_s, xp)).P;
        if (p > best_p) {
            best_p = p;
            best_s = s;
        }
    }
    const MotorState x = flux_equilibrium(best_s, dq, params);
    const MotorCurrents i = im_currents(x, dq, params.r_s, xp);
    const PowerPair im = im_power(dq, i);
    out.baseline.V0 = meas0.V;
    out.baseline.T_m0 = std::max(0.0, motor_torque(x, i) / ((1.0 - best_s) * (1.0 - best_s)));
    out.baseline.P_zip0 = meas0.P;
    out.baseline.Q_zip0 = meas0.Q;
    if (params.omega > 0.0) {
        out.baseline.P_zip0 = (meas0.P - (1.0 - params.omega) * im.P) / params.omega;
        out.baseline.Q_zip0 = (meas0.Q - (1.0 - params.omega) * im.Q) / params.omega;
    }
    return out;
}

const std::array<std::string, 3>& ClmGridModel::state_labels() {
    static const std::array<std::string, 3> labels{"v_d", "v_q", "s"};
    return labels;
}

ClmGridModel::ClmGridModel(const DiscretizedDomain& domain, CompositeLoadParams base,
                           BusMeasurement initial, BusMeasurement operating)
    : domain_(domain), base_(base), initial_(initial), operating_(operating) {
    for (std::size_t i = 0; i < 3; ++i) {
        if (!domain.contains(state_labels()[i])) {
            throw DomainError("grid is missing state dimension '" + state_labels()[i] + "'");
        }
        state_dims_[i] = domain.find(state_labels()[i]);
        if (domain.dim(state_dims_[i]).kind != DimensionKind::State) {
            throw DomainError("dimension '" + state_labels()[i] + "' must be a state");
        }
    }
    if (domain.state_count() != 3) throw DomainError("the load model has exactly three states");
    for (std::size_t d = 0; d < domain.dim_count(); ++d) {
        if (domain.dim(d).kind != DimensionKind::Parameter) continue;
        const std::string& label = domain.dim(d).label;
        if (!CompositeLoadParams::is_label(label)) throw DomainError("unknown parameter label '" + label + "'");
        param_dims_.emplace_back(d, label);
    }
}

CompositeLoadParams ClmGridModel::params_at(std::span<const std::size_t> index) const {
    CompositeLoadParams p = base_;
    for (const auto& [d, label] : param_dims_) p.set(label, domain_.coordinate(d, index[d]));
    return p;
}

MotorState ClmGridModel::state_at(std::span<const std::size_t> index) const {
    return {domain_.coordinate(state_dims_[0], index[state_dims_[0]]),
            domain_.coordinate(state_dims_[1], index[state_dims_[1]]),
            domain_.coordinate(state_dims_[2], index[state_dims_[2]])};
}

const ClmGridModel::NodeData& ClmGridModel::node(std::span<const std::size_t> index) const {
    std::vector<std::size_t> key;
    key.reserve(param_dims_.size());
    for (const auto& pd : param_dims_) key.push_back(index[pd.first]);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(std::move(key), initialize_node(initial_, params_at(index))).first->second;
}

double ClmGridModel::drift(std::size_t state, std::span<const std::size_t> index) const {
    const NodeData& nd = node(index);
    const MotorDerivatives d = motor_drift(state_at(index), operating_, nd.params, nd.baseline.T_m0);
    return state == 0 ? d.dv_d : state == 1 ? d.dv_q : d.ds;
}

PowerPair ClmGridModel::output(std::span<const std::size_t> index, const BusMeasurement& meas) const {
    const NodeData& nd = node(index);
    return model_output(state_at(index), meas, nd.params, nd.baseline);
}

// ---------------------------------------------------------------------------

DriftField build_drift_field(const PointFunction& f, const DiscretizedDomain& domain, std::size_t dim,
                             const tt::CrossOptions& options) {
    if (dim >= domain.dim_count() || domain.dim(dim).kind != DimensionKind::State) {
        throw IndexError("build_drift_field: dimension is not a state");
    }
    const std::size_t d = domain.dim_count();
    auto g = [&](std::span<const std::size_t> i) {
        double x[64];
        for (std::size_t k = 0; k < d; ++k) x[k] = domain.coordinate(k, i[k]);
        return f(std::span<const double>(x, d));
    };
    const auto modes = domain.mode_sizes();
    tt::CrossResult r = tt::cross(g, modes, options);
    return {domain.dim(dim).label, dim, std::move(r.tensor), r.sampled_error};
}

std::vector<DriftField> build_clm_drift_fields(const ClmGridModel& model, const tt::CrossOptions& options) {
    const auto& domain = model.domain();
    const auto modes = domain.mode_sizes();
    std::vector<DriftField> out;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t dim = domain.find(ClmGridModel::state_labels()[i]);
        auto f = [&](std::span<const std::size_t> index) { return model.drift(i, index); };
        tt::CrossResult r = tt::cross(f, modes, options);
        out.push_back({ClmGridModel::state_labels()[i], dim, std::move(r.tensor), r.sampled_error});
    }
    return out;
}

// ---------------------------------------------------------------------------

Matrix upwind_right(std::size_t n, double h) {
    Matrix m = Matrix::Zero(idx(n), idx(n));
    for (std::size_t j = 0; j + 1 < n; ++j) {
        m(idx(j), idx(j)) = -1.0 / h;
        m(idx(j + 1), idx(j)) = 1.0 / h;
    }
    return m;
}

Matrix upwind_left(std::size_t n, double h) {
    Matrix m = Matrix::Zero(idx(n), idx(n));
    for (std::size_t j = 1; j < n; ++j) {
        m(idx(j), idx(j)) = 1.0 / h;
        m(idx(j - 1), idx(j)) = -1.0 / h;
    }
    return m;
}

Matrix second_difference(std::size_t n, double h) {
    Matrix m = Matrix::Zero(idx(n), idx(n));
    const double c = 1.0 / (h * h);
    for (std::size_t j = 0; j + 1 < n; ++j) {
        m(idx(j), idx(j)) -= c;
        m(idx(j + 1), idx(j)) += c;
        m(idx(j + 1), idx(j + 1)) -= c;
        m(idx(j), idx(j + 1)) += c;
    }
    return m;
}

namespace {

TtMatrix single_dim_operator(const DiscretizedDomain& domain, std::size_t dim, const Matrix& m) {
    std::vector<Matrix> f;
    for (std::size_t k = 0; k < domain.dim_count(); ++k) {
        f.push_back(k == dim ? m : Matrix(Matrix::Identity(idx(domain.size(k)), idx(domain.size(k)))));
    }
    return TtMatrix::kronecker(f);
}

TtVector split_part(const TtVector& mu, double eps, bool positive, const tt::CrossOptions& opt) {
    const auto modes = mu.mode_sizes();
    auto f = [&](std::span<const std::size_t> i) {
        const double v = mu.entry(i);
        const double r = eps > 0.0 ? std::sqrt(v * v + eps * eps) : std::abs(v);
        return positive ? 0.5 * (v + r) : 0.5 * (v - r);
    };
    return tt::cross(f, modes, opt).tensor;
}

}  // namespace

FpOperator assemble_fp_operator(const std::vector<DriftField>& drifts, const DiscretizedDomain& domain,
                                const std::vector<double>& sigma, const AssemblyOptions& options) {
    const std::size_t ns = domain.state_count();
    if (drifts.size() != ns) throw DimensionError("assemble_fp_operator: need one drift per state dimension");
    if (sigma.size() != ns) throw DimensionError("assemble_fp_operator: need one diffusion value per state dimension");
    for (double s : sigma) {
        if (!(s >= 0.0)) throw DomainError("assemble_fp_operator: diffusion must be nonnegative");
    }
    const auto modes = domain.mode_sizes();
    tt::CrossOptions copt;
    copt.tolerance = options.cross_tolerance;
    copt.seed = options.seed;
    copt.max_rank = options.max_rank;

    TtMatrix sum;
    bool have = false;
    auto accumulate = [&](const TtMatrix& term) {
        sum = have ? tt::round(tt::add(sum, term), options.round_tolerance) : term;
        have = true;
    };
    for (const auto& field : drifts) {
        if (field.values.mode_sizes() != modes) throw DimensionError("assemble_fp_operator: drift does not match the grid");
        const std::size_t d = field.dim;
        const double h = domain.step(d);
        const std::size_t n = domain.size(d);
        TtVector plus = split_part(field.values, options.split_epsilon, true, copt);
        TtVector minus = split_part(field.values, options.split_epsilon, false, copt);
        accumulate(tt::compose(single_dim_operator(domain, d, upwind_right(n, h)), TtMatrix::diagonal(plus)));
        accumulate(tt::compose(single_dim_operator(domain, d, upwind_left(n, h)), TtMatrix::diagonal(minus)));
    }
    for (std::size_t d = 0; d < ns; ++d) {
        if (sigma[d] == 0.0) continue;
        accumulate(tt::scale(single_dim_operator(domain, d, second_difference(domain.size(d), domain.step(d))), sigma[d]));
    }
    if (!have) accumulate(tt::scale(TtMatrix::identity(modes), 0.0));
    if (sum.max_rank() > options.max_rank) {
        throw RankOverflowError("assemble_fp_operator: operator rank " + std::to_string(sum.max_rank()) +
                                " exceeds the limit " + std::to_string(options.max_rank));
    }
    FpOperator op;
    op.matrix = std::move(sum);
    op.sigma = sigma;
    op.split_epsilon = options.split_epsilon;
    return op;
}

// ---------------------------------------------------------------------------

std::vector<Vector> quadrature_weights(const DiscretizedDomain& domain) {
    std::vector<Vector> w;
    for (std::size_t d = 0; d < domain.dim_count(); ++d) {
        w.push_back(Vector::Constant(idx(domain.size(d)), domain.step(d)));
    }
    return w;
}

double integral(const TtVector& p, const DiscretizedDomain& domain) {
    return tt::weighted_sum(p, quadrature_weights(domain));
}

namespace {

double rayleigh(const TtMatrix& a, const TtVector& p) {
    const double pp = tt::dot(p, p);
    return pp == 0.0 ? 0.0 : tt::bilinear(p, a, p) / pp;
}

TtVector clamp_negative(const TtVector& p, double threshold, const tt::CrossOptions& opt) {
    const auto modes = p.mode_sizes();
    auto f = [&](std::span<const std::size_t> i) {
        const double v = p.entry(i);
        return v < threshold ? 0.0 : std::max(v, 0.0);
    };
    return tt::cross(f, modes, opt).tensor;
}

double max_abs_sampled(const TtVector& p, std::size_t samples, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto modes = p.mode_sizes();
    std::vector<std::size_t> i(modes.size());
    double m = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t k = 0; k < modes.size(); ++k) {
            i[k] = std::uniform_int_distribution<std::size_t>(0, modes[k] - 1)(rng);
        }
        m = std::max(m, std::abs(p.entry(i)));
    }
    return m;
}

}  // namespace

StationaryResult stationary_density(const FpOperator& op, const DiscretizedDomain& domain,
                                    const StationarySolveConfig& cfg, const TtVector* initial) {
    if (!(cfg.tolerance > 0.0)) throw DomainError("stationary_density: tolerance must be positive");
    if (!(cfg.shift > 0.0)) throw DomainError("stationary_density: shift must be positive");
    const auto modes = domain.mode_sizes();
    const TtMatrix& a = op.matrix;
    if (a.row_sizes() != modes) throw DimensionError("stationary_density: operator does not match the grid");

    TtMatrix shifted = tt::add(a, tt::scale(TtMatrix::identity(modes), -cfg.shift));
    TtVector p = initial ? *initial : TtVector::constant(modes, 1.0);
    p = tt::scale(p, 1.0 / integral(p, domain));

    StationaryResult result;
    double lambda = rayleigh(a, p);
    tt::AmenOptions amen = cfg.amen;
    amen.max_rank = cfg.max_rank;
    for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
        TtVector guess = tt::scale(p, -1.0 / cfg.shift);
        tt::AmenResult solve = tt::amen_solve(shifted, p, amen, &guess);
        result.solves.push_back(solve.report);
        TtVector y = tt::round(solve.x, 1e-2 * amen.tolerance, cfg.max_rank);
        const double mass = integral(y, domain);
        if (mass == 0.0 || !std::isfinite(mass)) throw ConvergenceError("stationary_density: iterate lost its mass");
        p = tt::scale(y, 1.0 / mass);
        const double next = rayleigh(a, p);
        result.iterations = it + 1;
        if (cfg.verbose) {
            std::fprintf(stderr, "stationary iteration=%zu eigenvalue=%.3e solve_residual=%.3e max_rank=%zu\n",
                         it + 1, next, solve.report.residual, p.max_rank());
        }
        const double change = std::abs(next - lambda);
        lambda = next;
        if (change < cfg.tolerance) break;
        if (it + 1 == cfg.max_iterations) {
            throw ConvergenceError("stationary_density: no convergence after " + std::to_string(it + 1) +
                                   " iterations (eigenvalue change " + std::to_string(change) + ")");
        }
    }
    if (cfg.clamp_negative) {
        const double peak = max_abs_sampled(p, 2000, amen.seed);
        tt::CrossOptions copt;
        copt.tolerance = std::max(1e-10, amen.tolerance);
        copt.max_rank = cfg.max_rank;
        copt.seed = amen.seed;
        p = clamp_negative(p, -1e-8 * peak, copt);
        p = tt::scale(p, 1.0 / integral(p, domain));
    }
    result.density = p;
    result.eigenvalue = rayleigh(a, p);
    result.residual = tt::norm(tt::matvec_round(a, p, 1e-10)) / tt::norm(p);
    result.max_rank = p.max_rank();
    return result;
}

TtVector evolve_density(const FpOperator& op, const TtVector& p0, const DiscretizedDomain& domain, double dt,
                        std::size_t steps, const EvolveOptions& options) {
    if (!(dt > 0.0)) throw DomainError("evolve_density: dt must be positive");
    const auto modes = domain.mode_sizes();
    TtMatrix step = tt::add(TtMatrix::identity(modes), tt::scale(op.matrix, -dt));
    TtVector p = tt::scale(p0, 1.0 / integral(p0, domain));
    tt::AmenOptions amen = options.amen;
    amen.max_rank = options.max_rank;
    for (std::size_t k = 0; k < steps; ++k) {
        tt::AmenResult r = tt::amen_solve(step, p, amen, &p);
        p = tt::round(r.x, options.round_tolerance, options.max_rank);
        p = tt::scale(p, 1.0 / integral(p, domain));
    }
    return p;
}

}  // namespace clmtt

// ---------------------------------------------------------------------------

namespace clmtt {

std::vector<bool> inert_parameters(const std::vector<DriftField>& drifts, const DiscretizedDomain& domain) {
    std::vector<bool> inert(domain.dim_count(), false);
    for (std::size_t k = domain.state_count(); k < domain.dim_count(); ++k) {
        bool same = true;
        for (const auto& f : drifts) {
            // Replace every slice of core k by the mean slice and compare.
            std::vector<tt::Core> cores = f.values.cores();
            tt::Core& c = cores[k];
            Matrix mean = Matrix::Zero(idx(c.r0()), idx(c.r1()));
            for (std::size_t i = 0; i < c.n(); ++i) mean += c.slice(i);
            mean /= static_cast<double>(c.n());
            for (std::size_t i = 0; i < c.n(); ++i) c.set_slice(i, mean);
            const double scale = tt::norm(f.values);
            const double diff = tt::norm(tt::add(f.values, tt::scale(TtVector(cores), -1.0)));
            if (diff > 1e-10 * scale) {
                same = false;
                break;
            }
        }
        inert[k] = same;
    }
    return inert;
}

Eigen::SparseMatrix<double> state_generator(const std::vector<std::vector<double>>& drift,
                                            const DiscretizedDomain& domain, const std::vector<double>& sigma,
                                            double split_epsilon) {
    const std::size_t ns = domain.state_count();
    if (drift.size() != ns || sigma.size() != ns) throw DimensionError("state_generator: need one drift and diffusion per state");
    std::vector<std::size_t> stride(ns, 1);
    std::size_t total = 1;
    for (std::size_t d = ns; d-- > 0;) {
        stride[d] = total;
        total *= domain.size(d);
    }
    for (const auto& mu : drift) {
        if (mu.size() != total) throw DimensionError("state_generator: drift does not match the state grid");
    }
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(total * ns * 4);
    for (std::size_t j = 0; j < total; ++j) {
        for (std::size_t d = 0; d < ns; ++d) {
            const std::size_t i = (j / stride[d]) % domain.size(d);
            const std::size_t n = domain.size(d);
            const double h = domain.step(d);
            const double v = drift[d][j];
            const double r = split_epsilon > 0.0 ? std::sqrt(v * v + split_epsilon * split_epsilon) : std::abs(v);
            const double plus = 0.5 * (v + r);
            const double minus = 0.5 * (v - r);
            const double diff = sigma[d] / (h * h);
            const auto c = static_cast<int>(j);
            if (i + 1 < n) {
                const auto up = static_cast<int>(j + stride[d]);
                trip.emplace_back(c, c, -plus / h - diff);
                trip.emplace_back(up, c, plus / h + diff);
            }
            if (i > 0) {
                const auto dn = static_cast<int>(j - stride[d]);
                trip.emplace_back(c, c, minus / h - diff);
                trip.emplace_back(dn, c, -minus / h + diff);
            }
        }
    }
    Eigen::SparseMatrix<double> a(idx(total), idx(total));
    a.setFromTriplets(trip.begin(), trip.end());
    return a;
}

StationaryResult block_stationary_density(const std::vector<DriftField>& drifts, const DiscretizedDomain& domain,
                                          const std::vector<double>& sigma, const BlockSolveOptions& options) {
    const std::size_t ns = domain.state_count();
    const std::size_t dc = domain.dim_count();
    if (drifts.size() != ns) throw DimensionError("block_stationary_density: need one drift per state dimension");
    if (sigma.size() != ns) throw DimensionError("block_stationary_density: need one diffusion value per state dimension");
    for (double s : sigma) {
        if (!(s >= 0.0)) throw DomainError("block_stationary_density: diffusion must be nonnegative");
    }
    const auto modes = domain.mode_sizes();
    std::vector<DriftField> order(ns);
    for (const auto& f : drifts) {
        if (f.values.mode_sizes() != modes) throw DimensionError("block_stationary_density: drift does not match the grid");
        if (f.dim >= ns) throw DimensionError("block_stationary_density: drift dimension is not a state");
        order[f.dim] = f;
    }
    std::size_t state_points = 1;
    double state_cell = 1.0;
    for (std::size_t d = 0; d < ns; ++d) {
        state_points *= domain.size(d);
        state_cell *= domain.step(d);
    }
    if (state_points > options.max_state_points) {
        throw DomainError("block_stationary_density: state grid of " + std::to_string(state_points) +
                          " points exceeds the limit " + std::to_string(options.max_state_points));
    }
    double param_volume = 1.0;
    for (std::size_t d = ns; d < dc; ++d) param_volume *= domain.dim(d).upper - domain.dim(d).lower;

    const std::vector<bool> inert = inert_parameters(order, domain);
    std::vector<std::size_t> free_dims;
    for (std::size_t d = ns; d < dc; ++d) {
        if (!inert[d]) free_dims.push_back(d);
    }
    std::vector<std::size_t> state_modes(modes.begin(), modes.begin() + static_cast<std::ptrdiff_t>(ns));
    std::vector<bool> keep(dc, false);
    for (std::size_t d = 0; d < ns; ++d) keep[d] = true;

    StationaryResult result;
    TtVector sum;
    bool have = false;
    double res_num = 0.0;
    double res_den = 0.0;
    std::vector<std::size_t> at(free_dims.size(), 0);
    for (;;) {
        std::vector<Vector> pick(dc);
        for (std::size_t d = 0; d < ns; ++d) pick[d] = Vector::Ones(idx(modes[d]));
        for (std::size_t d = ns; d < dc; ++d) {
            pick[d] = Vector::Zero(idx(modes[d]));
            pick[d][0] = 1.0;
        }
        for (std::size_t q = 0; q < free_dims.size(); ++q) {
            pick[free_dims[q]].setZero();
            pick[free_dims[q]][idx(at[q])] = 1.0;
        }
        std::vector<std::vector<double>> mu(ns);
        for (std::size_t d = 0; d < ns; ++d) {
            TtVector block = tt::contract(order[d].values, pick, keep);
            mu[d] = tt::to_dense(block).data;
        }
        const Eigen::SparseMatrix<double> a = state_generator(mu, domain, sigma, options.split_epsilon);

        // Columns of a sum to zero, so the first balance row is redundant and
        // is replaced by the normalization.
        Eigen::SparseMatrix<double> m = a;
        for (int k = 0; k < m.outerSize(); ++k) {
            for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it) {
                if (it.row() == 0) it.valueRef() = 0.0;
            }
        }
        m.prune(0.0);
        std::vector<Eigen::Triplet<double>> ones;
        for (std::size_t j = 0; j < state_points; ++j) ones.emplace_back(0, static_cast<int>(j), 1.0);
        Eigen::SparseMatrix<double> norm_row(idx(state_points), idx(state_points));
        norm_row.setFromTriplets(ones.begin(), ones.end());
        m += norm_row;
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
        lu.compute(m);
        if (lu.info() != Eigen::Success) {
            throw ConvergenceError("block_stationary_density: singular state generator (is every node reachable?)");
        }
        Vector rhs = Vector::Zero(idx(state_points));
        rhs[0] = 1.0;
        Vector p = lu.solve(rhs);
        if (lu.info() != Eigen::Success || !p.allFinite()) {
            throw ConvergenceError("block_stationary_density: sparse solve failed");
        }
        p = p.cwiseMax(0.0);
        p /= p.sum() * state_cell;
        const Vector ap = a * p;
        const double pn = p.squaredNorm();
        if (pn > 0.0) result.eigenvalue = std::max(result.eigenvalue, std::abs(p.dot(ap)) / pn);

        double copies = 1.0;
        for (std::size_t d = ns; d < dc; ++d) {
            if (inert[d]) copies *= static_cast<double>(modes[d]);
        }
        res_num += copies * ap.squaredNorm();
        res_den += copies * pn;

        tt::DenseTensor dense(state_modes);
        std::copy(p.data(), p.data() + p.size(), dense.data.begin());
        std::vector<tt::Core> cores = tt::from_dense(dense, options.round_tolerance).cores();
        for (std::size_t d = ns; d < dc; ++d) {
            tt::Core c(1, modes[d], 1);
            for (std::size_t i = 0; i < modes[d]; ++i) c(0, i, 0) = inert[d] ? 1.0 : pick[d][idx(i)];
            cores.push_back(c);
        }
        TtVector term = tt::scale(TtVector(cores), 1.0 / param_volume);
        sum = have ? tt::round(tt::add(sum, term), options.round_tolerance, options.max_rank) : term;
        have = true;
        ++result.iterations;
        if (options.verbose) {
            std::fprintf(stderr, "block=%zu residual=%.3e max_rank=%zu\n", result.iterations,
                         std::sqrt(ap.squaredNorm() / std::max(pn, std::numeric_limits<double>::min())),
                         sum.max_rank());
        }

        std::size_t q = 0;
        for (; q < free_dims.size(); ++q) {
            if (++at[q] < modes[free_dims[q]]) break;
            at[q] = 0;
        }
        if (q == free_dims.size()) break;
    }
    result.density = std::move(sum);
    result.residual = res_den > 0.0 ? std::sqrt(res_num / res_den) : 0.0;
    result.max_rank = result.density.max_rank();
    return result;
}

}  // namespace clmtt
