#include "clmtt/load_model.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clmtt/error.hpp"

namespace clmtt {

namespace {

constexpr std::array<std::string_view, CompositeLoadParams::kCount> kLabels = {
    "a_p", "b_p", "a_q", "b_q", "r_s", "X_s", "r_r", "X_r", "X_m", "H", "omega"};

constexpr std::array<std::string_view, 3> kStateNames = {"v_d", "v_q", "s"};

double& field(CompositeLoadParams& p, std::size_t i) {
    switch (i) {
        case 0: return p.a_p;
        case 1: return p.b_p;
        case 2: return p.a_q;
        case 3: return p.b_q;
        case 4: return p.r_s;
        case 5: return p.X_s;
        case 6: return p.r_r;
        case 7: return p.X_r;
        case 8: return p.X_m;
        case 9: return p.H;
        default: return p.omega;
    }
}

std::size_t label_index(std::string_view label) {
    for (std::size_t i = 0; i < kLabels.size(); ++i) {
        if (kLabels[i] == label) return i;
    }
    throw DomainError("unknown parameter label '" + std::string(label) + "'");
}

BusMeasurement interpolate(const BusMeasurement& a, const BusMeasurement& b, double frac) {
    BusMeasurement m;
    m.t = a.t + frac * (b.t - a.t);
    m.V = a.V + frac * (b.V - a.V);
    m.theta = a.theta + frac * (b.theta - a.theta);
    m.P = a.P + frac * (b.P - a.P);
    m.Q = a.Q + frac * (b.Q - a.Q);
    return m;
}

MotorState axpy(const MotorState& x, double h, const MotorDerivatives& d) {
    return {x.v_d + h * d.dv_d, x.v_q + h * d.dv_q, x.s + h * d.ds};
}

// First root of f on [lo, hi] scanning upwards from lo; f(lo) must be nonzero.
template <typename F>
std::optional<double> first_root(F&& f, double lo, double hi, int samples) {
    double x0 = lo;
    double f0 = f(x0);
    for (int k = 1; k <= samples; ++k) {
        const double x1 = lo + (hi - lo) * k / samples;
        const double f1 = f(x1);
        if (f1 == 0.0) return x1;
        if ((f0 < 0.0) != (f1 < 0.0)) {
            double a = x0;
            double b = x1;
            double fa = f0;
            for (int it = 0; it < 200 && b - a > 1e-15; ++it) {
                const double m = 0.5 * (a + b);
                const double fm = f(m);
                if (fm == 0.0) return m;
                if ((fm < 0.0) == (fa < 0.0)) {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            return 0.5 * (a + b);
        }
        x0 = x1;
        f0 = f1;
    }
    return std::nullopt;
}

double electrical_torque(const MotorState& x, const MotorCurrents& i) {
    return x.v_d * i.i_d + x.v_q * i.i_q;
}

}  // namespace

const std::array<std::string_view, CompositeLoadParams::kCount>& CompositeLoadParams::labels() {
    return kLabels;
}

bool CompositeLoadParams::is_label(std::string_view label) {
    return std::find(kLabels.begin(), kLabels.end(), label) != kLabels.end();
}

double CompositeLoadParams::get(std::string_view label) const {
    return to_array()[label_index(label)];
}

void CompositeLoadParams::set(std::string_view label, double value) {
    field(*this, label_index(label)) = value;
}

std::array<double, CompositeLoadParams::kCount> CompositeLoadParams::to_array() const {
    return {a_p, b_p, a_q, b_q, r_s, X_s, r_r, X_r, X_m, H, omega};
}

CompositeLoadParams CompositeLoadParams::from_array(const std::array<double, kCount>& values) {
    CompositeLoadParams p;
    for (std::size_t i = 0; i < kCount; ++i) field(p, i) = values[i];
    return p;
}

void CompositeLoadParams::validate() const {
    const auto v = to_array();
    for (std::size_t i = 0; i < kCount; ++i) {
        if (!std::isfinite(v[i])) {
            throw DomainError("parameter " + std::string(kLabels[i]) + " is not finite");
        }
    }
    if (omega < 0.0 || omega > 1.0) throw DomainError("parameter omega must lie in [0, 1]");
    for (std::size_t i = 4; i <= 9; ++i) {
        if (!(v[i] > 0.0)) {
            throw DomainError("parameter " + std::string(kLabels[i]) + " must be positive");
        }
    }
}

CompositeLoadParams reference_params() { return CompositeLoadParams{}; }

PowerPair zip_power(const CompositeLoadParams& params, const BaselineOperatingPoint& baseline,
                    double V) {
    if (!(V > 0.0)) throw DomainError("zip_power: voltage must be positive");
    if (!(baseline.V0 > 0.0)) throw DomainError("zip_power: baseline voltage must be positive");
    const double r = V / baseline.V0;
    const double p = params.a_p * r * r + params.b_p * r + 1.0 - params.a_p - params.b_p;
    const double q = params.a_q * r * r + params.b_q * r + 1.0 - params.a_q - params.b_q;
    return {baseline.P_zip0 * p, baseline.Q_zip0 * q};
}

DqVoltage dq_transform(const BusMeasurement& meas, double r_s, double X_s) {
    if (!(meas.V > 0.0)) throw DomainError("dq_transform: voltage must be positive");
    // I = (S / V∠θ)^*  =  I∠α
    const std::complex<double> S(meas.P, meas.Q);
    const std::complex<double> current = std::conj(S / std::polar(meas.V, meas.theta));
    const double I = std::abs(current);
    const double alpha = I > 0.0 ? std::arg(current) : meas.theta;
    const double phi = meas.theta - alpha;

    const double num = X_s * I * std::cos(phi) - r_s * I * std::sin(phi);
    const double den = meas.V - (r_s * I * std::cos(phi) + X_s * I * std::sin(phi));
    if (std::abs(den) <= 1e-14 * std::max(1.0, meas.V)) {
        throw SingularityError("dq_transform: vanishing denominator in rotor angle");
    }
    DqVoltage dq;
    dq.delta = std::atan(num / den);
    dq.U_d = -meas.V * std::sin(dq.delta);
    dq.U_q = meas.V * std::cos(dq.delta);
    return dq;
}

double transient_reactance(const CompositeLoadParams& params) {
    const double sum = params.X_m + params.X_r;
    if (sum == 0.0) throw DomainError("transient_reactance: X_m + X_r must be nonzero");
    return params.X_s + params.X_m * params.X_r / sum;
}

MotorCurrents im_currents(const MotorState& state, const DqVoltage& dq, double r_s,
                          double X_prime) {
    const double den = r_s * r_s + X_prime * X_prime;
    if (den == 0.0) throw SingularityError("im_currents: r_s and X' both vanish");
    const double ed = dq.U_d - state.v_d;
    const double eq = dq.U_q - state.v_q;
    return {(r_s * ed + X_prime * eq) / den, (r_s * eq - X_prime * ed) / den};
}

MotorDerivatives im_derivatives(const MotorState& state, const MotorCurrents& currents,
                                const CompositeLoadParams& params, double T_m0) {
    if (!(params.H > 0.0)) throw DomainError("im_derivatives: H must be positive");
    const double xrm = params.X_r + params.X_m;
    if (!(xrm > 0.0)) throw DomainError("im_derivatives: X_r + X_m must be positive");
    const double a = params.r_r / xrm;
    const double k = params.X_m * params.X_m / xrm;
    MotorDerivatives d;
    d.dv_d = -a * (state.v_d + k * currents.i_q) + kSlipSign * state.s * state.v_q;
    d.dv_q = -a * (state.v_q - k * currents.i_d) - kSlipSign * state.s * state.v_d;
    const double slip = 1.0 - state.s;
    d.ds = (T_m0 * slip * slip - electrical_torque(state, currents)) / (2.0 * params.H);
    return d;
}

PowerPair im_power(const DqVoltage& dq, const MotorCurrents& currents) {
    return {dq.U_d * currents.i_d + dq.U_q * currents.i_q,
            dq.U_d * currents.i_q - dq.U_q * currents.i_d};
}

PowerPair composite_power(const PowerPair& zip, const PowerPair& im, double omega) {
    if (!(omega >= 0.0 && omega <= 1.0)) {
        throw DomainError("composite_power: omega must lie in [0, 1]");
    }
    return {omega * zip.P + (1.0 - omega) * im.P, omega * zip.Q + (1.0 - omega) * im.Q};
}

MotorDerivatives motor_drift(const MotorState& state, const BusMeasurement& meas,
                             const CompositeLoadParams& params, double T_m0) {
    const DqVoltage dq = dq_transform(meas, params.r_s, params.X_s);
    const MotorCurrents i = im_currents(state, dq, params.r_s, transient_reactance(params));
    return im_derivatives(state, i, params, T_m0);
}

PowerPair model_output(const MotorState& state, const BusMeasurement& meas,
                       const CompositeLoadParams& params, const BaselineOperatingPoint& baseline) {
    const DqVoltage dq = dq_transform(meas, params.r_s, params.X_s);
    const MotorCurrents i = im_currents(state, dq, params.r_s, transient_reactance(params));
    return composite_power(zip_power(params, baseline, meas.V), im_power(dq, i), params.omega);
}

MotorState flux_equilibrium(double s, const DqVoltage& dq, const CompositeLoadParams& params) {
    const double xp = transient_reactance(params);
    const double den = params.r_s * params.r_s + xp * xp;
    if (den == 0.0) throw SingularityError("flux_equilibrium: r_s and X' both vanish");
    const double xrm = params.X_r + params.X_m;
    const double a = params.r_r / xrm;
    const double k = params.X_m * params.X_m / xrm;
    // Currents are affine in the transient voltages: i = c + G v.
    const double c_d = (params.r_s * dq.U_d + xp * dq.U_q) / den;
    const double c_q = (params.r_s * dq.U_q - xp * dq.U_d) / den;
    const double diag = -a - a * k * xp / den;
    const double off = a * k * params.r_s / den + kSlipSign * s;
    // [diag  off ] [v_d]   [ a k c_q]
    // [-off  diag] [v_q] = [-a k c_d]
    const double det = diag * diag + off * off;
    if (det == 0.0) throw SingularityError("flux_equilibrium: singular flux equations");
    const double r1 = a * k * c_q;
    const double r2 = -a * k * c_d;
    MotorState x;
    x.v_d = (diag * r1 - off * r2) / det;
    x.v_q = (off * r1 + diag * r2) / det;
    x.s = s;
    return x;
}

MotorState steady_state(const BusMeasurement& meas, const CompositeLoadParams& params,
                        double T_m0) {
    const DqVoltage dq = dq_transform(meas, params.r_s, params.X_s);
    const double xp = transient_reactance(params);
    auto slip_balance = [&](double s) {
        const MotorState x = flux_equilibrium(s, dq, params);
        const MotorCurrents i = im_currents(x, dq, params.r_s, xp);
        return T_m0 * (1.0 - s) * (1.0 - s) - electrical_torque(x, i);
    };
    const auto root = first_root(slip_balance, 0.0, 1.0, 4000);
    if (!root) throw InfeasibleInitializationError("steady_state: no slip balance in [0, 1]");
    return flux_equilibrium(*root, dq, params);
}

Equilibrium find_equilibrium(const BusMeasurement& meas0, const CompositeLoadParams& params) {
    params.validate();
    const DqVoltage dq = dq_transform(meas0, params.r_s, params.X_s);
    const double xp = transient_reactance(params);
    auto motor_power = [&](double s) {
        const MotorState x = flux_equilibrium(s, dq, params);
        return im_power(dq, im_currents(x, dq, params.r_s, xp));
    };

    Equilibrium eq;
    eq.baseline.V0 = meas0.V;
    eq.baseline.P_zip0 = meas0.P;
    eq.baseline.Q_zip0 = meas0.Q;

    const auto root = first_root([&](double s) { return motor_power(s).P - meas0.P; }, 0.0, 1.0,
                                 4000);
    if (!root) {
        if (params.omega == 1.0) {
            // Static-only load: the motor carries no current.
            eq.state = {dq.U_d, dq.U_q, 0.0};
            eq.baseline.T_m0 = 0.0;
            return eq;
        }
        throw InfeasibleInitializationError(
            "find_equilibrium: motor cannot draw the measured real power at any slip in [0, 1]");
    }
    eq.state = flux_equilibrium(*root, dq, params);
    const MotorCurrents i = im_currents(eq.state, dq, params.r_s, xp);
    const double slip = 1.0 - eq.state.s;
    eq.baseline.T_m0 = electrical_torque(eq.state, i) / (slip * slip);
    if (eq.baseline.T_m0 < 0.0) {
        throw InfeasibleInitializationError("find_equilibrium: negative mechanical torque");
    }
    if (params.omega > 0.0) {
        const PowerPair im = im_power(dq, i);
        eq.baseline.P_zip0 = (meas0.P - (1.0 - params.omega) * im.P) / params.omega;
        eq.baseline.Q_zip0 = (meas0.Q - (1.0 - params.omega) * im.Q) / params.omega;
    }
    return eq;
}

void validate_trace(std::span<const BusMeasurement> trace) {
    if (trace.empty()) throw DomainError("trace is empty");
    for (std::size_t k = 0; k < trace.size(); ++k) {
        if (!(trace[k].V > 0.0)) {
            throw DomainError("trace sample " + std::to_string(k) + " has non-positive voltage");
        }
    }
    if (trace.size() < 2) return;
    const double dt = trace[1].t - trace[0].t;
    if (!(dt > 0.0)) throw DomainError("trace times must be strictly increasing");
    for (std::size_t k = 1; k < trace.size(); ++k) {
        const double step = trace[k].t - trace[k - 1].t;
        if (!(step > 0.0)) throw DomainError("trace times must be strictly increasing");
        if (std::abs(step - dt) > 1e-6 * dt) throw DomainError("trace sampling is not uniform");
    }
}

namespace {

void check_state_box(const MotorState& x, double t, const SimulationOptions& options) {
    const std::array<double, 3> v{x.v_d, x.v_q, x.s};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto [lo, hi] = options.state_box[i];
        const double margin = 0.5 * (hi - lo);
        if (!std::isfinite(v[i]) || v[i] < lo - margin || v[i] > hi + margin) {
            std::ostringstream msg;
            msg << "simulation diverged: state " << kStateNames[i] << " = " << v[i]
                << " at t = " << t;
            throw DivergenceError(std::string(kStateNames[i]), msg.str());
        }
    }
}

// Advances the motor state across one sampling interval.
MotorState integrate_interval(MotorState x, const BusMeasurement& m0, const BusMeasurement& m1,
                              const CompositeLoadParams& params, double T_m0,
                              const SimulationOptions& options) {
    const double span_t = m1.t - m0.t;
    const auto substeps =
        static_cast<int>(std::max(1.0, std::ceil(span_t / options.max_step - 1e-9)));
    const double h = span_t / substeps;
    auto drift = [&](const MotorState& y, const BusMeasurement& m) {
        return motor_drift(y, m, params, T_m0);
    };
    for (int j = 0; j < substeps; ++j) {
        const BusMeasurement ma = interpolate(m0, m1, static_cast<double>(j) / substeps);
        const BusMeasurement mb = interpolate(m0, m1, (j + 0.5) / substeps);
        const BusMeasurement mc = interpolate(m0, m1, static_cast<double>(j + 1) / substeps);
        const MotorDerivatives k1 = drift(x, ma);
        const MotorDerivatives k2 = drift(axpy(x, 0.5 * h, k1), mb);
        const MotorDerivatives k3 = drift(axpy(x, 0.5 * h, k2), mb);
        const MotorDerivatives k4 = drift(axpy(x, h, k3), mc);
        x.v_d += h / 6.0 * (k1.dv_d + 2.0 * k2.dv_d + 2.0 * k3.dv_d + k4.dv_d);
        x.v_q += h / 6.0 * (k1.dv_q + 2.0 * k2.dv_q + 2.0 * k3.dv_q + k4.dv_q);
        x.s += h / 6.0 * (k1.ds + 2.0 * k2.ds + 2.0 * k3.ds + k4.ds);
        check_state_box(x, mc.t, options);
    }
    return x;
}

}  // namespace

SimulationResult simulate_trajectory(std::span<const BusMeasurement> trace,
                                     const CompositeLoadParams& params,
                                     const SimulationOptions& options) {
    validate_trace(trace);
    if (!(options.max_step > 0.0)) throw DomainError("simulation step must be positive");

    SimulationResult result;
    result.initial = find_equilibrium(trace.front(), params);
    const double T_m0 = result.initial.baseline.T_m0;

    MotorState x = result.initial.state;
    result.output.reserve(trace.size());
    result.states.reserve(trace.size());
    for (std::size_t k = 0; k < trace.size(); ++k) {
        result.states.push_back(x);
        result.output.push_back(model_output(x, trace[k], params, result.initial.baseline));
        if (k + 1 < trace.size()) {
            x = integrate_interval(x, trace[k], trace[k + 1], params, T_m0, options);
        }
    }
    return result;
}

std::vector<BusMeasurement> synthesize_trace(std::span<const VoltageSample> profile,
                                             const CompositeLoadParams& params,
                                             const PowerPair& initial_power,
                                             const SimulationOptions& options) {
    if (profile.empty()) throw DomainError("synthesize_trace: empty voltage profile");
    std::vector<BusMeasurement> trace;
    trace.reserve(profile.size());
    for (const auto& v : profile) trace.push_back({v.t, v.V, v.theta, 0.0, 0.0});
    trace[0].P = initial_power.P;
    trace[0].Q = initial_power.Q;
    validate_trace(trace);

    const Equilibrium eq = find_equilibrium(trace[0], params);
    MotorState x = eq.state;
    for (std::size_t k = 1; k < trace.size(); ++k) {
        // The motor frame depends on the measured power, so each new sample is a
        // fixed point of (measured P, Q) -> model output.
        trace[k].P = trace[k - 1].P;
        trace[k].Q = trace[k - 1].Q;
        MotorState next = x;
        bool converged = false;
        for (int it = 0; it < 200 && !converged; ++it) {
            next = integrate_interval(x, trace[k - 1], trace[k], params, eq.baseline.T_m0, options);
            const PowerPair out = model_output(next, trace[k], params, eq.baseline);
            const double change = std::abs(out.P - trace[k].P) + std::abs(out.Q - trace[k].Q);
            trace[k].P = out.P;
            trace[k].Q = out.Q;
            converged = change <= 1e-14 * (1.0 + std::abs(out.P) + std::abs(out.Q));
        }
        if (!converged) {
            throw ConvergenceError("synthesize_trace: measured-power fixed point did not converge at t = " +
                                   std::to_string(trace[k].t));
        }
        x = next;
    }
    return trace;
}

std::vector<PowerPair> simulate_response(std::span<const BusMeasurement> trace,
                                         const CompositeLoadParams& params,
                                         const SimulationOptions& options) {
    return simulate_trajectory(trace, params, options).output;
}

double rmse(std::span<const double> predicted, std::span<const double> measured) {
    if (predicted.size() != measured.size()) {
        throw DimensionError("rmse: series lengths differ (" + std::to_string(predicted.size()) +
                             " vs " + std::to_string(measured.size()) + ")");
    }
    if (predicted.empty()) throw DimensionError("rmse: empty series");
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const double d = predicted[i] - measured[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(predicted.size()));
}

PowerPair response_rmse(std::span<const PowerPair> predicted,
                        std::span<const BusMeasurement> measured) {
    if (predicted.size() != measured.size()) throw DimensionError("response_rmse: length mismatch");
    std::vector<double> pp, pm, qp, qm;
    pp.reserve(predicted.size());
    pm.reserve(predicted.size());
    qp.reserve(predicted.size());
    qm.reserve(predicted.size());
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        pp.push_back(predicted[i].P);
        qp.push_back(predicted[i].Q);
        pm.push_back(measured[i].P);
        qm.push_back(measured[i].Q);
    }
    return {rmse(pp, pm), rmse(qp, qm)};
}

std::vector<BusMeasurement> read_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open trace file '" + path + "'");
    std::vector<BusMeasurement> trace;
    std::string line;
    bool header_seen = false;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        if (!header_seen) {
            std::string compact;
            for (char c : line) {
                if (c != ' ' && c != '\t') compact.push_back(c);
            }
            if (compact != "t,V,theta,P,Q") {
                throw Error(path + ":" + std::to_string(line_no) +
                            ": expected header 't,V,theta,P,Q'");
            }
            header_seen = true;
            continue;
        }
        std::array<double, 5> v{};
        const char* p = line.c_str();
        for (std::size_t c = 0; c < 5; ++c) {
            char* end = nullptr;
            v[c] = std::strtod(p, &end);
            if (end == p) {
                throw Error(path + ":" + std::to_string(line_no) + ": malformed number");
            }
            p = end;
            while (*p == ' ' || *p == '\t') ++p;
            if (c < 4) {
                if (*p != ',') throw Error(path + ":" + std::to_string(line_no) + ": expected ','");
                ++p;
            }
        }
        trace.push_back({v[0], v[1], v[2], v[3], v[4]});
    }
    if (!header_seen) throw Error(path + ": missing header");
    return trace;
}

void write_trace_csv(const std::string& path, std::span<const BusMeasurement> trace) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw Error("cannot write trace file '" + path + "'");
    std::fprintf(f, "t,V,theta,P,Q\n");
    for (const auto& m : trace) {
        std::fprintf(f, "%.17g,%.17g,%.17g,%.17g,%.17g\n", m.t, m.V, m.theta, m.P, m.Q);
    }
    std::fclose(f);
}

}  // namespace clmtt
