#pragma once

// Composite load model: ZIP static load in parallel with a third-order
// induction motor, driven by measured bus voltage phasors.
//
// All electrical quantities are per-unit on the measurement base and time is
// in seconds.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clmtt {

#ifdef CLMTT_ALT_SLIP_SIGN
inline constexpr double kSlipSign = -1.0;
#else
/// Sign multiplying the slip coupling terms of the flux equations.
inline constexpr double kSlipSign = 1.0;
#endif

struct CompositeLoadParams {
    double a_p = 0.001;
    double b_p = 0.5642;
    double a_q = 0.001;
    double b_q = 0.6626;
    double r_s = 0.049;
    double X_s = 0.096;
    double r_r = 0.044;
    double X_r = 0.244;
    double X_m = 2.96;
    double H = 0.93;
    double omega = 0.5;

    static constexpr std::size_t kCount = 11;

    /// Labels in canonical order, as used in configuration files.
    static const std::array<std::string_view, kCount>& labels();
    static bool is_label(std::string_view label);

    double get(std::string_view label) const;
    void set(std::string_view label, double value);

    std::array<double, kCount> to_array() const;
    static CompositeLoadParams from_array(const std::array<double, kCount>& values);

    /// Throws DomainError naming the first violated constraint.
    void validate() const;
};

/// Reference parameter set used to generate synthetic traces.
CompositeLoadParams reference_params();

struct MotorState {
    double v_d = 0.0;  ///< transient voltage, d axis
    double v_q = 0.0;  ///< transient voltage, q axis
    double s = 0.0;    ///< slip
};

struct MotorDerivatives {
    double dv_d = 0.0;
    double dv_q = 0.0;
    double ds = 0.0;
};

struct BusMeasurement {
    double t = 0.0;
    double V = 1.0;
    double theta = 0.0;
    double P = 0.0;
    double Q = 0.0;
};

struct BaselineOperatingPoint {
    double V0 = 1.0;
    double P_zip0 = 0.0;
    double Q_zip0 = 0.0;
    double T_m0 = 0.0;
};

struct DqVoltage {
    double delta = 0.0;
    double U_d = 0.0;
    double U_q = 0.0;
};

struct MotorCurrents {
    double i_d = 0.0;
    double i_q = 0.0;
};

struct PowerPair {
    double P = 0.0;
    double Q = 0.0;
};

PowerPair zip_power(const CompositeLoadParams& params, const BaselineOperatingPoint& baseline,
                    double V);

/// Rotates the bus voltage into the motor d/q frame. The power-factor angle is
/// taken between the voltage angle and the angle of the load current implied
/// by the measured complex power.
DqVoltage dq_transform(const BusMeasurement& meas, double r_s, double X_s);

double transient_reactance(const CompositeLoadParams& params);

MotorCurrents im_currents(const MotorState& state, const DqVoltage& dq, double r_s,
                          double X_prime);

MotorDerivatives im_derivatives(const MotorState& state, const MotorCurrents& currents,
                                const CompositeLoadParams& params, double T_m0);

PowerPair im_power(const DqVoltage& dq, const MotorCurrents& currents);

PowerPair composite_power(const PowerPair& zip, const PowerPair& im, double omega);

/// Right-hand side of the motor state equations with every algebraic relation
/// evaluated at the given measurement.
MotorDerivatives motor_drift(const MotorState& state, const BusMeasurement& meas,
                             const CompositeLoadParams& params, double T_m0);

/// Composite output for a given motor state and measurement.
PowerPair model_output(const MotorState& state, const BusMeasurement& meas,
                       const CompositeLoadParams& params, const BaselineOperatingPoint& baseline);

/// Flux-equation equilibrium (v'_d, v'_q) at a fixed slip.
MotorState flux_equilibrium(double s, const DqVoltage& dq, const CompositeLoadParams& params);

/// Steady motor state at a given measurement with a known mechanical torque
/// coefficient. Chooses the stable (low-slip) branch.
MotorState steady_state(const BusMeasurement& meas, const CompositeLoadParams& params,
                        double T_m0);

struct Equilibrium {
    MotorState state;
    BaselineOperatingPoint baseline;
};

/// Initializes the model on a pre-disturbance sample: the motor draws the
/// measured real power at a stable slip, T_m0 zeroes the slip equation, and
/// the ZIP baseline absorbs the remaining reactive power.
Equilibrium find_equilibrium(const BusMeasurement& meas0, const CompositeLoadParams& params);

struct SimulationOptions {
    double max_step = 1e-3;
    /// Feasible state box {v'_d, v'_q, s} as (lower, upper) pairs.
    std::array<std::pair<double, double>, 3> state_box{{{-1.5, 1.5}, {-1.5, 1.5}, {0.0, 1.0}}};
};

struct SimulationResult {
    std::vector<PowerPair> output;
    std::vector<MotorState> states;
    Equilibrium initial;
};

/// Fixed-step RK4 integration of the motor equations along a uniformly
/// sampled trace. Measurements are interpolated linearly between samples.
SimulationResult simulate_trajectory(std::span<const BusMeasurement> trace,
                                     const CompositeLoadParams& params,
                                     const SimulationOptions& options = {});

struct VoltageSample {
    double t = 0.0;
    double V = 1.0;
    double theta = 0.0;
};

/// Builds a trace whose P, Q columns are the model's own response to the
/// voltage profile. The first sample is the operating point with the given
/// power draw.
std::vector<BusMeasurement> synthesize_trace(std::span<const VoltageSample> profile,
                                             const CompositeLoadParams& params,
                                             const PowerPair& initial_power,
                                             const SimulationOptions& options = {});

std::vector<PowerPair> simulate_response(std::span<const BusMeasurement> trace,
                                         const CompositeLoadParams& params,
                                         const SimulationOptions& options = {});

double rmse(std::span<const double> predicted, std::span<const double> measured);

/// RMSE of the real and reactive power channels against a trace.
PowerPair response_rmse(std::span<const PowerPair> predicted,
                        std::span<const BusMeasurement> measured);

/// Reads `t,V,theta,P,Q` rows; lines starting with '#' are comments.
std::vector<BusMeasurement> read_trace_csv(const std::string& path);
void write_trace_csv(const std::string& path, std::span<const BusMeasurement> trace);

/// Throws DomainError unless samples have V > 0 and uniform increasing time.
void validate_trace(std::span<const BusMeasurement> trace);

}  // namespace clmtt
