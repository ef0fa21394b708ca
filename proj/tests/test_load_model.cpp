#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <Eigen/Eigenvalues>

#include "clmtt/error.hpp"
#include "clmtt/load_model.hpp"

using namespace clmtt;
using cd = std::complex<double>;

namespace {

BusMeasurement op_point() { return {0.0, 1.0, 0.0, 1.0, 0.5}; }

// Right-hand side of the flux and slip equations written out term by term.
std::array<double, 3> scalar_rhs(const MotorState& x, double i_d, double i_q, const CompositeLoadParams& p,
                                 double T_m0) {
    const double xrm = p.X_r + p.X_m;
    const double dvd = (-p.r_r / xrm) * (x.v_d + (p.X_m * p.X_m / xrm) * i_q) + x.s * x.v_q;
    const double dvq = (-p.r_r / xrm) * (x.v_q - (p.X_m * p.X_m / xrm) * i_d) - x.s * x.v_d;
    const double ds = (1.0 / (2.0 * p.H)) * (T_m0 * (1.0 - x.s) * (1.0 - x.s) - x.v_d * i_d - x.v_q * i_q);
    return {dvd, dvq, ds};
}

// Plain RK4 on motor_drift at a fixed measurement.
MotorState integrate(MotorState x, const BusMeasurement& m, const CompositeLoadParams& p, double T_m0, double h,
                     int steps) {
    auto f = [&](const MotorState& y) {
        auto d = motor_drift(y, m, p, T_m0);
        return std::array<double, 3>{d.dv_d, d.dv_q, d.ds};
    };
    for (int k = 0; k < steps; ++k) {
        std::array<double, 3> y{x.v_d, x.v_q, x.s};
        auto add = [&](const std::array<double, 3>& d, double c) {
            return MotorState{y[0] + c * d[0], y[1] + c * d[1], y[2] + c * d[2]};
        };
        auto k1 = f(x);
        auto k2 = f(add(k1, 0.5 * h));
        auto k3 = f(add(k2, 0.5 * h));
        auto k4 = f(add(k3, h));
        for (int i = 0; i < 3; ++i) y[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
        x = {y[0], y[1], y[2]};
    }
    return x;
}

std::vector<BusMeasurement> smooth_trace(double dt, double duration) {
    std::vector<BusMeasurement> tr;
    for (int k = 0; k * dt <= duration + 1e-12; ++k) {
        const double t = k * dt;
        tr.push_back({t, 1.0 - 0.03 * std::sin(1.5 * t), 0.02 * std::sin(0.7 * t), 1.0, 0.5});
    }
    return tr;
}

}  // namespace

TEST_CASE("ZIP power") {
    auto p = reference_params();
    BaselineOperatingPoint b{1.0, 1.0, 1.0, 0.0};
    CHECK(zip_power(p, b, 0.95).P == doctest::Approx(0.97169).epsilon(1e-5));
    CHECK(zip_power(p, b, 1.05).Q == doctest::Approx(1.03323).epsilon(1e-5));

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int k = 0; k < 100; ++k) {
        CompositeLoadParams q;
        q.a_p = u(rng);
        q.b_p = u(rng);
        q.a_q = u(rng);
        q.b_q = u(rng);
        BaselineOperatingPoint base{1.0 + 0.2 * u(rng), u(rng), u(rng), 0.0};
        auto z = zip_power(q, base, base.V0);
        CHECK(z.P == doctest::Approx(base.P_zip0).epsilon(1e-14));
        CHECK(z.Q == doctest::Approx(base.Q_zip0).epsilon(1e-14));
    }
    CHECK_THROWS_AS(zip_power(p, b, 0.0), DomainError);
    b.V0 = -1.0;
    CHECK_THROWS_AS(zip_power(p, b, 1.0), DomainError);
}

TEST_CASE("d/q transform") {
    auto zero = dq_transform({0.0, 1.02, 0.3, 0.0, 0.0}, 0.049, 0.096);
    CHECK(zero.delta == 0.0);
    CHECK(zero.U_d == 0.0);
    CHECK(zero.U_q == doctest::Approx(1.02));

    // Rotor angle equals the angle by which the voltage behind the stator
    // impedance lags the bus voltage.
    auto phasor_delta = [](const BusMeasurement& m, double r, double x) {
        const cd V = std::polar(m.V, m.theta);
        const cd I = std::conj(cd(m.P, m.Q) / V);
        const cd E = V - cd(r, x) * I;
        return std::arg(V) - std::arg(E);
    };
    BusMeasurement m{0.0, 1.0, 0.0, 0.8, 0.3};
    auto dq = dq_transform(m, 0.049, 0.096);
    CHECK(dq.delta == doctest::Approx(phasor_delta(m, 0.049, 0.096)).epsilon(1e-12));

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 200; ++k) {
        BusMeasurement r{0.0, 0.8 + 0.4 * u(rng), 2.0 * u(rng) - 1.0, 1.5 * u(rng), u(rng) - 0.3};
        auto d = dq_transform(r, 0.01 + 0.1 * u(rng), 0.05 + 0.2 * u(rng));
        CHECK(std::abs(d.U_d * d.U_d + d.U_q * d.U_q - r.V * r.V) <= 1e-12 * r.V * r.V);
        double ref = phasor_delta(r, 0.049, 0.096);
        auto d2 = dq_transform(r, 0.049, 0.096);
        CHECK(std::remainder(d2.delta - ref, M_PI) == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    }
    CHECK_THROWS_AS(dq_transform({0.0, 0.0, 0.0, 1.0, 0.0}, 0.05, 0.1), DomainError);
    // V = r_s I cos(phi) + X_s I sin(phi) with a purely resistive load: V = r I = r P / V
    CHECK_THROWS_AS(dq_transform({0.0, 1.0, 0.0, 1.0 / 0.5, 0.0}, 0.5, 0.1), SingularityError);
}

TEST_CASE("transient reactance") {
    auto p = reference_params();
    CHECK(transient_reactance(p) == doctest::Approx(0.32142).epsilon(1e-5));
    p.X_r = 0.0;
    CHECK(transient_reactance(p) == doctest::Approx(p.X_s));
    p.X_r = 0.2;
    p.X_m = 0.0;
    CHECK(transient_reactance(p) == doctest::Approx(p.X_s));
    p.X_r = 0.0;
    CHECK_THROWS_AS(transient_reactance(p), DomainError);
}

TEST_CASE("motor currents") {
    DqVoltage dq{0.1, -0.1, 0.99};
    auto z = im_currents({-0.1, 0.99, 0.02}, dq, 0.05, 0.3);
    CHECK(z.i_d == 0.0);
    CHECK(z.i_q == 0.0);
    auto r = im_currents({0.0, 0.9, 0.0}, dq, 0.05, 0.0);
    CHECK(r.i_d == doctest::Approx(-0.1 / 0.05));
    CHECK(r.i_q == doctest::Approx(0.09 / 0.05));
    CHECK_THROWS_AS(im_currents({}, dq, 0.0, 0.0), SingularityError);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 200; ++k) {
        DqVoltage v{0.0, u(rng), u(rng)};
        MotorState x{u(rng), u(rng), 0.0};
        const double rs = 0.01 + std::abs(u(rng)), xp = std::abs(u(rng));
        auto c = im_currents(x, v, rs, xp);
        const cd ref = cd(v.U_d - x.v_d, v.U_q - x.v_q) / cd(rs, xp);
        CHECK(c.i_d == doctest::Approx(ref.real()).epsilon(1e-12));
        CHECK(c.i_q == doctest::Approx(ref.imag()).epsilon(1e-12));
        const cd res = cd(rs, xp) * cd(c.i_d, c.i_q) - cd(v.U_d - x.v_d, v.U_q - x.v_q);
        CHECK(std::abs(res) <= 1e-12);
    }
}

TEST_CASE("motor derivatives") {
    auto p = reference_params();
    auto d = im_derivatives({0.2, 0.8, 1.0}, {0.0, 0.0}, p, 0.7);
    CHECK(d.ds == 0.0);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 100; ++k) {
        MotorState x{u(rng), u(rng), 0.5 + 0.5 * u(rng)};
        MotorCurrents c{u(rng), u(rng)};
        const double T = 1.0 + u(rng);
        auto got = im_derivatives(x, c, p, T);
        auto ref = scalar_rhs(x, c.i_d, c.i_q, p, T);
        CHECK(got.dv_d == doctest::Approx(ref[0]).epsilon(1e-13));
        CHECK(got.dv_q == doctest::Approx(ref[1]).epsilon(1e-13));
        CHECK(got.ds == doctest::Approx(ref[2]).epsilon(1e-13));
    }
    p.H = 0.0;
    CHECK_THROWS_AS(im_derivatives({}, {}, p, 1.0), DomainError);
}

TEST_CASE("motor power") {
    CHECK(im_power({0.0, 0.3, 0.9}, {0.0, 0.0}).P == 0.0);
    auto s = im_power({0.0, 0.0, 0.9}, {0.4, 0.7});
    CHECK(s.P == doctest::Approx(0.9 * 0.7));
    CHECK(s.Q == doctest::Approx(-0.9 * 0.4));
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 100; ++k) {
        DqVoltage v{0.0, u(rng), u(rng)};
        MotorCurrents c{u(rng), u(rng)};
        const cd S = cd(v.U_d, v.U_q) * std::conj(cd(c.i_d, c.i_q));
        auto got = im_power(v, c);
        CHECK(got.P == doctest::Approx(S.real()).epsilon(1e-14));
        // reactive part follows the printed convention U_d i_q - U_q i_d
        CHECK(got.Q == doctest::Approx(-S.imag()).epsilon(1e-14));
    }
}

TEST_CASE("composite power") {
    PowerPair zip{1.0, 0.4}, im{0.8, 0.7};
    CHECK(composite_power(zip, im, 1.0).P == 1.0);
    CHECK(composite_power(zip, im, 0.0).Q == 0.7);
    CHECK(composite_power(zip, im, 0.5).P == doctest::Approx(0.9));
    CHECK_THROWS_AS(composite_power(zip, im, 1.1), DomainError);
    CHECK_THROWS_AS(composite_power(zip, im, -0.1), DomainError);
    for (double w : {0.0, 0.1, 0.37, 0.5, 0.9, 1.0}) {
        auto a = composite_power(zip, im, w);
        auto b = composite_power(im, zip, 1.0 - w);
        CHECK(a.P == doctest::Approx(b.P).epsilon(1e-15));
        CHECK(a.Q == doctest::Approx(b.Q).epsilon(1e-15));
        // affine in omega
        auto lo = composite_power(zip, im, 0.0), hi = composite_power(zip, im, 1.0);
        CHECK(a.P == doctest::Approx(lo.P + w * (hi.P - lo.P)).epsilon(1e-15));
    }
}

TEST_CASE("equilibrium initialization") {
    auto p = reference_params();
    auto eq = find_equilibrium(op_point(), p);
    auto d = motor_drift(eq.state, op_point(), p, eq.baseline.T_m0);
    CHECK(std::abs(d.dv_d) <= 1e-9);
    CHECK(std::abs(d.dv_q) <= 1e-9);
    CHECK(std::abs(d.ds) <= 1e-9);
    CHECK(eq.baseline.T_m0 >= 0.0);
    CHECK(eq.state.s > 0.0);
    CHECK(eq.state.s < 0.2);
    // The composite output reproduces the measured operating point.
    auto out = model_output(eq.state, op_point(), p, eq.baseline);
    CHECK(out.P == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.Q == doctest::Approx(0.5).epsilon(1e-12));

    SUBCASE("Newton root of the state equations agrees") {
        const double T = eq.baseline.T_m0;
        MotorState x{eq.state.v_d + 0.01, eq.state.v_q - 0.01, eq.state.s * 1.1};
        for (int it = 0; it < 50; ++it) {
            auto dq = dq_transform(op_point(), p.r_s, p.X_s);
            auto rhs = [&](const MotorState& y) {
                auto c = im_currents(y, dq, p.r_s, transient_reactance(p));
                auto r = scalar_rhs(y, c.i_d, c.i_q, p, T);
                return Eigen::Vector3d(r[0], r[1], r[2]);
            };
            Eigen::Vector3d f = rhs(x);
            Eigen::Matrix3d J;
            for (int j = 0; j < 3; ++j) {
                MotorState y = x;
                double* c = j == 0 ? &y.v_d : j == 1 ? &y.v_q : &y.s;
                *c += 1e-7;
                J.col(j) = (rhs(y) - f) / 1e-7;
            }
            Eigen::Vector3d dx = J.fullPivLu().solve(-f);
            x = {x.v_d + dx(0), x.v_q + dx(1), x.s + dx(2)};
        }
        CHECK(x.v_d == doctest::Approx(eq.state.v_d).epsilon(1e-8));
        CHECK(x.v_q == doctest::Approx(eq.state.v_q).epsilon(1e-8));
        CHECK(x.s == doctest::Approx(eq.state.s).epsilon(1e-8));
    }
    SUBCASE("the equilibrium is attracting") {
        // Slowest mode decays in about 20 s, so 300 s covers the 1e-3 -> 1e-6 drop.
        MotorState x{eq.state.v_d + 1e-3, eq.state.v_q - 1e-3, eq.state.s + 1e-3};
        auto y = integrate(x, op_point(), p, eq.baseline.T_m0, 0.01, 30000);
        CHECK(std::abs(y.v_d - eq.state.v_d) <= 1e-6);
        CHECK(std::abs(y.v_q - eq.state.v_q) <= 1e-6);
        CHECK(std::abs(y.s - eq.state.s) <= 1e-6);
    }
    SUBCASE("static-only load") {
        auto q = p;
        q.omega = 1.0;
        auto e = find_equilibrium(op_point(), q);
        CHECK(e.baseline.P_zip0 == doctest::Approx(1.0));
        CHECK(e.baseline.Q_zip0 == doctest::Approx(0.5));
    }
    SUBCASE("infeasible") {
        auto q = p;
        q.X_s = 0.6;
        CHECK_THROWS_AS(find_equilibrium(op_point(), q), InfeasibleInitializationError);
        q = p;
        q.H = -1.0;
        CHECK_THROWS_AS(find_equilibrium(op_point(), q), DomainError);
    }
}

TEST_CASE("simulation") {
    auto p = reference_params();
    SUBCASE("constant voltage holds the operating point") {
        std::vector<BusMeasurement> tr;
        for (int k = 0; k <= 500; ++k) tr.push_back({0.01 * k, 1.0, 0.0, 1.0, 0.5});
        auto sim = simulate_trajectory(tr, p);
        for (const auto& o : sim.output) {
            CHECK(std::abs(o.P - 1.0) <= 1e-8);
            CHECK(std::abs(o.Q - 0.5) <= 1e-8);
        }
        CHECK(std::abs(sim.states.back().s - sim.states.front().s) <= 1e-8);
    }
    SUBCASE("a voltage step settles on the post-step equilibrium") {
        std::vector<VoltageSample> prof;
        for (int k = 0; k <= 3000; ++k) prof.push_back({0.05 * k, k < 20 ? 1.0 : 0.95, 0.0});
        SimulationOptions o;
        o.max_step = 0.01;
        auto tr = synthesize_trace(prof, p, {1.0, 0.5}, o);
        auto sim = simulate_trajectory(tr, p, o);
        auto target = steady_state(tr.back(), p, sim.initial.baseline.T_m0);
        const auto& x = sim.states.back();
        CHECK(std::abs(x.v_d - target.v_d) <= 1e-5);
        CHECK(std::abs(x.v_q - target.v_q) <= 1e-5);
        CHECK(std::abs(x.s - target.s) <= 1e-5);
        // the synthetic trace is its own model response
        auto fit = response_rmse(sim.output, tr);
        CHECK(fit.P <= 1e-9);
        CHECK(fit.Q <= 1e-9);
    }
    SUBCASE("halving the step barely moves the output") {
        auto tr = smooth_trace(0.01, 5.0);
        SimulationOptions a, b;
        a.max_step = 1e-3;
        b.max_step = 5e-4;
        auto ya = simulate_response(tr, p, a);
        auto yb = simulate_response(tr, p, b);
        double worst = 0.0;
        for (std::size_t k = 0; k < ya.size(); ++k)
            worst = std::max({worst, std::abs(ya[k].P - yb[k].P), std::abs(ya[k].Q - yb[k].Q)});
        CHECK(worst < 1e-6);
    }
    SUBCASE("fourth-order convergence") {
        auto tr = smooth_trace(0.2, 6.0);
        std::vector<double> end;
        for (double h : {0.2, 0.1, 0.05}) {
            SimulationOptions o;
            o.max_step = h;
            end.push_back(simulate_trajectory(tr, p, o).states.back().s);
        }
        const double ratio = (end[0] - end[1]) / (end[1] - end[2]);
        CHECK(ratio > 8.0);
        CHECK(ratio < 32.0);
    }
    SUBCASE("divergence names the state") {
        std::vector<BusMeasurement> tr;
        for (int k = 0; k <= 200; ++k) tr.push_back({0.05 * k, k < 5 ? 1.0 : 0.3, 0.0, 1.0, 0.5});
        SimulationOptions o;
        o.state_box = {{{-1.5, 1.5}, {-1.5, 1.5}, {0.0, 0.1}}};
        try {
            simulate_response(tr, p, o);
            FAIL("expected divergence");
        } catch (const DivergenceError& e) {
            CHECK(e.variable() == "s");
        }
    }
    SUBCASE("trace validation") {
        std::vector<BusMeasurement> bad{{0.0, 1.0, 0.0, 1.0, 0.5}, {0.1, 1.0, 0.0, 1.0, 0.5}, {0.3, 1.0, 0.0, 1.0, 0.5}};
        CHECK_THROWS_AS(simulate_response(bad, p), DomainError);
        bad[2].t = 0.2;
        bad[1].V = 0.0;
        CHECK_THROWS_AS(simulate_response(bad, p), DomainError);
    }
}

TEST_CASE("rmse") {
    std::vector<double> a{1.0, 2.0}, z{0.0, 0.0}, c{1.5, 2.5};
    CHECK(rmse(a, a) == 0.0);
    CHECK(rmse(c, a) == doctest::Approx(0.5));
    CHECK(rmse(a, z) == doctest::Approx(std::sqrt(2.5)));
    std::vector<double> one{1.0};
    CHECK_THROWS_AS(rmse(a, one), DimensionError);
}

TEST_CASE("parameter labels") {
    auto p = reference_params();
    CHECK(p.get("X_s") == 0.096);
    p.set("omega", 0.25);
    CHECK(p.omega == 0.25);
    CHECK_THROWS_AS(p.set("bogus", 1.0), DomainError);
    auto q = CompositeLoadParams::from_array(p.to_array());
    CHECK(q.to_array() == p.to_array());
    CHECK(CompositeLoadParams::is_label("H"));
    CHECK_FALSE(CompositeLoadParams::is_label("h"));
    p.omega = 1.5;
    CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("omega"), DomainError);
}

TEST_CASE("trace files") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "clmtt_test_trace";
    fs::create_directories(dir);
    const auto path = (dir / "trace.csv").string();
    auto tr = smooth_trace(0.1, 1.0);
    write_trace_csv(path, tr);
    auto back = read_trace_csv(path);
    REQUIRE(back.size() == tr.size());
    for (std::size_t k = 0; k < tr.size(); ++k) {
        CHECK(back[k].t == tr[k].t);
        CHECK(back[k].V == tr[k].V);
        CHECK(back[k].theta == tr[k].theta);
    }
    {
        std::ofstream f(path);
        f << "# comment\nt,V,theta,P,Q\n0,1,0,1,0.5\n0.1,1,0,x,0.5\n";
    }
    CHECK_THROWS_WITH_AS(read_trace_csv(path), doctest::Contains(":4:"), Error);
    {
        std::ofstream f(path);
        f << "t,V,P,Q\n";
    }
    CHECK_THROWS_AS(read_trace_csv(path), Error);
    fs::remove_all(dir);
}
