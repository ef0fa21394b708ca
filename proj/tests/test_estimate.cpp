#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "clmtt/error.hpp"
#include "clmtt/estimate.hpp"
#include "oracles.hpp"

using namespace clmtt;

namespace {

DiscretizedDomain grid3() {
    GridSpec spec;
    spec.dims.push_back({"x", 0.0, 1.0, 5, DimensionKind::State});
    spec.dims.push_back({"y", -1.0, 1.0, 4, DimensionKind::State});
    spec.dims.push_back({"omega", 0.0, 1.0, 6, DimensionKind::Parameter});
    return build_grid(spec);
}

DiscretizedDomain grid4() {
    GridSpec spec;
    spec.dims.push_back({"x", 0.0, 1.0, 4, DimensionKind::State});
    spec.dims.push_back({"y", -1.0, 1.0, 3, DimensionKind::State});
    spec.dims.push_back({"omega", 0.0, 1.0, 5, DimensionKind::Parameter});
    spec.dims.push_back({"X_s", 0.02, 0.3, 3, DimensionKind::Parameter});
    return build_grid(spec);
}

tt::TtVector positive_random(const DiscretizedDomain& dom, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    tt::DenseTensor t(dom.mode_sizes());
    for (double& v : t.data) v = u(rng);
    return tt::from_dense(t, 0.0);
}

MarginalPdf make_marginal(std::vector<double> v) {
    MarginalPdf m;
    m.label = "omega";
    m.step = 1.0;
    for (std::size_t i = 0; i < v.size(); ++i) m.coordinates.push_back(static_cast<double>(i));
    m.density = std::move(v);
    return m;
}

// Prominence from its definition: drop to the higher of the two lowest
// points passed on the way to higher ground (or to the edge) on each side.
std::vector<std::pair<std::size_t, double>> exhaustive_peaks(const std::vector<double>& f, double min_prom) {
    std::vector<std::pair<std::size_t, double>> out;
    const std::size_t n = f.size();
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (!(f[i] > f[i - 1] && f[i] > f[i + 1])) continue;
        std::size_t lo = 0;
        for (std::size_t k = 0; k < i; ++k)
            if (f[k] > f[i]) lo = k;
        std::size_t hi = n - 1;
        for (std::size_t k = n - 1; k > i; --k)
            if (f[k] > f[i]) hi = k;
        const double left = *std::min_element(f.begin() + lo, f.begin() + i + 1);
        const double right = *std::min_element(f.begin() + i, f.begin() + hi + 1);
        const double prom = f[i] - std::max(left, right);
        if (prom >= min_prom) out.push_back({i, f[i]});
    }
    std::stable_sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.second > b.second; });
    return out;
}

std::vector<BusMeasurement> short_step_trace() {
    std::vector<VoltageSample> prof;
    for (int k = 0; k <= 800; ++k) {
        const double t = 0.01 * k;
        prof.push_back({t, t < 1.0 - 1e-9 ? 1.0 : 0.95, 0.0});
    }
    SimulationOptions o;
    o.max_step = 0.01;
    return synthesize_trace(prof, reference_params(), {1.0, 0.5}, o);
}

}  // namespace

TEST_CASE("marginal of a product density is the normalized factor") {
    auto dom = grid3();
    std::vector<tt::Vector> f = {tt::Vector::LinSpaced(5, 1.0, 2.0), tt::Vector::LinSpaced(4, 3.0, 0.5),
                                 tt::Vector::LinSpaced(6, 0.2, 1.2)};
    auto p = tt::TtVector::rank_one(f);
    for (std::size_t d = 0; d < 3; ++d) {
        auto m = marginal(p, dom, d);
        const double s = f[d].sum() * dom.step(d);
        for (std::size_t i = 0; i < m.density.size(); ++i) CHECK(m.density[i] == doctest::Approx(f[d](i) / s).epsilon(1e-13));
        CHECK(m.integral() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(m.coordinates.front() == doctest::Approx(dom.coordinate(d, 0)));
    }
}

TEST_CASE("marginal matches brute-force summation") {
    auto dom = grid3();
    auto p = positive_random(dom, 3);
    auto dense = oracle::flatten(p);
    const auto n = dom.mode_sizes();
    for (std::size_t d = 0; d < 3; ++d) {
        std::vector<double> ref(n[d], 0.0);
        std::vector<std::size_t> i(3, 0);
        std::size_t k = 0;
        do ref[i[d]] += dense[k++];
        while (oracle::next_index(i, n));
        double s = 0.0;
        for (double v : ref) s += v * dom.step(d);
        auto m = marginal(p, dom, d);
        for (std::size_t q = 0; q < ref.size(); ++q) CHECK(std::abs(m.density[q] - ref[q] / s) <= 1e-10);
    }
}

TEST_CASE("joint marginals") {
    SUBCASE("product density gives the outer product of its marginals") {
        auto dom = grid3();
        auto p = tt::TtVector::rank_one({tt::Vector::LinSpaced(5, 1.0, 2.0), tt::Vector::LinSpaced(4, 3.0, 0.5),
                                         tt::Vector::LinSpaced(6, 0.2, 1.2)});
        auto j = joint_marginal_2d(p, dom, 2, 0);
        auto ma = marginal(p, dom, 2);
        auto mb = marginal(p, dom, 0);
        for (std::size_t a = 0; a < 6; ++a)
            for (std::size_t b = 0; b < 5; ++b) CHECK(j.at(a, b) == doctest::Approx(ma.density[a] * mb.density[b]).epsilon(1e-12));
    }
    SUBCASE("dense oracle and consistency with the univariate marginals") {
        auto dom = grid4();
        auto p = positive_random(dom, 5);
        auto dense = oracle::flatten(p);
        const auto n = dom.mode_sizes();
        const std::size_t da = 3, db = 1;
        std::vector<double> ref(n[da] * n[db], 0.0);
        std::vector<std::size_t> i(4, 0);
        std::size_t k = 0;
        do ref[i[da] * n[db] + i[db]] += dense[k++];
        while (oracle::next_index(i, n));
        double s = 0.0;
        for (double v : ref) s += v * dom.step(da) * dom.step(db);
        auto j = joint_marginal_2d(p, dom, da, db);
        for (std::size_t q = 0; q < ref.size(); ++q) CHECK(std::abs(j.density[q] - ref[q] / s) <= 1e-10);

        auto ma = marginal(p, dom, da);
        auto mb = marginal(p, dom, db);
        for (std::size_t a = 0; a < n[da]; ++a) {
            double row = 0.0;
            for (std::size_t b = 0; b < n[db]; ++b) row += j.at(a, b) * dom.step(db);
            CHECK(std::abs(row - ma.density[a]) <= 1e-9);
        }
        for (std::size_t b = 0; b < n[db]; ++b) {
            double col = 0.0;
            for (std::size_t a = 0; a < n[da]; ++a) col += j.at(a, b) * dom.step(da);
            CHECK(std::abs(col - mb.density[b]) <= 1e-9);
        }
    }
    CHECK_THROWS_AS(joint_marginal_2d(tt::TtVector::constant(grid3().mode_sizes(), 1.0), grid3(), 1, 1), DomainError);
}

TEST_CASE("argmax") {
    auto e = argmax_params({make_marginal({0.1, 0.3, 0.5, 0.3, 0.1})});
    CHECK(e[0].node == 2);
    auto tie = argmax_params({make_marginal({0.2, 0.5, 0.1, 0.5, 0.2})});
    CHECK(tie[0].node == 1);
    auto scaled = argmax_params({make_marginal({0.02, 0.05, 0.01, 0.05, 0.02})});
    CHECK(scaled[0].node == 1);
    CHECK_THROWS_AS(argmax_params({make_marginal({0.0, 0.0, 0.0})}), DomainError);
    CHECK_THROWS_AS(argmax_params({}), DomainError);

    // parabola through (-1, 2), (0, 3), (1, 2.5) peaks at 0.5 / 3 * 1
    auto r = argmax_params({make_marginal({0.0, 2.0, 3.0, 2.5, 0.0})}, true);
    CHECK(r[0].value == doctest::Approx(2.0 + 1.0 / 6.0));
    CHECK(r[0].node == 2);
}

TEST_CASE("argmax is invariant under positive rescaling") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(9);
        for (double& x : v) x = u(rng);
        const double c = 0.01 + 100.0 * u(rng);
        std::vector<double> w = v;
        for (double& x : w) x *= c;
        CHECK(argmax_params({make_marginal(v)})[0].node == argmax_params({make_marginal(w)})[0].node);
    }
}

TEST_CASE("local maxima") {
    CHECK(local_maxima(make_marginal({0.1, 0.2, 0.3, 0.4})).empty());
    auto two = local_maxima(make_marginal({0.0, 1.0, 0.0, 0.5, 0.0}));
    REQUIRE(two.size() == 2);
    CHECK(two[0].node == 1);
    CHECK(two[1].node == 3);
    CHECK(two[0].prominence == doctest::Approx(1.0));
    CHECK(two[1].prominence == doctest::Approx(0.5));
    CHECK_THROWS_AS(local_maxima(make_marginal({1.0}), -1.0), DomainError);

    std::mt19937_64 rng(29);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> v;
        for (int i = 0; i < 40; ++i) v.push_back(std::max(0.0, std::exp(-0.01 * (i - 20) * (i - 20)) + noise(rng)));
        for (double prom : {0.0, 0.02, 0.1}) {
            auto got = local_maxima(make_marginal(v), prom);
            auto ref = exhaustive_peaks(v, prom);
            REQUIRE(got.size() == ref.size());
            for (std::size_t k = 0; k < ref.size(); ++k) CHECK(got[k].node == ref[k].first);
        }
    }
}

TEST_CASE("concentration index") {
    CHECK(concentration_index(make_marginal({1.0, 1.0, 1.0, 1.0})) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(concentration_index(make_marginal({0.0, 0.0, 4.0, 0.0})) == doctest::Approx(1.0));
    const double mid = concentration_index(make_marginal({0.1, 1.0, 0.1, 0.0}));
    CHECK(mid > 0.0);
    CHECK(mid < 1.0);
}

TEST_CASE("variance indices match a full-factorial tabulation") {
    BruteForcePosterior sweep;
    sweep.labels = {"omega", "X_s"};
    sweep.coordinates = {{0.1, 0.3, 0.5, 0.7}, {0.05, 0.1, 0.15}};
    sweep.steps = {0.2, 0.05};
    std::vector<double> g{0.0, 1.0, 4.0, 9.0};
    std::vector<double> h{0.5, 0.0, 0.7};
    for (double a : g)
        for (double b : h) sweep.rmse.push_back(a + b);
    sweep.density.assign(sweep.rmse.size(), 1.0);
    auto var = [](const std::vector<double>& v) {
        double m = 0.0, m2 = 0.0;
        for (double x : v) {
            m += x;
            m2 += x * x;
        }
        m /= v.size();
        return m2 / v.size() - m * m;
    };
    // additive response: first-order indices are the variance shares
    const double vg = var(g), vh = var(h);
    auto s = variance_indices(sweep);
    CHECK(s[0] == doctest::Approx(vg / (vg + vh)).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(vh / (vg + vh)).epsilon(1e-12));
}

TEST_CASE("measurement conditioning") {
    auto dom = grid3();
    auto p = positive_random(dom, 7);
    // output depends on state and parameter
    tt::DenseTensor hp(dom.mode_sizes()), hq(dom.mode_sizes());
    std::vector<std::size_t> i(3, 0);
    std::size_t k = 0;
    do {
        hp.data[k] = dom.coordinate(2, i[2]) + 0.1 * dom.coordinate(0, i[0]);
        hq.data[k] = 0.5 + 0.05 * dom.coordinate(1, i[1]);
        ++k;
    } while (oracle::next_index(i, dom.mode_sizes()));
    auto tp = tt::from_dense(hp, 0.0);
    auto tq = tt::from_dense(hq, 0.0);
    const PowerPair target{0.45 + 0.05, 0.5};
    ConditioningOptions opt;
    opt.tau = 0.05;
    auto c = condition_on_output(p, dom, tp, tq, target, opt);
    CHECK(integral(c.density, dom) == doctest::Approx(1.0).epsilon(1e-10));

    // expected output per parameter node by direct summation
    auto dense = oracle::flatten(p);
    const auto n = dom.mode_sizes();
    std::vector<double> mass(n[2], 0.0), ep(n[2], 0.0);
    std::fill(i.begin(), i.end(), 0);
    k = 0;
    do {
        mass[i[2]] += dense[k];
        ep[i[2]] += dense[k] * hp.data[k];
        ++k;
    } while (oracle::next_index(i, n));
    for (std::size_t q = 0; q < n[2]; ++q) {
        CHECK(c.expected_P.entry(std::vector<std::size_t>{q}) == doctest::Approx(ep[q] / mass[q]).epsilon(1e-10));
    }
    auto m = marginal(c.density, dom, 2);
    std::size_t best = 0;
    for (std::size_t q = 1; q < n[2]; ++q)
        if (std::abs(ep[q] / mass[q] - target.P) < std::abs(ep[best] / mass[best] - target.P)) best = q;
    CHECK(argmax_params({m})[0].node == best);

    // each parameter node's state density is left unchanged up to scale
    auto sx = marginal(c.density, dom, 0);
    CHECK(sx.integral() == doctest::Approx(1.0));
    opt.tau = -1.0;
    CHECK_THROWS_AS(condition_on_output(p, dom, tp, tq, target, opt), DomainError);
}

TEST_CASE("trailing mean") {
    std::vector<BusMeasurement> tr{{0.0, 1.0, 0.0, 1.0, 0.5}, {1.0, 1.0, 0.0, 2.0, 0.7}, {2.0, 1.0, 0.0, 4.0, 0.9}};
    auto m = trailing_mean(tr, 1.0);
    CHECK(m.P == doctest::Approx(3.0));
    CHECK(m.Q == doctest::Approx(0.8));
    CHECK_THROWS_AS(trailing_mean(tr, 5.0), DomainError);
}

TEST_CASE("response from an estimate") {
    auto tr = short_step_trace();
    SimulationOptions o;
    o.max_step = 0.01;
    auto truth = response_from_estimate(reference_params(), tr, o);
    CHECK(truth.rmse.P <= 1e-6);
    CHECK(truth.rmse.Q <= 1e-6);
    auto off = reference_params();
    off.omega = 0.45;
    off.X_s = 0.11;
    auto fit = response_from_estimate(off, tr, o);
    CHECK(std::hypot(fit.rmse.P, fit.rmse.Q) > std::hypot(truth.rmse.P, truth.rmse.Q));
}

TEST_CASE("brute-force posterior") {
    auto tr = short_step_trace();
    BruteForceOptions opt;
    opt.simulation.max_step = 0.01;
    opt.truth = reference_params();

    SUBCASE("single parameter peaks at the node nearest the truth") {
        GridSpec g;
        g.dims.push_back({"omega", 0.0, 1.0, 21, DimensionKind::Parameter});
        auto b = brute_force_posterior(g, tr, reference_params(), opt);
        CHECK(b.tau == doctest::Approx(0.01).epsilon(1e-3));
        CHECK(b.mode()[0] == 10);  // node 10 sits at 0.5
        CHECK(b.marginal(0).integral() == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("a huge tau flattens the density") {
        GridSpec g;
        g.dims.push_back({"omega", 0.2, 0.8, 7, DimensionKind::Parameter});
        BruteForceOptions flat = opt;
        flat.tau = 1e6;
        auto b = brute_force_posterior(g, tr, reference_params(), flat);
        for (double v : b.density) CHECK(v == doctest::Approx(1.0 / 0.6).epsilon(1e-9));
    }
    SUBCASE("two parameters") {
        GridSpec g;
        g.dims.push_back({"omega", 0.0, 1.0, 11, DimensionKind::Parameter});
        g.dims.push_back({"X_s", 0.02, 0.3, 11, DimensionKind::Parameter});
        auto b = brute_force_posterior(g, tr, reference_params(), opt);
        auto m = b.mode();
        const double cell_w = 1.0 / 11, cell_x = 0.28 / 11;
        CHECK(std::abs(b.coordinates[0][m[0]] - 0.5) <= cell_w);
        CHECK(std::abs(b.coordinates[1][m[1]] - 0.096) <= cell_x);
        // nodes that cannot be initialized score zero
        bool some_infeasible = false;
        for (std::size_t q = 0; q < b.size(); ++q) {
            if (std::isnan(b.rmse[q])) {
                some_infeasible = true;
                CHECK(b.density[q] == 0.0);
            }
        }
        CHECK(some_infeasible);
    }
    SUBCASE("guards") {
        GridSpec g;
        for (const char* l : {"omega", "X_s", "H", "X_r"}) g.dims.push_back({l, 0.1, 0.9, 3, DimensionKind::Parameter});
        CHECK_THROWS_WITH_AS(brute_force_posterior(g, tr, reference_params(), opt),
                             doctest::Contains("concentration index"), DomainError);
    }
}

TEST_CASE("joint parameter mode matches a dense scan") {
    auto dom = grid4();
    const auto n = dom.mode_sizes();
    for (std::uint64_t seed : {41u, 42u, 43u}) {
        auto p = positive_random(dom, seed);
        auto dense = oracle::flatten(p);
        std::vector<double> table(n[2] * n[3], 0.0);
        std::vector<std::size_t> i(4, 0);
        std::size_t k = 0;
        do table[i[2] * n[3] + i[3]] += dense[k++];
        while (oracle::next_index(i, n));
        const auto best = static_cast<std::size_t>(std::max_element(table.begin(), table.end()) - table.begin());
        auto got = joint_parameter_mode(p, dom);
        REQUIRE(got.size() == 2);
        CHECK(got[0] == best / n[3]);
        CHECK(got[1] == best % n[3]);
    }
    CHECK_THROWS_AS(joint_parameter_mode(positive_random(dom, 1), dom, 10), SizeGuardError);
}
