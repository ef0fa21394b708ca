#include <doctest.h>

#include <random>

#include "clmtt/error.hpp"
#include "clmtt/fokker_planck.hpp"
#include "clmtt/grid.hpp"

using namespace clmtt;

namespace {

GridSpec five_dims(std::size_t n) {
    GridSpec s;
    s.dims.push_back({"v_d", 0.15, 0.35, n, DimensionKind::State});
    s.dims.push_back({"omega", 0.0, 1.0, n, DimensionKind::Parameter});
    s.dims.push_back({"v_q", 0.35, 0.9, n, DimensionKind::State});
    s.dims.push_back({"s", 0.0, 0.2, n, DimensionKind::State});
    s.dims.push_back({"X_s", 0.02, 0.3, n, DimensionKind::Parameter});
    return s;
}

}  // namespace

TEST_CASE("cell-centered nodes") {
    GridSpec s;
    s.dims.push_back({"x", 0.0, 1.0, 4, DimensionKind::State});
    s.dims.push_back({"y", -1.0, 1.0, 2, DimensionKind::State});
    s.dims.push_back({"z", 0.0, 2.0, 4, DimensionKind::Parameter});
    auto g = build_grid(s);
    const std::vector<double> want{0.125, 0.375, 0.625, 0.875};
    for (std::size_t k = 0; k < 4; ++k) CHECK(g.coordinate(0, k) == doctest::Approx(want[k]).epsilon(1e-15));
    CHECK(g.step(0) == 0.25);
    CHECK(g.coordinate(1, 0) == -0.5);
    CHECK(g.coordinate(1, 1) == 0.5);
    CHECK(g.step(1) == 1.0);
    CHECK(quadrature_weight(g, 0) == 0.25);
    CHECK(quadrature_weight(g, 2) == 0.5);
    CHECK_THROWS_AS(quadrature_weight(g, 3), IndexError);
    for (std::size_t d = 0; d < g.dim_count(); ++d) {
        CHECK(quadrature_weight(g, d) * g.size(d) == doctest::Approx(g.dim(d).upper - g.dim(d).lower));
    }
}

TEST_CASE("states come first and counts multiply") {
    auto g = build_grid(five_dims(9));
    CHECK(g.state_count() == 3);
    CHECK(g.parameter_count() == 2);
    CHECK(g.dim(0).label == "v_d");
    CHECK(g.dim(1).label == "v_q");
    CHECK(g.dim(2).label == "s");
    CHECK(g.dim(3).label == "omega");
    CHECK(g.dim(4).label == "X_s");
    CHECK(g.total_points() == 59049);
    CHECK(g.find("X_s") == 4);
    CHECK(g.contains("s"));
    CHECK_FALSE(g.contains("H"));
    CHECK_THROWS_AS(g.find("H"), IndexError);
}

TEST_CASE("node layout properties") {
    auto g = build_grid(five_dims(7));
    for (std::size_t d = 0; d < g.dim_count(); ++d) {
        const auto& spec = g.dim(d);
        const double mid = 0.5 * (spec.lower + spec.upper);
        for (std::size_t k = 0; k < g.size(d); ++k) {
            CHECK(g.coordinate(d, k) > spec.lower);
            CHECK(g.coordinate(d, k) < spec.upper);
            if (k > 0) CHECK(g.coordinate(d, k) > g.coordinate(d, k - 1));
            CHECK(g.coordinate(d, k) - mid == doctest::Approx(mid - g.coordinate(d, g.size(d) - 1 - k)));
        }
    }
    // midpoint rule integrates 1 to the volume
    auto w = quadrature_weights(g);
    auto one = tt::TtVector::constant(g.mode_sizes(), 1.0);
    CHECK(integral(one, g) == doctest::Approx(g.volume()).epsilon(1e-14));
    CHECK(g.volume() == doctest::Approx(0.2 * 1.0 * 0.55 * 0.2 * 0.28));
}

TEST_CASE("index maps") {
    auto g = build_grid(five_dims(3));
    std::vector<std::size_t> zero(5, 0);
    CHECK(g.linear_index(zero) == 0);
    std::vector<std::size_t> last(5, 2);
    CHECK(g.linear_index(last) == g.total_points() - 1);
    for (std::size_t k = 0; k < g.total_points(); ++k) CHECK(g.linear_index(g.multi_index(k)) == k);
    // row-major, last dimension fastest
    std::vector<std::size_t> i{0, 0, 0, 0, 1};
    CHECK(g.linear_index(i) == 1);
    i = {1, 0, 0, 0, 0};
    CHECK(g.linear_index(i) == 81);

    auto big = build_grid(five_dims(17));
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> u(0, 16);
    for (int t = 0; t < 1000; ++t) {
        std::vector<std::size_t> m(5);
        for (auto& v : m) v = u(rng);
        CHECK(big.multi_index(big.linear_index(m)) == m);
    }
    i = {0, 0, 3, 0, 0};
    CHECK_THROWS_AS(g.linear_index(i), IndexError);
    std::vector<std::size_t> shortm(4, 0);
    CHECK_THROWS_AS(g.linear_index(shortm), IndexError);
    CHECK_THROWS_AS(g.multi_index(g.total_points()), IndexError);
}

TEST_CASE("huge grids saturate the point count") {
    GridSpec s;
    for (int d = 0; d < 14; ++d) {
        s.dims.push_back({"p" + std::to_string(d), 0.0, 1.0, 33,
                          d < 3 ? DimensionKind::State : DimensionKind::Parameter});
    }
    auto g = build_grid(s);
    CHECK(g.total_points() == SIZE_MAX);
    CHECK(g.total_points_real() == doctest::Approx(std::pow(33.0, 14)));
}

TEST_CASE("grid validation") {
    auto s = five_dims(5);
    s.dims[0].lower = 0.5;
    CHECK_THROWS_WITH_AS(build_grid(s), doctest::Contains("v_d"), DomainError);
    s = five_dims(5);
    s.dims[1].upper = s.dims[1].lower;
    CHECK_THROWS_AS(build_grid(s), DomainError);
    s = five_dims(5);
    s.dims[2].nodes = 1;
    CHECK_THROWS_AS(build_grid(s), DomainError);
    s = five_dims(5);
    s.dims[3].label = "v_d";
    CHECK_THROWS_WITH_AS(build_grid(s), doctest::Contains("duplicate"), DomainError);
    s = GridSpec{};
    CHECK_THROWS_AS(build_grid(s), DomainError);
    for (int d = 0; d < 12; ++d) s.dims.push_back({"q" + std::to_string(d), 0.0, 1.0, 2, DimensionKind::Parameter});
    CHECK_THROWS_AS(build_grid(s), DomainError);
}
