#include <doctest.h>

#include <cmath>
#include <limits>

#include "clmtt/error.hpp"
#include "clmtt/tt_cross.hpp"
#include "oracles.hpp"

using namespace clmtt;
using namespace clmtt::tt;

TEST_CASE("maxvol picks a dominant submatrix") {
    Matrix a(5, 2);
    a << 1, 0, 0, 1, 10, 1, 1, 10, 0.5, 0.5;
    auto rows = maxvol(a);
    std::sort(rows.begin(), rows.end());
    CHECK(rows == std::vector<std::size_t>{2, 3});
}

TEST_CASE("separable function gives rank one") {
    std::vector<std::size_t> n{7, 6, 5};
    auto f = [](std::span<const std::size_t> i) {
        return (1.0 + i[0]) * std::exp(-0.3 * i[1]) * (2.0 + std::sin(double(i[2])));
    };
    auto r = cross(f, n);
    CHECK(r.tensor.max_rank() == 1);
    CHECK(r.sampled_error < 1e-13);
}

TEST_CASE("constant function") {
    std::vector<std::size_t> n{4, 4, 4, 4};
    auto r = cross([](std::span<const std::size_t>) { return 2.5; }, n);
    CHECK(r.tensor.max_rank() == 1);
    CHECK(r.tensor.entry(std::vector<std::size_t>{1, 2, 3, 0}) == doctest::Approx(2.5));
}

TEST_CASE("smooth non-separable function matches tabulation") {
    std::vector<std::size_t> n{17, 17, 17};
    auto f = [](std::span<const std::size_t> i) {
        const double x = i[0] / 16.0, y = i[1] / 16.0, z = i[2] / 16.0;
        return 1.0 / (1.0 + x + y * y + 0.5 * z) + x * y * z;
    };
    CrossOptions opt;
    opt.tolerance = 1e-9;
    auto r = cross(f, n, opt);
    std::vector<double> exact;
    std::vector<std::size_t> i(3, 0);
    do exact.push_back(f(i));
    while (oracle::next_index(i, n));
    CHECK(oracle::rel_diff(oracle::flatten(r.tensor), exact) <= 1e-8);
}

TEST_CASE("a dimension the function ignores does not stall rank growth") {
    // rank 4 in the first three indices, constant along the last two
    std::vector<std::size_t> n{9, 9, 9, 11, 7};
    auto f = [](std::span<const std::size_t> i) {
        const double x = i[0] / 8.0, y = i[1] / 8.0, z = i[2] / 8.0, p = i[4] / 6.0;
        return x * (1.0 + p) + y * y * (2.0 - p) + z * p + x * y * z + 0.3;
    };
    auto r = cross(f, n);
    std::vector<double> exact;
    std::vector<std::size_t> i(5, 0);
    do exact.push_back(f(i));
    while (oracle::next_index(i, n));
    CHECK(oracle::rel_diff(oracle::flatten(r.tensor), exact) <= 1e-10);
}

TEST_CASE("non-finite value reports the index") {
    std::vector<std::size_t> n{3, 3};
    auto f = [](std::span<const std::size_t> i) {
        return i[0] == 2 && i[1] == 1 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    };
    try {
        cross(f, n);
        FAIL("expected EvaluationError");
    } catch (const EvaluationError& e) {
        CHECK(std::string(e.what()).find("(2,1)") != std::string::npos);
    }
}

TEST_CASE("one-dimensional input is tabulated") {
    std::vector<std::size_t> n{9};
    auto r = cross([](std::span<const std::size_t> i) { return double(i[0] * i[0]); }, n);
    CHECK(r.tensor.entry(std::vector<std::size_t>{3}) == 9.0);
}
