#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "collectivekv/kde.hpp"
#include "collectivekv/rng.hpp"

using namespace ckv;

TEST_CASE("single kernel at its own center") {
    const auto density = kde_density({0.0}, {0.0}, 1.0);
    CHECK(density[0] == Catch::Approx(1.0 / std::sqrt(2.0 * M_PI)).margin(1e-12));
}

TEST_CASE("symmetric samples give a symmetric density") {
    const std::vector<double> samples = {-1.0, 1.0};
    const std::vector<double> grid = {-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0};
    const auto density = kde_density(samples, grid, 0.7);
    for (std::size_t i = 0; i < grid.size() / 2; ++i)
        CHECK(density[i] == Catch::Approx(density[grid.size() - 1 - i]).margin(1e-14));
}

TEST_CASE("large normal sample recovers the normal pdf at 0") {
    Rng rng(777);
    std::vector<double> samples(10000);
    for (double& s : samples) s = rng.normal();
    const auto density = kde_density(samples, {0.0});
    CHECK(std::abs(density[0] - 0.3989422804) < 0.05);
}

TEST_CASE("density integrates to about one and is nonnegative") {
    Rng rng(4);
    std::vector<double> samples(500);
    for (double& s : samples) s = rng.uniform(-3.0, 2.0);
    const KdeCurve curve = kde_curve(samples, 801);
    for (double d : curve.density) CHECK(d >= 0.0);
    const double integral = trapezoid_integral(curve.grid, curve.density);
    CHECK(integral >= 0.99);
    CHECK(integral <= 1.01);
}

TEST_CASE("density is invariant under sample permutation") {
    Rng rng(15);
    std::vector<double> samples(64);
    for (double& s : samples) s = rng.normal();
    std::vector<double> grid = {-1.0, 0.0, 0.5, 2.0};
    const auto before = kde_density(samples, grid, 0.4);
    std::reverse(samples.begin(), samples.end());
    const auto after = kde_density(samples, grid, 0.4);
    for (std::size_t i = 0; i < grid.size(); ++i)
        CHECK(before[i] == Catch::Approx(after[i]).margin(1e-15));
}

TEST_CASE("empty samples and degenerate bandwidth are rejected") {
    CHECK_THROWS_AS(kde_density({}, {0.0}), usage_error);
    // Auto bandwidth needs spread; identical samples have none.
    CHECK_THROWS_AS(kde_density({1.0, 1.0, 1.0}, {0.0}), usage_error);
    // But an explicit bandwidth makes them fine.
    CHECK_NOTHROW(kde_density({1.0, 1.0, 1.0}, {0.0}, 0.5));
}

TEST_CASE("silverman bandwidth matches the rule of thumb") {
    // For {-1, 1}: σ̂ = √2 (n-1 denominator), so h = 1.06·√2·2^(-1/5).
    const double h = silverman_bandwidth({-1.0, 1.0});
    CHECK(h == Catch::Approx(1.06 * std::sqrt(2.0) * std::pow(2.0, -0.2)).epsilon(1e-12));
}
