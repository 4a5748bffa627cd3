#pragma once

#include <cmath>
#include <vector>

#include "collectivekv/errors.hpp"

namespace ckv {

/// Silverman's rule-of-thumb bandwidth h = 1.06·σ̂·n^(-1/5).
inline double silverman_bandwidth(const std::vector<double>& samples) {
    const std::size_t n = samples.size();
    if (n < 2)
        throw usage_error("silverman_bandwidth: need at least 2 samples, got " +
                          std::to_string(n));
    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(n - 1);
    const double sd = std::sqrt(var);
    if (sd <= 0.0)
        throw usage_error("silverman_bandwidth: zero sample variance; pass an explicit bandwidth");
    return 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
}

/// Gaussian-kernel density estimate evaluated at each grid point.
/// bandwidth <= 0 selects Silverman's rule.
inline std::vector<double> kde_density(const std::vector<double>& samples,
                                       const std::vector<double>& grid,
                                       double bandwidth = 0.0) {
    if (samples.empty()) throw usage_error("kde_density: empty sample set");
    const double h = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(samples);

    const double inv_h = 1.0 / h;
    const double norm =
        inv_h / (static_cast<double>(samples.size()) * std::sqrt(2.0 * M_PI));
    std::vector<double> density(grid.size(), 0.0);
    for (std::size_t g = 0; g < grid.size(); ++g) {
        double acc = 0.0;
        for (double s : samples) {
            const double z = (grid[g] - s) * inv_h;
            acc += std::exp(-0.5 * z * z);
        }
        density[g] = acc * norm;
    }
    return density;
}

struct KdeCurve {
    std::vector<double> grid;
    std::vector<double> density;
    double bandwidth = 0.0;
};

/// Density over a uniform grid spanning [min-4h, max+4h], which captures
/// essentially all of the mass (the trapezoidal integral is ~1).
inline KdeCurve kde_curve(const std::vector<double>& samples, std::size_t grid_points = 201,
                          double bandwidth = 0.0) {
    if (samples.empty()) throw usage_error("kde_curve: empty sample set");
    if (grid_points < 2) throw usage_error("kde_curve: need at least 2 grid points");
    KdeCurve curve;
    curve.bandwidth = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(samples);
    double lo = samples[0], hi = samples[0];
    for (double s : samples) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    lo -= 4.0 * curve.bandwidth;
    hi += 4.0 * curve.bandwidth;
    curve.grid.resize(grid_points);
    const double step = (hi - lo) / static_cast<double>(grid_points - 1);
    for (std::size_t i = 0; i < grid_points; ++i)
        curve.grid[i] = lo + step * static_cast<double>(i);
    curve.density = kde_density(samples, curve.grid, curve.bandwidth);
    return curve;
}

inline double trapezoid_integral(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw usage_error("trapezoid_integral: need matching x/y of length >= 2");
    double acc = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i)
        acc += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
    return acc;
}

}  // namespace ckv
