#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

/// Deterministic counter-based RNG (splitmix64 core). Every randomized
/// procedure in the library draws from one of these, so a run is a pure
/// function of its seeds. Normal deviates use a rational inverse-CDF
/// approximation instead of Box-Muller: it needs only +-*/ and sqrt in the
/// central region, which keeps streams reproducible across libm versions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Lemire's multiply-shift; unbiased enough
    /// for data generation and bit-stable everywhere.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double normal() { return inverse_normal_cdf(next_open_unit()); }

    void fill_uniform(Matrix& m, double lo, double hi) {
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
    }

    void fill_normal(Matrix& m, double stddev = 1.0) {
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal();
    }

    Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
        Matrix m(rows, cols);
        fill_uniform(m, lo, hi);
        return m;
    }

    /// Derive an independent stream seed, e.g. per sweep arm or per epoch.
    static std::uint64_t derive(std::uint64_t base, std::uint64_t stream) {
        std::uint64_t z = base ^ (0x9E3779B97F4A7C15ull + stream * 0xD1B54A32D192ED03ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    static std::uint64_t derive(std::uint64_t base, const std::string& name) {
        std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001B3ull;
        }
        return derive(base, h);
    }

  private:
    double next_open_unit() {
        // (0, 1) exclusive on both ends; inverse CDF diverges at 0 and 1.
        double u;
        do {
            u = uniform();
        } while (u <= 0.0);
        return u;
    }

    /// Acklam's rational approximation to Φ⁻¹, |relative error| < 1.2e-9.
    static double inverse_normal_cdf(double p) {
        static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                        -2.759285104469687e+02, 1.383577518672690e+02,
                                        -3.066479806614716e+01, 2.506628277459239e+00};
        static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                        -1.556989798598866e+02, 6.680131188771972e+01,
                                        -1.328068155288572e+01};
        static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                        -2.400758277161838e+00, -2.549732539343734e+00,
                                        4.374664141464968e+00,  2.938163982698783e+00};
        static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                        2.445134137142996e+00, 3.754408661907416e+00};
        static constexpr double p_low = 0.02425;

        if (p < p_low) {
            const double q = std::sqrt(-2.0 * std::log(p));
            return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
        }
        if (p > 1.0 - p_low) {
            const double q = std::sqrt(-2.0 * std::log(1.0 - p));
            return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
        }
        const double q = p - 0.5;
        const double r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }

    std::uint64_t state_;
};

}  // namespace ckv
