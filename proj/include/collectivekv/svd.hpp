#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

struct SvdResult {
    std::vector<double> singular_values;  // descending, >= 0
    Matrix right_vectors;                 // d×d, columns are v_i
    Matrix left_vectors;                  // n×d when requested, else empty
};

namespace detail {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. `a` is destroyed;
/// eigenvectors accumulate in the columns of `v`. Stops when the off-diagonal
/// Frobenius norm falls below 1e-12 of the input norm, or after 100 sweeps.
inline void jacobi_eigen_symmetric(Matrix& a, Matrix& v, std::vector<double>& eigenvalues) {
    const std::size_t d = a.rows();
    v = Matrix::identity(d);

    const double total_norm = frobenius_norm(a);
    const double off_tol = 1e-12 * total_norm;

    auto off_norm = [&]() {
        double acc = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) acc += 2.0 * a(p, q) * a(p, q);
        return std::sqrt(acc);
    };

    for (int sweep = 0; sweep < 100 && off_norm() > off_tol; ++sweep) {
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double sign = theta >= 0.0 ? 1.0 : -1.0;
                const double t = sign / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double cos = 1.0 / std::sqrt(t * t + 1.0);
                const double sin = t * cos;
                const double tau = sin / (1.0 + cos);

                const double app = a(p, p), aqq = a(q, q);
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t r = 0; r < d; ++r) {
                    if (r != p && r != q) {
                        const double arp = a(r, p), arq = a(r, q);
                        a(r, p) = a(p, r) = arp - sin * (arq + tau * arp);
                        a(r, q) = a(q, r) = arq + sin * (arp - tau * arq);
                    }
                    const double vrp = v(r, p), vrq = v(r, q);
                    v(r, p) = vrp - sin * (vrq + tau * vrp);
                    v(r, q) = vrq + sin * (vrp - tau * vrq);
                }
            }
        }
    }

    eigenvalues.resize(d);
    for (std::size_t i = 0; i < d; ++i) eigenvalues[i] = a(i, i);
}

}  // namespace detail

/// Thin SVD via Jacobi eigendecomposition of inputᵀ·input. Requires
/// rows >= cols; left vectors (U with input = U·diag(σ)·Vᵀ) are computed
/// only on request. Each right-singular vector's sign is fixed so its
/// largest-magnitude component is positive, making results reproducible.
inline SvdResult svd(const Matrix& input, bool want_left = false) {
    const std::size_t n = input.rows(), d = input.cols();
    if (n < d)
        throw shape_error("svd: requires rows >= cols, got " + input.shape_str());
    if (!input.all_finite()) throw numeric_error("svd: input contains NaN/Inf");

    Matrix gram = matmul_tn(input, input);  // d×d
    Matrix v;
    std::vector<double> eig;
    detail::jacobi_eigen_symmetric(gram, v, eig);

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return eig[i] > eig[j]; });

    SvdResult out;
    out.singular_values.resize(d);
    out.right_vectors = Matrix(d, d);
    for (std::size_t j = 0; j < d; ++j) {
        const std::size_t src = order[j];
        out.singular_values[j] = std::sqrt(std::max(eig[src], 0.0));
        // Sign convention: largest-|entry| component positive.
        std::size_t arg = 0;
        for (std::size_t i = 1; i < d; ++i)
            if (std::abs(v(i, src)) > std::abs(v(arg, src))) arg = i;
        const double flip = v(arg, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i) out.right_vectors(i, j) = flip * v(i, src);
    }

    if (want_left) {
        out.left_vectors = Matrix(n, d);
        Matrix av = matmul(input, out.right_vectors);  // n×d, columns = σ_i·u_i
        const double tiny =
            out.singular_values.empty() ? 0.0 : out.singular_values[0] * 1e-13;
        for (std::size_t j = 0; j < d; ++j) {
            const double s = out.singular_values[j];
            if (s <= tiny) continue;  // null-direction columns stay zero
            for (std::size_t i = 0; i < n; ++i) out.left_vectors(i, j) = av(i, j) / s;
        }
    }
    return out;
}

/// Σσ², which equals ‖input‖_F² up to roundoff.
inline double singular_energy(const SvdResult& r) {
    double acc = 0.0;
    for (double s : r.singular_values) acc += s * s;
    return acc;
}

}  // namespace ckv
