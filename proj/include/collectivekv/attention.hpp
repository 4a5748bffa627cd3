#pragma once

#include <cmath>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

namespace detail {

/// Softmax of row[0..count) into out, with max-subtraction.
inline void softmax_span(const double* row, std::size_t count, double* out) {
    double mx = row[0];
    for (std::size_t j = 1; j < count; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < count; ++j) {
        out[j] = std::exp(row[j] - mx);
        sum += out[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < count; ++j) out[j] *= inv;
}

}  // namespace detail

/// Scaled dot-product attention of a single query against the sequence:
/// softmax(q·Kᵀ/√d_a)·V. `weights_out`, when non-null, receives the softmax
/// row (used by tests and by the backward pass).
inline Matrix target_attention(const Matrix& q, const Matrix& keys, const Matrix& values,
                               std::vector<double>* weights_out = nullptr) {
    if (q.rows() != 1 || q.cols() != keys.cols())
        throw shape_error("target_attention: query " + q.shape_str() + " vs keys " +
                          keys.shape_str());
    if (keys.rows() != values.rows() || keys.cols() != values.cols())
        throw shape_error("target_attention: keys " + keys.shape_str() + " vs values " +
                          values.shape_str());
    if (keys.rows() == 0) throw usage_error("target_attention: empty sequence");

    const std::size_t n = keys.rows(), d = keys.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* krow = keys.row_ptr(i);
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += q(0, c) * krow[c];
        scores[i] = acc * scale;
    }
    std::vector<double> weights(n);
    detail::softmax_span(scores.data(), n, weights.data());

    Matrix out(1, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights[i];
        const double* vrow = values.row_ptr(i);
        for (std::size_t c = 0; c < d; ++c) out(0, c) += w * vrow[c];
    }
    if (weights_out) *weights_out = std::move(weights);
    return out;
}

/// Sequence-to-sequence attention; with `causal` set, row i attends only to
/// rows <= i. `weights_out` receives the full s×s weight matrix (zeros above
/// the diagonal when causal).
inline Matrix self_attention(const Matrix& queries, const Matrix& keys, const Matrix& values,
                             bool causal, Matrix* weights_out = nullptr) {
    if (queries.rows() != keys.rows() || keys.rows() != values.rows() ||
        queries.cols() != keys.cols() || keys.cols() != values.cols())
        throw shape_error("self_attention: shape mismatch (" + queries.shape_str() + ", " +
                          keys.shape_str() + ", " + values.shape_str() + ")");
    if (queries.rows() == 0) throw usage_error("self_attention: empty sequence");

    const std::size_t s = queries.rows(), d = queries.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix out(s, d);
    Matrix weights(s, s);
    std::vector<double> scores(s);
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t limit = causal ? i + 1 : s;
        const double* qrow = queries.row_ptr(i);
        for (std::size_t j = 0; j < limit; ++j) {
            const double* krow = keys.row_ptr(j);
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += qrow[c] * krow[c];
            scores[j] = acc * scale;
        }
        detail::softmax_span(scores.data(), limit, weights.row_ptr(i));
        double* orow = out.row_ptr(i);
        for (std::size_t j = 0; j < limit; ++j) {
            const double w = weights(i, j);
            const double* vrow = values.row_ptr(j);
            for (std::size_t c = 0; c < d; ++c) orow[c] += w * vrow[c];
        }
    }
    if (weights_out) *weights_out = std::move(weights);
    return out;
}

namespace detail {

/// Backward through a softmax row: given dL/dw and w, produce dL/dscores:
/// ds_j = w_j·(dw_j - Σ_k w_k·dw_k).
inline void softmax_backward_span(const double* d_weights, const double* weights,
                                  std::size_t count, double* d_scores) {
    double mix = 0.0;
    for (std::size_t j = 0; j < count; ++j) mix += weights[j] * d_weights[j];
    for (std::size_t j = 0; j < count; ++j) d_scores[j] = weights[j] * (d_weights[j] - mix);
}

}  // namespace detail

/// Backward of target_attention. Accumulates into d_q, d_keys, d_values.
inline void target_attention_backward(const Matrix& q, const Matrix& keys,
                                      const Matrix& values,
                                      const std::vector<double>& weights,
                                      const Matrix& d_out, Matrix& d_q, Matrix& d_keys,
                                      Matrix& d_values) {
    const std::size_t n = keys.rows(), d = keys.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> d_weights(n), d_scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* vrow = values.row_ptr(i);
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            acc += d_out(0, c) * vrow[c];
            d_values(i, c) += weights[i] * d_out(0, c);
        }
        d_weights[i] = acc;
    }
    detail::softmax_backward_span(d_weights.data(), weights.data(), n, d_scores.data());
    for (std::size_t i = 0; i < n; ++i) {
        const double ds = d_scores[i] * scale;
        const double* krow = keys.row_ptr(i);
        double* dkrow = d_keys.row_ptr(i);
        for (std::size_t c = 0; c < d; ++c) {
            d_q(0, c) += ds * krow[c];
            dkrow[c] += ds * q(0, c);
        }
    }
}

/// Backward of self_attention. Accumulates into d_queries, d_keys, d_values.
inline void self_attention_backward(const Matrix& queries, const Matrix& keys,
                                    const Matrix& values, const Matrix& weights, bool causal,
                                    const Matrix& d_out, Matrix& d_queries, Matrix& d_keys,
                                    Matrix& d_values) {
    const std::size_t s = queries.rows(), d = queries.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> d_weights(s), d_scores(s);
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t limit = causal ? i + 1 : s;
        const double* drow = d_out.row_ptr(i);
        bool nonzero = false;
        for (std::size_t c = 0; c < d; ++c)
            if (drow[c] != 0.0) {
                nonzero = true;
                break;
            }
        if (!nonzero) continue;
        for (std::size_t j = 0; j < limit; ++j) {
            const double w = weights(i, j);
            const double* vrow = values.row_ptr(j);
            double* dvrow = d_values.row_ptr(j);
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                acc += drow[c] * vrow[c];
                dvrow[c] += w * drow[c];
            }
            d_weights[j] = acc;
        }
        detail::softmax_backward_span(d_weights.data(), weights.row_ptr(i), limit,
                                      d_scores.data());
        const double* qrow = queries.row_ptr(i);
        double* dqrow = d_queries.row_ptr(i);
        for (std::size_t j = 0; j < limit; ++j) {
            const double ds = d_scores[j] * scale;
            const double* krow = keys.row_ptr(j);
            double* dkrow = d_keys.row_ptr(j);
            for (std::size_t c = 0; c < d; ++c) {
                dqrow[c] += ds * krow[c];
                dkrow[c] += ds * qrow[c];
            }
        }
    }
}

}  // namespace ckv
