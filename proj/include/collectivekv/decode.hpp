#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "collectivekv/attention.hpp"
#include "collectivekv/cache.hpp"
#include "collectivekv/errors.hpp"
#include "collectivekv/latency.hpp"
#include "collectivekv/model.hpp"

namespace ckv {

struct DecodeResult {
    Matrix attention_out;  // 1×d_a
    double logit = 0.0;
    double prob = 0.0;
    double simulated_load_ms = 0.0;  // tier model applied to the entry payload
    double measured_load_ms = 0.0;   // wall clock of the actual entry read
};

namespace detail {

/// Single-query attention over a cached entry: K/V row i is the stored
/// user-specific part concatenated with the referenced pool row. The
/// accumulation order matches the dense attention kernel exactly, so with
/// f64-width entries the result is bit-identical to a from-scratch forward.
inline Matrix attend_cached(const Matrix& q, const CacheEntry& entry, const GatherView* view,
                            std::size_t d_a) {
    const std::size_t n = entry.seq_len;
    const std::size_t du = entry.side_dim;
    const std::size_t dg = d_a - du;
    if (n == 0) throw usage_error("decode: cached entry is empty");

    const double scale = 1.0 / std::sqrt(static_cast<double>(d_a));
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        const double* urow = entry.user_keys.row_ptr(i);
        for (std::size_t c = 0; c < du; ++c) acc += q(0, c) * urow[c];
        if (dg > 0) {
            const double* prow = view->key_rows[i];
            for (std::size_t c = 0; c < dg; ++c) acc += q(0, du + c) * prow[c];
        }
        scores[i] = acc * scale;
    }
    std::vector<double> weights(n);
    softmax_span(scores.data(), n, weights.data());

    Matrix out(1, d_a);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights[i];
        const double* urow = entry.user_values.row_ptr(i);
        for (std::size_t c = 0; c < du; ++c) out(0, c) += w * urow[c];
        if (dg > 0) {
            const double* prow = view->value_rows[i];
            for (std::size_t c = 0; c < dg; ++c) out(0, du + c) += w * prow[c];
        }
    }
    return out;
}

}  // namespace detail

/// Decode stage: fetch the user's cached artifact, resolve its pool indices
/// against the resident global pool, and answer the query. `query` is the
/// target-item embedding in target mode and the latest history-item embedding
/// in self mode (where `target` still feeds the output head).
inline DecodeResult decode(const CacheStore& store, const std::string& user_id,
                           const Matrix& query, const Matrix& target, const ModelConfig& cfg,
                           const ModelParams& params, const TierModel& tier) {
    const auto t0 = std::chrono::steady_clock::now();
    const CacheEntry entry = store.get(user_id);
    const auto t1 = std::chrono::steady_clock::now();

    DecodeResult res;
    res.measured_load_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    res.simulated_load_ms = simulated_load_latency(entry.payload_bytes(), tier);

    const std::size_t d_a = cfg.collective.attn_dim();
    if (entry.routed() && entry.side_dim != cfg.collective.user_dim)
        throw usage_error("decode: entry dimension " + std::to_string(entry.side_dim) +
                          " does not match configured user_dim");
    if (!entry.routed() && entry.side_dim != d_a)
        throw usage_error("decode: full-width entry dimension mismatch");

    GatherView view;
    if (entry.routed()) view = gather_view(params.collective.pool, entry);

    const Matrix q = matmul(query, params.attn.query_weight);
    Matrix attn = detail::attend_cached(q, entry, entry.routed() ? &view : nullptr, d_a);

    // Head input: attended vector gated by the projected candidate, exactly
    // as in ctr_forward.
    const Matrix tq =
        cfg.attn_mode == AttnMode::kTarget ? q : matmul(target, params.attn.query_weight);
    Matrix feat(1, d_a);
    for (std::size_t c = 0; c < d_a; ++c) feat(0, c) = attn(0, c) * tq(0, c);
    res.logit = dot(feat, params.attn.out_weight.transposed()) + params.attn.out_bias(0, 0);
    res.prob = sigmoid(res.logit);
    res.attention_out = std::move(attn);
    return res;
}

}  // namespace ckv
