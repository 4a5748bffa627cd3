#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"
#include "collectivekv/rng.hpp"

namespace ckv {

enum class Mode { kTraining, kInference };

/// Dimensions and knobs of the cross-user KV sharing mechanism. The attention
/// dimension is always user_dim + global_dim; a side with its share flag off
/// falls back to a plain full-width projection (the baseline arm has both
/// flags off).
struct CollectiveConfig {
    std::size_t embed_dim = 32;   // d_e
    std::size_t user_dim = 4;     // d_u
    std::size_t global_dim = 28;  // d_g
    std::size_t pool_size = 64;   // m
    double peak_weight = 0.01;
    double balance_weight = 1.0;
    bool share_keys = true;
    bool share_values = true;
    bool tie_routers = false;  // one router head feeding both sides

    std::size_t attn_dim() const { return user_dim + global_dim; }
    bool any_shared() const { return share_keys || share_values; }

    void validate() const {
        if (embed_dim == 0) throw usage_error("collective config: embed_dim must be >= 1");
        if (attn_dim() == 0)
            throw usage_error("collective config: user_dim + global_dim must be >= 1");
        if (any_shared() && pool_size == 0)
            throw usage_error("collective config: pool_size must be >= 1 when sharing");
        if (peak_weight < 0.0 || balance_weight < 0.0)
            throw usage_error("collective config: loss weights must be >= 0");
        if (tie_routers && !(share_keys && share_values))
            throw usage_error("collective config: tie_routers requires both sides shared");
    }
};

/// Low-dimensional user-specific projections (Eq. 5 of the mechanism):
/// K_u = S·W_k + b_k, V_u = S·W_v + b_v.
struct UserProjection {
    Matrix key_weight, key_bias;      // d_e×d_u, 1×d_u
    Matrix value_weight, value_bias;  // d_e×d_u, 1×d_u
};

struct RouterHead {
    Matrix weight;  // d_e×m
    Matrix bias;    // 1×m
};

/// Two independent router heads; the value head is left empty when routers
/// are tied or the value side is unshared.
struct RouterParams {
    RouterHead key;
    RouterHead value;
};

/// Learnable global pools shared by every user.
struct GlobalPool {
    Matrix keys;    // m×d_g
    Matrix values;  // m×d_g
};

/// Full-width d_e→d_a projections used by whichever side is not shared.
struct FullProjection {
    Matrix key_weight, key_bias;
    Matrix value_weight, value_bias;
};

struct CollectiveParams {
    UserProjection proj;
    RouterParams router;
    GlobalPool pool;
    FullProjection full;
};

/// Per-item router outputs: raw logits and the argmax pool index per row.
/// Ties resolve to the lowest index so routing is platform-stable.
struct RoutingMap {
    Matrix logits;             // n×m
    std::vector<int> indices;  // n entries in [0, m)
};

inline RoutingMap make_routing(Matrix logits) {
    RoutingMap map;
    const std::size_t n = logits.rows(), m = logits.cols();
    if (m == 0) throw shape_error("make_routing: zero-width logits");
    map.indices.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.row_ptr(i);
        std::size_t best = 0;
        for (std::size_t j = 1; j < m; ++j)
            if (row[j] > row[best]) best = j;
        map.indices[i] = static_cast<int>(best);
    }
    map.logits = std::move(logits);
    return map;
}

/// M = S·W_r + b_r followed by per-row argmax (Eq. 8).
inline RoutingMap route(const Matrix& s, const RouterHead& head) {
    if (!s.all_finite()) throw numeric_error("route: input contains NaN/Inf");
    return make_routing(linear(s, head.weight, head.bias));
}

inline double selected_logit(const RoutingMap& map, std::size_t i) {
    return map.logits(i, static_cast<std::size_t>(map.indices[i]));
}

/// Gather pool rows per item. In training the row is scaled by the sigmoid of
/// its selected logit so gradients can reach the router (Eq. 9); in inference
/// the row is copied verbatim (Eq. 6).
inline Matrix gather_collective(const Matrix& pool, const RoutingMap& map, Mode mode) {
    const std::size_t n = map.indices.size(), dg = pool.cols();
    Matrix out(n, dg);
    for (std::size_t i = 0; i < n; ++i) {
        const int idx = map.indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= pool.rows())
            throw numeric_error("gather_collective: routing index " + std::to_string(idx) +
                                " outside pool of " + std::to_string(pool.rows()) + " rows");
        const double* src = pool.row_ptr(static_cast<std::size_t>(idx));
        double* dst = out.row_ptr(i);
        if (mode == Mode::kTraining) {
            const double gate = sigmoid(selected_logit(map, i));
            for (std::size_t c = 0; c < dg; ++c) dst[c] = gate * src[c];
        } else {
            for (std::size_t c = 0; c < dg; ++c) dst[c] = src[c];
        }
    }
    return out;
}

/// K = concat(K_u, K_c) along columns (Eq. 7).
inline Matrix assemble_kv(const Matrix& user_part, const Matrix& collective_part) {
    return hconcat(user_part, collective_part);
}

/// K_u = S·W_k + b_k and V_u = S·W_v + b_v.
inline std::pair<Matrix, Matrix> project_user_specific(const Matrix& s,
                                                       const UserProjection& proj) {
    return {linear(s, proj.key_weight, proj.key_bias),
            linear(s, proj.value_weight, proj.value_bias)};
}

/// Peak loss (Eq. 10): -mean log σ(selected logit). Pushes gates toward 1 so
/// the gated training gather converges to the plain inference gather.
inline double peak_loss(const RoutingMap& map) {
    const std::size_t n = map.indices.size();
    if (n == 0) throw usage_error("peak_loss: empty routing map");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = selected_logit(map, i);
        // log σ(x) = -log(1 + e^{-x}), computed without overflow.
        acc += x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
    }
    return -acc / static_cast<double>(n);
}

namespace detail {

/// Row-wise softmax with max-subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* in = logits.row_ptr(i);
        double* o = out.row_ptr(i);
        double mx = in[0];
        for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < logits.cols(); ++j) o[j] *= inv;
    }
    return out;
}

inline std::vector<double> mean_selection_probs(const Matrix& softmax) {
    std::vector<double> avg(softmax.cols(), 0.0);
    for (std::size_t i = 0; i < softmax.rows(); ++i) {
        const double* row = softmax.row_ptr(i);
        for (std::size_t j = 0; j < softmax.cols(); ++j) avg[j] += row[j];
    }
    const double inv = 1.0 / static_cast<double>(softmax.rows());
    for (double& v : avg) v *= inv;
    return avg;
}

inline double balance_from_probs(const std::vector<double>& avg) {
    const double m = static_cast<double>(avg.size());
    double loss = 0.0;
    for (double p : avg)
        if (p > 0.0) loss += p * std::log(m * p);
    return std::max(loss, 0.0);  // clamp -0.0/roundoff at the uniform point
}

}  // namespace detail

/// Load-balance loss (Eq. 11): KL between the average softmax selection
/// distribution and uniform. Zero iff the average is exactly uniform; bounded
/// above by ln m.
inline double balance_loss(const RoutingMap& map) {
    if (map.indices.empty()) throw usage_error("balance_loss: empty routing map");
    return detail::balance_from_probs(
        detail::mean_selection_probs(detail::softmax_rows(map.logits)));
}

/// Everything the backward pass needs from one shared side's forward.
struct SideContext {
    bool shared = false;
    RoutingMap map;
    Matrix softmax;               // n×m (training only)
    std::vector<double> gates;    // σ(selected logit) per item (training only)
    double peak = 0.0;
    double balance = 0.0;
};

struct CollectiveOutput {
    Matrix keys;    // n×d_a
    Matrix values;  // n×d_a
    double peak = 0.0;     // mean over active sides
    double balance = 0.0;  // mean over active sides
    double aux = 0.0;      // peak_weight·peak + balance_weight·balance
    Mode mode = Mode::kInference;
    SideContext key_side;
    SideContext value_side;
};

namespace detail {

inline void forward_side(const Matrix& s, bool shared, const Matrix& user_w,
                         const Matrix& user_b, const RouterHead& head, const Matrix& pool,
                         const Matrix& full_w, const Matrix& full_b, Mode mode, Matrix& out,
                         SideContext& ctx) {
    ctx.shared = shared;
    if (!shared) {
        out = linear(s, full_w, full_b);
        return;
    }
    Matrix user_part = linear(s, user_w, user_b);
    ctx.map = route(s, head);
    Matrix collective_part = gather_collective(pool, ctx.map, mode);
    ctx.peak = peak_loss(ctx.map);
    if (mode == Mode::kTraining) {
        ctx.softmax = softmax_rows(ctx.map.logits);
        ctx.balance = balance_from_probs(mean_selection_probs(ctx.softmax));
        ctx.gates.resize(ctx.map.indices.size());
        for (std::size_t i = 0; i < ctx.gates.size(); ++i)
            ctx.gates[i] = sigmoid(selected_logit(ctx.map, i));
    } else {
        ctx.balance = balance_loss(ctx.map);
    }
    out = assemble_kv(user_part, collective_part);
}

}  // namespace detail

/// Full mechanism forward: user-specific projection + routed pool gather per
/// shared side, plain projection per unshared side. Peak/balance losses are
/// averaged over the active (shared) sides and weighted into `aux`.
inline CollectiveOutput collective_forward(const Matrix& s, const CollectiveConfig& cfg,
                                           const CollectiveParams& params, Mode mode) {
    cfg.validate();
    if (s.cols() != cfg.embed_dim)
        throw shape_error("collective_forward: input " + s.shape_str() +
                          " does not match embed_dim " + std::to_string(cfg.embed_dim));
    if (s.rows() == 0) throw usage_error("collective_forward: empty sequence");

    CollectiveOutput out;
    out.mode = mode;

    const RouterHead& value_head = cfg.tie_routers ? params.router.key : params.router.value;
    detail::forward_side(s, cfg.share_keys, params.proj.key_weight, params.proj.key_bias,
                         params.router.key, params.pool.keys, params.full.key_weight,
                         params.full.key_bias, mode, out.keys, out.key_side);
    detail::forward_side(s, cfg.share_values, params.proj.value_weight, params.proj.value_bias,
                         value_head, params.pool.values, params.full.value_weight,
                         params.full.value_bias, mode, out.values, out.value_side);

    int active = 0;
    double peak_sum = 0.0, balance_sum = 0.0;
    for (const SideContext* side : {&out.key_side, &out.value_side}) {
        if (!side->shared) continue;
        ++active;
        peak_sum += side->peak;
        balance_sum += side->balance;
    }
    if (active > 0) {
        out.peak = peak_sum / active;
        out.balance = balance_sum / active;
        out.aux = cfg.peak_weight * out.peak + cfg.balance_weight * out.balance;
    }
    return out;
}

/// Gradient mirror of CollectiveParams; inactive tensors stay empty.
struct CollectiveGrads {
    UserProjection proj;
    RouterParams router;
    GlobalPool pool;
    FullProjection full;
    Matrix input;  // dL/dS
};

namespace detail {

inline void ensure_like(Matrix& g, const Matrix& p) {
    if (g.empty() && !p.empty()) g = Matrix(p.rows(), p.cols());
}

/// Backward through one shared side. `upstream` is dL/d(output of the side),
/// n×d_a; the first d_u columns feed the user projection, the rest feed the
/// gated gather. The argmax is treated as a constant: the router only learns
/// through the sigmoid gate, the peak loss, and the balance loss.
inline void backward_shared_side(const Matrix& s, const CollectiveConfig& cfg,
                                 const Matrix& user_w, const Matrix& pool,
                                 const SideContext& ctx, const Matrix& upstream,
                                 double aux_scale, int active_sides, Matrix& d_user_w,
                                 Matrix& d_user_b, RouterHead& d_head, Matrix& d_pool,
                                 Matrix& d_input, const RouterHead& head) {
    const std::size_t n = s.rows(), du = cfg.user_dim, dg = cfg.global_dim,
                      m = cfg.pool_size;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double side_scale = aux_scale / static_cast<double>(active_sides);

    Matrix d_user = upstream.col_slice(0, du);
    Matrix d_collective = upstream.col_slice(du, du + dg);

    // User projection path.
    d_user_w += matmul_tn(s, d_user);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < du; ++c) d_user_b(0, c) += d_user(i, c);
    d_input += matmul_nt(d_user, user_w);

    Matrix d_logits(n, m);

    // Gated gather: dP[r] += gate·dC_i for items routed to r, and the gate
    // passes dC_i·P[r]·σ' back into the selected logit.
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = static_cast<std::size_t>(ctx.map.indices[i]);
        const double gate = ctx.gates[i];
        const double* dc = d_collective.row_ptr(i);
        const double* prow = pool.row_ptr(r);
        double* dprow = d_pool.row_ptr(r);
        double dot_dc_pool = 0.0;
        for (std::size_t c = 0; c < dg; ++c) {
            dprow[c] += gate * dc[c];
            dot_dc_pool += dc[c] * prow[c];
        }
        d_logits(i, r) += dot_dc_pool * gate * (1.0 - gate);
        // Peak loss: d/dx of -log σ(x) is σ(x)-1.
        d_logits(i, r) += side_scale * cfg.peak_weight * inv_n * (gate - 1.0);
    }

    // Balance loss: with a_j = ln(m·p̄_j)+1, dL/dM_il = s_il·(a_l - <a, s_i>)/n.
    // Entries with s_il = 0 contribute nothing, which also sidesteps ln(0).
    if (cfg.balance_weight > 0.0) {
        const std::vector<double> avg = mean_selection_probs(ctx.softmax);
        std::vector<double> a(m, 0.0);
        const double md = static_cast<double>(m);
        for (std::size_t j = 0; j < m; ++j)
            if (avg[j] > 0.0) a[j] = std::log(md * avg[j]) + 1.0;
        const double w = side_scale * cfg.balance_weight * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
            const double* srow = ctx.softmax.row_ptr(i);
            double mean_a = 0.0;
            for (std::size_t j = 0; j < m; ++j)
                if (srow[j] > 0.0) mean_a += srow[j] * a[j];
            for (std::size_t j = 0; j < m; ++j)
                if (srow[j] > 0.0) d_logits(i, j) += w * srow[j] * (a[j] - mean_a);
        }
    }

    // Router linear layer.
    d_head.weight += matmul_tn(s, d_logits);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) d_head.bias(0, j) += d_logits(i, j);
    d_input += matmul_nt(d_logits, head.weight);
}

inline void backward_full_side(const Matrix& s, const Matrix& full_w, const Matrix& upstream,
                               Matrix& d_w, Matrix& d_b, Matrix& d_input) {
    d_w += matmul_tn(s, upstream);
    for (std::size_t i = 0; i < upstream.rows(); ++i)
        for (std::size_t c = 0; c < upstream.cols(); ++c) d_b(0, c) += upstream(i, c);
    d_input += matmul_nt(upstream, full_w);
}

}  // namespace detail

inline CollectiveGrads make_collective_grads(const CollectiveConfig& cfg,
                                             const CollectiveParams& params) {
    CollectiveGrads g;
    auto like = [](const Matrix& p) { return Matrix(p.rows(), p.cols()); };
    if (cfg.share_keys) {
        g.proj.key_weight = like(params.proj.key_weight);
        g.proj.key_bias = like(params.proj.key_bias);
        g.router.key.weight = like(params.router.key.weight);
        g.router.key.bias = like(params.router.key.bias);
        g.pool.keys = like(params.pool.keys);
    } else {
        g.full.key_weight = like(params.full.key_weight);
        g.full.key_bias = like(params.full.key_bias);
    }
    if (cfg.share_values) {
        g.proj.value_weight = like(params.proj.value_weight);
        g.proj.value_bias = like(params.proj.value_bias);
        if (!cfg.tie_routers) {
            g.router.value.weight = like(params.router.value.weight);
            g.router.value.bias = like(params.router.value.bias);
        }
        g.pool.values = like(params.pool.values);
    } else {
        g.full.value_weight = like(params.full.value_weight);
        g.full.value_bias = like(params.full.value_bias);
    }
    return g;
}

/// Analytic backward for a training-mode forward. `d_keys`/`d_values` are the
/// upstream gradients on the assembled K and V; `aux_scale` is the upstream
/// gradient on the weighted aux loss (1.0 when it is added to the total loss
/// unscaled). Parameter gradients accumulate into `grads`; `grads.input`
/// (dL/dS) is per-example and is overwritten on every call.
inline void collective_backward(const Matrix& s, const CollectiveConfig& cfg,
                                const CollectiveParams& params, const CollectiveOutput& fwd,
                                const Matrix& d_keys, const Matrix& d_values,
                                double aux_scale, CollectiveGrads& grads) {
    if (fwd.mode != Mode::kTraining)
        throw usage_error("collective_backward: forward pass was not run in training mode");
    grads.input = Matrix(s.rows(), s.cols());

    int active_sides = (fwd.key_side.shared ? 1 : 0) + (fwd.value_side.shared ? 1 : 0);
    if (active_sides == 0) active_sides = 1;  // unused; avoids div by zero

    if (cfg.share_keys) {
        detail::backward_shared_side(s, cfg, params.proj.key_weight, params.pool.keys,
                                     fwd.key_side, d_keys, aux_scale, active_sides,
                                     grads.proj.key_weight, grads.proj.key_bias,
                                     grads.router.key, grads.pool.keys, grads.input,
                                     params.router.key);
    } else {
        detail::backward_full_side(s, params.full.key_weight, d_keys, grads.full.key_weight,
                                   grads.full.key_bias, grads.input);
    }
    if (cfg.share_values) {
        RouterHead& d_value_head = cfg.tie_routers ? grads.router.key : grads.router.value;
        const RouterHead& value_head =
            cfg.tie_routers ? params.router.key : params.router.value;
        detail::backward_shared_side(s, cfg, params.proj.value_weight, params.pool.values,
                                     fwd.value_side, d_values, aux_scale, active_sides,
                                     grads.proj.value_weight, grads.proj.value_bias,
                                     d_value_head, grads.pool.values, grads.input, value_head);
    } else {
        detail::backward_full_side(s, params.full.value_weight, d_values,
                                   grads.full.value_weight, grads.full.value_bias,
                                   grads.input);
    }
}

/// Fan-in-scaled uniform init. Pool rows start in [-1/√d_g, 1/√d_g] and the
/// router in [-1/√d_e, 1/√d_e], so initial logits are O(1) and gates start
/// near 0.5 rather than frozen at 0 or 1.
inline CollectiveParams init_collective_params(const CollectiveConfig& cfg, Rng& rng) {
    cfg.validate();
    CollectiveParams p;
    const double proj_bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    const double pool_bound =
        cfg.global_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(cfg.global_dim)) : 0.0;

    if (cfg.share_keys) {
        p.proj.key_weight = rng.uniform_matrix(cfg.embed_dim, cfg.user_dim, -proj_bound, proj_bound);
        p.proj.key_bias = rng.uniform_matrix(1, cfg.user_dim, -proj_bound, proj_bound);
        p.router.key.weight =
            rng.uniform_matrix(cfg.embed_dim, cfg.pool_size, -proj_bound, proj_bound);
        p.router.key.bias = rng.uniform_matrix(1, cfg.pool_size, -proj_bound, proj_bound);
        p.pool.keys = rng.uniform_matrix(cfg.pool_size, cfg.global_dim, -pool_bound, pool_bound);
    } else {
        p.full.key_weight =
            rng.uniform_matrix(cfg.embed_dim, cfg.attn_dim(), -proj_bound, proj_bound);
        p.full.key_bias = rng.uniform_matrix(1, cfg.attn_dim(), -proj_bound, proj_bound);
    }
    if (cfg.share_values) {
        p.proj.value_weight =
            rng.uniform_matrix(cfg.embed_dim, cfg.user_dim, -proj_bound, proj_bound);
        p.proj.value_bias = rng.uniform_matrix(1, cfg.user_dim, -proj_bound, proj_bound);
        if (!cfg.tie_routers) {
            p.router.value.weight =
                rng.uniform_matrix(cfg.embed_dim, cfg.pool_size, -proj_bound, proj_bound);
            p.router.value.bias = rng.uniform_matrix(1, cfg.pool_size, -proj_bound, proj_bound);
        }
        p.pool.values = rng.uniform_matrix(cfg.pool_size, cfg.global_dim, -pool_bound, pool_bound);
    } else {
        p.full.value_weight =
            rng.uniform_matrix(cfg.embed_dim, cfg.attn_dim(), -proj_bound, proj_bound);
        p.full.value_bias = rng.uniform_matrix(1, cfg.attn_dim(), -proj_bound, proj_bound);
    }
    return p;
}

/// Visit every learnable tensor of an active configuration in the fixed
/// checkpoint order. Both params and grads structures go through this, which
/// keeps the optimizer, serializer, and gradient checks aligned.
template <typename ParamsT, typename Fn>
void for_each_collective_tensor(const CollectiveConfig& cfg, ParamsT&& p, Fn&& fn) {
    if (cfg.share_keys) {
        fn("proj.key_weight", p.proj.key_weight);
        fn("proj.key_bias", p.proj.key_bias);
        fn("router.key.weight", p.router.key.weight);
        fn("router.key.bias", p.router.key.bias);
        fn("pool.keys", p.pool.keys);
    } else {
        fn("full.key_weight", p.full.key_weight);
        fn("full.key_bias", p.full.key_bias);
    }
    if (cfg.share_values) {
        fn("proj.value_weight", p.proj.value_weight);
        fn("proj.value_bias", p.proj.value_bias);
        if (!cfg.tie_routers) {
            fn("router.value.weight", p.router.value.weight);
            fn("router.value.bias", p.router.value.bias);
        }
        fn("pool.values", p.pool.values);
    } else {
        fn("full.value_weight", p.full.value_weight);
        fn("full.value_bias", p.full.value_bias);
    }
}

}  // namespace ckv
