#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "collectivekv/attention.hpp"
#include "collectivekv/collective.hpp"
#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"
#include "collectivekv/metrics.hpp"
#include "collectivekv/rng.hpp"

namespace ckv {

enum class AttnMode { kTarget, kSelf };

inline const char* attn_mode_name(AttnMode m) {
    return m == AttnMode::kTarget ? "target" : "self";
}

/// Host-model shape: the query projection feeds either a single target-item
/// query or per-item sequence queries; K/V always come from the collective
/// mechanism. The output head is d_a -> 1 linear + sigmoid.
struct AttentionConfig {
    AttnMode mode = AttnMode::kTarget;
    std::size_t embed_dim = 32;
    std::size_t attn_dim = 32;
};

struct AttentionParams {
    Matrix query_weight;  // d_e×d_a
    Matrix out_weight;    // d_a×1
    Matrix out_bias;      // 1×1
};

struct ModelConfig {
    CollectiveConfig collective;
    AttnMode attn_mode = AttnMode::kTarget;

    AttentionConfig attention() const {
        return {attn_mode, collective.embed_dim, collective.attn_dim()};
    }
    void validate() const { collective.validate(); }
};

struct ModelParams {
    CollectiveParams collective;
    AttentionParams attn;
};

struct ModelGrads {
    CollectiveGrads collective;
    AttentionParams attn;  // same shapes as the parameters
};

inline ModelParams init_model_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.collective = init_collective_params(cfg.collective, rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.collective.embed_dim));
    const double head_bound = 1.0 / std::sqrt(static_cast<double>(cfg.collective.attn_dim()));
    p.attn.query_weight =
        rng.uniform_matrix(cfg.collective.embed_dim, cfg.collective.attn_dim(), -bound, bound);
    p.attn.out_weight = rng.uniform_matrix(cfg.collective.attn_dim(), 1, -head_bound, head_bound);
    p.attn.out_bias = Matrix(1, 1);
    return p;
}

inline ModelGrads make_model_grads(const ModelConfig& cfg, const ModelParams& params) {
    ModelGrads g;
    g.collective = make_collective_grads(cfg.collective, params.collective);
    g.attn.query_weight = Matrix(params.attn.query_weight.rows(), params.attn.query_weight.cols());
    g.attn.out_weight = Matrix(params.attn.out_weight.rows(), params.attn.out_weight.cols());
    g.attn.out_bias = Matrix(1, 1);
    return g;
}

/// Fixed tensor order shared by the optimizer, the checkpoint format, and the
/// gradient checks: collective tensors first, then query/head.
template <typename T, typename Fn>
void for_each_model_tensor(const ModelConfig& cfg, T&& p, Fn&& fn) {
    for_each_collective_tensor(cfg.collective, p.collective, fn);
    fn("attn.query_weight", p.attn.query_weight);
    fn("attn.out_weight", p.attn.out_weight);
    fn("attn.out_bias", p.attn.out_bias);
}

/// One training/eval example: a user's history embeddings plus one candidate
/// item and its click label.
struct CtrExample {
    Matrix history;  // n×d_e
    Matrix target;   // 1×d_e
    int label = 0;
    std::string user_id;
};

/// Forward context kept for the backward pass.
struct CtrForward {
    double prob = 0.0;
    double logit = 0.0;
    double aux = 0.0;  // weighted peak+balance from the collective stage
    CollectiveOutput col;
    Matrix query;                      // target mode: 1×d_a; self mode: n×d_a
    Matrix target_query;               // 1×d_a (== query in target mode)
    std::vector<double> attn_weights;  // target mode
    Matrix self_weights;               // self mode
    Matrix attended;                   // 1×d_a attention output feeding the head
    Matrix feat;                       // 1×d_a input of the output head
};

/// CTR probability for one example. Target mode attends over the history with
/// the projected candidate item; self mode runs causal self-attention and
/// takes the last position as the user state. Either way the head scores the
/// attended vector gated elementwise by the projected candidate, so the score
/// carries a user-item interaction even when history values are highly
/// correlated.
inline CtrForward ctr_forward(const CtrExample& ex, const ModelConfig& cfg,
                              const ModelParams& params, Mode mode) {
    if (ex.history.rows() == 0) throw usage_error("ctr_forward: empty history");
    CtrForward fwd;
    fwd.col = collective_forward(ex.history, cfg.collective, params.collective, mode);
    fwd.aux = fwd.col.aux;

    const std::size_t d_a = cfg.collective.attn_dim();
    fwd.target_query = matmul(ex.target, params.attn.query_weight);
    if (cfg.attn_mode == AttnMode::kTarget) {
        fwd.query = fwd.target_query;
        fwd.attended =
            target_attention(fwd.query, fwd.col.keys, fwd.col.values, &fwd.attn_weights);
    } else {
        fwd.query = matmul(ex.history, params.attn.query_weight);
        const Matrix self_out = self_attention(fwd.query, fwd.col.keys, fwd.col.values,
                                               /*causal=*/true, &fwd.self_weights);
        fwd.attended = self_out.row(ex.history.rows() - 1);
    }
    fwd.feat = Matrix(1, d_a);
    for (std::size_t c = 0; c < d_a; ++c)
        fwd.feat(0, c) = fwd.attended(0, c) * fwd.target_query(0, c);
    fwd.logit = dot(fwd.feat, params.attn.out_weight.transposed()) + params.attn.out_bias(0, 0);
    fwd.prob = sigmoid(fwd.logit);
    return fwd;
}

/// Backward from dL/dlogit (plus aux_scale on the collective aux loss).
/// Gradients accumulate into `grads`.
inline void ctr_backward(const CtrExample& ex, const ModelConfig& cfg,
                         const ModelParams& params, const CtrForward& fwd, double d_logit,
                         double aux_scale, ModelGrads& grads) {
    const std::size_t d_a = cfg.collective.attn_dim();

    // Output head, then the elementwise target gate.
    Matrix d_feat(1, d_a);
    for (std::size_t c = 0; c < d_a; ++c) {
        grads.attn.out_weight(c, 0) += d_logit * fwd.feat(0, c);
        d_feat(0, c) = d_logit * params.attn.out_weight(c, 0);
    }
    grads.attn.out_bias(0, 0) += d_logit;

    Matrix d_attended(1, d_a), d_tq(1, d_a);
    for (std::size_t c = 0; c < d_a; ++c) {
        d_attended(0, c) = d_feat(0, c) * fwd.target_query(0, c);
        d_tq(0, c) = d_feat(0, c) * fwd.attended(0, c);
    }

    Matrix d_keys(fwd.col.keys.rows(), d_a);
    Matrix d_values(fwd.col.values.rows(), d_a);

    if (cfg.attn_mode == AttnMode::kTarget) {
        Matrix d_q(1, d_a);
        target_attention_backward(fwd.query, fwd.col.keys, fwd.col.values, fwd.attn_weights,
                                  d_attended, d_q, d_keys, d_values);
        d_q += d_tq;  // query and target gate share the projected candidate
        grads.attn.query_weight += matmul_tn(ex.target, d_q);
    } else {
        const std::size_t n = ex.history.rows();
        Matrix d_self(n, d_a);
        for (std::size_t c = 0; c < d_a; ++c) d_self(n - 1, c) = d_attended(0, c);
        Matrix d_q(n, d_a);
        self_attention_backward(fwd.query, fwd.col.keys, fwd.col.values, fwd.self_weights,
                                /*causal=*/true, d_self, d_q, d_keys, d_values);
        grads.attn.query_weight += matmul_tn(ex.history, d_q);
        grads.attn.query_weight += matmul_tn(ex.target, d_tq);
    }

    collective_backward(ex.history, cfg.collective, params.collective, fwd.col, d_keys,
                        d_values, aux_scale, grads.collective);
}

/// Training loss of one example: clamped BCE plus the weighted aux losses.
inline double example_loss(const CtrForward& fwd, int label) {
    const double p = clamp_prob(fwd.prob);
    const double bce = label ? -std::log(p) : -std::log(1.0 - p);
    return bce + fwd.aux;
}

/// dL/dlogit of the clamped BCE term. Zero when the clamp is active, matching
/// what a finite difference of the clamped loss sees.
inline double bce_logit_grad(double prob, int label) {
    if (prob < kProbClamp || prob > 1.0 - kProbClamp) return 0.0;
    return prob - static_cast<double>(label);
}

}  // namespace ckv
