#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "collectivekv/collective.hpp"
#include "collectivekv/gradcheck.hpp"
#include "collectivekv/rng.hpp"

using namespace ckv;

namespace {

// Scalar probe loss: <dK, K> + <dV, V> + aux, with fixed random co-tensors.
// Its analytic gradient is exactly what collective_backward(dK, dV, 1.0)
// returns, so central differences validate the whole backward path.
struct Probe {
    CollectiveConfig cfg;
    CollectiveParams params;
    Matrix s, d_keys, d_values;

    double loss() const {
        const CollectiveOutput fwd = collective_forward(s, cfg, params, Mode::kTraining);
        return dot(d_keys, fwd.keys) + dot(d_values, fwd.values) + fwd.aux;
    }
};

Probe make_probe(const CollectiveConfig& cfg, std::uint64_t seed, std::size_t n) {
    Probe p;
    p.cfg = cfg;
    Rng rng(seed);
    p.params = init_collective_params(cfg, rng);
    p.s = rng.uniform_matrix(n, cfg.embed_dim, -1.0, 1.0);
    p.d_keys = rng.uniform_matrix(n, cfg.attn_dim(), -1.0, 1.0);
    p.d_values = rng.uniform_matrix(n, cfg.attn_dim(), -1.0, 1.0);
    return p;
}

double worst_gradient_error(Probe probe) {
    const CollectiveOutput fwd =
        collective_forward(probe.s, probe.cfg, probe.params, Mode::kTraining);
    CollectiveGrads grads = make_collective_grads(probe.cfg, probe.params);
    collective_backward(probe.s, probe.cfg, probe.params, fwd, probe.d_keys, probe.d_values,
                        1.0, grads);

    double worst = 0.0;

    // Input gradient.
    auto input_fn = [&](const Matrix& s) {
        Probe local = probe;
        local.s = s;
        return local.loss();
    };
    worst = std::max(worst, check_gradient(input_fn, probe.s, grads.input));

    // Every active parameter tensor.
    std::vector<std::pair<std::string, Matrix*>> tensors;
    for_each_collective_tensor(probe.cfg, probe.params, [&](const char* name, Matrix& m) {
        tensors.emplace_back(name, &m);
    });
    std::vector<std::pair<std::string, Matrix*>> grad_tensors;
    for_each_collective_tensor(probe.cfg, grads, [&](const char* name, Matrix& m) {
        grad_tensors.emplace_back(name, &m);
    });
    REQUIRE(tensors.size() == grad_tensors.size());

    for (std::size_t t = 0; t < tensors.size(); ++t) {
        Matrix* target = tensors[t].second;
        auto fn = [&](const Matrix& candidate) {
            const Matrix saved = *target;
            *target = candidate;
            const double value = probe.loss();
            *target = saved;
            return value;
        };
        const double err = check_gradient(fn, *target, *grad_tensors[t].second);
        INFO("tensor " << tensors[t].first);
        CHECK(err <= 1e-4);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace

TEST_CASE("zero upstream and zero loss weights give zero gradients") {
    CollectiveConfig cfg;
    cfg.embed_dim = 6;
    cfg.user_dim = 2;
    cfg.global_dim = 4;
    cfg.pool_size = 5;
    cfg.peak_weight = 0.0;
    cfg.balance_weight = 0.0;
    Rng rng(21);
    const CollectiveParams params = init_collective_params(cfg, rng);
    Matrix s = rng.uniform_matrix(4, 6, -1.0, 1.0);
    const CollectiveOutput fwd = collective_forward(s, cfg, params, Mode::kTraining);
    CollectiveGrads grads = make_collective_grads(cfg, params);
    collective_backward(s, cfg, params, fwd, Matrix(4, 6), Matrix(4, 6), 1.0, grads);
    for_each_collective_tensor(cfg, grads,
                               [&](const char*, const Matrix& g) { CHECK(max_abs(g) == 0.0); });
    CHECK(max_abs(grads.input) == 0.0);
}

TEST_CASE("peak loss alone puts σ(0)-1 on a selected zero logit") {
    CollectiveConfig cfg;
    cfg.embed_dim = 2;
    cfg.user_dim = 1;
    cfg.global_dim = 2;
    cfg.pool_size = 3;
    cfg.peak_weight = 1.0;
    cfg.balance_weight = 0.0;
    Rng rng(22);
    CollectiveParams params = init_collective_params(cfg, rng);
    // Make the key router emit exactly zero logits: weights and bias zero.
    params.router.key.weight.set_zero();
    params.router.key.bias.set_zero();
    Matrix s = rng.uniform_matrix(4, 2, -1.0, 1.0);  // n = 4
    const CollectiveOutput fwd = collective_forward(s, cfg, params, Mode::kTraining);
    CollectiveGrads grads = make_collective_grads(cfg, params);
    collective_backward(s, cfg, params, fwd, Matrix(4, 3), Matrix(4, 3), 1.0, grads);
    // dL/d(bias_0) = peak_weight · (1/sides) · Σ_i (σ(0)-1)/n = 1·(1/2)·(-0.5) = -0.25.
    CHECK(grads.router.key.bias(0, 0) == Catch::Approx(-0.25).margin(1e-12));
    CHECK(grads.router.key.bias(0, 1) == 0.0);
    CHECK(grads.router.key.bias(0, 2) == 0.0);
}

TEST_CASE("gradients pass central finite differences on a small config") {
    CollectiveConfig cfg;
    cfg.embed_dim = 8;
    cfg.user_dim = 2;
    cfg.global_dim = 6;
    cfg.pool_size = 4;
    CHECK(worst_gradient_error(make_probe(cfg, 31, 5)) <= 1e-4);
}

TEST_CASE("gradients hold at the larger config bound (n=16, m=32)") {
    CollectiveConfig cfg;
    cfg.embed_dim = 8;
    cfg.user_dim = 2;
    cfg.global_dim = 6;
    cfg.pool_size = 32;
    CHECK(worst_gradient_error(make_probe(cfg, 32, 16)) <= 1e-4);
}

TEST_CASE("gradients hold for single-side sharing and tied routers") {
    CollectiveConfig cfg;
    cfg.embed_dim = 6;
    cfg.user_dim = 2;
    cfg.global_dim = 4;
    cfg.pool_size = 8;

    SECTION("keys only") {
        cfg.share_values = false;
        CHECK(worst_gradient_error(make_probe(cfg, 33, 6)) <= 1e-4);
    }
    SECTION("values only") {
        cfg.share_keys = false;
        CHECK(worst_gradient_error(make_probe(cfg, 34, 6)) <= 1e-4);
    }
    SECTION("baseline: no sharing") {
        cfg.share_keys = false;
        cfg.share_values = false;
        CHECK(worst_gradient_error(make_probe(cfg, 35, 6)) <= 1e-4);
    }
    SECTION("tied routers") {
        cfg.tie_routers = true;
        CHECK(worst_gradient_error(make_probe(cfg, 36, 6)) <= 1e-4);
    }
}

TEST_CASE("backward refuses an inference-mode forward") {
    CollectiveConfig cfg;
    cfg.embed_dim = 4;
    cfg.user_dim = 1;
    cfg.global_dim = 3;
    cfg.pool_size = 2;
    Rng rng(37);
    const CollectiveParams params = init_collective_params(cfg, rng);
    Matrix s = rng.uniform_matrix(3, 4, -1.0, 1.0);
    const CollectiveOutput fwd = collective_forward(s, cfg, params, Mode::kInference);
    CollectiveGrads grads = make_collective_grads(cfg, params);
    CHECK_THROWS_AS(
        collective_backward(s, cfg, params, fwd, Matrix(3, 4), Matrix(3, 4), 1.0, grads),
        usage_error);
}
