#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "collectivekv/collective.hpp"
#include "collectivekv/rng.hpp"

using namespace ckv;

namespace {

CollectiveConfig small_config() {
    CollectiveConfig cfg;
    cfg.embed_dim = 8;
    cfg.user_dim = 2;
    cfg.global_dim = 6;
    cfg.pool_size = 4;
    cfg.peak_weight = 0.01;
    cfg.balance_weight = 1.0;
    return cfg;
}

/// Straight-line scalar re-implementation of the full forward path for the
/// both-sides-shared case; written directly from the formulas, no shared code
/// with the library beyond Matrix storage.
struct OracleForward {
    Matrix keys, values;
    double peak_k = 0.0, peak_v = 0.0, balance_k = 0.0, balance_v = 0.0;
};

OracleForward oracle_forward(const Matrix& s, const CollectiveConfig& cfg,
                             const CollectiveParams& p, bool training) {
    const std::size_t n = s.rows(), de = cfg.embed_dim, du = cfg.user_dim,
                      dg = cfg.global_dim, m = cfg.pool_size;
    OracleForward out;
    out.keys = Matrix(n, du + dg);
    out.values = Matrix(n, du + dg);

    struct Side {
        const Matrix *uw, *ub, *rw, *rb, *pool;
        Matrix* dest;
        double *peak, *balance;
    };
    Side sides[2] = {
        {&p.proj.key_weight, &p.proj.key_bias, &p.router.key.weight, &p.router.key.bias,
         &p.pool.keys, &out.keys, &out.peak_k, &out.balance_k},
        {&p.proj.value_weight, &p.proj.value_bias, &p.router.value.weight,
         &p.router.value.bias, &p.pool.values, &out.values, &out.peak_v, &out.balance_v},
    };

    for (const Side& side : sides) {
        std::vector<double> avg_prob(m, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            // user-specific part
            for (std::size_t c = 0; c < du; ++c) {
                double acc = (*side.ub)(0, c);
                for (std::size_t e = 0; e < de; ++e) acc += s(i, e) * (*side.uw)(e, c);
                (*side.dest)(i, c) = acc;
            }
            // router logits, argmax, softmax
            std::vector<double> logits(m);
            for (std::size_t j = 0; j < m; ++j) {
                double acc = (*side.rb)(0, j);
                for (std::size_t e = 0; e < de; ++e) acc += s(i, e) * (*side.rw)(e, j);
                logits[j] = acc;
            }
            std::size_t best = 0;
            for (std::size_t j = 1; j < m; ++j)
                if (logits[j] > logits[best]) best = j;
            double mx = logits[0];
            for (double L : logits) mx = std::max(mx, L);
            double z = 0.0;
            for (double L : logits) z += std::exp(L - mx);
            for (std::size_t j = 0; j < m; ++j) avg_prob[j] += std::exp(logits[j] - mx) / z;

            const double gate = 1.0 / (1.0 + std::exp(-logits[best]));
            *side.peak += -std::log(gate);
            for (std::size_t c = 0; c < dg; ++c)
                (*side.dest)(i, du + c) =
                    (training ? gate : 1.0) * (*side.pool)(best, c);
        }
        *side.peak /= static_cast<double>(n);
        for (std::size_t j = 0; j < m; ++j) {
            const double pbar = avg_prob[j] / static_cast<double>(n);
            if (pbar > 0.0) *side.balance += pbar * std::log(static_cast<double>(m) * pbar);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("routing: all-tied logits pick index 0") {
    RouterHead head;
    head.weight = Matrix(3, 5);
    head.bias = Matrix(1, 5);
    Rng rng(1);
    Matrix s = rng.uniform_matrix(4, 3, -1.0, 1.0);
    const RoutingMap map = route(s, head);
    for (int idx : map.indices) CHECK(idx == 0);
}

TEST_CASE("routing: dominant bias wins everywhere") {
    RouterHead head;
    head.weight = Matrix(3, 5);
    head.bias = Matrix(1, 5);
    head.bias(0, 3) = 2.5;
    Rng rng(2);
    Matrix s = rng.uniform_matrix(6, 3, -1.0, 1.0);
    const RoutingMap map = route(s, head);
    for (int idx : map.indices) CHECK(idx == 3);
}

TEST_CASE("routing matches a per-row linear-scan oracle") {
    Rng rng(3);
    RouterHead head;
    head.weight = rng.uniform_matrix(6, 9, -1.0, 1.0);
    head.bias = rng.uniform_matrix(1, 9, -1.0, 1.0);
    Matrix s = rng.uniform_matrix(12, 6, -1.0, 1.0);
    const RoutingMap map = route(s, head);
    for (std::size_t i = 0; i < 12; ++i) {
        int best = 0;
        for (int j = 1; j < 9; ++j)
            if (map.logits(i, j) > map.logits(i, best)) best = j;
        CHECK(map.indices[i] == best);
    }
}

TEST_CASE("routing is a pure function") {
    Rng rng(4);
    RouterHead head;
    head.weight = rng.uniform_matrix(5, 7, -1.0, 1.0);
    head.bias = rng.uniform_matrix(1, 7, -1.0, 1.0);
    Matrix s = rng.uniform_matrix(10, 5, -1.0, 1.0);
    const RoutingMap a = route(s, head);
    const RoutingMap b = route(s, head);
    CHECK(a.indices == b.indices);
    CHECK(a.logits == b.logits);
}

TEST_CASE("argmax is invariant to positive row scaling") {
    Rng rng(5);
    Matrix logits = rng.uniform_matrix(8, 6, -2.0, 2.0);
    const RoutingMap base = make_routing(logits);
    Matrix scaled = logits;
    for (std::size_t i = 0; i < scaled.rows(); ++i)
        for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= 3.7;
    const RoutingMap after = make_routing(scaled);
    CHECK(base.indices == after.indices);
}

TEST_CASE("gather: zero logit halves the pool row in training") {
    Matrix logits(2, 3);  // all zeros: argmax 0, σ(0) = 0.5
    const RoutingMap map = make_routing(logits);
    Rng rng(6);
    Matrix pool = rng.uniform_matrix(3, 4, -1.0, 1.0);
    const Matrix c = gather_collective(pool, map, Mode::kTraining);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t col = 0; col < 4; ++col)
            CHECK(c(i, col) == Catch::Approx(0.5 * pool(0, col)).margin(1e-15));
}

TEST_CASE("gather: saturated logit matches inference within 1e-12") {
    Matrix logits(3, 2);
    for (std::size_t i = 0; i < 3; ++i) logits(i, 1) = 50.0;
    const RoutingMap map = make_routing(logits);
    Rng rng(7);
    Matrix pool = rng.uniform_matrix(2, 5, -1.0, 1.0);
    const Matrix train = gather_collective(pool, map, Mode::kTraining);
    const Matrix infer = gather_collective(pool, map, Mode::kInference);
    CHECK(max_abs_diff(train, infer) <= 1e-12);
}

TEST_CASE("gather in inference mode exposes the routed index") {
    // Pool row j is the constant j, so the gathered value identifies I[i].
    Matrix pool(5, 3);
    for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t c = 0; c < 3; ++c) pool(j, c) = static_cast<double>(j);
    Rng rng(8);
    Matrix logits = rng.uniform_matrix(9, 5, -1.0, 1.0);
    const RoutingMap map = make_routing(logits);
    const Matrix c = gather_collective(pool, map, Mode::kInference);
    for (std::size_t i = 0; i < 9; ++i)
        CHECK(c(i, 0) == static_cast<double>(map.indices[i]));
}

TEST_CASE("assemble_kv degenerate and hand-built cases") {
    Matrix user2(2, 0);
    Rng rng(9);
    Matrix coll = rng.uniform_matrix(2, 3, -1.0, 1.0);
    CHECK(assemble_kv(user2, coll) == coll);

    Matrix user = rng.uniform_matrix(2, 3, -1.0, 1.0);
    CHECK(assemble_kv(user, Matrix(2, 0)) == user);

    Matrix ones(2, 1);
    ones.fill(1.0);
    Matrix twos(2, 2);
    twos.fill(2.0);
    Matrix expected{{1.0, 2.0, 2.0}, {1.0, 2.0, 2.0}};
    CHECK(assemble_kv(ones, twos) == expected);
}

TEST_CASE("concat round-trip recovers both inputs bit-exactly") {
    Rng rng(10);
    Matrix user = rng.uniform_matrix(7, 3, -1.0, 1.0);
    Matrix coll = rng.uniform_matrix(7, 5, -1.0, 1.0);
    const Matrix joined = assemble_kv(user, coll);
    CHECK(joined.col_slice(0, 3) == user);
    CHECK(joined.col_slice(3, 8) == coll);
}

TEST_CASE("peak loss anchors") {
    Matrix zeros(4, 3);
    CHECK(peak_loss(make_routing(zeros)) == Catch::Approx(0.693147).margin(1e-6));
    CHECK(peak_loss(make_routing(zeros)) ==
          Catch::Approx(-std::log(0.5)).margin(1e-12));

    Matrix big(4, 3);
    for (std::size_t i = 0; i < 4; ++i) big(i, 0) = 50.0;
    CHECK(peak_loss(make_routing(big)) <= 1e-20);

    // Selected logits 0 and ln 3: -(ln 0.5 + ln 0.75)/2.
    Matrix two(2, 2);
    two(0, 0) = 0.0;
    two(1, 0) = std::log(3.0);
    two(0, 1) = -1.0;
    two(1, 1) = -1.0;
    CHECK(peak_loss(make_routing(two)) == Catch::Approx(0.490415).margin(1e-6));
}

TEST_CASE("peak loss strictly decreases as a selected logit grows") {
    Rng rng(11);
    Matrix logits = rng.uniform_matrix(5, 4, -1.0, 1.0);
    RoutingMap map = make_routing(logits);
    const double before = peak_loss(map);
    map.logits(2, map.indices[2]) += 0.5;  // raising the max keeps the argmax
    const double after = peak_loss(make_routing(map.logits));
    CHECK(after < before);
}

TEST_CASE("balance loss anchors and bounds") {
    Matrix uniform(6, 4);  // equal logits -> uniform mean distribution
    CHECK(balance_loss(make_routing(uniform)) <= 1e-12);

    Matrix single(3, 1);  // m = 1: uniform is the only distribution
    CHECK(balance_loss(make_routing(single)) <= 1e-12);

    // n=1, m=2, logits [ln 3, 0]: KL((0.75, 0.25) || uniform).
    Matrix pair(1, 2);
    pair(0, 0) = std::log(3.0);
    CHECK(balance_loss(make_routing(pair)) == Catch::Approx(0.130812).margin(1e-6));

    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix logits = rng.uniform_matrix(5, 8, -40.0, 40.0);
        const double loss = balance_loss(make_routing(logits));
        CHECK(loss >= 0.0);
        CHECK(loss <= std::log(8.0) + 1e-9);
    }
}

TEST_CASE("forward matches the straight-line oracle in both modes") {
    CollectiveConfig cfg = small_config();
    cfg.embed_dim = 8;
    cfg.user_dim = 2;
    cfg.global_dim = 6;
    cfg.pool_size = 4;
    Rng rng(13);
    const CollectiveParams params = init_collective_params(cfg, rng);
    Matrix s = rng.uniform_matrix(5, 8, -1.0, 1.0);

    for (Mode mode : {Mode::kTraining, Mode::kInference}) {
        const CollectiveOutput fwd = collective_forward(s, cfg, params, mode);
        const OracleForward oracle = oracle_forward(s, cfg, params, mode == Mode::kTraining);
        CHECK(max_abs_diff(fwd.keys, oracle.keys) <= 1e-12);
        CHECK(max_abs_diff(fwd.values, oracle.values) <= 1e-12);
        CHECK(fwd.peak == Catch::Approx((oracle.peak_k + oracle.peak_v) / 2).margin(1e-12));
        CHECK(fwd.balance ==
              Catch::Approx((oracle.balance_k + oracle.balance_v) / 2).margin(1e-12));
        CHECK(fwd.aux == Catch::Approx(cfg.peak_weight * fwd.peak +
                                       cfg.balance_weight * fwd.balance)
                             .margin(1e-15));
    }
}

TEST_CASE("disabling both shares reproduces a plain two-projection baseline") {
    CollectiveConfig cfg = small_config();
    cfg.share_keys = false;
    cfg.share_values = false;
    Rng rng(14);
    const CollectiveParams params = init_collective_params(cfg, rng);
    Matrix s = rng.uniform_matrix(6, 8, -1.0, 1.0);
    const CollectiveOutput fwd = collective_forward(s, cfg, params, Mode::kTraining);
    CHECK(max_abs_diff(fwd.keys, linear(s, params.full.key_weight, params.full.key_bias)) == 0.0);
    CHECK(max_abs_diff(fwd.values,
                       linear(s, params.full.value_weight, params.full.value_bias)) == 0.0);
    CHECK(fwd.aux == 0.0);
    CHECK(fwd.peak == 0.0);
    CHECK(fwd.balance == 0.0);
}

TEST_CASE("saturated gates make training and inference outputs agree") {
    CollectiveConfig cfg = small_config();
    Rng rng(15);
    CollectiveParams params = init_collective_params(cfg, rng);
    // Push every router bias so the selected logit is >= 50.
    params.router.key.bias(0, 1) = 60.0;
    params.router.value.bias(0, 2) = 60.0;
    Matrix s = rng.uniform_matrix(5, 8, -1.0, 1.0);
    const CollectiveOutput train = collective_forward(s, cfg, params, Mode::kTraining);
    const CollectiveOutput infer = collective_forward(s, cfg, params, Mode::kInference);
    CHECK(max_abs_diff(train.keys, infer.keys) <= 1e-12);
    CHECK(max_abs_diff(train.values, infer.values) <= 1e-12);
}

TEST_CASE("tied routers use one head for both sides") {
    CollectiveConfig cfg = small_config();
    cfg.tie_routers = true;
    Rng rng(16);
    const CollectiveParams params = init_collective_params(cfg, rng);
    CHECK(params.router.value.weight.empty());
    Matrix s = rng.uniform_matrix(5, 8, -1.0, 1.0);
    const CollectiveOutput fwd = collective_forward(s, cfg, params, Mode::kInference);
    CHECK(fwd.key_side.map.indices == fwd.value_side.map.indices);
}

TEST_CASE("config validation catches bad setups") {
    CollectiveConfig cfg = small_config();
    cfg.pool_size = 0;
    CHECK_THROWS_AS(cfg.validate(), usage_error);

    cfg = small_config();
    cfg.peak_weight = -1.0;
    CHECK_THROWS_AS(cfg.validate(), usage_error);

    cfg = small_config();
    cfg.tie_routers = true;
    cfg.share_keys = false;
    CHECK_THROWS_AS(cfg.validate(), usage_error);
}
