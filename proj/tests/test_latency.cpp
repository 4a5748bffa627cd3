#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "collectivekv/cache.hpp"
#include "collectivekv/latency.hpp"
#include "collectivekv/rng.hpp"

using namespace ckv;

TEST_CASE("simulated load latency is setup plus bytes over bandwidth") {
    TierModel tier{0.05, 1e6};
    CHECK(simulated_load_latency(0, tier) == 0.05);
    CHECK(simulated_load_latency(100000, tier) == Catch::Approx(0.15).margin(1e-15));

    TierModel no_setup{0.0, 5e5};
    const double one = simulated_load_latency(12345, no_setup);
    const double two = simulated_load_latency(24690, no_setup);
    CHECK(two == Catch::Approx(2.0 * one).margin(1e-15));

    CHECK_THROWS_AS(simulated_load_latency(1, TierModel{-1.0, 1.0}), usage_error);
    CHECK_THROWS_AS(simulated_load_latency(1, TierModel{0.0, 0.0}), usage_error);
}

TEST_CASE("affine fit recovers exact tier parameters to 1e-9") {
    TierModel tier{0.37, 2.5e5};
    std::vector<double> x, y;
    for (double bytes : {1e3, 5e4, 2e5, 1e6, 3e6}) {
        x.push_back(bytes);
        y.push_back(simulated_load_latency(static_cast<std::size_t>(bytes), tier));
    }
    const AffineFit fit = affine_fit(x, y);
    CHECK(std::abs(fit.intercept - tier.setup_ms) <= 1e-9);
    CHECK(std::abs(fit.slope - 1.0 / tier.bytes_per_ms) <= 1e-12);
    CHECK(fit.r_squared >= 1.0 - 1e-12);
}

TEST_CASE("reference-profile fit keeps the large-batch points close") {
    const TierModel tier = fit_tier_to_reference(/*mean_entry_bytes=*/32768.0);
    CHECK(tier.setup_ms >= 0.0);
    CHECK(tier.bytes_per_ms > 0.0);
    // The implied per-entry slope reproduces the batch-512 reference point
    // within a few percent.
    const double at512 = tier.setup_ms + 512.0 * 32768.0 / tier.bytes_per_ms;
    CHECK(std::abs(at512 - 32.991) / 32.991 < 0.15);
}

TEST_CASE("gather views point at the right pool rows") {
    Rng rng(81);
    GlobalPool pool;
    pool.keys = rng.uniform_matrix(10, 6, -1.0, 1.0);
    pool.values = rng.uniform_matrix(10, 6, -1.0, 1.0);
    CacheEntry entry;
    entry.user_id = "u";
    entry.seq_len = 4;
    entry.side_dim = 2;
    entry.idx_width = 2;
    entry.user_keys = Matrix(4, 2);
    entry.user_values = Matrix(4, 2);
    entry.key_indices = {3, 1, 4, 1};
    entry.value_indices = {0, 9, 2, 2};
    const GatherView view = gather_view(pool, entry);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(view.key_rows[i] == pool.keys.row_ptr(entry.key_indices[i]));
        CHECK(view.value_rows[i] == pool.values.row_ptr(entry.value_indices[i]));
    }
}

TEST_CASE("bench rows are well-formed and trends hold") {
    Rng rng(82);
    GlobalPool pool;
    pool.keys = rng.uniform_matrix(64, 28, -1.0, 1.0);
    pool.values = rng.uniform_matrix(64, 28, -1.0, 1.0);

    std::vector<CacheEntry> entries(32);
    std::vector<std::size_t> baseline_bytes(32);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CacheEntry& e = entries[i];
        e.user_id = "u" + std::to_string(i);
        e.seq_len = 10 + rng.below(10);
        e.side_dim = 4;
        e.elem_width = 4;
        e.idx_width = 2;
        e.user_keys = Matrix(e.seq_len, 4);
        e.user_values = Matrix(e.seq_len, 4);
        e.key_indices.resize(e.seq_len);
        e.value_indices.resize(e.seq_len);
        for (std::size_t j = 0; j < e.seq_len; ++j) {
            e.key_indices[j] = static_cast<std::uint16_t>(rng.below(64));
            e.value_indices[j] = static_cast<std::uint16_t>(rng.below(64));
        }
        baseline_bytes[i] = e.seq_len * 2 * 32 * 4;
    }

    const TierModel tier{0.05, 2.5e5};
    const std::vector<std::size_t> batches = {1, 8, 32, 64};
    const auto rows = bench_latency(entries, baseline_bytes, pool, batches, tier, tier, 5);
    REQUIRE(rows.size() == 4);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].batch_size == batches[i]);
        CHECK(rows[i].baseline_ms > 0.0);
        CHECK(rows[i].collective_load_ms > 0.0);
        CHECK(rows[i].collective_load_ms < rows[i].baseline_ms);
        CHECK(rows[i].collective_gather_ms >= 0.0);
        CHECK(rows[i].ratio > 0.0);
    }
    // Simulated baseline is affine in batch size by construction.
    std::vector<double> x, y;
    for (const auto& r : rows) {
        x.push_back(static_cast<double>(r.batch_size));
        y.push_back(r.baseline_ms);
    }
    CHECK(affine_fit(x, y).r_squared >= 0.99);
}

TEST_CASE("bench rejects bad inputs") {
    GlobalPool pool;
    pool.keys = Matrix(4, 2);
    pool.values = Matrix(4, 2);
    CHECK_THROWS_AS(bench_latency({}, {}, pool, {1}, TierModel{}, TierModel{}, 5), usage_error);
}
