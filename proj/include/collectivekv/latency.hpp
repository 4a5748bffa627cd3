#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "collectivekv/cache.hpp"
#include "collectivekv/errors.hpp"
#include "collectivekv/matrix.hpp"

namespace ckv {

/// One storage tier: a transfer costs setup_ms + bytes/bandwidth.
struct TierModel {
    double setup_ms = 0.05;
    double bytes_per_ms = 1e6;

    void validate() const {
        if (setup_ms < 0.0) throw usage_error("tier model: setup_ms must be >= 0");
        if (bytes_per_ms <= 0.0) throw usage_error("tier model: bandwidth must be > 0");
    }
};

inline double simulated_load_latency(std::size_t bytes, const TierModel& tier) {
    tier.validate();
    return tier.setup_ms + static_cast<double>(bytes) / tier.bytes_per_ms;
}

struct AffineFit {
    double intercept = 0.0;
    double slope = 0.0;
    double r_squared = 0.0;

    double at(double x) const { return intercept + slope * x; }
};

/// Ordinary or weighted least squares for y ≈ a + b·x. Weights default to 1;
/// passing 1/y² minimizes relative residuals instead of absolute ones.
inline AffineFit affine_fit(const std::vector<double>& x, const std::vector<double>& y,
                            const std::vector<double>& weights = {}) {
    if (x.size() != y.size() || x.size() < 2)
        throw usage_error("affine_fit: need matching x/y with at least 2 points");
    std::vector<double> w = weights;
    if (w.empty()) w.assign(x.size(), 1.0);
    if (w.size() != x.size()) throw usage_error("affine_fit: weight length mismatch");

    double sw = 0, swx = 0, swy = 0, swxx = 0, swxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        swx += w[i] * x[i];
        swy += w[i] * y[i];
        swxx += w[i] * x[i] * x[i];
        swxy += w[i] * x[i] * y[i];
    }
    const double det = sw * swxx - swx * swx;
    if (std::abs(det) < 1e-300) throw numeric_error("affine_fit: degenerate x values");
    AffineFit fit;
    fit.slope = (sw * swxy - swx * swy) / det;
    fit.intercept = (swxx * swy - swx * swxy) / det;

    double ss_res = 0, ss_tot = 0;
    const double mean_y = swy / sw;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - fit.at(x[i]);
        ss_res += w[i] * r * r;
        const double d = y[i] - mean_y;
        ss_tot += w[i] * d * d;
    }
    fit.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    return fit;
}

/// Baseline KV-cache load latencies of the reference hardware profile
/// (datacenter GPU, external cache storage) used to calibrate the simulated
/// tier: batch size -> milliseconds.
inline const std::vector<double>& reference_batch_sizes() {
    static const std::vector<double> v = {1, 8, 32, 64, 128, 256, 512};
    return v;
}

inline const std::vector<double>& reference_baseline_ms() {
    static const std::vector<double> v = {0.099, 1.030, 1.808, 3.418,
                                          6.679, 15.216, 32.991};
    return v;
}

/// Least-squares fit of the reference profile, weighted by 1/y² so the fit
/// minimizes relative error (that is how the profile is judged). Converts the
/// per-batch slope into a bus-bandwidth using the mean bytes of one entry;
/// a negative fitted intercept is clamped to zero (setup latency cannot be
/// negative).
inline TierModel fit_tier_to_reference(double mean_entry_bytes) {
    const auto& xs = reference_batch_sizes();
    const auto& ys = reference_baseline_ms();
    std::vector<double> w(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) w[i] = 1.0 / (ys[i] * ys[i]);
    const AffineFit fit = affine_fit(xs, ys, w);
    TierModel tier;
    tier.setup_ms = std::max(fit.intercept, 0.0);
    tier.bytes_per_ms = mean_entry_bytes / fit.slope;
    return tier;
}

/// Row views of the resident pools for one entry: the decode stage reads
/// collective K/V through these pointers instead of materializing copies.
struct GatherView {
    std::vector<const double*> key_rows;
    std::vector<const double*> value_rows;
};

inline GatherView gather_view(const GlobalPool& pool, const CacheEntry& entry) {
    if (!entry.routed())
        throw usage_error("gather_view: entry has no pool indices (full-width entry)");
    GatherView view;
    view.key_rows.resize(entry.seq_len);
    view.value_rows.resize(entry.seq_len);
    for (std::size_t i = 0; i < entry.seq_len; ++i) {
        view.key_rows[i] = pool.keys.row_ptr(entry.key_indices[i]);
        view.value_rows[i] = pool.values.row_ptr(entry.value_indices[i]);
    }
    return view;
}

/// Batched gather dispatched on a fixed-size worker team regardless of batch
/// size, mirroring the launch-dominated profile of an accelerator: small
/// batches pay mostly dispatch, large batches amortize it.
inline std::vector<GatherView> gather_views_batch(const GlobalPool& pool,
                                                  const std::vector<const CacheEntry*>& batch,
                                                  unsigned workers = 0) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<GatherView> views(batch.size());
    std::vector<std::thread> team;
    team.reserve(workers);
    for (unsigned t = 0; t < workers; ++t) {
        team.emplace_back([&, t]() {
            for (std::size_t i = t; i < batch.size(); i += workers)
                views[i] = gather_view(pool, *batch[i]);
        });
    }
    for (auto& th : team) th.join();
    return views;
}

struct BenchRow {
    std::size_t batch_size = 0;
    double baseline_ms = 0.0;
    double collective_load_ms = 0.0;
    double collective_gather_ms = 0.0;
    double collective_gather_std_ms = 0.0;
    double ratio = 0.0;  // baseline / (collective load + gather)
};

/// Latency comparison per batch size: the baseline loads b full entries
/// through the tier; the collective arm loads b compact entries through the
/// same tier and then gathers pool rows in resident memory (measured
/// wall-clock, `reps` repetitions).
inline std::vector<BenchRow> bench_latency(const std::vector<CacheEntry>& compact_entries,
                                           const std::vector<std::size_t>& baseline_bytes,
                                           const GlobalPool& pool,
                                           const std::vector<std::size_t>& batch_sizes,
                                           const TierModel& baseline_tier,
                                           const TierModel& collective_tier,
                                           std::size_t reps = 20) {
    if (compact_entries.empty()) throw usage_error("bench_latency: no prefilled entries");
    if (baseline_bytes.size() != compact_entries.size())
        throw usage_error("bench_latency: baseline byte list must match entries");
    if (reps < 1) throw usage_error("bench_latency: reps must be >= 1");

    std::vector<BenchRow> rows;
    for (std::size_t b : batch_sizes) {
        if (b == 0) throw usage_error("bench_latency: batch size 0");
        BenchRow row;
        row.batch_size = b;

        std::size_t full_bytes = 0, compact_bytes = 0;
        std::vector<const CacheEntry*> batch(b);
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t pick = i % compact_entries.size();
            batch[i] = &compact_entries[pick];
            full_bytes += baseline_bytes[pick];
            compact_bytes += compact_entries[pick].payload_bytes();
        }
        row.baseline_ms = simulated_load_latency(full_bytes, baseline_tier);
        row.collective_load_ms = simulated_load_latency(compact_bytes, collective_tier);

        std::vector<double> samples(reps);
        for (std::size_t rep = 0; rep < reps; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto views = gather_views_batch(pool, batch);
            const auto t1 = std::chrono::steady_clock::now();
            if (views.size() != b) throw numeric_error("bench_latency: gather dropped entries");
            samples[rep] =
                std::chrono::duration<double, std::milli>(t1 - t0).count();
        }
        double mean = 0.0;
        for (double s : samples) mean += s;
        mean /= static_cast<double>(reps);
        double var = 0.0;
        for (double s : samples) var += (s - mean) * (s - mean);
        var /= static_cast<double>(reps);
        row.collective_gather_ms = mean;
        row.collective_gather_std_ms = std::sqrt(var);
        row.ratio = row.baseline_ms / (row.collective_load_ms + row.collective_gather_ms);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace ckv
