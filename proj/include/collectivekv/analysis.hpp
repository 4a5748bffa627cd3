#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/kde.hpp"
#include "collectivekv/matrix.hpp"
#include "collectivekv/metrics.hpp"
#include "collectivekv/svd.hpp"
#include "collectivekv/synthdata.hpp"
#include "collectivekv/trainer.hpp"

namespace ckv {

/// Column means: the per-user summary vector every similarity study compares.
inline Matrix mean_kv(const Matrix& m) {
    if (m.rows() == 0) throw usage_error("mean_kv: empty matrix");
    Matrix out(1, m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double* row = m.row_ptr(r);
        for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += row[c];
    }
    const double inv = 1.0 / static_cast<double>(m.rows());
    for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) *= inv;
    return out;
}

/// Cosine of two row vectors; NaN-free. Returns false when either norm is
/// (numerically) zero, in which case the pair should be skipped.
inline bool cosine(const Matrix& a, const Matrix& b, double& out) {
    a.require_same_shape(b, "cosine");
    double dot_ab = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot_ab += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    if (na <= 1e-300 || nb <= 1e-300) return false;
    out = dot_ab / (std::sqrt(na) * std::sqrt(nb));
    return true;
}

struct SimilaritySample {
    std::size_t user_a = 0;
    std::size_t user_b = 0;
    double value = 0.0;
};

struct SimilarityStudy {
    std::vector<SimilaritySample> samples;
    std::size_t skipped = 0;  // pairs with a zero mean vector
    KdeCurve curve;
};

namespace detail {

/// KDE over sample values; degenerate sets (fewer than 2 values, or zero
/// spread so the automatic bandwidth is undefined) yield an empty curve.
inline KdeCurve try_kde_curve(const std::vector<double>& values) {
    if (values.size() < 2) return {};
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) return {};
    return kde_curve(values);
}

}  // namespace detail

/// Mean-vector cosine similarity of one anchor user against all others,
/// with a KDE over the resulting sample set.
inline SimilarityStudy cross_user_similarity(const std::vector<Matrix>& users,
                                             std::size_t anchor) {
    if (users.size() < 2) throw usage_error("cross_user_similarity: need at least 2 users");
    if (anchor >= users.size()) throw usage_error("cross_user_similarity: anchor out of range");
    SimilarityStudy study;
    const Matrix anchor_mean = mean_kv(users[anchor]);
    for (std::size_t u = 0; u < users.size(); ++u) {
        if (u == anchor) continue;
        double value;
        if (!cosine(anchor_mean, mean_kv(users[u]), value)) {
            ++study.skipped;
            continue;
        }
        study.samples.push_back({anchor, u, value});
    }
    std::vector<double> values;
    values.reserve(study.samples.size());
    for (const auto& s : study.samples) values.push_back(s.value);
    study.curve = detail::try_kde_curve(values);
    return study;
}

struct PrincipalResidualSplit {
    Matrix principal;  // n×k
    Matrix residual;   // n×(d-k)
    double retained_fraction = 0.0;
};

/// Project onto the top-k right-singular directions and their complement.
/// Energy splits exactly (Pythagoras) because the directions are orthonormal.
inline PrincipalResidualSplit principal_residual_split(const Matrix& m, std::size_t k) {
    const std::size_t d = m.cols();
    if (m.rows() < d)
        throw shape_error("principal_residual_split: needs rows >= cols, got " + m.shape_str());
    if (k < 1 || k >= d)
        throw usage_error("principal_residual_split: k must be in [1, cols), got " +
                          std::to_string(k));
    const SvdResult dec = svd(m);
    PrincipalResidualSplit out;
    out.principal = matmul(m, dec.right_vectors.col_slice(0, k));
    out.residual = matmul(m, dec.right_vectors.col_slice(k, d));
    double top = 0.0, total = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double e = dec.singular_values[i] * dec.singular_values[i];
        total += e;
        if (i < k) top += e;
    }
    out.retained_fraction = total > 0.0 ? top / total : 0.0;
    return out;
}

struct SplitSimilarityStudy {
    std::vector<SimilaritySample> principal;
    std::vector<SimilaritySample> residual;
    KdeCurve principal_curve;
    KdeCurve residual_curve;
    double principal_std = 0.0;
    double residual_std = 0.0;
    double principal_frac_above_half = 0.0;  // fraction with |cos| > 0.5
    double residual_frac_above_half = 0.0;
    double mean_retained = 0.0;
    std::size_t skipped = 0;
};

namespace detail {

inline double sample_std(const std::vector<SimilaritySample>& samples) {
    if (samples.size() < 2) return 0.0;
    double mean = 0.0;
    for (const auto& s : samples) mean += s.value;
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (const auto& s : samples) var += (s.value - mean) * (s.value - mean);
    return std::sqrt(var / static_cast<double>(samples.size() - 1));
}

inline double frac_abs_above(const std::vector<SimilaritySample>& samples, double bound) {
    if (samples.empty()) return 0.0;
    std::size_t count = 0;
    for (const auto& s : samples) count += std::abs(s.value) > bound ? 1u : 0u;
    return static_cast<double>(count) / static_cast<double>(samples.size());
}

}  // namespace detail

/// Per-user SVD split, then cross-user mean-vector similarity computed
/// separately on the principal and residual parts. Pairs are enumerated in
/// order and stride-sampled down to `max_pairs` when there are more.
inline SplitSimilarityStudy split_similarity_study(const std::vector<Matrix>& users,
                                                   std::size_t k,
                                                   std::size_t max_pairs = 5000) {
    if (users.size() < 2) throw usage_error("split_similarity_study: need at least 2 users");
    SplitSimilarityStudy study;

    std::vector<Matrix> principal_means, residual_means;
    principal_means.reserve(users.size());
    residual_means.reserve(users.size());
    for (const Matrix& m : users) {
        PrincipalResidualSplit split = principal_residual_split(m, k);
        study.mean_retained += split.retained_fraction;
        principal_means.push_back(mean_kv(split.principal));
        residual_means.push_back(mean_kv(split.residual));
    }
    study.mean_retained /= static_cast<double>(users.size());

    const std::size_t total_pairs = users.size() * (users.size() - 1) / 2;
    const std::size_t stride = std::max<std::size_t>(1, total_pairs / std::max<std::size_t>(max_pairs, 1));
    std::size_t counter = 0;
    for (std::size_t a = 0; a < users.size(); ++a) {
        for (std::size_t b = a + 1; b < users.size(); ++b) {
            if (counter++ % stride != 0) continue;
            double vp, vr;
            if (!cosine(principal_means[a], principal_means[b], vp) ||
                !cosine(residual_means[a], residual_means[b], vr)) {
                ++study.skipped;
                continue;
            }
            study.principal.push_back({a, b, vp});
            study.residual.push_back({a, b, vr});
        }
    }

    auto values_of = [](const std::vector<SimilaritySample>& ss) {
        std::vector<double> v;
        v.reserve(ss.size());
        for (const auto& s : ss) v.push_back(s.value);
        return v;
    };
    study.principal_curve = detail::try_kde_curve(values_of(study.principal));
    study.residual_curve = detail::try_kde_curve(values_of(study.residual));
    study.principal_std = detail::sample_std(study.principal);
    study.residual_std = detail::sample_std(study.residual);
    study.principal_frac_above_half = detail::frac_abs_above(study.principal, 0.5);
    study.residual_frac_above_half = detail::frac_abs_above(study.residual, 0.5);
    return study;
}

struct ActivationHistogram {
    std::size_t bin_size = 0;
    std::vector<std::uint64_t> bins;  // ceil(m / bin_size) bins covering [0, m)
    std::uint64_t total = 0;

    double max_bin_fraction() const {
        if (total == 0) return 0.0;
        std::uint64_t mx = 0;
        for (std::uint64_t b : bins) mx = std::max(mx, b);
        return static_cast<double>(mx) / static_cast<double>(total);
    }
};

/// Histogram of routed pool indices with the given bin size.
inline ActivationHistogram activation_histogram(
    const std::vector<std::vector<std::uint16_t>>& index_sets, std::size_t pool_size,
    std::size_t bin_size) {
    if (bin_size < 1) throw usage_error("activation_histogram: bin_size must be >= 1");
    if (pool_size < 1) throw usage_error("activation_histogram: pool_size must be >= 1");
    ActivationHistogram h;
    h.bin_size = bin_size;
    h.bins.assign((pool_size + bin_size - 1) / bin_size, 0);
    for (const auto& indices : index_sets) {
        for (std::uint16_t idx : indices) {
            if (idx >= pool_size)
                throw usage_error("activation_histogram: index " + std::to_string(idx) +
                                  " outside pool of " + std::to_string(pool_size));
            ++h.bins[idx / bin_size];
            ++h.total;
        }
    }
    return h;
}

/// |unique(a) ∩ unique(b)| / min(|unique(a)|, |unique(b)|): the overlap of two
/// users' activated pool indices, robust to unequal sequence lengths.
inline double overlap_ratio(const std::vector<std::uint16_t>& a,
                            const std::vector<std::uint16_t>& b) {
    if (a.empty() || b.empty()) throw usage_error("overlap_ratio: empty index set");
    const std::set<std::uint16_t> ua(a.begin(), a.end());
    const std::set<std::uint16_t> ub(b.begin(), b.end());
    std::size_t inter = 0;
    for (std::uint16_t v : ua) inter += ub.count(v);
    return static_cast<double>(inter) /
           static_cast<double>(std::min(ua.size(), ub.size()));
}

/// Users with the shortest histories, `rate` of the population (at least 1).
/// The returned indices are sorted ascending, so rate = 1.0 reproduces the
/// standard evaluation order exactly.
inline std::vector<std::size_t> longtail_user_indices(const SynthDataset& ds, double rate) {
    if (!(rate > 0.0 && rate <= 1.0))
        throw usage_error("longtail rate must be in (0, 1], got " + format_double(rate));
    std::vector<std::size_t> order(ds.users.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return ds.users[a].history.size() < ds.users[b].history.size();
    });
    const std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(ds.users.size()))));
    order.resize(std::min(keep, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

/// Metrics restricted to the longtail slice.
inline MetricsReport longtail_slice(const SynthDataset& ds, double rate, const ModelConfig& cfg,
                                    const ModelParams& params, const std::string& run_id) {
    return evaluate(cfg, params, ds, longtail_user_indices(ds, rate), run_id);
}

}  // namespace ckv
