#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/io.hpp"

namespace ckv {

constexpr double kProbClamp = 1e-7;

/// Per-example predictions with labels and user ids; the unit every ranking
/// metric consumes.
struct PredictionBatch {
    std::vector<double> probs;
    std::vector<int> labels;             // {0, 1}
    std::vector<std::string> user_ids;

    std::size_t size() const { return probs.size(); }

    void add(double prob, int label, std::string user_id) {
        probs.push_back(prob);
        labels.push_back(label);
        user_ids.push_back(std::move(user_id));
    }

    void check() const {
        if (probs.size() != labels.size() || probs.size() != user_ids.size())
            throw usage_error("PredictionBatch: ragged fields");
        if (probs.empty()) throw usage_error("PredictionBatch: empty batch");
    }
};

inline double clamp_prob(double p) {
    return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

/// Mean binary cross entropy with probabilities clamped to
/// [1e-7, 1-1e-7] so the loss stays finite.
inline double bce_loss(const PredictionBatch& batch) {
    batch.check();
    double acc = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double p = clamp_prob(batch.probs[i]);
        acc += batch.labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return acc / static_cast<double>(batch.size());
}

namespace detail {

/// AUC by the rank-sum method with average ranks for ties (ties count 1/2).
inline double auc_from_scores(const std::vector<double>& scores,
                              const std::vector<int>& labels) {
    const std::size_t n = scores.size();
    std::size_t positives = 0;
    for (int y : labels) positives += static_cast<std::size_t>(y != 0);
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0)
        throw metric_error("auc: batch contains a single class");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double positive_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) positive_rank_sum += avg_rank;
        i = j;
    }
    const double p = static_cast<double>(positives), q = static_cast<double>(negatives);
    return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

}  // namespace detail

/// Probability that a random positive outranks a random negative.
inline double auc(const PredictionBatch& batch) {
    batch.check();
    return detail::auc_from_scores(batch.probs, batch.labels);
}

/// Per-user AUC weighted by that user's example count. Users whose labels are
/// single-class are skipped; if every user is skipped the metric is undefined.
inline double gauc(const PredictionBatch& batch) {
    batch.check();
    std::map<std::string, std::vector<std::size_t>> by_user;
    for (std::size_t i = 0; i < batch.size(); ++i) by_user[batch.user_ids[i]].push_back(i);

    double weighted = 0.0, weight_sum = 0.0;
    for (const auto& [user, idx] : by_user) {
        std::vector<double> scores;
        std::vector<int> labels;
        scores.reserve(idx.size());
        labels.reserve(idx.size());
        bool has_pos = false, has_neg = false;
        for (std::size_t i : idx) {
            scores.push_back(batch.probs[i]);
            labels.push_back(batch.labels[i]);
            (batch.labels[i] ? has_pos : has_neg) = true;
        }
        if (!has_pos || !has_neg) continue;
        const double w = static_cast<double>(idx.size());
        weighted += w * detail::auc_from_scores(scores, labels);
        weight_sum += w;
    }
    if (weight_sum == 0.0)
        throw metric_error("gauc: no user has both classes");
    return weighted / weight_sum;
}

/// One evaluation run's scorecard.
struct MetricsReport {
    std::string run_id;
    std::string mode;  // "baseline" or "collective"
    std::size_t user_dim = 0;
    std::size_t global_dim = 0;
    std::size_t pool_size = 0;
    double auc = 0.0;
    double gauc = 0.0;
    double logloss = 0.0;
    double compression_rate = 1.0;
    double mean_peak = 0.0;
    double mean_balance = 0.0;
    std::vector<double> latency_ms;  // optional decode latency samples

    static std::string csv_header() {
        return "run_id,mode,d_u,d_g,m,auc,gauc,logloss,compression_rate";
    }

    std::string csv_row() const;
};

inline std::string MetricsReport::csv_row() const {
    return run_id + "," + mode + "," + std::to_string(user_dim) + "," +
           std::to_string(global_dim) + "," + std::to_string(pool_size) + "," +
           format_double(auc) + "," + format_double(gauc) + "," + format_double(logloss) +
           "," + format_double(compression_rate);
}

}  // namespace ckv
