#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "collectivekv/adam.hpp"
#include "collectivekv/errors.hpp"
#include "collectivekv/model.hpp"
#include "collectivekv/synthdata.hpp"

namespace ckv {

struct TrainSettings {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    std::uint64_t seed = 1;
};

struct EpochLog {
    std::size_t epoch = 0;
    double bce = 0.0;
    double peak = 0.0;
    double balance = 0.0;
    double total = 0.0;
    double mean_gate = 0.0;  // mean σ(selected logit) over shared sides
};

inline CtrExample make_example(const SynthDataset& ds, std::size_t user, std::size_t target) {
    CtrExample ex;
    ex.history = ds.history_embeddings(user);
    ex.target = ds.target_embedding(user, target);
    ex.label = ds.users[user].labels[target];
    ex.user_id = ds.users[user].id;
    return ex;
}

/// Deterministic single-owner trainer: mini-batch Adam over BCE plus the
/// weighted router losses. All shuffling derives from the seed, so identical
/// settings give bit-identical parameters.
class Trainer {
  public:
    Trainer(ModelConfig cfg, TrainSettings settings)
        : cfg_(std::move(cfg)), settings_(settings) {
        cfg_.validate();
        Rng init_rng(Rng::derive(settings_.seed, "init"));
        params_ = init_model_params(cfg_, init_rng);
        for_each_model_tensor(cfg_, params_, [&](const char*, const Matrix& p) {
            adam_.emplace_back(p.rows(), p.cols(), settings_.learning_rate);
        });
    }

    const ModelConfig& config() const { return cfg_; }
    const ModelParams& params() const { return params_; }
    ModelParams& params() { return params_; }

    EpochLog run_epoch(const SynthDataset& ds, const std::vector<std::size_t>& train_users,
                       std::size_t epoch) {
        std::vector<std::pair<std::size_t, std::size_t>> examples;
        for (std::size_t u : train_users)
            for (std::size_t t = 0; t < ds.users[u].targets.size(); ++t)
                examples.emplace_back(u, t);
        if (examples.empty()) throw usage_error("run_epoch: no training examples");

        Rng shuffle_rng(Rng::derive(Rng::derive(settings_.seed, "epoch"), epoch));
        for (std::size_t i = examples.size(); i > 1; --i)
            std::swap(examples[i - 1], examples[shuffle_rng.below(i)]);

        EpochLog log;
        log.epoch = epoch;
        double gate_sum = 0.0;
        std::size_t gate_count = 0;

        for (std::size_t start = 0; start < examples.size(); start += settings_.batch_size) {
            const std::size_t stop = std::min(start + settings_.batch_size, examples.size());
            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            ModelGrads grads = make_model_grads(cfg_, params_);

            for (std::size_t e = start; e < stop; ++e) {
                const CtrExample ex = make_example(ds, examples[e].first, examples[e].second);
                const CtrForward fwd = ctr_forward(ex, cfg_, params_, Mode::kTraining);
                const double p = clamp_prob(fwd.prob);
                log.bce += ex.label ? -std::log(p) : -std::log(1.0 - p);
                log.peak += fwd.col.peak;
                log.balance += fwd.col.balance;
                for (const SideContext* side : {&fwd.col.key_side, &fwd.col.value_side}) {
                    if (!side->shared) continue;
                    for (double g : side->gates) gate_sum += g;
                    gate_count += side->gates.size();
                }
                ctr_backward(ex, cfg_, params_, fwd,
                             inv_batch * bce_logit_grad(fwd.prob, ex.label), inv_batch, grads);
            }

            std::vector<std::pair<const char*, Matrix*>> param_ptrs, grad_ptrs;
            for_each_model_tensor(cfg_, params_, [&](const char* name, Matrix& p) {
                param_ptrs.emplace_back(name, &p);
            });
            for_each_model_tensor(cfg_, grads, [&](const char* name, Matrix& g) {
                grad_ptrs.emplace_back(name, &g);
            });
            for (std::size_t i = 0; i < param_ptrs.size(); ++i) {
                if (!grad_ptrs[i].second->all_finite())
                    throw numeric_error(
                        std::string("training diverged: non-finite gradient in ") +
                        grad_ptrs[i].first);
                adam_step(*param_ptrs[i].second, *grad_ptrs[i].second, adam_[i]);
            }
        }

        const double inv_examples = 1.0 / static_cast<double>(examples.size());
        log.bce *= inv_examples;
        log.peak *= inv_examples;
        log.balance *= inv_examples;
        log.total = log.bce + cfg_.collective.peak_weight * log.peak +
                    cfg_.collective.balance_weight * log.balance;
        log.mean_gate = gate_count ? gate_sum / static_cast<double>(gate_count) : 0.0;
        if (!std::isfinite(log.total))
            throw numeric_error("training diverged: non-finite loss at epoch " +
                                std::to_string(epoch));
        return log;
    }

    /// Runs up to settings.epochs epochs; `stop` (optional) can end training
    /// early, e.g. once the mean gate crosses a threshold.
    std::vector<EpochLog> fit(const SynthDataset& ds,
                              const std::vector<std::size_t>& train_users,
                              const std::function<bool(const EpochLog&)>& stop = nullptr) {
        std::vector<EpochLog> logs;
        for (std::size_t epoch = 0; epoch < settings_.epochs; ++epoch) {
            logs.push_back(run_epoch(ds, train_users, epoch));
            if (stop && stop(logs.back())) break;
        }
        return logs;
    }

  private:
    ModelConfig cfg_;
    TrainSettings settings_;
    ModelParams params_;
    std::vector<AdamState> adam_;
};

/// Inference (or training-mode, for consistency experiments) predictions over
/// every target of the given users.
inline PredictionBatch predict(const ModelConfig& cfg, const ModelParams& params,
                               const SynthDataset& ds, const std::vector<std::size_t>& users,
                               Mode mode = Mode::kInference) {
    PredictionBatch batch;
    for (std::size_t u : users) {
        for (std::size_t t = 0; t < ds.users[u].targets.size(); ++t) {
            const CtrExample ex = make_example(ds, u, t);
            const CtrForward fwd = ctr_forward(ex, cfg, params, mode);
            batch.add(fwd.prob, ex.label, ex.user_id);
        }
    }
    return batch;
}

inline MetricsReport evaluate(const ModelConfig& cfg, const ModelParams& params,
                              const SynthDataset& ds, const std::vector<std::size_t>& users,
                              const std::string& run_id) {
    const PredictionBatch batch = predict(cfg, params, ds, users);
    MetricsReport report;
    report.run_id = run_id;
    report.mode = cfg.collective.any_shared() ? "collective" : "baseline";
    report.user_dim = cfg.collective.user_dim;
    report.global_dim = cfg.collective.global_dim;
    report.pool_size = cfg.collective.pool_size;
    report.auc = auc(batch);
    report.gauc = gauc(batch);
    report.logloss = bce_loss(batch);
    return report;
}

}  // namespace ckv
