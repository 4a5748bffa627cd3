#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "collectivekv/errors.hpp"
#include "collectivekv/io.hpp"
#include "collectivekv/matrix.hpp"
#include "collectivekv/rng.hpp"

namespace ckv {

/// Synthetic sequential-recommendation generator. The planted structure:
///
///   * item latents live on the unit sphere of an r-dimensional subspace,
///     concentrated around `item_clusters` topic centers with
///     `item_cluster_spread` within-cluster noise (real catalogs are heavily
///     redundant, which is what makes cross-user sharing viable), embedded
///     into d_e through an orthonormal basis plus `embed_noise` off-subspace
///     noise (0.1 ≈ 1% noise energy), so per-user embedding matrices are
///     near rank r;
///   * group preference vectors mix a shared popularity direction with a
///     group-specific direction, so user histories correlate across the
///     population, strongly so within a group;
///   * users sample their history items by softmax affinity to their own
///     latent (group center + user noise of scale `noise_scale`);
///   * click labels are Bernoulli(σ(affinity/temperature)) against the
///     target item; the effective temperature rises for short histories
///     (`tail_weakness`), so the shortest users carry the weakest signal.
struct SynthConfig {
    std::size_t num_users = 500;
    std::size_t num_items = 2000;
    std::size_t num_groups = 8;
    std::size_t item_clusters = 48;   // topic centers in latent space
    std::size_t embed_dim = 32;       // d_e
    std::size_t latent_rank = 10;     // r
    std::size_t min_seq_len = 40;
    std::size_t max_seq_len = 120;
    std::size_t targets_per_user = 6;
    double noise_scale = 0.25;        // user deviation from the group center
    double item_cluster_spread = 0.25;  // within-topic latent noise
    double embed_noise = 0.1;         // off-subspace embedding noise
    double popularity_weight = 0.5;   // shared component of group centers
    double concentration = 6.0;       // softmax sharpness of history sampling
    double affinity_scale = 6.0;      // label logit scale
    double label_temperature = 0.5;
    double tail_weakness = 2.0;       // extra label noise for short histories
    std::uint64_t seed = 1;

    void validate() const {
        std::vector<std::string> bad;
        if (num_users < 1) bad.push_back("num_users must be >= 1");
        if (num_items < 1) bad.push_back("num_items must be >= 1");
        if (num_groups < 1) bad.push_back("num_groups must be >= 1");
        if (item_clusters < 1) bad.push_back("item_clusters must be >= 1");
        if (item_cluster_spread < 0.0) bad.push_back("item_cluster_spread must be >= 0");
        if (latent_rank < 1 || latent_rank > embed_dim)
            bad.push_back("latent_rank must be in [1, embed_dim]");
        if (min_seq_len < 1 || min_seq_len > max_seq_len)
            bad.push_back("need 1 <= min_seq_len <= max_seq_len");
        if (targets_per_user < 1) bad.push_back("targets_per_user must be >= 1");
        if (noise_scale < 0.0) bad.push_back("noise_scale must be >= 0");
        if (embed_noise < 0.0) bad.push_back("embed_noise must be >= 0");
        if (popularity_weight < 0.0 || popularity_weight > 1.0)
            bad.push_back("popularity_weight must be in [0, 1]");
        if (label_temperature < 0.0) bad.push_back("label_temperature must be >= 0");
        if (tail_weakness < 0.0) bad.push_back("tail_weakness must be >= 0");
        if (!bad.empty()) {
            std::string msg = "synth config invalid:";
            for (const auto& b : bad) msg += " " + b + ";";
            throw usage_error(msg);
        }
    }

    std::string manifest() const {
        std::string s;
        auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
        kv("num_users", std::to_string(num_users));
        kv("num_items", std::to_string(num_items));
        kv("num_groups", std::to_string(num_groups));
        kv("item_clusters", std::to_string(item_clusters));
        kv("embed_dim", std::to_string(embed_dim));
        kv("latent_rank", std::to_string(latent_rank));
        kv("min_seq_len", std::to_string(min_seq_len));
        kv("max_seq_len", std::to_string(max_seq_len));
        kv("targets_per_user", std::to_string(targets_per_user));
        kv("noise_scale", format_double(noise_scale));
        kv("item_cluster_spread", format_double(item_cluster_spread));
        kv("embed_noise", format_double(embed_noise));
        kv("popularity_weight", format_double(popularity_weight));
        kv("concentration", format_double(concentration));
        kv("affinity_scale", format_double(affinity_scale));
        kv("label_temperature", format_double(label_temperature));
        kv("tail_weakness", format_double(tail_weakness));
        kv("seed", std::to_string(seed));
        return s;
    }
};

struct SynthUser {
    std::string id;
    int group = 0;
    std::vector<std::uint32_t> history;  // item ids
    std::vector<std::uint32_t> targets;  // item ids, one per example
    std::vector<std::uint8_t> labels;    // {0,1}, parallel to targets
};

struct SynthDataset {
    SynthConfig config;
    Matrix item_embeddings;  // num_items×d_e
    Matrix item_latents;     // num_items×r (generation internals, kept for oracles)
    Matrix user_latents;     // num_users×r
    std::vector<SynthUser> users;

    Matrix history_embeddings(std::size_t user) const {
        const SynthUser& u = users[user];
        Matrix s(u.history.size(), config.embed_dim);
        for (std::size_t i = 0; i < u.history.size(); ++i)
            std::copy(item_embeddings.row_ptr(u.history[i]),
                      item_embeddings.row_ptr(u.history[i]) + config.embed_dim, s.row_ptr(i));
        return s;
    }

    Matrix target_embedding(std::size_t user, std::size_t example) const {
        return item_embeddings.row(users[user].targets[example]);
    }

    /// Ground-truth click probability (the Bayes-optimal score).
    double true_click_prob(std::size_t user, std::size_t example) const {
        const SynthUser& u = users[user];
        double affinity = 0.0;
        for (std::size_t c = 0; c < config.latent_rank; ++c)
            affinity += user_latents(user, c) * item_latents(u.targets[example], c);
        return sigmoid(config.affinity_scale * affinity / effective_temperature(u));
    }

    double effective_temperature(const SynthUser& u) const {
        const double span =
            static_cast<double>(config.max_seq_len - config.min_seq_len) + 1.0;
        const double norm =
            (static_cast<double>(u.history.size()) - static_cast<double>(config.min_seq_len)) /
            span;
        return config.label_temperature * (1.0 + config.tail_weakness * (1.0 - norm));
    }
};

namespace detail {

inline void normalize_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double* row = m.row_ptr(r);
        double norm = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) norm += row[c] * row[c];
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (std::size_t c = 0; c < m.cols(); ++c) row[c] /= norm;
    }
}

/// Orthonormal r×d basis via Gram-Schmidt on Gaussian rows.
inline Matrix random_orthonormal_rows(std::size_t r, std::size_t d, Rng& rng) {
    Matrix basis(r, d);
    rng.fill_normal(basis);
    for (std::size_t i = 0; i < r; ++i) {
        double* row = basis.row_ptr(i);
        for (std::size_t j = 0; j < i; ++j) {
            const double* prev = basis.row_ptr(j);
            double proj = 0.0;
            for (std::size_t c = 0; c < d; ++c) proj += row[c] * prev[c];
            for (std::size_t c = 0; c < d; ++c) row[c] -= proj * prev[c];
        }
        double norm = 0.0;
        for (std::size_t c = 0; c < d; ++c) norm += row[c] * row[c];
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < d; ++c) row[c] /= norm;
    }
    return basis;
}

/// Draw from a discrete CDF by binary search.
inline std::size_t sample_cdf(const std::vector<double>& cdf, double u) {
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u * cdf.back());
    return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace detail

/// Pure function of the config (seed included): regenerating from the same
/// manifest reproduces every byte.
inline SynthDataset generate(const SynthConfig& config) {
    config.validate();
    SynthDataset ds;
    ds.config = config;
    Rng rng(Rng::derive(config.seed, "synthdata"));

    const std::size_t r = config.latent_rank, d = config.embed_dim;

    const Matrix basis = detail::random_orthonormal_rows(r, d, rng);

    Matrix popularity(1, r);
    rng.fill_normal(popularity);
    detail::normalize_rows(popularity);

    Matrix group_centers(config.num_groups, r);
    rng.fill_normal(group_centers);
    detail::normalize_rows(group_centers);
    for (std::size_t g = 0; g < config.num_groups; ++g)
        for (std::size_t c = 0; c < r; ++c)
            group_centers(g, c) = config.popularity_weight * popularity(0, c) +
                                  (1.0 - config.popularity_weight) * group_centers(g, c);
    detail::normalize_rows(group_centers);

    // Items: unit latents concentrated around topic centers, embedded plus
    // off-subspace noise.
    Matrix topic_centers(config.item_clusters, r);
    rng.fill_normal(topic_centers);
    detail::normalize_rows(topic_centers);
    ds.item_latents = Matrix(config.num_items, r);
    for (std::size_t i = 0; i < config.num_items; ++i) {
        const std::size_t topic = i % config.item_clusters;
        for (std::size_t c = 0; c < r; ++c)
            ds.item_latents(i, c) =
                topic_centers(topic, c) + config.item_cluster_spread * rng.normal();
    }
    detail::normalize_rows(ds.item_latents);
    ds.item_embeddings = matmul(ds.item_latents, basis);
    if (config.embed_noise > 0.0) {
        const double scale = config.embed_noise / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < ds.item_embeddings.size(); ++i)
            ds.item_embeddings.data()[i] += scale * rng.normal();
    }

    // Users.
    ds.user_latents = Matrix(config.num_users, r);
    ds.users.resize(config.num_users);
    std::vector<double> cdf(config.num_items);
    for (std::size_t u = 0; u < config.num_users; ++u) {
        SynthUser& user = ds.users[u];
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "u%05zu", u);
        user.id = idbuf;
        user.group = static_cast<int>(u % config.num_groups);

        for (std::size_t c = 0; c < r; ++c)
            ds.user_latents(u, c) =
                group_centers(static_cast<std::size_t>(user.group), c) +
                config.noise_scale * rng.normal();
        double norm = 0.0;
        for (std::size_t c = 0; c < r; ++c) norm += ds.user_latents(u, c) * ds.user_latents(u, c);
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (std::size_t c = 0; c < r; ++c) ds.user_latents(u, c) /= norm;

        // History: softmax(concentration·affinity) over the catalog.
        double mx = -1e300;
        for (std::size_t i = 0; i < config.num_items; ++i) {
            double aff = 0.0;
            for (std::size_t c = 0; c < r; ++c)
                aff += ds.item_latents(i, c) * ds.user_latents(u, c);
            cdf[i] = config.concentration * aff;
            mx = std::max(mx, cdf[i]);
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < config.num_items; ++i) {
            acc += std::exp(cdf[i] - mx);
            cdf[i] = acc;
        }

        const std::size_t len =
            config.min_seq_len +
            rng.below(config.max_seq_len - config.min_seq_len + 1);
        user.history.resize(len);
        for (std::size_t i = 0; i < len; ++i)
            user.history[i] =
                static_cast<std::uint32_t>(detail::sample_cdf(cdf, rng.uniform()));

        // Targets drawn uniformly; labels from the planted affinity.
        user.targets.resize(config.targets_per_user);
        user.labels.resize(config.targets_per_user);
        const double temp = ds.effective_temperature(user);
        for (std::size_t t = 0; t < config.targets_per_user; ++t) {
            const std::size_t item = rng.below(config.num_items);
            user.targets[t] = static_cast<std::uint32_t>(item);
            double affinity = 0.0;
            for (std::size_t c = 0; c < r; ++c)
                affinity += ds.user_latents(u, c) * ds.item_latents(item, c);
            double p;
            if (temp > 0.0) {
                p = sigmoid(config.affinity_scale * affinity / temp);
            } else {
                p = affinity > 0.0 ? 1.0 : 0.0;  // temperature -> 0 limit
            }
            user.labels[t] = rng.uniform() < p ? 1 : 0;
        }
    }
    return ds;
}

/// User-disjoint split; the first ceil(fraction·U) of a seeded shuffle train.
/// Returns (train_user_indices, eval_user_indices).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
split(const SynthDataset& ds, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw usage_error("split: train_fraction must be in (0, 1)");
    const std::size_t total = ds.users.size();
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(seed, "split"));
    for (std::size_t i = total; i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);

    const std::size_t train_count =
        static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(total)));
    if (train_count == 0 || train_count >= total)
        throw usage_error("split: fraction " + format_double(train_fraction) +
                          " leaves one side empty for " + std::to_string(total) + " users");
    std::vector<std::size_t> train(order.begin(), order.begin() + train_count);
    std::vector<std::size_t> eval(order.begin() + train_count, order.end());
    std::sort(train.begin(), train.end());
    std::sort(eval.begin(), eval.end());
    return {train, eval};
}

/// Binary persistence: manifest text, then tensors and per-user records in the
/// length-prefixed little-endian layout shared with the checkpoint format.
inline std::vector<std::uint8_t> serialize_dataset(const SynthDataset& ds) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'C', 'K', 'D', '1'});
    const std::string manifest = ds.config.manifest();
    le::put_u32(out, static_cast<std::uint32_t>(manifest.size()));
    out.insert(out.end(), manifest.begin(), manifest.end());
    put_tensor(out, ds.item_embeddings);
    put_tensor(out, ds.item_latents);
    put_tensor(out, ds.user_latents);
    le::put_u32(out, static_cast<std::uint32_t>(ds.users.size()));
    for (const SynthUser& u : ds.users) {
        le::put_u32(out, static_cast<std::uint32_t>(u.id.size()));
        out.insert(out.end(), u.id.begin(), u.id.end());
        le::put_u32(out, static_cast<std::uint32_t>(u.group));
        le::put_u32(out, static_cast<std::uint32_t>(u.history.size()));
        for (std::uint32_t item : u.history) le::put_u32(out, item);
        le::put_u32(out, static_cast<std::uint32_t>(u.targets.size()));
        for (std::size_t t = 0; t < u.targets.size(); ++t) {
            le::put_u32(out, u.targets[t]);
            out.push_back(u.labels[t]);
        }
    }
    return out;
}

SynthConfig parse_synth_manifest(const std::string& text);

inline SynthDataset deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
    le::Reader r(bytes);
    r.expect_magic("CKD1");
    const std::string manifest = r.bytes(r.u32());
    SynthDataset ds;
    ds.config = parse_synth_manifest(manifest);
    ds.item_embeddings = read_tensor(r, ds.config.num_items, ds.config.embed_dim);
    ds.item_latents = read_tensor(r, ds.config.num_items, ds.config.latent_rank);
    ds.user_latents = read_tensor(r, ds.config.num_users, ds.config.latent_rank);
    const std::uint32_t count = r.u32();
    ds.users.resize(count);
    for (SynthUser& u : ds.users) {
        u.id = r.bytes(r.u32());
        u.group = static_cast<int>(r.u32());
        u.history.resize(r.u32());
        for (std::uint32_t& item : u.history) item = r.u32();
        const std::uint32_t targets = r.u32();
        u.targets.resize(targets);
        u.labels.resize(targets);
        for (std::uint32_t t = 0; t < targets; ++t) {
            u.targets[t] = r.u32();
            u.labels[t] = r.u8();
        }
    }
    return ds;
}

inline SynthConfig parse_synth_manifest(const std::string& text) {
    SynthConfig cfg;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "num_users") cfg.num_users = std::stoull(value);
        else if (key == "num_items") cfg.num_items = std::stoull(value);
        else if (key == "num_groups") cfg.num_groups = std::stoull(value);
        else if (key == "item_clusters") cfg.item_clusters = std::stoull(value);
        else if (key == "item_cluster_spread") cfg.item_cluster_spread = std::stod(value);
        else if (key == "embed_dim") cfg.embed_dim = std::stoull(value);
        else if (key == "latent_rank") cfg.latent_rank = std::stoull(value);
        else if (key == "min_seq_len") cfg.min_seq_len = std::stoull(value);
        else if (key == "max_seq_len") cfg.max_seq_len = std::stoull(value);
        else if (key == "targets_per_user") cfg.targets_per_user = std::stoull(value);
        else if (key == "noise_scale") cfg.noise_scale = std::stod(value);
        else if (key == "embed_noise") cfg.embed_noise = std::stod(value);
        else if (key == "popularity_weight") cfg.popularity_weight = std::stod(value);
        else if (key == "concentration") cfg.concentration = std::stod(value);
        else if (key == "affinity_scale") cfg.affinity_scale = std::stod(value);
        else if (key == "label_temperature") cfg.label_temperature = std::stod(value);
        else if (key == "tail_weakness") cfg.tail_weakness = std::stod(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else throw io_error("dataset manifest: unknown key '" + key + "'");
    }
    return cfg;
}

/// Checksum over the serialized dataset; sweep and ablation arms assert they
/// share it so axis effects are not confounded with data resampling.
inline std::string dataset_checksum(const SynthDataset& ds) {
    const auto bytes = serialize_dataset(ds);
    return hex64(fnv1a(std::string(bytes.begin(), bytes.end())));
}

}  // namespace ckv
