// ckv: train, ablate, sweep, analyze, bench, prefill, decode — every workflow
// of the collective KV-sharing stack as one batch-friendly executable.
//
// Exit codes: 0 success, 2 usage/config error, 3 numeric failure, 4 I/O
// failure. All outputs land under <out>/<run_id>/ and every CSV starts with a
// comment line carrying the effective-config hash.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "collectivekv/analysis.hpp"
#include "collectivekv/cache.hpp"
#include "collectivekv/checkpoint.hpp"
#include "collectivekv/decode.hpp"
#include "collectivekv/latency.hpp"
#include "collectivekv/synthdata.hpp"
#include "collectivekv/trainer.hpp"

namespace fs = std::filesystem;
using namespace ckv;

namespace {

struct Options {
    // Data generation.
    SynthConfig synth;
    std::string dataset_path;  // load if present, else generate (and save here)
    double train_fraction = 0.8;

    // Model.
    std::string mode = "collective";  // collective | baseline
    std::string attn = "target";      // target | self
    std::size_t user_dim = 4;
    std::size_t global_dim = 28;
    std::size_t pool_size = 64;
    double peak_weight = 0.01;
    double balance_weight = 1.0;
    bool share_keys = true;
    bool share_values = true;
    bool tie_routers = false;

    // Trainer.
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 0.01;
    std::uint64_t seed = 1;

    // Cache widths.
    unsigned elem_width = 4;
    unsigned idx_width = 2;

    // Output.
    std::string out_root;
    std::string run_id;
    std::string config_file;

    // Subcommand-specific.
    std::string checkpoint_path;
    std::string cache_dir;
    std::string sweep_axis = "d_u";
    std::string sweep_values = "2,4,8,16,32";
    std::string study = "similarity";
    std::size_t bin_size = 50;
    std::size_t svd_k = 10;
    std::size_t anchor_count = 8;
    std::string longtail_rates = "0.1,0.25,0.5,0.75,1.0";
    std::string batch_sizes = "1,8,32,64,128,256,512";
    std::size_t bench_reps = 20;
    std::size_t overlap_pairs = 20;
    std::string decode_user;
    std::size_t decode_target = 0;
    std::size_t prefill_count = 0;  // 0 = all users
    std::string analyze_target = "keys";
};

// One place that knows every long option: CLI11 binds the command line, and
// the same table applies `key = value` lines from --config (command line
// wins, config file beats defaults).
class OptionTable {
  public:
    explicit OptionTable(CLI::App* cmd) : cmd_(cmd) {}

    template <typename T>
    void add(const std::string& name, T& var, const std::string& desc) {
        CLI::Option* opt = cmd_->add_option("--" + name, var, desc);
        appliers_[name] = {opt, [&var](const std::string& text) { var = parse<T>(text); }};
    }

    void add_flag(const std::string& name, bool& var, const std::string& desc) {
        CLI::Option* opt = cmd_->add_flag("--" + name + ",!--no-" + name, var, desc);
        appliers_[name] = {opt, [&var](const std::string& text) { var = parse<bool>(text); }};
    }

    void apply_config_file(const std::string& path) const {
        std::ifstream in(path);
        if (!in) throw io_error("cannot read config file: " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                if (line.find_first_not_of(" \t\r") != std::string::npos)
                    throw usage_error("config file line " + std::to_string(lineno) +
                                      ": expected key = value");
                continue;
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            const auto it = appliers_.find(key);
            if (it == appliers_.end())
                throw usage_error("config file: unknown key '" + key + "'");
            if (it->second.option->count() == 0) it->second.apply(value);
        }
    }

  private:
    template <typename T>
    static T parse(const std::string& text) {
        if constexpr (std::is_same_v<T, std::string>) {
            return text;
        } else if constexpr (std::is_same_v<T, bool>) {
            if (text == "true" || text == "1" || text == "yes") return true;
            if (text == "false" || text == "0" || text == "no") return false;
            throw usage_error("config file: bad boolean '" + text + "'");
        } else if constexpr (std::is_floating_point_v<T>) {
            return static_cast<T>(std::stod(text));
        } else {
            return static_cast<T>(std::stoull(text));
        }
    }

    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    struct Entry {
        CLI::Option* option;
        std::function<void(const std::string&)> apply;
    };
    CLI::App* cmd_;
    std::map<std::string, Entry> appliers_;
};

void add_data_options(OptionTable& t, Options& o) {
    t.add("users", o.synth.num_users, "number of synthetic users");
    t.add("items", o.synth.num_items, "catalog size");
    t.add("groups", o.synth.num_groups, "number of preference groups");
    t.add("item-clusters", o.synth.item_clusters, "topic centers in the catalog");
    t.add("item-cluster-spread", o.synth.item_cluster_spread, "within-topic latent noise");
    t.add("embed-dim", o.synth.embed_dim, "item embedding dimension d_e");
    t.add("latent-rank", o.synth.latent_rank, "planted latent rank");
    t.add("min-len", o.synth.min_seq_len, "minimum history length");
    t.add("max-len", o.synth.max_seq_len, "maximum history length");
    t.add("targets-per-user", o.synth.targets_per_user, "labelled candidates per user");
    t.add("noise-scale", o.synth.noise_scale, "user deviation from group center");
    t.add("embed-noise", o.synth.embed_noise, "off-subspace embedding noise");
    t.add("popularity-weight", o.synth.popularity_weight, "shared direction weight");
    t.add("concentration", o.synth.concentration, "history sampling sharpness");
    t.add("affinity-scale", o.synth.affinity_scale, "label logit scale");
    t.add("temperature", o.synth.label_temperature, "label temperature");
    t.add("tail-weakness", o.synth.tail_weakness, "extra label noise for short histories");
    t.add("data-seed", o.synth.seed, "dataset seed");
    t.add("dataset", o.dataset_path, "dataset file: load if present, else generate and save");
    t.add("train-fraction", o.train_fraction, "user fraction for the train split");
}

void add_model_options(OptionTable& t, Options& o) {
    t.add("mode", o.mode, "baseline (full KV) or collective (shared pool)");
    t.add("attn", o.attn, "host model: target or self attention");
    t.add("d-u", o.user_dim, "user-specific KV dimension d_u");
    t.add("d-g", o.global_dim, "global pool row dimension d_g");
    t.add("pool-size", o.pool_size, "global pool rows m");
    t.add("peak-weight", o.peak_weight, "peak loss weight");
    t.add("balance-weight", o.balance_weight, "balance loss weight");
    t.add_flag("share-keys", o.share_keys, "route keys through the pool");
    t.add_flag("share-values", o.share_values, "route values through the pool");
    t.add_flag("tie-routers", o.tie_routers, "one router head for both sides");
}

void add_trainer_options(OptionTable& t, Options& o) {
    t.add("epochs", o.epochs, "training epochs");
    t.add("batch-size", o.batch_size, "examples per optimizer step");
    t.add("lr", o.learning_rate, "Adam learning rate");
    t.add("seed", o.seed, "trainer seed");
}

void add_cache_options(OptionTable& t, Options& o) {
    t.add("elem-width", o.elem_width, "cached value width in bytes (4 or 8)");
    t.add("idx-width", o.idx_width, "cached index width in bytes (2)");
}

void add_output_options(OptionTable& t, Options& o) {
    t.add("out", o.out_root, "output root (default: $CKV_OUT or ./runs)");
    t.add("run-id", o.run_id, "run directory name (default derived from config)");
    t.add("config", o.config_file, "flat key = value config file");
}

ModelConfig model_config(const Options& o) {
    ModelConfig cfg;
    cfg.collective.embed_dim = o.synth.embed_dim;
    cfg.collective.user_dim = o.user_dim;
    cfg.collective.global_dim = o.global_dim;
    cfg.collective.pool_size = o.pool_size;
    cfg.collective.peak_weight = o.peak_weight;
    cfg.collective.balance_weight = o.balance_weight;
    cfg.collective.share_keys = o.share_keys;
    cfg.collective.share_values = o.share_values;
    cfg.collective.tie_routers = o.tie_routers;
    if (o.mode == "baseline") {
        cfg.collective.share_keys = false;
        cfg.collective.share_values = false;
        cfg.collective.tie_routers = false;
        // The attention width stays d_u + d_g, so arms are comparable.
    } else if (o.mode != "collective") {
        throw usage_error("--mode must be baseline or collective, got '" + o.mode + "'");
    }
    if (o.attn == "target") cfg.attn_mode = AttnMode::kTarget;
    else if (o.attn == "self") cfg.attn_mode = AttnMode::kSelf;
    else throw usage_error("--attn must be target or self, got '" + o.attn + "'");
    cfg.validate();
    return cfg;
}

CacheWidths cache_widths(const Options& o) {
    return {static_cast<std::uint8_t>(o.elem_width), static_cast<std::uint8_t>(o.idx_width)};
}

TrainSettings train_settings(const Options& o) {
    if (o.epochs < 1) throw usage_error("--epochs must be >= 1");
    if (o.batch_size < 1) throw usage_error("--batch-size must be >= 1");
    if (o.learning_rate <= 0.0) throw usage_error("--lr must be > 0");
    return {o.epochs, o.batch_size, o.learning_rate, o.seed};
}

std::string effective_config_text(const Options& o, const std::string& command) {
    std::string s = "command=" + command + "\n" + o.synth.manifest();
    auto kv = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
    kv("mode", o.mode);
    kv("attn", o.attn);
    kv("d_u", std::to_string(o.user_dim));
    kv("d_g", std::to_string(o.global_dim));
    kv("pool_size", std::to_string(o.pool_size));
    kv("peak_weight", format_double(o.peak_weight));
    kv("balance_weight", format_double(o.balance_weight));
    kv("share_keys", o.share_keys ? "true" : "false");
    kv("share_values", o.share_values ? "true" : "false");
    kv("tie_routers", o.tie_routers ? "true" : "false");
    kv("epochs", std::to_string(o.epochs));
    kv("batch_size", std::to_string(o.batch_size));
    kv("lr", format_double(o.learning_rate));
    kv("seed", std::to_string(o.seed));
    kv("elem_width", std::to_string(o.elem_width));
    kv("idx_width", std::to_string(o.idx_width));
    kv("train_fraction", format_double(o.train_fraction));
    return s;
}

struct RunContext {
    fs::path dir;
    std::string run_id;
    std::string config_hash;
};

RunContext prepare_run(Options& o, const std::string& command) {
    if (o.out_root.empty()) {
        const char* env = std::getenv("CKV_OUT");
        o.out_root = env && *env ? env : "runs";
    }
    const std::string config_text = effective_config_text(o, command);
    const std::string hash = hex64(fnv1a(config_text)).substr(0, 12);
    if (o.run_id.empty()) o.run_id = command + "-s" + std::to_string(o.seed) + "-" + hash;
    RunContext ctx;
    ctx.run_id = o.run_id;
    ctx.config_hash = hash;
    ctx.dir = fs::path(o.out_root) / o.run_id;
    fs::create_directories(ctx.dir);
    write_text_file(ctx.dir / "config.txt", config_text);
    return ctx;
}

void write_csv(const fs::path& path, const std::string& config_hash, const std::string& header,
               const std::vector<std::string>& rows) {
    std::string text = "# config_hash=" + config_hash + "\n" + header + "\n";
    for (const auto& r : rows) text += r + "\n";
    write_text_file(path, text);
}

SynthDataset obtain_dataset(const Options& o) {
    if (!o.dataset_path.empty() && fs::exists(o.dataset_path))
        return deserialize_dataset(read_file(o.dataset_path));
    SynthDataset ds = generate(o.synth);
    if (!o.dataset_path.empty()) write_file_atomic(o.dataset_path, serialize_dataset(ds));
    return ds;
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw usage_error(std::string(what) + ": bad number '" + item + "'");
        }
    }
    if (out.empty()) throw usage_error(std::string(what) + ": empty list");
    return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const char* what) {
    std::vector<std::size_t> out;
    for (double v : parse_double_list(text, what)) {
        if (v < 0.0 || v != std::floor(v))
            throw usage_error(std::string(what) + ": expected nonnegative integers");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

double median_of(std::vector<double> values) {
    if (values.empty()) throw metric_error("median of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// ---------------------------------------------------------------------------
// train

MetricsReport run_training(const Options& o, const ModelConfig& cfg, const SynthDataset& ds,
                           const RunContext& ctx, std::vector<std::string>* epoch_rows) {
    const auto [train_users, eval_users] = split(ds, o.train_fraction, o.synth.seed);
    Trainer trainer(cfg, train_settings(o));
    const auto logs = trainer.fit(ds, train_users);
    if (epoch_rows) {
        for (const auto& log : logs)
            epoch_rows->push_back(std::to_string(log.epoch) + "," + format_double(log.bce) +
                                  "," + format_double(log.peak) + "," +
                                  format_double(log.balance) + "," + format_double(log.total) +
                                  "," + format_double(log.mean_gate));
    }
    MetricsReport report = evaluate(cfg, trainer.params(), ds, eval_users, ctx.run_id);
    report.compression_rate =
        cfg.collective.any_shared() ? compression_rate_for(cfg.collective, cache_widths(o)) : 1.0;
    save_checkpoint(ctx.dir / "checkpoint.ckv", cfg, trainer.params());
    return report;
}

int cmd_train(Options& o) {
    const ModelConfig cfg = model_config(o);
    RunContext ctx = prepare_run(o, "train");
    const SynthDataset ds = obtain_dataset(o);
    write_text_file(ctx.dir / "dataset_manifest.txt",
                    ds.config.manifest() + "checksum=" + dataset_checksum(ds) + "\n");

    std::vector<std::string> epoch_rows;
    const MetricsReport report = run_training(o, cfg, ds, ctx, &epoch_rows);
    write_csv(ctx.dir / "train_log.csv", ctx.config_hash,
              "epoch,bce,peak,balance,total,mean_gate", epoch_rows);
    write_csv(ctx.dir / "metrics.csv", ctx.config_hash, MetricsReport::csv_header(),
              {report.csv_row()});

    std::cout << "run " << ctx.run_id << ": auc=" << report.auc << " gauc=" << report.gauc
              << " logloss=" << report.logloss << " cr=" << report.compression_rate << "\n"
              << "artifacts in " << ctx.dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablate

int cmd_ablate(Options& o) {
    RunContext ctx = prepare_run(o, "ablate");
    const SynthDataset ds = obtain_dataset(o);
    const std::string checksum = dataset_checksum(ds);

    struct Arm {
        std::string name;
        bool share_keys, share_values;
        double peak, balance;
    };
    // Loss grid over the fully shared arm, then the sharing grid with default
    // losses. The last row duplicates +all by construction, mirroring how the
    // two ablation tables quote the same full-method run.
    const double pw = o.peak_weight, bw = o.balance_weight;
    const std::vector<Arm> arms = {
        {"baseline", false, false, 0.0, 0.0},
        {"collectivekv", true, true, 0.0, 0.0},
        {"collectivekv+peak", true, true, pw, 0.0},
        {"collectivekv+balance", true, true, 0.0, bw},
        {"collectivekv+all", true, true, pw, bw},
        {"collectivek", true, false, pw, bw},
        {"collectivev", false, true, pw, bw},
        {"collectivekv-share", true, true, pw, bw},
    };

    std::vector<std::string> rows;
    for (const Arm& arm : arms) {
        Options arm_opts = o;
        arm_opts.mode = (arm.share_keys || arm.share_values) ? "collective" : "baseline";
        arm_opts.share_keys = arm.share_keys;
        arm_opts.share_values = arm.share_values;
        arm_opts.peak_weight = arm.peak;
        arm_opts.balance_weight = arm.balance;
        const ModelConfig cfg = model_config(arm_opts);
        const MetricsReport report = run_training(arm_opts, cfg, ds, ctx, nullptr);
        rows.push_back(arm.name + "," + format_double(report.auc) + "," +
                       format_double(report.gauc) + "," + format_double(report.logloss) + "," +
                       format_double(report.compression_rate) + "," + checksum);
        std::cout << "arm " << arm.name << ": auc=" << report.auc << " gauc=" << report.gauc
                  << " logloss=" << report.logloss << "\n";
    }
    write_csv(ctx.dir / "ablate.csv", ctx.config_hash,
              "arm,auc,gauc,logloss,compression_rate,dataset_checksum", rows);
    std::cout << "artifacts in " << ctx.dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sweep

int cmd_sweep(Options& o) {
    RunContext ctx = prepare_run(o, "sweep");
    const SynthDataset ds = obtain_dataset(o);
    const std::string checksum = dataset_checksum(ds);
    const std::vector<std::size_t> values = parse_size_list(o.sweep_values, "--values");
    if (values.size() < 2) throw usage_error("--values needs at least 2 entries");

    const std::size_t attn_dim = o.user_dim + o.global_dim;
    std::vector<std::string> rows;
    for (std::size_t value : values) {
        Options arm_opts = o;
        std::string label;
        if (o.sweep_axis == "d_u") {
            if (value > attn_dim)
                throw usage_error("--values: d_u " + std::to_string(value) +
                                  " exceeds attention dim " + std::to_string(attn_dim));
            arm_opts.user_dim = value;
            arm_opts.global_dim = attn_dim - value;
            label = "d_u=" + std::to_string(value);
        } else if (o.sweep_axis == "pool_size") {
            if (value < 1) throw usage_error("--values: pool_size must be >= 1");
            arm_opts.pool_size = value;
            label = "m=" + std::to_string(value);
        } else {
            throw usage_error("--axis must be d_u or pool_size, got '" + o.sweep_axis + "'");
        }
        const ModelConfig cfg = model_config(arm_opts);
        const MetricsReport report = run_training(arm_opts, cfg, ds, ctx, nullptr);
        rows.push_back(std::to_string(value) + "," + std::to_string(arm_opts.user_dim) + "," +
                       std::to_string(arm_opts.global_dim) + "," +
                       std::to_string(arm_opts.pool_size) + "," + format_double(report.auc) +
                       "," + format_double(report.gauc) + "," + format_double(report.logloss) +
                       "," + format_double(report.compression_rate) + "," + checksum);
        std::cout << "sweep " << label << ": auc=" << report.auc
                  << " cr=" << report.compression_rate << "\n";
    }
    write_csv(ctx.dir / "sweep.csv", ctx.config_hash,
              "value,d_u,d_g,m,auc,gauc,logloss,compression_rate,dataset_checksum", rows);
    std::cout << "artifacts in " << ctx.dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// analyze

std::vector<Matrix> user_matrices(const SynthDataset& ds, const Checkpoint* ck,
                                  const std::string& target) {
    std::vector<Matrix> out;
    out.reserve(ds.users.size());
    for (std::size_t u = 0; u < ds.users.size(); ++u) {
        Matrix s = ds.history_embeddings(u);
        if (!ck) {
            out.push_back(std::move(s));
            continue;
        }
        const CollectiveOutput fwd = collective_forward(s, ck->config.collective,
                                                        ck->params.collective, Mode::kInference);
        out.push_back(target == "values" ? fwd.values : fwd.keys);
    }
    return out;
}

void curve_csv_rows(const KdeCurve& curve, std::vector<std::string>& rows) {
    for (std::size_t i = 0; i < curve.grid.size(); ++i)
        rows.push_back(format_double(curve.grid[i]) + "," + format_double(curve.density[i]));
}

std::optional<Checkpoint> maybe_checkpoint(const Options& o, bool required) {
    if (o.checkpoint_path.empty()) {
        if (required)
            throw usage_error("this command requires --checkpoint (router outputs come from a "
                              "trained or saved model)");
        return std::nullopt;
    }
    return load_checkpoint(o.checkpoint_path);
}

int analyze_similarity(Options& o, const RunContext& ctx, const SynthDataset& ds) {
    const auto ck = maybe_checkpoint(o, false);
    const auto users = user_matrices(ds, ck ? &*ck : nullptr, o.analyze_target);

    // Pool samples over several seed-chosen anchors.
    Rng rng(Rng::derive(o.seed, "similarity-anchor"));
    std::vector<SimilaritySample> samples;
    std::size_t skipped = 0;
    for (std::size_t a = 0; a < std::min<std::size_t>(o.anchor_count, users.size()); ++a) {
        const std::size_t anchor = rng.below(users.size());
        const SimilarityStudy study = cross_user_similarity(users, anchor);
        samples.insert(samples.end(), study.samples.begin(), study.samples.end());
        skipped += study.skipped;
    }
    std::vector<std::string> sample_rows;
    std::vector<double> values;
    for (const auto& s : samples) {
        sample_rows.push_back(std::to_string(s.user_a) + "," + std::to_string(s.user_b) + "," +
                              format_double(s.value));
        values.push_back(s.value);
    }
    write_csv(ctx.dir / "similarity_samples.csv", ctx.config_hash, "anchor,user,cosine",
              sample_rows);

    std::vector<std::string> curve_rows;
    curve_csv_rows(detail::try_kde_curve(values), curve_rows);
    write_csv(ctx.dir / "similarity_density.csv", ctx.config_hash, "grid,density", curve_rows);

    std::size_t positive = 0;
    for (double v : values) positive += v > 0.0 ? 1u : 0u;
    const double frac_positive =
        values.empty() ? 0.0 : static_cast<double>(positive) / static_cast<double>(values.size());
    const std::string summary = "samples=" + std::to_string(values.size()) +
                                " skipped=" + std::to_string(skipped) +
                                " median=" + format_double(median_of(values)) +
                                " frac_positive=" + format_double(frac_positive) + "\n";
    write_text_file(ctx.dir / "similarity_summary.txt", summary);
    std::cout << "similarity: " << summary;
    return 0;
}

int analyze_svd_split(Options& o, const RunContext& ctx, const SynthDataset& ds) {
    const auto ck = maybe_checkpoint(o, false);
    const auto users = user_matrices(ds, ck ? &*ck : nullptr, o.analyze_target);
    const SplitSimilarityStudy study = split_similarity_study(users, o.svd_k);

    std::vector<std::string> rows;
    for (std::size_t i = 0; i < study.principal.size(); ++i)
        rows.push_back(std::to_string(study.principal[i].user_a) + "," +
                       std::to_string(study.principal[i].user_b) + "," +
                       format_double(study.principal[i].value) + "," +
                       format_double(study.residual[i].value));
    write_csv(ctx.dir / "svd_split_samples.csv", ctx.config_hash,
              "user_a,user_b,principal_cosine,residual_cosine", rows);

    std::vector<std::string> pc, rc;
    curve_csv_rows(study.principal_curve, pc);
    curve_csv_rows(study.residual_curve, rc);
    write_csv(ctx.dir / "svd_split_principal_density.csv", ctx.config_hash, "grid,density", pc);
    write_csv(ctx.dir / "svd_split_residual_density.csv", ctx.config_hash, "grid,density", rc);

    const std::string summary =
        "pairs=" + std::to_string(study.principal.size()) +
        " mean_retained=" + format_double(study.mean_retained) +
        " principal_std=" + format_double(study.principal_std) +
        " residual_std=" + format_double(study.residual_std) +
        " principal_frac_gt_0.5=" + format_double(study.principal_frac_above_half) +
        " residual_frac_gt_0.5=" + format_double(study.residual_frac_above_half) + "\n";
    write_text_file(ctx.dir / "svd_split_summary.txt", summary);
    std::cout << "svd-split: " << summary;
    return 0;
}

int analyze_router_viz(Options& o, const RunContext& ctx, const SynthDataset& ds) {
    const auto ck = maybe_checkpoint(o, true);
    if (!ck->config.collective.any_shared())
        throw usage_error("router-viz: checkpoint has no routed side");
    std::vector<std::vector<std::uint16_t>> key_sets, value_sets;
    for (std::size_t u = 0; u < ds.users.size(); ++u) {
        const Matrix s = ds.history_embeddings(u);
        if (ck->config.collective.share_keys) {
            const RoutingMap map = route(s, ck->params.collective.router.key);
            key_sets.emplace_back(map.indices.begin(), map.indices.end());
        }
        if (ck->config.collective.share_values) {
            const RouterHead& head = ck->config.collective.tie_routers
                                         ? ck->params.collective.router.key
                                         : ck->params.collective.router.value;
            const RoutingMap map = route(s, head);
            value_sets.emplace_back(map.indices.begin(), map.indices.end());
        }
    }
    const std::size_t m = ck->config.collective.pool_size;
    std::vector<std::string> rows;
    auto emit = [&](const char* side, const std::vector<std::vector<std::uint16_t>>& sets) {
        if (sets.empty()) return;
        const ActivationHistogram h = activation_histogram(sets, m, o.bin_size);
        for (std::size_t b = 0; b < h.bins.size(); ++b)
            rows.push_back(std::string(side) + "," + std::to_string(b * o.bin_size) + "," +
                           std::to_string(std::min(m, (b + 1) * o.bin_size)) + "," +
                           std::to_string(h.bins[b]));
    };
    emit("keys", key_sets);
    emit("values", value_sets);
    write_csv(ctx.dir / "router_hist.csv", ctx.config_hash, "side,bin_start,bin_end,count", rows);
    std::cout << "router-viz: " << rows.size() << " bins written\n";
    return 0;
}

int analyze_overlap(Options& o, const RunContext& ctx, const SynthDataset& ds) {
    const auto ck = maybe_checkpoint(o, true);
    if (!ck->config.collective.share_keys)
        throw usage_error("overlap: checkpoint does not share keys");

    std::vector<std::vector<std::uint16_t>> indices(ds.users.size());
    std::vector<Matrix> means(ds.users.size());
    for (std::size_t u = 0; u < ds.users.size(); ++u) {
        const Matrix s = ds.history_embeddings(u);
        const RoutingMap map = route(s, ck->params.collective.router.key);
        indices[u].assign(map.indices.begin(), map.indices.end());
        means[u] = mean_kv(s);
    }

    Rng rng(Rng::derive(o.seed, "overlap-pairs"));
    std::vector<std::string> rows;
    std::vector<double> same_group, cross_group;
    std::size_t guard = 0;
    while ((same_group.size() < o.overlap_pairs || cross_group.size() < o.overlap_pairs) &&
           guard++ < 20000) {
        const std::size_t a = rng.below(ds.users.size());
        const std::size_t b = rng.below(ds.users.size());
        if (a == b) continue;
        double sim;
        if (!cosine(means[a], means[b], sim)) continue;
        const bool same = ds.users[a].group == ds.users[b].group;
        auto& bucket = same ? same_group : cross_group;
        if (bucket.size() >= o.overlap_pairs) continue;
        const double ratio = overlap_ratio(indices[a], indices[b]);
        bucket.push_back(ratio);
        rows.push_back(std::to_string(a) + "," + std::to_string(b) + "," +
                       (same ? "same" : "cross") + "," + format_double(sim) + "," +
                       format_double(ratio));
    }
    write_csv(ctx.dir / "overlap_pairs.csv", ctx.config_hash,
              "user_a,user_b,group_relation,embedding_cosine,overlap_ratio", rows);
    const std::string summary =
        "same_group_median=" + format_double(median_of(same_group)) +
        " cross_group_median=" + format_double(median_of(cross_group)) + "\n";
    write_text_file(ctx.dir / "overlap_summary.txt", summary);
    std::cout << "overlap: " << summary;
    return 0;
}

int analyze_longtail(Options& o, const RunContext& ctx, const SynthDataset& ds) {
    const auto ck = maybe_checkpoint(o, true);
    const std::vector<double> rates = parse_double_list(o.longtail_rates, "--rates");
    std::vector<std::string> rows;
    for (double rate : rates) {
        const MetricsReport report = longtail_slice(ds, rate, ck->config, ck->params, ctx.run_id);
        const std::size_t users = longtail_user_indices(ds, rate).size();
        rows.push_back(format_double(rate) + "," + std::to_string(users) + "," +
                       format_double(report.auc) + "," + format_double(report.gauc) + "," +
                       format_double(report.logloss));
        std::cout << "longtail rate=" << rate << ": auc=" << report.auc << "\n";
    }
    write_csv(ctx.dir / "longtail.csv", ctx.config_hash, "rate,users,auc,gauc,logloss", rows);
    return 0;
}

int cmd_analyze(Options& o) {
    RunContext ctx = prepare_run(o, "analyze-" + o.study);
    const SynthDataset ds = obtain_dataset(o);
    if (o.study == "similarity") return analyze_similarity(o, ctx, ds);
    if (o.study == "svd-split") return analyze_svd_split(o, ctx, ds);
    if (o.study == "router-viz") return analyze_router_viz(o, ctx, ds);
    if (o.study == "overlap") return analyze_overlap(o, ctx, ds);
    if (o.study == "longtail") return analyze_longtail(o, ctx, ds);
    throw usage_error("--study must be one of similarity|svd-split|router-viz|overlap|longtail");
}

// ---------------------------------------------------------------------------
// prefill / decode / bench

int cmd_prefill(Options& o) {
    const auto ck = maybe_checkpoint(o, true);
    RunContext ctx = prepare_run(o, "prefill");
    const SynthDataset ds = obtain_dataset(o);
    const fs::path dir = o.cache_dir.empty() ? ctx.dir / "cache" : fs::path(o.cache_dir);
    CacheStore store(dir);
    const std::size_t count =
        o.prefill_count == 0 ? ds.users.size() : std::min(o.prefill_count, ds.users.size());
    std::size_t bytes = 0;
    for (std::size_t u = 0; u < count; ++u) {
        const CacheEntry e = prefill(store, ds.users[u].id, ds.history_embeddings(u),
                                     ck->config.collective, ck->params.collective,
                                     cache_widths(o));
        bytes += e.payload_bytes();
    }
    std::cout << "prefilled " << count << " users, " << bytes << " payload bytes, in "
              << dir.string() << "\n";
    return 0;
}

int cmd_decode(Options& o) {
    const auto ck = maybe_checkpoint(o, true);
    if (o.cache_dir.empty()) throw usage_error("decode requires --cache-dir");
    if (o.decode_user.empty()) throw usage_error("decode requires --user");
    const SynthDataset ds = obtain_dataset(o);
    if (o.decode_target >= ds.config.num_items)
        throw usage_error("--target-item outside the catalog");

    const Matrix target = ds.item_embeddings.row(o.decode_target);
    Matrix query = target;
    if (ck->config.attn_mode == AttnMode::kSelf) {
        // Self-attention decode: the query is the latest history item.
        for (const SynthUser& u : ds.users)
            if (u.id == o.decode_user && !u.history.empty())
                query = ds.item_embeddings.row(u.history.back());
    }

    CacheStore store{fs::path(o.cache_dir)};
    const CacheEntry probe = store.get(o.decode_user);
    const double mean_full =
        static_cast<double>(probe.seq_len) * 2.0 *
        static_cast<double>(ck->config.collective.attn_dim()) * o.elem_width;
    const TierModel tier = fit_tier_to_reference(std::max(mean_full, 1.0));
    const DecodeResult res =
        decode(store, o.decode_user, query, target, ck->config, ck->params, tier);
    std::cout << "user " << o.decode_user << " item " << o.decode_target
              << ": prob=" << res.prob << " simulated_load_ms=" << res.simulated_load_ms
              << " measured_load_ms=" << res.measured_load_ms << "\n";
    return 0;
}

int cmd_bench(Options& o) {
    const auto ck = maybe_checkpoint(o, true);
    if (o.cache_dir.empty()) throw usage_error("bench requires --cache-dir (run prefill first)");
    RunContext ctx = prepare_run(o, "bench");
    CacheStore store{fs::path(o.cache_dir)};
    if (store.size() == 0) throw usage_error("bench: cache directory is empty; run prefill");

    std::vector<CacheEntry> entries;
    std::vector<std::size_t> baseline_bytes;
    double mean_full = 0.0;
    for (const std::string& id : store.user_ids()) {
        CacheEntry e = store.get(id);
        const std::size_t full = e.seq_len * 2 * ck->config.collective.attn_dim() * o.elem_width;
        baseline_bytes.push_back(full);
        mean_full += static_cast<double>(full);
        entries.push_back(std::move(e));
    }
    mean_full /= static_cast<double>(entries.size());

    const TierModel tier = fit_tier_to_reference(mean_full);
    const auto batches = parse_size_list(o.batch_sizes, "--batch-sizes");
    const auto rows = bench_latency(entries, baseline_bytes, ck->params.collective.pool,
                                    batches, tier, tier, o.bench_reps);

    std::vector<std::string> csv_rows;
    for (const BenchRow& r : rows) {
        csv_rows.push_back(std::to_string(r.batch_size) + "," + format_double(r.baseline_ms) +
                           "," + format_double(r.collective_load_ms) + "," +
                           format_double(r.collective_gather_ms) + "," +
                           format_double(r.collective_gather_std_ms) + "," +
                           format_double(r.ratio));
        std::cout << "batch " << r.batch_size << ": baseline=" << r.baseline_ms
                  << "ms collective=" << r.collective_load_ms + r.collective_gather_ms
                  << "ms ratio=" << r.ratio << "\n";
    }
    write_csv(ctx.dir / "bench.csv", ctx.config_hash,
              "batch_size,baseline_ms,collective_load_ms,collective_gather_ms,"
              "collective_gather_std_ms,ratio",
              csv_rows);
    write_text_file(ctx.dir / "tier.txt",
                    "setup_ms=" + format_double(tier.setup_ms) +
                        "\nbytes_per_ms=" + format_double(tier.bytes_per_ms) + "\n");
    std::cout << "artifacts in " << ctx.dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"collective KV sharing: training, analysis, caching, and latency workflows"};
    app.require_subcommand(1);

    Options opts;
    std::vector<std::pair<CLI::App*, std::unique_ptr<OptionTable>>> tables;
    auto make_cmd = [&](const std::string& name, const std::string& desc, bool data, bool model,
                        bool trainer, bool cache) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        auto table = std::make_unique<OptionTable>(cmd);
        add_output_options(*table, opts);
        if (data) add_data_options(*table, opts);
        if (model) add_model_options(*table, opts);
        if (trainer) add_trainer_options(*table, opts);
        if (cache) add_cache_options(*table, opts);
        OptionTable* raw = table.get();
        tables.emplace_back(cmd, std::move(table));
        return std::make_pair(cmd, raw);
    };

    auto [train_cmd, train_table] =
        make_cmd("train", "train one arm and evaluate it", true, true, true, true);

    auto [ablate_cmd, ablate_table] =
        make_cmd("ablate", "loss and K/V-sharing ablation grid (8 arms)", true, true, true, true);

    auto [sweep_cmd, sweep_table] =
        make_cmd("sweep", "sweep d_u or pool_size over a value list", true, true, true, true);
    sweep_table->add("axis", opts.sweep_axis, "d_u or pool_size");
    sweep_table->add("values", opts.sweep_values, "comma-separated axis values");

    auto [analyze_cmd, analyze_table] =
        make_cmd("analyze", "similarity | svd-split | router-viz | overlap | longtail studies",
                 true, true, true, false);
    analyze_table->add("study", opts.study, "study name");
    analyze_table->add("checkpoint", opts.checkpoint_path, "trained checkpoint (.ckv)");
    analyze_table->add("bin-size", opts.bin_size, "histogram bin size");
    analyze_table->add("svd-k", opts.svd_k, "principal components kept");
    analyze_table->add("anchors", opts.anchor_count, "similarity anchors to pool");
    analyze_table->add("rates", opts.longtail_rates, "comma-separated longtail rates");
    analyze_table->add("pairs", opts.overlap_pairs, "overlap pairs per bucket");
    analyze_table->add("target", opts.analyze_target, "analyze keys or values");

    auto [prefill_cmd, prefill_table] =
        make_cmd("prefill", "project users into the cache store", true, true, false, true);
    prefill_table->add("checkpoint", opts.checkpoint_path, "trained checkpoint (.ckv)");
    prefill_table->add("cache-dir", opts.cache_dir, "cache directory");
    prefill_table->add("count", opts.prefill_count, "users to prefill (0 = all)");

    auto [decode_cmd, decode_table] =
        make_cmd("decode", "serve one user from the cache", true, true, false, true);
    decode_table->add("checkpoint", opts.checkpoint_path, "trained checkpoint (.ckv)");
    decode_table->add("cache-dir", opts.cache_dir, "cache directory");
    decode_table->add("user", opts.decode_user, "user id, e.g. u00012");
    decode_table->add("target-item", opts.decode_target, "candidate item id");

    auto [bench_cmd, bench_table] = make_cmd(
        "bench", "latency comparison against the full-KV baseline", false, true, false, true);
    bench_table->add("checkpoint", opts.checkpoint_path, "trained checkpoint (.ckv)");
    bench_table->add("cache-dir", opts.cache_dir, "prefilled cache directory");
    bench_table->add("batch-sizes", opts.batch_sizes, "comma-separated batch sizes");
    bench_table->add("reps", opts.bench_reps, "repetitions per point");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        CLI::App* active = app.get_subcommands().front();
        if (!opts.config_file.empty()) {
            for (auto& [cmd, table] : tables)
                if (cmd == active) table->apply_config_file(opts.config_file);
        }

        if (active == train_cmd) return cmd_train(opts);
        if (active == ablate_cmd) return cmd_ablate(opts);
        if (active == sweep_cmd) return cmd_sweep(opts);
        if (active == analyze_cmd) return cmd_analyze(opts);
        if (active == prefill_cmd) return cmd_prefill(opts);
        if (active == decode_cmd) return cmd_decode(opts);
        if (active == bench_cmd) return cmd_bench(opts);
        throw usage_error("unknown subcommand");
    } catch (const usage_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
