#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "collectivekv/checkpoint.hpp"
#include "collectivekv/rng.hpp"
#include "collectivekv/synthdata.hpp"
#include "collectivekv/trainer.hpp"

using namespace ckv;

namespace {

ModelConfig demo_config() {
    ModelConfig cfg;
    cfg.collective.embed_dim = 10;
    cfg.collective.user_dim = 3;
    cfg.collective.global_dim = 7;
    cfg.collective.pool_size = 12;
    cfg.attn_mode = AttnMode::kSelf;
    return cfg;
}

}  // namespace

TEST_CASE("checkpoint round-trips config and every tensor bit-exactly") {
    ModelConfig cfg = demo_config();
    cfg.collective.tie_routers = true;
    Rng rng(201);
    const ModelParams params = init_model_params(cfg, rng);
    const auto bytes = serialize_checkpoint(cfg, params);

    const Checkpoint back = deserialize_checkpoint(bytes);
    CHECK(back.config.collective.embed_dim == 10);
    CHECK(back.config.collective.user_dim == 3);
    CHECK(back.config.collective.global_dim == 7);
    CHECK(back.config.collective.pool_size == 12);
    CHECK(back.config.collective.tie_routers);
    CHECK(back.config.attn_mode == AttnMode::kSelf);

    std::vector<const Matrix*> original, loaded;
    for_each_model_tensor(cfg, params, [&](const char*, const Matrix& m) {
        original.push_back(&m);
    });
    for_each_model_tensor(back.config, back.params, [&](const char*, const Matrix& m) {
        loaded.push_back(&m);
    });
    REQUIRE(original.size() == loaded.size());
    for (std::size_t i = 0; i < original.size(); ++i) CHECK(*original[i] == *loaded[i]);

    // Serialization of the loaded params is byte-identical.
    CHECK(serialize_checkpoint(back.config, back.params) == bytes);
}

TEST_CASE("partial-sharing checkpoints carry the right tensors") {
    ModelConfig cfg = demo_config();
    cfg.collective.share_keys = false;
    Rng rng(202);
    const ModelParams params = init_model_params(cfg, rng);
    const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(cfg, params));
    CHECK_FALSE(back.config.collective.share_keys);
    CHECK(back.config.collective.share_values);
    CHECK(back.params.collective.full.key_weight == params.collective.full.key_weight);
    CHECK(back.params.collective.pool.values == params.collective.pool.values);
}

TEST_CASE("corrupted checkpoints are rejected") {
    ModelConfig cfg = demo_config();
    Rng rng(203);
    const ModelParams params = init_model_params(cfg, rng);
    auto bytes = serialize_checkpoint(cfg, params);
    bytes[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bytes), io_error);

    auto truncated = serialize_checkpoint(cfg, params);
    truncated.resize(truncated.size() / 2);
    CHECK_THROWS_AS(deserialize_checkpoint(truncated), io_error);

    auto trailing = serialize_checkpoint(cfg, params);
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize_checkpoint(trailing), io_error);
}

TEST_CASE("identical training runs give byte-identical checkpoints") {
    SynthConfig synth;
    synth.num_users = 24;
    synth.num_items = 120;
    synth.num_groups = 3;
    synth.embed_dim = 10;
    synth.latent_rank = 4;
    synth.min_seq_len = 8;
    synth.max_seq_len = 16;
    synth.seed = 5;
    const SynthDataset ds = generate(synth);
    const auto [train_users, eval_users] = split(ds, 0.75, 5);

    ModelConfig cfg;
    cfg.collective.embed_dim = 10;
    cfg.collective.user_dim = 2;
    cfg.collective.global_dim = 6;
    cfg.collective.pool_size = 8;

    TrainSettings settings;
    settings.epochs = 2;
    settings.batch_size = 16;
    settings.learning_rate = 0.01;
    settings.seed = 77;

    Trainer a(cfg, settings), b(cfg, settings);
    a.fit(ds, train_users);
    b.fit(ds, train_users);
    CHECK(serialize_checkpoint(cfg, a.params()) == serialize_checkpoint(cfg, b.params()));

    TrainSettings other = settings;
    other.seed = 78;
    Trainer c(cfg, other);
    c.fit(ds, train_users);
    CHECK(serialize_checkpoint(cfg, c.params()) != serialize_checkpoint(cfg, a.params()));
}

TEST_CASE("checkpoint file save/load") {
    const auto dir = std::filesystem::temp_directory_path() /
                     ("ckv_ckpt_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(dir);
    ModelConfig cfg = demo_config();
    Rng rng(204);
    const ModelParams params = init_model_params(cfg, rng);
    const auto path = dir / "model.ckv";
    save_checkpoint(path, cfg, params);
    const Checkpoint back = load_checkpoint(path);
    CHECK(serialize_checkpoint(back.config, back.params) == serialize_checkpoint(cfg, params));
    std::filesystem::remove_all(dir);
}
