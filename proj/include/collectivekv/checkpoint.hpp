#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "collectivekv/io.hpp"
#include "collectivekv/model.hpp"

namespace ckv {

/// Checkpoint layout "CKV1": little-endian u32 header (d_e, d_u, d_g, m,
/// flags), then every active tensor as a length-prefixed f64 block in the
/// fixed order of for_each_model_tensor. Identical training runs produce
/// byte-identical files. Flags: bit0 share_keys, bit1 share_values,
/// bit2 tie_routers, bit3 self-attention mode. Loss weights are training
/// hyperparameters, not parameters, and are not stored.
inline std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& cfg,
                                                      const ModelParams& params) {
    cfg.validate();
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'C', 'K', 'V', '1'});
    le::put_u32(out, static_cast<std::uint32_t>(cfg.collective.embed_dim));
    le::put_u32(out, static_cast<std::uint32_t>(cfg.collective.user_dim));
    le::put_u32(out, static_cast<std::uint32_t>(cfg.collective.global_dim));
    le::put_u32(out, static_cast<std::uint32_t>(cfg.collective.pool_size));
    std::uint32_t flags = 0;
    if (cfg.collective.share_keys) flags |= 1u;
    if (cfg.collective.share_values) flags |= 2u;
    if (cfg.collective.tie_routers) flags |= 4u;
    if (cfg.attn_mode == AttnMode::kSelf) flags |= 8u;
    le::put_u32(out, flags);
    for_each_model_tensor(cfg, params,
                          [&](const char*, const Matrix& m) { put_tensor(out, m); });
    return out;
}

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    le::Reader r(bytes);
    r.expect_magic("CKV1");
    Checkpoint ck;
    CollectiveConfig& col = ck.config.collective;
    col.embed_dim = r.u32();
    col.user_dim = r.u32();
    col.global_dim = r.u32();
    col.pool_size = r.u32();
    const std::uint32_t flags = r.u32();
    col.share_keys = flags & 1u;
    col.share_values = flags & 2u;
    col.tie_routers = flags & 4u;
    ck.config.attn_mode = (flags & 8u) ? AttnMode::kSelf : AttnMode::kTarget;
    ck.config.validate();

    // Allocate the active tensors at their configured shapes, then fill them
    // in checkpoint order.
    Rng dummy(0);
    ck.params = init_model_params(ck.config, dummy);
    for_each_model_tensor(ck.config, ck.params, [&](const char*, Matrix& m) {
        m = read_tensor(r, m.rows(), m.cols());
    });
    if (r.remaining() != 0) throw io_error("checkpoint has trailing bytes");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                            const ModelParams& params) {
    write_file_atomic(path, serialize_checkpoint(cfg, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path));
}

}  // namespace ckv
