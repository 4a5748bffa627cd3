#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "collectivekv/collective.hpp"
#include "collectivekv/errors.hpp"
#include "collectivekv/io.hpp"
#include "collectivekv/matrix.hpp"
#include "collectivekv/model.hpp"

namespace ckv {

/// Storage widths of a cache entry. Values are stored at `elem_width` bytes
/// (4 = f32, 8 = f64) and pool indices at `idx_width` (2 = u16, 0 = none;
/// zero means a full-width entry with no routed half).
struct CacheWidths {
    std::uint8_t elem_width = 4;
    std::uint8_t idx_width = 2;

    void validate(std::size_t pool_size, bool shared) const {
        if (elem_width != 4 && elem_width != 8)
            throw usage_error("cache widths: elem_width must be 4 or 8");
        if (shared) {
            if (idx_width != 2) throw usage_error("cache widths: shared entries need u16 indices");
            if (pool_size > 65536)
                throw usage_error("cache widths: pool_size " + std::to_string(pool_size) +
                                  " exceeds u16 index range");
        }
    }
};

/// The per-user cached artifact. For a sharing configuration it holds the
/// low-dimensional user-specific K/V plus the global pool indices; for the
/// baseline it holds the full-width K/V and no indices (idx_width = 0).
struct CacheEntry {
    std::string user_id;
    std::size_t seq_len = 0;
    std::size_t side_dim = 0;  // d_u when routed, d_a when full-width
    std::uint8_t elem_width = 4;
    std::uint8_t idx_width = 2;
    Matrix user_keys;    // n×side_dim
    Matrix user_values;  // n×side_dim
    std::vector<std::uint16_t> key_indices;    // n entries, empty when idx_width == 0
    std::vector<std::uint16_t> value_indices;  // n entries, empty when idx_width == 0

    bool routed() const { return idx_width != 0; }

    /// Cache-accounting size: n·(2·side_dim·elem + 2·idx). The on-disk file
    /// adds a fixed header on top of this.
    std::size_t payload_bytes() const {
        return seq_len * (2 * side_dim * elem_width + 2 * static_cast<std::size_t>(idx_width));
    }

    std::size_t header_bytes() const {
        return 4 + 4 + user_id.size() + 4 + 2 + 1 + 1;
    }
};

using BaselineEntry = CacheEntry;  // same layout with idx_width = 0, side_dim = d_a

namespace detail {

inline double round_to_width(double v, std::uint8_t elem_width) {
    return elem_width == 4 ? static_cast<double>(static_cast<float>(v)) : v;
}

inline void put_value_block(std::vector<std::uint8_t>& out, const Matrix& m,
                            std::uint8_t elem_width) {
    if (elem_width == 4)
        for (double v : m.values()) le::put_f32(out, static_cast<float>(v));
    else
        for (double v : m.values()) le::put_f64(out, v);
}

inline Matrix read_value_block(le::Reader& r, std::size_t rows, std::size_t cols,
                               std::uint8_t elem_width) {
    Matrix m(rows, cols);
    if (elem_width == 4)
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(r.f32());
    else
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
    return m;
}

}  // namespace detail

/// Entry file layout: "CKE1", u32 id length, id bytes, u32 n, u16 side dim,
/// u8 elem width, u8 idx width, then K, V, I_k, I_v as contiguous
/// little-endian blocks (the index blocks are empty when idx width is 0).
inline std::vector<std::uint8_t> serialize_entry(const CacheEntry& e) {
    std::vector<std::uint8_t> out;
    out.reserve(e.header_bytes() + e.payload_bytes());
    out.insert(out.end(), {'C', 'K', 'E', '1'});
    le::put_u32(out, static_cast<std::uint32_t>(e.user_id.size()));
    out.insert(out.end(), e.user_id.begin(), e.user_id.end());
    le::put_u32(out, static_cast<std::uint32_t>(e.seq_len));
    le::put_u16(out, static_cast<std::uint16_t>(e.side_dim));
    out.push_back(e.elem_width);
    out.push_back(e.idx_width);
    detail::put_value_block(out, e.user_keys, e.elem_width);
    detail::put_value_block(out, e.user_values, e.elem_width);
    for (std::uint16_t idx : e.key_indices) le::put_u16(out, idx);
    for (std::uint16_t idx : e.value_indices) le::put_u16(out, idx);
    return out;
}

inline CacheEntry deserialize_entry(const std::vector<std::uint8_t>& bytes) {
    le::Reader r(bytes);
    r.expect_magic("CKE1");
    CacheEntry e;
    e.user_id = r.bytes(r.u32());
    e.seq_len = r.u32();
    e.side_dim = r.u16();
    e.elem_width = r.u8();
    e.idx_width = r.u8();
    e.user_keys = detail::read_value_block(r, e.seq_len, e.side_dim, e.elem_width);
    e.user_values = detail::read_value_block(r, e.seq_len, e.side_dim, e.elem_width);
    if (e.idx_width != 0) {
        e.key_indices.resize(e.seq_len);
        e.value_indices.resize(e.seq_len);
        for (auto& idx : e.key_indices) idx = r.u16();
        for (auto& idx : e.value_indices) idx = r.u16();
    }
    if (r.remaining() != 0) throw io_error("cache entry has trailing bytes");
    return e;
}

/// One file per user plus a manifest, with write-to-temp-then-rename so
/// concurrent readers never see a partial entry.
class CacheStore {
  public:
    explicit CacheStore(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
        load_manifest();
    }

    const std::filesystem::path& dir() const { return dir_; }
    std::size_t size() const { return index_.size(); }
    bool has(const std::string& user_id) const { return index_.count(user_id) != 0; }

    std::vector<std::string> user_ids() const {
        std::vector<std::string> ids;
        ids.reserve(index_.size());
        for (const auto& [id, _] : index_) ids.push_back(id);
        return ids;
    }

    void put(const CacheEntry& entry) {
        const auto path = entry_path(entry.user_id);
        write_file_atomic(path, serialize_entry(entry));
        index_[entry.user_id] = entry.payload_bytes();
        save_manifest();
    }

    CacheEntry get(const std::string& user_id) const {
        const auto path = entry_path(user_id);
        if (!index_.count(user_id) || !std::filesystem::exists(path))
            throw cache_miss_error("no cache entry for user '" + user_id +
                                   "'; run prefill first");
        return deserialize_entry(read_file(path));
    }

    std::size_t payload_bytes(const std::string& user_id) const {
        const auto it = index_.find(user_id);
        if (it == index_.end())
            throw cache_miss_error("no cache entry for user '" + user_id +
                                   "'; run prefill first");
        return it->second;
    }

    std::filesystem::path entry_path(const std::string& user_id) const {
        return dir_ / (user_id + ".cke");
    }

  private:
    void load_manifest() {
        const auto path = dir_ / "manifest.tsv";
        if (!std::filesystem::exists(path)) return;
        const auto bytes = read_file(path);
        const std::string text(bytes.begin(), bytes.end());
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t eol = text.find('\n', pos);
            if (eol == std::string::npos) eol = text.size();
            const std::string line = text.substr(pos, eol - pos);
            pos = eol + 1;
            const std::size_t tab = line.find('\t');
            if (tab == std::string::npos) continue;
            index_[line.substr(0, tab)] =
                static_cast<std::size_t>(std::stoull(line.substr(tab + 1)));
        }
    }

    void save_manifest() const {
        std::string text;
        for (const auto& [id, bytes] : index_) text += id + "\t" + std::to_string(bytes) + "\n";
        const auto path = dir_ / "manifest.tsv";
        const auto tmp = dir_ / "manifest.tsv.tmp";
        write_text_file(tmp, text);
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) throw io_error("manifest rename failed: " + ec.message());
    }

    std::filesystem::path dir_;
    std::map<std::string, std::size_t> index_;
};

/// Project a user's history into its cacheable artifact (inference-mode
/// parameters assumed frozen). Requires the two sides to share symmetrically:
/// the entry format stores one dimension for both.
inline CacheEntry build_entry(const std::string& user_id, const Matrix& history,
                              const CollectiveConfig& cfg, const CollectiveParams& params,
                              CacheWidths widths = {}) {
    cfg.validate();
    if (cfg.share_keys != cfg.share_values)
        throw usage_error(
            "prefill: entry format needs share_keys == share_values (mixed-sharing arms are "
            "train/eval only)");
    const bool shared = cfg.share_keys;
    widths.validate(cfg.pool_size, shared);

    CacheEntry e;
    e.user_id = user_id;
    e.seq_len = history.rows();
    e.side_dim = shared ? cfg.user_dim : cfg.attn_dim();
    e.elem_width = widths.elem_width;
    e.idx_width = shared ? widths.idx_width : 0;
    if (e.seq_len == 0) {
        e.user_keys = Matrix(0, e.side_dim);
        e.user_values = Matrix(0, e.side_dim);
        return e;
    }

    if (shared) {
        auto [keys, values] = project_user_specific(history, params.proj);
        e.user_keys = std::move(keys);
        e.user_values = std::move(values);
        const RoutingMap key_map = route(history, params.router.key);
        const RoutingMap value_map =
            route(history, cfg.tie_routers ? params.router.key : params.router.value);
        e.key_indices.assign(key_map.indices.begin(), key_map.indices.end());
        e.value_indices.assign(value_map.indices.begin(), value_map.indices.end());
    } else {
        e.user_keys = linear(history, params.full.key_weight, params.full.key_bias);
        e.user_values = linear(history, params.full.value_weight, params.full.value_bias);
    }
    // Round stored values to the storage width so the in-memory entry equals
    // what a reader will see on disk.
    for (std::size_t i = 0; i < e.user_keys.size(); ++i) {
        e.user_keys.data()[i] = detail::round_to_width(e.user_keys.data()[i], e.elem_width);
        e.user_values.data()[i] = detail::round_to_width(e.user_values.data()[i], e.elem_width);
    }
    return e;
}

inline CacheEntry prefill(CacheStore& store, const std::string& user_id, const Matrix& history,
                          const CollectiveConfig& cfg, const CollectiveParams& params,
                          CacheWidths widths = {}) {
    CacheEntry e = build_entry(user_id, history, cfg, params, widths);
    store.put(e);
    return e;
}

/// CR = entry bytes / baseline bytes (per spec the sequence length cancels,
/// so this is exact whenever both entries cover the same sequence).
inline double compression_rate(const CacheEntry& entry, const BaselineEntry& baseline) {
    if (entry.user_id != baseline.user_id || entry.seq_len != baseline.seq_len)
        throw usage_error("compression_rate: entries must cover the same user and sequence");
    const double base = static_cast<double>(baseline.payload_bytes());
    if (base == 0.0) throw metric_error("compression_rate: baseline entry has zero bytes");
    return static_cast<double>(entry.payload_bytes()) / base;
}

/// CR implied by a configuration alone (per-item bytes; n cancels).
inline double compression_rate_for(const CollectiveConfig& cfg, CacheWidths widths = {}) {
    const double e = widths.elem_width;
    const double idx = widths.idx_width;
    const double d_a = static_cast<double>(cfg.attn_dim());
    auto side_bytes = [&](bool shared) {
        return shared ? static_cast<double>(cfg.user_dim) * e + idx : d_a * e;
    };
    return (side_bytes(cfg.share_keys) + side_bytes(cfg.share_values)) / (2.0 * d_a * e);
}

}  // namespace ckv
