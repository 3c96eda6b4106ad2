#include "kvlink/kvcache.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <mutex>
#include <string>

#include "kvlink/util.hpp"

namespace kvlink {

namespace {

constexpr char kCacheMagic[4] = {'K', 'V', 'L', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

std::string hex_id(std::uint64_t id) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(id));
    return buf;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
    if (n_kv_heads < 1) throw ConfigError("n_kv_heads must be >= 1");
    if (n_heads % n_kv_heads != 0) throw ConfigError("n_heads must be divisible by n_kv_heads");
    if (head_dim < 2 || head_dim % 2 != 0) throw ConfigError("head_dim must be even and >= 2");
    if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
    if (vocab_size < 8) throw ConfigError("vocab_size too small for the reserved token ranges");
    if (max_pos < 1) throw ConfigError("max_pos must be >= 1");
    if (!(theta_base > 0.0)) throw ConfigError("theta_base must be positive");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

std::uint64_t cache_size_bytes(const ModelConfig& config, std::uint64_t n_tokens,
                               std::uint64_t dtype_bytes) {
    if (n_tokens == 0 || dtype_bytes == 0) {
        throw ValidationError("cache_size_bytes: arguments must be positive");
    }
    config.validate();
    return 2ull * static_cast<std::uint64_t>(config.n_layers) * n_tokens *
           static_cast<std::uint64_t>(config.kv_dim()) * dtype_bytes;
}

std::uint32_t SegmentCache::span() const {
    if (kind == CacheKind::anchor && !row_to_pos.empty()) return row_to_pos.back() + 1;
    return n_rows;
}

bool cache_payload_equal(const SegmentCache& a, const SegmentCache& b) {
    if (a.segment_id != b.segment_id || a.model_hash != b.model_hash || a.n_rows != b.n_rows ||
        a.n_kv_heads != b.n_kv_heads || a.head_dim != b.head_dim || a.kind != b.kind ||
        a.row_to_pos != b.row_to_pos || a.dtype_bytes != b.dtype_bytes ||
        a.k_layers.size() != b.k_layers.size()) {
        return false;
    }
    for (std::size_t l = 0; l < a.k_layers.size(); ++l) {
        if (!a.k_layers[l].same_shape(b.k_layers[l]) || !a.v_layers[l].same_shape(b.v_layers[l]))
            return false;
        if (std::memcmp(a.k_layers[l].data.data(), b.k_layers[l].data.data(),
                        a.k_layers[l].data.size() * 4) != 0)
            return false;
        if (std::memcmp(a.v_layers[l].data.data(), b.v_layers[l].data.data(),
                        a.v_layers[l].data.size() * 4) != 0)
            return false;
    }
    return true;
}

std::uint64_t segment_content_hash(std::uint64_t model_hash, std::span<const int> tokens) {
    ByteWriter w;
    w.u64(model_hash);
    for (int t : tokens) w.u32(static_cast<std::uint32_t>(t));
    return fnv1a64(w.data());
}

std::uint64_t segment_content_hash(std::uint64_t model_hash, std::span<const int> tokens,
                                   CacheKind kind, double rate, int chunk_size) {
    if (kind == CacheKind::plain) return segment_content_hash(model_hash, tokens);
    ByteWriter w;
    w.u64(model_hash);
    w.u8(static_cast<std::uint8_t>(kind));
    w.u32(static_cast<std::uint32_t>(rate * 1e6));
    w.u32(static_cast<std::uint32_t>(chunk_size));
    for (int t : tokens) w.u32(static_cast<std::uint32_t>(t));
    return fnv1a64(w.data());
}

// ---------------------------------------------------------------------------
// KVLC serialization
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> serialize_cache(const SegmentCache& cache) {
    if (cache.k_layers.empty() || cache.k_layers.size() != cache.v_layers.size()) {
        throw ValidationError("serialize_cache: inconsistent layer arrays");
    }
    ByteWriter w;
    w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kCacheMagic), 4));
    w.u32(kCacheVersion);
    w.u64(cache.model_hash);
    w.u64(cache.segment_id);
    w.u32(static_cast<std::uint32_t>(cache.k_layers.size()));
    w.u32(cache.n_kv_heads);
    w.u32(cache.head_dim);
    w.u32(cache.n_rows);
    w.u8(cache.dtype_bytes);
    for (const Matrix& k : cache.k_layers) w.f32_span(k.data);
    for (const Matrix& v : cache.v_layers) w.f32_span(v.data);
    // Compressed caches append a kind flag and the row->position table.
    if (cache.kind != CacheKind::plain) {
        w.u8(static_cast<std::uint8_t>(cache.kind));
        w.u32(static_cast<std::uint32_t>(cache.row_to_pos.size()));
        for (std::uint32_t p : cache.row_to_pos) w.u32(p);
    }
    w.u32(crc32_of(w.data()));
    return w.data();
}

std::uint64_t serialized_cache_size(const SegmentCache& cache) {
    std::uint64_t n = 4 + 4 + 8 + 8 + 4 + 4 + 4 + 4 + 1;  // header
    for (const Matrix& k : cache.k_layers) n += k.data.size() * 4;
    for (const Matrix& v : cache.v_layers) n += v.data.size() * 4;
    if (cache.kind != CacheKind::plain) n += 1 + 4 + 4ull * cache.row_to_pos.size();
    return n + 4;  // CRC
}

SegmentCache parse_cache(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 4) throw FormatError("cache file too short for header");
    if (std::memcmp(bytes.data(), kCacheMagic, 4) != 0) {
        throw FormatError("bad cache magic, expected KVLC");
    }
    if (bytes.size() < 4) throw FormatError("cache file missing CRC");
    const std::size_t body_len = bytes.size() - 4;
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body_len, 4);
    if (crc32_of(bytes.subspan(0, body_len)) != stored_crc) {
        throw IntegrityError("cache CRC mismatch");
    }

    ByteReader r(bytes.subspan(0, body_len));
    r.u32("magic");
    const std::uint32_t version = r.u32("version");
    if (version != kCacheVersion) {
        throw FormatError("unsupported cache version " + std::to_string(version));
    }
    SegmentCache c;
    c.model_hash = r.u64("model hash");
    c.segment_id = r.u64("segment hash");
    const std::uint32_t n_layers = r.u32("layer count");
    c.n_kv_heads = r.u32("kv head count");
    c.head_dim = r.u32("head dim");
    c.n_rows = r.u32("row count");
    c.dtype_bytes = r.u8("dtype code");
    if (c.dtype_bytes != 4) {
        throw FormatError("unsupported dtype code " + std::to_string(c.dtype_bytes));
    }
    const int kv_dim = static_cast<int>(c.n_kv_heads * c.head_dim);
    if (n_layers == 0 || kv_dim <= 0) throw FormatError("degenerate cache shape");
    c.k_layers.reserve(n_layers);
    c.v_layers.reserve(n_layers);
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        Matrix m(static_cast<int>(c.n_rows), kv_dim);
        r.f32_into(m.data, "K payload");
        c.k_layers.push_back(std::move(m));
    }
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        Matrix m(static_cast<int>(c.n_rows), kv_dim);
        r.f32_into(m.data, "V payload");
        c.v_layers.push_back(std::move(m));
    }
    if (r.remaining() > 0) {
        c.kind = static_cast<CacheKind>(r.u8("compression flag"));
        if (c.kind != CacheKind::anchor && c.kind != CacheKind::drop) {
            throw FormatError("unknown compression flag");
        }
        const std::uint32_t n = r.u32("row mapping length");
        if (n != c.n_rows) throw FormatError("row mapping length != row count");
        c.row_to_pos.resize(n);
        for (std::uint32_t i = 0; i < n; ++i) c.row_to_pos[i] = r.u32("row mapping");
        for (std::uint32_t i = 1; i < n; ++i) {
            if (c.row_to_pos[i] <= c.row_to_pos[i - 1]) {
                throw FormatError("row mapping not strictly increasing");
            }
        }
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes in cache file");
    return c;
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

int AssembledContext::total_len() const {
    int n = 0;
    for (int p = 0; p < end; ++p) n += filled[static_cast<std::size_t>(p)];
    return n;
}

void AssembledContext::reserve(int cap) {
    if (cap <= alloc) return;
    const int new_alloc = std::max(cap, alloc + alloc / 2);
    for (int l = 0; l < n_layers; ++l) {
        Matrix k(new_alloc, kv_dim);
        Matrix v(new_alloc, kv_dim);
        if (alloc > 0) {
            std::memcpy(k.data.data(), k_layers[l].data.data(),
                        static_cast<std::size_t>(alloc) * kv_dim * 4);
            std::memcpy(v.data.data(), v_layers[l].data.data(),
                        static_cast<std::size_t>(alloc) * kv_dim * 4);
        }
        k_layers[l] = std::move(k);
        v_layers[l] = std::move(v);
    }
    filled.resize(static_cast<std::size_t>(new_alloc), 0);
    alloc = new_alloc;
}

void AssembledContext::extend_layout(int new_end) {
    reserve(new_end);
    if (new_end > end) end = new_end;
}

void AssembledContext::mark_filled(int pos) {
    filled[static_cast<std::size_t>(pos)] = 1;
}

AssembledContext assemble(const std::vector<const SegmentCache*>& caches,
                          int link_slots_per_segment, const RopeTables& tables, int base_offset) {
    if (caches.empty()) throw EmptyInputError("assemble: no segment caches");
    if (link_slots_per_segment < 0) throw ValidationError("assemble: negative link slot count");

    AssembledContext ctx;
    ctx.model_hash = caches[0]->model_hash;
    ctx.n_layers = static_cast<int>(caches[0]->k_layers.size());
    ctx.kv_dim = caches[0]->k_layers.empty() ? 0 : caches[0]->k_layers[0].cols;
    ctx.base_offset = base_offset;

    int offset = base_offset;
    for (const SegmentCache* c : caches) {
        if (c->model_hash != ctx.model_hash) {
            throw CompatError("assemble: caches from different models");
        }
        SegmentDesc d;
        d.segment_id = c->segment_id;
        d.global_offset = offset;
        d.span = static_cast<int>(c->span());
        d.n_rows = static_cast<int>(c->n_rows);
        d.n_link_slots = link_slots_per_segment;
        ctx.segments.push_back(d);
        offset += d.span + link_slots_per_segment;
    }

    ctx.k_layers.assign(static_cast<std::size_t>(ctx.n_layers), Matrix());
    ctx.v_layers.assign(static_cast<std::size_t>(ctx.n_layers), Matrix());
    ctx.extend_layout(offset);

    for (std::size_t s = 0; s < caches.size(); ++s) {
        const SegmentCache& c = *caches[s];
        const SegmentDesc& d = ctx.segments[s];
        std::vector<int> offsets(c.n_rows);
        for (std::uint32_t r = 0; r < c.n_rows; ++r) offsets[r] = c.local_pos(r);
        if (d.global_offset + d.span > tables.max_pos) {
            throw PositionError("assemble: segment overflows max_pos");
        }
        for (int l = 0; l < ctx.n_layers; ++l) {
            Matrix rotated = rerotate_cache_layer(c.k_layers[l], d.global_offset, offsets, tables);
            for (std::uint32_t r = 0; r < c.n_rows; ++r) {
                const int pos = d.global_offset + offsets[r];
                std::memcpy(ctx.k_layers[l].row(pos), rotated.row(static_cast<int>(r)),
                            static_cast<std::size_t>(ctx.kv_dim) * 4);
                std::memcpy(ctx.v_layers[l].row(pos), c.v_layers[l].row(static_cast<int>(r)),
                            static_cast<std::size_t>(ctx.kv_dim) * 4);
            }
        }
        for (std::uint32_t r = 0; r < c.n_rows; ++r) {
            ctx.mark_filled(d.global_offset + offsets[r]);
        }
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// MemoryStore
// ---------------------------------------------------------------------------

std::uint64_t MemoryStore::put(const SegmentCache& cache) {
    if (cache.model_hash != model_hash_) {
        throw CompatError("store serves a different model than this cache");
    }
    items_[cache.segment_id] = cache;
    return serialized_cache_size(cache);
}

std::optional<SegmentCache> MemoryStore::get(std::uint64_t segment_id) {
    auto it = items_.find(segment_id);
    if (it == items_.end()) {
        ++stats_.misses;
        return std::nullopt;
    }
    ++stats_.hits;
    return it->second;
}

bool MemoryStore::contains(std::uint64_t segment_id) const {
    return items_.count(segment_id) != 0;
}

// ---------------------------------------------------------------------------
// CacheStore (disk)
// ---------------------------------------------------------------------------

CacheStore::CacheStore(std::filesystem::path root, std::uint64_t capacity_bytes,
                       EvictionPolicy policy, std::uint64_t model_hash)
    : root_(std::move(root)), capacity_bytes_(capacity_bytes), policy_(policy),
      model_hash_(model_hash) {
    std::filesystem::create_directories(root_);
    // Rebuild the index from whatever is already on disk. Tick order follows
    // filesystem mtime; exact recency does not survive restarts.
    std::vector<std::pair<std::filesystem::file_time_type, std::filesystem::path>> found;
    for (const auto& e : std::filesystem::directory_iterator(root_)) {
        if (e.path().extension() == ".kvlc") found.emplace_back(e.last_write_time(), e.path());
    }
    std::sort(found.begin(), found.end());
    for (const auto& [mtime, path] : found) {
        std::uint64_t id = 0;
        try {
            id = std::stoull(path.stem().string(), nullptr, 16);
        } catch (...) {
            continue;  // foreign file, ignore
        }
        Entry entry;
        entry.path = path;
        entry.size = std::filesystem::file_size(path);
        entry.last_use = ++tick_;
        entry.use_count = 1;
        index_[id] = entry;
    }
}

std::uint64_t CacheStore::resident_bytes() const {
    std::shared_lock lock(mutex_);
    std::uint64_t total = 0;
    for (const auto& [id, e] : index_) total += e.size;
    return total;
}

std::vector<std::uint64_t> CacheStore::resident_ids() const {
    std::shared_lock lock(mutex_);
    std::vector<std::uint64_t> ids;
    ids.reserve(index_.size());
    for (const auto& [id, e] : index_) ids.push_back(id);
    return ids;
}

std::uint64_t CacheStore::pick_victim(std::uint64_t incoming_id) const {
    // LRU: smallest last_use. LFU: smallest use_count, ties by last_use.
    const Entry* best = nullptr;
    std::uint64_t best_id = 0;
    for (const auto& [id, e] : index_) {
        if (id == incoming_id) continue;
        bool better;
        if (best == nullptr) {
            better = true;
        } else if (policy_ == EvictionPolicy::LRU) {
            better = e.last_use < best->last_use;
        } else {
            better = e.use_count < best->use_count ||
                     (e.use_count == best->use_count && e.last_use < best->last_use);
        }
        if (better) {
            best = &e;
            best_id = id;
        }
    }
    if (best == nullptr) throw StoreError("eviction found no victim");
    return best_id;
}

void CacheStore::drop_entry(std::uint64_t id) {
    auto it = index_.find(id);
    if (it == index_.end()) return;
    std::error_code ec;
    std::filesystem::remove(it->second.path, ec);
    index_.erase(it);
}

void CacheStore::evict_until_fits(std::uint64_t incoming_id) {
    auto resident = [this] {
        std::uint64_t total = 0;
        for (const auto& [id, e] : index_) total += e.size;
        return total;
    };
    while (resident() > capacity_bytes_) {
        drop_entry(pick_victim(incoming_id));
        ++stats_.evictions;
    }
}

std::uint64_t CacheStore::put(const SegmentCache& cache) {
    if (cache.model_hash != model_hash_) {
        throw CompatError("store serves a different model than this cache");
    }
    const std::vector<std::uint8_t> bytes = serialize_cache(cache);
    if (bytes.size() > capacity_bytes_) {
        throw CapacityError("cache of " + std::to_string(bytes.size()) +
                            " bytes exceeds store capacity " + std::to_string(capacity_bytes_));
    }
    std::unique_lock lock(mutex_);
    Entry entry;
    entry.path = root_ / (hex_id(cache.segment_id) + ".kvlc");
    entry.size = bytes.size();
    entry.last_use = ++tick_;
    entry.use_count = 1;
    write_file_bytes(entry.path, bytes);
    index_[cache.segment_id] = entry;
    evict_until_fits(cache.segment_id);
    return bytes.size();
}

std::optional<SegmentCache> CacheStore::get(std::uint64_t segment_id) {
    std::unique_lock lock(mutex_);  // recency bookkeeping mutates the index
    auto it = index_.find(segment_id);
    if (it == index_.end()) {
        ++stats_.misses;
        return std::nullopt;
    }
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file_bytes(it->second.path);
        SegmentCache cache = parse_cache(bytes);
        it->second.last_use = ++tick_;
        it->second.use_count += 1;
        ++stats_.hits;
        return cache;
    } catch (const IntegrityError&) {
        drop_entry(segment_id);
        ++stats_.integrity_errors;
        throw;
    } catch (const IoError&) {
        drop_entry(segment_id);
        ++stats_.integrity_errors;
        throw IntegrityError("cache file unreadable, entry dropped");
    }
}

bool CacheStore::contains(std::uint64_t segment_id) const {
    std::shared_lock lock(mutex_);
    return index_.count(segment_id) != 0;
}

}  // namespace kvlink
