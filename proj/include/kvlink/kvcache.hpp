#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <span>
#include <unordered_map>
#include <vector>

#include "kvlink/config.hpp"
#include "kvlink/numerics.hpp"
#include "kvlink/rope.hpp"

namespace kvlink {

enum class CacheKind : std::uint8_t { plain = 0, anchor = 1, drop = 2 };

// Position-free K/V of one independently encoded segment. K rows hold the
// pre-rotation projections, so rotating row t at position t reproduces the
// keys the segment's own prefill attended to.
struct SegmentCache {
    std::uint64_t segment_id = 0;
    std::uint64_t model_hash = 0;
    std::uint32_t n_rows = 0;  // stored K/V rows per layer
    std::uint32_t n_kv_heads = 0;
    std::uint32_t head_dim = 0;
    CacheKind kind = CacheKind::plain;
    // Stored row -> original position, strictly increasing. For anchor caches
    // these are the rows' interleaved slots and double as assembly positions;
    // for drop caches they only record which tokens were kept (the kept
    // subsequence was prefilled at 0..n_rows-1). Empty for plain caches.
    std::vector<std::uint32_t> row_to_pos;
    std::vector<Matrix> k_layers;  // per layer [n_rows x kv_dim], unrotated
    std::vector<Matrix> v_layers;  // per layer [n_rows x kv_dim]
    std::uint64_t created_at = 0;  // in-memory metadata, not serialized
    std::uint8_t dtype_bytes = 4;

    // Positions this segment occupies in the assembled layout. For anchor
    // caches that is the interleaved tokens+anchors length the anchors were
    // encoded in; otherwise it equals n_rows.
    std::uint32_t span() const;
    int local_pos(std::uint32_t row) const {
        if (kind == CacheKind::anchor && !row_to_pos.empty()) {
            return static_cast<int>(row_to_pos[row]);
        }
        return static_cast<int>(row);
    }
};

bool cache_payload_equal(const SegmentCache& a, const SegmentCache& b);

// Content identity of a segment: FNV-1a over (model hash || token-ID bytes).
// Compressed variants fold the compression kind and parameters in as well, so
// a compressed cache never aliases the plain cache of the same text.
std::uint64_t segment_content_hash(std::uint64_t model_hash, std::span<const int> tokens);
std::uint64_t segment_content_hash(std::uint64_t model_hash, std::span<const int> tokens,
                                   CacheKind kind, double rate, int chunk_size);

std::vector<std::uint8_t> serialize_cache(const SegmentCache& cache);
SegmentCache parse_cache(std::span<const std::uint8_t> bytes);
std::uint64_t serialized_cache_size(const SegmentCache& cache);

// K/V formula: 2 sides * n_layers * n_tokens * kv width * dtype bytes.
std::uint64_t cache_size_bytes(const ModelConfig& config, std::uint64_t n_tokens,
                               std::uint64_t dtype_bytes);

// ---------------------------------------------------------------------------
// Assembled context: segment caches concatenated at global positions.
// ---------------------------------------------------------------------------

struct SegmentDesc {
    std::uint64_t segment_id = 0;
    int global_offset = 0;
    int span = 0;    // positions reserved for the segment's own rows
    int n_rows = 0;  // rows actually filled inside the span
    int n_link_slots = 0;
};

// Per-layer K (rotated to global positions) and V (raw) indexed by global
// position. Link slots and boundary positions stay unfilled until the link
// and suffix passes write them.
struct AssembledContext {
    std::uint64_t model_hash = 0;
    int n_layers = 0;
    int kv_dim = 0;
    int base_offset = 0;  // 1 when a KV-START boundary owns position 0
    std::vector<SegmentDesc> segments;
    std::vector<Matrix> k_layers;  // [alloc x kv_dim] each
    std::vector<Matrix> v_layers;
    std::vector<std::uint8_t> filled;
    int end = 0;    // one past the highest laid-out position
    int alloc = 0;  // allocated rows

    int total_len() const;  // filled positions
    int layout_end() const { return end; }
    void reserve(int cap);             // geometric growth
    void extend_layout(int new_end);   // bumps `end`, reserving as needed
    void mark_filled(int pos);
    bool is_filled(int pos) const { return filled[static_cast<std::size_t>(pos)] != 0; }
};

// Concatenates caches with `link_slots_per_segment` empty positions after each
// segment. Segment n lands at base_offset + sum_{m<n}(span_m + link_slots);
// its K rows are rotated at their global positions, V is copied untouched.
AssembledContext assemble(const std::vector<const SegmentCache*>& caches,
                          int link_slots_per_segment, const RopeTables& tables,
                          int base_offset = 0);

// ---------------------------------------------------------------------------
// Stores
// ---------------------------------------------------------------------------

enum class EvictionPolicy : std::uint8_t { LRU, LFU };

struct StoreStats {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t evictions = 0;
    std::uint64_t integrity_errors = 0;
};

class SegmentStore {
  public:
    virtual ~SegmentStore() = default;
    // Returns the stored byte size. Throws CompatError on model-hash mismatch,
    // CapacityError if the cache alone exceeds the budget.
    virtual std::uint64_t put(const SegmentCache& cache) = 0;
    // Miss returns nullopt. A CRC-corrupt entry is dropped and raises
    // IntegrityError; the next get is a plain miss.
    virtual std::optional<SegmentCache> get(std::uint64_t segment_id) = 0;
    virtual bool contains(std::uint64_t segment_id) const = 0;
    virtual const StoreStats& stats() const = 0;
};

// Unbounded in-memory map; what the benchmark uses ("caches in CPU memory").
class MemoryStore final : public SegmentStore {
  public:
    explicit MemoryStore(std::uint64_t model_hash) : model_hash_(model_hash) {}
    std::uint64_t put(const SegmentCache& cache) override;
    std::optional<SegmentCache> get(std::uint64_t segment_id) override;
    bool contains(std::uint64_t segment_id) const override;
    const StoreStats& stats() const override { return stats_; }

  private:
    std::uint64_t model_hash_;
    std::unordered_map<std::uint64_t, SegmentCache> items_;
    StoreStats stats_;
};

// Disk-backed store, one KVLC file per segment, bounded by capacity_bytes.
// Concurrent readers, single writer (shared_mutex). Recency/frequency
// bookkeeping uses a logical tick, not wall time, so eviction order is
// reproducible. Eviction never considers the cache being inserted.
class CacheStore final : public SegmentStore {
  public:
    CacheStore(std::filesystem::path root, std::uint64_t capacity_bytes, EvictionPolicy policy,
               std::uint64_t model_hash);

    std::uint64_t put(const SegmentCache& cache) override;
    std::optional<SegmentCache> get(std::uint64_t segment_id) override;
    bool contains(std::uint64_t segment_id) const override;
    const StoreStats& stats() const override { return stats_; }

    std::uint64_t resident_bytes() const;
    std::vector<std::uint64_t> resident_ids() const;  // sorted
    const std::filesystem::path& root() const { return root_; }

  private:
    struct Entry {
        std::filesystem::path path;
        std::uint64_t size = 0;
        std::uint64_t last_use = 0;
        std::uint64_t use_count = 0;
    };

    void evict_until_fits(std::uint64_t incoming_id);
    std::uint64_t pick_victim(std::uint64_t incoming_id) const;
    void drop_entry(std::uint64_t id);

    std::filesystem::path root_;
    std::uint64_t capacity_bytes_;
    EvictionPolicy policy_;
    std::uint64_t model_hash_;
    std::uint64_t tick_ = 0;
    std::map<std::uint64_t, Entry> index_;
    StoreStats stats_;
    mutable std::shared_mutex mutex_;
};

}  // namespace kvlink
