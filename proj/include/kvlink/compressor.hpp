#pragma once

#include <functional>
#include <span>
#include <vector>

#include "kvlink/kvcache.hpp"
#include "kvlink/linker.hpp"
#include "kvlink/mask.hpp"

namespace kvlink {

struct Weights;

// Fixed-length chunking of a segment for anchor compression. `rate` is the
// fraction of cache REMOVED: a 0.75 rate keeps 25 anchors per 100-token
// chunk. Short trailing chunks scale their anchor count by chunk length,
// never below one anchor.
struct ChunkPlan {
    struct Chunk {
        int start = 0;
        int end = 0;  // half-open token span
        int n_anchors = 0;
    };
    int chunk_size = 100;
    double rate = 0.5;
    std::vector<Chunk> chunks;
    int anchors_per_chunk = 0;  // for a full-length chunk

    int n_tokens() const { return chunks.empty() ? 0 : chunks.back().end; }
    int total_anchors() const;
    int interleaved_len() const { return n_tokens() + total_anchors(); }
};

ChunkPlan plan_chunks(int n_tokens, int s, double rate);

// Attention map over the interleaved layout (chunk-1 tokens, chunk-1 anchors,
// chunk-2 tokens, ...): original tokens are causal within their own chunk
// only; anchor a of chunk n sees chunk n's tokens, every anchor of earlier
// chunks, and chunk n's anchors up to itself.
MaskMatrix anchor_mask(const ChunkPlan& plan);

// Interleaved positions of the anchors, ascending.
std::vector<std::uint32_t> anchor_positions(const ChunkPlan& plan);

// One forward pass over tokens+anchors under anchor_mask; keeps the anchors'
// position-free K/V only. Anchor token IDs cycle through the reserved anchor
// slot range.
SegmentCache compress_anchor(std::span<const int> tokens, double rate, const LinkSpec& spec,
                             const Weights& w, int chunk_size = 100);

using TokenScorer = std::function<std::vector<float>(std::span<const int>, const Weights&)>;

// Per-token importance as the negative log-likelihood of each token given its
// prefix under the engine's own model. The first token has no prefix and
// scores +infinity, so it is always kept.
std::vector<float> self_nll_scores(std::span<const int> tokens, const Weights& w);

// Keeps the ceil((1-rate)*L) highest-scoring tokens in original order (ties
// keep earlier positions) and prefills the kept subsequence at local
// positions 0..kept-1. A null scorer uses self_nll_scores.
SegmentCache compress_drop(std::span<const int> tokens, double rate, const TokenScorer& scorer,
                           const Weights& w);

}  // namespace kvlink
