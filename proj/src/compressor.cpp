#include "kvlink/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "kvlink/model.hpp"

namespace kvlink {

int ChunkPlan::total_anchors() const {
    int n = 0;
    for (const Chunk& c : chunks) n += c.n_anchors;
    return n;
}

ChunkPlan plan_chunks(int n_tokens, int s, double rate) {
    if (n_tokens < 1) throw EmptyInputError("plan_chunks: segment is empty");
    if (s < 1) throw ValidationError("plan_chunks: chunk size must be >= 1");
    if (!(rate > 0.0 && rate < 1.0)) {
        throw ValidationError("plan_chunks: rate must lie in (0, 1)");
    }
    ChunkPlan plan;
    plan.chunk_size = s;
    plan.rate = rate;
    plan.anchors_per_chunk = std::max(1, static_cast<int>(std::lround((1.0 - rate) * s)));
    for (int start = 0; start < n_tokens; start += s) {
        const int end = std::min(start + s, n_tokens);
        const int len = end - start;
        const int anchors =
            std::max(1, static_cast<int>(std::lround((1.0 - rate) * len)));
        plan.chunks.push_back({start, end, anchors});
    }
    return plan;
}

namespace {

struct RowInfo {
    int chunk = 0;
    bool is_anchor = false;
};

std::vector<RowInfo> interleaved_rows(const ChunkPlan& plan) {
    std::vector<RowInfo> rows;
    rows.reserve(static_cast<std::size_t>(plan.interleaved_len()));
    for (std::size_t c = 0; c < plan.chunks.size(); ++c) {
        const auto& ch = plan.chunks[c];
        for (int t = ch.start; t < ch.end; ++t) rows.push_back({static_cast<int>(c), false});
        for (int a = 0; a < ch.n_anchors; ++a) rows.push_back({static_cast<int>(c), true});
    }
    return rows;
}

}  // namespace

std::vector<std::uint32_t> anchor_positions(const ChunkPlan& plan) {
    std::vector<std::uint32_t> pos;
    const std::vector<RowInfo> rows = interleaved_rows(plan);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].is_anchor) pos.push_back(static_cast<std::uint32_t>(i));
    }
    return pos;
}

MaskMatrix anchor_mask(const ChunkPlan& plan) {
    const std::vector<RowInfo> rows = interleaved_rows(plan);
    const int n = static_cast<int>(rows.size());
    MaskMatrix m(n);
    for (int r = 0; r < n; ++r) {
        auto* mrow = m.row(r);
        for (int c = 0; c <= r; ++c) {
            bool ok;
            if (!rows[r].is_anchor) {
                // Original token: causal inside its own chunk, tokens only.
                ok = !rows[c].is_anchor && rows[c].chunk == rows[r].chunk;
            } else if (rows[c].chunk == rows[r].chunk) {
                ok = true;  // own chunk's tokens and earlier anchors (c <= r)
            } else {
                ok = rows[c].is_anchor;  // earlier chunks: anchors only
            }
            mrow[c] = ok ? 1 : 0;
        }
    }
    return m;
}

SegmentCache compress_anchor(std::span<const int> tokens, double rate, const LinkSpec& spec,
                             const Weights& w, int chunk_size) {
    if (tokens.empty()) throw EmptyInputError("compress_anchor: empty segment");
    spec.validate();
    for (int t : tokens) {
        if (t >= spec.reserved_floor()) {
            throw VocabError("segment token " + std::to_string(t) +
                             " collides with the reserved ID range");
        }
    }
    const ChunkPlan plan = plan_chunks(static_cast<int>(tokens.size()), chunk_size, rate);

    std::vector<int> interleaved;
    interleaved.reserve(static_cast<std::size_t>(plan.interleaved_len()));
    for (const auto& ch : plan.chunks) {
        for (int t = ch.start; t < ch.end; ++t) interleaved.push_back(tokens[t]);
        for (int a = 0; a < ch.n_anchors; ++a) interleaved.push_back(spec.anchor_slot_id(a));
    }

    std::vector<int> positions(interleaved.size());
    std::iota(positions.begin(), positions.end(), 0);
    ForwardOutput out = forward_masked(interleaved, positions, anchor_mask(plan), w);

    const std::vector<std::uint32_t> keep = anchor_positions(plan);
    SegmentCache cache;
    cache.kind = CacheKind::anchor;
    cache.segment_id =
        segment_content_hash(w.hash, tokens, CacheKind::anchor, rate, chunk_size);
    cache.model_hash = w.hash;
    cache.n_rows = static_cast<std::uint32_t>(keep.size());
    cache.n_kv_heads = static_cast<std::uint32_t>(w.config.n_kv_heads);
    cache.head_dim = static_cast<std::uint32_t>(w.config.head_dim);
    cache.row_to_pos = keep;
    const int kv_dim = w.config.kv_dim();
    for (int l = 0; l < w.config.n_layers; ++l) {
        Matrix k(static_cast<int>(keep.size()), kv_dim);
        Matrix v(static_cast<int>(keep.size()), kv_dim);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            std::memcpy(k.row(static_cast<int>(i)), out.k_cache[l].row(static_cast<int>(keep[i])),
                        static_cast<std::size_t>(kv_dim) * 4);
            std::memcpy(v.row(static_cast<int>(i)), out.v_cache[l].row(static_cast<int>(keep[i])),
                        static_cast<std::size_t>(kv_dim) * 4);
        }
        cache.k_layers.push_back(std::move(k));
        cache.v_layers.push_back(std::move(v));
    }
    return cache;
}

std::vector<float> self_nll_scores(std::span<const int> tokens, const Weights& w) {
    const int n = static_cast<int>(tokens.size());
    std::vector<int> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    ForwardOutput out = forward_masked(tokens, positions, causal_mask(n), w);

    std::vector<float> scores(static_cast<std::size_t>(n));
    scores[0] = std::numeric_limits<float>::infinity();
    for (int t = 1; t < n; ++t) {
        // NLL of token t under the distribution predicted at t-1.
        const auto logits = out.logits.row_span(t - 1);
        float row_max = logits[0];
        for (float v : logits) row_max = std::max(row_max, v);
        double sum = 0.0;
        for (float v : logits) sum += std::exp(static_cast<double>(v - row_max));
        const double logprob =
            static_cast<double>(logits[tokens[t]] - row_max) - std::log(sum);
        scores[static_cast<std::size_t>(t)] = static_cast<float>(-logprob);
    }
    return scores;
}

SegmentCache compress_drop(std::span<const int> tokens, double rate, const TokenScorer& scorer,
                           const Weights& w) {
    if (tokens.empty()) throw EmptyInputError("compress_drop: empty segment");
    if (!(rate > 0.0 && rate < 1.0)) {
        throw ValidationError("compress_drop: rate must lie in (0, 1); keeping zero tokens is "
                              "not allowed");
    }
    const int n = static_cast<int>(tokens.size());
    const int kept = static_cast<int>(std::ceil((1.0 - rate) * n));

    std::vector<float> scores =
        scorer ? scorer(tokens, w) : self_nll_scores(tokens, w);
    if (static_cast<int>(scores.size()) != n) {
        throw ValidationError("compress_drop: scorer returned wrong length");
    }

    // Highest scores win; stable sort keeps earlier positions on ties.
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    std::vector<int> keep(order.begin(), order.begin() + kept);
    std::sort(keep.begin(), keep.end());

    std::vector<int> kept_tokens;
    kept_tokens.reserve(keep.size());
    for (int i : keep) kept_tokens.push_back(tokens[i]);

    SegmentCache cache = prefill_segment(kept_tokens, w);
    cache.kind = CacheKind::drop;
    cache.segment_id = segment_content_hash(w.hash, tokens, CacheKind::drop, rate, 0);
    cache.row_to_pos.assign(keep.begin(), keep.end());
    return cache;
}

}  // namespace kvlink
