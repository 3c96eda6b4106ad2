#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvlink/kvcache.hpp"
#include "kvlink/mask.hpp"

namespace kvlink {

struct Weights;  // model.hpp

// Reserved-token layout at the top of the vocabulary:
//   [link tokens: max_docs * k_max][anchor slots][KV-END][KV-START]
// The link token for document n, slot j is link_base_id + n*k_max + j, so a
// document keeps the same link IDs regardless of which query it appears in.
struct LinkSpec {
    int k_per_segment = 1;
    int k_max = 5;
    int max_docs = 16;
    int n_anchor_slots = 8;
    int vocab_size = 512;
    bool boundary_tokens_enabled = false;

    int kv_start_id() const { return vocab_size - 1; }
    int kv_end_id() const { return vocab_size - 2; }
    int anchor_base_id() const { return vocab_size - 2 - n_anchor_slots; }
    int link_base_id() const { return anchor_base_id() - max_docs * k_max; }
    int anchor_slot_id(int slot) const { return anchor_base_id() + slot % n_anchor_slots; }
    int link_token_id(int doc_index, int slot) const;

    // First reserved ID; ordinary text tokens must stay below this.
    int reserved_floor() const { return link_base_id(); }

    void validate() const;
};

enum class SpanKind : std::uint8_t { document, link, boundary, suffix };

struct MaskSpan {
    SpanKind kind = SpanKind::document;
    int segment = -1;  // for document/link spans
    int start = 0;
    int end = 0;  // half-open
};

// Declarative form of the customized attention map:
//   - document tokens: causal within their own segment only
//   - link tokens of segment n: everything in segments < n (tokens and link
//     tokens), segment n's tokens, and segment n's earlier link tokens + self
//   - boundary and suffix tokens: standard causal over all earlier positions
// Rows at or beyond total_len (generated tokens) are causal over everything.
struct MaskRule {
    std::vector<MaskSpan> spans;  // ordered by start, partitioning [0, total_len)
    int total_len = 0;

    bool allows(int r, int c) const;
    const MaskSpan* span_of(int pos) const;  // nullptr past the end
    void validate() const;
    std::string to_debug_text() const;  // one line per span: kind start end
};

MaskMatrix build_mask(const MaskRule& rule);

const char* span_kind_name(SpanKind kind);

// Token/position layout for one query: optional KV-START, each segment
// followed by its K link tokens, optional KV-END, then the question.
struct PromptLayout {
    std::vector<std::vector<int>> segment_tokens;
    std::vector<std::vector<int>> link_ids;        // per segment
    std::vector<std::vector<int>> link_positions;  // per segment
    std::vector<int> doc_offsets;
    int kv_start_pos = -1;
    int kv_end_pos = -1;
    int kv_start_id = -1;
    int kv_end_id = -1;
    std::vector<int> question_tokens;
    int question_start = 0;
    int total_len = 0;
    MaskRule rule;

    // Tokens the suffix pass computes (boundaries + question) with their
    // global positions, in ascending position order.
    std::vector<int> suffix_tokens() const;
    std::vector<int> suffix_positions() const;

    // The monolithic equivalent: every token in layout order.
    std::vector<int> all_tokens() const;
};

PromptLayout assemble_prompt(const std::vector<std::vector<int>>& segments,
                             const std::vector<int>& question, const LinkSpec& spec);

// Layout from per-segment position spans (used when segments are compressed
// and their stored rows do not tile the span).
PromptLayout layout_from_spans(const std::vector<int>& segment_spans,
                               const std::vector<int>& question, const LinkSpec& spec);

// Computes K/V for all link tokens in one batched extension pass at their
// interleaved positions and fills the reserved slots. K = 0 is a no-op.
AssembledContext& link_pass(AssembledContext& ctx, const LinkSpec& spec, const Weights& w);

}  // namespace kvlink
