#include "kvlink/linker.hpp"

#include <algorithm>
#include <sstream>

#include "kvlink/model.hpp"

namespace kvlink {

int LinkSpec::link_token_id(int doc_index, int slot) const {
    if (doc_index < 0 || doc_index >= max_docs) {
        throw VocabError("link token requested for document index " + std::to_string(doc_index) +
                         ", spec reserves IDs for " + std::to_string(max_docs) + " documents");
    }
    if (slot < 0 || slot >= k_max) {
        throw VocabError("link slot " + std::to_string(slot) + " outside k_max " +
                         std::to_string(k_max));
    }
    return link_base_id() + doc_index * k_max + slot;
}

void LinkSpec::validate() const {
    if (k_per_segment < 0 || k_per_segment > k_max) {
        throw ValidationError("k_per_segment " + std::to_string(k_per_segment) +
                              " exceeds k_max " + std::to_string(k_max));
    }
    if (n_anchor_slots < 1) throw ValidationError("n_anchor_slots must be >= 1");
    if (link_base_id() <= 0) {
        throw VocabError("vocab_size " + std::to_string(vocab_size) +
                         " too small for the reserved token ranges");
    }
}

// ---------------------------------------------------------------------------
// MaskRule
// ---------------------------------------------------------------------------

const char* span_kind_name(SpanKind kind) {
    switch (kind) {
        case SpanKind::document: return "document";
        case SpanKind::link: return "link";
        case SpanKind::boundary: return "boundary";
        case SpanKind::suffix: return "suffix";
    }
    return "?";
}

void MaskRule::validate() const {
    int expected = 0;
    for (const MaskSpan& s : spans) {
        if (s.start != expected || s.end < s.start) {
            throw RuleError("mask spans must tile [0, total_len) in order; bad span at " +
                            std::to_string(s.start));
        }
        expected = s.end;
    }
    if (expected != total_len) {
        throw RuleError("mask spans cover " + std::to_string(expected) + " of " +
                        std::to_string(total_len) + " positions");
    }
}

const MaskSpan* MaskRule::span_of(int pos) const {
    // Spans are ordered; binary search on start.
    int lo = 0, hi = static_cast<int>(spans.size()) - 1;
    while (lo <= hi) {
        const int mid = (lo + hi) / 2;
        if (pos < spans[mid].start) {
            hi = mid - 1;
        } else if (pos >= spans[mid].end) {
            lo = mid + 1;
        } else {
            return &spans[mid];
        }
    }
    return nullptr;
}

bool MaskRule::allows(int r, int c) const {
    if (c > r || c < 0) return false;
    const MaskSpan* rs = span_of(r);
    if (rs == nullptr || rs->kind == SpanKind::suffix || rs->kind == SpanKind::boundary) {
        // Generated rows, suffix and boundary tokens: standard causal.
        return true;
    }
    const MaskSpan* cs = span_of(c);
    if (cs == nullptr) return false;
    if (rs->kind == SpanKind::document) {
        // Context-free segment: own tokens only.
        return cs == rs;
    }
    // Link row of segment n.
    switch (cs->kind) {
        case SpanKind::document:
        case SpanKind::link:
            return cs->segment < rs->segment ||
                   (cs->segment == rs->segment && cs->kind == SpanKind::document) ||
                   (cs == rs);  // earlier link tokens of the same segment (c <= r already holds)
        case SpanKind::boundary:
        case SpanKind::suffix:
            return false;
    }
    return false;
}

std::string MaskRule::to_debug_text() const {
    std::ostringstream out;
    for (const MaskSpan& s : spans) {
        out << span_kind_name(s.kind) << " " << s.start << " " << s.end << "\n";
    }
    return out.str();
}

MaskMatrix build_mask(const MaskRule& rule) {
    rule.validate();
    MaskMatrix m(rule.total_len);
    for (int r = 0; r < rule.total_len; ++r) {
        auto* row = m.row(r);
        for (int c = 0; c <= r; ++c) row[c] = rule.allows(r, c) ? 1 : 0;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Prompt layout
// ---------------------------------------------------------------------------

static PromptLayout build_layout(const std::vector<int>& spans, const std::vector<int>& question,
                                 const LinkSpec& spec) {
    spec.validate();
    if (spans.empty()) throw EmptyInputError("prompt needs at least one segment");
    if (static_cast<int>(spans.size()) > spec.max_docs) {
        throw VocabError("more segments than the link-token ID scheme reserves IDs for");
    }

    PromptLayout p;
    const int k = spec.k_per_segment;
    int pos = 0;
    if (spec.boundary_tokens_enabled) {
        p.kv_start_pos = pos;
        p.kv_start_id = spec.kv_start_id();
        p.rule.spans.push_back({SpanKind::boundary, -1, pos, pos + 1});
        ++pos;
    }
    for (std::size_t n = 0; n < spans.size(); ++n) {
        p.doc_offsets.push_back(pos);
        p.rule.spans.push_back({SpanKind::document, static_cast<int>(n), pos, pos + spans[n]});
        pos += spans[n];
        std::vector<int> ids;
        std::vector<int> positions;
        for (int j = 0; j < k; ++j) {
            ids.push_back(spec.link_token_id(static_cast<int>(n), j));
            positions.push_back(pos + j);
        }
        if (k > 0) {
            p.rule.spans.push_back({SpanKind::link, static_cast<int>(n), pos, pos + k});
        }
        p.link_ids.push_back(std::move(ids));
        p.link_positions.push_back(std::move(positions));
        pos += k;
    }
    if (spec.boundary_tokens_enabled) {
        p.kv_end_pos = pos;
        p.kv_end_id = spec.kv_end_id();
        p.rule.spans.push_back({SpanKind::boundary, -1, pos, pos + 1});
        ++pos;
    }
    p.question_start = pos;
    p.question_tokens = question;
    if (!question.empty()) {
        p.rule.spans.push_back({SpanKind::suffix, -1, pos, pos + static_cast<int>(question.size())});
        pos += static_cast<int>(question.size());
    }
    p.total_len = pos;
    p.rule.total_len = pos;
    p.rule.validate();
    return p;
}

PromptLayout assemble_prompt(const std::vector<std::vector<int>>& segments,
                             const std::vector<int>& question, const LinkSpec& spec) {
    std::vector<int> spans;
    spans.reserve(segments.size());
    for (const auto& seg : segments) {
        if (seg.empty()) throw EmptyInputError("empty segment in prompt");
        spans.push_back(static_cast<int>(seg.size()));
        for (int t : seg) {
            if (t < 0 || t >= spec.vocab_size || t >= spec.reserved_floor()) {
                throw VocabError("segment token " + std::to_string(t) +
                                 " collides with the reserved ID range");
            }
        }
    }
    for (int t : question) {
        if (t < 0 || t >= spec.vocab_size || t >= spec.reserved_floor()) {
            throw VocabError("question token " + std::to_string(t) +
                             " collides with the reserved ID range");
        }
    }
    PromptLayout p = build_layout(spans, question, spec);
    p.segment_tokens = segments;
    return p;
}

PromptLayout layout_from_spans(const std::vector<int>& segment_spans,
                               const std::vector<int>& question, const LinkSpec& spec) {
    return build_layout(segment_spans, question, spec);
}

std::vector<int> PromptLayout::suffix_tokens() const {
    std::vector<int> toks;
    // KV-START sits at position 0, before everything, but its K/V are only
    // computed in this pass; nothing earlier in the pipeline attends it.
    if (kv_start_pos >= 0) toks.push_back(kv_start_id);
    if (kv_end_pos >= 0) toks.push_back(kv_end_id);
    for (int q : question_tokens) toks.push_back(q);
    return toks;
}

std::vector<int> PromptLayout::suffix_positions() const {
    std::vector<int> pos;
    if (kv_start_pos >= 0) pos.push_back(kv_start_pos);
    if (kv_end_pos >= 0) pos.push_back(kv_end_pos);
    for (std::size_t i = 0; i < question_tokens.size(); ++i) {
        pos.push_back(question_start + static_cast<int>(i));
    }
    return pos;
}

std::vector<int> PromptLayout::all_tokens() const {
    std::vector<int> toks(static_cast<std::size_t>(total_len), -1);
    auto put = [&](int pos, int tok) { toks[static_cast<std::size_t>(pos)] = tok; };
    if (kv_start_pos >= 0) put(kv_start_pos, kv_start_id);
    if (kv_end_pos >= 0) put(kv_end_pos, kv_end_id);
    for (std::size_t n = 0; n < segment_tokens.size(); ++n) {
        for (std::size_t i = 0; i < segment_tokens[n].size(); ++i) {
            put(doc_offsets[n] + static_cast<int>(i), segment_tokens[n][i]);
        }
        for (std::size_t j = 0; j < link_ids[n].size(); ++j) {
            put(link_positions[n][j], link_ids[n][j]);
        }
    }
    for (std::size_t i = 0; i < question_tokens.size(); ++i) {
        put(question_start + static_cast<int>(i), question_tokens[i]);
    }
    return toks;
}

// ---------------------------------------------------------------------------
// Link pass
// ---------------------------------------------------------------------------

AssembledContext& link_pass(AssembledContext& ctx, const LinkSpec& spec, const Weights& w) {
    const int k = spec.k_per_segment;
    if (k == 0) return ctx;

    // Rebuild the visibility rule from the assembled descriptors. The suffix
    // span is irrelevant here; link rows never attend forward.
    MaskRule rule;
    rule.total_len = 0;
    if (ctx.base_offset == 1) {
        rule.spans.push_back({SpanKind::boundary, -1, 0, 1});
    } else if (ctx.base_offset != 0) {
        throw PlanError("link_pass: unsupported base offset");
    }
    std::vector<int> tokens;
    std::vector<int> positions;
    for (std::size_t n = 0; n < ctx.segments.size(); ++n) {
        const SegmentDesc& d = ctx.segments[n];
        if (d.n_link_slots != k) {
            throw PlanError("link_pass: assembled context reserves " +
                            std::to_string(d.n_link_slots) + " link slots, spec wants " +
                            std::to_string(k));
        }
        rule.spans.push_back(
            {SpanKind::document, static_cast<int>(n), d.global_offset, d.global_offset + d.span});
        rule.spans.push_back({SpanKind::link, static_cast<int>(n), d.global_offset + d.span,
                              d.global_offset + d.span + k});
        for (int j = 0; j < k; ++j) {
            tokens.push_back(spec.link_token_id(static_cast<int>(n), j));
            positions.push_back(d.global_offset + d.span + j);
        }
    }
    rule.total_len = ctx.segments.back().global_offset + ctx.segments.back().span + k;
    rule.validate();

    extend_over_cache(ctx, tokens, positions, rule, w);
    return ctx;
}

}  // namespace kvlink
