#include "kvlink/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "kvlink/util.hpp"

namespace kvlink {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_us(Clock::time_point start) {
    return std::chrono::duration<double, std::micro>(Clock::now() - start).count();
}

int ceil_frac(double frac, int n) {
    return static_cast<int>(std::ceil(frac * static_cast<double>(n)));
}

}  // namespace

const char* mode_name(Mode mode) {
    switch (mode) {
        case Mode::full: return "full";
        case Mode::plain_reuse: return "plain_reuse";
        case Mode::link_reuse: return "link_reuse";
        case Mode::blend: return "blend";
    }
    return "?";
}

void QueryPlan::validate() const {
    if (segments.empty()) throw PlanError("plan has no segments");
    for (const auto& s : segments) {
        if (s.empty()) throw PlanError("plan contains an empty segment");
    }
    if (question.empty()) throw PlanError("plan has no question tokens");
    if (mode == Mode::blend) {
        if (!(blend_ratio > 0.0 && blend_ratio < 1.0)) {
            throw PlanError("blend ratio must lie in (0, 1)");
        }
        if (compression != Compression::none) {
            throw PlanError("blend mode recomputes over raw token caches; no compression");
        }
        if (k != 0) throw PlanError("blend mode does not use link tokens");
    }
    if (mode != Mode::link_reuse && mode != Mode::blend && k != 0) {
        throw PlanError("link tokens require link_reuse mode");
    }
    if (compression != Compression::none && !(comp_rate > 0.0 && comp_rate < 1.0)) {
        throw PlanError("compression rate must lie in (0, 1)");
    }
}

// ---------------------------------------------------------------------------
// Plan files
// ---------------------------------------------------------------------------

namespace {

std::vector<int> parse_token_list(const std::string& text, const char* what) {
    std::vector<int> out;
    std::istringstream in(text);
    long long v;
    while (in >> v) out.push_back(static_cast<int>(v));
    if (!in.eof()) throw PlanError(std::string("bad token list for ") + what + ": " + text);
    return out;
}

std::vector<int> parse_tokens_or_path(const std::string& value,
                                      const std::filesystem::path& base_dir, const char* what) {
    if (!value.empty() && value[0] == '@') {
        std::filesystem::path p = value.substr(1);
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        const auto bytes = read_file_bytes(p);
        return parse_token_list(std::string(bytes.begin(), bytes.end()), what);
    }
    return parse_token_list(value, what);
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int plan_int(const std::string& value, const char* key) {
    try {
        return std::stoi(value);
    } catch (const std::exception&) {
        throw PlanError(std::string("bad integer for ") + key + ": " + value);
    }
}

double plan_double(const std::string& value, const char* key) {
    try {
        return std::stod(value);
    } catch (const std::exception&) {
        throw PlanError(std::string("bad number for ") + key + ": " + value);
    }
}

}  // namespace

QueryPlan parse_plan_text(const std::string& text, const std::filesystem::path& base_dir) {
    QueryPlan plan;
    bool saw_question = false;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw PlanError("plan line is not key=value: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "mode") {
            if (value == "full") plan.mode = Mode::full;
            else if (value == "plain_reuse") plan.mode = Mode::plain_reuse;
            else if (value == "link_reuse") plan.mode = Mode::link_reuse;
            else if (value == "blend") plan.mode = Mode::blend;
            else throw PlanError("unknown mode: " + value);
        } else if (key == "k") {
            plan.k = plan_int(value, "k");
            plan.k_explicit = true;
        } else if (key == "ratio") {
            plan.blend_ratio = plan_double(value, "ratio");
        } else if (key == "compression") {
            if (value == "none") plan.compression = Compression::none;
            else if (value == "anchor") plan.compression = Compression::anchor;
            else if (value == "drop") plan.compression = Compression::drop;
            else throw PlanError("unknown compression: " + value);
        } else if (key == "rate") {
            plan.comp_rate = plan_double(value, "rate");
        } else if (key == "boundary") {
            plan.boundaries = (value == "1" || value == "true" || value == "on");
            plan.boundaries_explicit = true;
        } else if (key == "segment") {
            plan.segments.push_back(parse_tokens_or_path(value, base_dir, "segment"));
        } else if (key == "question") {
            plan.question = parse_tokens_or_path(value, base_dir, "question");
            saw_question = true;
        } else {
            throw PlanError("unknown plan key: " + key);
        }
    }
    if (!saw_question) throw PlanError("plan has no question line");
    plan.validate();
    return plan;
}

QueryPlan parse_plan_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_plan_text(std::string(bytes.begin(), bytes.end()), path.parent_path());
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace {

LinkSpec spec_for(const QueryPlan& plan, const Weights& w) {
    LinkSpec spec;
    spec.vocab_size = w.config.vocab_size;
    spec.k_per_segment = (plan.mode == Mode::link_reuse) ? plan.k : 0;
    spec.boundary_tokens_enabled = plan.boundaries;
    spec.validate();
    return spec;
}

void check_plan_vocab(const QueryPlan& plan, const LinkSpec& spec) {
    auto check = [&](int t) {
        if (t < 0 || t >= spec.reserved_floor()) {
            throw VocabError("plan token " + std::to_string(t) +
                             " collides with the reserved ID range (floor " +
                             std::to_string(spec.reserved_floor()) + ")");
        }
    };
    for (const auto& seg : plan.segments) {
        for (int t : seg) check(t);
    }
    for (int t : plan.question) check(t);
}

// Obtains one segment cache, preferring the store. Misses prefill (or
// compress) and persist; integrity failures count as warned misses.
SegmentCache fetch_segment(const QueryPlan& plan, const std::vector<int>& tokens,
                           SegmentStore& store, const Weights& w, RunResult& result) {
    const int chunk_size = 100;
    std::uint64_t id = 0;
    switch (plan.compression) {
        case Compression::none:
            id = segment_content_hash(w.hash, tokens);
            break;
        case Compression::anchor:
            id = segment_content_hash(w.hash, tokens, CacheKind::anchor, plan.comp_rate,
                                      chunk_size);
            break;
        case Compression::drop:
            id = segment_content_hash(w.hash, tokens, CacheKind::drop, plan.comp_rate, 0);
            break;
    }
    try {
        if (auto hit = store.get(id)) {
            ++result.cache_hits;
            return std::move(*hit);
        }
    } catch (const IntegrityError&) {
        ++result.integrity_warnings;
    }
    ++result.cache_misses;

    SegmentCache cache;
    const auto n = static_cast<std::uint64_t>(tokens.size());
    switch (plan.compression) {
        case Compression::none:
            cache = prefill_segment(tokens, w);
            result.prefill_flops += phase_flops(w.config, n, n);
            break;
        case Compression::anchor: {
            LinkSpec spec = spec_for(plan, w);
            cache = compress_anchor(tokens, plan.comp_rate, spec, w, chunk_size);
            const auto il = static_cast<std::uint64_t>(
                plan_chunks(static_cast<int>(n), chunk_size, plan.comp_rate).interleaved_len());
            result.prefill_flops += phase_flops(w.config, il, il);
            break;
        }
        case Compression::drop: {
            cache = compress_drop(tokens, plan.comp_rate, nullptr, w);
            const auto kept = static_cast<std::uint64_t>(cache.n_rows);
            // Scoring pass over the full segment plus the kept-token prefill.
            result.prefill_flops += phase_flops(w.config, n, n) + phase_flops(w.config, kept, kept);
            break;
        }
    }
    store.put(cache);
    return cache;
}

struct StagedRun {
    PromptLayout layout;
    AssembledContext ctx;
    Matrix link_logits;               // rows follow link positions, flat
    std::vector<int> link_positions;  // flat, ascending
    Matrix suffix_logits;             // rows follow suffix positions
    std::vector<int> suffix_positions;
    RunResult result;
};

StagedRun execute_staged(const QueryPlan& plan, SegmentStore& store, const Weights& w,
                         int offset_skew) {
    LinkSpec spec = spec_for(plan, w);
    check_plan_vocab(plan, spec);
    StagedRun run;
    RunResult& res = run.result;

    auto t0 = Clock::now();
    std::vector<SegmentCache> caches;
    caches.reserve(plan.segments.size());
    for (const auto& seg : plan.segments) {
        caches.push_back(fetch_segment(plan, seg, store, w, res));
    }
    res.phases.load_us = elapsed_us(t0);

    std::vector<int> spans;
    for (const SegmentCache& c : caches) spans.push_back(static_cast<int>(c.span()));
    run.layout = layout_from_spans(spans, plan.question, spec);
    if (plan.compression == Compression::none) {
        // Uncompressed layouts know their tokens; keep them for the oracle.
        run.layout.segment_tokens = plan.segments;
    }

    t0 = Clock::now();
    std::vector<const SegmentCache*> cache_ptrs;
    for (const SegmentCache& c : caches) cache_ptrs.push_back(&c);
    run.ctx = assemble(cache_ptrs, spec.k_per_segment, w.rope, plan.boundaries ? 1 : 0);
    if (offset_skew != 0) {
        // Rotation additivity turns an extra in-place rotation into storage
        // rotated at the wrong position. The skew varies per row so relative
        // positions are scrambled too, not just shifted.
        for (int l = 0; l < run.ctx.n_layers; ++l) {
            for (int p = 0; p < run.ctx.layout_end(); ++p) {
                if (run.ctx.is_filled(p)) {
                    rotate_heads_in_place(run.ctx.k_layers[l].row_span(p),
                                          offset_skew * (1 + p % 5), w.rope);
                }
            }
        }
    }
    res.phases.rerotate_us = elapsed_us(t0);

    for (std::size_t s = 0; s < run.layout.doc_offsets.size(); ++s) {
        if (run.ctx.segments[s].global_offset != run.layout.doc_offsets[s]) {
            throw PlanError("assembled offsets disagree with the prompt layout");
        }
    }

    std::uint64_t flops = res.prefill_flops;
    if (spec.k_per_segment > 0) {
        t0 = Clock::now();
        std::vector<int> link_tokens;
        for (std::size_t s = 0; s < run.layout.link_ids.size(); ++s) {
            for (std::size_t j = 0; j < run.layout.link_ids[s].size(); ++j) {
                link_tokens.push_back(run.layout.link_ids[s][j]);
                run.link_positions.push_back(run.layout.link_positions[s][j]);
            }
        }
        ForwardOutput out =
            extend_over_cache(run.ctx, link_tokens, run.link_positions, run.layout.rule, w);
        run.link_logits = std::move(out.logits);
        res.phases.link_us = elapsed_us(t0);
        flops += phase_flops(w.config, link_tokens.size(),
                             static_cast<std::uint64_t>(run.ctx.layout_end()));
    }

    t0 = Clock::now();
    const std::vector<int> suffix = run.layout.suffix_tokens();
    run.suffix_positions = run.layout.suffix_positions();
    ForwardOutput out =
        extend_over_cache(run.ctx, suffix, run.suffix_positions, run.layout.rule, w);
    run.suffix_logits = std::move(out.logits);
    res.phases.suffix_us = elapsed_us(t0);
    flops += phase_flops(w.config, suffix.size(),
                         static_cast<std::uint64_t>(run.layout.total_len));

    res.flops_total = flops;
    const int last = run.suffix_logits.rows - 1;
    res.first_logits.assign(run.suffix_logits.row(last),
                            run.suffix_logits.row(last) + run.suffix_logits.cols);
    res.decoded.push_back(argmax_lowest(res.first_logits));
    return run;
}

std::vector<int> concat_plan_tokens(const QueryPlan& plan) {
    std::vector<int> tokens;
    for (const auto& seg : plan.segments) tokens.insert(tokens.end(), seg.begin(), seg.end());
    tokens.insert(tokens.end(), plan.question.begin(), plan.question.end());
    return tokens;
}

}  // namespace

RunResult run_full(const QueryPlan& plan, const Weights& w) {
    plan.validate();
    const std::vector<int> tokens = concat_plan_tokens(plan);
    std::vector<int> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);

    RunResult res;
    const auto t0 = Clock::now();
    ForwardOutput out = forward_masked(tokens, positions, causal_mask(static_cast<int>(tokens.size())), w);
    res.phases.suffix_us = elapsed_us(t0);
    const auto n = static_cast<std::uint64_t>(tokens.size());
    res.flops_total = phase_flops(w.config, n, n);
    const int last = out.logits.rows - 1;
    res.first_logits.assign(out.logits.row(last), out.logits.row(last) + out.logits.cols);
    res.decoded.push_back(argmax_lowest(res.first_logits));
    return res;
}

RunResult run_reuse(const QueryPlan& plan, SegmentStore& store, const Weights& w) {
    plan.validate();
    if (plan.mode != Mode::plain_reuse && plan.mode != Mode::link_reuse) {
        throw PlanError("run_reuse expects plain_reuse or link_reuse mode");
    }
    return execute_staged(plan, store, w, 0).result;
}

// ---------------------------------------------------------------------------
// Blend
// ---------------------------------------------------------------------------

namespace {

RunResult run_blend_impl(const QueryPlan& plan, double ratio, SegmentStore& store,
                         const Weights& w, AssembledContext* ctx_out) {
    plan.validate();
    if (plan.mode != Mode::blend) throw PlanError("run_blend expects blend mode");
    if (!(ratio > 0.0 && ratio < 1.0)) throw PlanError("blend ratio must lie in (0, 1)");

    const ModelConfig& cfg = w.config;
    check_plan_vocab(plan, spec_for(plan, w));
    RunResult res;

    auto t0 = Clock::now();
    QueryPlan fetch_plan = plan;
    fetch_plan.compression = Compression::none;
    std::vector<SegmentCache> caches;
    for (const auto& seg : plan.segments) {
        caches.push_back(fetch_segment(fetch_plan, seg, store, w, res));
    }
    res.phases.load_us = elapsed_us(t0);

    t0 = Clock::now();
    std::vector<const SegmentCache*> cache_ptrs;
    for (const SegmentCache& c : caches) cache_ptrs.push_back(&c);
    AssembledContext ctx = assemble(cache_ptrs, 0, w.rope, 0);
    res.phases.rerotate_us = elapsed_us(t0);

    std::vector<int> context_tokens;
    for (const auto& seg : plan.segments) {
        context_tokens.insert(context_tokens.end(), seg.begin(), seg.end());
    }
    const int n = static_cast<int>(context_tokens.size());
    const int n_select = ceil_frac(ratio, n);
    const int head_dim = cfg.head_dim;
    const int group = cfg.n_heads / cfg.n_kv_heads;

    t0 = Clock::now();
    std::uint64_t flops = res.prefill_flops;
    const std::uint64_t h64 = static_cast<std::uint64_t>(cfg.hidden_dim());

    Matrix h(n, cfg.hidden_dim());
    for (int i = 0; i < n; ++i) {
        std::memcpy(h.row(i), w.tok_embedding.row(context_tokens[i]),
                    static_cast<std::size_t>(cfg.hidden_dim()) * 4);
    }

    std::vector<float> scratch(static_cast<std::size_t>(n));
    std::vector<int> selected(static_cast<std::size_t>(n));  // layer 1: everything
    std::iota(selected.begin(), selected.end(), 0);
    res.blend_recompute_counts.assign(static_cast<std::size_t>(cfg.n_layers), 0);
    res.blend_recompute_counts[0] = static_cast<std::uint64_t>(n);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        const bool full_layer = (l == 0);

        // Hidden states are valid for the propagated set only; gather them.
        Matrix x(static_cast<int>(selected.size()), cfg.hidden_dim());
        for (std::size_t i = 0; i < selected.size(); ++i) {
            rms_norm_row(h.row_span(selected[i]), lw.attn_norm, cfg.norm_eps,
                         x.row_span(static_cast<int>(i)));
        }
        Matrix v_fresh = matmul(x, lw.wv);

        std::vector<int> recompute;
        if (full_layer) {
            recompute = selected;
        } else {
            // Deviation of fresh V from the reused cache rows.
            std::vector<std::pair<float, int>> dev(selected.size());
            for (std::size_t i = 0; i < selected.size(); ++i) {
                const float* a = v_fresh.row(static_cast<int>(i));
                const float* b = ctx.v_layers[l].row(selected[i]);
                float d2 = 0.0f;
                for (int d = 0; d < cfg.kv_dim(); ++d) {
                    const float diff = a[d] - b[d];
                    d2 += diff * diff;
                }
                dev[i] = {d2, selected[i]};
            }
            std::stable_sort(dev.begin(), dev.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            const int take = std::min<int>(n_select, static_cast<int>(dev.size()));
            for (int i = 0; i < take; ++i) recompute.push_back(dev[i].second);
            std::sort(recompute.begin(), recompute.end());
            res.blend_recompute_counts[static_cast<std::size_t>(l)] =
                static_cast<std::uint64_t>(recompute.size());
            flops += 2 * h64 * h64 * selected.size();  // deviation projections
        }

        // Index of each recomputed position inside `selected`.
        std::vector<int> sel_index(static_cast<std::size_t>(n), -1);
        for (std::size_t i = 0; i < selected.size(); ++i) sel_index[selected[i]] = static_cast<int>(i);

        Matrix xr(static_cast<int>(recompute.size()), cfg.hidden_dim());
        for (std::size_t i = 0; i < recompute.size(); ++i) {
            std::memcpy(xr.row(static_cast<int>(i)), x.row(sel_index[recompute[i]]),
                        static_cast<std::size_t>(cfg.hidden_dim()) * 4);
        }
        Matrix q = matmul(xr, lw.wq);
        Matrix k = matmul(xr, lw.wk);

        for (std::size_t i = 0; i < recompute.size(); ++i) {
            const int pos = recompute[i];
            rotate_heads_in_place(q.row_span(static_cast<int>(i)), pos, w.rope);
            rotate_heads_in_place(k.row_span(static_cast<int>(i)), pos, w.rope);
            std::memcpy(ctx.k_layers[l].row(pos), k.row(static_cast<int>(i)),
                        static_cast<std::size_t>(cfg.kv_dim()) * 4);
            std::memcpy(ctx.v_layers[l].row(pos), v_fresh.row(sel_index[pos]),
                        static_cast<std::size_t>(cfg.kv_dim()) * 4);
        }

        Matrix attn(static_cast<int>(recompute.size()), cfg.hidden_dim());
        std::vector<int> cols;
        for (std::size_t i = 0; i < recompute.size(); ++i) {
            const int pos = recompute[i];
            cols.resize(static_cast<std::size_t>(pos) + 1);
            std::iota(cols.begin(), cols.end(), 0);
            for (int head = 0; head < cfg.n_heads; ++head) {
                const int q_off = head * head_dim;
                const int kv_off = (head / group) * head_dim;
                attend_row(q.row(static_cast<int>(i)) + q_off, ctx.k_layers[l], ctx.v_layers[l],
                           kv_off, head_dim, cols, scratch,
                           attn.row(static_cast<int>(i)) + q_off);
            }
        }
        Matrix attn_proj = matmul(attn, lw.wo);
        Matrix h_next(static_cast<int>(recompute.size()), cfg.hidden_dim());
        for (std::size_t i = 0; i < recompute.size(); ++i) {
            const float* base = h.row(recompute[i]);
            float* dst = h_next.row(static_cast<int>(i));
            const float* ap = attn_proj.row(static_cast<int>(i));
            for (int d = 0; d < cfg.hidden_dim(); ++d) dst[d] = base[d] + ap[d];
        }
        // Gated FFN on the recomputed rows.
        Matrix x2(static_cast<int>(recompute.size()), cfg.hidden_dim());
        for (int i = 0; i < x2.rows; ++i) {
            rms_norm_row(h_next.row_span(i), lw.ffn_norm, cfg.norm_eps, x2.row_span(i));
        }
        Matrix g = matmul(x2, lw.w_gate);
        Matrix u = matmul(x2, lw.w_up);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = silu(g.data[i]) * u.data[i];
        Matrix ffn = matmul(g, lw.w_down);
        for (std::size_t i = 0; i < recompute.size(); ++i) {
            float* dst = h.row(recompute[i]);
            const float* hn = h_next.row(static_cast<int>(i));
            const float* fp = ffn.row(static_cast<int>(i));
            for (int d = 0; d < cfg.hidden_dim(); ++d) dst[d] = hn[d] + fp[d];
        }

        const auto q_len = static_cast<std::uint64_t>(recompute.size());
        const std::uint64_t per_token = 2 * 4 * h64 * h64 +
                                        2 * 3 * h64 * static_cast<std::uint64_t>(cfg.ffn_dim);
        flops += q_len * per_token + 2 * 2 * q_len * static_cast<std::uint64_t>(n) * h64;

        selected = std::move(recompute);
    }
    res.blend_selected = selected;
    res.phases.rerotate_us += elapsed_us(t0);

    // Question tokens attend the blended context causally.
    t0 = Clock::now();
    std::vector<int> q_positions(plan.question.size());
    std::iota(q_positions.begin(), q_positions.end(), n);
    MaskRule causal_tail;
    ForwardOutput out = extend_over_cache(ctx, plan.question, q_positions, causal_tail, w);
    res.phases.suffix_us = elapsed_us(t0);
    flops += phase_flops(cfg, plan.question.size(),
                         static_cast<std::uint64_t>(n) + plan.question.size());

    res.flops_total = flops;
    const int last = out.logits.rows - 1;
    res.first_logits.assign(out.logits.row(last), out.logits.row(last) + out.logits.cols);
    res.decoded.push_back(argmax_lowest(res.first_logits));
    if (ctx_out != nullptr) *ctx_out = std::move(ctx);
    return res;
}

}  // namespace

RunResult run_blend(const QueryPlan& plan, double ratio, SegmentStore& store, const Weights& w) {
    return run_blend_impl(plan, ratio, store, w, nullptr);
}

// ---------------------------------------------------------------------------
// Dispatch + oracle
// ---------------------------------------------------------------------------

RunResult run_query(const QueryPlan& plan, SegmentStore& store, const Weights& w, int max_new) {
    plan.validate();
    if (max_new < 1) throw ValidationError("run_query: max_new must be >= 1");

    RunResult res;
    AssembledContext ctx;
    switch (plan.mode) {
        case Mode::full: {
            const std::vector<int> tokens = concat_plan_tokens(plan);
            std::vector<int> positions(tokens.size());
            std::iota(positions.begin(), positions.end(), 0);
            const auto t0 = Clock::now();
            ForwardOutput out = forward_masked(
                tokens, positions, causal_mask(static_cast<int>(tokens.size())), w);
            res.phases.suffix_us = elapsed_us(t0);
            const auto n = static_cast<std::uint64_t>(tokens.size());
            res.flops_total = phase_flops(w.config, n, n);
            const int last = out.logits.rows - 1;
            res.first_logits.assign(out.logits.row(last), out.logits.row(last) + out.logits.cols);
            res.decoded.push_back(argmax_lowest(res.first_logits));
            if (max_new > 1) ctx = context_from_output(out, positions, w);
            break;
        }
        case Mode::plain_reuse:
        case Mode::link_reuse: {
            StagedRun staged = execute_staged(plan, store, w, 0);
            res = staged.result;
            ctx = std::move(staged.ctx);
            break;
        }
        case Mode::blend: {
            res = run_blend_impl(plan, plan.blend_ratio, store, w, max_new > 1 ? &ctx : nullptr);
            break;
        }
    }

    // Continue greedily from the already-computed first token.
    MaskRule causal_tail;
    int next_token = res.decoded.front();
    int next_pos = ctx.layout_end();
    for (int step = 1; step < max_new; ++step) {
        const int tok[1] = {next_token};
        const int pos[1] = {next_pos};
        ForwardOutput out = extend_over_cache(ctx, tok, pos, causal_tail, w);
        ++next_pos;
        next_token = argmax_lowest(out.logits.row_span(0));
        res.decoded.push_back(next_token);
    }
    return res;
}

OracleReport oracle_compare(const QueryPlan& plan, const Weights& w,
                            const OracleOptions& options) {
    plan.validate();
    if (plan.mode != Mode::plain_reuse && plan.mode != Mode::link_reuse) {
        throw PlanError("oracle_compare expects plain_reuse or link_reuse mode");
    }
    if (plan.compression != Compression::none) {
        throw PlanError("oracle_compare covers uncompressed reuse only");
    }

    MemoryStore store(w.hash);
    StagedRun staged = execute_staged(plan, store, w, options.offset_skew);

    const PromptLayout& layout = staged.layout;
    const std::vector<int> tokens = layout.all_tokens();
    std::vector<int> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    ForwardOutput mono = forward_masked(tokens, positions, build_mask(layout.rule), w);

    OracleReport report;
    report.threshold = options.threshold;
    report.per_position.assign(static_cast<std::size_t>(layout.total_len), -1.0);

    auto compare_rows = [&](const Matrix& staged_logits, const std::vector<int>& rows) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const float* a = staged_logits.row(static_cast<int>(i));
            const float* b = mono.logits.row(rows[i]);
            double worst = 0.0;
            for (int c = 0; c < staged_logits.cols; ++c) {
                worst = std::max(worst, static_cast<double>(std::fabs(a[c] - b[c])));
            }
            report.per_position[static_cast<std::size_t>(rows[i])] = worst;
            if (worst > report.max_abs_diff) {
                report.max_abs_diff = worst;
                report.worst_position = rows[i];
            }
        }
    };
    if (staged.link_logits.rows > 0) compare_rows(staged.link_logits, staged.link_positions);
    compare_rows(staged.suffix_logits, staged.suffix_positions);

    report.pass = report.max_abs_diff <= report.threshold;
    return report;
}

}  // namespace kvlink
