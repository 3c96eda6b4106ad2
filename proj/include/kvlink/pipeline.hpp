#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kvlink/compressor.hpp"
#include "kvlink/kvcache.hpp"
#include "kvlink/linker.hpp"
#include "kvlink/model.hpp"

namespace kvlink {

enum class Mode : std::uint8_t { full, plain_reuse, link_reuse, blend };
enum class Compression : std::uint8_t { none, anchor, drop };

const char* mode_name(Mode mode);

// One query: retrieved segments (inline token IDs), a question, and the
// execution mode. Parsed from the plain-text plan format:
//   mode=link_reuse        # full | plain_reuse | link_reuse | blend
//   k=1                    # link tokens per segment
//   ratio=0.18             # blend recomputation ratio
//   compression=none       # none | anchor | drop
//   rate=0.75              # fraction of cache removed
//   boundary=0             # KV-START/KV-END on or off
//   segment=1 2 3          # one line per segment; @path reads IDs from file
//   question=7 8
struct QueryPlan {
    Mode mode = Mode::full;
    int k = 0;
    double blend_ratio = 0.18;
    Compression compression = Compression::none;
    double comp_rate = 0.5;
    bool boundaries = false;
    std::vector<std::vector<int>> segments;
    std::vector<int> question;
    // Whether the plan file spelled these out; CLI-level defaults only apply
    // when it did not.
    bool k_explicit = false;
    bool boundaries_explicit = false;

    void validate() const;
};

QueryPlan parse_plan_text(const std::string& text, const std::filesystem::path& base_dir = {});
QueryPlan parse_plan_file(const std::filesystem::path& path);

struct PhaseTimes {
    double load_us = 0;
    double rerotate_us = 0;
    double link_us = 0;
    double suffix_us = 0;
};

struct RunResult {
    std::vector<float> first_logits;  // next-token distribution at the first generated position
    std::vector<int> decoded;
    std::uint64_t flops_total = 0;
    std::uint64_t prefill_flops = 0;  // spent on store misses only
    std::uint64_t cache_hits = 0;
    std::uint64_t cache_misses = 0;
    std::uint64_t integrity_warnings = 0;
    PhaseTimes phases;
    std::vector<std::uint64_t> blend_recompute_counts;  // per layer, blend mode only
    std::vector<int> blend_selected;  // positions recomputed at the last layer
};

// Single causal prefill over all segment tokens + question; the no-reuse
// upper-bound execution shape. Boundary/link settings are ignored.
RunResult run_full(const QueryPlan& plan, const Weights& w);

// Per segment: store hit loads, miss prefills (and compresses, if asked) and
// persists. Then assemble -> rerotate -> link pass (link_reuse with k > 0) ->
// causal suffix pass over boundaries + question.
RunResult run_reuse(const QueryPlan& plan, SegmentStore& store, const Weights& w);

// CacheBlend-style selective recomputation ("blend-lite"): layer 1 is fully
// recomputed for all context tokens; every later layer recomputes K/V for the
// ceil(ratio * L) tokens with the largest L2 deviation between reused V and
// the V freshly projected from the propagated hidden states. Ties pick lower
// positions. Link tokens and boundaries do not participate.
RunResult run_blend(const QueryPlan& plan, double ratio, SegmentStore& store, const Weights& w);

// Mode dispatch plus optional greedy decoding of max_new tokens.
RunResult run_query(const QueryPlan& plan, SegmentStore& store, const Weights& w, int max_new = 1);

struct OracleReport {
    double max_abs_diff = 0.0;
    int worst_position = -1;
    bool pass = false;
    double threshold = 1e-4;
    std::vector<double> per_position;  // indexed by global position, -1 where not compared
};

struct OracleOptions {
    // Extra rotation applied to every assembled segment row; a nonzero skew
    // deliberately corrupts the positional re-encoding (negative-control hook).
    int offset_skew = 0;
    double threshold = 1e-4;
};

// Runs the staged reuse path against the monolithic custom-mask pass on the
// same layout and reports per-position max-abs logit differences over the
// rows the staged path computes (link tokens, boundaries, question).
OracleReport oracle_compare(const QueryPlan& plan, const Weights& w,
                            const OracleOptions& options = {});

}  // namespace kvlink
