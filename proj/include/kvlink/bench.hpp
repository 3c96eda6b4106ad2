#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "kvlink/pipeline.hpp"

namespace kvlink {

struct BenchMode {
    Mode mode = Mode::full;
    int k = 0;
    std::string label() const;
};

// TTFT protocol: fixed document count, sweep document lengths, timed runs
// after warmup, cache load and rerotation included in the measurement.
struct BenchConfig {
    int n_docs = 10;
    std::vector<int> doc_lengths{100, 200, 300, 400, 500};
    int runs = 100;
    int warmup = 10;
    int question_len = 20;
    std::vector<BenchMode> modes{{Mode::full, 0}, {Mode::link_reuse, 1}, {Mode::link_reuse, 5}};
    std::uint64_t seed = 20240601;

    void validate() const;
};

struct BenchRow {
    std::string mode;
    int context_len = 0;
    double mean_ttft_us = 0;
    double min_ttft_us = 0;
    double max_ttft_us = 0;
    double load_us = 0;  // phase means
    double rerotate_us = 0;
    double link_us = 0;
    double suffix_us = 0;
    std::uint64_t flops = 0;
    double reduction_pct = 0;  // 1 - ttft/ttft_full, in percent
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::string to_csv() const;
    void print_table(std::ostream& out) const;
};

// Deterministic benchmark corpus: token IDs stay below the reserved range.
std::vector<std::vector<int>> make_bench_docs(int n_docs, int doc_len, int vocab_size,
                                              std::uint64_t seed);
std::vector<int> make_bench_question(int question_len, int vocab_size, std::uint64_t seed);

// Prefills every benchmark document into the store.
void populate_bench_store(const BenchConfig& cfg, const Weights& w, SegmentStore& store);

// Runs the sweep; the store must already hold every document cache.
BenchReport run_bench(const BenchConfig& cfg, const Weights& w, SegmentStore& store);

// Steady-state (all cache hits) FLOP count of a plan, matching what the
// corresponding run_* reports.
std::uint64_t flops_for_plan(const QueryPlan& plan, const ModelConfig& config);

}  // namespace kvlink
