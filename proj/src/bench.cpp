#include "kvlink/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

namespace kvlink {

namespace {

using Clock = std::chrono::steady_clock;

int token_ceiling(int vocab_size) {
    LinkSpec spec;
    spec.vocab_size = vocab_size;
    return spec.reserved_floor();
}

}  // namespace

std::string BenchMode::label() const {
    if (mode == Mode::link_reuse) return "link_reuse_k" + std::to_string(k);
    return mode_name(mode);
}

void BenchConfig::validate() const {
    if (n_docs < 1) throw ValidationError("bench: n_docs must be >= 1");
    if (doc_lengths.empty()) throw ValidationError("bench: no document lengths");
    for (int len : doc_lengths) {
        if (len < 1) throw ValidationError("bench: document length must be >= 1");
    }
    if (runs < 1) throw ValidationError("bench: runs must be >= 1");
    if (warmup < 0) throw ValidationError("bench: warmup must be >= 0");
    if (question_len < 1) throw ValidationError("bench: question_len must be >= 1");
    if (modes.empty()) throw ValidationError("bench: no modes to compare");
}

std::vector<std::vector<int>> make_bench_docs(int n_docs, int doc_len, int vocab_size,
                                              std::uint64_t seed) {
    const int ceiling = token_ceiling(vocab_size);
    std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(doc_len) << 20));
    std::vector<std::vector<int>> docs(static_cast<std::size_t>(n_docs));
    for (auto& doc : docs) {
        doc.resize(static_cast<std::size_t>(doc_len));
        for (int& t : doc) {
            t = 3 + static_cast<int>(rng() % static_cast<std::uint64_t>(ceiling - 3));
        }
    }
    return docs;
}

std::vector<int> make_bench_question(int question_len, int vocab_size, std::uint64_t seed) {
    const int ceiling = token_ceiling(vocab_size);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<int> q(static_cast<std::size_t>(question_len));
    for (int& t : q) t = 3 + static_cast<int>(rng() % static_cast<std::uint64_t>(ceiling - 3));
    return q;
}

void populate_bench_store(const BenchConfig& cfg, const Weights& w, SegmentStore& store) {
    cfg.validate();
    for (int len : cfg.doc_lengths) {
        for (const auto& doc : make_bench_docs(cfg.n_docs, len, w.config.vocab_size, cfg.seed)) {
            const std::uint64_t id = segment_content_hash(w.hash, doc);
            if (!store.contains(id)) store.put(prefill_segment(doc, w));
        }
    }
}

BenchReport run_bench(const BenchConfig& cfg, const Weights& w, SegmentStore& store) {
    cfg.validate();
    BenchReport report;

    for (int len : cfg.doc_lengths) {
        const auto docs = make_bench_docs(cfg.n_docs, len, w.config.vocab_size, cfg.seed);
        for (const auto& doc : docs) {
            if (!store.contains(segment_content_hash(w.hash, doc))) {
                throw ValidationError("bench store is missing a benchmark segment; "
                                      "populate it first");
            }
        }
        QueryPlan plan;
        plan.segments = docs;
        plan.question = make_bench_question(cfg.question_len, w.config.vocab_size, cfg.seed);
        const int context_len = cfg.n_docs * len;

        double full_mean = 0.0;
        for (const BenchMode& bm : cfg.modes) {
            plan.mode = bm.mode;
            plan.k = (bm.mode == Mode::link_reuse) ? bm.k : 0;

            auto execute = [&]() -> RunResult {
                switch (plan.mode) {
                    case Mode::full: return run_full(plan, w);
                    case Mode::blend: return run_blend(plan, plan.blend_ratio, store, w);
                    default: return run_reuse(plan, store, w);
                }
            };

            for (int i = 0; i < cfg.warmup; ++i) execute();

            BenchRow row;
            row.mode = bm.label();
            row.context_len = context_len;
            row.min_ttft_us = std::numeric_limits<double>::infinity();
            double sum = 0.0;
            RunResult last;
            for (int i = 0; i < cfg.runs; ++i) {
                const auto t0 = Clock::now();
                last = execute();
                const double us =
                    std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
                sum += us;
                row.min_ttft_us = std::min(row.min_ttft_us, us);
                row.max_ttft_us = std::max(row.max_ttft_us, us);
                row.load_us += last.phases.load_us;
                row.rerotate_us += last.phases.rerotate_us;
                row.link_us += last.phases.link_us;
                row.suffix_us += last.phases.suffix_us;
            }
            row.mean_ttft_us = sum / cfg.runs;
            row.load_us /= cfg.runs;
            row.rerotate_us /= cfg.runs;
            row.link_us /= cfg.runs;
            row.suffix_us /= cfg.runs;
            row.flops = last.flops_total;
            if (bm.mode == Mode::full) {
                full_mean = row.mean_ttft_us;
                row.reduction_pct = 0.0;
            } else if (full_mean > 0.0) {
                row.reduction_pct = (1.0 - row.mean_ttft_us / full_mean) * 100.0;
            }
            report.rows.push_back(row);
        }
    }
    return report;
}

std::string BenchReport::to_csv() const {
    std::ostringstream out;
    out << "mode,context_len,mean_ttft_us,min_ttft_us,max_ttft_us,load_us,rerotate_us,link_us,"
           "suffix_us,flops,reduction_pct\n";
    out << std::fixed << std::setprecision(2);
    for (const BenchRow& r : rows) {
        out << r.mode << ',' << r.context_len << ',' << r.mean_ttft_us << ',' << r.min_ttft_us
            << ',' << r.max_ttft_us << ',' << r.load_us << ',' << r.rerotate_us << ','
            << r.link_us << ',' << r.suffix_us << ',' << r.flops << ',' << r.reduction_pct
            << '\n';
    }
    return out.str();
}

void BenchReport::print_table(std::ostream& out) const {
    out << std::left << std::setw(16) << "mode" << std::right << std::setw(9) << "ctx"
        << std::setw(14) << "mean_us" << std::setw(14) << "min_us" << std::setw(14) << "max_us"
        << std::setw(16) << "flops" << std::setw(12) << "reduction" << '\n';
    std::ostringstream line;
    for (const BenchRow& r : rows) {
        out << std::left << std::setw(16) << r.mode << std::right << std::setw(9) << r.context_len
            << std::setw(14) << std::fixed << std::setprecision(1) << r.mean_ttft_us
            << std::setw(14) << r.min_ttft_us << std::setw(14) << r.max_ttft_us << std::setw(16)
            << r.flops << std::setw(11) << std::setprecision(1) << r.reduction_pct << "%\n";
    }
}

std::uint64_t flops_for_plan(const QueryPlan& plan, const ModelConfig& config) {
    plan.validate();
    std::uint64_t context = 0;
    for (const auto& seg : plan.segments) context += seg.size();
    const std::uint64_t q = plan.question.size();

    if (plan.mode == Mode::full) {
        return phase_flops(config, context + q, context + q);
    }
    if (plan.mode == Mode::blend) {
        const auto n = context;
        const auto h = static_cast<std::uint64_t>(config.hidden_dim());
        const auto ffn = static_cast<std::uint64_t>(config.ffn_dim);
        const std::uint64_t per_token = 2 * 4 * h * h + 2 * 3 * h * ffn;
        const auto sel = static_cast<std::uint64_t>(
            std::ceil(plan.blend_ratio * static_cast<double>(n)));
        std::uint64_t flops = n * per_token + 4 * n * n * h;  // first layer, everything
        for (int l = 1; l < config.n_layers; ++l) {
            const std::uint64_t cand = (l == 1) ? n : sel;  // deviation candidates
            flops += 2 * h * h * cand;
            flops += sel * per_token + 4 * sel * n * h;
        }
        return flops + phase_flops(config, q, n + q);
    }

    // Reuse paths: link pass + suffix pass over the assembled layout.
    const int k = (plan.mode == Mode::link_reuse) ? plan.k : 0;
    const std::uint64_t base = plan.boundaries ? 1 : 0;
    std::uint64_t span_sum = 0;
    for (const auto& seg : plan.segments) {
        const int len = static_cast<int>(seg.size());
        switch (plan.compression) {
            case Compression::none:
                span_sum += static_cast<std::uint64_t>(len);
                break;
            case Compression::anchor:
                span_sum += static_cast<std::uint64_t>(
                    plan_chunks(len, 100, plan.comp_rate).interleaved_len());
                break;
            case Compression::drop:
                span_sum += static_cast<std::uint64_t>(
                    std::ceil((1.0 - plan.comp_rate) * static_cast<double>(len)));
                break;
        }
    }
    const std::uint64_t n_links = static_cast<std::uint64_t>(k) * plan.segments.size();
    const std::uint64_t layout_after_links = base + span_sum + n_links;
    const std::uint64_t suffix_len = q + (plan.boundaries ? 2 : 0);
    const std::uint64_t total_len = layout_after_links + (plan.boundaries ? 1 : 0) + q;

    std::uint64_t flops = 0;
    if (n_links > 0) flops += phase_flops(config, n_links, layout_after_links);
    flops += phase_flops(config, suffix_len, total_len);
    return flops;
}

}  // namespace kvlink
