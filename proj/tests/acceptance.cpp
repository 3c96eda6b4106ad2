// Acceptance suite: runs every gate criterion end to end and prints one
// PASS/FAIL line per criterion. Exits nonzero if any criterion fails.
//
// The TTFT sweep (criterion 9) executes the full measurement protocol
// (10 docs, lengths 100..500, 100 runs + 10 warmup per point) and dominates
// the runtime; expect roughly 10-20 minutes on a laptop-class core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "kvlink/bench.hpp"
#include "kvlink/compressor.hpp"
#include "kvlink/model.hpp"
#include "kvlink/pipeline.hpp"
#include "kvlink/util.hpp"

using namespace kvlink;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const char* name, bool pass, const std::string& detail = "") {
    std::printf("[%s] %2d: %s%s%s\n", pass ? "PASS" : "FAIL", criterion, name,
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::vector<int> random_tokens(int n, std::mt19937& rng, int ceiling) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int& v : t) v = 3 + static_cast<int>(rng() % static_cast<unsigned>(ceiling - 3));
    return t;
}

double max_abs(std::span<const float> a, std::span<const float> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::fabs(a[i] - b[i])));
    }
    return worst;
}

// --- 1. staged-equivalence oracle campaign --------------------------------

void criterion_1(const Weights& w) {
    const auto start = std::chrono::steady_clock::now();
    std::mt19937 rng(2025);
    LinkSpec vocab_probe;
    vocab_probe.vocab_size = w.config.vocab_size;
    const int ceiling = vocab_probe.reserved_floor();
    const int ks[3] = {0, 1, 5};

    double worst = 0.0;
    int failures = 0;
    for (int trial = 0; trial < 100; ++trial) {
        QueryPlan plan;
        const int n_segs = 1 + static_cast<int>(rng() % 6);
        for (int s = 0; s < n_segs; ++s) {
            plan.segments.push_back(
                random_tokens(1 + static_cast<int>(rng() % 8), rng, ceiling));
        }
        plan.question = random_tokens(1 + static_cast<int>(rng() % 4), rng, ceiling);
        const int k = ks[trial % 3];
        plan.mode = (k == 0) ? Mode::plain_reuse : Mode::link_reuse;
        plan.k = k;
        plan.boundaries = (trial % 2) == 1;

        OracleReport r = oracle_compare(plan, w);
        worst = std::max(worst, r.max_abs_diff);
        if (!r.pass) ++failures;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ostringstream detail;
    detail << "100 plans, worst diff " << worst << ", " << secs << " s";
    report(1, "staged reuse equals the monolithic custom-mask oracle (<= 1e-4)",
           failures == 0 && worst <= 1e-4 && secs < 30.0, detail.str());
}

// --- 2. golden mask ---------------------------------------------------------

void criterion_2(const Weights& w) {
    LinkSpec spec;
    spec.vocab_size = w.config.vocab_size;
    spec.k_per_segment = 1;
    PromptLayout p = assemble_prompt({{10, 11}, {12, 13}, {14}}, {20, 21}, spec);
    MaskMatrix m = build_mask(p.rule);

    // Transcription of the figure: docs {0,1},{3,4},{6}, links {2},{5},{7},
    // suffix {8,9}. link1 sees doc_a; link2 sees doc_a, doc_b, link1, itself;
    // link3 sees everything before it; suffix rows are causal.
    const std::vector<std::vector<int>> expect = {
        {0},
        {0, 1},
        {0, 1, 2},
        {3},
        {3, 4},
        {0, 1, 2, 3, 4, 5},
        {6},
        {0, 1, 2, 3, 4, 5, 6, 7},
        {0, 1, 2, 3, 4, 5, 6, 7, 8},
        {0, 1, 2, 3, 4, 5, 6, 7, 8, 9},
    };
    bool ok = (m.side == 10);
    for (int r = 0; ok && r < 10; ++r) {
        std::vector<int> cols;
        for (int c = 0; c < 10; ++c) {
            if (m.at(r, c)) cols.push_back(c);
        }
        ok = (cols == expect[static_cast<std::size_t>(r)]);
    }
    report(2, "golden mask for docs {2,2,1}, K=1, two suffix tokens", ok);
}

// --- 3. layer-1 exactness ---------------------------------------------------

void criterion_3(const Weights& w) {
    std::mt19937 rng(33);
    LinkSpec vocab_probe;
    vocab_probe.vocab_size = w.config.vocab_size;
    const int ceiling = vocab_probe.reserved_floor();

    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int len = 1 + static_cast<int>(rng() % 12);
        const int offset = static_cast<int>(rng() % 64);
        auto seg = random_tokens(len, rng, ceiling);
        SegmentCache cache = prefill_segment(seg, w);

        auto filler = random_tokens(offset, rng, ceiling);
        std::vector<int> all(filler);
        all.insert(all.end(), seg.begin(), seg.end());
        std::vector<int> positions(all.size());
        std::iota(positions.begin(), positions.end(), 0);
        ForwardOutput mono =
            forward_masked(all, positions, causal_mask(static_cast<int>(all.size())), w);

        std::vector<int> offsets(static_cast<std::size_t>(len));
        std::iota(offsets.begin(), offsets.end(), 0);
        Matrix rerotated = rerotate_cache_layer(cache.k_layers[0], offset, offsets, w.rope);
        for (int r = 0; r < len; ++r) {
            std::vector<float> expect_k(mono.k_cache[0].row(offset + r),
                                        mono.k_cache[0].row(offset + r) + w.config.kv_dim());
            rotate_heads_in_place(expect_k, offset + r, w.rope);
            worst = std::max(worst, max_abs(rerotated.row_span(r), expect_k));
            worst = std::max(worst, max_abs(cache.v_layers[0].row_span(r),
                                            mono.v_cache[0].row_span(offset + r)));
        }
    }
    std::ostringstream detail;
    detail << "50 segments, worst diff " << worst;
    report(3, "rerotated layer-1 K/V equals the monolithic pass (<= 1e-6)", worst <= 1e-6,
           detail.str());
}

// --- 4. rotation algebra ----------------------------------------------------

void criterion_4(const Weights& w) {
    std::mt19937 rng(44);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    const RopeTables& t = w.rope;
    const int hd = w.config.head_dim;

    double worst_identity = 0.0, worst_norm = 0.0, worst_add = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> v(static_cast<std::size_t>(hd));
        for (float& x : v) x = dist(rng);
        const int a = static_cast<int>(rng() % 2048);
        const int b = static_cast<int>(rng() % 2048);

        auto id = rotate(v, 0, t);
        worst_identity = std::max(worst_identity, max_abs(id, v));

        auto rotated = rotate(v, a, t);
        double n0 = 0.0, n1 = 0.0;
        for (int i = 0; i < hd; ++i) {
            n0 += static_cast<double>(v[i]) * v[i];
            n1 += static_cast<double>(rotated[i]) * rotated[i];
        }
        worst_norm = std::max(worst_norm, std::fabs(std::sqrt(n1) - std::sqrt(n0)));

        auto direct = rotate(v, a + b, t);
        auto composed = rotate(rotate(v, a, t), b, t);
        worst_add = std::max(worst_add, max_abs(direct, composed));
    }
    std::ostringstream detail;
    detail << "identity " << worst_identity << ", norm " << worst_norm << ", additivity "
           << worst_add;
    report(4, "rotation algebra: identity, norm preservation, additivity (<= 1e-6)",
           worst_identity == 0.0 && worst_norm <= 1e-6 && worst_add <= 1e-6, detail.str());
}

// --- 5. cache-size formula ---------------------------------------------------

void criterion_5() {
    ModelConfig llama8b;
    llama8b.n_layers = 32;
    llama8b.n_heads = 32;
    llama8b.n_kv_heads = 8;
    llama8b.head_dim = 128;
    llama8b.ffn_dim = 14336;
    llama8b.vocab_size = 128256;
    const std::uint64_t bytes = cache_size_bytes(llama8b, 1000, 2);
    std::ostringstream detail;
    detail << bytes << " bytes";
    report(5, "cache-size formula: 32 layers, kv width 1024, 1000 tokens, 2-byte dtype", bytes == 131072000ull,
           detail.str());
}

// --- 6. serialization + store policy ----------------------------------------

void criterion_6(const Weights& w) {
    bool ok = true;
    std::string detail;

    const fs::path dir =
        fs::temp_directory_path() / ("kvlink_acc_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    std::mt19937 rng(66);
    LinkSpec vocab_probe;
    vocab_probe.vocab_size = w.config.vocab_size;
    const int ceiling = vocab_probe.reserved_floor();

    // KVLC round trip, bit exact.
    SegmentCache cache = prefill_segment(random_tokens(9, rng, ceiling), w);
    SegmentCache back = parse_cache(serialize_cache(cache));
    if (!cache_payload_equal(cache, back)) {
        ok = false;
        detail = "KVLC round trip differs";
    }

    // KVLW round trip, bit exact.
    const fs::path wfile = dir / "m.kvlw";
    save_weights(w, wfile);
    Weights back_w = load_weights(wfile);
    if (back_w.hash != w.hash) {
        ok = false;
        detail = "KVLW round trip changed the model hash";
    }

    // CRC corruption detected.
    auto bytes = serialize_cache(cache);
    bytes[bytes.size() / 3] ^= 0x20;
    try {
        parse_cache(bytes);
        ok = false;
        detail = "corrupted cache parsed silently";
    } catch (const IntegrityError&) {
    }

    // 100-operation LRU trace against a reference simulation.
    auto make_small = [&](std::uint64_t id) {
        SegmentCache c = prefill_segment(random_tokens(4, rng, ceiling), w);
        c.segment_id = id;
        return c;
    };
    const std::uint64_t unit = serialized_cache_size(make_small(1));
    CacheStore store(dir / "store", 3 * unit + unit / 2, EvictionPolicy::LRU, w.hash);
    struct SimEntry {
        std::uint64_t last_use;
    };
    std::map<std::uint64_t, SimEntry> sim;
    std::uint64_t tick = 0;
    for (int op = 0; op < 100 && ok; ++op) {
        const std::uint64_t id = 1 + rng() % 8;
        if (rng() % 2 == 0) {
            store.put(make_small(id));
            sim[id] = {++tick};
            while (sim.size() > 3) {  // capacity fits exactly 3 unit caches
                auto victim = sim.begin();
                for (auto it = sim.begin(); it != sim.end(); ++it) {
                    if (it->first == id) continue;
                    if (victim->first == id || it->second.last_use < victim->second.last_use) {
                        victim = it;
                    }
                }
                sim.erase(victim);
            }
        } else {
            auto hit = store.get(id);
            auto it = sim.find(id);
            if (hit.has_value() != (it != sim.end())) {
                ok = false;
                detail = "hit/miss disagreement at op " + std::to_string(op);
            }
            if (it != sim.end()) it->second.last_use = ++tick;
        }
        std::vector<std::uint64_t> sim_ids;
        for (auto& [sid, e] : sim) sim_ids.push_back(sid);
        if (store.resident_ids() != sim_ids) {
            ok = false;
            detail = "resident set diverged at op " + std::to_string(op);
        }
    }
    fs::remove_all(dir);
    report(6, "serialization round trips, CRC detection, LRU trace vs simulation", ok, detail);
}

// --- 7. blend-lite -----------------------------------------------------------

void criterion_7(const Weights& w) {
    std::mt19937 rng(77);
    LinkSpec vocab_probe;
    vocab_probe.vocab_size = w.config.vocab_size;
    const int ceiling = vocab_probe.reserved_floor();

    QueryPlan plan;
    plan.mode = Mode::blend;
    plan.segments = {random_tokens(14, rng, ceiling), random_tokens(9, rng, ceiling),
                     random_tokens(11, rng, ceiling)};
    plan.question = random_tokens(4, rng, ceiling);

    MemoryStore store(w.hash);
    plan.blend_ratio = 0.999;
    RunResult near_full = run_blend(plan, plan.blend_ratio, store, w);
    QueryPlan full = plan;
    full.mode = Mode::full;
    RunResult ref = run_full(full, w);
    const double diff = max_abs(near_full.first_logits, ref.first_logits);

    plan.blend_ratio = 0.18;
    RunResult blended = run_blend(plan, 0.18, store, w);
    const int L = 34;
    const auto expect = static_cast<std::uint64_t>(std::ceil(0.18 * L));
    bool counts_ok = blended.blend_recompute_counts.size() ==
                     static_cast<std::size_t>(w.config.n_layers);
    for (std::size_t l = 1; counts_ok && l < blended.blend_recompute_counts.size(); ++l) {
        counts_ok = (blended.blend_recompute_counts[l] == expect);
    }
    std::ostringstream detail;
    detail << "ratio->1 diff " << diff << ", per-layer recompute " << expect << " of " << L;
    report(7, "blend-lite: ratio->1 converges to full; 18% recompute counter exact",
           diff <= 1e-5 && counts_ok, detail.str());
}

// --- 8. compression arithmetic ----------------------------------------------

void criterion_8(const Weights& w) {
    std::mt19937 rng(88);
    LinkSpec spec;
    spec.vocab_size = w.config.vocab_size;
    const int ceiling = spec.reserved_floor();
    bool ok = true;
    std::string detail;

    SegmentCache anchor_cache =
        compress_anchor(random_tokens(1000, rng, ceiling), 0.75, spec, w);
    if (anchor_cache.n_rows != 250) {
        ok = false;
        detail = "anchor rows " + std::to_string(anchor_cache.n_rows);
    }

    // Predicate oracle over 50 random plans.
    for (int trial = 0; trial < 50 && ok; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 60);
        const int s = 1 + static_cast<int>(rng() % 12);
        const double rate = 0.1 + 0.8 * (static_cast<double>(rng() % 1000) / 1000.0);
        ChunkPlan plan = plan_chunks(n, s, rate);
        MaskMatrix m = anchor_mask(plan);

        std::vector<int> chunk_of;
        std::vector<bool> is_anchor;
        for (std::size_t c = 0; c < plan.chunks.size(); ++c) {
            for (int t = plan.chunks[c].start; t < plan.chunks[c].end; ++t) {
                chunk_of.push_back(static_cast<int>(c));
                is_anchor.push_back(false);
            }
            for (int a = 0; a < plan.chunks[c].n_anchors; ++a) {
                chunk_of.push_back(static_cast<int>(c));
                is_anchor.push_back(true);
            }
        }
        for (int r = 0; ok && r < m.side; ++r) {
            for (int c = 0; ok && c < m.side; ++c) {
                bool expect;
                if (c > r) {
                    expect = false;
                } else if (!is_anchor[static_cast<std::size_t>(r)]) {
                    expect = !is_anchor[static_cast<std::size_t>(c)] &&
                             chunk_of[static_cast<std::size_t>(c)] ==
                                 chunk_of[static_cast<std::size_t>(r)];
                } else if (chunk_of[static_cast<std::size_t>(c)] ==
                           chunk_of[static_cast<std::size_t>(r)]) {
                    expect = true;
                } else {
                    expect = is_anchor[static_cast<std::size_t>(c)];
                }
                if (m.at(r, c) != expect) {
                    ok = false;
                    detail = "anchor mask mismatch, trial " + std::to_string(trial);
                }
            }
        }
    }

    // Drop path: kept cache equals a direct prefill bitwise.
    if (ok) {
        auto tokens = random_tokens(16, rng, ceiling);
        SegmentCache dropped = compress_drop(tokens, 0.5, nullptr, w);
        std::vector<int> kept;
        for (std::uint32_t i : dropped.row_to_pos) kept.push_back(tokens[i]);
        SegmentCache direct = prefill_segment(kept, w);
        for (int l = 0; ok && l < w.config.n_layers; ++l) {
            if (std::memcmp(dropped.k_layers[l].data.data(), direct.k_layers[l].data.data(),
                            direct.k_layers[l].data.size() * 4) != 0 ||
                std::memcmp(dropped.v_layers[l].data.data(), direct.v_layers[l].data.data(),
                            direct.v_layers[l].data.size() * 4) != 0) {
                ok = false;
                detail = "drop cache differs from direct prefill";
            }
        }
    }
    report(8, "compression: 250 anchor rows, mask predicate oracle, drop bitwise", ok, detail);
}

// --- 9. efficiency trend ------------------------------------------------------

void criterion_9(const Weights& w) {
    BenchConfig cfg;  // the protocol defaults: 10 docs, 100..500, 100 runs, 10 warmup
    cfg.modes = {{Mode::full, 0}, {Mode::link_reuse, 5}};
    MemoryStore store(w.hash);
    populate_bench_store(cfg, w, store);
    BenchReport rep = run_bench(cfg, w, store);

    bool faster_everywhere = true;
    bool monotone = true;
    double prev_reduction = -1.0;
    double reduction_at_5000 = 0.0;
    std::uint64_t flops_full_5000 = 0, flops_reuse_5000 = 0;
    std::map<int, double> full_means;
    for (const BenchRow& row : rep.rows) {
        if (row.mode == "full") full_means[row.context_len] = row.mean_ttft_us;
    }
    for (const BenchRow& row : rep.rows) {
        if (row.mode != "full") {
            if (row.mean_ttft_us >= full_means[row.context_len]) faster_everywhere = false;
            if (row.reduction_pct < prev_reduction) monotone = false;
            prev_reduction = row.reduction_pct;
            if (row.context_len == 5000) {
                reduction_at_5000 = row.reduction_pct;
                flops_reuse_5000 = row.flops;
            }
        } else if (row.context_len == 5000) {
            flops_full_5000 = row.flops;
        }
    }
    const double flop_ratio =
        static_cast<double>(flops_reuse_5000) / static_cast<double>(flops_full_5000);

    std::ostringstream detail;
    detail << "reduction@5000 " << reduction_at_5000 << "%, flop ratio " << flop_ratio;
    report(9,
           "TTFT: reuse < full at every point, >=50% at 5000, monotone, FLOP ratio <= 10%",
           faster_everywhere && monotone && reduction_at_5000 >= 50.0 && flop_ratio <= 0.10,
           detail.str());

    std::printf("\n");
    rep.print_table(std::cout);
    std::printf("\n");
}

// --- 10. idempotent reuse ------------------------------------------------------

void criterion_10(const Weights& w) {
    std::mt19937 rng(110);
    LinkSpec vocab_probe;
    vocab_probe.vocab_size = w.config.vocab_size;
    const int ceiling = vocab_probe.reserved_floor();

    QueryPlan plan;
    plan.mode = Mode::link_reuse;
    plan.k = 5;
    plan.segments = {random_tokens(20, rng, ceiling), random_tokens(15, rng, ceiling),
                     random_tokens(25, rng, ceiling)};
    plan.question = random_tokens(5, rng, ceiling);

    MemoryStore store(w.hash);
    RunResult first = run_reuse(plan, store, w);
    RunResult second = run_reuse(plan, store, w);
    const bool bitwise = (first.first_logits == second.first_logits);
    std::ostringstream detail;
    detail << "second-run prefill FLOPs " << second.prefill_flops << ", hits "
           << second.cache_hits;
    report(10, "identical plans: bitwise-equal logits, zero second-run prefill FLOPs",
           bitwise && second.prefill_flops == 0 &&
               second.cache_misses == 0 && first.prefill_flops > 0,
           detail.str());
}

}  // namespace

int main() {
    const Weights w = init_random(ModelConfig{}, 42);  // desk reference model
    std::printf("desk model hash %016llx\n", static_cast<unsigned long long>(w.hash));

    criterion_1(w);
    criterion_2(w);
    criterion_3(w);
    criterion_4(w);
    criterion_5();
    criterion_6(w);
    criterion_7(w);
    criterion_8(w);
    criterion_9(w);
    criterion_10(w);

    if (g_failures == 0) {
        std::printf("all acceptance criteria passed\n");
        return 0;
    }
    std::printf("%d acceptance criteria FAILED\n", g_failures);
    return 1;
}
