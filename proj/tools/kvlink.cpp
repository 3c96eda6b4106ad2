// kvlink: encode segments into position-free KV caches, run reuse queries
// against a cache store, verify them against the monolithic oracle, and
// benchmark TTFT across execution modes.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "kvlink/bench.hpp"
#include "kvlink/compressor.hpp"
#include "kvlink/model.hpp"
#include "kvlink/pipeline.hpp"
#include "kvlink/util.hpp"

namespace {

using namespace kvlink;

constexpr double kVerifyThreshold = 1e-4;

int checked_int(const std::string& text, const char* what);

double checked_double(const std::string& text, const char* what) {
    try {
        return std::stod(text);
    } catch (const std::exception&) {
        throw ValidationError(std::string("bad number for ") + what + ": " + text);
    }
}

ModelConfig parse_config_file(const std::string& path) {
    ModelConfig cfg;
    const auto bytes = read_file_bytes(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream kv(line);
        std::string key;
        if (!std::getline(kv, key, '=')) continue;
        key.erase(0, key.find_first_not_of(" \t"));
        key.erase(key.find_last_not_of(" \t") + 1);
        if (key.empty()) continue;
        std::string value;
        std::getline(kv, value);
        if (key == "n_layers") cfg.n_layers = checked_int(value, "n_layers");
        else if (key == "n_heads") cfg.n_heads = checked_int(value, "n_heads");
        else if (key == "n_kv_heads") cfg.n_kv_heads = checked_int(value, "n_kv_heads");
        else if (key == "head_dim") cfg.head_dim = checked_int(value, "head_dim");
        else if (key == "ffn_dim") cfg.ffn_dim = checked_int(value, "ffn_dim");
        else if (key == "vocab_size") cfg.vocab_size = checked_int(value, "vocab_size");
        else if (key == "max_pos") cfg.max_pos = checked_int(value, "max_pos");
        else if (key == "theta_base") cfg.theta_base = checked_double(value, "theta_base");
        else if (key == "norm_eps") cfg.norm_eps = checked_double(value, "norm_eps");
        else throw ConfigError("unknown config key: " + key);
    }
    return cfg;
}

std::vector<int> parse_tokens_arg(const std::string& arg) {
    std::string text = arg;
    if (!arg.empty() && arg[0] == '@') {
        const auto bytes = read_file_bytes(arg.substr(1));
        text.assign(bytes.begin(), bytes.end());
    }
    std::vector<int> tokens;
    std::istringstream in(text);
    long long v;
    while (in >> v) tokens.push_back(static_cast<int>(v));
    if (!in.eof()) throw ValidationError("token list is not whitespace-separated integers");
    return tokens;
}

int checked_int(const std::string& text, const char* what) {
    try {
        return std::stoi(text);
    } catch (const std::exception&) {
        throw ValidationError(std::string("bad integer for ") + what + ": " + text);
    }
}

std::vector<int> parse_lengths(const std::string& arg) {
    std::vector<int> lengths;
    const auto dots = arg.find("..");
    if (dots != std::string::npos) {
        const int lo = checked_int(arg.substr(0, dots), "--lengths");
        const int hi = checked_int(arg.substr(dots + 2), "--lengths");
        for (int v = lo; v <= hi; v += 100) lengths.push_back(v);
    } else {
        std::istringstream in(arg);
        std::string item;
        while (std::getline(in, item, ',')) lengths.push_back(checked_int(item, "--lengths"));
    }
    if (lengths.empty()) throw ValidationError("empty --lengths");
    return lengths;
}

std::vector<BenchMode> parse_modes(const std::string& arg) {
    std::vector<BenchMode> modes;
    std::istringstream in(arg);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item == "full") modes.push_back({Mode::full, 0});
        else if (item == "plain") modes.push_back({Mode::plain_reuse, 0});
        else if (item.rfind("link", 0) == 0)
            modes.push_back({Mode::link_reuse, checked_int(item.substr(4), "--modes")});
        else throw ValidationError("unknown bench mode: " + item);
    }
    return modes;
}

int cmd_init_model(const std::string& config_path, std::uint64_t seed, const std::string& out,
                   double theta_override) {
    ModelConfig cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    if (theta_override > 0.0) cfg.theta_base = theta_override;
    cfg.validate();
    Weights w = init_random(cfg, seed);
    save_weights(w, out);
    std::printf("wrote %s (model hash %016llx)\n", out.c_str(),
                static_cast<unsigned long long>(w.hash));
    return 0;
}

int cmd_encode(const std::string& weights_path, const std::string& store_dir,
               std::uint64_t capacity, const std::string& tokens_arg,
               const std::string& compress, double rate) {
    Weights w = load_weights(weights_path);
    const std::vector<int> tokens = parse_tokens_arg(tokens_arg);
    if (tokens.empty()) throw ValidationError("no tokens to encode");

    LinkSpec spec;
    spec.vocab_size = w.config.vocab_size;

    CacheKind kind = CacheKind::plain;
    if (compress == "anchor") kind = CacheKind::anchor;
    else if (compress == "drop") kind = CacheKind::drop;
    else if (!compress.empty() && compress != "none") {
        throw ValidationError("unknown --compress value: " + compress);
    }

    const std::uint64_t id =
        kind == CacheKind::plain
            ? segment_content_hash(w.hash, tokens)
            : segment_content_hash(w.hash, tokens, kind, rate, kind == CacheKind::anchor ? 100 : 0);

    CacheStore store(store_dir, capacity, EvictionPolicy::LRU, w.hash);
    if (store.contains(id)) {
        std::printf("segment %016llx cache hit, nothing to do\n",
                    static_cast<unsigned long long>(id));
        return 0;
    }

    SegmentCache cache;
    switch (kind) {
        case CacheKind::plain: cache = prefill_segment(tokens, w); break;
        case CacheKind::anchor: cache = compress_anchor(tokens, rate, spec, w); break;
        case CacheKind::drop: cache = compress_drop(tokens, rate, nullptr, w); break;
    }
    const std::uint64_t bytes = store.put(cache);
    std::printf("segment %016llx stored %llu bytes (%u rows)\n",
                static_cast<unsigned long long>(cache.segment_id),
                static_cast<unsigned long long>(bytes), cache.n_rows);
    return 0;
}

int cmd_query(const std::string& plan_path, const std::string& weights_path,
              const std::string& store_dir, std::uint64_t capacity, int decode_n, bool verify,
              int default_k, bool default_boundary) {
    Weights w = load_weights(weights_path);
    QueryPlan plan = parse_plan_file(plan_path);
    // CLI/env defaults fill in whatever the plan file left unspecified.
    if (!plan.k_explicit && plan.mode == Mode::link_reuse && default_k >= 0) {
        plan.k = default_k;
    }
    if (!plan.boundaries_explicit && default_boundary) plan.boundaries = true;
    CacheStore store(store_dir, capacity, EvictionPolicy::LRU, w.hash);

    RunResult res = run_query(plan, store, w, decode_n);
    std::printf("mode=%s hits=%llu misses=%llu flops=%llu\n", mode_name(plan.mode),
                static_cast<unsigned long long>(res.cache_hits),
                static_cast<unsigned long long>(res.cache_misses),
                static_cast<unsigned long long>(res.flops_total));
    std::printf("phases_us load=%.1f rerotate=%.1f link=%.1f suffix=%.1f\n", res.phases.load_us,
                res.phases.rerotate_us, res.phases.link_us, res.phases.suffix_us);
    std::printf("decoded:");
    for (int t : res.decoded) std::printf(" %d", t);
    std::printf("\n");

    if (verify) {
        if (plan.mode != Mode::plain_reuse && plan.mode != Mode::link_reuse) {
            throw PlanError("--verify applies to plain_reuse and link_reuse plans");
        }
        OracleReport report = oracle_compare(plan, w, {0, kVerifyThreshold});
        std::printf("oracle max-abs diff %.3e at position %d (threshold %.1e): %s\n",
                    report.max_abs_diff, report.worst_position, report.threshold,
                    report.pass ? "PASS" : "FAIL");
        if (!report.pass) return 5;
    }
    return 0;
}

int cmd_bench(const std::string& weights_path, int docs, const std::string& lengths,
              int runs, int warmup, int question_len, const std::string& modes,
              const std::string& out_csv) {
    Weights w = load_weights(weights_path);
    BenchConfig cfg;
    cfg.n_docs = docs;
    cfg.doc_lengths = parse_lengths(lengths);
    cfg.runs = runs;
    cfg.warmup = warmup;
    cfg.question_len = question_len;
    if (!modes.empty()) cfg.modes = parse_modes(modes);
    cfg.validate();

    MemoryStore store(w.hash);
    populate_bench_store(cfg, w, store);
    BenchReport report = run_bench(cfg, w, store);
    report.print_table(std::cout);
    if (!out_csv.empty()) {
        const std::string csv = report.to_csv();
        write_file_bytes(out_csv, {reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()});
        std::printf("wrote %s\n", out_csv.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache reuse engine with rotary re-encoding and link tokens"};
    app.require_subcommand(1);

    std::string weights_path;
    std::string store_dir = "kvlink_store";
    std::uint64_t capacity = 1ull << 30;

    // init-model
    auto* init = app.add_subcommand("init-model", "create a random weights file");
    std::string init_config;
    std::uint64_t init_seed = 42;
    std::string init_out = "model.kvlw";
    double init_theta = 0.0;
    init->add_option("--config", init_config, "model config file (key=value lines)");
    init->add_option("--seed", init_seed, "init seed");
    init->add_option("--out", init_out, "output .kvlw path")->envname("KVLINK_WEIGHTS");
    init->add_option("--theta", init_theta, "rotary theta base (overrides the config file)")
        ->envname("KVLINK_THETA");

    // encode
    auto* encode = app.add_subcommand("encode", "prefill a segment into the store");
    std::string enc_tokens, enc_compress;
    double enc_rate = 0.5;
    encode->add_option("--weights", weights_path, "weights file")
        ->envname("KVLINK_WEIGHTS")->required();
    encode->add_option("--store", store_dir, "store directory")->envname("KVLINK_STORE");
    encode->add_option("--capacity", capacity, "store budget in bytes")
        ->envname("KVLINK_CAPACITY");
    encode->add_option("--tokens", enc_tokens, "token IDs inline or @file")->required();
    encode->add_option("--compress", enc_compress, "none | anchor | drop");
    encode->add_option("--rate", enc_rate, "fraction of cache removed");

    // query
    auto* query = app.add_subcommand("query", "execute a plan file");
    std::string plan_path;
    int decode_n = 1;
    bool verify = false;
    int default_k = -1;
    bool default_boundary = false;
    query->add_option("--plan", plan_path, "plan file")->required();
    query->add_option("--weights", weights_path, "weights file")
        ->envname("KVLINK_WEIGHTS")->required();
    query->add_option("--store", store_dir, "store directory")->envname("KVLINK_STORE");
    query->add_option("--capacity", capacity, "store budget in bytes")
        ->envname("KVLINK_CAPACITY");
    query->add_option("--decode", decode_n, "greedy-decode N tokens");
    query->add_flag("--verify", verify, "compare against the monolithic oracle");
    query->add_option("--k", default_k, "link tokens per segment when the plan omits k")
        ->envname("KVLINK_K");
    query->add_flag("--boundary", default_boundary,
                    "enable KV-START/KV-END when the plan omits the boundary line")
        ->envname("KVLINK_BOUNDARY");

    // bench
    auto* bench = app.add_subcommand("bench", "TTFT sweep over document lengths");
    int bench_docs = 10, bench_runs = 100, bench_warmup = 10, bench_question = 20;
    std::string bench_lengths = "100..500";
    std::string bench_modes;
    std::string bench_out;
    bench->add_option("--weights", weights_path, "weights file")
        ->envname("KVLINK_WEIGHTS")->required();
    bench->add_option("--docs", bench_docs, "documents per query");
    bench->add_option("--lengths", bench_lengths, "A..B (step 100) or comma list");
    bench->add_option("--runs", bench_runs, "timed runs per point");
    bench->add_option("--warmup", bench_warmup, "warmup runs per point");
    bench->add_option("--question", bench_question, "question length in tokens");
    bench->add_option("--modes", bench_modes, "comma list: full, plain, linkK (e.g. link5)");
    bench->add_option("--out", bench_out, "CSV output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed()) return cmd_init_model(init_config, init_seed, init_out, init_theta);
        if (encode->parsed())
            return cmd_encode(weights_path, store_dir, capacity, enc_tokens, enc_compress,
                              enc_rate);
        if (query->parsed())
            return cmd_query(plan_path, weights_path, store_dir, capacity, decode_n, verify,
                             default_k, default_boundary);
        if (bench->parsed())
            return cmd_bench(weights_path, bench_docs, bench_lengths, bench_runs, bench_warmup,
                             bench_question, bench_modes, bench_out);
    } catch (const VocabError& e) {
        std::fprintf(stderr, "vocab error: %s\n", e.what());
        return 4;
    } catch (const StoreError& e) {
        std::fprintf(stderr, "store error: %s\n", e.what());
        return 3;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
