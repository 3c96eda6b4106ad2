#include "kvlink/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>

#include "kvlink/util.hpp"

namespace kvlink {

namespace {

constexpr char kWeightsMagic[4] = {'K', 'V', 'L', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;
constexpr float kInitStdev = 0.02f;

// Box-Muller over raw mt19937_64 output. std::normal_distribution is not
// pinned by the standard; this is, up to libm, so goldens stay stable.
class GaussianGen {
  public:
    explicit GaussianGen(std::uint64_t seed) : rng_(seed) {}

    float next(float stdev) {
        if (have_spare_) {
            have_spare_ = false;
            return static_cast<float>(spare_ * stdev);
        }
        const double u1 = (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
        const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;          // [0,1)
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * 3.14159265358979323846 * u2;
        spare_ = mag * std::sin(ang);
        have_spare_ = true;
        return static_cast<float>(mag * std::cos(ang) * stdev);
    }

    void fill(Matrix& m, float stdev) {
        for (float& v : m.data) v = next(stdev);
    }

  private:
    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

struct TensorRef {
    std::string name;
    std::vector<std::uint32_t> shape;
    const std::vector<float>* data;
};

std::vector<TensorRef> tensor_directory(const Weights& w) {
    const auto& c = w.config;
    std::vector<TensorRef> dir;
    auto add = [&](std::string name, std::initializer_list<std::uint32_t> shape,
                   const std::vector<float>& data) {
        dir.push_back({std::move(name), shape, &data});
    };
    add("tok_embedding", {static_cast<std::uint32_t>(c.vocab_size),
                          static_cast<std::uint32_t>(c.hidden_dim())}, w.tok_embedding.data);
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const auto h = static_cast<std::uint32_t>(c.hidden_dim());
        const auto kv = static_cast<std::uint32_t>(c.kv_dim());
        const auto f = static_cast<std::uint32_t>(c.ffn_dim);
        const LayerWeights& lw = w.layers[l];
        add(p + "wq", {h, h}, lw.wq.data);
        add(p + "wk", {h, kv}, lw.wk.data);
        add(p + "wv", {h, kv}, lw.wv.data);
        add(p + "wo", {h, h}, lw.wo.data);
        add(p + "attn_norm", {h}, lw.attn_norm);
        add(p + "ffn_norm", {h}, lw.ffn_norm);
        add(p + "w_gate", {h, f}, lw.w_gate.data);
        add(p + "w_up", {h, f}, lw.w_up.data);
        add(p + "w_down", {f, h}, lw.w_down.data);
    }
    add("final_norm", {static_cast<std::uint32_t>(c.hidden_dim())}, w.final_norm);
    add("output", {static_cast<std::uint32_t>(c.hidden_dim()),
                   static_cast<std::uint32_t>(c.vocab_size)}, w.output.data);
    return dir;
}

std::uint64_t compute_model_hash(const Weights& w) {
    ByteWriter bw;
    const auto& c = w.config;
    for (int v : {c.n_layers, c.n_heads, c.n_kv_heads, c.head_dim, c.ffn_dim, c.vocab_size,
                  c.max_pos}) {
        bw.u32(static_cast<std::uint32_t>(v));
    }
    bw.f64(c.theta_base);
    bw.f64(c.norm_eps);
    std::uint64_t h = fnv1a64(bw.data());
    for (const TensorRef& t : tensor_directory(w)) {
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data->data());
        h = fnv1a64({bytes, t.data->size() * 4}, h);
    }
    return h;
}

void allocate_tensors(Weights& w) {
    const auto& c = w.config;
    w.tok_embedding = Matrix(c.vocab_size, c.hidden_dim());
    w.layers.resize(c.n_layers);
    for (LayerWeights& lw : w.layers) {
        lw.wq = Matrix(c.hidden_dim(), c.hidden_dim());
        lw.wk = Matrix(c.hidden_dim(), c.kv_dim());
        lw.wv = Matrix(c.hidden_dim(), c.kv_dim());
        lw.wo = Matrix(c.hidden_dim(), c.hidden_dim());
        lw.w_gate = Matrix(c.hidden_dim(), c.ffn_dim);
        lw.w_up = Matrix(c.hidden_dim(), c.ffn_dim);
        lw.w_down = Matrix(c.ffn_dim, c.hidden_dim());
        lw.attn_norm.assign(c.hidden_dim(), 1.0f);
        lw.ffn_norm.assign(c.hidden_dim(), 1.0f);
    }
    w.final_norm.assign(c.hidden_dim(), 1.0f);
    w.output = Matrix(c.hidden_dim(), c.vocab_size);
}

}  // namespace

Weights init_random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Weights w;
    w.config = config;
    allocate_tensors(w);
    GaussianGen gen(seed);
    gen.fill(w.tok_embedding, kInitStdev);
    for (LayerWeights& lw : w.layers) {
        gen.fill(lw.wq, kInitStdev);
        gen.fill(lw.wk, kInitStdev);
        gen.fill(lw.wv, kInitStdev);
        gen.fill(lw.wo, kInitStdev);
        gen.fill(lw.w_gate, kInitStdev);
        gen.fill(lw.w_up, kInitStdev);
        gen.fill(lw.w_down, kInitStdev);
    }
    gen.fill(w.output, kInitStdev);
    w.rope = build_rope_tables(config.head_dim, config.max_pos, config.theta_base);
    w.hash = compute_model_hash(w);
    return w;
}

// ---------------------------------------------------------------------------
// KVLW file format
// ---------------------------------------------------------------------------

void save_weights(const Weights& w, const std::filesystem::path& path) {
    ByteWriter out;
    out.bytes({reinterpret_cast<const std::uint8_t*>(kWeightsMagic), 4});
    out.u32(kWeightsVersion);
    const auto& c = w.config;
    for (int v : {c.n_layers, c.n_heads, c.n_kv_heads, c.head_dim, c.ffn_dim, c.vocab_size,
                  c.max_pos}) {
        out.u32(static_cast<std::uint32_t>(v));
    }
    out.f64(c.theta_base);
    out.f64(c.norm_eps);

    const std::vector<TensorRef> dir = tensor_directory(w);
    out.u32(static_cast<std::uint32_t>(dir.size()));
    std::uint64_t offset = 0;
    for (const TensorRef& t : dir) {
        out.str(t.name);
        out.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (std::uint32_t d : t.shape) out.u32(d);
        out.u64(offset);
        offset += t.data->size() * 4;
    }
    out.u64(offset);  // payload byte count

    ByteWriter payload;
    for (const TensorRef& t : dir) payload.f32_span(*t.data);
    out.bytes(payload.data());
    out.u32(crc32_of(payload.data()));
    write_file_bytes(path, out.data());
}

Weights load_weights(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) {
        throw FormatError("bad weights magic, expected KVLW");
    }
    ByteReader r(bytes);
    r.u32("magic");
    const std::uint32_t version = r.u32("version");
    if (version != kWeightsVersion) {
        throw FormatError("unsupported weights version " + std::to_string(version));
    }
    Weights w;
    ModelConfig& c = w.config;
    c.n_layers = static_cast<int>(r.u32("config.n_layers"));
    c.n_heads = static_cast<int>(r.u32("config.n_heads"));
    c.n_kv_heads = static_cast<int>(r.u32("config.n_kv_heads"));
    c.head_dim = static_cast<int>(r.u32("config.head_dim"));
    c.ffn_dim = static_cast<int>(r.u32("config.ffn_dim"));
    c.vocab_size = static_cast<int>(r.u32("config.vocab_size"));
    c.max_pos = static_cast<int>(r.u32("config.max_pos"));
    c.theta_base = r.f64("config.theta_base");
    c.norm_eps = r.f64("config.norm_eps");
    c.validate();

    allocate_tensors(w);
    std::vector<TensorRef> dir = tensor_directory(w);
    const std::uint32_t n_tensors = r.u32("tensor count");
    if (n_tensors != dir.size()) {
        throw FormatError("tensor directory lists " + std::to_string(n_tensors) + ", expected " +
                          std::to_string(dir.size()));
    }
    struct DirEntry {
        std::string name;
        std::uint64_t offset;
        std::uint64_t count;  // floats
    };
    std::vector<DirEntry> entries;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        DirEntry e;
        e.name = r.str("tensor name");
        const std::uint32_t ndim = r.u32("tensor rank");
        std::uint64_t count = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) count *= r.u32("tensor shape");
        e.offset = r.u64("tensor offset");
        e.count = count;
        if (e.name != dir[i].name || count != dir[i].data->size()) {
            throw FormatError("tensor '" + e.name + "' does not match the expected layout");
        }
        entries.push_back(std::move(e));
    }
    const std::uint64_t payload_size = r.u64("payload size");
    const std::size_t payload_start = r.pos();

    // Pull each tensor out of the payload region, naming the first one the
    // file is too short for.
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const DirEntry& e = entries[i];
        const std::uint64_t end = e.offset + e.count * 4;
        if (end > payload_size || payload_start + end > bytes.size()) {
            throw FormatError("truncated file while reading tensor '" + e.name + "'");
        }
        auto* dst = const_cast<std::vector<float>*>(dir[i].data);
        std::memcpy(dst->data(), bytes.data() + payload_start + e.offset, e.count * 4);
    }
    if (payload_start + payload_size + 4 > bytes.size()) {
        throw FormatError("truncated file while reading checksum");
    }
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + payload_start + payload_size, 4);
    if (crc32_of({bytes.data() + payload_start, payload_size}) != stored_crc) {
        throw FormatError("weights payload CRC mismatch");
    }
    for (const TensorRef& t : dir) {
        for (float v : *t.data) {
            if (!std::isfinite(v)) {
                throw FormatError("non-finite value in tensor '" + t.name + "'");
            }
        }
    }

    w.rope = build_rope_tables(c.head_dim, c.max_pos, c.theta_base);
    w.hash = compute_model_hash(w);
    return w;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace {

void check_tokens(std::span<const int> tokens, const ModelConfig& c) {
    for (int t : tokens) {
        if (t < 0 || t >= c.vocab_size) {
            throw VocabError("token ID " + std::to_string(t) + " outside vocab of " +
                             std::to_string(c.vocab_size));
        }
    }
}

Matrix embed(std::span<const int> tokens, const Weights& w) {
    Matrix h(static_cast<int>(tokens.size()), w.config.hidden_dim());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        std::memcpy(h.row(static_cast<int>(t)), w.tok_embedding.row(tokens[t]),
                    static_cast<std::size_t>(w.config.hidden_dim()) * 4);
    }
    return h;
}

Matrix norm_rows(const Matrix& h, const std::vector<float>& gain, double eps) {
    Matrix out(h.rows, h.cols);
    for (int r = 0; r < h.rows; ++r) {
        rms_norm_row(h.row_span(r), gain, eps, out.row_span(r));
    }
    return out;
}

void add_rows(Matrix& acc, const Matrix& delta) {
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += delta.data[i];
}

Matrix ffn_block(const Matrix& h, const LayerWeights& lw, double eps) {
    Matrix x = norm_rows(h, lw.ffn_norm, eps);
    Matrix g = matmul(x, lw.w_gate);
    Matrix u = matmul(x, lw.w_up);
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = silu(g.data[i]) * u.data[i];
    return matmul(g, lw.w_down);
}

}  // namespace

void attend_row(const float* q, const Matrix& keys, const Matrix& values, int head_offset,
                int head_dim, std::span<const int> cols, std::span<float> scratch, float* out) {
    if (cols.empty()) throw DegenerateRowError("attention row with no visible positions");
    const float inv_scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    float row_max = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const float* krow = keys.row(cols[i]) + head_offset;
        float s = 0.0f;
        for (int d = 0; d < head_dim; ++d) s += q[d] * krow[d];
        s *= inv_scale;
        scratch[i] = s;
        if (s > row_max) row_max = s;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const float e = std::exp(scratch[i] - row_max);
        scratch[i] = e;
        sum += e;
    }
    for (int d = 0; d < head_dim; ++d) out[d] = 0.0f;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const float wgt = static_cast<float>(scratch[i] / sum);
        const float* vrow = values.row(cols[i]) + head_offset;
        for (int d = 0; d < head_dim; ++d) out[d] += wgt * vrow[d];
    }
}

ForwardOutput forward_masked(std::span<const int> tokens, std::span<const int> positions,
                             const MaskMatrix& mask, const Weights& w) {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw EmptyInputError("forward_masked: no tokens");
    if (static_cast<int>(positions.size()) != n || mask.side != n) {
        throw ShapeError("forward_masked: tokens/positions/mask disagree on length");
    }
    check_tokens(tokens, w.config);
    for (int r = 0; r < n; ++r) {
        const auto* row = mask.row(r);
        for (int c = r + 1; c < n; ++c) {
            if (row[c]) {
                throw ValidationError("mask allows future position " + std::to_string(c) +
                                      " from row " + std::to_string(r));
            }
        }
    }

    const ModelConfig& cfg = w.config;
    const int head_dim = cfg.head_dim;
    const int group = cfg.n_heads / cfg.n_kv_heads;

    ForwardOutput out;
    out.k_cache.reserve(cfg.n_layers);
    out.v_cache.reserve(cfg.n_layers);

    Matrix h = embed(tokens, w);
    std::vector<float> scratch(static_cast<std::size_t>(n));
    std::vector<int> cols;
    cols.reserve(static_cast<std::size_t>(n));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        Matrix x = norm_rows(h, lw.attn_norm, cfg.norm_eps);
        Matrix q = matmul(x, lw.wq);
        Matrix k = matmul(x, lw.wk);
        Matrix v = matmul(x, lw.wv);
        out.k_cache.push_back(k);  // pre-rotation copy
        out.v_cache.push_back(v);

        for (int t = 0; t < n; ++t) {
            rotate_heads_in_place(q.row_span(t), positions[t], w.rope);
            rotate_heads_in_place(k.row_span(t), positions[t], w.rope);
        }

        Matrix attn(n, cfg.hidden_dim());
        for (int r = 0; r < n; ++r) {
            cols.clear();
            const auto* mrow = mask.row(r);
            for (int c = 0; c <= r; ++c) {
                if (mrow[c]) cols.push_back(c);
            }
            for (int head = 0; head < cfg.n_heads; ++head) {
                const int q_off = head * head_dim;
                const int kv_off = (head / group) * head_dim;
                attend_row(q.row(r) + q_off, k, v, kv_off, head_dim, cols, scratch,
                           attn.row(r) + q_off);
            }
        }
        add_rows(h, matmul(attn, lw.wo));
        add_rows(h, ffn_block(h, lw, cfg.norm_eps));
    }

    Matrix xf = norm_rows(h, w.final_norm, cfg.norm_eps);
    out.logits = matmul(xf, w.output);
    return out;
}

SegmentCache prefill_segment(std::span<const int> tokens, const Weights& w) {
    if (tokens.empty()) throw EmptyInputError("prefill_segment: empty segment");
    const int n = static_cast<int>(tokens.size());
    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = i;
    ForwardOutput out = forward_masked(tokens, positions, causal_mask(n), w);

    SegmentCache cache;
    cache.segment_id = segment_content_hash(w.hash, tokens);
    cache.model_hash = w.hash;
    cache.n_rows = static_cast<std::uint32_t>(n);
    cache.n_kv_heads = static_cast<std::uint32_t>(w.config.n_kv_heads);
    cache.head_dim = static_cast<std::uint32_t>(w.config.head_dim);
    cache.k_layers = std::move(out.k_cache);
    cache.v_layers = std::move(out.v_cache);
    return cache;
}

ForwardOutput extend_over_cache(AssembledContext& ctx, std::span<const int> tokens,
                                std::span<const int> positions, const MaskRule& visibility,
                                const Weights& w) {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw EmptyInputError("extend_over_cache: no new tokens");
    if (static_cast<int>(positions.size()) != n) {
        throw ShapeError("extend_over_cache: tokens/positions length mismatch");
    }
    if (ctx.model_hash != w.hash) {
        throw CompatError("extend_over_cache: context built by a different model");
    }
    check_tokens(tokens, w.config);
    for (int i = 0; i < n; ++i) {
        if (positions[i] >= w.config.max_pos) {
            throw PositionError("extend_over_cache: position " + std::to_string(positions[i]) +
                                " overflows max_pos " + std::to_string(w.config.max_pos));
        }
        if (i > 0 && positions[i] <= positions[i - 1]) {
            throw PositionError("extend_over_cache: positions must be strictly increasing");
        }
        if (positions[i] < 0) throw PositionError("extend_over_cache: negative position");
    }

    const ModelConfig& cfg = w.config;
    const int head_dim = cfg.head_dim;
    const int group = cfg.n_heads / cfg.n_kv_heads;

    ctx.extend_layout(positions[n - 1] + 1);
    // Visible-column lists are position-derived and layer-independent, so
    // gather them once. Rows of this batch become visible to later rows here.
    for (int i = 0; i < n; ++i) ctx.mark_filled(positions[i]);
    std::vector<std::vector<int>> visible(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& cols = visible[static_cast<std::size_t>(i)];
        for (int c = 0; c <= positions[i]; ++c) {
            if (ctx.is_filled(c) && visibility.allows(positions[i], c)) cols.push_back(c);
        }
    }

    Matrix h = embed(tokens, w);
    std::vector<float> scratch(static_cast<std::size_t>(positions[n - 1] + 1));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        Matrix x = norm_rows(h, lw.attn_norm, cfg.norm_eps);
        Matrix q = matmul(x, lw.wq);
        Matrix k = matmul(x, lw.wk);
        Matrix v = matmul(x, lw.wv);

        for (int i = 0; i < n; ++i) {
            rotate_heads_in_place(q.row_span(i), positions[i], w.rope);
            rotate_heads_in_place(k.row_span(i), positions[i], w.rope);
            std::memcpy(ctx.k_layers[l].row(positions[i]), k.row(i),
                        static_cast<std::size_t>(cfg.kv_dim()) * 4);
            std::memcpy(ctx.v_layers[l].row(positions[i]), v.row(i),
                        static_cast<std::size_t>(cfg.kv_dim()) * 4);
        }

        Matrix attn(n, cfg.hidden_dim());
        for (int i = 0; i < n; ++i) {
            const auto& cols = visible[static_cast<std::size_t>(i)];
            for (int head = 0; head < cfg.n_heads; ++head) {
                const int q_off = head * head_dim;
                const int kv_off = (head / group) * head_dim;
                attend_row(q.row(i) + q_off, ctx.k_layers[l], ctx.v_layers[l], kv_off, head_dim,
                           cols, scratch, attn.row(i) + q_off);
            }
        }
        add_rows(h, matmul(attn, lw.wo));
        add_rows(h, ffn_block(h, lw, cfg.norm_eps));
    }

    ForwardOutput out;
    Matrix xf = norm_rows(h, w.final_norm, cfg.norm_eps);
    out.logits = matmul(xf, w.output);
    return out;
}

std::vector<int> greedy_decode(AssembledContext& ctx, std::span<const int> prompt_tail,
                               int max_new, const Weights& w) {
    if (max_new < 1) throw ValidationError("greedy_decode: max_new must be >= 1");

    MaskRule causal_tail;  // no spans: every row is past-the-end, i.e. causal
    std::vector<int> generated;
    generated.reserve(static_cast<std::size_t>(max_new));

    int next_pos = ctx.layout_end();
    int next_token;
    {
        std::vector<int> tail(prompt_tail.begin(), prompt_tail.end());
        std::vector<int> positions;
        for (std::size_t i = 0; i < tail.size(); ++i) {
            positions.push_back(next_pos + static_cast<int>(i));
        }
        if (tail.empty()) throw EmptyInputError("greedy_decode: empty prompt tail");
        ForwardOutput out = extend_over_cache(ctx, tail, positions, causal_tail, w);
        next_pos += static_cast<int>(tail.size());
        next_token = argmax_lowest(out.logits.row_span(out.logits.rows - 1));
    }
    generated.push_back(next_token);

    for (int step = 1; step < max_new; ++step) {
        const int tok[1] = {next_token};
        const int pos[1] = {next_pos};
        ForwardOutput out = extend_over_cache(ctx, tok, pos, causal_tail, w);
        ++next_pos;
        next_token = argmax_lowest(out.logits.row_span(0));
        generated.push_back(next_token);
    }
    return generated;
}

AssembledContext context_from_output(const ForwardOutput& out, std::span<const int> positions,
                                     const Weights& w) {
    AssembledContext ctx;
    ctx.model_hash = w.hash;
    ctx.n_layers = w.config.n_layers;
    ctx.kv_dim = w.config.kv_dim();
    const int n = static_cast<int>(positions.size());
    if (n == 0 || out.k_cache.empty() || out.k_cache[0].rows != n) {
        throw ShapeError("context_from_output: positions do not match emitted caches");
    }
    ctx.k_layers.assign(static_cast<std::size_t>(ctx.n_layers), Matrix());
    ctx.v_layers.assign(static_cast<std::size_t>(ctx.n_layers), Matrix());
    ctx.extend_layout(positions[n - 1] + 1);
    for (int l = 0; l < ctx.n_layers; ++l) {
        for (int i = 0; i < n; ++i) {
            float* krow = ctx.k_layers[l].row(positions[i]);
            std::memcpy(krow, out.k_cache[l].row(i), static_cast<std::size_t>(ctx.kv_dim) * 4);
            rotate_heads_in_place({krow, static_cast<std::size_t>(ctx.kv_dim)}, positions[i],
                                  w.rope);
            std::memcpy(ctx.v_layers[l].row(positions[i]), out.v_cache[l].row(i),
                        static_cast<std::size_t>(ctx.kv_dim) * 4);
        }
    }
    for (int i = 0; i < n; ++i) ctx.mark_filled(positions[i]);
    return ctx;
}

std::uint64_t phase_flops(const ModelConfig& config, std::uint64_t q_len, std::uint64_t kv_len) {
    const auto h = static_cast<std::uint64_t>(config.hidden_dim());
    const auto ffn = static_cast<std::uint64_t>(config.ffn_dim);
    const std::uint64_t per_token = 2 * 4 * h * h + 2 * 3 * h * ffn;
    const std::uint64_t attention = 2 * 2 * q_len * kv_len * h;
    return static_cast<std::uint64_t>(config.n_layers) * (q_len * per_token + attention);
}

}  // namespace kvlink
