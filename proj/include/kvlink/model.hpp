#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kvlink/config.hpp"
#include "kvlink/kvcache.hpp"
#include "kvlink/linker.hpp"
#include "kvlink/numerics.hpp"
#include "kvlink/rope.hpp"

namespace kvlink {

struct LayerWeights {
    Matrix wq;      // [hidden x hidden]
    Matrix wk;      // [hidden x kv_dim]
    Matrix wv;      // [hidden x kv_dim]
    Matrix wo;      // [hidden x hidden]
    Matrix w_gate;  // [hidden x ffn]
    Matrix w_up;    // [hidden x ffn]
    Matrix w_down;  // [ffn x hidden]
    std::vector<float> attn_norm;
    std::vector<float> ffn_norm;
};

// RMSNorm pre-norm, RoPE attention with grouped KV heads, SiLU-gated FFN,
// untied output head. Immutable after init/load; shareable across threads.
struct Weights {
    ModelConfig config;
    Matrix tok_embedding;  // [vocab x hidden]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;
    Matrix output;  // [hidden x vocab]
    RopeTables rope;
    std::uint64_t hash = 0;  // FNV-1a over config + tensor payloads
};

// Deterministic normal(0, 0.02) init from an explicit Box-Muller generator,
// so the same (config, seed) is bitwise reproducible everywhere.
Weights init_random(const ModelConfig& config, std::uint64_t seed);

void save_weights(const Weights& w, const std::filesystem::path& path);
Weights load_weights(const std::filesystem::path& path);

struct ForwardOutput {
    Matrix logits;  // [tokens x vocab]
    // Position-free K/V of the processed tokens, one [tokens x kv_dim] matrix
    // per layer. Populated by forward_masked/prefill, empty for extensions.
    std::vector<Matrix> k_cache;
    std::vector<Matrix> v_cache;
};

// Monolithic pass under an arbitrary (causal) attention mask. Q and K are
// rotated at `positions`; the emitted caches hold pre-rotation K and raw V.
// This is the oracle the staged pipeline is checked against.
ForwardOutput forward_masked(std::span<const int> tokens, std::span<const int> positions,
                             const MaskMatrix& mask, const Weights& w);

// Context-free segment encoding: causal self-attention at local positions
// 0..L-1, keys stored without their rotation.
SegmentCache prefill_segment(std::span<const int> tokens, const Weights& w);

// Computes Q/K/V for the new tokens only, attending allowed-and-filled
// positions of the assembled context plus earlier tokens of the same batch.
// Rotated K and raw V are written into the context at `positions`.
ForwardOutput extend_over_cache(AssembledContext& ctx, std::span<const int> tokens,
                                std::span<const int> positions, const MaskRule& visibility,
                                const Weights& w);

// Repeated argmax over single-token extension steps; ties break toward the
// lower token ID. The prompt tail and generated tokens attend causally.
std::vector<int> greedy_decode(AssembledContext& ctx, std::span<const int> prompt_tail,
                               int max_new, const Weights& w);

// Turns a monolithic pass's emitted caches into an assembled context (keys
// rotated at `positions`), so decoding can continue from a full prefill.
AssembledContext context_from_output(const ForwardOutput& out, std::span<const int> positions,
                                     const Weights& w);

// Closed-form FLOP cost of processing q_len tokens against kv_len attended
// positions: per token 2*4*h*h projections + 2*3*h*ffn gated FFN per layer,
// plus 2*2*q_len*kv_len*h attention score+mix per layer.
std::uint64_t phase_flops(const ModelConfig& config, std::uint64_t q_len, std::uint64_t kv_len);

// Softmax-weighted mix of V rows for one query head over the listed key
// positions (ascending). Scaling, max-subtraction and normalization follow
// masked_softmax_row, keeping dense-mask and streaming attention in
// agreement. `scratch` must hold at least cols.size() floats.
void attend_row(const float* q, const Matrix& keys, const Matrix& values, int head_offset,
                int head_dim, std::span<const int> cols, std::span<float> scratch, float* out);

}  // namespace kvlink
