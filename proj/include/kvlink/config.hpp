#pragma once

#include <cstdint>

#include "kvlink/errors.hpp"

namespace kvlink {

// Decoder-only transformer dimensions. Defaults are the desk-scale reference
// configuration used across the tests and the benchmark.
struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int n_kv_heads = 2;
    int head_dim = 16;
    int ffn_dim = 128;
    int vocab_size = 512;
    int max_pos = 8192;
    double theta_base = 10000.0;
    double norm_eps = 1e-5;

    int hidden_dim() const { return n_heads * head_dim; }
    int kv_dim() const { return n_kv_heads * head_dim; }

    void validate() const;
};

}  // namespace kvlink
