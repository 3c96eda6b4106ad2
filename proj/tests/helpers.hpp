#pragma once

#include <random>
#include <vector>

#include "kvlink/model.hpp"

namespace kvlink::testing {

// Small-but-real configuration for unit tests; the desk default is used where
// a test pins desk-scale behavior.
inline ModelConfig test_config() {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 8;
    cfg.ffn_dim = 64;
    cfg.vocab_size = 128;
    cfg.max_pos = 2048;
    return cfg;
}

inline const Weights& test_weights() {
    static Weights w = init_random(test_config(), 1234);
    return w;
}

inline const Weights& desk_weights() {
    static Weights w = init_random(ModelConfig{}, 42);
    return w;
}

// Token IDs safely below every reserved range of the test vocab.
inline std::vector<int> random_tokens(int n, std::mt19937& rng, int lo = 3, int hi = 30) {
    std::vector<int> t(static_cast<std::size_t>(n));
    for (int& v : t) v = lo + static_cast<int>(rng() % static_cast<unsigned>(hi - lo));
    return t;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, static_cast<double>(std::fabs(a[i] - b[i])));
    }
    return worst;
}

}  // namespace kvlink::testing
