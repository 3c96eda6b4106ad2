#pragma once

#include <span>

#include "kvlink/numerics.hpp"

namespace kvlink {

// Precomputed rotation tables. angle(pos, i) = pos * theta_base^(-2i/head_dim),
// one angle per adjacent pair (2i, 2i+1) of a head vector.
struct RopeTables {
    int head_dim = 0;
    int max_pos = 0;
    double theta_base = 10000.0;
    Matrix cos_tab;  // [max_pos x head_dim/2]
    Matrix sin_tab;
};

RopeTables build_rope_tables(int head_dim, int max_pos, double theta_base);

// Rotates one head-dim vector in place at the given position.
void rotate_in_place(std::span<float> vec, int pos, const RopeTables& tables);

std::vector<float> rotate(std::span<const float> vec, int pos, const RopeTables& tables);

// Rotates a row made of several concatenated head slices, all at one position.
void rotate_heads_in_place(std::span<float> row, int pos, const RopeTables& tables);

// Applies the global rotary embedding to a position-free key array.
// Row t is rotated per head at position global_start + per_token_offsets[t].
// Values are never passed through here; V stays unrotated by contract.
Matrix rerotate_cache_layer(const Matrix& keys, int global_start,
                            std::span<const int> per_token_offsets, const RopeTables& tables);

}  // namespace kvlink
