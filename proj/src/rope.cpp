#include "kvlink/rope.hpp"

#include <cmath>
#include <string>

namespace kvlink {

RopeTables build_rope_tables(int head_dim, int max_pos, double theta_base) {
    if (head_dim <= 0 || head_dim % 2 != 0) {
        throw ConfigError("rope: head_dim must be even and positive, got " +
                          std::to_string(head_dim));
    }
    if (max_pos < 1) throw ConfigError("rope: max_pos must be >= 1");
    if (!(theta_base > 0.0)) throw ConfigError("rope: theta_base must be positive");

    RopeTables t;
    t.head_dim = head_dim;
    t.max_pos = max_pos;
    t.theta_base = theta_base;
    const int pairs = head_dim / 2;
    t.cos_tab = Matrix(max_pos, pairs);
    t.sin_tab = Matrix(max_pos, pairs);
    for (int i = 0; i < pairs; ++i) {
        const double freq = std::pow(theta_base, -2.0 * i / head_dim);
        for (int pos = 0; pos < max_pos; ++pos) {
            const double angle = pos * freq;
            t.cos_tab.at(pos, i) = static_cast<float>(std::cos(angle));
            t.sin_tab.at(pos, i) = static_cast<float>(std::sin(angle));
        }
    }
    return t;
}

static void check_pos(int pos, const RopeTables& t) {
    if (pos < 0 || pos >= t.max_pos) {
        throw PositionError("rope: position " + std::to_string(pos) + " outside table range [0, " +
                            std::to_string(t.max_pos) + ")");
    }
}

void rotate_in_place(std::span<float> vec, int pos, const RopeTables& t) {
    if (static_cast<int>(vec.size()) != t.head_dim) {
        throw ShapeError("rope: vector length " + std::to_string(vec.size()) +
                         " != head_dim " + std::to_string(t.head_dim));
    }
    check_pos(pos, t);
    const float* c = t.cos_tab.row(pos);
    const float* s = t.sin_tab.row(pos);
    for (int i = 0; i < t.head_dim / 2; ++i) {
        const float x = vec[2 * i];
        const float y = vec[2 * i + 1];
        vec[2 * i] = x * c[i] - y * s[i];
        vec[2 * i + 1] = x * s[i] + y * c[i];
    }
}

std::vector<float> rotate(std::span<const float> vec, int pos, const RopeTables& t) {
    std::vector<float> out(vec.begin(), vec.end());
    rotate_in_place(out, pos, t);
    return out;
}

void rotate_heads_in_place(std::span<float> row, int pos, const RopeTables& t) {
    if (row.size() % static_cast<std::size_t>(t.head_dim) != 0) {
        throw ShapeError("rope: row length not a multiple of head_dim");
    }
    const std::size_t n_heads = row.size() / t.head_dim;
    for (std::size_t h = 0; h < n_heads; ++h) {
        rotate_in_place(row.subspan(h * t.head_dim, t.head_dim), pos, t);
    }
}

Matrix rerotate_cache_layer(const Matrix& keys, int global_start,
                            std::span<const int> per_token_offsets, const RopeTables& t) {
    if (static_cast<int>(per_token_offsets.size()) != keys.rows) {
        throw ShapeError("rerotate: offsets length != key rows");
    }
    for (std::size_t i = 1; i < per_token_offsets.size(); ++i) {
        if (per_token_offsets[i] <= per_token_offsets[i - 1]) {
            throw PositionError("rerotate: per-token offsets must be strictly increasing");
        }
    }
    Matrix out = keys;
    for (int r = 0; r < keys.rows; ++r) {
        const int pos = global_start + per_token_offsets[r];
        check_pos(pos, t);
        rotate_heads_in_place(out.row_span(r), pos, t);
    }
    return out;
}

}  // namespace kvlink
