#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvlink/errors.hpp"
#include "kvlink/mask.hpp"

namespace kvlink {

// Row-major f32 matrix; the only tensor carrier in the engine.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0f) {}

    float* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
    float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::span<float> row_span(int r) { return {row(r), static_cast<std::size_t>(cols)}; }
    std::span<const float> row_span(int r) const { return {row(r), static_cast<std::size_t>(cols)}; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// For each output entry the k-accumulation runs in ascending order, so results
// are reproducible across runs and comparable against a naive oracle exactly.
Matrix matmul(const Matrix& a, const Matrix& b);

// Softmax over the allowed entries of each row. Disallowed entries come out
// exactly 0; allowed entries are normalized to sum to 1.
Matrix masked_softmax(const Matrix& scores, const MaskMatrix& mask);

// Single-row kernel behind masked_softmax; `allow` has one byte per score.
void masked_softmax_row(std::span<const float> scores, const std::uint8_t* allow,
                        std::span<float> out);

// x * 1/sqrt(mean(x^2) + eps), elementwise-scaled by gain.
std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, double eps);
void rms_norm_row(std::span<const float> x, std::span<const float> gain, double eps,
                  std::span<float> out);

float dot(std::span<const float> a, std::span<const float> b);

// Argmax with ties broken toward the lowest index.
int argmax_lowest(std::span<const float> v);

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace kvlink
