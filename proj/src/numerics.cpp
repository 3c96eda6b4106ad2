#include "kvlink/numerics.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace kvlink {

MaskMatrix causal_mask(int n) {
    MaskMatrix m(n);
    for (int r = 0; r < n; ++r) {
        auto* row = m.row(r);
        for (int c = 0; c <= r; ++c) row[c] = 1;
    }
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         " * " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    }
    Matrix out(a.rows, b.cols);
    // i-k-j order: contiguous rows of b, and out(i,j) still accumulates k ascending.
    for (int i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        float* orow = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const float aik = arow[k];
            const float* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

void masked_softmax_row(std::span<const float> scores, const std::uint8_t* allow,
                        std::span<float> out) {
    const std::size_t n = scores.size();
    float row_max = -std::numeric_limits<float>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (allow[i]) {
            any = true;
            if (scores[i] > row_max) row_max = scores[i];
        }
    }
    if (!any) throw DegenerateRowError("masked_softmax: fully masked row");
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (allow[i]) {
            const float e = std::exp(scores[i] - row_max);
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0f;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (allow[i]) out[i] = static_cast<float>(out[i] / sum);
    }
}

Matrix masked_softmax(const Matrix& scores, const MaskMatrix& mask) {
    if (scores.rows != mask.side || scores.cols != mask.side) {
        throw ShapeError("masked_softmax: scores " + std::to_string(scores.rows) + "x" +
                         std::to_string(scores.cols) + " vs mask side " +
                         std::to_string(mask.side));
    }
    Matrix out(scores.rows, scores.cols);
    for (int r = 0; r < scores.rows; ++r) {
        masked_softmax_row(scores.row_span(r), mask.row(r), out.row_span(r));
    }
    return out;
}

void rms_norm_row(std::span<const float> x, std::span<const float> gain, double eps,
                  std::span<float> out) {
    if (x.size() != gain.size() || x.size() != out.size()) {
        throw ShapeError("rms_norm: length mismatch");
    }
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * static_cast<double>(v);
    const double scale = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(x[i]) * scale * gain[i]);
    }
}

std::vector<float> rms_norm(std::span<const float> x, std::span<const float> gain, double eps) {
    std::vector<float> out(x.size());
    rms_norm_row(x, gain, eps, out);
    return out;
}

float dot(std::span<const float> a, std::span<const float> b) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

int argmax_lowest(std::span<const float> v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = static_cast<int>(i);
    }
    return best;
}

}  // namespace kvlink
