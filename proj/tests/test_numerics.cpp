#include <doctest.h>

#include <cmath>
#include <random>

#include "kvlink/numerics.hpp"

using namespace kvlink;

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937& rng) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Matrix m(rows, cols);
    for (float& v : m.data) v = dist(rng);
    return m;
}

// Independent oracle: textbook triple loop, ascending k.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            float acc = 0.0f;
            for (int k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = acc;
        }
    }
    return out;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matmul identity") {
    std::mt19937 rng(1);
    Matrix m = random_matrix(2, 2, rng);
    Matrix id(2, 2);
    id.at(0, 0) = 1.0f;
    id.at(1, 1) = 1.0f;
    Matrix out = matmul(id, m);
    for (std::size_t i = 0; i < m.data.size(); ++i) CHECK(out.data[i] == m.data[i]);
}

TEST_CASE("matmul hand arithmetic") {
    Matrix a(2, 2);
    a.data = {1, 2, 3, 4};
    Matrix b(2, 1);
    b.data = {5, 6};
    Matrix out = matmul(a, b);
    CHECK(out.at(0, 0) == 17.0f);
    CHECK(out.at(1, 0) == 39.0f);
}

TEST_CASE("matmul matches naive triple-loop oracle exactly") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix a = random_matrix(8, 8, rng);
        Matrix b = random_matrix(8, 8, rng);
        Matrix fast = matmul(a, b);
        Matrix slow = naive_matmul(a, b);
        for (std::size_t i = 0; i < fast.data.size(); ++i) {
            CHECK(fast.data[i] == slow.data[i]);  // same accumulation order
        }
    }
}

TEST_CASE("matmul shape mismatch") {
    Matrix a(2, 3), b(2, 2);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul associativity within 1e-5") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        Matrix a = random_matrix(4, 4, rng);
        Matrix b = random_matrix(4, 4, rng);
        Matrix c = random_matrix(4, 4, rng);
        Matrix left = matmul(matmul(a, b), c);
        Matrix right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.data.size(); ++i) {
            CHECK(std::fabs(left.data[i] - right.data[i]) <= 1e-5);
        }
    }
}

TEST_CASE("masked_softmax single allowed entry per row") {
    Matrix scores(3, 3);
    std::mt19937 rng(3);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    for (float& v : scores.data) v = dist(rng);
    MaskMatrix mask(3);
    for (int r = 0; r < 3; ++r) mask.set(r, r, true);
    Matrix out = masked_softmax(scores, mask);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            CHECK(out.at(r, c) == (r == c ? 1.0f : 0.0f));
        }
    }
}

TEST_CASE("masked_softmax uniform row of width 4") {
    std::vector<float> scores{0.7f, 0.7f, 0.7f, 0.7f};
    std::vector<std::uint8_t> allow{1, 1, 1, 1};
    std::vector<float> out(4);
    masked_softmax_row(scores, allow.data(), out);
    for (float v : out) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("masked_softmax equals dense -1e30 substitution oracle") {
    std::mt19937 rng(17);
    std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
    Matrix scores(6, 6);
    for (float& v : scores.data) v = dist(rng);
    MaskMatrix mask(6);
    std::bernoulli_distribution coin(0.6);
    for (int r = 0; r < 6; ++r) {
        mask.set(r, r, true);  // keep every row non-degenerate
        for (int c = 0; c < r; ++c) mask.set(r, c, coin(rng));
    }

    Matrix out = masked_softmax(scores, mask);

    // Oracle: write -1e30 into masked slots, run a plain dense softmax.
    for (int r = 0; r < 6; ++r) {
        double dense[6];
        double row_max = -1e300;
        for (int c = 0; c < 6; ++c) {
            dense[c] = mask.at(r, c) ? static_cast<double>(scores.at(r, c)) : -1e30;
            row_max = std::max(row_max, dense[c]);
        }
        double sum = 0.0;
        for (int c = 0; c < 6; ++c) {
            dense[c] = std::exp(dense[c] - row_max);
            sum += dense[c];
        }
        for (int c = 0; c < 6; ++c) {
            CHECK(std::fabs(out.at(r, c) - dense[c] / sum) <= 1e-6);
        }
    }
}

TEST_CASE("masked_softmax rows sum to one, masked entries exactly zero") {
    std::mt19937 rng(23);
    std::uniform_real_distribution<float> dist(-4.0f, 4.0f);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 12);
        Matrix scores(n, n);
        for (float& v : scores.data) v = dist(rng);
        MaskMatrix mask(n);
        std::bernoulli_distribution coin(0.5);
        for (int r = 0; r < n; ++r) {
            mask.set(r, static_cast<int>(rng() % static_cast<unsigned>(n)), true);
            for (int c = 0; c < n; ++c) {
                if (coin(rng)) mask.set(r, c, true);
            }
        }
        Matrix out = masked_softmax(scores, mask);
        for (int r = 0; r < n; ++r) {
            double sum = 0.0;
            for (int c = 0; c < n; ++c) {
                if (!mask.at(r, c)) CHECK(out.at(r, c) == 0.0f);
                sum += out.at(r, c);
            }
            CHECK(std::fabs(sum - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("masked_softmax rejects fully masked rows") {
    Matrix scores(2, 2);
    MaskMatrix mask(2);
    mask.set(0, 0, true);  // row 1 left empty
    CHECK_THROWS_AS(masked_softmax(scores, mask), DegenerateRowError);
}

TEST_CASE("rms_norm unit cases") {
    std::vector<float> ones(8, 1.0f);
    auto out = rms_norm(ones, ones, 1e-12);
    for (float v : out) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));

    std::vector<float> zeros(8, 0.0f);
    auto zout = rms_norm(zeros, ones, 1e-5);
    for (float v : zout) CHECK(v == 0.0f);
}

TEST_CASE("rms_norm matches direct formula") {
    std::mt19937 rng(31);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    std::vector<float> x(16), gain(16);
    for (auto& v : x) v = dist(rng);
    for (auto& v : gain) v = dist(rng);
    const double eps = 1e-5;
    auto out = rms_norm(x, gain, eps);

    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const double scale = 1.0 / std::sqrt(ss / 16.0 + eps);
    for (int i = 0; i < 16; ++i) {
        CHECK(std::fabs(out[i] - x[i] * scale * gain[i]) <= 1e-7);
    }
}

TEST_CASE("kernels are pure: same inputs, same outputs") {
    std::mt19937 rng(5);
    Matrix a = random_matrix(5, 5, rng);
    Matrix b = random_matrix(5, 5, rng);
    Matrix once = matmul(a, b);
    Matrix twice = matmul(a, b);
    for (std::size_t i = 0; i < once.data.size(); ++i) CHECK(once.data[i] == twice.data[i]);
}

TEST_CASE("argmax ties break toward the lowest index") {
    std::vector<float> v{1.0f, 3.0f, 3.0f, 2.0f};
    CHECK(argmax_lowest(v) == 1);
}

}  // TEST_SUITE
