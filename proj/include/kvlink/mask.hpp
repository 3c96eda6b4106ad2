#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace kvlink {

// Boolean attention-visibility grid. Row = query position, col = key position.
struct MaskMatrix {
    int side = 0;
    std::vector<std::uint8_t> allow;

    MaskMatrix() = default;
    explicit MaskMatrix(int n)
        : side(n), allow(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0) {}

    std::uint8_t* row(int r) { return allow.data() + static_cast<std::size_t>(r) * side; }
    const std::uint8_t* row(int r) const {
        return allow.data() + static_cast<std::size_t>(r) * side;
    }
    bool at(int r, int c) const { return row(r)[c] != 0; }
    void set(int r, int c, bool v) { row(r)[c] = v ? 1 : 0; }
};

MaskMatrix causal_mask(int n);

}  // namespace kvlink
