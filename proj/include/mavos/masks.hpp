#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mavos/errors.hpp"

namespace mavos {

// Binary mask over an H x W pixel grid, row-major, one byte per pixel (0/1).
struct BinMask {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> px;

    BinMask() = default;
    BinMask(int hh, int ww) : h(hh), w(ww), px(static_cast<size_t>(hh) * ww, 0) {}

    uint8_t at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
    uint8_t& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }

    size_t count() const {
        size_t n = 0;
        for (uint8_t v : px) n += v != 0;
        return n;
    }
    bool empty_mask() const { return count() == 0; }
};

// Per-object masks for one frame. Objects are indexed 0..n-1 and their masks
// must be pairwise disjoint: a pixel belongs to at most one object, the rest
// is background.
struct MaskSet {
    int grid = 0;
    std::vector<BinMask> objects;

    MaskSet() = default;
    MaskSet(int g, int n) : grid(g), objects(n, BinMask(g, g)) {}

    int count() const { return static_cast<int>(objects.size()); }

    void validate(int n_max) const {
        if (count() > n_max) {
            throw ValidationError("mask set has " + std::to_string(count()) +
                                  " objects, more than the supported " + std::to_string(n_max));
        }
        for (const auto& m : objects) {
            if (m.h != grid || m.w != grid) {
                throw ValidationError("object mask is " + std::to_string(m.h) + "x" +
                                      std::to_string(m.w) + " but the frame grid is " +
                                      std::to_string(grid));
            }
        }
        size_t n = static_cast<size_t>(grid) * grid;
        for (size_t p = 0; p < n; ++p) {
            int owners = 0;
            for (const auto& m : objects) owners += m.px[p] != 0;
            if (owners > 1) {
                throw ValidationError("object masks overlap at pixel (" +
                                      std::to_string(p / grid) + ", " + std::to_string(p % grid) +
                                      ")");
            }
        }
    }

    // 1 where any object covers the pixel.
    BinMask object_union() const {
        BinMask u(grid, grid);
        for (const auto& m : objects) {
            for (size_t p = 0; p < u.px.size(); ++p) u.px[p] |= m.px[p];
        }
        return u;
    }
};

}  // namespace mavos
