#pragma once

#include <vector>

#include "obsd/common.hpp"
#include "obsd/image.hpp"

namespace obsd {

// Sliding-window geometry over an H x W grid: D overlapping patch locations,
// enumerated row-major, plus the per-pixel coverage count M.
struct PatchLayout {
    int h = 0, w = 0;
    int patch = 0;   // patch side
    int stride = 0;  // step between window origins
    int d = 0;       // number of patches
    struct Pos { int y, x; };
    std::vector<Pos> positions;
    std::vector<int> coverage;  // M, size h*w, >= 1 everywhere

    int coverage_at(int y, int x) const { return coverage[(size_t)y * w + x]; }

    // Binary mask of the d-th patch over the full grid.
    std::vector<uint8_t> mask(int di) const;
};

PatchLayout build_patch_layout(int h, int w, int patch, int stride);

// Aligned crop of a CHW image at layout position di.
GlyphImage crop_patch(const GlyphImage& img, const PatchLayout& layout, int di);

// out[c, y+py, x+px] += patch[c, y, x]  for position di.
void accumulate_patch(std::vector<float>& out, int h, int w, int c,
                      const std::vector<float>& patch_vals, const PatchLayout& layout,
                      int di);

}  // namespace obsd
