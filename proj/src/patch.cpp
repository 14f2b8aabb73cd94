#include "obsd/patch.hpp"

namespace obsd {

PatchLayout build_patch_layout(int h, int w, int patch, int stride) {
    if (patch < 1 || h < 1 || w < 1) throw UsageError("patch layout: sizes must be positive");
    if (patch > h || patch > w)
        throw UsageError("patch size " + std::to_string(patch) + " exceeds image side");
    if (stride < 1) throw UsageError("patch layout: stride must be >= 1");
    if (stride > patch)
        throw UsageError("patch layout: stride > patch size leaves uncovered pixels");
    if ((h - patch) % stride != 0 || (w - patch) % stride != 0)
        throw UsageError("patch layout: (side - patch) must be divisible by stride");

    PatchLayout lay;
    lay.h = h;
    lay.w = w;
    lay.patch = patch;
    lay.stride = stride;
    int ny = (h - patch) / stride + 1;
    int nx = (w - patch) / stride + 1;
    lay.d = ny * nx;
    lay.positions.reserve(lay.d);
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix)
            lay.positions.push_back({iy * stride, ix * stride});

    lay.coverage.assign((size_t)h * w, 0);
    for (auto& p : lay.positions)
        for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x) lay.coverage[(size_t)(p.y + y) * w + p.x + x]++;
    return lay;
}

std::vector<uint8_t> PatchLayout::mask(int di) const {
    if (di < 0 || di >= d) throw UsageError("patch index out of range");
    std::vector<uint8_t> m((size_t)h * w, 0);
    auto& p = positions[di];
    for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) m[(size_t)(p.y + y) * w + p.x + x] = 1;
    return m;
}

GlyphImage crop_patch(const GlyphImage& img, const PatchLayout& layout, int di) {
    if (img.h != layout.h || img.w != layout.w)
        throw UsageError("crop_patch: image does not match layout");
    if (di < 0 || di >= layout.d) throw UsageError("crop_patch: patch index out of range");
    auto& p = layout.positions[di];
    GlyphImage out(layout.patch, layout.patch, img.c, img.role);
    out.category = img.category;
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < layout.patch; ++y)
            for (int x = 0; x < layout.patch; ++x)
                out.at(ch, y, x) = img.at(ch, p.y + y, p.x + x);
    return out;
}

void accumulate_patch(std::vector<float>& out, int h, int w, int c,
                      const std::vector<float>& patch_vals, const PatchLayout& layout,
                      int di) {
    if (out.size() != (size_t)h * w * c) throw UsageError("accumulate_patch: bad output size");
    if (patch_vals.size() != (size_t)layout.patch * layout.patch * c)
        throw UsageError("accumulate_patch: bad patch size");
    auto& p = layout.positions[di];
    int ps = layout.patch;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ps; ++y)
            for (int x = 0; x < ps; ++x)
                out[((size_t)ch * h + p.y + y) * w + p.x + x] +=
                    patch_vals[((size_t)ch * ps + y) * ps + x];
}

}  // namespace obsd
