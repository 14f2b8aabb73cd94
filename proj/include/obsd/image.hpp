#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "obsd/common.hpp"

namespace obsd {

enum class Role { condition, target, style_reference, generated };

const char* role_name(Role r);
Role role_from_name(const std::string& s);

// Normalized glyph raster. Pixels are CHW planar floats in [-1, 1]
// (ink = -1, background = +1).
struct GlyphImage {
    int h = 0;
    int w = 0;
    int c = 0;
    Role role = Role::generated;
    std::optional<std::string> category;
    std::vector<float> pixels;  // size h*w*c, [channel][row][col]

    GlyphImage() = default;
    GlyphImage(int h_, int w_, int c_, Role role_, float fill = 1.0f)
        : h(h_), w(w_), c(c_), role(role_), pixels((size_t)h_ * w_ * c_, fill) {}

    size_t numel() const { return pixels.size(); }
    float& at(int ch, int y, int x) { return pixels[((size_t)ch * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return pixels[((size_t)ch * h + y) * w + x]; }

    bool in_range(float tol = 0.0f) const;
    void clip();

    // 8-bit quantization rule used everywhere an image leaves memory:
    // byte = round((v + 1) / 2 * 255), clamped.
    std::vector<uint8_t> to_bytes() const;
    static GlyphImage from_bytes(const std::vector<uint8_t>& bytes, int h, int w, int c,
                                 Role role);
};

// NetPBM I/O: P5 (grayscale) for 1-channel images, P6 (RGB) for 3-channel.
void write_pnm(const std::filesystem::path& path, const GlyphImage& img);
GlyphImage read_pnm(const std::filesystem::path& path);

// Aspect-preserving registration: pad to square with background white, then
// box-filter resample to out_h x out_w, then replicate/collapse channels to c.
GlyphImage register_image(const GlyphImage& src, int out_h, int out_w, int c);

GlyphImage to_channels(const GlyphImage& src, int c);

// Grid montage, one row per input, images separated by a 2px white gutter.
GlyphImage montage(const std::vector<std::vector<GlyphImage>>& rows);

std::string image_digest(const GlyphImage& img);

}  // namespace obsd
