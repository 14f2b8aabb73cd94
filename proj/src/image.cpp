#include "obsd/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "obsd/sha256.hpp"

namespace obsd {

const char* role_name(Role r) {
    switch (r) {
        case Role::condition: return "condition";
        case Role::target: return "target";
        case Role::style_reference: return "style_reference";
        case Role::generated: return "generated";
    }
    return "generated";
}

Role role_from_name(const std::string& s) {
    if (s == "condition") return Role::condition;
    if (s == "target") return Role::target;
    if (s == "style_reference") return Role::style_reference;
    if (s == "generated") return Role::generated;
    throw DataError("unknown image role: " + s);
}

bool GlyphImage::in_range(float tol) const {
    for (float v : pixels)
        if (!std::isfinite(v) || v < -1.0f - tol || v > 1.0f + tol) return false;
    return true;
}

void GlyphImage::clip() {
    for (float& v : pixels) v = std::clamp(v, -1.0f, 1.0f);
}

std::vector<uint8_t> GlyphImage::to_bytes() const {
    std::vector<uint8_t> out(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) {
        float v = std::clamp(pixels[i], -1.0f, 1.0f);
        out[i] = (uint8_t)std::lround((v + 1.0f) * 0.5f * 255.0f);
    }
    return out;
}

GlyphImage GlyphImage::from_bytes(const std::vector<uint8_t>& bytes, int h, int w, int c,
                                  Role role) {
    if ((size_t)h * w * c != bytes.size()) throw DataError("byte buffer size mismatch");
    GlyphImage img(h, w, c, role);
    for (size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = (float)bytes[i] / 255.0f * 2.0f - 1.0f;
    return img;
}

void write_pnm(const std::filesystem::path& path, const GlyphImage& img) {
    if (img.c != 1 && img.c != 3)
        throw DataError("write_pnm: only 1- or 3-channel images, got " +
                        std::to_string(img.c));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path.string());
    f << (img.c == 1 ? "P5" : "P6") << "\n" << img.w << " " << img.h << "\n255\n";
    auto bytes = img.to_bytes();
    // planar CHW -> interleaved
    std::vector<uint8_t> inter((size_t)img.h * img.w * img.c);
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                inter[((size_t)y * img.w + x) * img.c + ch] =
                    bytes[((size_t)ch * img.h + y) * img.w + x];
    f.write((const char*)inter.data(), (std::streamsize)inter.size());
    if (!f) throw DataError("write failed: " + path.string());
}

namespace {
int pnm_next_int(std::istream& in) {
    // skips whitespace and '#' comments
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF) throw DataError("truncated PNM header");
    int v = 0;
    bool any = false;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        any = true;
        ch = in.get();
    }
    if (!any) throw DataError("malformed PNM header");
    return v;
}
}  // namespace

GlyphImage read_pnm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path.string());
    char m0 = (char)f.get(), m1 = (char)f.get();
    int c;
    if (m0 == 'P' && m1 == '5') c = 1;
    else if (m0 == 'P' && m1 == '6') c = 3;
    else throw DataError("not a binary PGM/PPM file: " + path.string());
    int w = pnm_next_int(f);
    int h = pnm_next_int(f);
    int maxval = pnm_next_int(f);
    if (maxval != 255) throw DataError("unsupported PNM maxval: " + path.string());
    std::vector<uint8_t> inter((size_t)h * w * c);
    f.read((char*)inter.data(), (std::streamsize)inter.size());
    if (f.gcount() != (std::streamsize)inter.size())
        throw DataError("truncated PNM data: " + path.string());
    std::vector<uint8_t> planar(inter.size());
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                planar[((size_t)ch * h + y) * w + x] =
                    inter[((size_t)y * w + x) * c + ch];
    return GlyphImage::from_bytes(planar, h, w, c, Role::generated);
}

GlyphImage to_channels(const GlyphImage& src, int c) {
    if (src.c == c) return src;
    GlyphImage out(src.h, src.w, c, src.role);
    out.category = src.category;
    if (src.c == 1) {
        for (int ch = 0; ch < c; ++ch)
            std::copy(src.pixels.begin(), src.pixels.end(),
                      out.pixels.begin() + (size_t)ch * src.h * src.w);
    } else if (c == 1) {
        size_t plane = (size_t)src.h * src.w;
        for (size_t i = 0; i < plane; ++i) {
            float acc = 0.0f;
            for (int ch = 0; ch < src.c; ++ch) acc += src.pixels[ch * plane + i];
            out.pixels[i] = acc / (float)src.c;
        }
    } else {
        throw DataError("unsupported channel conversion");
    }
    return out;
}

GlyphImage register_image(const GlyphImage& src, int out_h, int out_w, int c) {
    if (src.h <= 0 || src.w <= 0) throw DataError("empty image");
    GlyphImage gray = to_channels(src, 1);

    int side = std::max(gray.h, gray.w);
    GlyphImage square(side, side, 1, src.role, 1.0f);
    int oy = (side - gray.h) / 2, ox = (side - gray.w) / 2;
    for (int y = 0; y < gray.h; ++y)
        for (int x = 0; x < gray.w; ++x) square.at(0, oy + y, ox + x) = gray.at(0, y, x);

    // exact-area box filter from side x side to out_h x out_w
    GlyphImage scaled(out_h, out_w, 1, src.role);
    double sy = (double)side / out_h, sx = (double)side / out_w;
    for (int y = 0; y < out_h; ++y) {
        double y0 = y * sy, y1 = (y + 1) * sy;
        for (int x = 0; x < out_w; ++x) {
            double x0 = x * sx, x1 = (x + 1) * sx;
            double acc = 0.0, area = 0.0;
            for (int yy = (int)std::floor(y0); yy < (int)std::ceil(y1); ++yy) {
                double wy = std::min(y1, (double)yy + 1) - std::max(y0, (double)yy);
                if (wy <= 0) continue;
                for (int xx = (int)std::floor(x0); xx < (int)std::ceil(x1); ++xx) {
                    double wx = std::min(x1, (double)xx + 1) - std::max(x0, (double)xx);
                    if (wx <= 0) continue;
                    acc += wy * wx * square.at(0, std::min(yy, side - 1), std::min(xx, side - 1));
                    area += wy * wx;
                }
            }
            scaled.at(0, y, x) = (float)(acc / area);
        }
    }
    GlyphImage out = to_channels(scaled, c);
    out.role = src.role;
    out.category = src.category;
    return out;
}

GlyphImage montage(const std::vector<std::vector<GlyphImage>>& rows) {
    if (rows.empty() || rows[0].empty()) throw DataError("montage: no images");
    int h = rows[0][0].h, w = rows[0][0].w, c = rows[0][0].c;
    size_t cols = 0;
    for (auto& r : rows) cols = std::max(cols, r.size());
    const int gut = 2;
    GlyphImage out((int)(rows.size() * (h + gut) - gut), (int)(cols * (w + gut) - gut), c,
                   Role::generated, 1.0f);
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t k = 0; k < rows[r].size(); ++k) {
            const GlyphImage& im = rows[r][k];
            if (im.h != h || im.w != w || im.c != c)
                throw DataError("montage: inconsistent tile shapes");
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        out.at(ch, (int)(r * (h + gut)) + y, (int)(k * (w + gut)) + x) =
                            im.at(ch, y, x);
        }
    }
    return out;
}

std::string image_digest(const GlyphImage& img) {
    Sha256 hsh;
    int32_t meta[3] = {img.h, img.w, img.c};
    hsh.update(meta, sizeof(meta));
    auto b = img.to_bytes();
    hsh.update(b.data(), b.size());
    return hsh.hex();
}

}  // namespace obsd
