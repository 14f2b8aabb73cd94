#include "obsd/glyph_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <json.hpp>

#include "obsd/sha256.hpp"

namespace obsd {

namespace fs = std::filesystem;
using nlohmann::json;

const char* kSynthGeneratorVersion = "1";

const GlyphCorpus::Category& GlyphCorpus::category(const std::string& id) const {
    for (auto& c : categories)
        if (c.id == id) return c;
    throw DataError("unknown category: " + id);
}

std::vector<std::string> GlyphCorpus::category_ids() const {
    std::vector<std::string> out;
    out.reserve(categories.size());
    for (auto& c : categories) out.push_back(c.id);
    return out;
}

size_t GlyphCorpus::image_count() const {
    size_t n = 0;
    for (auto& c : categories)
        n += c.conditions.size() + c.targets.size() + c.styles.size();
    return n;
}

std::string GlyphCorpus::digest() const {
    Sha256 h;
    h.update(provenance);
    h.update(generator_version);
    uint64_t seed = generator_seed;
    h.update(&seed, sizeof(seed));
    int32_t dims[3] = {height, width, channels};
    h.update(dims, sizeof(dims));
    for (auto& name : style_names) h.update(name);
    for (auto& c : categories) {
        h.update(c.id);
        auto hash_all = [&](const std::vector<GlyphImage>& imgs) {
            for (auto& im : imgs) {
                auto d = image_digest(im);
                h.update(d);
            }
        };
        hash_all(c.conditions);
        hash_all(c.targets);
        hash_all(c.styles);
    }
    return h.hex();
}

// ---------------------------------------------------------------------------
// ingest

GlyphCorpus ingest(const fs::path& root, int hh, int ww, int cc, IngestReport* report) {
    if (!fs::is_directory(root)) throw DataError("corpus root is not a directory: " + root.string());
    GlyphCorpus corpus;
    corpus.provenance = "real";
    corpus.height = hh;
    corpus.width = ww;
    corpus.channels = cc;

    std::vector<fs::path> cat_dirs;
    for (auto& e : fs::directory_iterator(root))
        if (e.is_directory()) cat_dirs.push_back(e.path());
    std::sort(cat_dirs.begin(), cat_dirs.end());
    if (cat_dirs.empty()) throw DataError("no categories under " + root.string());

    std::set<std::string> style_name_set;
    for (auto& dir : cat_dirs) {
        GlyphCorpus::Category cat;
        cat.id = dir.filename().string();
        for (const char* role : {"condition", "target", "style_reference"}) {
            fs::path rdir = dir / role;
            if (!fs::is_directory(rdir)) continue;
            std::vector<fs::path> files;
            for (auto& f : fs::directory_iterator(rdir))
                if (f.is_regular_file()) files.push_back(f.path());
            std::sort(files.begin(), files.end());
            for (auto& f : files) {
                GlyphImage img;
                try {
                    img = read_pnm(f);
                } catch (const std::exception& e) {
                    if (report) {
                        report->skipped_files.push_back(f.string());
                        report->warnings.push_back(std::string("skipped ") + f.string() +
                                                   ": " + e.what());
                    }
                    std::cerr << "warning: skipping unreadable image " << f << "\n";
                    continue;
                }
                img = register_image(img, hh, ww, cc);
                img.role = role_from_name(role);
                img.category = cat.id;
                if (img.role == Role::condition) cat.conditions.push_back(std::move(img));
                else if (img.role == Role::target) cat.targets.push_back(std::move(img));
                else {
                    style_name_set.insert(f.stem().string());
                    cat.styles.push_back(std::move(img));
                }
            }
        }
        if (cat.conditions.empty() && cat.targets.empty() && cat.styles.empty())
            throw DataError("empty category: " + cat.id);
        corpus.categories.push_back(std::move(cat));
    }
    corpus.style_names.assign(style_name_set.begin(), style_name_set.end());
    return corpus;
}

void write_corpus(const fs::path& root, const GlyphCorpus& corpus, bool force) {
    if (fs::exists(root) && !fs::is_empty(root) && !force)
        throw DataError("output directory not empty (use --force): " + root.string());
    for (auto& cat : corpus.categories) {
        fs::create_directories(root / cat.id / "condition");
        fs::create_directories(root / cat.id / "target");
        fs::create_directories(root / cat.id / "style_reference");
        char name[64];
        for (size_t i = 0; i < cat.conditions.size(); ++i) {
            std::snprintf(name, sizeof(name), "variant_%03zu.%s", i,
                          corpus.channels == 3 ? "ppm" : "pgm");
            write_pnm(root / cat.id / "condition" / name, cat.conditions[i]);
        }
        for (size_t i = 0; i < cat.targets.size(); ++i) {
            std::snprintf(name, sizeof(name), "canonical_%02zu.%s", i,
                          corpus.channels == 3 ? "ppm" : "pgm");
            write_pnm(root / cat.id / "target" / name, cat.targets[i]);
        }
        for (size_t i = 0; i < cat.styles.size(); ++i) {
            std::string sname = i < corpus.style_names.size()
                                    ? corpus.style_names[i]
                                    : "style_" + std::to_string(i);
            write_pnm(root / cat.id / "style_reference" /
                          (sname + (corpus.channels == 3 ? ".ppm" : ".pgm")),
                      cat.styles[i]);
        }
    }
    write_corpus_manifest(root / "manifest.json", corpus);
}

void write_corpus_manifest(const fs::path& path, const GlyphCorpus& corpus) {
    json j;
    j["provenance"] = corpus.provenance;
    j["generator_seed"] = corpus.generator_seed;
    j["generator_version"] = corpus.generator_version;
    j["height"] = corpus.height;
    j["width"] = corpus.width;
    j["channels"] = corpus.channels;
    j["style_names"] = corpus.style_names;
    j["digest"] = corpus.digest();
    json cats = json::array();
    for (auto& c : corpus.categories) {
        cats.push_back({{"id", c.id},
                        {"conditions", c.conditions.size()},
                        {"targets", c.targets.size()},
                        {"styles", c.styles.size()}});
    }
    j["categories"] = cats;
    std::ofstream f(path);
    if (!f) throw DataError("cannot write manifest: " + path.string());
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// splits & pairs

SplitSpec split_categories(const GlyphCorpus& corpus, double test_fraction, uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw UsageError("test fraction must be in (0, 1)");
    auto ids = corpus.category_ids();
    if (ids.size() < 2) throw DataError("need at least 2 categories to split");
    std::sort(ids.begin(), ids.end());
    size_t n_test = (size_t)(test_fraction * (double)ids.size());
    if (n_test == 0 || n_test >= ids.size())
        throw DataError("test fraction " + std::to_string(test_fraction) +
                        " leaves an empty side with " + format_count(ids.size(), "category"));
    Rng rng(seed);
    rng.shuffle(ids);
    SplitSpec spec;
    spec.test_fraction = test_fraction;
    spec.seed = seed;
    spec.test_ids.assign(ids.begin(), ids.begin() + n_test);
    spec.train_ids.assign(ids.begin() + n_test, ids.end());
    std::sort(spec.test_ids.begin(), spec.test_ids.end());
    std::sort(spec.train_ids.begin(), spec.train_ids.end());
    return spec;
}

GlyphCorpus subset(const GlyphCorpus& corpus, const std::vector<std::string>& ids) {
    GlyphCorpus out = corpus;
    out.categories.clear();
    std::set<std::string> want(ids.begin(), ids.end());
    for (auto& c : corpus.categories)
        if (want.count(c.id)) out.categories.push_back(c);
    if (out.categories.size() != want.size())
        throw DataError("subset: some requested categories are missing");
    return out;
}

TrainingPair resolve_pair(const GlyphCorpus& corpus, const TrainingPairRef& ref) {
    const auto& cat = corpus.categories.at(ref.category);
    auto style_img = [&](int idx) -> const GlyphImage& {
        if (idx == -2) {
            if (cat.targets.empty()) throw DataError("category " + cat.id + " lacks a canonical target");
            return cat.targets[0];
        }
        return cat.styles.at(idx);
    };
    if (ref.cond_index >= 0) {
        if (cat.targets.empty())
            throw DataError("category " + cat.id + " lacks a canonical target");
        return {cat.conditions.at(ref.cond_index), cat.targets[0], cat.id};
    }
    return {style_img(ref.src_style), style_img(ref.dst_style), cat.id};
}

std::vector<TrainingPairRef> make_many_to_one_pairs(const GlyphCorpus& corpus) {
    std::vector<TrainingPairRef> out;
    for (size_t ci = 0; ci < corpus.categories.size(); ++ci) {
        auto& cat = corpus.categories[ci];
        if (cat.targets.empty())
            throw DataError("category " + cat.id + " lacks a canonical target");
        for (size_t k = 0; k < cat.conditions.size(); ++k) {
            TrainingPairRef r;
            r.category = (int)ci;
            r.cond_index = (int)k;
            out.push_back(r);
        }
    }
    return out;
}

namespace {
int resolve_style_index(const GlyphCorpus& corpus, const std::string& name) {
    if (name == "canonical") return -2;
    for (size_t i = 0; i < corpus.style_names.size(); ++i)
        if (corpus.style_names[i] == name) return (int)i;
    throw DataError("unknown style: " + name);
}
}  // namespace

std::vector<TrainingPairRef> make_one_to_one_font_pairs(
    const GlyphCorpus& corpus, const std::vector<std::string>& source_styles,
    const std::string& target_style) {
    int dst = resolve_style_index(corpus, target_style);
    std::vector<int> srcs;
    for (auto& s : source_styles) srcs.push_back(resolve_style_index(corpus, s));
    std::vector<TrainingPairRef> out;
    for (size_t ci = 0; ci < corpus.categories.size(); ++ci) {
        auto& cat = corpus.categories[ci];
        auto check = [&](int idx) {
            if (idx == -2) {
                if (cat.targets.empty())
                    throw DataError("category " + cat.id + " lacks a canonical rendering");
            } else if (idx >= (int)cat.styles.size()) {
                throw DataError("category " + cat.id + " missing style rendering");
            }
        };
        check(dst);
        for (int s : srcs) {
            check(s);
            TrainingPairRef r;
            r.category = (int)ci;
            r.src_style = s;
            r.dst_style = dst;
            out.push_back(r);
        }
    }
    return out;
}

std::vector<PatchPair> patchify(const TrainingPair& pair, const PatchLayout& layout,
                                Rng* rng) {
    if (pair.condition.h != layout.h || pair.condition.w != layout.w ||
        pair.target.h != layout.h || pair.target.w != layout.w)
        throw UsageError("patchify: pair dimensions do not match layout");
    std::vector<int> order(layout.d);
    for (int i = 0; i < layout.d; ++i) order[i] = i;
    if (rng) rng->shuffle(order);
    std::vector<PatchPair> out;
    out.reserve(layout.d);
    for (int d : order)
        out.push_back({crop_patch(pair.target, layout, d),
                       crop_patch(pair.condition, layout, d), d});
    return out;
}

// ---------------------------------------------------------------------------
// synthetic generator

namespace {

struct Pt {
    double x, y;
};

struct Stroke {
    std::vector<Pt> poly;  // polyline in unit coords
    double width;          // half-width is width/2
};

Pt lerp(Pt a, Pt b, double t) { return {a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t}; }

double seg_dist(Pt p, Pt a, Pt b) {
    double vx = b.x - a.x, vy = b.y - a.y;
    double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

double poly_dist(Pt p, const std::vector<Pt>& poly) {
    double best = 1e9;
    for (size_t i = 0; i + 1 < poly.size(); ++i)
        best = std::min(best, seg_dist(p, poly[i], poly[i + 1]));
    return best;
}

struct StyleParams {
    double width_mult = 1.0;
    double slant = 0.0;     // x shear per unit y
    double scale = 1.0;
    double rounding = 0.0;  // 0 = crisp edge, 1 = soft edge
};

// canonical stroke set for one category
std::vector<Stroke> make_category_strokes(Rng rng) {
    int n = 3 + (int)rng.bounded(5);  // 3..7
    auto lattice = [&](int i) { return 0.15 + 0.175 * i; };
    std::vector<Stroke> strokes;
    for (int s = 0; s < n; ++s) {
        Pt p0, p1;
        do {
            p0 = {lattice((int)rng.bounded(5)), lattice((int)rng.bounded(5))};
            p1 = {lattice((int)rng.bounded(5)), lattice((int)rng.bounded(5))};
        } while (std::hypot(p1.x - p0.x, p1.y - p0.y) < 0.2);
        bool arc = rng.bernoulli(0.3);
        Stroke st;
        st.width = 0.05 * (1.0 + rng.uniform(-0.3, 0.3));
        if (arc) {
            Pt mid = lerp(p0, p1, 0.5);
            double nx = -(p1.y - p0.y), ny = p1.x - p0.x;
            double nl = std::hypot(nx, ny);
            double bow = rng.uniform(-0.25, 0.25);
            Pt ctrl{mid.x + nx / nl * bow, mid.y + ny / nl * bow};
            for (int i = 0; i <= 24; ++i) {
                double t = i / 24.0;
                Pt q0 = lerp(p0, ctrl, t), q1 = lerp(ctrl, p1, t);
                st.poly.push_back(lerp(q0, q1, t));
            }
        } else {
            st.poly = {p0, p1};
        }
        strokes.push_back(std::move(st));
    }
    return strokes;
}

StyleParams draw_style(Rng rng) {
    StyleParams sp;
    sp.width_mult = rng.uniform(0.55, 1.6);
    sp.slant = rng.uniform(-0.28, 0.28);
    sp.scale = rng.uniform(0.85, 1.05);
    sp.rounding = rng.uniform(0.0, 1.0);
    return sp;
}

Pt apply_style(Pt p, const StyleParams& sp) {
    double cx = p.x - 0.5, cy = p.y - 0.5;
    cx = cx * sp.scale + sp.slant * cy;
    cy = cy * sp.scale;
    return {cx + 0.5, cy + 0.5};
}

GlyphImage render_strokes(const std::vector<Stroke>& strokes, const StyleParams& sp,
                          int h, int w, int c, Role role) {
    std::vector<double> cov((size_t)h * w, 0.0);
    double aa_base = 1.0 / (double)std::max(h, w);
    for (auto& st : strokes) {
        Stroke t;
        t.width = st.width * sp.width_mult;
        t.poly.reserve(st.poly.size());
        for (auto p : st.poly) t.poly.push_back(apply_style(p, sp));
        double halfw = t.width / 2.0;
        double aa = aa_base * (1.0 + 2.0 * sp.rounding);
        double reach = halfw + aa;
        double minx = 1e9, miny = 1e9, maxx = -1e9, maxy = -1e9;
        for (auto p : t.poly) {
            minx = std::min(minx, p.x);
            maxx = std::max(maxx, p.x);
            miny = std::min(miny, p.y);
            maxy = std::max(maxy, p.y);
        }
        int x0 = std::max(0, (int)std::floor((minx - reach) * w));
        int x1 = std::min(w - 1, (int)std::ceil((maxx + reach) * w));
        int y0 = std::max(0, (int)std::floor((miny - reach) * h));
        int y1 = std::min(h - 1, (int)std::ceil((maxy + reach) * h));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                Pt p{(x + 0.5) / w, (y + 0.5) / h};
                double d = poly_dist(p, t.poly);
                double v = std::clamp((halfw - d) / aa + 0.5, 0.0, 1.0);
                size_t i = (size_t)y * w + x;
                cov[i] = std::max(cov[i], v);
            }
    }
    GlyphImage img(h, w, 1, role);
    for (size_t i = 0; i < cov.size(); ++i) img.pixels[i] = (float)(1.0 - 2.0 * cov[i]);
    return to_channels(img, c);
}

}  // namespace

GlyphCorpus synth_corpus(int n_categories, int n_ancient_variants, int n_styles,
                         uint64_t seed, int h, int w, int c) {
    if (n_categories < 1 || n_ancient_variants < 1 || n_styles < 1)
        throw UsageError("synth_corpus: all counts must be >= 1");
    GlyphCorpus corpus;
    corpus.provenance = "synthetic";
    corpus.generator_seed = seed;
    corpus.generator_version = kSynthGeneratorVersion;
    corpus.height = h;
    corpus.width = w;
    corpus.channels = c;
    Rng root(seed);
    for (int s = 0; s < n_styles; ++s) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "style_%02d", s);
        corpus.style_names.push_back(buf);
    }
    std::vector<StyleParams> styles;
    for (int s = 0; s < n_styles; ++s) styles.push_back(draw_style(root.derive(0x5000 + s)));

    for (int ci = 0; ci < n_categories; ++ci) {
        GlyphCorpus::Category cat;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "cat_%04d", ci);
        cat.id = buf;
        auto strokes = make_category_strokes(root.derive(0x100 + ci));
        cat.n_strokes = (int)strokes.size();

        StyleParams canonical;  // identity
        cat.targets.push_back(render_strokes(strokes, canonical, h, w, c, Role::target));
        cat.targets.back().category = cat.id;

        for (int s = 0; s < n_styles; ++s) {
            cat.styles.push_back(render_strokes(strokes, styles[s], h, w, c,
                                                Role::style_reference));
            cat.styles.back().category = cat.id;
        }

        for (int v = 0; v < n_ancient_variants; ++v) {
            Rng vr = root.derive(0x9000 + (uint64_t)ci * 1024 + v);
            // dropout each stroke with p = 0.15, then restore lowest-index
            // dropped strokes until at least 2 survive
            std::vector<int> kept;
            for (int s = 0; s < (int)strokes.size(); ++s)
                if (!vr.bernoulli(0.15)) kept.push_back(s);
            for (int s = 0; (int)kept.size() < 2 && s < (int)strokes.size(); ++s)
                if (std::find(kept.begin(), kept.end(), s) == kept.end()) {
                    kept.push_back(s);
                    std::sort(kept.begin(), kept.end());
                }
            std::vector<Stroke> anc;
            for (int s : kept) {
                Stroke st = strokes[s];
                double rot = vr.uniform(-0.14, 0.14);
                double tx = vr.uniform(-0.10, 0.10), ty = vr.uniform(-0.10, 0.10);
                st.width *= (1.0 + vr.uniform(-0.3, 0.4));
                double cxm = 0.0, cym = 0.0;
                for (auto p : st.poly) {
                    cxm += p.x;
                    cym += p.y;
                }
                cxm /= (double)st.poly.size();
                cym /= (double)st.poly.size();
                double cs = std::cos(rot), sn = std::sin(rot);
                for (auto& p : st.poly) {
                    double dx = p.x - cxm, dy = p.y - cym;
                    p = {cxm + cs * dx - sn * dy + tx, cym + sn * dx + cs * dy + ty};
                }
                anc.push_back(std::move(st));
            }
            StyleParams ancient_style;
            ancient_style.width_mult = 0.8;  // thinner, carved look
            cat.conditions.push_back(
                render_strokes(anc, ancient_style, h, w, c, Role::condition));
            cat.conditions.back().category = cat.id;
            cat.variant_kept_strokes.push_back(kept);
        }
        corpus.categories.push_back(std::move(cat));
    }
    return corpus;
}

}  // namespace obsd
