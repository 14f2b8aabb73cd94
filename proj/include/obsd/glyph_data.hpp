#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "obsd/common.hpp"
#include "obsd/image.hpp"
#include "obsd/patch.hpp"

namespace obsd {

// In-memory corpus: per category, ancient-script condition images, modern
// target rendering(s) (canonical = targets[0]) and style-reference renderings
// aligned with style_names.
struct GlyphCorpus {
    struct Category {
        std::string id;
        std::vector<GlyphImage> conditions;
        std::vector<GlyphImage> targets;
        std::vector<GlyphImage> styles;
        // synthetic provenance: which canonical strokes survive in each
        // condition variant, and the canonical stroke count
        std::vector<std::vector<int>> variant_kept_strokes;
        int n_strokes = 0;
    };

    std::vector<Category> categories;  // sorted by id
    std::vector<std::string> style_names;
    std::string provenance;  // "real" | "synthetic"
    uint64_t generator_seed = 0;
    std::string generator_version;
    int height = 0, width = 0, channels = 0;

    const Category& category(const std::string& id) const;
    std::vector<std::string> category_ids() const;
    size_t image_count() const;
    std::string digest() const;
};

struct IngestReport {
    std::vector<std::string> skipped_files;
    std::vector<std::string> warnings;
};

// Loads root/<category>/<role>/<files> (PGM/PPM), registering everything to
// h x w x c. Unreadable files are skipped with a warning; empty categories or
// an empty root are errors.
GlyphCorpus ingest(const std::filesystem::path& root, int h, int w, int c,
                   IngestReport* report = nullptr);

void write_corpus(const std::filesystem::path& root, const GlyphCorpus& corpus,
                  bool force = false);
void write_corpus_manifest(const std::filesystem::path& path, const GlyphCorpus& corpus);

struct SplitSpec {
    double test_fraction = 0.1;
    uint64_t seed = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
};

// Category-disjoint split; deterministic in (sorted ids, seed).
SplitSpec split_categories(const GlyphCorpus& corpus, double test_fraction, uint64_t seed);
GlyphCorpus subset(const GlyphCorpus& corpus, const std::vector<std::string>& ids);

// Lightweight pair descriptor resolved against a corpus.
struct TrainingPairRef {
    int category = -1;
    int cond_index = -1;  // many-to-one: index into conditions
    int src_style = -1;   // one-to-one: index into styles, -2 = canonical
    int dst_style = -1;
};

struct TrainingPair {
    const GlyphImage& condition;
    const GlyphImage& target;
    const std::string& category;
};

TrainingPair resolve_pair(const GlyphCorpus& corpus, const TrainingPairRef& ref);

// One pair per condition image, target = the category's canonical rendering.
std::vector<TrainingPairRef> make_many_to_one_pairs(const GlyphCorpus& corpus);

// One pair per (category, source style): source rendering -> target rendering.
// Style names are corpus.style_names entries or "canonical".
std::vector<TrainingPairRef> make_one_to_one_font_pairs(
    const GlyphCorpus& corpus, const std::vector<std::string>& source_styles,
    const std::string& target_style);

// Aligned patch crops of a pair; natural order, or shuffled when rng given.
struct PatchPair {
    GlyphImage target_patch;
    GlyphImage cond_patch;
    int location = 0;
};
std::vector<PatchPair> patchify(const TrainingPair& pair, const PatchLayout& layout,
                                Rng* rng = nullptr);

// Deterministic stroke-lattice glyph generator (desk-scale corpus stand-in).
// Per category: 3-7 stroke primitives; canonical rendering; n_styles style
// variants (width/slant/rounding); n_variants ancient variants via per-stroke
// jitter, dropout (p = 0.15, always keeping >= 2 strokes) and thickness noise.
GlyphCorpus synth_corpus(int n_categories, int n_ancient_variants, int n_styles,
                         uint64_t seed, int h = 128, int w = 128, int c = 3);

extern const char* kSynthGeneratorVersion;

}  // namespace obsd
